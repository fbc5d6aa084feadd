//! Per-timestep fitting of dense corrective forces.
//!
//! For each step the fit minimizes
//!
//! ```text
//!   ‖P(Sim(s_t, f_ext + f)) − target‖² + λ‖f‖²
//! ```
//!
//! over the force field `f`, where `P` is the identity (full-state targets)
//! or the marker interpolation (sparse targets). Gradients chain the adjoint
//! of the implicit step through `P`. Within a trajectory each step warm-starts
//! from the previous optimum; the first step starts from i.i.d. normal noise.
//! The trajectory advances on its own fitted forces, so the recorded states
//! match what the corrected simulator visits at inference time.

use crate::error::{Error, Result};
use crate::io;
use crate::lbfgs::{self, LbfgsConfig};
use crate::markers::{interpolate, interpolate_vjp, MarkerSet};
use crate::sim::{LoadSpec, Sim, SimState};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitConfig {
    /// L2 regularization weight on the squared Newton-norm of the force.
    pub reg_lambda: f64,
    pub lbfgs_memory: usize,
    pub lbfgs_max_iters: usize,
    /// Gradient ∞-norm termination.
    pub grad_tol: f64,
    /// Std-dev of the random first-step initialization, Newtons.
    pub init_sigma: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            reg_lambda: 1e-4,
            lbfgs_memory: 10,
            lbfgs_max_iters: 200,
            grad_tol: 1e-8,
            // N(0, 1e-4) read as variance 1e-4.
            init_sigma: 1e-2,
        }
    }
}

impl FitConfig {
    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            memory: self.lbfgs_memory,
            max_iters: self.lbfgs_max_iters,
            grad_tol: self.grad_tol,
            ls_max_steps: 30,
        }
    }
}

/// Target of one fitted step.
pub enum FitTarget<'a> {
    /// Ground-truth next positions `q̄_{t+1}`, length 3N.
    FullState(&'a [f64]),
    /// Ground-truth marker positions `x̄_{t+1}`.
    Markers {
        set: &'a MarkerSet,
        x: &'a [[f64; 3]],
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub n_evals: usize,
    pub final_objective: f64,
    pub final_data_term: f64,
    pub converged: bool,
}

fn random_force(n: usize, sigma: f64, sim: &Sim, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma.max(0.0)).unwrap();
    let mut f = vec![0.0; n];
    if sigma > 0.0 {
        for node in 0..sim.mesh.num_nodes() {
            if sim.mesh.is_dirichlet(node) {
                continue;
            }
            for d in 0..3 {
                f[3 * node + d] = normal.sample(rng);
            }
        }
    }
    f
}

/// Objective + gradient for a candidate force; `None` when the forward solve
/// diverges.
fn eval_candidate(
    sim: &Sim,
    state: &SimState,
    base_load: &LoadSpec,
    target: &FitTarget,
    reg_lambda: f64,
    f: &[f64],
    guess: Option<&[f64]>,
) -> Option<(f64, f64, Vec<f64>, SimState)> {
    let n = f.len();
    let mut load = base_load.clone();
    for (a, fi) in load.applied.iter_mut().zip(f) {
        *a += fi;
    }
    // A stale warm-start guess must not make a feasible force look divergent;
    // retry from the default predictor before rejecting the candidate.
    let next = match sim.step_with_guess(state, &load, guess) {
        Ok(s) => s,
        Err(_) if guess.is_some() => sim.step(state, &load).ok()?,
        Err(_) => return None,
    };

    let (data_term, dl_dq) = match target {
        FitTarget::FullState(q_bar) => {
            let mut data = 0.0;
            let mut dl_dq = vec![0.0; n];
            for i in 0..n {
                let d = next.q[i] - q_bar[i];
                data += d * d;
                dl_dq[i] = 2.0 * d;
            }
            (data, dl_dq)
        }
        FitTarget::Markers { set, x } => {
            let sim_markers = interpolate(sim.mesh, set, &next.q).ok()?;
            let mut data = 0.0;
            let mut cot = vec![[0.0; 3]; set.len()];
            for (m, (xm, xb)) in sim_markers.iter().zip(x.iter()).enumerate() {
                for d in 0..3 {
                    let diff = xm[d] - xb[d];
                    data += diff * diff;
                    cot[m][d] = 2.0 * diff;
                }
            }
            let dl_dq = interpolate_vjp(sim.mesh, set, &next.q, &cot).ok()?;
            (data, dl_dq)
        }
    };

    let zero = vec![0.0; n];
    let mut grad = sim.step_adjoint(&next, &dl_dq, &zero).ok()?;
    let mut reg = 0.0;
    for node in 0..sim.mesh.num_nodes() {
        for d in 0..3 {
            let i = 3 * node + d;
            if sim.mesh.is_dirichlet(node) {
                grad[i] = 0.0;
            } else {
                reg += f[i] * f[i];
                grad[i] += 2.0 * reg_lambda * f[i];
            }
        }
    }
    let obj = data_term + reg_lambda * reg;
    if !obj.is_finite() {
        return None;
    }
    Some((obj, data_term, grad, next))
}

/// Fits the corrective force for one step. Starts from `warm_start` when
/// given, otherwise from i.i.d. normal noise drawn from `rng`.
pub fn fit_step(
    sim: &Sim,
    state: &SimState,
    base_load: &LoadSpec,
    target: &FitTarget,
    cfg: &FitConfig,
    warm_start: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, FitReport, SimState)> {
    let n = sim.mesh.num_dofs();
    let x0 = match warm_start {
        Some(w) => w.to_vec(),
        None => random_force(n, cfg.init_sigma, sim, rng),
    };

    // The last converged forward solution warm-starts the next Newton solve;
    // the converged step does not depend on the guess.
    let cache: RefCell<Option<(Vec<f64>, f64, SimState)>> = RefCell::new(None);
    let (f_star, report) = lbfgs::minimize(&cfg.lbfgs(), x0, |f, grad| {
        let guess = cache.borrow().as_ref().map(|(_, _, s)| s.q.clone());
        match eval_candidate(sim, state, base_load, target, cfg.reg_lambda, f, guess.as_deref())
        {
            Some((obj, data, g, next)) => {
                grad.copy_from_slice(&g);
                *cache.borrow_mut() = Some((f.to_vec(), data, next));
                obj
            }
            None => {
                grad.fill(0.0);
                f64::INFINITY
            }
        }
    });

    if !report.final_value.is_finite() {
        return Err(Error::FitDiverged { step: state.t });
    }
    // The cache holds the last *evaluated* point; re-evaluate at the returned
    // minimizer if the line search moved past it.
    let (data_term, next) = {
        let c = cache.borrow();
        match c.as_ref() {
            Some((fc, data, next)) if fc == &f_star => (*data, next.clone()),
            _ => {
                drop(c);
                let guess = cache.borrow().as_ref().map(|(_, _, s)| s.q.clone());
                let (_, data, _, next) = eval_candidate(
                    sim,
                    state,
                    base_load,
                    target,
                    cfg.reg_lambda,
                    &f_star,
                    guess.as_deref(),
                )
                .ok_or(Error::FitDiverged { step: state.t })?;
                (data, next)
            }
        }
    };
    Ok((
        f_star,
        FitReport {
            iterations: report.iterations,
            n_evals: report.n_evals,
            final_objective: report.final_value,
            final_data_term: data_term,
            converged: report.converged,
        },
        next,
    ))
}

/// Ground-truth observations for a whole trajectory.
pub enum TrajectoryTargets<'a> {
    /// `T` frames of next-step positions (frame `t` is the target after step
    /// `t+1`).
    FullState(&'a [Vec<f64>]),
    /// `T` frames of marker positions.
    Markers {
        set: &'a MarkerSet,
        frames: &'a [Vec<[f64; 3]>],
    },
}

impl TrajectoryTargets<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrajectoryTargets::FullState(f) => f.len(),
            TrajectoryTargets::Markers { frames, .. } => frames.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn step_target(&self, t: usize) -> FitTarget<'_> {
        match self {
            TrajectoryTargets::FullState(f) => FitTarget::FullState(&f[t]),
            TrajectoryTargets::Markers { set, frames } => FitTarget::Markers {
                set,
                x: &frames[t],
            },
        }
    }
}

/// One fitted trajectory: aligned `(s_t, f_ext_t, f_res*_t)` sequences.
#[derive(Debug, Clone)]
pub struct FittedTrajectory {
    pub id: String,
    /// `T + 1` states visited by the corrected simulator.
    pub states: Vec<SimState>,
    pub f_ext: Vec<Vec<f64>>,
    pub f_res: Vec<Vec<f64>>,
    pub reports: Vec<FitReport>,
}

/// Fits a whole trajectory with warm starts, advancing the state on the
/// fitted forces.
pub fn fit_trajectory(
    sim: &Sim,
    id: &str,
    initial: &SimState,
    f_ext: &[Vec<f64>],
    gravity_on: bool,
    targets: &TrajectoryTargets,
    cfg: &FitConfig,
    seed: u64,
) -> Result<FittedTrajectory> {
    let steps = targets.len();
    assert_eq!(f_ext.len(), steps, "f_ext length must match targets");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(initial.clone());
    let mut forces = Vec::with_capacity(steps);
    let mut reports = Vec::with_capacity(steps);
    let mut warm: Option<Vec<f64>> = None;
    for t in 0..steps {
        let base_load = LoadSpec {
            gravity_on,
            applied: f_ext[t].clone(),
        };
        let target = targets.step_target(t);
        let (f_star, report, next) = fit_step(
            sim,
            states.last().unwrap(),
            &base_load,
            &target,
            cfg,
            warm.as_deref(),
            &mut rng,
        )
        .map_err(|e| Error::TrajectoryFailed {
            id: format!("{id}@{t}"),
            source: Box::new(e),
        })?;
        states.push(next);
        warm = Some(f_star.clone());
        forces.push(f_star);
        reports.push(report);
    }
    Ok(FittedTrajectory {
        id: id.to_string(),
        states,
        f_ext: f_ext.to_vec(),
        f_res: forces,
        reports,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialStateReport {
    pub final_marker_rms: f64,
    pub converged: bool,
    pub steps: usize,
}

/// Recovers the unknown deformed initial state from its marker snapshot by
/// driving the markers to `x_init` with virtual forces over `t_v` quasi-static
/// steps (per-step fits with warm starts against the constant target).
pub fn fit_initial_state(
    sim: &Sim,
    markers: &MarkerSet,
    x_init: &[[f64; 3]],
    t_v: usize,
    gravity_on: bool,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(SimState, InitialStateReport)> {
    assert!(t_v >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SimState::rest(sim.mesh);
    let base_load = if gravity_on {
        LoadSpec::gravity_only(sim.mesh.num_dofs())
    } else {
        LoadSpec::free(sim.mesh.num_dofs())
    };
    let target = FitTarget::Markers {
        set: markers,
        x: x_init,
    };
    let mut warm: Option<Vec<f64>> = None;
    for _ in 0..t_v {
        let (f_star, _, next) = fit_step(
            sim,
            &state,
            &base_load,
            &target,
            cfg,
            warm.as_deref(),
            &mut rng,
        )?;
        warm = Some(f_star);
        state = next;
    }
    let sim_markers = interpolate(sim.mesh, markers, &state.q)?;
    let mut rms = 0.0;
    for (a, b) in sim_markers.iter().zip(x_init) {
        for d in 0..3 {
            rms += (a[d] - b[d]).powi(2);
        }
    }
    let rms = (rms / sim_markers.len() as f64).sqrt();
    let report = InitialStateReport {
        final_marker_rms: rms,
        converged: rms < 1e-3,
        steps: t_v,
    };
    state.t = 0;
    Ok((state, report))
}

/// Train/val/test split by trajectory id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// The augmented dataset: fitted trajectories plus split tags.
#[derive(Debug, Clone)]
pub struct ResidualDataset {
    pub n_nodes: usize,
    pub h: f64,
    /// Whether `f_ext` carries actuation (and belongs in the network input).
    pub actuated: bool,
    pub trajectories: Vec<FittedTrajectory>,
    pub splits: Splits,
}

impl ResidualDataset {
    pub fn by_id(&self, id: &str) -> Option<&FittedTrajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn split_trajectories(&self, ids: &[String]) -> Vec<&FittedTrajectory> {
        ids.iter().filter_map(|id| self.by_id(id)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for traj in &self.trajectories {
            io::write_trajectory(
                &dir.join(&traj.id),
                self.h,
                &traj.states,
                Some(&traj.f_ext),
                Some(&traj.f_res),
            )?;
        }
        let meta = serde_json::json!({
            "N": self.n_nodes,
            "h": self.h,
            "actuated": self.actuated,
        });
        std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
        let file = std::fs::File::create(dir.join("splits.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &self.splits)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value =
            serde_json::from_reader(std::fs::File::open(dir.join("dataset.json"))?)?;
        let splits: Splits =
            serde_json::from_reader(std::fs::File::open(dir.join("splits.json"))?)?;
        let n_nodes = meta["N"]
            .as_u64()
            .ok_or_else(|| Error::Container("dataset.json missing N".into()))?
            as usize;
        let h = meta["h"]
            .as_f64()
            .ok_or_else(|| Error::Container("dataset.json missing h".into()))?;
        let actuated = meta["actuated"].as_bool().unwrap_or(false);
        let mut trajectories = Vec::new();
        let all_ids: Vec<&String> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .collect();
        for id in all_ids {
            let data = io::read_trajectory(&dir.join(id))?;
            let f_ext = data
                .f_ext
                .ok_or_else(|| Error::Container(format!("{id} missing f_ext")))?;
            let f_res = data
                .f_res
                .ok_or_else(|| Error::Container(format!("{id} missing f_res")))?;
            trajectories.push(FittedTrajectory {
                id: id.clone(),
                states: data.states,
                f_ext,
                f_res,
                reports: Vec::new(),
            });
        }
        Ok(Self {
            n_nodes,
            h,
            actuated,
            trajectories,
            splits,
        })
    }
}

/// One trajectory's inputs for dataset construction.
pub struct FitJob {
    pub id: String,
    pub initial: SimState,
    pub f_ext: Vec<Vec<f64>>,
    pub targets: OwnedTargets,
}

/// Owned version of [`TrajectoryTargets`] for job queues.
pub enum OwnedTargets {
    FullState(Vec<Vec<f64>>),
    Markers {
        set: MarkerSet,
        frames: Vec<Vec<[f64; 3]>>,
    },
}

impl OwnedTargets {
    pub fn borrow(&self) -> TrajectoryTargets<'_> {
        match self {
            OwnedTargets::FullState(f) => TrajectoryTargets::FullState(f),
            OwnedTargets::Markers { set, frames } => TrajectoryTargets::Markers { set, frames },
        }
    }
}

/// Per-job seed derived from the global seed; independent of scheduling.
pub fn job_seed(global_seed: u64, job_index: usize) -> u64 {
    global_seed ^ (job_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits every job (in parallel) and assembles the dataset.
pub fn build_dataset(
    sim: &Sim,
    jobs: &[FitJob],
    splits: Splits,
    gravity_on: bool,
    actuated: bool,
    cfg: &FitConfig,
    seed: u64,
) -> Result<ResidualDataset> {
    use rayon::prelude::*;
    let fitted: Result<Vec<FittedTrajectory>> = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, job)| {
            fit_trajectory(
                sim,
                &job.id,
                &job.initial,
                &job.f_ext,
                gravity_on,
                &job.targets.borrow(),
                cfg,
                job_seed(seed, idx),
            )
        })
        .collect();
    Ok(ResidualDataset {
        n_nodes: sim.mesh.num_nodes(),
        h: sim.cfg.h,
        actuated,
        trajectories: fitted?,
        splits,
    })
}
