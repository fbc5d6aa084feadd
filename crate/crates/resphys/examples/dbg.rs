// debug: exact regularized-LS optimum for the sim-to-sim step fit
use resphys::mesh::{build_voxel_beam, ClampFace};
use resphys::material::Material;
use resphys::sim::{Sim, SimState, LoadSpec, StepConfig};
use resphys::elastic::*;
use nalgebra::{DMatrix, DVector};

fn main() {
    let mesh = build_voxel_beam([0.10, 0.03, 0.03], 0.01, ClampFace::XNeg).unwrap();
    let n = mesh.num_dofs();
    let mat1 = Material::new(215e3, 0.45, 1070.0).unwrap();
    let mat2 = Material::new(264e3, 0.499, 1070.0).unwrap();
    let sim1 = Sim::new(&mesh, mat1, StepConfig::default());
    let sim2 = Sim::new(&mesh, mat2, StepConfig::default());
    let load = LoadSpec::gravity_only(n);
    // 50 g tip weight on the free tip-face nodes, settled with Sim2, then released.
    let mut tip = LoadSpec::gravity_only(n);
    let tip_nodes: Vec<usize> = (0..mesh.num_nodes())
        .filter(|&i| (mesh.nodes()[i][0]-0.10).abs() < 1e-12 && !mesh.is_dirichlet(i)).collect();
    let w = 0.05*9.81/ tip_nodes.len() as f64;
    for &i in &tip_nodes { tip.applied[3*i+2] = -w; }
    let q0 = sim2.static_solve(&mesh.rest_positions(), &tip.applied, true).unwrap();
    let mut state = SimState { q: q0, v: vec![0.0; n], t: 0 };
    // a few release steps so there is motion
    for _ in 0..3 { state = sim2.step(&state, &load).unwrap(); }
    let target = sim2.step(&state, &load).unwrap();
    let plain = sim1.step(&state, &load).unwrap();
    let h2 = 0.01f64 * 0.01;

    // J = h² A⁻¹ with A = M + h²K₁(q₁_plain), Dirichlet-projected
    let mass = sim1.mass().to_vec();
    let k = tangent_stiffness(&mesh, &mat1, &plain.q);
    let mut a = k.to_dense() * h2;
    for i in 0..n { a[(i,i)] += mass[i]; }
    for node in mesh.dirichlet_nodes() { for d in 0..3 { let i = 3*node+d;
        for j in 0..n { a[(i,j)] = 0.0; a[(j,i)] = 0.0; } a[(i,i)] = 1.0; } }
    let a_inv = a.clone().lu().try_inverse().unwrap();
    let mut j = a_inv * h2;
    for node in mesh.dirichlet_nodes() { for d in 0..3 { let i = 3*node+d;
        for c in 0..n { j[(i,c)] = 0.0; j[(c,i)] = 0.0; } } }

    let b = DVector::from_fn(n, |i,_| target.q[i] - plain.q[i]);
    let b_norm2 = b.norm_squared();
    println!("initial data term (linear model): {:.4e}", b_norm2);

    for lambda in [0.0f64, 1e-10, 1e-8, 1e-7, 1e-6, 1e-4] {
        // minimize ||J f - b||² + λ||f||² → (JᵀJ + λ) f = Jᵀ b
        let jtj = j.transpose() * &j;
        let mut lhs = jtj;
        for i in 0..n { lhs[(i,i)] += lambda; }
        for node in mesh.dirichlet_nodes() { for d in 0..3 { lhs[(3*node+d,3*node+d)] = 1.0; } }
        let rhs = j.transpose() * &b;
        let f = lhs.lu().solve(&rhs).unwrap();
        let resid = &j * &f - &b;
        println!("λ={lambda:8.1e}: data={:.4e} (ratio {:.3e})  ‖f‖∞={:.3e} ‖f‖₂={:.3e}",
            resid.norm_squared(), resid.norm_squared()/b_norm2,
            f.amax(), f.norm());
    }
    let _ = DMatrix::<f64>::zeros(1,1);
}
