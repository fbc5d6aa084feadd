//! Corotational linear elasticity on trilinear hexahedra.
//!
//! Per quadrature point the energy density is
//!
//! ```text
//!   Ψ(F) = μ‖F − R‖²_F + (λ/2)·tr²(RᵀF − I)
//! ```
//!
//! with `F` the trilinear deformation gradient and `R` the rotation factor of
//! the polar decomposition `F = R S`. The first Piola stress is
//! `P = 2μ(F − R) + λ tr(S − I) R`; the rotation-derivative terms drop out of
//! the gradient because `S − I` is symmetric while `RᵀδR` is skew. They do
//! appear in the Hessian:
//!
//! ```text
//!   δP = 2μ δF + λ (R : δF) R + (λ tr(S − I) − 2μ) δR
//!   δR = R [w]ₓ,   w = 2 (tr(S)I − S)⁻¹ axial(skew(Rᵀ δF))
//! ```
//!
//! Elements are congruent axis-aligned voxels, so the reference shape-function
//! gradients and the quadrature weight are shared by every element.
//!
//! Integration uses the full 2×2×2 Gauss rule (8 points), which is free of
//! hourglass modes for trilinear hexes.

use crate::banded::SymBanded;
use crate::material::Material;
use crate::mesh::{HexMesh, CORNER_OFFSETS};
use nalgebra::{Matrix3, Vector3};

/// Shared per-voxel quadrature data: rest-frame shape gradients at each of the
/// 8 Gauss points and the common integration weight `w·det(J₀)`.
#[derive(Debug, Clone)]
pub struct QuadratureTable {
    /// `grads[qp][node]` = ∇₀N_node at Gauss point `qp`.
    pub grads: [[[f64; 3]; 8]; 8],
    pub weight: f64,
}

/// Corner sign pattern (±1) derived from the unit corner offsets.
fn corner_signs() -> [[f64; 3]; 8] {
    let mut s = [[0.0; 3]; 8];
    for (k, off) in CORNER_OFFSETS.iter().enumerate() {
        for d in 0..3 {
            s[k][d] = if off[d] == 1 { 1.0 } else { -1.0 };
        }
    }
    s
}

pub fn quadrature_table(voxel_edge: f64) -> QuadratureTable {
    let signs = corner_signs();
    let g = 1.0 / 3.0_f64.sqrt();
    let mut grads = [[[0.0; 3]; 8]; 8];
    // The reference cube [-1,1]³ maps to the voxel by x = (ξ+1)·e/2, so
    // ∇ₓN = (2/e)·∇_ξN and det(J₀) = (e/2)³ with unit Gauss weights.
    let scale = 2.0 / voxel_edge;
    for (qp, off) in CORNER_OFFSETS.iter().enumerate() {
        let xi = [
            if off[0] == 1 { g } else { -g },
            if off[1] == 1 { g } else { -g },
            if off[2] == 1 { g } else { -g },
        ];
        for k in 0..8 {
            let s = signs[k];
            grads[qp][k] = [
                0.125 * s[0] * (1.0 + s[1] * xi[1]) * (1.0 + s[2] * xi[2]) * scale,
                0.125 * (1.0 + s[0] * xi[0]) * s[1] * (1.0 + s[2] * xi[2]) * scale,
                0.125 * (1.0 + s[0] * xi[0]) * (1.0 + s[1] * xi[1]) * s[2] * scale,
            ];
        }
    }
    QuadratureTable {
        grads,
        weight: (voxel_edge / 2.0).powi(3),
    }
}

/// Rotation and symmetric factors of the polar decomposition `F = R S`.
///
/// For invertible `F` with positive determinant a Higham iteration converges
/// quadratically; otherwise an SVD with sign correction keeps `det R = +1`.
pub fn polar_decompose(f: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let det = f.determinant();
    let r = if det > 1e-12 {
        let mut r = *f;
        for _ in 0..100 {
            let inv_t = r.try_inverse().map(|m| m.transpose());
            let Some(inv_t) = inv_t else { break };
            let next = (r + inv_t) * 0.5;
            let delta = (next - r).norm();
            r = next;
            if delta < 1e-14 {
                break;
            }
        }
        r
    } else {
        let svd = f.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut u = u;
        if (u * v_t).determinant() < 0.0 {
            // Flip the pair associated with the smallest singular value.
            for i in 0..3 {
                u[(i, 2)] = -u[(i, 2)];
            }
        }
        u * v_t
    };
    let s_raw = r.transpose() * f;
    let s = (s_raw + s_raw.transpose()) * 0.5;
    (r, s)
}

#[inline]
fn gather_deformation_gradient(
    q: &[f64],
    elem: &[usize; 8],
    grads: &[[f64; 3]; 8],
) -> Matrix3<f64> {
    let mut f = Matrix3::zeros();
    for (k, &node) in elem.iter().enumerate() {
        let p = &q[3 * node..3 * node + 3];
        let g = &grads[k];
        for r in 0..3 {
            for c in 0..3 {
                f[(r, c)] += p[r] * g[c];
            }
        }
    }
    f
}

/// Total corotational elastic energy in Joules. `Ψ(I) = 0`.
pub fn elastic_energy(mesh: &HexMesh, mat: &Material, q: &[f64]) -> f64 {
    elastic_diagnostics(mesh, mat, q).0
}

/// Energy plus the indices of elements with a non-positive-determinant
/// deformation gradient at any quadrature point.
pub fn elastic_diagnostics(mesh: &HexMesh, mat: &Material, q: &[f64]) -> (f64, Vec<usize>) {
    assert_eq!(q.len(), mesh.num_dofs());
    let table = quadrature_table(mesh.voxel_edge());
    let mut energy = 0.0;
    let mut degenerate = Vec::new();
    for (e, elem) in mesh.elements().iter().enumerate() {
        let mut bad = false;
        for qp in 0..8 {
            let f = gather_deformation_gradient(q, elem, &table.grads[qp]);
            if f.determinant() <= 0.0 {
                bad = true;
            }
            let (r, s) = polar_decompose(&f);
            let dev = f - r;
            let tr = s.trace() - 3.0;
            energy += table.weight
                * (mat.lame_mu * dev.norm_squared() + 0.5 * mat.lame_lambda * tr * tr);
        }
        if bad {
            degenerate.push(e);
        }
    }
    (energy, degenerate)
}

/// Internal elastic forces `f_int = −∂E/∂q`, accumulated into `out`.
pub fn internal_forces_into(mesh: &HexMesh, mat: &Material, q: &[f64], out: &mut [f64]) {
    assert_eq!(q.len(), mesh.num_dofs());
    assert_eq!(out.len(), mesh.num_dofs());
    out.fill(0.0);
    let table = quadrature_table(mesh.voxel_edge());
    for elem in mesh.elements() {
        for qp in 0..8 {
            let grads = &table.grads[qp];
            let f = gather_deformation_gradient(q, elem, grads);
            let (r, s) = polar_decompose(&f);
            let tr = s.trace() - 3.0;
            // P = ∂Ψ/∂F
            let p = (f - r) * (2.0 * mat.lame_mu) + r * (mat.lame_lambda * tr);
            for (k, &node) in elem.iter().enumerate() {
                let g = Vector3::from(grads[k]);
                let fk = p * g * table.weight;
                out[3 * node] -= fk[0];
                out[3 * node + 1] -= fk[1];
                out[3 * node + 2] -= fk[2];
            }
        }
    }
}

pub fn internal_forces(mesh: &HexMesh, mat: &Material, q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.num_dofs()];
    internal_forces_into(mesh, mat, q, &mut out);
    out
}

/// 9×9 Hessian of Ψ with respect to `F`, rows/cols flattened as `3·r + c`.
fn energy_hessian_wrt_f(mat: &Material, f: &Matrix3<f64>) -> [[f64; 9]; 9] {
    let (r, s) = polar_decompose(f);
    let tr = s.trace() - 3.0;
    let coeff = mat.lame_lambda * tr - 2.0 * mat.lame_mu;
    // G = tr(S)I − S, inverted once; δR = R [w]ₓ with
    // w = 2 G⁻¹ axial(skew(Rᵀ δF)).
    let g = Matrix3::identity() * s.trace() - s;
    let g_inv = g
        .try_inverse()
        .unwrap_or_else(|| (g + Matrix3::identity() * 1e-9).try_inverse().unwrap());

    let mut h = [[0.0; 9]; 9];
    for rr in 0..3 {
        for cc in 0..3 {
            let col = 3 * rr + cc;
            // δF = e_rr ⊗ e_cc
            // RᵀδF has row i equal to R[rr, i] at column cc.
            let m_col = |i: usize| r[(rr, i)]; // (RᵀδF)[i][cc] = R[rr][i]
            // skew(M) axial: a = ((M32−M23)/2, (M13−M31)/2, (M21−M12)/2)
            let m = |i: usize, j: usize| if j == cc { m_col(i) } else { 0.0 };
            let a = Vector3::new(
                0.5 * (m(2, 1) - m(1, 2)),
                0.5 * (m(0, 2) - m(2, 0)),
                0.5 * (m(1, 0) - m(0, 1)),
            );
            let w = g_inv * a * 2.0;
            let wx = Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0);
            let dr = r * wx;
            let rdotdf = r[(rr, cc)];
            for i in 0..3 {
                for j in 0..3 {
                    let mut v = mat.lame_lambda * rdotdf * r[(i, j)] + coeff * dr[(i, j)];
                    if i == rr && j == cc {
                        v += 2.0 * mat.lame_mu;
                    }
                    h[3 * i + j][col] = v;
                }
            }
        }
    }
    h
}

/// Adds `scale · K(q)` into the banded matrix, where `K = −∂f_int/∂q = ∂²E/∂q²`.
///
/// When `skip_dirichlet` is set, rows and columns of constrained DoFs are left
/// untouched (the caller owns their diagonal).
pub fn add_scaled_stiffness_into(
    mesh: &HexMesh,
    mat: &Material,
    q: &[f64],
    scale: f64,
    skip_dirichlet: bool,
    out: &mut SymBanded,
) {
    assert_eq!(q.len(), mesh.num_dofs());
    let table = quadrature_table(mesh.voxel_edge());
    let mut k_local = [[0.0f64; 24]; 24];
    for elem in mesh.elements() {
        for row in k_local.iter_mut() {
            row.fill(0.0);
        }
        for qp in 0..8 {
            let grads = &table.grads[qp];
            let f = gather_deformation_gradient(q, elem, grads);
            let h = energy_hessian_wrt_f(mat, &f);
            // K[(k,d),(k',e)] += w Σ_{c,c'} H[(d,c),(e,c')] g_k[c] g_k'[c']
            for d in 0..3 {
                for e in 0..3 {
                    // t[k][c'] = Σ_c g_k[c] H[(d,c),(e,c')]
                    let mut t = [[0.0f64; 3]; 8];
                    for k in 0..8 {
                        for cp in 0..3 {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                acc += grads[k][c] * h[3 * d + c][3 * e + cp];
                            }
                            t[k][cp] = acc;
                        }
                    }
                    for k in 0..8 {
                        for k2 in 0..8 {
                            let mut acc = 0.0;
                            for cp in 0..3 {
                                acc += t[k][cp] * grads[k2][cp];
                            }
                            k_local[3 * k + d][3 * k2 + e] += table.weight * acc;
                        }
                    }
                }
            }
        }
        for (k, &node_i) in elem.iter().enumerate() {
            if skip_dirichlet && mesh.is_dirichlet(node_i) {
                continue;
            }
            for (k2, &node_j) in elem.iter().enumerate() {
                if skip_dirichlet && mesh.is_dirichlet(node_j) {
                    continue;
                }
                for d in 0..3 {
                    let gi = 3 * node_i + d;
                    for e in 0..3 {
                        let gj = 3 * node_j + e;
                        if gi >= gj {
                            out.add(gi, gj, scale * k_local[3 * k + d][3 * k2 + e]);
                        }
                    }
                }
            }
        }
    }
}

/// Tangent stiffness `K(q) = −∂f_int/∂q`, symmetric banded.
pub fn tangent_stiffness(mesh: &HexMesh, mat: &Material, q: &[f64]) -> SymBanded {
    let mut k = SymBanded::zeros(mesh.num_dofs(), mesh.half_bandwidth());
    add_scaled_stiffness_into(mesh, mat, q, 1.0, false, &mut k);
    k
}

/// Row-sum lumped mass, one entry per DoF. Total mass is exactly `ρ·volume`.
pub fn lumped_mass(mesh: &HexMesh, density: f64) -> Vec<f64> {
    assert!(density > 0.0);
    let per_corner = density * mesh.voxel_edge().powi(3) / 8.0;
    let mut m = vec![0.0; mesh.num_dofs()];
    for elem in mesh.elements() {
        for &node in elem {
            for d in 0..3 {
                m[3 * node + d] += per_corner;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_voxel_beam, ClampFace};
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn beam_material() -> Material {
        Material::new(215e3, 0.45, 1070.0).unwrap()
    }

    fn perturbed(mesh: &HexMesh, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut q = mesh.rest_positions();
        for x in q.iter_mut() {
            *x += amplitude * (rng.gen::<f64>() - 0.5);
        }
        q
    }

    #[test]
    fn energy_zero_at_rest() {
        let mesh = build_voxel_beam([0.02, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let e = elastic_energy(&mesh, &beam_material(), &mesh.rest_positions());
        assert!(e.abs() < 1e-18, "rest energy {e}");
    }

    #[test]
    fn energy_invariant_under_rigid_motion() {
        let mesh = build_voxel_beam([0.02, 0.02, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let mat = beam_material();
        let rest = mesh.rest_positions();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let axis = nalgebra::Unit::new_normalize(Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ));
            let rot = Rotation3::from_axis_angle(&axis, rng.gen::<f64>() * std::f64::consts::TAU);
            let t = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let mut q = vec![0.0; rest.len()];
            for i in 0..mesh.num_nodes() {
                let p = Vector3::new(rest[3 * i], rest[3 * i + 1], rest[3 * i + 2]);
                let moved = rot * p + t;
                q[3 * i] = moved[0];
                q[3 * i + 1] = moved[1];
                q[3 * i + 2] = moved[2];
            }
            let e = elastic_energy(&mesh, &mat, &q);
            assert!(e.abs() < 1e-10, "rigid-motion energy {e}");
        }
    }

    #[test]
    fn uniaxial_stretch_closed_form() {
        let mesh = build_voxel_beam([0.01, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let mat = beam_material();
        let mut q = mesh.rest_positions();
        for i in 0..mesh.num_nodes() {
            q[3 * i] *= 1.01;
        }
        let vol = 0.01f64.powi(3);
        let expected = mat.lame_mu * 1e-4 * vol + 0.5 * mat.lame_lambda * 1e-4 * vol;
        let e = elastic_energy(&mesh, &mat, &q);
        assert_relative_eq!(e, expected, max_relative = 1e-10);
    }

    #[test]
    fn forces_vanish_at_rest_and_under_translation() {
        let mesh = build_voxel_beam([0.02, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let mat = beam_material();
        let f = internal_forces(&mesh, &mat, &mesh.rest_positions());
        assert!(f.iter().all(|x| x.abs() < 1e-12));
        let mut q = mesh.rest_positions();
        for i in 0..mesh.num_nodes() {
            q[3 * i] += 0.3;
            q[3 * i + 1] -= 0.1;
            q[3 * i + 2] += 0.02;
        }
        let f = internal_forces(&mesh, &mat, &q);
        assert!(f.iter().all(|x| x.abs() < 1e-9), "translated force norm");
    }

    #[test]
    fn forces_match_energy_gradient() {
        let mesh = build_voxel_beam([0.02, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let mat = beam_material();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = perturbed(&mesh, 2e-3, &mut rng);
            let f = internal_forces(&mesh, &mat, &q);
            let eps = 1e-7;
            let fscale = f.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for dof in 0..mesh.num_dofs() {
                let mut qp = q.clone();
                qp[dof] += eps;
                let ep = elastic_energy(&mesh, &mat, &qp);
                qp[dof] = q[dof] - eps;
                let em = elastic_energy(&mesh, &mat, &qp);
                let fd = -(ep - em) / (2.0 * eps);
                assert!(
                    (f[dof] - fd).abs() <= 1e-5 * fscale.max(1e-9),
                    "dof {dof}: analytic {} vs fd {fd}",
                    f[dof]
                );
            }
        }
    }

    #[test]
    fn stiffness_matches_force_jacobian() {
        let mesh = build_voxel_beam([0.02, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let mat = beam_material();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = perturbed(&mesh, 2e-3, &mut rng);
        let k = tangent_stiffness(&mesh, &mat, &q);
        let dense = k.to_dense();
        let kscale = dense.amax();
        let eps = 1e-7;
        for j in 0..mesh.num_dofs() {
            let mut qp = q.clone();
            qp[j] += eps;
            let fp = internal_forces(&mesh, &mat, &qp);
            qp[j] = q[j] - eps;
            let fm = internal_forces(&mesh, &mat, &qp);
            for i in 0..mesh.num_dofs() {
                // K = −∂f_int/∂q
                let fd = -(fp[i] - fm[i]) / (2.0 * eps);
                assert!(
                    (dense[(i, j)] - fd).abs() <= 1e-4 * kscale,
                    "K[{i},{j}] analytic {} vs fd {fd}",
                    dense[(i, j)]
                );
            }
        }
    }

    #[test]
    fn stiffness_is_symmetric_and_translation_null() {
        let mesh = build_voxel_beam([0.01, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let mat = beam_material();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = perturbed(&mesh, 3e-3, &mut rng);
        let dense = tangent_stiffness(&mesh, &mat, &q).to_dense();
        let asym = (&dense - dense.transpose()).amax();
        assert!(asym < 1e-8 * dense.amax(), "asymmetry {asym}");

        // Rigid translations are in the null space at rest.
        let rest = mesh.rest_positions();
        let k = tangent_stiffness(&mesh, &mat, &rest);
        for d in 0..3 {
            let mut t = vec![0.0; mesh.num_dofs()];
            for i in 0..mesh.num_nodes() {
                t[3 * i + d] = 1.0;
            }
            let y = k.mul_vec(&t);
            let max = y.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(max < 1e-8 * k.to_dense().amax().max(1.0), "null-space residual {max}");
        }
    }

    #[test]
    fn lumped_mass_conserves_total() {
        let mesh = build_voxel_beam([0.10, 0.03, 0.03], 0.01, ClampFace::XNeg).unwrap();
        let m = lumped_mass(&mesh, 1070.0);
        let total: f64 = m.iter().sum::<f64>() / 3.0;
        assert_relative_eq!(total, 1070.0 * 9e-5, max_relative = 1e-12);
        assert_relative_eq!(total, 0.0963, max_relative = 1e-12);

        let single = build_voxel_beam([0.01, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let m = lumped_mass(&single, 1070.0);
        let expect = 1070.0 * 1e-6 / 8.0;
        for node in 0..8 {
            assert_relative_eq!(m[3 * node], expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn polar_recovers_pure_rotation() {
        let rot = Rotation3::from_euler_angles(0.3, -0.8, 1.2);
        let f: Matrix3<f64> = *rot.matrix();
        let (r, s) = polar_decompose(&f);
        assert!((r - f).norm() < 1e-12);
        assert!((s - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn polar_handles_reflection() {
        let f = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -0.5));
        let (r, s) = polar_decompose(&f);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-10);
        // RᵀR = I
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-10);
        assert!((r * s - f).norm() < 1e-10);
    }

    #[test]
    fn degenerate_elements_are_reported() {
        let mesh = build_voxel_beam([0.01, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        let mat = beam_material();
        let mut q = mesh.rest_positions();
        // Collapse the element through its mid-plane: negative Jacobian.
        for i in 0..mesh.num_nodes() {
            if mesh.nodes()[i][0] > 0.005 {
                q[3 * i] = -0.01;
            }
        }
        let (_, degenerate) = elastic_diagnostics(&mesh, &mat, &q);
        assert_eq!(degenerate, vec![0]);
    }
}
