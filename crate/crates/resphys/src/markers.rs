//! Sparse surface-marker observation model and rigid registration.
//!
//! A marker is attached to the closest boundary quad at rest: bilinear weights
//! `α` on the four face corners plus a signed offset `s` along the face
//! normal. Its deformed position is
//!
//! ```text
//!   x(q) = Σᵢ αᵢ eᵢ(q) + s·n(q)
//! ```
//!
//! where `n(q)` is the unit cross product of the two quad diagonals of the
//! deformed face (symmetric in the corners, smooth, with a cheap exact
//! derivative). Measured marker data recorded in a different frame is mapped
//! into the simulation frame by a rigid transform estimated once from the
//! undeformed-state frame (Kabsch).

use crate::error::{Error, Result};
use crate::mesh::HexMesh;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Attachment of one marker to a boundary quad.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarkerAttachment {
    /// Index into `mesh.surface_faces()`.
    pub face: usize,
    /// Bilinear corner weights, non-negative, summing to 1.
    pub alpha: [f64; 4],
    /// Signed distance along the face normal, meters.
    pub offset_s: f64,
}

/// A set of markers on the mesh surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerSet {
    pub attachments: Vec<MarkerAttachment>,
}

impl MarkerSet {
    pub fn len(&self) -> usize {
        self.attachments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attachments.is_empty()
    }
}

/// Proper rigid transform (rotation + translation).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn apply_all(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|&p| self.apply(p)).collect()
    }
}

fn face_corners(mesh: &HexMesh, face: usize, q: &[f64]) -> [Vector3<f64>; 4] {
    let nodes = mesh.surface_faces()[face].nodes;
    let mut e = [Vector3::zeros(); 4];
    for (k, &i) in nodes.iter().enumerate() {
        e[k] = Vector3::new(q[3 * i], q[3 * i + 1], q[3 * i + 2]);
    }
    e
}

/// Unit normal of a (possibly warped) quad: normalized diagonal cross product.
fn quad_normal(e: &[Vector3<f64>; 4]) -> Result<Vector3<f64>> {
    let d1 = e[2] - e[0];
    let d2 = e[3] - e[1];
    let c = d1.cross(&d2);
    let len = c.norm();
    if len < 1e-14 {
        return Err(Error::DegenerateFace { face: usize::MAX });
    }
    Ok(c / len)
}

/// Bilinear weights over the quad at parameters `(u, v)`; corners are in
/// cyclic order, so the weight vector is `((1−u)(1−v), u(1−v), uv, (1−u)v)`.
fn bilinear_alpha(u: f64, v: f64) -> [f64; 4] {
    [
        (1.0 - u) * (1.0 - v),
        u * (1.0 - v),
        u * v,
        (1.0 - u) * v,
    ]
}

/// Attaches each point to the boundary face minimizing point-to-face distance
/// at rest; rejects points farther than one voxel edge from the surface.
pub fn attach_markers(
    mesh: &HexMesh,
    rest_q: &[f64],
    marker_points: &[[f64; 3]],
) -> Result<MarkerSet> {
    if mesh.surface_faces().is_empty() {
        return Err(Error::InvalidMesh("mesh has no surface faces".into()));
    }
    let limit = mesh.voxel_edge();
    let mut attachments = Vec::with_capacity(marker_points.len());
    for (mi, &p) in marker_points.iter().enumerate() {
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: "marker point",
            });
        }
        let p = Vector3::from(p);
        let mut best: Option<(f64, usize)> = None;
        for fi in 0..mesh.surface_faces().len() {
            let e = face_corners(mesh, fi, rest_q);
            let d = point_to_quad_distance(&p, &e);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, fi));
            }
        }
        let (dist, face) = best.unwrap();
        if dist > limit {
            return Err(Error::MarkerTooFar {
                marker: mi,
                distance: dist,
                limit,
            });
        }
        let e = face_corners(mesh, face, rest_q);
        let n = quad_normal(&e)?;
        // Project onto the face plane, then invert the bilinear map there.
        let offset_s = (p - e[0]).dot(&n);
        let proj = p - n * offset_s;
        let (u, v) = inverse_bilinear(&proj, &e, &n)?;
        let mut alpha = bilinear_alpha(u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        let sum: f64 = alpha.iter().sum();
        for a in alpha.iter_mut() {
            *a /= sum;
        }
        attachments.push(MarkerAttachment {
            face,
            alpha,
            offset_s,
        });
    }
    Ok(MarkerSet { attachments })
}

/// Distance from a point to a planar quad (clamped to the quad when the
/// projection falls outside); used only for face selection.
fn point_to_quad_distance(p: &Vector3<f64>, e: &[Vector3<f64>; 4]) -> f64 {
    let Ok(n) = quad_normal(e) else {
        return f64::INFINITY;
    };
    let s = (p - e[0]).dot(&n);
    let proj = p - n * s;
    match inverse_bilinear(&proj, e, &n) {
        Ok((u, v)) => {
            let a = bilinear_alpha(u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
            let closest = e[0] * a[0] + e[1] * a[1] + e[2] * a[2] + e[3] * a[3];
            (p - closest).norm()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Inverts the bilinear map on the face plane by 2D Newton. Voxel faces are
/// near-rectangular, so this converges in a few iterations.
fn inverse_bilinear(
    p: &Vector3<f64>,
    e: &[Vector3<f64>; 4],
    n: &Vector3<f64>,
) -> Result<(f64, f64)> {
    // In-plane orthonormal basis.
    let t1 = (e[1] - e[0]).normalize();
    let t2 = n.cross(&t1);
    let to2d = |x: &Vector3<f64>| -> (f64, f64) {
        let d = x - e[0];
        (d.dot(&t1), d.dot(&t2))
    };
    let target = to2d(p);
    let c2d: Vec<(f64, f64)> = e.iter().map(to2d).collect();

    let mut u = 0.5;
    let mut v = 0.5;
    for _ in 0..20 {
        let a = bilinear_alpha(u, v);
        let fx = a[0] * c2d[0].0 + a[1] * c2d[1].0 + a[2] * c2d[2].0 + a[3] * c2d[3].0 - target.0;
        let fy = a[0] * c2d[0].1 + a[1] * c2d[1].1 + a[2] * c2d[2].1 + a[3] * c2d[3].1 - target.1;
        if fx.abs().max(fy.abs()) < 1e-12 {
            break;
        }
        // ∂α/∂u = (−(1−v), (1−v), v, −v), ∂α/∂v = (−(1−u), −u, u, (1−u))
        let du = [-(1.0 - v), 1.0 - v, v, -v];
        let dv = [-(1.0 - u), -u, u, 1.0 - u];
        let j00 = du[0] * c2d[0].0 + du[1] * c2d[1].0 + du[2] * c2d[2].0 + du[3] * c2d[3].0;
        let j10 = du[0] * c2d[0].1 + du[1] * c2d[1].1 + du[2] * c2d[2].1 + du[3] * c2d[3].1;
        let j01 = dv[0] * c2d[0].0 + dv[1] * c2d[1].0 + dv[2] * c2d[2].0 + dv[3] * c2d[3].0;
        let j11 = dv[0] * c2d[0].1 + dv[1] * c2d[1].1 + dv[2] * c2d[2].1 + dv[3] * c2d[3].1;
        let det = j00 * j11 - j01 * j10;
        if det.abs() < 1e-18 {
            return Err(Error::DegenerateFace { face: usize::MAX });
        }
        u -= (fx * j11 - fy * j01) / det;
        v -= (fy * j00 - fx * j10) / det;
    }
    Ok((u, v))
}

/// Deformed marker positions `x(q) = αᵀe(q) + s·n(q)`.
pub fn interpolate(mesh: &HexMesh, markers: &MarkerSet, q: &[f64]) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(markers.len());
    for att in &markers.attachments {
        let e = face_corners(mesh, att.face, q);
        let n = quad_normal(&e).map_err(|_| Error::DegenerateFace { face: att.face })?;
        let x = e[0] * att.alpha[0]
            + e[1] * att.alpha[1]
            + e[2] * att.alpha[2]
            + e[3] * att.alpha[3]
            + n * att.offset_s;
        out.push([x[0], x[1], x[2]]);
    }
    Ok(out)
}

/// Vector-Jacobian product of [`interpolate`]: accumulates `Σₘ (∂xₘ/∂q)ᵀ·cₘ`
/// for cotangents `c`, as needed by the adjoint chain of the marker loss.
pub fn interpolate_vjp(
    mesh: &HexMesh,
    markers: &MarkerSet,
    q: &[f64],
    cotangents: &[[f64; 3]],
) -> Result<Vec<f64>> {
    assert_eq!(cotangents.len(), markers.len());
    let mut grad = vec![0.0; q.len()];
    for (att, cot) in markers.attachments.iter().zip(cotangents) {
        let e = face_corners(mesh, att.face, q);
        let d1 = e[2] - e[0];
        let d2 = e[3] - e[1];
        let c = d1.cross(&d2);
        let len = c.norm();
        if len < 1e-14 {
            return Err(Error::DegenerateFace { face: att.face });
        }
        let n = c / len;
        let cot = Vector3::from(*cot);

        // x = Σ αᵢeᵢ + s·c/‖c‖ with ∂n/∂c = (I − nnᵀ)/‖c‖,
        // ∂c/∂d1 = −[d2]ₓ (δc = −d2 × δd1 + d1 × δd2), ∂c/∂d2 = [d1]ₓ.
        let w = (cot - n * n.dot(&cot)) * (att.offset_s / len);
        // (∂c/∂d1)ᵀ w = [d2]ₓ w = d2 × w ;  (∂c/∂d2)ᵀ w = −[d1]ₓ w = −d1 × w
        let wd1 = d2.cross(&w);
        let wd2 = -d1.cross(&w);
        let contrib = [
            cot * att.alpha[0] - wd1, // e0: ∂d1/∂e0 = −I
            cot * att.alpha[1] - wd2, // e1: ∂d2/∂e1 = −I
            cot * att.alpha[2] + wd1, // e2
            cot * att.alpha[3] + wd2, // e3
        ];
        let nodes = mesh.surface_faces()[att.face].nodes;
        for (k, &node) in nodes.iter().enumerate() {
            for d in 0..3 {
                grad[3 * node + d] += contrib[k][d];
            }
        }
    }
    Ok(grad)
}

/// Least-squares rigid alignment `R·source + t ≈ target` (Kabsch, det R = +1).
pub fn kabsch(source: &[[f64; 3]], target: &[[f64; 3]]) -> Result<RigidTransform> {
    if source.len() != target.len() || source.len() < 3 {
        return Err(Error::DegeneratePointSet);
    }
    let m = source.len() as f64;
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for (s, t) in source.iter().zip(target) {
        cs += Vector3::from(*s);
        ct += Vector3::from(*t);
    }
    cs /= m;
    ct /= m;
    // Cross-covariance H = Σ (target − c_t)(source − c_s)ᵀ
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let sc = Vector3::from(*s) - cs;
        let tc = Vector3::from(*t) - ct;
        h += tc * sc.transpose();
    }
    let svd = h.svd(true, true);
    let sing = svd.singular_values;
    // Collinear sources leave the rotation underdetermined.
    if sing[1] <= 1e-12 * sing[0].max(1e-300) {
        return Err(Error::DegeneratePointSet);
    }
    let mut u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    if (u * v_t).determinant() < 0.0 {
        for i in 0..3 {
            u[(i, 2)] = -u[(i, 2)];
        }
    }
    let r = u * v_t;
    let t = ct - r * cs;
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = r[(i, j)];
        }
    }
    Ok(RigidTransform {
        rotation,
        translation: [t[0], t[1], t[2]],
    })
}

/// Registers a raw marker recording into the simulation frame using its first
/// (undeformed) frame, then applies the same transform to every frame.
pub fn register_trajectory(
    raw_markers: &[Vec<[f64; 3]>],
    rest_markers: &[[f64; 3]],
) -> Result<Vec<Vec<[f64; 3]>>> {
    let first = raw_markers.first().ok_or(Error::DegeneratePointSet)?;
    let transform = kabsch(first, rest_markers)?;
    Ok(raw_markers
        .iter()
        .map(|frame| transform.apply_all(frame))
        .collect())
}
