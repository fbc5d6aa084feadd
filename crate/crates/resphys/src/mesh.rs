//! Voxelized hexahedral meshes.
//!
//! Elements are axis-aligned cubes of equal edge length at rest, with the
//! standard trilinear corner ordering (ξ, η, ζ along x, y, z):
//!
//! ```text
//!   local corner:   0       1       2       3       4       5       6       7
//!   offset (xyz): (0,0,0) (1,0,0) (1,1,0) (0,1,0) (0,0,1) (1,0,1) (1,1,1) (0,1,1)
//! ```
//!
//! Boundary quads are stored with their four corners in cyclic order such that
//! the cross product of the two diagonals points outward at rest.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Face of the bounding box used to clamp a beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClampFace {
    #[serde(rename = "-x")]
    XNeg,
    #[serde(rename = "+x")]
    XPos,
    #[serde(rename = "-y")]
    YNeg,
    #[serde(rename = "+y")]
    YPos,
    #[serde(rename = "-z")]
    ZNeg,
    #[serde(rename = "+z")]
    ZPos,
}

/// Boundary quad: four node indices in cyclic order plus the owning element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceFace {
    pub nodes: [usize; 4],
    pub element: usize,
}

/// Hexahedral mesh with rest positions, connectivity and Dirichlet nodes.
#[derive(Debug, Clone)]
pub struct HexMesh {
    nodes: Vec<[f64; 3]>,
    elements: Vec<[usize; 8]>,
    dirichlet: Vec<usize>,
    dirichlet_mask: Vec<bool>,
    surface_faces: Vec<SurfaceFace>,
    voxel_edge: f64,
    /// Max DoF-index distance coupled by any element; the band of `M + h²K`.
    half_bandwidth: usize,
}

/// On-disk mesh manifest. Field names are part of the file format.
#[derive(Debug, Serialize, Deserialize)]
struct MeshManifest {
    nodes: Vec<[f64; 3]>,
    elements: Vec<[usize; 8]>,
    dirichlet: Vec<usize>,
    voxel_edge: f64,
}

impl HexMesh {
    pub fn new(
        nodes: Vec<[f64; 3]>,
        elements: Vec<[usize; 8]>,
        dirichlet: Vec<usize>,
        voxel_edge: f64,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 || elements.is_empty() {
            return Err(Error::InvalidMesh("empty mesh".into()));
        }
        for (e, elem) in elements.iter().enumerate() {
            for &i in elem {
                if i >= n {
                    return Err(Error::InvalidMesh(format!(
                        "element {e} references node {i} but mesh has {n} nodes"
                    )));
                }
            }
        }
        for p in &nodes {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidMesh("non-finite node position".into()));
            }
        }
        if !(voxel_edge > 0.0) {
            return Err(Error::InvalidMesh("voxel edge must be positive".into()));
        }
        // Every element must be an axis-aligned cube with the stated edge.
        for (e, elem) in elements.iter().enumerate() {
            let p0 = nodes[elem[0]];
            for (k, &i) in elem.iter().enumerate() {
                let off = CORNER_OFFSETS[k];
                let p = nodes[i];
                for d in 0..3 {
                    let expect = p0[d] + off[d] as f64 * voxel_edge;
                    if (p[d] - expect).abs() > 1e-9 * voxel_edge.max(1.0) {
                        return Err(Error::InvalidMesh(format!(
                            "element {e} is not an axis-aligned voxel of edge {voxel_edge}"
                        )));
                    }
                }
            }
        }
        let mut dirichlet = dirichlet;
        dirichlet.sort_unstable();
        dirichlet.dedup();
        if dirichlet.iter().any(|&i| i >= n) {
            return Err(Error::InvalidMesh("Dirichlet node out of range".into()));
        }
        let mut dirichlet_mask = vec![false; n];
        for &i in &dirichlet {
            dirichlet_mask[i] = true;
        }
        let surface_faces = extract_surface_faces(&nodes, &elements)?;
        let mut half_bandwidth = 0;
        for elem in &elements {
            let lo = *elem.iter().min().unwrap();
            let hi = *elem.iter().max().unwrap();
            half_bandwidth = half_bandwidth.max(3 * (hi - lo) + 2);
        }
        Ok(Self {
            nodes,
            elements,
            dirichlet,
            dirichlet_mask,
            surface_faces,
            voxel_edge,
            half_bandwidth,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_dofs(&self) -> usize {
        3 * self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 8]] {
        &self.elements
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.dirichlet_mask[node]
    }

    pub fn surface_faces(&self) -> &[SurfaceFace] {
        &self.surface_faces
    }

    pub fn voxel_edge(&self) -> f64 {
        self.voxel_edge
    }

    pub fn half_bandwidth(&self) -> usize {
        self.half_bandwidth
    }

    /// Rest positions flattened to `[x0, y0, z0, x1, ...]`.
    pub fn rest_positions(&self) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.num_dofs());
        for p in &self.nodes {
            q.extend_from_slice(p);
        }
        q
    }

    /// Node indices lying on the boundary (members of at least one surface face),
    /// sorted ascending.
    pub fn surface_nodes(&self) -> Vec<usize> {
        let mut mask = vec![false; self.num_nodes()];
        for f in &self.surface_faces {
            for &i in &f.nodes {
                mask[i] = true;
            }
        }
        (0..self.num_nodes()).filter(|&i| mask[i]).collect()
    }

    /// Replaces the Dirichlet set (used by the twist ramp to pin extra faces).
    pub fn with_dirichlet(&self, dirichlet: Vec<usize>) -> Result<Self> {
        Self::new(
            self.nodes.clone(),
            self.elements.clone(),
            dirichlet,
            self.voxel_edge,
        )
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let manifest = MeshManifest {
            nodes: self.nodes.clone(),
            elements: self.elements.clone(),
            dirichlet: self.dirichlet.clone(),
            voxel_edge: self.voxel_edge,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &manifest)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let manifest: MeshManifest = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::new(
            manifest.nodes,
            manifest.elements,
            manifest.dirichlet,
            manifest.voxel_edge,
        )
    }
}

/// Local corner offsets in units of the voxel edge.
pub const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Local corner indices of each cube face, cyclic, diagonals crossing outward.
/// Order: -x, +x, -y, +y, -z, +z.
const FACE_CORNERS: [[usize; 4]; 6] = [
    [0, 4, 7, 3],
    [1, 2, 6, 5],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 3, 2, 1],
    [4, 5, 6, 7],
];

fn extract_surface_faces(
    nodes: &[[f64; 3]],
    elements: &[[usize; 8]],
) -> Result<Vec<SurfaceFace>> {
    use std::collections::HashMap;
    // A face is on the boundary iff its node set appears in exactly one element.
    let mut counts: HashMap<[usize; 4], (usize, [usize; 4], usize)> = HashMap::new();
    for (e, elem) in elements.iter().enumerate() {
        for corners in &FACE_CORNERS {
            let quad = [
                elem[corners[0]],
                elem[corners[1]],
                elem[corners[2]],
                elem[corners[3]],
            ];
            let mut key = quad;
            key.sort_unstable();
            let entry = counts.entry(key).or_insert((0, quad, e));
            entry.0 += 1;
        }
    }
    let mut faces: Vec<SurfaceFace> = counts
        .into_values()
        .filter(|&(count, _, _)| count == 1)
        .map(|(_, quad, element)| SurfaceFace {
            nodes: quad,
            element,
        })
        .collect();
    // HashMap iteration order is unspecified; sort for determinism.
    faces.sort_by_key(|f| (f.element, f.nodes));

    // Orientation check: diagonal cross product must point away from the
    // owning element's centroid.
    for (fi, f) in faces.iter().enumerate() {
        let e = elements[f.element];
        let mut centroid = [0.0; 3];
        for &i in &e {
            for d in 0..3 {
                centroid[d] += nodes[i][d] / 8.0;
            }
        }
        let [a, b, c, dd] = f.nodes;
        let d1 = sub(nodes[c], nodes[a]);
        let d2 = sub(nodes[dd], nodes[b]);
        let nrm = cross(d1, d2);
        let mut fc = [0.0; 3];
        for &i in &f.nodes {
            for d in 0..3 {
                fc[d] += nodes[i][d] / 4.0;
            }
        }
        let outward = sub(fc, centroid);
        if dot(nrm, outward) <= 0.0 {
            return Err(Error::InvalidMesh(format!(
                "surface face {fi} is not outward-oriented"
            )));
        }
    }
    Ok(faces)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Builds a voxel-grid beam of the given size, clamping every node on the
/// requested bounding-box face.
pub fn build_voxel_beam(size: [f64; 3], voxel_edge: f64, clamp: ClampFace) -> Result<HexMesh> {
    let mut counts = [0usize; 3];
    for d in 0..3 {
        let ratio = size[d] / voxel_edge;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) || rounded < 1.0 {
            return Err(Error::NonDivisibleSize {
                axis: ['x', 'y', 'z'][d],
                size: size[d],
                voxel_edge,
            });
        }
        counts[d] = rounded as usize;
    }
    let [nx, ny, nz] = counts;
    let node_index = |ix: usize, iy: usize, iz: usize| (ix * (ny + 1) + iy) * (nz + 1) + iz;

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for ix in 0..=nx {
        for iy in 0..=ny {
            for iz in 0..=nz {
                nodes.push([
                    ix as f64 * voxel_edge,
                    iy as f64 * voxel_edge,
                    iz as f64 * voxel_edge,
                ]);
            }
        }
    }

    let mut elements = Vec::with_capacity(nx * ny * nz);
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let mut elem = [0usize; 8];
                for (k, off) in CORNER_OFFSETS.iter().enumerate() {
                    elem[k] = node_index(ix + off[0], iy + off[1], iz + off[2]);
                }
                elements.push(elem);
            }
        }
    }

    let on_clamp_face = |p: &[f64; 3]| -> bool {
        let eps = 1e-9 * voxel_edge;
        match clamp {
            ClampFace::XNeg => p[0].abs() < eps,
            ClampFace::XPos => (p[0] - size[0]).abs() < eps,
            ClampFace::YNeg => p[1].abs() < eps,
            ClampFace::YPos => (p[1] - size[1]).abs() < eps,
            ClampFace::ZNeg => p[2].abs() < eps,
            ClampFace::ZPos => (p[2] - size[2]).abs() < eps,
        }
    };
    let dirichlet: Vec<usize> = nodes
        .iter()
        .enumerate()
        .filter(|(_, p)| on_clamp_face(p))
        .map(|(i, _)| i)
        .collect();

    HexMesh::new(nodes, elements, dirichlet, voxel_edge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_beam_dimensions() {
        let mesh = build_voxel_beam([0.10, 0.03, 0.03], 0.01, ClampFace::XNeg).unwrap();
        assert_eq!(mesh.num_elements(), 90);
        assert_eq!(mesh.num_nodes(), 176);
        assert_eq!(mesh.num_dofs(), 528);
        assert_eq!(mesh.dirichlet_nodes().len(), 16);
        assert_eq!(mesh.surface_nodes().len(), 140);
    }

    #[test]
    fn single_voxel() {
        let mesh = build_voxel_beam([0.01, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        assert_eq!(mesh.num_elements(), 1);
        assert_eq!(mesh.num_nodes(), 8);
        assert_eq!(mesh.num_dofs(), 24);
        assert_eq!(mesh.surface_faces().len(), 6);
    }

    #[test]
    fn two_voxel_surface_faces() {
        let mesh = build_voxel_beam([0.02, 0.01, 0.01], 0.01, ClampFace::XNeg).unwrap();
        assert_eq!(mesh.surface_faces().len(), 10);
    }

    #[test]
    fn non_divisible_size_is_rejected() {
        let err = build_voxel_beam([0.105, 0.03, 0.03], 0.01, ClampFace::XNeg).unwrap_err();
        match err {
            Error::NonDivisibleSize { axis, .. } => assert_eq!(axis, 'x'),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn surface_faces_point_outward() {
        // Orientation is validated inside the constructor; this exercises a
        // mesh large enough to have faces in all six directions.
        build_voxel_beam([0.03, 0.02, 0.04], 0.01, ClampFace::ZPos).unwrap();
    }

    #[test]
    fn json_round_trip() {
        let mesh = build_voxel_beam([0.02, 0.02, 0.01], 0.01, ClampFace::YNeg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.json");
        mesh.save_json(&path).unwrap();
        let loaded = HexMesh::load_json(&path).unwrap();
        assert_eq!(loaded.num_nodes(), mesh.num_nodes());
        assert_eq!(loaded.elements(), mesh.elements());
        assert_eq!(loaded.dirichlet_nodes(), mesh.dirichlet_nodes());
        assert_eq!(loaded.voxel_edge(), mesh.voxel_edge());
    }

    #[test]
    fn dirichlet_on_clamped_face_only() {
        let mesh = build_voxel_beam([0.03, 0.01, 0.01], 0.01, ClampFace::XPos).unwrap();
        for &i in mesh.dirichlet_nodes() {
            assert!((mesh.nodes()[i][0] - 0.03).abs() < 1e-12);
        }
        assert_eq!(mesh.dirichlet_nodes().len(), 4);
    }
}
