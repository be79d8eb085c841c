//! Midpoint (4-to-1) subdivision with barycentric provenance.

use std::collections::HashMap;

use super::{Basis, ParametricBodyModel, PartLabel};
use crate::Vec3;

/// Where a densified vertex comes from: a convex combination of up to three
/// vertices of the original mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Provenance {
    pub corners: [u32; 3],
    pub bary: [f64; 3],
}

impl Provenance {
    fn original(v: u32) -> Self {
        Self {
            corners: [v, v, v],
            bary: [1.0, 0.0, 0.0],
        }
    }

    /// Interpolates a per-original-vertex attribute.
    pub fn interpolate<T, F>(&self, mut f: F) -> T
    where
        T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
        F: FnMut(usize) -> T,
    {
        let [a, b, c] = self.corners.map(|i| i as usize);
        f(a) * self.bary[0] + f(b) * self.bary[1] + f(c) * self.bary[2]
    }
}

/// Subdivided template. The first `base_vertex_count` vertices are the
/// original ones, in their original order.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifiedMesh {
    pub mesh: ParametricBodyModel,
    pub provenance: Vec<Provenance>,
    pub base_vertex_count: usize,
    pub levels: u32,
}

impl DensifiedMesh {
    pub fn n_faces(&self) -> usize {
        self.mesh.faces.len()
    }
}

/// Applies `levels` rounds of midpoint subdivision. Every attribute of every
/// vertex is recomputed from its provenance on the original mesh, so nested
/// levels never accumulate interpolation error beyond one convex combination.
pub fn subdivide(model: &ParametricBodyModel, levels: u32) -> DensifiedMesh {
    let base = model.n_vertices();
    let mut provenance: Vec<Provenance> = (0..base as u32).map(Provenance::original).collect();
    // Per face: current vertex indices, the original face it lies in, and the
    // barycentric coordinate of each corner within that original face.
    let mut faces: Vec<([u32; 3], usize, [[f64; 3]; 3])> = model
        .faces
        .iter()
        .enumerate()
        .map(|(f, &tri)| (tri, f, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        .collect();

    for _ in 0..levels {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &(tri, orig, bary) in &faces {
            let mut mid = [0u32; 3];
            let mut mid_bary = [[0.0; 3]; 3];
            for e in 0..3 {
                let (i, j) = (e, (e + 1) % 3);
                let (a, b) = (tri[i], tri[j]);
                let bc = [
                    0.5 * (bary[i][0] + bary[j][0]),
                    0.5 * (bary[i][1] + bary[j][1]),
                    0.5 * (bary[i][2] + bary[j][2]),
                ];
                mid_bary[e] = bc;
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    let id = provenance.len() as u32;
                    let of = model.faces[orig];
                    provenance.push(Provenance { corners: of, bary: bc });
                    id
                });
            }
            let [m01, m12, m20] = mid;
            let [b01, b12, b20] = mid_bary;
            next.push(([tri[0], m01, m20], orig, [bary[0], b01, b20]));
            next.push(([m01, tri[1], m12], orig, [b01, bary[1], b12]));
            next.push(([m20, m12, tri[2]], orig, [b20, b12, bary[2]]));
            next.push(([m01, m12, m20], orig, [b01, b12, b20]));
        }
        faces = next;
    }

    let nv = provenance.len();
    let nj = model.n_joints();
    let vertices: Vec<Vec3> = provenance
        .iter()
        .map(|p| p.interpolate(|v| model.vertices[v]))
        .collect();

    let mut skinning_weights = vec![0.0; nv * nj];
    for (v, p) in provenance.iter().enumerate() {
        let row = &mut skinning_weights[v * nj..(v + 1) * nj];
        for (c, w) in p.corners.iter().zip(p.bary) {
            if w == 0.0 {
                continue;
            }
            for (dst, src) in row.iter_mut().zip(model.weight_row(*c as usize)) {
                *dst += w * src;
            }
        }
    }

    let interp_basis = |basis: &Basis| -> Basis {
        let k = basis.n_coeffs;
        let mut out = Basis::zeros(nv, k);
        for (v, p) in provenance.iter().enumerate() {
            for (c, w) in p.corners.iter().zip(p.bary) {
                if w == 0.0 {
                    continue;
                }
                let src = &basis.data[*c as usize * 3 * k..][..3 * k];
                for (dst, s) in out.data[v * 3 * k..][..3 * k].iter_mut().zip(src) {
                    *dst += w * s;
                }
            }
        }
        out
    };

    let mut joint_regressor = vec![0.0; nj * nv];
    for j in 0..nj {
        joint_regressor[j * nv..j * nv + base].copy_from_slice(&model.joint_regressor[j * base..(j + 1) * base]);
    }

    let part_labels = provenance
        .iter()
        .map(|p| {
            let mut labels = p
                .corners
                .iter()
                .zip(p.bary)
                .filter(|(_, w)| *w != 0.0)
                .map(|(c, _)| model.part_labels[*c as usize]);
            let first = labels.next().unwrap_or(PartLabel::Body);
            if labels.all(|l| l == first) {
                first
            } else {
                PartLabel::Body
            }
        })
        .collect();

    let uv_coords = faces
        .iter()
        .map(|(_, orig, bary)| {
            let uv = model.uv_coords[*orig];
            bary.map(|b| {
                [
                    b[0] * uv[0][0] + b[1] * uv[1][0] + b[2] * uv[2][0],
                    b[0] * uv[0][1] + b[1] * uv[1][1] + b[2] * uv[2][1],
                ]
            })
        })
        .collect();

    let mesh = ParametricBodyModel {
        vertices,
        faces: faces.iter().map(|f| f.0).collect(),
        joint_names: model.joint_names.clone(),
        joints_rest: model.joints_rest.clone(),
        parents: model.parents.clone(),
        skinning_weights,
        shape_basis: interp_basis(&model.shape_basis),
        pose_basis: interp_basis(&model.pose_basis),
        expr_basis: interp_basis(&model.expr_basis),
        joint_regressor,
        uv_coords,
        part_labels,
    };
    DensifiedMesh {
        mesh,
        provenance,
        base_vertex_count: base,
        levels,
    }
}
