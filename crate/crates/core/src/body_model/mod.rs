//! Parametric body template: mesh, joint tree, skinning weights, blendshapes
//! and linear blend skinning.

mod subdivide;
mod toy;

use serde::{Deserialize, Serialize};

pub use subdivide::{subdivide, DensifiedMesh, Provenance};
pub use toy::{generate_toy_model, ToyJoint};

use crate::math::axis_angle_to_matrix;
use crate::{Error, Mat3, Mat4, Result, Vec3};

/// Tolerance on skinning-weight row sums.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PartLabel {
    Body = 0,
    Face = 1,
    LeftHand = 2,
    RightHand = 3,
}

impl PartLabel {
    pub const ALL: [PartLabel; 4] = [
        PartLabel::Body,
        PartLabel::Face,
        PartLabel::LeftHand,
        PartLabel::RightHand,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PartLabel::Body => "body",
            PartLabel::Face => "face",
            PartLabel::LeftHand => "left_hand",
            PartLabel::RightHand => "right_hand",
        }
    }

    /// Face and hands use barycentric skinning; the body uses the volume.
    pub fn is_articulated_detail(self) -> bool {
        !matches!(self, PartLabel::Body)
    }
}

/// Linear per-vertex displacement basis, stored `[vertex][axis][coefficient]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Basis {
    pub n_coeffs: usize,
    pub data: Vec<f64>,
}

impl Basis {
    pub fn zeros(n_vertices: usize, n_coeffs: usize) -> Self {
        Self {
            n_coeffs,
            data: vec![0.0; n_vertices * 3 * n_coeffs],
        }
    }

    #[inline]
    pub fn get(&self, vertex: usize, axis: usize, coeff: usize) -> f64 {
        self.data[(vertex * 3 + axis) * self.n_coeffs + coeff]
    }

    #[inline]
    pub fn set(&mut self, vertex: usize, axis: usize, coeff: usize, value: f64) {
        self.data[(vertex * 3 + axis) * self.n_coeffs + coeff] = value;
    }

    /// Displacement of one vertex for the given coefficients.
    pub fn displacement(&self, vertex: usize, coeffs: &[f64]) -> Vec3 {
        let mut d = Vec3::zeros();
        if self.n_coeffs == 0 {
            return d;
        }
        for axis in 0..3 {
            let row = &self.data[(vertex * 3 + axis) * self.n_coeffs..][..self.n_coeffs];
            d[axis] = row.iter().zip(coeffs).map(|(b, c)| b * c).sum();
        }
        d
    }

    pub fn displacements(&self, n_vertices: usize, coeffs: &[f64]) -> Vec<Vec3> {
        (0..n_vertices).map(|v| self.displacement(v, coeffs)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParametricBodyModel {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub joint_names: Vec<String>,
    pub joints_rest: Vec<Vec3>,
    pub parents: Vec<Option<usize>>,
    /// `[vertex][joint]`, rows sum to one.
    pub skinning_weights: Vec<f64>,
    pub shape_basis: Basis,
    /// Columns are the flattened `(R(θ_j) - I)` features of every non-root joint.
    pub pose_basis: Basis,
    pub expr_basis: Basis,
    /// `[joint][vertex]`.
    pub joint_regressor: Vec<f64>,
    /// Per face corner.
    pub uv_coords: Vec<[[f64; 2]; 3]>,
    pub part_labels: Vec<PartLabel>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseShapeParams {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub translation: [f64; 3],
}

impl PoseShapeParams {
    pub fn zeros(model: &ParametricBodyModel) -> Self {
        Self {
            theta: vec![0.0; 3 * model.n_joints()],
            beta: vec![0.0; model.shape_basis.n_coeffs],
            psi: vec![0.0; model.expr_basis.n_coeffs],
            translation: [0.0; 3],
        }
    }

    pub fn joint_rotation(&self, joint: usize) -> Vec3 {
        Vec3::new(
            self.theta[3 * joint],
            self.theta[3 * joint + 1],
            self.theta[3 * joint + 2],
        )
    }

    pub fn set_joint_rotation(&mut self, joint: usize, r: Vec3) {
        self.theta[3 * joint..3 * joint + 3].copy_from_slice(r.as_slice());
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn check(&self, model: &ParametricBodyModel) -> Result<()> {
        let expect = [
            ("theta", self.theta.len(), 3 * model.n_joints()),
            ("beta", self.beta.len(), model.shape_basis.n_coeffs),
            ("psi", self.psi.len(), model.expr_basis.n_coeffs),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {got} coefficients, model expects {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-vertex blendshape displacements, separately and summed.
#[derive(Clone, Debug)]
pub struct BlendshapeOffsets {
    pub shape: Vec<Vec3>,
    pub pose: Vec<Vec3>,
    pub expression: Vec<Vec3>,
    pub total: Vec<Vec3>,
}

impl ParametricBodyModel {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints_rest.len()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|p| p.is_none()).unwrap_or(0)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn weight_row(&self, vertex: usize) -> &[f64] {
        let n = self.n_joints();
        &self.skinning_weights[vertex * n..(vertex + 1) * n]
    }

    /// Number of pose-corrective features, `9 · (joints - 1)`.
    pub fn pose_feature_len(&self) -> usize {
        9 * self.n_joints().saturating_sub(1)
    }

    /// Joint indices ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.n_joints();
        let roots: Vec<usize> = (0..n).filter(|&j| self.parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "joint tree must have exactly one root, found {}",
                roots.len()
            )));
        }
        let mut children = vec![Vec::new(); n];
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(Error::InvalidModel(format!("joint {j} has parent {p} out of range")));
                }
                children[p].push(j);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![roots[0]];
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(children[j].iter().rev());
        }
        if order.len() != n {
            return Err(Error::InvalidModel("joint parent graph is not a tree".into()));
        }
        Ok(order)
    }

    /// Checks every structural invariant of the template.
    pub fn validate(&self) -> Result<()> {
        let nv = self.n_vertices();
        let nj = self.n_joints();
        let dims = [
            ("joint_names", self.joint_names.len(), nj),
            ("parents", self.parents.len(), nj),
            ("skinning_weights", self.skinning_weights.len(), nv * nj),
            ("shape_basis", self.shape_basis.data.len(), nv * 3 * self.shape_basis.n_coeffs),
            ("pose_basis", self.pose_basis.data.len(), nv * 3 * self.pose_basis.n_coeffs),
            ("expr_basis", self.expr_basis.data.len(), nv * 3 * self.expr_basis.n_coeffs),
            ("joint_regressor", self.joint_regressor.len(), nj * nv),
            ("uv_coords", self.uv_coords.len(), self.faces.len()),
            ("part_labels", self.part_labels.len(), nv),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::DimensionMismatch(format!("{name}: {got} values, expected {want}")));
            }
        }
        if self.pose_basis.n_coeffs != 0 && self.pose_basis.n_coeffs != self.pose_feature_len() {
            return Err(Error::DimensionMismatch(format!(
                "pose basis has {} coefficients, expected 9·(joints-1) = {}",
                self.pose_basis.n_coeffs,
                self.pose_feature_len()
            )));
        }
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i as usize >= nv) {
                return Err(Error::InvalidModel(format!("face {f} references a vertex out of range")));
            }
        }
        for (f, uv) in self.uv_coords.iter().enumerate() {
            if uv.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidModel(format!("face {f} has UV outside [0,1]²")));
            }
        }
        for v in 0..nv {
            let row = self.weight_row(v);
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(Error::WeightNotNormalized {
                    row: v,
                    sum: row.iter().sum(),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::WeightNotNormalized { row: v, sum });
            }
        }
        self.topological_order()?;
        Ok(())
    }

    /// Flattened `(R(θ_j) - I)` for every non-root joint, in joint order.
    pub fn pose_features(&self, theta: &[f64]) -> Vec<f64> {
        let root = self.root();
        let mut out = Vec::with_capacity(self.pose_feature_len());
        for j in (0..self.n_joints()).filter(|&j| j != root) {
            let r = Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
            let m = axis_angle_to_matrix(&r) - Mat3::identity();
            for row in 0..3 {
                for col in 0..3 {
                    out.push(m[(row, col)]);
                }
            }
        }
        out
    }

    pub fn blendshape_offsets(&self, params: &PoseShapeParams) -> Result<BlendshapeOffsets> {
        params.check(self)?;
        let nv = self.n_vertices();
        let shape = self.shape_basis.displacements(nv, &params.beta);
        let expression = self.expr_basis.displacements(nv, &params.psi);
        let pose = if self.pose_basis.n_coeffs == 0 {
            vec![Vec3::zeros(); nv]
        } else {
            let features = self.pose_features(&params.theta);
            self.pose_basis.displacements(nv, &features)
        };
        let total = (0..nv).map(|v| shape[v] + expression[v] + pose[v]).collect();
        Ok(BlendshapeOffsets {
            shape,
            pose,
            expression,
            total,
        })
    }

    /// Joint locations regressed from the shaped template.
    pub fn regress_joints(&self, beta: &[f64]) -> Vec<Vec3> {
        let nv = self.n_vertices();
        let shaped: Vec<Vec3> = (0..nv)
            .map(|v| self.vertices[v] + self.shape_basis.displacement(v, beta))
            .collect();
        (0..self.n_joints())
            .map(|j| {
                let row = &self.joint_regressor[j * nv..(j + 1) * nv];
                row.iter()
                    .zip(&shaped)
                    .filter(|(w, _)| **w != 0.0)
                    .fold(Vec3::zeros(), |acc, (w, p)| acc + *w * p)
            })
            .collect()
    }

    /// Per-joint rigid transforms taking shaped canonical points to the posed
    /// frame. Global translation is not included.
    pub fn bone_transforms(&self, params: &PoseShapeParams) -> Result<Vec<Mat4>> {
        params.check(self)?;
        let joints = self.regress_joints(&params.beta);
        let order = self.topological_order()?;
        let mut world = vec![Mat4::identity(); self.n_joints()];
        for &j in &order {
            let rot = axis_angle_to_matrix(&params.joint_rotation(j));
            let offset = match self.parents[j] {
                Some(p) => joints[j] - joints[p],
                None => joints[j],
            };
            let mut local = Mat4::identity();
            local.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
            world[j] = match self.parents[j] {
                Some(p) => world[p] * local,
                None => local,
            };
        }
        Ok(world
            .into_iter()
            .zip(&joints)
            .map(|(g, joint)| {
                let mut b = g;
                let rot = g.fixed_view::<3, 3>(0, 0).into_owned();
                let t = g.fixed_view::<3, 1>(0, 3) - rot * joint;
                b.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
                b
            })
            .collect())
    }

    /// Posed vertices: blendshape-corrected template, skinned, then translated.
    pub fn lbs_vertices(&self, params: &PoseShapeParams) -> Result<Vec<Vec3>> {
        let offsets = self.blendshape_offsets(params)?;
        let bones = self.bone_transforms(params)?;
        let translation = params.translation();
        Ok((0..self.n_vertices())
            .map(|v| {
                let t = blend_transforms(self.weight_row(v), &bones);
                t.apply(&(self.vertices[v] + offsets.total[v])) + translation
            })
            .collect())
    }
}

/// Affine 3×4 transform `x ↦ linear · x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            linear: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

/// `Σ_i w_i B_i` restricted to the affine part.
pub fn blend_transforms(weights: &[f64], bones: &[Mat4]) -> Affine {
    let mut linear = Mat3::zeros();
    let mut translation = Vec3::zeros();
    for (w, b) in weights.iter().zip(bones) {
        if *w == 0.0 {
            continue;
        }
        linear += *w * b.fixed_view::<3, 3>(0, 0);
        translation += *w * b.fixed_view::<3, 1>(0, 3);
    }
    Affine { linear, translation }
}
