//! Procedural capsule-limb humanoid used in place of licensed body assets.
//!
//! Every joint owns one closed capsule that starts at the joint and points to
//! its end point. The ring of vertices at the capsule start is centred on the
//! joint, and the joint regressor averages that ring. The head, jaw and hands
//! carry the detail labels; jaw weights live only on the jaw capsule and
//! finger weights only on the finger capsules.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Basis, ParametricBodyModel, PartLabel};
use crate::Vec3;

/// Joint indices of the toy skeleton.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum ToyJoint {
    Pelvis = 0,
    Spine,
    Chest,
    Neck,
    Head,
    Jaw,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    RightShoulder,
    RightElbow,
    RightWrist,
    LeftHip,
    LeftKnee,
    RightHip,
    RightKnee,
    LeftThumb,
    LeftIndex,
    LeftPinky,
    RightThumb,
    RightIndex,
    RightPinky,
}

impl ToyJoint {
    pub const COUNT: usize = 22;

    pub const NAMES: [&'static str; Self::COUNT] = [
        "pelvis",
        "spine",
        "chest",
        "neck",
        "head",
        "jaw",
        "left_shoulder",
        "left_elbow",
        "left_wrist",
        "right_shoulder",
        "right_elbow",
        "right_wrist",
        "left_hip",
        "left_knee",
        "right_hip",
        "right_knee",
        "left_thumb",
        "left_index",
        "left_pinky",
        "right_thumb",
        "right_index",
        "right_pinky",
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn fingers() -> [ToyJoint; 6] {
        use ToyJoint::*;
        [LeftThumb, LeftIndex, LeftPinky, RightThumb, RightIndex, RightPinky]
    }
}

const PARENTS: [Option<usize>; ToyJoint::COUNT] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(2),
    Some(6),
    Some(7),
    Some(2),
    Some(9),
    Some(10),
    Some(0),
    Some(12),
    Some(0),
    Some(14),
    Some(8),
    Some(8),
    Some(8),
    Some(11),
    Some(11),
    Some(11),
];

struct Capsule {
    joint: usize,
    start: Vec3,
    end: Vec3,
    radius: f64,
    label: PartLabel,
}

impl Capsule {
    fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    fn axis(&self) -> Vec3 {
        (self.end - self.start) / self.length()
    }

    /// Radial vector from the capsule's core segment to `p`.
    fn radial(&self, p: &Vec3) -> Vec3 {
        let d = self.axis();
        let a = (p - self.start).dot(&d).clamp(0.0, self.length());
        p - (self.start + d * a)
    }

    fn island_size(&self) -> (f64, f64) {
        (2.0 * PI * self.radius, self.length() + PI * self.radius)
    }
}

fn skeleton(rng: &mut ChaCha8Rng) -> Vec<Capsule> {
    let height = rng.gen_range(0.96..1.04);
    let span = rng.gen_range(0.95..1.05);
    let girth = rng.gen_range(0.94..1.06);
    let p = |x: f64, y: f64, z: f64| Vec3::new(x * span, y * height, z);
    let body = PartLabel::Body;
    let mut parts = vec![
        (0, p(0.0, 0.95, 0.0), p(0.0, 1.02, 0.0), 0.13, body),
        (1, p(0.0, 1.08, 0.0), p(0.0, 1.15, 0.0), 0.12, body),
        (2, p(0.0, 1.22, 0.0), p(0.0, 1.28, 0.0), 0.14, body),
        (3, p(0.0, 1.36, 0.0), p(0.0, 1.42, 0.0), 0.045, body),
        (4, p(0.0, 1.52, 0.0), p(0.0, 1.66, 0.0), 0.085, PartLabel::Face),
        (5, p(0.0, 1.56, 0.05), p(0.0, 1.56, 0.09), 0.028, PartLabel::Face),
    ];
    for (side, sign, hand) in [(0usize, 1.0, PartLabel::LeftHand), (1, -1.0, PartLabel::RightHand)] {
        let base = 6 + 3 * side;
        parts.push((base, p(sign * 0.17, 1.36, 0.0), p(sign * 0.45, 1.36, 0.0), 0.045, body));
        parts.push((base + 1, p(sign * 0.45, 1.36, 0.0), p(sign * 0.70, 1.36, 0.0), 0.038, body));
        parts.push((base + 2, p(sign * 0.70, 1.36, 0.0), p(sign * 0.78, 1.36, 0.0), 0.03, hand));
        let leg = 12 + 2 * side;
        parts.push((leg, p(sign * 0.09, 0.88, 0.0), p(sign * 0.09, 0.48, 0.0), 0.07, body));
        parts.push((leg + 1, p(sign * 0.09, 0.48, 0.0), p(sign * 0.09, 0.08, 0.0), 0.05, body));
        for (f, z) in [0.025, 0.0, -0.025].into_iter().enumerate() {
            let joint = 16 + 3 * side + f;
            parts.push((joint, p(sign * 0.80, 1.36, z), p(sign * 0.85, 1.36, z), 0.009, hand));
        }
    }
    parts.sort_by_key(|p| p.0);
    parts
        .into_iter()
        .map(|(joint, start, end, radius, label)| Capsule {
            joint,
            start,
            end,
            radius: radius * girth,
            label,
        })
        .collect()
}

/// Shelf-packs islands of the given metric sizes into [0,1]² with a fixed gap,
/// maximising the common scale. Returns `(u0, v0, width, height)` per island.
fn pack_islands(sizes: &[(f64, f64)], gap: f64) -> Vec<(f64, f64, f64, f64)> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].1.total_cmp(&sizes[a].1).then(a.cmp(&b)));
    let layout = |scale: f64| -> Option<Vec<(f64, f64, f64, f64)>> {
        let mut rects = vec![(0.0, 0.0, 0.0, 0.0); sizes.len()];
        let (mut x, mut y, mut row_h) = (gap, gap, 0.0f64);
        for &i in &order {
            let (w, h) = (sizes[i].0 * scale, sizes[i].1 * scale);
            if w + 2.0 * gap > 1.0 {
                return None;
            }
            if x + w + gap > 1.0 {
                x = gap;
                y += row_h + gap;
                row_h = 0.0;
            }
            rects[i] = (x, y, w, h);
            x += w + gap;
            row_h = row_h.max(h);
        }
        (y + row_h + gap <= 1.0).then_some(rects)
    };
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if layout(mid).is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    layout(lo).expect("scale 0 always fits")
}

struct Ring {
    axial: f64,
    radius: f64,
    arc: f64,
}

fn profile(radius: f64, length: f64, n_cap: usize, n_cyl: usize) -> Vec<Ring> {
    let mut rings = vec![Ring {
        axial: -radius,
        radius: 0.0,
        arc: 0.0,
    }];
    for i in 1..=n_cap {
        let phi = i as f64 * FRAC_PI_2 / n_cap as f64;
        rings.push(Ring {
            axial: if i == n_cap { 0.0 } else { -radius * phi.cos() },
            radius: radius * phi.sin(),
            arc: radius * phi,
        });
    }
    for j in 1..=n_cyl {
        let a = length * j as f64 / n_cyl as f64;
        rings.push(Ring {
            axial: a,
            radius,
            arc: radius * FRAC_PI_2 + a,
        });
    }
    for i in (1..n_cap).rev() {
        let phi = i as f64 * FRAC_PI_2 / n_cap as f64;
        rings.push(Ring {
            axial: length + radius * phi.cos(),
            radius: radius * phi.sin(),
            arc: radius * FRAC_PI_2 + length + radius * (FRAC_PI_2 - phi),
        });
    }
    rings.push(Ring {
        axial: length + radius,
        radius: 0.0,
        arc: radius * PI + length,
    });
    rings
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic capsule humanoid. `detail` (clamped to ≥ 1) controls the
/// tessellation density; `seed` perturbs proportions by a few percent.
pub fn generate_toy_model(seed: u64, detail: u32) -> ParametricBodyModel {
    let detail = detail.max(1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = skeleton(&mut rng);
    let n_joints = ToyJoint::COUNT;
    let segments = 8 * detail;
    let n_cap = 2 * detail;

    let islands = pack_islands(&parts.iter().map(Capsule::island_size).collect::<Vec<_>>(), 0.035);

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut uv_coords = Vec::new();
    let mut labels = Vec::new();
    let mut owner = Vec::new();
    let mut start_rings: Vec<Vec<usize>> = vec![Vec::new(); n_joints];

    for (pi, part) in parts.iter().enumerate() {
        let length = part.length();
        let d = part.axis();
        let helper = if d.y.abs() < 0.9 { Vec3::y() } else { Vec3::z() };
        let e1 = helper.cross(&d).normalize();
        let e2 = d.cross(&e1);
        let circumference_step = 2.0 * PI * part.radius / segments as f64;
        let n_cyl = ((length / circumference_step).round() as usize).clamp(1, 8 * detail);
        let rings = profile(part.radius, length, n_cap, n_cyl);
        let total_arc = rings.last().unwrap().arc;
        let (u0, v0, w, h) = islands[pi];
        let uv = |k: f64, arc: f64| [u0 + w * k / segments as f64, v0 + h * arc / total_arc];

        // Vertex indices per ring; poles are single vertices.
        let mut ring_ids: Vec<Vec<usize>> = Vec::with_capacity(rings.len());
        for (ri, ring) in rings.iter().enumerate() {
            let center = part.start + d * ring.axial;
            let count = if ring.radius == 0.0 { 1 } else { segments };
            let mut ids = Vec::with_capacity(count);
            for k in 0..count {
                let phi = 2.0 * PI * k as f64 / segments as f64;
                let p = center + ring.radius * (phi.cos() * e1 + phi.sin() * e2);
                ids.push(vertices.len());
                vertices.push(p);
                labels.push(part.label);
                owner.push(pi);
            }
            if ring.axial == 0.0 && ring.radius > 0.0 && ri > 0 {
                start_rings[part.joint] = ids.clone();
            }
            ring_ids.push(ids);
        }

        let last = rings.len() - 1;
        for k in 0..segments {
            let k1 = (k + 1) % segments;
            let (kf, k1f) = (k as f64, (k + 1) as f64);
            // Bottom fan.
            let ring = &ring_ids[1];
            faces.push([ring_ids[0][0] as u32, ring[k1] as u32, ring[k] as u32]);
            uv_coords.push([uv(kf + 0.5, rings[0].arc), uv(k1f, rings[1].arc), uv(kf, rings[1].arc)]);
            // Quads between consecutive rings.
            for r in 1..last - 1 {
                let (lo, hi) = (&ring_ids[r], &ring_ids[r + 1]);
                let (alo, ahi) = (rings[r].arc, rings[r + 1].arc);
                faces.push([lo[k] as u32, lo[k1] as u32, hi[k1] as u32]);
                uv_coords.push([uv(kf, alo), uv(k1f, alo), uv(k1f, ahi)]);
                faces.push([lo[k] as u32, hi[k1] as u32, hi[k] as u32]);
                uv_coords.push([uv(kf, alo), uv(k1f, ahi), uv(kf, ahi)]);
            }
            // Top fan.
            let ring = &ring_ids[last - 1];
            faces.push([ring_ids[last][0] as u32, ring[k] as u32, ring[k1] as u32]);
            uv_coords.push([uv(kf + 0.5, rings[last].arc), uv(kf, rings[last - 1].arc), uv(k1f, rings[last - 1].arc)]);
        }
    }

    let nv = vertices.len();
    let mut joint_regressor = vec![0.0; n_joints * nv];
    let mut joints_rest = vec![Vec3::zeros(); n_joints];
    for j in 0..n_joints {
        let ring = &start_rings[j];
        assert!(!ring.is_empty(), "joint {j} has no start ring");
        let w = 1.0 / ring.len() as f64;
        for &v in ring {
            joint_regressor[j * nv + v] = w;
        }
        joints_rest[j] = ring.iter().fold(Vec3::zeros(), |acc, &v| acc + w * vertices[v]);
    }

    let mut skinning_weights = vec![0.0; nv * n_joints];
    for v in 0..nv {
        let part = &parts[owner[v]];
        let row = &mut skinning_weights[v * n_joints..(v + 1) * n_joints];
        let parent = PARENTS[part.joint];
        match parent {
            Some(p) if part.label == PartLabel::Body => {
                let a = (vertices[v] - part.start).dot(&part.axis());
                let t = (a + part.radius) / (part.radius + 0.25 * part.length());
                let own = 0.5 + 0.5 * smoothstep(t);
                row[part.joint] = own;
                row[p] = 1.0 - own;
            }
            _ => row[part.joint] = 1.0,
        }
    }

    let pelvis_y = joints_rest[ToyJoint::Pelvis.index()].y;
    let mut shape_basis = Basis::zeros(nv, 3);
    for v in 0..nv {
        let part = &parts[owner[v]];
        let p = vertices[v];
        shape_basis.set(v, 1, 0, 0.1 * (p.y - pelvis_y));
        let radial = 0.15 * part.radial(&p);
        for axis in 0..3 {
            shape_basis.set(v, axis, 1, radial[axis]);
        }
        let j = part.joint;
        let is_arm = (6..=11).contains(&j) || j >= 16;
        let is_leg = (12..=15).contains(&j);
        if is_arm {
            let shoulder = joints_rest[if p.x > 0.0 { 6 } else { 9 }];
            shape_basis.set(v, 0, 2, 0.1 * (p.x - shoulder.x));
        } else if is_leg {
            let hip = joints_rest[if p.x > 0.0 { 12 } else { 14 }];
            shape_basis.set(v, 1, 2, 0.1 * (p.y - hip.y));
        }
    }

    let mut expr_basis = Basis::zeros(nv, 3);
    for v in 0..nv {
        let part = &parts[owner[v]];
        let p = vertices[v];
        if part.joint == ToyJoint::Jaw.index() {
            expr_basis.set(v, 2, 0, 0.01);
        } else if part.joint == ToyJoint::Head.index() && p.z > 0.0 {
            let radial = part.radial(&p);
            let n = radial.norm().max(1e-12);
            let bulge = 0.01 * p.z / part.radius;
            for axis in 0..3 {
                expr_basis.set(v, axis, 1, bulge * radial[axis] / n);
            }
            let a = (p - part.start).dot(&part.axis());
            if a > 0.6 * part.length() {
                expr_basis.set(v, 1, 2, 0.006);
            }
        }
    }

    // Elbow bulge driven by the (0,0) entry of R(θ_elbow) - I.
    let mut pose_basis = Basis::zeros(nv, 9 * (n_joints - 1));
    for elbow in [ToyJoint::LeftElbow.index(), ToyJoint::RightElbow.index()] {
        let feature = 9 * (elbow - 1);
        let center = joints_rest[elbow];
        for v in 0..nv {
            let part = &parts[owner[v]];
            if part.joint != elbow && part.joint != elbow - 1 {
                continue;
            }
            let dist = (vertices[v] - center).norm();
            if dist > 0.08 {
                continue;
            }
            let radial = part.radial(&vertices[v]);
            let n = radial.norm().max(1e-12);
            let g = (-(dist / 0.04).powi(2)).exp();
            for axis in 0..3 {
                pose_basis.set(v, axis, feature, -0.03 * g * radial[axis] / n);
            }
        }
    }

    ParametricBodyModel {
        vertices,
        faces,
        joint_names: ToyJoint::NAMES.iter().map(|s| s.to_string()).collect(),
        joints_rest,
        parents: PARENTS.to_vec(),
        skinning_weights,
        shape_basis,
        pose_basis,
        expr_basis,
        joint_regressor,
        uv_coords,
        part_labels: labels,
    }
}
