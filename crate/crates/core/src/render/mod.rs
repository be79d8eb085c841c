//! Differentiable Gaussian splatting: projection, tiled depth-sorted alpha
//! compositing, normal maps and reverse-mode gradients.

mod camera;
mod frame;
mod project;
mod raster;

pub use camera::{Camera, DEFAULT_FAR, DEFAULT_NEAR};
pub use frame::Image;
pub use project::{
    covariance_3d, encode_normal, project, project_backward, view_normal, ProjectGrad, Splat2D, SplatGrad,
    ALPHA_MIN, CULL_SIGMA, LOW_PASS,
};
pub use raster::{
    default_background, prepare, rasterize, rasterize_backward, rasterize_with_state, render_normals, render_state,
    ForwardState, RenderOptions, RenderOutput, MIN_TRANSMITTANCE, TILE_SIZE,
};

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use crate::math::axis_angle_to_matrix;
    use crate::Vec3;
    use nalgebra::Matrix2x3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn front_camera(size: usize) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), size as f64 * 1.2, size, size).unwrap()
    }

    pub(crate) fn random_gaussian(rng: &mut ChaCha8Rng, spread: f64, size: (f64, f64)) -> Gaussian {
        Gaussian::new(
            Vec3::from_fn(|_, _| rng.gen_range(-spread..spread)),
            rng.gen_range(0.05..0.95),
            Vec3::from_fn(|_, _| rng.gen_range(-2.0..2.0)),
            Vec3::from_fn(|_, _| rng.gen_range(size.0..size.1)),
            Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
        )
    }

    /// Per-pixel reference: every splat, one global depth sort, no tiles and
    /// no bounding radius.
    fn naive_render(gaussians: &[Gaussian], cam: &Camera, bg: &Vec3, normals: bool) -> (Image, Vec<f64>) {
        let mut splats: Vec<(Splat2D, Vec3)> = gaussians
            .iter()
            .enumerate()
            .filter_map(|(k, g)| project(g, k, cam).map(|s| (s, encode_normal(&view_normal(g, cam)))))
            .collect();
        splats.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.index.cmp(&b.0.index)));
        let mut img = Image::zeros(cam.width, cam.height);
        let mut alpha = vec![0.0; cam.n_pixels()];
        for y in 0..cam.height {
            for x in 0..cam.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                let mut c = Vec3::zeros();
                for (s, n) in &splats {
                    let d = nalgebra::Vector2::new(px - s.mean[0], py - s.mean[1]);
                    let cov = nalgebra::Matrix2::new(s.cov[0], s.cov[1], s.cov[1], s.cov[2]);
                    let a = s.opacity * (-0.5 * d.dot(&(cov.try_inverse().unwrap() * d))).exp();
                    if a < 1.0 / 255.0 {
                        continue;
                    }
                    c += a * t * if normals { *n } else { s.color };
                    t *= 1.0 - a;
                    if t < 1e-4 {
                        break;
                    }
                }
                let back = if normals { Vec3::repeat(0.5) } else { *bg };
                img.set_pixel(x, y, &(c + t * back));
                alpha[y * cam.width + x] = 1.0 - t;
            }
        }
        (img, alpha)
    }

    #[test]
    fn camera_json_round_trip_and_validation() {
        let cam = front_camera(32);
        let json = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cam);
        let bad = json.replace("\"near\":0.01", "\"near\":200.0");
        assert!(serde_json::from_str::<Camera>(&bad).is_err());
        let mut skew = cam.clone();
        skew.rotation[(0, 1)] += 0.01;
        assert!(skew.validate().is_err());
        assert!((cam.center() - Vec3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn look_at_maps_up_to_image_up() {
        let cam = front_camera(64);
        let above = project(&Gaussian::new(Vec3::new(0.0, 0.5, 0.0), 0.5, Vec3::zeros(), Vec3::repeat(0.01), Vec3::zeros()), 0, &cam).unwrap();
        let right = project(&Gaussian::new(Vec3::new(0.5, 0.0, 0.0), 0.5, Vec3::zeros(), Vec3::repeat(0.01), Vec3::zeros()), 0, &cam).unwrap();
        assert!(above.mean[1] < 32.0 && (above.mean[0] - 32.0).abs() < 1e-9);
        assert!(right.mean[0] > 32.0 && (right.mean[1] - 32.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_on_axis_projects_to_circle() {
        let cam = front_camera(64);
        for (z, s) in [(0.0, 0.05), (1.0, 0.02), (-2.0, 0.1)] {
            let g = Gaussian::new(Vec3::new(0.0, 0.0, z), 0.5, Vec3::new(0.3, 0.2, 0.1), Vec3::repeat(s), Vec3::zeros());
            let sp = project(&g, 0, &cam).unwrap();
            let depth = 3.0 - z;
            let want = (cam.fx * s / depth).powi(2) + LOW_PASS;
            assert!((sp.cov[0] - want).abs() < 1e-9 * want && (sp.cov[2] - want).abs() < 1e-9 * want);
            assert!(sp.cov[1].abs() < 1e-9);
            assert!((sp.mean[0] - 32.0).abs() < 1e-12 && (sp.depth - depth).abs() < 1e-12);
        }
    }

    #[test]
    fn culling() {
        let cam = front_camera(32);
        let g = |p: Vec3| Gaussian::new(p, 0.5, Vec3::zeros(), Vec3::repeat(0.01), Vec3::zeros());
        assert!(project(&g(Vec3::new(0.0, 0.0, 4.0)), 0, &cam).is_none());
        assert!(project(&g(Vec3::new(0.0, 0.0, 3.0 - 1e-3)), 0, &cam).is_none());
        assert!(project(&g(Vec3::new(50.0, 0.0, 0.0)), 0, &cam).is_none());
        // Just outside the image but within three sigma: kept.
        let sp = project(&Gaussian::new(Vec3::new(1.3, 0.0, 0.0), 0.5, Vec3::zeros(), Vec3::repeat(0.1), Vec3::zeros()), 0, &cam);
        assert!(sp.is_some_and(|s| s.mean[0] > 32.0));
    }

    #[test]
    fn screen_covariance_matches_numeric_jacobian() {
        let cam = Camera::look_at(Vec3::new(0.4, 0.3, 2.5), Vec3::new(0.1, 0.0, 0.0), Vec3::y(), 50.0, 64, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let screen = |p: &Vec3| {
            let q = cam.to_camera(p);
            nalgebra::Vector2::new(cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy)
        };
        let mut checked = 0;
        while checked < 100 {
            let g = random_gaussian(&mut rng, 0.5, (0.005, 0.05));
            let Some(sp) = project(&g, 0, &cam) else { continue };
            let h = 1e-6;
            let mut jn = Matrix2x3::zeros();
            for a in 0..3 {
                let e = Vec3::ith(a, h);
                let d = (screen(&(g.position + e)) - screen(&(g.position - e))) / (2.0 * h);
                jn.set_column(a, &d);
            }
            let cov = jn * covariance_3d(&g) * jn.transpose();
            let want = [cov[(0, 0)] + LOW_PASS, cov[(0, 1)], cov[(1, 1)] + LOW_PASS];
            let norm = want[0].abs().max(want[2].abs());
            for i in 0..3 {
                assert!((sp.cov[i] - want[i]).abs() <= 0.02 * norm, "{:?} vs {:?}", sp.cov, want);
            }
            checked += 1;
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = front_camera(20);
        let bg = Vec3::new(0.2, 0.4, 0.6);
        let out = rasterize(&[], &cam, &bg).unwrap();
        assert_eq!(out.color, Image::filled(20, 20, &bg));
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        let n = render_normals(&[], &cam).unwrap();
        assert_eq!(n, Image::filled(20, 20, &Vec3::repeat(0.5)));
    }

    #[test]
    fn opaque_red_splat() {
        let cam = front_camera(33);
        let red = Vec3::new(1.0, 0.0, 0.0);
        let g = Gaussian::new(Vec3::zeros(), 0.9999, Vec3::zeros(), Vec3::repeat(0.2), red);
        let out = rasterize(&[g], &cam, &Vec3::repeat(1.0)).unwrap();
        assert!((out.color.pixel(16, 16) - red).amax() < 1.0 / 255.0);
    }

    #[test]
    fn non_finite_primitive_is_named() {
        let cam = front_camera(8);
        let mut gs = vec![Gaussian::new(Vec3::zeros(), 0.5, Vec3::zeros(), Vec3::repeat(0.1), Vec3::zeros()); 3];
        gs[2].color.y = f64::NAN;
        assert!(matches!(rasterize(&gs, &cam, &Vec3::zeros()), Err(crate::Error::NonFiniteAttribute(2))));
    }

    #[test]
    fn three_overlapping_match_naive() {
        let cam = front_camera(8);
        let gs = [
            Gaussian::new(Vec3::new(0.0, 0.0, 0.0), 0.8, Vec3::zeros(), Vec3::new(0.3, 0.2, 0.1), Vec3::new(1.0, 0.0, 0.0)),
            Gaussian::new(Vec3::new(0.1, 0.1, 0.2), 0.6, Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.2, 0.4, 0.1), Vec3::new(0.0, 1.0, 0.0)),
            Gaussian::new(Vec3::new(-0.1, 0.0, -0.3), 0.7, Vec3::new(0.4, 0.0, 0.0), Vec3::new(0.3, 0.3, 0.3), Vec3::new(0.0, 0.0, 1.0)),
        ];
        let bg = Vec3::new(1.0, 1.0, 1.0);
        let out = rasterize(&gs, &cam, &bg).unwrap();
        let (want, _) = naive_render(&gs, &cam, &bg, false);
        assert!(out.color.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn random_scenes_match_naive_renderer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for scene in 0..12 {
            let size = [16, 37, 64][scene % 3];
            let cam = Camera::look_at(Vec3::new(rng.gen_range(-1.0..1.0), 0.5, 3.0), Vec3::zeros(), Vec3::y(), size as f64, size, size + 5).unwrap();
            let n = rng.gen_range(1..=256);
            let gs: Vec<Gaussian> = (0..n).map(|_| random_gaussian(&mut rng, 0.8, (0.01, 0.15))).collect();
            let bg = Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0));
            let opts = RenderOptions { background: bg, normals: true };
            let (out, _) = rasterize_with_state(&gs, &cam, &opts).unwrap();
            let (want, alpha) = naive_render(&gs, &cam, &bg, false);
            let (want_n, _) = naive_render(&gs, &cam, &bg, true);
            assert!(out.color.max_abs_diff(&want) < 1e-5, "scene {scene}");
            assert!(out.normals.unwrap().max_abs_diff(&want_n) < 1e-5, "scene {scene}");
            for (a, b) in out.alpha.iter().zip(&alpha) {
                assert!((a - b).abs() < 1e-5 && (0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn weights_sum_to_alpha() {
        // White primitives over black: colour equals the weight sum.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cam = front_camera(40);
        let mut gs: Vec<Gaussian> = (0..150).map(|_| random_gaussian(&mut rng, 0.7, (0.02, 0.2))).collect();
        gs.iter_mut().for_each(|g| g.color = Vec3::repeat(1.0));
        let out = rasterize(&gs, &cam, &Vec3::zeros()).unwrap();
        for p in 0..cam.n_pixels() {
            let c = out.color.data[3 * p];
            assert!((c - out.alpha[p]).abs() < 1e-6 && c <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn facing_disk_normal() {
        let cam = front_camera(33);
        let g = Gaussian::new(Vec3::zeros(), 0.9999, Vec3::zeros(), Vec3::new(0.3, 0.3, 0.001), Vec3::zeros());
        let n = render_normals(&[g.clone()], &cam).unwrap();
        assert!((n.pixel(16, 16) - Vec3::new(0.5, 0.5, 1.0)).amax() < 1e-3);
        // Flipping the axis must not change the camera-facing result.
        let mut flipped = g;
        flipped.rotation = axis_angle_to_matrix(&Vec3::new(std::f64::consts::PI, 0.0, 0.0));
        let m = render_normals(&[flipped], &cam).unwrap();
        assert!((m.pixel(16, 16) - Vec3::new(0.5, 0.5, 1.0)).amax() < 1e-3);
    }

    #[test]
    fn parallel_render_is_bit_identical_to_single_thread() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cam = front_camera(70);
        let gs: Vec<Gaussian> = (0..400).map(|_| random_gaussian(&mut rng, 0.8, (0.01, 0.1))).collect();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (out, state) = rasterize_with_state(&gs, &cam, &RenderOptions::default()).unwrap();
                let grad = Image::filled(70, 70, &Vec3::new(0.3, -0.2, 0.5));
                let g = rasterize_backward(&gs, &cam, &state, &grad, None).unwrap();
                (out, g)
            })
        };
        let (a, ga) = run(1);
        let (b, gb) = run(4);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn rigid_scene_and_camera_motion_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cam = front_camera(48);
        let gs: Vec<Gaussian> = (0..80).map(|_| random_gaussian(&mut rng, 0.6, (0.02, 0.15))).collect();
        let q = axis_angle_to_matrix(&Vec3::new(0.3, -1.1, 0.7));
        let d = Vec3::new(0.5, -0.2, 1.5);
        let moved: Vec<Gaussian> = gs
            .iter()
            .map(|g| Gaussian {
                position: q * g.position + d,
                rotation: q * g.rotation,
                ..g.clone()
            })
            .collect();
        let mut cam2 = cam.clone();
        cam2.rotation = cam.rotation * q.transpose();
        cam2.translation = cam.translation - cam2.rotation * d;
        let a = rasterize(&gs, &cam, &Vec3::zeros()).unwrap();
        let b = rasterize(&moved, &cam2, &Vec3::zeros()).unwrap();
        assert!(a.color.max_abs_diff(&b.color) < 1e-9);
        let na = render_normals(&gs, &cam).unwrap();
        let nb = render_normals(&moved, &cam2).unwrap();
        assert!(na.max_abs_diff(&nb) < 1e-9);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cam = front_camera(24);
        let gs: Vec<Gaussian> = (0..20).map(|_| random_gaussian(&mut rng, 0.5, (0.05, 0.2))).collect();
        let (_, state) = rasterize_with_state(&gs, &cam, &RenderOptions::default()).unwrap();
        let g = rasterize_backward(&gs, &cam, &state, &Image::zeros(24, 24), None).unwrap();
        assert_eq!(g, crate::gaussian::PrimitiveGrads::zeros(20));
        let other = front_camera(12);
        assert!(matches!(
            rasterize_backward(&gs, &other, &state, &Image::zeros(12, 12), None),
            Err(crate::Error::MissingForwardState(_))
        ));
    }

    #[test]
    fn single_splat_colour_gradient_is_its_weight() {
        let cam = front_camera(16);
        let g = Gaussian::new(Vec3::new(0.05, 0.0, 0.0), 0.7, Vec3::zeros(), Vec3::repeat(0.3), Vec3::new(0.2, 0.5, 0.9));
        let (out, state) = rasterize_with_state(std::slice::from_ref(&g), &cam, &RenderOptions::default()).unwrap();
        let (x, y) = (9, 7);
        let mut grad = Image::zeros(16, 16);
        grad.set_pixel(x, y, &Vec3::new(0.0, 1.0, 0.0));
        let gr = rasterize_backward(std::slice::from_ref(&g), &cam, &state, &grad, None).unwrap();
        let weight = out.alpha[y * 16 + x];
        assert!((gr.color[0] - Vec3::new(0.0, weight, 0.0)).norm() < 1e-15);
    }

    /// Scalar loss `⟨G_c, C⟩ + ⟨G_a, A⟩` and its contributor map.
    fn probe(gs: &[Gaussian], cam: &Camera, gc: &Image, ga: &[f64]) -> (f64, Vec<u32>) {
        let out = rasterize(gs, cam, &Vec3::new(0.3, 0.6, 0.2)).unwrap();
        let l = out.color.data.iter().zip(&gc.data).map(|(a, b)| a * b).sum::<f64>()
            + out.alpha.iter().zip(ga).map(|(a, b)| a * b).sum::<f64>();
        (l, out.contributors)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cam = Camera::look_at(Vec3::new(0.3, 0.2, 2.5), Vec3::zeros(), Vec3::y(), 36.0, 32, 32).unwrap();
        let gs: Vec<Gaussian> = (0..8).map(|_| random_gaussian(&mut rng, 0.4, (0.08, 0.3))).collect();
        let gc = Image::from_data(32, 32, (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ga: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let opts = RenderOptions { background: Vec3::new(0.3, 0.6, 0.2), normals: false };
        let (_, state) = rasterize_with_state(&gs, &cam, &opts).unwrap();
        let grads = rasterize_backward(&gs, &cam, &state, &gc, Some(&ga)).unwrap();

        let h = 1e-4;
        let (mut total, mut excluded, mut bad) = (0, 0, 0);
        for k in 0..gs.len() {
            let mut coords: Vec<(Box<dyn Fn(&mut Gaussian, f64)>, f64)> = Vec::new();
            for a in 0..3 {
                coords.push((Box::new(move |g, d| g.position[a] += d), grads.position[k][a]));
                coords.push((Box::new(move |g, d| g.scale[a] += d), grads.scale[k][a]));
                coords.push((Box::new(move |g, d| g.color[a] += d), grads.color[k][a]));
                for b in 0..3 {
                    coords.push((Box::new(move |g, d| g.rotation[(a, b)] += d), grads.rotation[k][(a, b)]));
                }
            }
            coords.push((Box::new(|g, d| g.opacity += d), grads.opacity[k]));
            for (nudge, analytic) in coords {
                let mut plus = gs.clone();
                nudge(&mut plus[k], h);
                let mut minus = gs.clone();
                nudge(&mut minus[k], -h);
                let (lp, cp) = probe(&plus, &cam, &gc, &ga);
                let (lm, cm) = probe(&minus, &cam, &gc, &ga);
                total += 1;
                if cp != cm {
                    excluded += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let tol = 1e-3 * fd.abs().max(analytic.abs()) + 1e-6;
                if (fd - analytic).abs() > tol {
                    bad += 1;
                    eprintln!("primitive {k}: fd {fd} vs analytic {analytic}");
                }
            }
        }
        let checked = total - excluded;
        assert!(checked * 2 > total, "{excluded} of {total} coordinates sit on a cutoff boundary");
        assert!(bad * 100 <= checked, "{bad} of {checked} coordinates disagree");
    }
}
