//! Variance-preserving diffusion over feature planes with v-prediction:
//! cosine schedule, noising algebra, weighted denoising loss, a deterministic
//! sampler, and joint training with plane fitting.

mod train;
mod unet;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::gaussian::UvFeaturePlane;
use crate::io::{decode_checkpoint, encode_checkpoint};
use crate::{Error, Result};

pub use train::{moving_average, train_joint, DenoiseRow, JointOutcome};
pub use unet::{timestep_embedding, Denoiser, DenoiserCache, DenoiserConfig};

/// Bounds of the loss weight `w(t)`.
pub const WEIGHT_MIN: f64 = 1e-4;
pub const WEIGHT_MAX: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub lambda_fit: f64,
    pub lambda_denois: f64,
    /// Exponent `ω` of the loss weight.
    pub omega: f64,
    pub sampler_steps: usize,
    pub lr_denoiser: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            lambda_fit: 1.0,
            lambda_denois: 1.0,
            omega: 0.5,
            sampler_steps: 50,
            lr_denoiser: 1e-3,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_fit, self.lambda_denois, self.omega];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("diffusion weights must be finite and non-negative".into()));
        }
        if self.sampler_steps == 0 {
            return Err(Error::InvalidArgument("sampler needs at least one step".into()));
        }
        if !(self.lr_denoiser.is_finite() && self.lr_denoiser > 0.0) {
            return Err(Error::InvalidArgument("denoiser learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Plane dimensions as seen by a denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneShape {
    pub resolution: usize,
    pub channels: usize,
}

impl PlaneShape {
    pub fn of(plane: &UvFeaturePlane) -> Self {
        Self {
            resolution: plane.resolution,
            channels: plane.channels,
        }
    }

    pub fn len(&self) -> usize {
        self.resolution * self.resolution * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `v̂ = f(x_t, t)` with a reverse-mode pass.
pub trait VelocityModel {
    type Cache;

    fn n_params(&self) -> usize;

    fn forward(&self, x_t: &[f64], shape: PlaneShape, t: f64) -> Result<(Vec<f64>, Self::Cache)>;

    /// Accumulates parameter gradients and returns `∂L/∂x_t`.
    fn backward(&self, cache: &Self::Cache, grad_v: &[f64], grad_params: &mut [f64]) -> Vec<f64>;

    fn predict(&self, x_t: &[f64], shape: PlaneShape, t: f64) -> Result<Vec<f64>> {
        Ok(self.forward(x_t, shape, t)?.0)
    }
}

/// `(α(t), σ(t)) = (cos(πt/2), sin(πt/2))`, with exact values at the ends.
pub fn schedule(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(match t {
        0.0 => (1.0, 0.0),
        1.0 => (0.0, 1.0),
        _ => {
            let a = 0.5 * std::f64::consts::PI * t;
            (a.cos(), a.sin())
        }
    })
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// `x_t = α x + σ ε`.
pub fn add_noise(x: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_len(x, eps, "add_noise")?;
    let (a, s) = schedule(t)?;
    Ok(x.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// `v = α ε − σ x`.
pub fn v_target(x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len(x, eps, "v_target")?;
    let (a, s) = schedule(t)?;
    Ok(x.iter().zip(eps).map(|(x, e)| a * e - s * x).collect())
}

/// `x̂ = α x_t − σ v̂`.
pub fn reconstruct_x0(x_t: &[f64], v_hat: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len(x_t, v_hat, "reconstruct_x0")?;
    let (a, s) = schedule(t)?;
    Ok(x_t.iter().zip(v_hat).map(|(x, v)| a * x - s * v).collect())
}

/// `w(t) = (α/σ)^{2ω}` clamped to `[1e-4, 1e4]`.
pub fn loss_weight(t: f64, omega: f64) -> Result<f64> {
    let (a, s) = schedule(t)?;
    if s == 0.0 {
        log::warn!("loss weight at t = 0 is singular; using the upper clamp");
        return Ok(WEIGHT_MAX);
    }
    Ok((a / s).powf(2.0 * omega).clamp(WEIGHT_MIN, WEIGHT_MAX))
}

/// One draw of diffusion time and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: f64,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    /// `t ~ U(0,1)` (zero excluded) and `ε ~ N(0, I)`.
    pub fn sample<R: Rng>(n: usize, rng: &mut R) -> Self {
        let t = loop {
            let t: f64 = rng.gen();
            if t > 0.0 {
                break t;
            }
        };
        Self {
            t,
            eps: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseLoss {
    pub loss: f64,
    pub t: f64,
    pub weight: f64,
    pub grad_x: Vec<f64>,
    pub grad_params: Vec<f64>,
}

/// `½ w(t) · mean((x̂ − x)²)` with `x̂ = reconstruct_x0(x_t, f(x_t, t), t)`,
/// differentiated with respect to both the plane and the model parameters.
pub fn denoise_loss<M: VelocityModel>(x: &[f64], shape: PlaneShape, model: &M, draw: &NoiseDraw, omega: f64) -> Result<DenoiseLoss> {
    if x.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!("{} values for a {shape:?} plane", x.len())));
    }
    let (a, s) = schedule(draw.t)?;
    let w = loss_weight(draw.t, omega)?;
    let x_t = add_noise(x, draw.t, &draw.eps)?;
    let (v_hat, cache) = model.forward(&x_t, shape, draw.t)?;
    if v_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput("denoiser".into()));
    }
    let x_hat = reconstruct_x0(&x_t, &v_hat, draw.t)?;
    let n = x.len() as f64;
    let resid: Vec<f64> = x_hat.iter().zip(x).map(|(p, q)| p - q).collect();
    let loss = 0.5 * w * resid.iter().map(|r| r * r).sum::<f64>() / n;
    // ∂L/∂x̂ = w r / n.
    let g_hat: Vec<f64> = resid.iter().map(|r| w * r / n).collect();
    let g_v: Vec<f64> = g_hat.iter().map(|g| -s * g).collect();
    let mut grad_params = vec![0.0; model.n_params()];
    let g_xt_model = model.backward(&cache, &g_v, &mut grad_params);
    let grad_x = g_hat
        .iter()
        .zip(&g_xt_model)
        .map(|(gh, gm)| a * (a * gh + gm) - gh)
        .collect();
    Ok(DenoiseLoss {
        loss,
        t: draw.t,
        weight: w,
        grad_x,
        grad_params,
    })
}

/// Deterministic sampler: from seeded unit noise at `t = 1`, repeatedly
/// predict `x̂`, infer `ε̂`, and step to the next time of a uniform grid.
pub fn sample<M: VelocityModel>(model: &M, shape: PlaneShape, steps: usize, seed: u64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let t_next = (k - 1) as f64 / steps as f64;
        let (a, s) = schedule(t)?;
        let (a_next, s_next) = schedule(t_next)?;
        let v_hat = model.predict(&x, shape, t)?;
        if v_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput("denoiser".into()));
        }
        let x_hat = reconstruct_x0(&x, &v_hat, t)?;
        x = x
            .iter()
            .zip(&x_hat)
            .map(|(xt, xh)| {
                let eps_hat = (xt - a * xh) / s;
                a_next * xh + s_next * eps_hat
            })
            .collect();
    }
    Ok(x)
}

/// `sample` wrapped into a feature plane.
pub fn sample_plane<M: VelocityModel>(model: &M, shape: PlaneShape, steps: usize, seed: u64) -> Result<UvFeaturePlane> {
    let mut plane = UvFeaturePlane::zeros(shape.resolution, shape.channels)?;
    plane.data = sample(model, shape, steps, seed)?;
    Ok(plane)
}

pub fn encode_denoiser(net: &Denoiser) -> Result<Vec<u8>> {
    net.validate()?;
    encode_checkpoint(&json!({ "kind": "denoiser", "config": net.config }), &net.params)
}

pub fn decode_denoiser(bytes: &[u8]) -> Result<Denoiser> {
    let (header, params) = decode_checkpoint(bytes)?;
    if header.get("kind").and_then(|k| k.as_str()) != Some("denoiser") {
        return Err(Error::MalformedHeader("checkpoint is not a denoiser".into()));
    }
    let config: DenoiserConfig = serde_json::from_value(header.get("config").cloned().unwrap_or_default())
        .map_err(|e| Error::MalformedHeader(format!("denoiser config: {e}")))?;
    let net = Denoiser { config, params };
    net.validate().map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok(net)
}

pub fn save_denoiser(path: &Path, net: &Denoiser) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_denoiser(net)?)?;
    Ok(())
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_denoiser(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Predicts the velocity that reconstructs a fixed target exactly.
    struct Oracle {
        target: Vec<f64>,
    }

    impl VelocityModel for Oracle {
        type Cache = f64;

        fn n_params(&self) -> usize {
            0
        }

        fn forward(&self, x_t: &[f64], _: PlaneShape, t: f64) -> Result<(Vec<f64>, f64)> {
            let (a, s) = schedule(t)?;
            Ok((x_t.iter().zip(&self.target).map(|(x, y)| (a * x - y) / s).collect(), a / s))
        }

        fn backward(&self, slope: &f64, grad_v: &[f64], _: &mut [f64]) -> Vec<f64> {
            grad_v.iter().map(|g| g * slope).collect()
        }
    }

    /// Always predicts zero; a linear model with a closed-form loss.
    struct Zero;

    impl VelocityModel for Zero {
        type Cache = usize;

        fn n_params(&self) -> usize {
            0
        }

        fn forward(&self, x_t: &[f64], _: PlaneShape, _: f64) -> Result<(Vec<f64>, usize)> {
            Ok((vec![0.0; x_t.len()], x_t.len()))
        }

        fn backward(&self, n: &usize, _: &[f64], _: &mut [f64]) -> Vec<f64> {
            vec![0.0; *n]
        }
    }

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            channels: 2,
            widths: [3, 4, 5],
            embedding_dim: 4,
            kernel: 3,
            output_scale: 1.0,
            data_std: 0.5,
        }
    }

    fn tiny_net(seed: u64) -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Denoiser::init(tiny(), &mut rng).unwrap();
        // Non-zero scale-shift heads so their gradients are exercised.
        for p in net.params.iter_mut().filter(|p| **p == 0.0) {
            *p = rng.gen_range(-0.3..0.3);
        }
        net
    }

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn schedule_endpoints_and_unit_norm() {
        assert_eq!(schedule(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(schedule(1.0).unwrap(), (0.0, 1.0));
        for i in 1..100 {
            let (a, s) = schedule(i as f64 / 100.0).unwrap();
            assert!((a * a + s * s - 1.0).abs() < 1e-15);
        }
        assert!(schedule(-0.1).is_err());
        assert!(schedule(1.5).is_err());
    }

    #[test]
    fn noising_round_trip() {
        let x = gaussian(50, 1);
        let eps = gaussian(50, 2);
        for t in [0.0, 0.1, 0.5, 0.93, 1.0] {
            let x_t = add_noise(&x, t, &eps).unwrap();
            let v = v_target(&x, &eps, t).unwrap();
            let back = reconstruct_x0(&x_t, &v, t).unwrap();
            for (p, q) in back.iter().zip(&x) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_weight_matches_closed_form_and_clamps() {
        for t in [0.2, 0.5, 0.8] {
            let a = (0.5 * std::f64::consts::PI * t).cos();
            let s = (0.5 * std::f64::consts::PI * t).sin();
            assert!((loss_weight(t, 0.5).unwrap() - a / s).abs() < 1e-12);
            assert!((loss_weight(t, 1.0).unwrap() - (a / s).powi(2)).abs() < 1e-10);
        }
        assert_eq!(loss_weight(0.0, 0.5).unwrap(), WEIGHT_MAX);
        assert_eq!(loss_weight(1.0, 0.5).unwrap(), WEIGHT_MIN);
        assert_eq!(loss_weight(1e-9, 0.5).unwrap(), WEIGHT_MAX);
        assert_eq!(loss_weight(0.3, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn oracle_model_has_zero_loss() {
        let shape = PlaneShape { resolution: 4, channels: 2 };
        let x = gaussian(shape.len(), 3);
        let model = Oracle { target: x.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let draw = NoiseDraw::sample(shape.len(), &mut rng);
            let l = denoise_loss(&x, shape, &model, &draw, 0.5).unwrap();
            assert!(l.loss < 1e-20, "loss {} at t {}", l.loss, l.t);
            // x̂ ≡ target, so the loss gradient through x_t cancels.
            assert!(l.grad_x.iter().all(|g| g.abs() < 1e-9));
        }
    }

    #[test]
    fn zero_model_loss_and_gradient_in_closed_form() {
        // x̂ = α x_t = α² x + α σ ε.
        let shape = PlaneShape { resolution: 4, channels: 1 };
        let x = gaussian(16, 5);
        let eps = gaussian(16, 6);
        let draw = NoiseDraw { t: 0.4, eps: eps.clone() };
        let l = denoise_loss(&x, shape, &Zero, &draw, 0.5).unwrap();
        let (a, s) = schedule(0.4).unwrap();
        let w = a / s;
        let r: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| (a * a - 1.0) * x + a * s * e).collect();
        let loss = 0.5 * w * r.iter().map(|r| r * r).sum::<f64>() / 16.0;
        assert!((l.loss - loss).abs() < 1e-12 * loss.max(1.0));
        for (g, r) in l.grad_x.iter().zip(&r) {
            assert!((g - w * r * (a * a - 1.0) / 16.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sampler_with_oracle_reaches_target() {
        let shape = PlaneShape { resolution: 4, channels: 3 };
        let target = gaussian(shape.len(), 7);
        let model = Oracle { target: target.clone() };
        for seed in 0..5 {
            for steps in [1, 10, 50] {
                let out = sample(&model, shape, steps, seed).unwrap();
                for (p, q) in out.iter().zip(&target) {
                    assert!((p - q).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let shape = PlaneShape { resolution: 4, channels: 2 };
        let net = tiny_net(0);
        let a = sample(&net, shape, 5, 9).unwrap();
        let b = sample(&net, shape, 5, 9).unwrap();
        let c = sample(&net, shape, 5, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(sample(&net, shape, 0, 9).is_err());
    }

    #[test]
    fn denoiser_backward_matches_finite_differences() {
        let net = tiny_net(1);
        let shape = PlaneShape { resolution: 8, channels: 2 };
        let x = gaussian(shape.len(), 11);
        let proj = gaussian(shape.len(), 12);
        let t = 0.37;
        let objective = |net: &Denoiser, x: &[f64]| -> f64 {
            let v = net.predict(x, shape, t).unwrap();
            v.iter().zip(&proj).map(|(v, p)| v * p).sum()
        };
        let (_, cache) = net.forward(&x, shape, t).unwrap();
        let mut gp = vec![0.0; net.n_params()];
        let gx = net.backward(&cache, &proj, &mut gp);
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..60 {
            let i = rng.gen_range(0..net.params.len());
            let mut up = net.clone();
            up.params[i] += h;
            let mut dn = net.clone();
            dn.params[i] -= h;
            let fd = (objective(&up, &x) - objective(&dn, &x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-5 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", gp[i]);
        }
        for i in (0..x.len()).step_by(7) {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            let fd = (objective(&net, &up) - objective(&net, &dn)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-5 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", gx[i]);
        }
    }

    #[test]
    fn denoise_loss_gradients_match_finite_differences() {
        let net = tiny_net(2);
        let shape = PlaneShape { resolution: 4, channels: 2 };
        let x = gaussian(shape.len(), 21);
        let draw = NoiseDraw { t: 0.6, eps: gaussian(shape.len(), 22) };
        let l = denoise_loss(&x, shape, &net, &draw, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            let fd = (denoise_loss(&up, shape, &net, &draw, 0.5).unwrap().loss - denoise_loss(&dn, shape, &net, &draw, 0.5).unwrap().loss) / (2.0 * h);
            assert!((fd - l.grad_x[i]).abs() < 1e-6 * (1.0 + fd.abs()), "x {i}: {fd} vs {}", l.grad_x[i]);
        }
        for i in (0..net.params.len()).step_by(13) {
            let mut up = net.clone();
            up.params[i] += h;
            let mut dn = net.clone();
            dn.params[i] -= h;
            let fd = (denoise_loss(&x, shape, &up, &draw, 0.5).unwrap().loss - denoise_loss(&x, shape, &dn, &draw, 0.5).unwrap().loss) / (2.0 * h);
            assert!((fd - l.grad_params[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", l.grad_params[i]);
        }
    }

    #[test]
    fn denoiser_rejects_bad_shapes() {
        let net = tiny_net(3);
        let bad_res = PlaneShape { resolution: 6, channels: 2 };
        assert!(net.predict(&vec![0.0; bad_res.len()], bad_res, 0.5).is_err());
        let bad_ch = PlaneShape { resolution: 4, channels: 3 };
        assert!(net.predict(&vec![0.0; bad_ch.len()], bad_ch, 0.5).is_err());
    }

    #[test]
    fn denoiser_checkpoint_round_trip() {
        let net = tiny_net(4);
        let back = decode_denoiser(&encode_denoiser(&net).unwrap()).unwrap();
        assert_eq!(back.config, net.config);
        for (a, b) in back.params.iter().zip(&net.params) {
            assert_eq!(*a as f32, *b as f32);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/net.bin");
        save_denoiser(&path, &net).unwrap();
        assert_eq!(load_denoiser(&path).unwrap(), back);
        assert!(matches!(load_denoiser(&dir.path().join("none.bin")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn default_denoiser_sizes() {
        let cfg = DenoiserConfig::default();
        cfg.validate().unwrap();
        let net = Denoiser::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.validate().unwrap();
        let shape = PlaneShape { resolution: 16, channels: 32 };
        let v = net.predict(&gaussian(shape.len(), 1), shape, 0.5).unwrap();
        assert_eq!(v.len(), shape.len());
        assert!(v.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn moving_average_is_trailing_mean() {
        let m = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0], 2);
        assert_eq!(m, vec![1.0, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(moving_average(&[], 3), Vec::<f64>::new());
    }
}
