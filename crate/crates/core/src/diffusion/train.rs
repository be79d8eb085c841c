//! Single-stage training: every step fits one subject's plane to its images
//! and, in the same update, pulls it through the denoising loss while the
//! denoiser learns from it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{denoise_loss, Denoiser, DiffusionConfig, NoiseDraw, PlaneShape};
use crate::assets::AvatarAssets;
use crate::dataset::SubjectDataset;
use crate::fit::{FitConfig, Fitter, TraceRow};
use crate::gaussian::{DecoderParams, UvFeaturePlane};
use crate::optim::Adam;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRow {
    pub step: usize,
    pub subject: usize,
    pub t: f64,
    /// Unweighted by `λ_denois`.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub planes: Vec<UvFeaturePlane>,
    pub decoders: DecoderParams,
    pub denoiser: Denoiser,
    pub fit_traces: Vec<Vec<TraceRow>>,
    pub denoise_trace: Vec<DenoiseRow>,
}

/// Trailing mean over `window` values; entry `i` averages
/// `values[i+1-window ..= i]` (fewer at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// `λ_fit · L_fit + λ_denois · L_denois` per step, round-robin over subjects.
/// Planes receive both gradients, the decoders only the fitting gradient and
/// the denoiser only the denoising gradient. With `λ_denois = 0` the plane and
/// decoder trajectories equal those of `fit_subjects` under the same
/// configuration.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    datasets: &[SubjectDataset],
    planes: Vec<UvFeaturePlane>,
    decoders: DecoderParams,
    denoiser: Denoiser,
    assets: &AvatarAssets,
    fit_cfg: &FitConfig,
    cfg: &DiffusionConfig,
) -> Result<JointOutcome> {
    cfg.validate()?;
    denoiser.validate()?;
    let mut fitter = Fitter::new(assets, datasets, planes, decoders, fit_cfg)?;
    let mut denoiser = denoiser;
    let mut opt = Adam::new(denoiser.params.len(), cfg.lr_denoiser, fit_cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut denoise_trace = Vec::new();

    for _ in 0..fit_cfg.iterations {
        let step = fitter.step_index();
        let s = fitter.current_subject();
        let mut grads = if cfg.lambda_fit > 0.0 {
            let mut g = fitter.compute()?;
            if cfg.lambda_fit != 1.0 {
                g.scale(cfg.lambda_fit);
            }
            g
        } else {
            fitter.zero_grads()
        };
        if cfg.lambda_denois > 0.0 {
            let plane = &fitter.planes[s];
            let shape = PlaneShape::of(plane);
            let draw = NoiseDraw::sample(shape.len(), &mut rng);
            let dl = denoise_loss(&plane.data, shape, &denoiser, &draw, cfg.omega).map_err(|e| match e {
                Error::NonFiniteOutput(_) => Error::NumericFailure {
                    step,
                    term: "denoiser output".into(),
                },
                other => other,
            })?;
            let finite = dl.loss.is_finite()
                && dl.grad_x.iter().all(|v| v.is_finite())
                && dl.grad_params.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NumericFailure {
                    step,
                    term: "denoising gradient".into(),
                });
            }
            for (g, d) in grads.plane.iter_mut().zip(&dl.grad_x) {
                *g += cfg.lambda_denois * d;
            }
            let scaled: Vec<f64> = dl.grad_params.iter().map(|g| cfg.lambda_denois * g).collect();
            opt.step(&mut denoiser.params, &scaled);
            denoise_trace.push(DenoiseRow {
                step,
                subject: s,
                t: dl.t,
                loss: dl.loss,
            });
        }
        fitter.apply(&grads);
        if (step + 1) % 100 == 0 {
            let recent = denoise_trace.iter().rev().take(100).map(|r| r.loss).sum::<f64>() / 100f64.min(denoise_trace.len().max(1) as f64);
            log::info!("step {}: mean denoise loss (last 100) {recent:.3e}", step + 1);
        }
    }
    Ok(JointOutcome {
        planes: fitter.planes,
        decoders: fitter.decoders,
        denoiser,
        fit_traces: fitter.traces,
        denoise_trace,
    })
}
