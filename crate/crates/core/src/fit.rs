//! Fitting feature planes and shared decoders to multi-view images.
//!
//! Each step samples a few views of one subject, renders them through the
//! whole chain (decode → assemble → warp → deform → rasterize), and pushes the
//! colour and offset-regularisation gradients back into the plane and the
//! decoders.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assets::AvatarAssets;
use crate::body_model::PoseShapeParams;
use crate::dataset::{Observation, SubjectDataset};
use crate::deform::Deformer;
use crate::gaussian::{assemble, assemble_backward, decode_backward, decode_cached, AttributeGrads, DecoderGrads, DecoderParams, GaussianSet, UvFeaturePlane};
use crate::optim::{Adam, AdamConfig};
use crate::render::{rasterize, rasterize_backward, rasterize_with_state, Camera, ForwardState, Image, RenderOptions};
use crate::{Error, Result, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub views_per_step: usize,
    pub lr_plane: f64,
    pub lr_decoders: f64,
    pub lambda_c: f64,
    pub lambda_reg: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub background: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            views_per_step: 4,
            lr_plane: 1e-2,
            lr_decoders: 1e-3,
            lambda_c: 1.0,
            lambda_reg: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
            background: [1.0; 3],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views_per_step == 0 {
            return Err(Error::InvalidArgument("views_per_step must be positive".into()));
        }
        let rates = [self.lr_plane, self.lr_decoders];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        let weights = [self.lambda_c, self.lambda_reg];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("background must be finite".into()));
        }
        Ok(())
    }

    pub fn background(&self) -> Vec3 {
        Vec3::from(self.background)
    }
}

/// Loss value and its gradients with respect to the rendered images and the
/// canonical offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct FitLoss {
    /// `λ_c · mean squared colour error`.
    pub color: f64,
    /// `λ_reg · mean ‖δμ‖²`.
    pub reg: f64,
    pub grad_images: Vec<Image>,
    pub grad_offsets: Vec<Vec3>,
}

impl FitLoss {
    pub fn total(&self) -> f64 {
        self.color + self.reg
    }
}

/// `λ_c · mean((rendered − target)²) + λ_reg · mean(‖δμ‖²)`; the colour mean
/// runs over every channel of every pixel of every view.
pub fn fit_loss(rendered: &[Image], targets: &[Image], offsets: &[Vec3], lambda_c: f64, lambda_reg: f64) -> Result<FitLoss> {
    if rendered.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rendered views for {} targets",
            rendered.len(),
            targets.len()
        )));
    }
    for (r, t) in rendered.iter().zip(targets) {
        r.check_same_shape(t)?;
    }
    let n_color: usize = rendered.iter().map(|r| r.data.len()).sum();
    let mut sq = 0.0;
    let scale_c = if n_color > 0 { lambda_c / n_color as f64 } else { 0.0 };
    let grad_images = rendered
        .iter()
        .zip(targets)
        .map(|(r, t)| {
            let data = r
                .data
                .iter()
                .zip(&t.data)
                .map(|(a, b)| {
                    let d = a - b;
                    sq += d * d;
                    2.0 * scale_c * d
                })
                .collect();
            Image { data, ..r.clone() }
        })
        .collect();
    let scale_r = if offsets.is_empty() { 0.0 } else { lambda_reg / offsets.len() as f64 };
    let reg_sum: f64 = offsets.iter().map(|d| d.norm_squared()).sum();
    Ok(FitLoss {
        color: scale_c * sq,
        reg: scale_r * reg_sum,
        grad_images,
        grad_offsets: offsets.iter().map(|d| d * (2.0 * scale_r)).collect(),
    })
}

/// `10·log10(1/MSE)` for images in `[0,1]`; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Seeded choice of the views used at each step.
#[derive(Clone, Debug)]
pub struct ViewSampler {
    rng: ChaCha8Rng,
}

impl ViewSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `min(k, n)` distinct indices in `0..n`, ascending.
    pub fn sample(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub subject: usize,
    pub loss_c: f64,
    pub loss_reg: f64,
}

pub fn trace_csv<'a>(rows: impl IntoIterator<Item = &'a TraceRow>) -> String {
    let mut out = String::from("step,loss_c,loss_reg\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e}\n", r.step, r.loss_c, r.loss_reg));
    }
    out
}

pub fn write_trace_csv<'a>(path: &Path, rows: impl IntoIterator<Item = &'a TraceRow>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, trace_csv(rows))?;
    Ok(())
}

/// Gradients of one step's loss.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub plane: Vec<f64>,
    pub decoders: DecoderGrads,
    pub loss_c: f64,
    pub loss_reg: f64,
}

impl StepGrads {
    pub fn is_finite(&self) -> bool {
        self.loss_c.is_finite()
            && self.loss_reg.is_finite()
            && self.plane.iter().all(|v| v.is_finite())
            && self.decoders.is_finite()
    }

    pub fn scale(&mut self, s: f64) {
        self.plane.iter_mut().for_each(|v| *v *= s);
        self.decoders.scale(s);
        self.loss_c *= s;
        self.loss_reg *= s;
    }
}

/// One rendered view of the current step.
pub struct ViewTarget<'a> {
    pub deformer: &'a Deformer,
    pub camera: &'a Camera,
    pub target: &'a Image,
}

struct ViewForward {
    posed: GaussianSet,
    image: Image,
    state: ForwardState,
}

/// Loss and full-chain gradients for a set of views of one subject.
pub fn loss_and_grads(
    assets: &AvatarAssets,
    plane: &UvFeaturePlane,
    decoders: &DecoderParams,
    views: &[ViewTarget<'_>],
    cfg: &FitConfig,
) -> Result<StepGrads> {
    let (maps, cache) = decode_cached(plane, decoders)?;
    let canonical = assemble(&maps, &assets.anchors, &assets.base_scales)?;
    let opts = RenderOptions {
        background: cfg.background(),
        normals: false,
    };
    let forwards = views
        .par_iter()
        .map(|v| {
            let posed = v.deformer.apply(&canonical);
            let (out, state) = rasterize_with_state(&posed.gaussians, v.camera, &opts)?;
            Ok(ViewForward {
                posed,
                image: out.color,
                state,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rendered: Vec<Image> = forwards.iter().map(|f| f.image.clone()).collect();
    let targets: Vec<Image> = views.iter().map(|v| v.target.clone()).collect();
    let loss = fit_loss(&rendered, &targets, &canonical.offsets, cfg.lambda_c, cfg.lambda_reg)?;

    let per_view = views
        .par_iter()
        .zip(forwards.par_iter())
        .zip(loss.grad_images.par_iter())
        .map(|((v, f), g)| {
            let prim = rasterize_backward(&f.posed.gaussians, v.camera, &f.state, g, None)?;
            Ok(v.deformer.backward(&f.posed, &prim))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut attr = AttributeGrads::zeros(canonical.len());
    for g in &per_view {
        attr.add(g);
    }
    for (a, g) in attr.offset.iter_mut().zip(&loss.grad_offsets) {
        *a += g;
    }
    let grad_maps = assemble_backward(&maps, &assets.anchors, &attr);
    let mut dec = decoders.zero_grads();
    let plane_grad = decode_backward(decoders, &cache, &grad_maps, &mut dec);
    Ok(StepGrads {
        plane: plane_grad,
        decoders: dec,
        loss_c: loss.color,
        loss_reg: loss.reg,
    })
}

/// Renders a fitted plane for one camera and pose.
pub fn render_view(
    assets: &AvatarAssets,
    plane: &UvFeaturePlane,
    decoders: &DecoderParams,
    params: &PoseShapeParams,
    camera: &Camera,
    background: &Vec3,
) -> Result<Image> {
    let posed = assets.posed(plane, decoders, params)?;
    Ok(rasterize(&posed.gaussians, camera, background)?.color)
}

/// Per-subject deformers, shared between observations with equal parameters.
struct PreparedSubject<'a> {
    dataset: &'a SubjectDataset,
    deformers: Vec<Deformer>,
    deformer_of: Vec<usize>,
}

impl<'a> PreparedSubject<'a> {
    fn new(assets: &AvatarAssets, dataset: &'a SubjectDataset) -> Result<Self> {
        let mut seen: Vec<&PoseShapeParams> = Vec::new();
        let mut deformers = Vec::new();
        let mut deformer_of = Vec::with_capacity(dataset.len());
        for o in &dataset.observations {
            let i = match seen.iter().position(|p| **p == o.params) {
                Some(i) => i,
                None => {
                    seen.push(&o.params);
                    deformers.push(assets.deformer(&o.params)?);
                    deformers.len() - 1
                }
            };
            deformer_of.push(i);
        }
        Ok(Self {
            dataset,
            deformers,
            deformer_of,
        })
    }

    fn view(&self, i: usize) -> ViewTarget<'_> {
        let o: &Observation = &self.dataset.observations[i];
        ViewTarget {
            deformer: &self.deformers[self.deformer_of[i]],
            camera: &o.camera,
            target: &o.image,
        }
    }
}

/// Optimisation state for one or more subjects with shared decoders.
/// Step `s` trains subject `s mod n`.
pub struct Fitter<'a> {
    assets: &'a AvatarAssets,
    subjects: Vec<PreparedSubject<'a>>,
    pub planes: Vec<UvFeaturePlane>,
    pub decoders: DecoderParams,
    plane_opts: Vec<Adam>,
    geometry_opt: Adam,
    appearance_opt: Adam,
    sampler: ViewSampler,
    step: usize,
    cfg: FitConfig,
    pub traces: Vec<Vec<TraceRow>>,
}

impl<'a> Fitter<'a> {
    pub fn new(
        assets: &'a AvatarAssets,
        datasets: &'a [SubjectDataset],
        planes: Vec<UvFeaturePlane>,
        decoders: DecoderParams,
        cfg: &FitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        decoders.validate()?;
        if datasets.is_empty() || datasets.len() != planes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} datasets for {} planes (need one plane per subject, at least one)",
                datasets.len(),
                planes.len()
            )));
        }
        for d in datasets {
            if d.is_empty() {
                return Err(Error::InvalidArgument(format!("subject `{}` has no observations", d.id)));
            }
        }
        for p in &planes {
            p.validate()?;
        }
        let subjects = datasets
            .iter()
            .map(|d| PreparedSubject::new(assets, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            assets,
            subjects,
            plane_opts: planes.iter().map(|p| Adam::new(p.data.len(), cfg.lr_plane, cfg.adam)).collect(),
            geometry_opt: Adam::new(decoders.geometry.params.len(), cfg.lr_decoders, cfg.adam),
            appearance_opt: Adam::new(decoders.appearance.params.len(), cfg.lr_decoders, cfg.adam),
            planes,
            decoders,
            sampler: ViewSampler::new(cfg.seed),
            step: 0,
            cfg: cfg.clone(),
            traces: vec![Vec::new(); datasets.len()],
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Subject trained by the next step.
    pub fn current_subject(&self) -> usize {
        self.step % self.subjects.len()
    }

    pub fn config(&self) -> &FitConfig {
        &self.cfg
    }

    /// All-zero gradients for the current subject.
    pub fn zero_grads(&self) -> StepGrads {
        StepGrads {
            plane: vec![0.0; self.planes[self.current_subject()].data.len()],
            decoders: self.decoders.zero_grads(),
            loss_c: 0.0,
            loss_reg: 0.0,
        }
    }

    /// Samples this step's views and evaluates the fitting gradients.
    pub fn compute(&mut self) -> Result<StepGrads> {
        let s = self.current_subject();
        let subject = &self.subjects[s];
        let picked = self.sampler.sample(subject.dataset.len(), self.cfg.views_per_step);
        let views: Vec<ViewTarget<'_>> = picked.iter().map(|&i| subject.view(i)).collect();
        let grads = loss_and_grads(self.assets, &self.planes[s], &self.decoders, &views, &self.cfg)?;
        if !grads.is_finite() {
            return Err(Error::NumericFailure {
                step: self.step,
                term: "fitting gradient".into(),
            });
        }
        Ok(grads)
    }

    /// Applies `grads` (for the current subject) and records the trace.
    pub fn apply(&mut self, grads: &StepGrads) {
        let s = self.current_subject();
        self.plane_opts[s].step(&mut self.planes[s].data, &grads.plane);
        self.geometry_opt.step(&mut self.decoders.geometry.params, &grads.decoders.geometry);
        self.appearance_opt.step(&mut self.decoders.appearance.params, &grads.decoders.appearance);
        self.traces[s].push(TraceRow {
            step: self.step,
            subject: s,
            loss_c: grads.loss_c,
            loss_reg: grads.loss_reg,
        });
        self.step += 1;
    }

    pub fn step(&mut self) -> Result<()> {
        let grads = self.compute()?;
        self.apply(&grads);
        Ok(())
    }

    pub fn run(&mut self, iterations: usize) -> Result<()> {
        for _ in 0..iterations {
            self.step()?;
            if self.step.is_multiple_of(100) {
                let last = self.traces[(self.step - 1) % self.subjects.len()].last().expect("row pushed");
                log::info!("step {}: loss_c {:.3e} loss_reg {:.3e}", self.step, last.loss_c, last.loss_reg);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub plane: UvFeaturePlane,
    pub decoders: DecoderParams,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug)]
pub struct MultiFitOutcome {
    pub planes: Vec<UvFeaturePlane>,
    pub decoders: DecoderParams,
    pub traces: Vec<Vec<TraceRow>>,
}

pub fn fit(
    dataset: &SubjectDataset,
    plane: UvFeaturePlane,
    decoders: DecoderParams,
    assets: &AvatarAssets,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    let mut out = fit_subjects(std::slice::from_ref(dataset), vec![plane], decoders, assets, cfg)?;
    Ok(FitOutcome {
        plane: out.planes.pop().expect("one plane"),
        decoders: out.decoders,
        trace: out.traces.pop().expect("one trace"),
    })
}

/// Round-robin fitting of several subjects with shared decoders.
pub fn fit_subjects(
    datasets: &[SubjectDataset],
    planes: Vec<UvFeaturePlane>,
    decoders: DecoderParams,
    assets: &AvatarAssets,
    cfg: &FitConfig,
) -> Result<MultiFitOutcome> {
    let mut fitter = Fitter::new(assets, datasets, planes, decoders, cfg)?;
    fitter.run(cfg.iterations)?;
    Ok(MultiFitOutcome {
        planes: fitter.planes,
        decoders: fitter.decoders,
        traces: fitter.traces,
    })
}
