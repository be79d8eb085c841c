use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use uvatar::assets::{AssetConfig, AvatarAssets};
use uvatar::bench::run_benchmark;
use uvatar::body_model::{generate_toy_model, subdivide, ParametricBodyModel, PoseShapeParams};
use uvatar::config::{PipelineConfig, PlaneConfig};
use uvatar::dataset::load_subjects;
use uvatar::diffusion::{load_denoiser, moving_average, sample_plane, save_denoiser, train_joint, Denoiser, PlaneShape};
use uvatar::edit::{transfer, Halves, RegionAtlas, UvMask};
use uvatar::fit::{fit_subjects, write_trace_csv};
use uvatar::gaussian::{DecoderConfig, DecoderParams, UvFeaturePlane};
use uvatar::io::{load_decoders, load_model, load_plane, load_volume, read_json, save_decoders, save_model, save_plane, save_png, save_volume, write_json};
use uvatar::render::{rasterize, render_normals, Camera};
use uvatar::synth::{ring_cameras, synthetic_subject, SyntheticConfig};
use uvatar::Vec3;

use crate::{AnimateArgs, AvatarArgs, BenchArgs, Cli, Command, DiffusionCommand, EditCommand, FitArgs, GlobalArgs, InitArgs, RenderArgs, SampleArgs, ToyModelArgs, TrainArgs, TransferArgs};

/// Camera height above the toy body centre for generated views.
const VIEW_ELEVATION: f64 = 0.3;

/// A problem with how the command was invoked.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<uvatar::Error>() {
            return match err {
                _ if err.is_numeric() => 3,
                uvatar::Error::InvalidArgument(_) | uvatar::Error::UnknownRegion(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
    json: bool,
    threads: Option<usize>,
}

impl Ctx {
    fn new(global: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &global.config {
            Some(path) => PipelineConfig::load(path).with_context(|| format!("loading configuration {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = global.seed {
            cfg.seed = seed;
            cfg.fit.seed = seed;
            cfg.diffusion.seed = seed;
        }
        let threads = cfg.resolve_threads(global.threads)?;
        if let Some(n) = threads {
            // Fails only if a pool already exists, which keeps its size.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let out = global.out.clone().or_else(|| cfg.paths.output.clone()).unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            json: global.json,
            threads,
        })
    }

    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    fn report(&self, summary: Value) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
        } else if let Value::Object(map) = summary {
            for (k, v) in map {
                println!("{k}: {v}");
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::ToyModel(a) => toy_model(&ctx, a),
        Command::Init(a) => init(ctx, a),
        Command::Fit(a) => fit(ctx, a),
        Command::Render(a) => render(&ctx, a),
        Command::Animate(a) => animate(&ctx, a),
        Command::Edit(EditCommand::Transfer(a)) => edit_transfer(&ctx, a),
        Command::Diffusion(DiffusionCommand::Train(a)) => diffusion_train(ctx, a),
        Command::Diffusion(DiffusionCommand::Sample(a)) => diffusion_sample(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
    }
}

fn toy_model(ctx: &Ctx, args: ToyModelArgs) -> Result<()> {
    if args.detail == 0 {
        return Err(usage("--detail must be at least 1"));
    }
    let model = generate_toy_model(ctx.cfg.seed, args.detail);
    let model_path = ctx.path("model.e3bm");
    save_model(&model_path, &model)?;
    let mut subjects = Vec::new();
    if args.subjects > 0 {
        let assets_cfg = AssetConfig {
            subdivision: args.subdivision.unwrap_or(ctx.cfg.assets.subdivision),
            ..ctx.cfg.assets
        };
        let assets = AvatarAssets::build(&model, &assets_cfg)?;
        let synth = SyntheticConfig {
            views: args.views,
            heldout_views: args.heldout,
            size: args.size,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
        for i in 0..args.subjects {
            let id = format!("subject_{i:02}");
            let s = synthetic_subject(&id, &assets, &synth, &mut rng)?;
            s.train.save(&ctx.path("dataset").join(&id))?;
            if args.heldout > 0 {
                s.heldout.save(&ctx.path("heldout").join(&id))?;
            }
            subjects.push(id);
        }
    }
    ctx.report(json!({
        "model": model_path,
        "vertices": model.n_vertices(),
        "faces": model.faces.len(),
        "joints": model.n_joints(),
        "subjects": subjects,
    }));
    Ok(())
}

/// Written by `init`; everything else in the directory is found by name.
#[derive(Serialize, Deserialize)]
struct InitManifest {
    assets: AssetConfig,
    plane: PlaneConfig,
    decoder: DecoderConfig,
    primitives: usize,
    seed: u64,
}

const INIT_MANIFEST: &str = "init.json";
const MODEL_FILE: &str = "model.e3bm";
const VOLUME_FILE: &str = "volume.e3sv";
const PLANE_FILE: &str = "plane.e3gp";
const DECODERS_FILE: &str = "decoders.e3ck";
const REGIONS_DIR: &str = "regions";

struct InitDir {
    dir: PathBuf,
    model: ParametricBodyModel,
    assets: AvatarAssets,
}

impl InitDir {
    fn load(dir: &Path) -> Result<Self> {
        let manifest: InitManifest = read_json(&dir.join(INIT_MANIFEST)).context("reading the init directory")?;
        let model = load_model(&dir.join(MODEL_FILE))?;
        let volume = load_volume(&dir.join(VOLUME_FILE))?;
        let assets = AvatarAssets::with_volume(subdivide(&model, manifest.assets.subdivision), volume)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            model,
            assets,
        })
    }

    fn plane(&self, path: Option<&Path>) -> Result<UvFeaturePlane> {
        Ok(load_plane(path.unwrap_or(&self.dir.join(PLANE_FILE)))?)
    }

    fn decoders(&self, path: Option<&Path>) -> Result<DecoderParams> {
        Ok(load_decoders(path.unwrap_or(&self.dir.join(DECODERS_FILE)))?)
    }
}

fn init(mut ctx: Ctx, args: InitArgs) -> Result<()> {
    let model_path = args
        .model
        .or_else(|| ctx.cfg.paths.model.clone())
        .ok_or_else(|| usage("init needs --model (or paths.model in the configuration)"))?;
    if let Some(r) = args.plane_resolution {
        ctx.cfg.plane.resolution = r;
    }
    if let Some(s) = args.subdivision {
        ctx.cfg.assets.subdivision = s;
    }
    if let Some(v) = args.volume_resolution {
        ctx.cfg.assets.volume_resolution = v;
    }
    ctx.cfg.validate()?;
    let model = load_model(&model_path)?;
    let assets = AvatarAssets::build(&model, &ctx.cfg.assets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let p = ctx.cfg.plane;
    let plane = UvFeaturePlane::random(p.resolution, p.channels, p.init_std, &mut rng)?;
    let decoders = DecoderParams::init(p.channels, &ctx.cfg.decoder, &mut rng)?;
    save_model(&ctx.path(MODEL_FILE), &model)?;
    save_volume(&ctx.path(VOLUME_FILE), &assets.volume)?;
    save_plane(&ctx.path(PLANE_FILE), &plane)?;
    save_decoders(&ctx.path(DECODERS_FILE), &decoders)?;
    let atlas = RegionAtlas::from_model(&model, p.resolution)?;
    atlas.save(&ctx.path(REGIONS_DIR))?;
    let manifest = InitManifest {
        assets: ctx.cfg.assets,
        plane: p,
        decoder: ctx.cfg.decoder,
        primitives: assets.len(),
        seed: ctx.cfg.seed,
    };
    write_json(&ctx.path(INIT_MANIFEST), &manifest)?;
    ctx.report(json!({
        "primitives": assets.len(),
        "plane_resolution": p.resolution,
        "channels": p.channels,
        "volume_resolution": ctx.cfg.assets.volume_resolution,
        "regions": atlas.names().collect::<Vec<_>>(),
        "out": ctx.out,
    }));
    Ok(())
}

fn dataset_dir(ctx: &Ctx, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| ctx.cfg.paths.dataset.clone())
        .ok_or_else(|| usage("needs --dataset (or paths.dataset in the configuration)"))
}

fn fit(mut ctx: Ctx, args: FitArgs) -> Result<()> {
    if let Some(n) = args.iterations {
        ctx.cfg.fit.iterations = n;
    }
    ctx.cfg.fit.validate()?;
    let init = InitDir::load(&args.init)?;
    let datasets = load_subjects(&dataset_dir(&ctx, args.dataset)?)?;
    let plane = init.plane(None)?;
    let decoders = init.decoders(None)?;
    let planes = vec![plane; datasets.len()];
    let outcome = fit_subjects(&datasets, planes, decoders, &init.assets, &ctx.cfg.fit)?;
    let mut finals = serde_json::Map::new();
    for ((d, plane), trace) in datasets.iter().zip(&outcome.planes).zip(&outcome.traces) {
        save_plane(&ctx.path("planes").join(format!("{}.e3gp", d.id)), plane)?;
        write_trace_csv(&ctx.path("traces").join(format!("{}.csv", d.id)), trace)?;
        if let Some(last) = trace.last() {
            finals.insert(d.id.clone(), json!({"loss_c": last.loss_c, "loss_reg": last.loss_reg}));
        }
    }
    save_decoders(&ctx.path(DECODERS_FILE), &outcome.decoders)?;
    ctx.report(json!({
        "subjects": datasets.len(),
        "iterations": ctx.cfg.fit.iterations,
        "final": finals,
        "out": ctx.out,
    }));
    Ok(())
}

fn image_size(ctx: &Ctx, avatar: &AvatarArgs) -> Result<usize> {
    let size = avatar.size.unwrap_or(ctx.cfg.render.width);
    if size == 0 {
        return Err(usage("--size must be positive"));
    }
    Ok(size)
}

fn render(ctx: &Ctx, args: RenderArgs) -> Result<()> {
    let init = InitDir::load(&args.avatar.init)?;
    let plane = init.plane(args.avatar.plane.as_deref())?;
    let decoders = init.decoders(args.avatar.decoders.as_deref())?;
    let params = match &args.pose {
        Some(path) => read_json::<PoseShapeParams>(path)?,
        None => PoseShapeParams::zeros(&init.model),
    };
    let cameras: Vec<Camera> = match &args.cameras {
        Some(path) => read_json(path)?,
        None => {
            if args.views == 0 {
                return Err(usage("--views must be positive"));
            }
            ring_cameras(args.views, image_size(ctx, &args.avatar)?, 0.0, VIEW_ELEVATION)?
        }
    };
    let posed = init.assets.posed(&plane, &decoders, &params)?;
    let background = Vec3::from(ctx.cfg.render.background);
    let mut images = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let path = ctx.path(format!("color_{i:03}.png"));
        save_png(&path, &rasterize(&posed.gaussians, cam, &background)?.color)?;
        images.push(path);
        if args.normals {
            let path = ctx.path(format!("normals_{i:03}.png"));
            save_png(&path, &render_normals(&posed.gaussians, cam)?)?;
            images.push(path);
        }
    }
    ctx.report(json!({ "primitives": posed.len(), "images": images }));
    Ok(())
}

fn animate(ctx: &Ctx, args: AnimateArgs) -> Result<()> {
    let init = InitDir::load(&args.avatar.init)?;
    let plane = init.plane(args.avatar.plane.as_deref())?;
    let decoders = init.decoders(args.avatar.decoders.as_deref())?;
    let frames: Vec<PoseShapeParams> = read_json(&args.poses)?;
    if frames.is_empty() {
        return Err(usage("pose sequence is empty"));
    }
    let cam = ring_cameras(1, image_size(ctx, &args.avatar)?, args.azimuth * PI / 180.0, VIEW_ELEVATION)?.remove(0);
    let canonical = init.assets.canonical(&plane, &decoders)?;
    let background = Vec3::from(ctx.cfg.render.background);
    let mut images = Vec::new();
    for (i, params) in frames.iter().enumerate() {
        let posed = init.assets.deformer(params)?.apply(&canonical);
        let path = ctx.path(format!("frame_{i:04}.png"));
        save_png(&path, &rasterize(&posed.gaussians, &cam, &background)?.color)?;
        images.push(path);
    }
    ctx.report(json!({ "frames": images.len(), "images": images }));
    Ok(())
}

fn edit_transfer(ctx: &Ctx, args: TransferArgs) -> Result<()> {
    let halves: Halves = args.halves.parse().map_err(|e: uvatar::Error| usage(e.to_string()))?;
    let src = load_plane(&args.src)?;
    let dst = load_plane(&args.dst)?;
    let mut mask = match (&args.region, &args.mask) {
        (_, Some(path)) => UvMask::load_png(path, "mask")?,
        (Some(name), None) => {
            let init = args.init.as_ref().ok_or_else(|| usage("--region needs --init for the region atlas"))?;
            let atlas = RegionAtlas::load(&init.join(REGIONS_DIR).join("regions.json"))?;
            atlas.get(name)?.clone()
        }
        (None, None) => return Err(usage("transfer needs --region or --mask")),
    };
    if let Some(f) = args.feather {
        if !(f.is_finite() && f >= 0.0) {
            return Err(usage("--feather must be non-negative"));
        }
        mask.feather = f;
    }
    let edited = transfer(&src, &dst, &mask, halves)?;
    let path = ctx.path(&args.output);
    save_plane(&path, &edited)?;
    let changed = edited.data.iter().zip(&dst.data).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    ctx.report(json!({
        "mask_texels": mask.count(),
        "feather": mask.feather,
        "changed_values": changed,
        "plane": path,
    }));
    Ok(())
}

fn diffusion_train(mut ctx: Ctx, args: TrainArgs) -> Result<()> {
    if let Some(n) = args.iterations {
        ctx.cfg.fit.iterations = n;
    }
    if let Some(l) = args.lambda_fit {
        ctx.cfg.diffusion.lambda_fit = l;
    }
    if let Some(l) = args.lambda_denois {
        ctx.cfg.diffusion.lambda_denois = l;
    }
    ctx.cfg.fit.validate()?;
    ctx.cfg.diffusion.validate()?;
    let init = InitDir::load(&args.init)?;
    let datasets = load_subjects(&dataset_dir(&ctx, args.dataset)?)?;
    let plane = init.plane(None)?;
    if plane.resolution % 4 != 0 {
        return Err(usage(format!("the denoiser needs a plane resolution divisible by 4, got {}", plane.resolution)));
    }
    let decoders = init.decoders(None)?;
    let mut den_cfg = ctx.cfg.denoiser;
    den_cfg.channels = plane.channels;
    let denoiser = Denoiser::init(den_cfg, &mut ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ 0x5eed))?;
    let planes = vec![plane; datasets.len()];
    let out = train_joint(&datasets, planes, decoders, denoiser, &init.assets, &ctx.cfg.fit, &ctx.cfg.diffusion)?;
    for ((d, plane), trace) in datasets.iter().zip(&out.planes).zip(&out.fit_traces) {
        save_plane(&ctx.path("planes").join(format!("{}.e3gp", d.id)), plane)?;
        write_trace_csv(&ctx.path("traces").join(format!("{}.csv", d.id)), trace)?;
    }
    save_decoders(&ctx.path(DECODERS_FILE), &out.decoders)?;
    save_denoiser(&ctx.path("denoiser.e3ck"), &out.denoiser)?;
    let mut csv = String::from("step,subject,t,loss\n");
    for r in &out.denoise_trace {
        csv.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.subject, r.t, r.loss));
    }
    std::fs::write(ctx.path("denoise_trace.csv"), csv)?;
    let losses: Vec<f64> = out.denoise_trace.iter().map(|r| r.loss).collect();
    let ma = moving_average(&losses, 10);
    ctx.report(json!({
        "subjects": datasets.len(),
        "iterations": ctx.cfg.fit.iterations,
        "denoise_loss_first": ma.get(9.min(ma.len().saturating_sub(1))),
        "denoise_loss_last": ma.last(),
        "out": ctx.out,
    }));
    Ok(())
}

fn diffusion_sample(ctx: &Ctx, args: SampleArgs) -> Result<()> {
    let denoiser = load_denoiser(&args.denoiser)?;
    let steps = args.steps.unwrap_or(ctx.cfg.diffusion.sampler_steps);
    if steps == 0 || args.count == 0 {
        return Err(usage("--steps and --count must be positive"));
    }
    let shape = PlaneShape {
        resolution: args.resolution.unwrap_or(ctx.cfg.plane.resolution),
        channels: denoiser.config.channels,
    };
    let mut planes = Vec::new();
    for i in 0..args.count {
        let plane = sample_plane(&denoiser, shape, steps, ctx.cfg.seed.wrapping_add(i as u64))?;
        let path = ctx.path("samples").join(format!("sample_{i:03}.e3gp"));
        save_plane(&path, &plane)?;
        planes.push(path);
    }
    ctx.report(json!({ "steps": steps, "resolution": shape.resolution, "planes": planes }));
    Ok(())
}

fn bench(ctx: &Ctx, args: BenchArgs) -> Result<()> {
    let threads = ctx
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let report = run_benchmark(args.gaussians, args.resolution, args.frames, threads, ctx.cfg.seed)?;
    write_json(&ctx.path("bench.json"), &report)?;
    ctx.report(serde_json::to_value(&report)?);
    Ok(())
}
