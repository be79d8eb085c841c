//! Rendering throughput on a procedurally posed toy avatar.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{AssetConfig, AvatarAssets};
use crate::body_model::generate_toy_model;
use crate::gaussian::Gaussian;
use crate::render::{default_background, rasterize, Camera};
use crate::synth::{ground_truth, random_params, ring_cameras, Appearance};
use crate::{Error, Result};

/// Published reference point, kept in reports for context only: GPU
/// rendering at 1024².
pub const REFERENCE_FPS: f64 = 110.0;
pub const REFERENCE_RESOLUTION: usize = 1024;
/// Volume resolution used for benchmark scenes; skinning quality does not
/// affect rendering cost.
const BENCH_VOLUME_RESOLUTION: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub gaussians: usize,
    pub resolution: usize,
    pub frames: usize,
    pub wall_time_s: f64,
    pub fps: f64,
    pub threads: usize,
    pub single_thread_fps: f64,
    pub speedup: f64,
    pub available_cores: usize,
    pub reference_fps: f64,
    pub reference_resolution: usize,
}

/// A posed toy avatar with exactly `n` primitives: the coarsest
/// tessellation with at least `n` anchors, thinned by an even stride.
pub fn bench_scene(n: usize, seed: u64) -> Result<Vec<Gaussian>> {
    if n == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one Gaussian".into()));
    }
    let mut best: Option<(usize, u32, u32)> = None;
    for detail in 1..=4u32 {
        let faces = generate_toy_model(seed, detail).faces.len();
        for sub in 0..=3u32 {
            let count = faces << (2 * sub);
            if count >= n && best.is_none_or(|(c, _, _)| count < c) {
                best = Some((count, detail, sub));
            }
        }
    }
    let (_, detail, sub) = best.ok_or_else(|| Error::InvalidArgument(format!("{n} Gaussians exceed the largest toy tessellation")))?;
    let model = generate_toy_model(seed, detail);
    let assets = AvatarAssets::build(
        &model,
        &AssetConfig {
            subdivision: sub,
            volume_resolution: BENCH_VOLUME_RESOLUTION,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canonical = ground_truth(&assets, &Appearance::random(&mut rng));
    let params = random_params(&model, 0.2, &mut rng);
    let posed = assets.deformer(&params)?.apply(&canonical);
    let total = posed.len();
    Ok((0..n).map(|i| posed.gaussians[i * total / n]).collect())
}

fn time_frames(gaussians: &[Gaussian], cameras: &[Camera], frames: usize, threads: usize) -> Result<f64> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let background = default_background();
    pool.install(|| {
        rasterize(gaussians, &cameras[0], &background)?;
        let start = Instant::now();
        for f in 0..frames {
            rasterize(gaussians, &cameras[f % cameras.len()], &background)?;
        }
        Ok(start.elapsed().as_secs_f64())
    })
}

/// Renders `frames` orbit views with `threads` workers and again with one.
pub fn run_benchmark(n: usize, resolution: usize, frames: usize, threads: usize, seed: u64) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one frame".into()));
    }
    if threads == 0 || resolution == 0 {
        return Err(Error::InvalidArgument("thread count and resolution must be positive".into()));
    }
    let gaussians = bench_scene(n, seed)?;
    let cameras = ring_cameras(frames.min(36), resolution, 0.0, 0.3)?;
    let wall = time_frames(&gaussians, &cameras, frames, threads)?;
    let single = if threads == 1 {
        wall
    } else {
        time_frames(&gaussians, &cameras, frames, 1)?
    };
    let fps = frames as f64 / wall;
    let single_thread_fps = frames as f64 / single;
    Ok(BenchReport {
        gaussians: n,
        resolution,
        frames,
        wall_time_s: wall,
        fps,
        threads,
        single_thread_fps,
        speedup: fps / single_thread_fps,
        available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
        reference_fps: REFERENCE_FPS,
        reference_resolution: REFERENCE_RESOLUTION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frames_is_an_error() {
        assert!(run_benchmark(100, 32, 0, 1, 0).is_err());
        assert!(bench_scene(0, 0).is_err());
    }

    #[test]
    fn scene_is_seed_deterministic_with_exact_count() {
        let a = bench_scene(500, 3).unwrap();
        let b = bench_scene(500, 3).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a, b);
        assert_ne!(bench_scene(500, 4).unwrap(), a);
    }

    #[test]
    fn report_fps_matches_frames_over_time() {
        let r = run_benchmark(300, 32, 3, 2, 0).unwrap();
        assert!((r.fps - r.frames as f64 / r.wall_time_s).abs() < 1e-9 * r.fps);
        assert_eq!(r.reference_fps, 110.0);
        assert_eq!(r.reference_resolution, 1024);
        assert!(r.speedup > 0.0);
    }
}
