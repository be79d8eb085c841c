use rayon::prelude::*;

use super::project::{encode_normal, project, project_backward, view_normal, Splat2D, SplatGrad, ALPHA_MIN};
use super::{Camera, Image};
use crate::gaussian::{Gaussian, PrimitiveGrads};
use crate::{Error, Result, Vec3};

pub const TILE_SIZE: usize = 16;
/// Compositing stops once transmittance falls below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

pub fn default_background() -> Vec3 {
    Vec3::repeat(1.0)
}

/// Encoded normal behind all primitives (the zero vector).
fn normal_background() -> Vec3 {
    Vec3::repeat(0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: Vec3,
    pub normals: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: default_background(),
            normals: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Colour composited over the background.
    pub color: Image,
    /// Accumulated opacity, `1 - final transmittance`, per pixel.
    pub alpha: Vec<f64>,
    pub normals: Option<Image>,
    /// Number of primitives blended into each pixel.
    pub contributors: Vec<u32>,
}

/// Everything the backward pass needs from a forward render.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub width: usize,
    pub height: usize,
    pub n_primitives: usize,
    pub background: Vec3,
    pub splats: Vec<Splat2D>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile, indices into `splats` ordered front to back.
    pub tiles: Vec<Vec<u32>>,
    /// Per tile, compact copies of the listed splats in the same order.
    packed: Vec<Vec<TileSplat>>,
}

/// What the compositing walk reads per splat, stored contiguously per tile.
#[derive(Clone, Copy, Debug)]
struct TileSplat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    /// Powers below this give `alpha < ALPHA_MIN` (with margin), so `exp` is skipped.
    log_cutoff: f64,
    /// Inclusive pixel box outside which the splat is below the cutoff.
    bounds: [u32; 4],
    splat: u32,
    /// Position in the tile list.
    slot: u32,
}

impl TileSplat {
    fn new(s: &Splat2D, id: u32, slot: usize, bounds: (usize, usize, usize, usize)) -> Self {
        Self {
            mean: s.mean,
            conic: s.conic,
            opacity: s.opacity,
            log_cutoff: (ALPHA_MIN / s.opacity).ln() - 1e-6,
            bounds: [bounds.0 as u32, bounds.1 as u32, bounds.2 as u32, bounds.3 as u32],
            splat: id,
            slot: slot as u32,
        }
    }
}

impl ForwardState {
    fn tile_pixels(&self, t: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(self.width), y0, (y0 + TILE_SIZE).min(self.height))
    }
}

/// Projects and bins every primitive. Tile lists are sorted by depth with the
/// primitive index breaking ties.
pub fn prepare(gaussians: &[Gaussian], cam: &Camera, background: &Vec3) -> Result<ForwardState> {
    cam.validate()?;
    if let Some(k) = gaussians.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteAttribute(k));
    }
    let splats: Vec<Splat2D> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(k, g)| project(g, k, cam))
        .collect();
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (s, splat) in splats.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = splat.pixel_bounds(cam.width, cam.height) {
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    tiles[ty * tiles_x + tx].push(s as u32);
                }
            }
        }
    }
    tiles.par_iter_mut().for_each(|list| {
        list.sort_by(|&a, &b| {
            let (a, b) = (&splats[a as usize], &splats[b as usize]);
            a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index))
        })
    });
    let packed = tiles
        .par_iter()
        .map(|list| {
            list.iter()
                .enumerate()
                .map(|(slot, &s)| {
                    let splat = &splats[s as usize];
                    let bounds = splat.pixel_bounds(cam.width, cam.height).expect("binned splats have bounds");
                    TileSplat::new(splat, s, slot, bounds)
                })
                .collect()
        })
        .collect();
    Ok(ForwardState {
        width: cam.width,
        height: cam.height,
        n_primitives: gaussians.len(),
        background: *background,
        splats,
        tiles_x,
        tiles_y,
        tiles,
        packed,
    })
}

/// One blended primitive at one pixel.
#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: usize,
    /// Position in the tile list.
    slot: usize,
    alpha: f64,
    /// Transmittance in front of this primitive.
    transmittance: f64,
    falloff: f64,
    dx: f64,
    dy: f64,
}

/// The entries of a tile list whose pixel box spans row `y`, in order.
fn row_subset(list: &[TileSplat], y: usize, out: &mut Vec<TileSplat>) {
    let y = y as u32;
    out.clear();
    out.extend(list.iter().filter(|ts| ts.bounds[2] <= y && y <= ts.bounds[3]));
}

/// Front-to-back compositing walk shared by forward and backward passes, so
/// both make identical skip and stop decisions. Returns final transmittance.
#[inline]
fn composite(list: &[TileSplat], x: usize, y: usize, mut visit: impl FnMut(Contribution)) -> f64 {
    let mut t = 1.0;
    let (xu, yu) = (x as u32, y as u32);
    for ts in list {
        let [bx0, bx1, by0, by1] = ts.bounds;
        if xu < bx0 || xu > bx1 || yu < by0 || yu > by1 {
            continue;
        }
        let dx = x as f64 + 0.5 - ts.mean[0];
        let dy = y as f64 + 0.5 - ts.mean[1];
        let [a, b, c] = ts.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        if power > 0.0 || power < ts.log_cutoff {
            continue;
        }
        let falloff = power.exp();
        let alpha = ts.opacity * falloff;
        if alpha < ALPHA_MIN {
            continue;
        }
        visit(Contribution {
            splat: ts.splat as usize,
            slot: ts.slot as usize,
            alpha,
            transmittance: t,
            falloff,
            dx,
            dy,
        });
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    t
}

struct TileOutput {
    color: Vec<f64>,
    alpha: Vec<f64>,
    normals: Vec<f64>,
    contributors: Vec<u32>,
}

/// Composites all tiles. `normals` holds one encoded normal per splat.
pub fn render_state(state: &ForwardState, normals: Option<&[Vec3]>) -> RenderOutput {
    let tiles: Vec<TileOutput> = (0..state.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = state.tile_pixels(t);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileOutput {
                color: Vec::with_capacity(3 * n),
                alpha: Vec::with_capacity(n),
                normals: Vec::with_capacity(if normals.is_some() { 3 * n } else { 0 }),
                contributors: Vec::with_capacity(n),
            };
            let mut row = Vec::with_capacity(state.packed[t].len());
            for y in y0..y1 {
                row_subset(&state.packed[t], y, &mut row);
                let list = &row;
                for x in x0..x1 {
                    let mut c = Vec3::zeros();
                    let mut nrm = Vec3::zeros();
                    let mut count = 0u32;
                    let t_final = composite(list, x, y, |k| {
                        let w = k.alpha * k.transmittance;
                        c += w * state.splats[k.splat].color;
                        if let Some(ns) = normals {
                            nrm += w * ns[k.splat];
                        }
                        count += 1;
                    });
                    c += t_final * state.background;
                    out.color.extend_from_slice(c.as_slice());
                    out.alpha.push(1.0 - t_final);
                    if normals.is_some() {
                        nrm += t_final * normal_background();
                        out.normals.extend_from_slice(nrm.as_slice());
                    }
                    out.contributors.push(count);
                }
            }
            out
        })
        .collect();

    let (w, h) = (state.width, state.height);
    let mut color = Image::zeros(w, h);
    let mut alpha = vec![0.0; w * h];
    let mut normal_map = normals.map(|_| Image::zeros(w, h));
    let mut contributors = vec![0; w * h];
    for (t, tile) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = state.tile_pixels(t);
        let tw = x1 - x0;
        for y in y0..y1 {
            let src = (y - y0) * tw;
            let dst = y * w + x0;
            color.data[3 * dst..3 * (dst + tw)].copy_from_slice(&tile.color[3 * src..3 * (src + tw)]);
            alpha[dst..dst + tw].copy_from_slice(&tile.alpha[src..src + tw]);
            contributors[dst..dst + tw].copy_from_slice(&tile.contributors[src..src + tw]);
            if let Some(nm) = normal_map.as_mut() {
                nm.data[3 * dst..3 * (dst + tw)].copy_from_slice(&tile.normals[3 * src..3 * (src + tw)]);
            }
        }
    }
    RenderOutput {
        color,
        alpha,
        normals: normal_map,
        contributors,
    }
}

fn splat_normals(gaussians: &[Gaussian], cam: &Camera, state: &ForwardState) -> Vec<Vec3> {
    state.splats.iter().map(|s| encode_normal(&view_normal(&gaussians[s.index], cam))).collect()
}

/// Renders and keeps the state needed by `rasterize_backward`.
pub fn rasterize_with_state(
    gaussians: &[Gaussian],
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<(RenderOutput, ForwardState)> {
    let state = prepare(gaussians, cam, &opts.background)?;
    let normals = opts.normals.then(|| splat_normals(gaussians, cam, &state));
    let out = render_state(&state, normals.as_deref());
    Ok((out, state))
}

pub fn rasterize(gaussians: &[Gaussian], cam: &Camera, background: &Vec3) -> Result<RenderOutput> {
    let opts = RenderOptions {
        background: *background,
        normals: false,
    };
    Ok(rasterize_with_state(gaussians, cam, &opts)?.0)
}

/// Normal map: shortest-axis normals facing the camera, composited with the
/// colour weights and encoded to `[0,1]³`.
pub fn render_normals(gaussians: &[Gaussian], cam: &Camera) -> Result<Image> {
    let opts = RenderOptions {
        background: default_background(),
        normals: true,
    };
    let (out, _) = rasterize_with_state(gaussians, cam, &opts)?;
    Ok(out.normals.expect("normals were requested"))
}

/// Reverse-mode gradients of the rendered colour (and optionally the alpha
/// map) with respect to every primitive's position, opacity, scale, rotation
/// and colour. Per-tile partial sums are merged in tile order.
pub fn rasterize_backward(
    gaussians: &[Gaussian],
    cam: &Camera,
    state: &ForwardState,
    grad_color: &Image,
    grad_alpha: Option<&[f64]>,
) -> Result<PrimitiveGrads> {
    if state.n_primitives != gaussians.len() || state.width != cam.width || state.height != cam.height {
        return Err(Error::MissingForwardState(format!(
            "state is for {} primitives at {}×{}, scene has {} at {}×{}",
            state.n_primitives,
            state.width,
            state.height,
            gaussians.len(),
            cam.width,
            cam.height
        )));
    }
    if grad_color.width != state.width || grad_color.height != state.height {
        return Err(Error::ShapeMismatch(format!(
            "colour gradient is {}×{}, image is {}×{}",
            grad_color.width, grad_color.height, state.width, state.height
        )));
    }
    if grad_alpha.is_some_and(|g| g.len() != state.width * state.height) {
        return Err(Error::ShapeMismatch("alpha gradient has the wrong length".into()));
    }

    let partials: Vec<Vec<SplatGrad>> = (0..state.tiles.len())
        .into_par_iter()
        .map(|t| backward_tile(state, t, grad_color, grad_alpha))
        .collect();
    let mut splat_grads = vec![SplatGrad::default(); state.splats.len()];
    for (t, partial) in partials.iter().enumerate() {
        for (slot, g) in partial.iter().enumerate() {
            splat_grads[state.tiles[t][slot] as usize].add(g);
        }
    }

    let projected: Vec<_> = state
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(s, g)| project_backward(&gaussians[s.index], cam, s, g))
        .collect();
    let mut grads = PrimitiveGrads::zeros(gaussians.len());
    for ((s, g), p) in state.splats.iter().zip(&splat_grads).zip(&projected) {
        grads.position[s.index] = p.position;
        grads.scale[s.index] = p.scale;
        grads.rotation[s.index] = p.rotation;
        grads.opacity[s.index] = g.opacity;
        grads.color[s.index] = Vec3::from(g.color);
    }
    Ok(grads)
}

fn backward_tile(state: &ForwardState, t: usize, grad_color: &Image, grad_alpha: Option<&[f64]>) -> Vec<SplatGrad> {
    let list = &state.tiles[t];
    let mut out = vec![SplatGrad::default(); list.len()];
    if list.is_empty() {
        return out;
    }
    let (x0, x1, y0, y1) = state.tile_pixels(t);
    let mut seen: Vec<Contribution> = Vec::with_capacity(list.len());
    let mut row = Vec::with_capacity(list.len());
    for y in y0..y1 {
        row_subset(&state.packed[t], y, &mut row);
        for x in x0..x1 {
            let p = y * state.width + x;
            let gc = grad_color.pixel(x, y);
            let ga = grad_alpha.map_or(0.0, |g| g[p]);
            if gc == Vec3::zeros() && ga == 0.0 {
                continue;
            }
            seen.clear();
            composite(&row, x, y, |k| seen.push(k));
            // Colour and alpha of everything behind the current primitive,
            // relative to the transmittance just behind it.
            let mut behind = state.background;
            let mut behind_alpha = 0.0;
            for k in seen.iter().rev() {
                let splat = &state.splats[k.splat];
                let g = &mut out[k.slot];
                let w = k.alpha * k.transmittance;
                for i in 0..3 {
                    g.color[i] += gc[i] * w;
                }
                let d_alpha = k.transmittance * (gc.dot(&(splat.color - behind)) + ga * (1.0 - behind_alpha));
                behind = k.alpha * splat.color + (1.0 - k.alpha) * behind;
                behind_alpha = k.alpha + (1.0 - k.alpha) * behind_alpha;

                g.opacity += d_alpha * k.falloff;
                let d_power = d_alpha * k.alpha;
                let [a, b, c] = splat.conic;
                // power = -½(a dx² + 2b dx dy + c dy²), dx = px - mean.
                g.mean[0] += d_power * (a * k.dx + b * k.dy);
                g.mean[1] += d_power * (b * k.dx + c * k.dy);
                g.conic[0] -= 0.5 * d_power * k.dx * k.dx;
                g.conic[1] -= d_power * k.dx * k.dy;
                g.conic[2] -= 0.5 * d_power * k.dy * k.dy;
            }
        }
    }
    out
}
