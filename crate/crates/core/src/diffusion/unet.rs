//! Small encoder-decoder denoiser with skip connections. Three resolution
//! levels, per-block feature-wise scale and shift predicted from a sinusoidal
//! timestep embedding.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{schedule, PlaneShape, VelocityModel};
use crate::nn::{avg_pool2, avg_pool2_backward, leaky_relu, leaky_relu_grad, upsample2, upsample2_backward, ConvShape, LinearShape};
use crate::{Error, Result};

const N_CONVS: usize = 8;
const N_BLOCKS: usize = 6;
/// One scale-shift head per block plus one on the output.
const N_FILMS: usize = N_BLOCKS + 1;
/// Timesteps are scaled by this before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Plane channels in and out.
    pub channels: usize,
    /// Feature widths of the three levels.
    pub widths: [usize; 3],
    pub embedding_dim: usize,
    pub kernel: usize,
    /// Multiplier on the output layer's initial weights.
    pub output_scale: f64,
    /// Expected per-element standard deviation of clean planes. Inputs are
    /// scaled by `1/√(α² s² + σ²)` so the network sees unit variance at every `t`.
    pub data_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            widths: [32, 64, 128],
            embedding_dim: 32,
            kernel: 3,
            output_scale: 0.1,
            data_std: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("denoiser channel counts must be positive".into()));
        }
        if self.embedding_dim == 0 || !self.embedding_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("denoiser embedding size must be even and positive".into()));
        }
        if !(self.data_std.is_finite() && self.data_std > 0.0) {
            return Err(Error::InvalidArgument("denoiser data scale must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument("denoiser kernel must be odd".into()));
        }
        Ok(())
    }

    /// Convolutions in order: input, level-0 block, level-1 block, two
    /// bottleneck blocks, level-1 and level-0 decoder blocks, output.
    fn convs(&self) -> [ConvShape; N_CONVS] {
        let [w0, w1, w2] = self.widths;
        let (c, k) = (self.channels, self.kernel);
        [
            ConvShape::new(c, w0, k),
            ConvShape::new(w0, w0, k),
            ConvShape::new(w0, w1, k),
            ConvShape::new(w1, w2, k),
            ConvShape::new(w2, w2, k),
            ConvShape::new(w2 + w1, w1, k),
            ConvShape::new(w1 + w0, w0, k),
            ConvShape::new(w0, c, k),
        ]
    }

    /// Scale-shift heads of convolutions 1..=7.
    fn films(&self) -> [LinearShape; N_FILMS] {
        let convs = self.convs();
        std::array::from_fn(|i| LinearShape {
            inputs: self.embedding_dim,
            outputs: 2 * convs[i + 1].out_channels,
        })
    }

    pub fn n_params(&self) -> usize {
        self.convs().iter().map(ConvShape::n_params).sum::<usize>() + self.films().iter().map(LinearShape::n_params).sum::<usize>()
    }
}

/// Sinusoidal embedding of `t`: `[sin(ω_i τ), cos(ω_i τ)]` with
/// `τ = 1000 t` and geometric frequencies from 1 down to 1/10000.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tau = TIME_SCALE * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (freq * tau).sin();
        out[half + i] = (freq * tau).cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
}

struct Ranges {
    convs: [std::ops::Range<usize>; N_CONVS],
    films: [std::ops::Range<usize>; N_FILMS],
}

fn ranges(cfg: &DenoiserConfig) -> Ranges {
    let mut at = 0;
    let mut take = |n: usize| {
        let r = at..at + n;
        at += n;
        r
    };
    let convs = cfg.convs().map(|c| take(c.n_params()));
    let films = cfg.films().map(|f| take(f.n_params()));
    Ranges { convs, films }
}

struct Block {
    cols: Vec<f64>,
    pre: Vec<f64>,
    film: Vec<f64>,
    out: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
pub struct DenoiserCache {
    res: usize,
    input_scale: f64,
    embedding: Vec<f64>,
    input_cols: Vec<f64>,
    output_cols: Vec<f64>,
    output_pre: Vec<f64>,
    output_film: Vec<f64>,
    blocks: Vec<Block>,
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

impl Denoiser {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: vec![0.0; config.n_params()],
            config,
        })
    }

    /// He-normal convolutions, the output layer further scaled by
    /// `output_scale`; scale-shift heads start at zero.
    pub fn init<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let r = ranges(&config);
        for (i, shape) in config.convs().iter().enumerate() {
            let fan_in = (shape.in_channels * shape.kernel * shape.kernel) as f64;
            let mut std = (2.0 / fan_in).sqrt();
            if i + 1 == N_CONVS {
                std *= config.output_scale;
            }
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for w in &mut net.params[r.convs[i].clone()][..shape.weight_len()] {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.params.len() != self.config.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "denoiser has {} parameters, its configuration needs {}",
                self.params.len(),
                self.config.n_params()
            )));
        }
        Ok(())
    }

    fn check_shape(&self, x: &[f64], shape: PlaneShape) -> Result<()> {
        if shape.channels != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects {} channels, plane has {}",
                self.config.channels, shape.channels
            )));
        }
        if !shape.resolution.is_multiple_of(4) || shape.resolution == 0 {
            return Err(Error::ShapeMismatch(format!(
                "denoiser needs a resolution divisible by 4, got {}",
                shape.resolution
            )));
        }
        if x.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!("{} values for a {shape:?} plane", x.len())));
        }
        Ok(())
    }

    fn block(&self, i: usize, r: &Ranges, input: &[f64], res: usize, emb: &[f64]) -> Block {
        let conv = self.config.convs()[i + 1];
        let (pre, cols) = conv.forward(&self.params[r.convs[i + 1].clone()], input, res, res);
        let film = self.config.films()[i].forward(&self.params[r.films[i].clone()], emb);
        let hw = res * res;
        let c = conv.out_channels;
        let mut out = vec![0.0; pre.len()];
        for ch in 0..c {
            let (s, b) = (film[ch], film[c + ch]);
            for p in 0..hw {
                out[ch * hw + p] = leaky_relu(pre[ch * hw + p] * (1.0 + s) + b);
            }
        }
        Block { cols, pre, film, out }
    }

    /// Returns the gradient with respect to the block input.
    fn block_backward(&self, i: usize, r: &Ranges, blk: &Block, grad_out: &[f64], res: usize, emb: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let conv = self.config.convs()[i + 1];
        let hw = res * res;
        let c = conv.out_channels;
        let mut g_pre = vec![0.0; blk.pre.len()];
        let mut g_film = vec![0.0; 2 * c];
        for ch in 0..c {
            let (s, b) = (blk.film[ch], blk.film[c + ch]);
            let (mut gs, mut gb) = (0.0, 0.0);
            for p in 0..hw {
                let z = blk.pre[ch * hw + p];
                let gy = grad_out[ch * hw + p] * leaky_relu_grad(z * (1.0 + s) + b);
                gs += gy * z;
                gb += gy;
                g_pre[ch * hw + p] = gy * (1.0 + s);
            }
            g_film[ch] = gs;
            g_film[c + ch] = gb;
        }
        self.config.films()[i].backward(&self.params[r.films[i].clone()], emb, &g_film, &mut grad[r.films[i].clone()]);
        conv.backward(&self.params[r.convs[i + 1].clone()], &blk.cols, &g_pre, res, res, &mut grad[r.convs[i + 1].clone()], true)
            .expect("input gradient requested")
    }
}

impl VelocityModel for Denoiser {
    type Cache = DenoiserCache;

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, x_t: &[f64], shape: PlaneShape, t: f64) -> Result<(Vec<f64>, DenoiserCache)> {
        self.check_shape(x_t, shape)?;
        let cfg = &self.config;
        let convs = cfg.convs();
        let r = ranges(cfg);
        let [w0, w1, w2] = cfg.widths;
        let (r0, r1, r2) = (shape.resolution, shape.resolution / 2, shape.resolution / 4);
        let emb = timestep_embedding(t, cfg.embedding_dim);
        let (a, s) = schedule(t)?;
        let input_scale = 1.0 / (a * a * cfg.data_std * cfg.data_std + s * s).sqrt();
        let x_in: Vec<f64> = x_t.iter().map(|x| x * input_scale).collect();

        let (h_in, input_cols) = convs[0].forward(&self.params[r.convs[0].clone()], &x_in, r0, r0);
        let b0 = self.block(0, &r, &h_in, r0, &emb);
        let p0 = avg_pool2(&b0.out, w0, r0, r0);
        let b1 = self.block(1, &r, &p0, r1, &emb);
        let p1 = avg_pool2(&b1.out, w1, r1, r1);
        let b2 = self.block(2, &r, &p1, r2, &emb);
        let b3 = self.block(3, &r, &b2.out, r2, &emb);
        let c1 = concat(&upsample2(&b3.out, w2, r2, r2), &b1.out);
        let b4 = self.block(4, &r, &c1, r1, &emb);
        let c0 = concat(&upsample2(&b4.out, w1, r1, r1), &b0.out);
        let b5 = self.block(5, &r, &c0, r0, &emb);
        // Long linear skip from the input features.
        let top: Vec<f64> = b5.out.iter().zip(&h_in).map(|(a, b)| a + b).collect();
        let (output_pre, output_cols) = convs[7].forward(&self.params[r.convs[7].clone()], &top, r0, r0);
        let output_film = cfg.films()[N_BLOCKS].forward(&self.params[r.films[N_BLOCKS].clone()], &emb);
        let hw = r0 * r0;
        let c = cfg.channels;
        let mut v = vec![0.0; output_pre.len()];
        for ch in 0..c {
            let (sc, sh) = (output_film[ch], output_film[c + ch]);
            for p in 0..hw {
                v[ch * hw + p] = output_pre[ch * hw + p] * (1.0 + sc) + sh;
            }
        }
        Ok((
            v,
            DenoiserCache {
                res: r0,
                input_scale,
                embedding: emb,
                input_cols,
                output_cols,
                output_pre,
                output_film,
                blocks: vec![b0, b1, b2, b3, b4, b5],
            },
        ))
    }

    fn backward(&self, cache: &DenoiserCache, grad_v: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let cfg = &self.config;
        let convs = cfg.convs();
        let r = ranges(cfg);
        let [w0, w1, w2] = cfg.widths;
        let (r0, r1, r2) = (cache.res, cache.res / 2, cache.res / 4);
        let emb = &cache.embedding;
        let b = &cache.blocks;

        let hw = r0 * r0;
        let c = cfg.channels;
        let mut g_pre = vec![0.0; grad_v.len()];
        let mut g_film = vec![0.0; 2 * c];
        for ch in 0..c {
            let sc = cache.output_film[ch];
            for p in 0..hw {
                let g = grad_v[ch * hw + p];
                g_film[ch] += g * cache.output_pre[ch * hw + p];
                g_film[c + ch] += g;
                g_pre[ch * hw + p] = g * (1.0 + sc);
            }
        }
        cfg.films()[N_BLOCKS].backward(&self.params[r.films[N_BLOCKS].clone()], emb, &g_film, &mut grad_params[r.films[N_BLOCKS].clone()]);
        let g_top = convs[7]
            .backward(&self.params[r.convs[7].clone()], &cache.output_cols, &g_pre, r0, r0, &mut grad_params[r.convs[7].clone()], true)
            .expect("input gradient requested");
        let g_b5 = &g_top;
        let g_c0 = self.block_backward(5, &r, &b[5], g_b5, r0, emb, grad_params);
        let (g_u0, g_skip0) = g_c0.split_at(w1 * r0 * r0);
        let g_b4 = upsample2_backward(g_u0, w1, r1, r1);
        let g_c1 = self.block_backward(4, &r, &b[4], &g_b4, r1, emb, grad_params);
        let (g_u1, g_skip1) = g_c1.split_at(w2 * r1 * r1);
        let g_b3 = upsample2_backward(g_u1, w2, r2, r2);
        let g_b2 = self.block_backward(3, &r, &b[3], &g_b3, r2, emb, grad_params);
        let g_p1 = self.block_backward(2, &r, &b[2], &g_b2, r2, emb, grad_params);
        let mut g_b1 = avg_pool2_backward(&g_p1, w1, r1, r1);
        g_b1.iter_mut().zip(g_skip1).for_each(|(a, b)| *a += b);
        let g_p0 = self.block_backward(1, &r, &b[1], &g_b1, r1, emb, grad_params);
        let mut g_b0 = avg_pool2_backward(&g_p0, w0, r0, r0);
        g_b0.iter_mut().zip(g_skip0).for_each(|(a, b)| *a += b);
        let mut g_in = self.block_backward(0, &r, &b[0], &g_b0, r0, emb, grad_params);
        g_in.iter_mut().zip(&g_top).for_each(|(a, b)| *a += b);
        let mut g_x = convs[0]
            .backward(&self.params[r.convs[0].clone()], &cache.input_cols, &g_in, r0, r0, &mut grad_params[r.convs[0].clone()], true)
            .expect("input gradient requested");
        g_x.iter_mut().for_each(|g| *g *= cache.input_scale);
        g_x
    }
}
