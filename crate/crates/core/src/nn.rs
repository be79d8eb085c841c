//! Minimal channel-first convolution stacks with hand-written backward passes.
//!
//! Tensors are flat `Vec<f64>` in `[channel][row][column]` order. Every network
//! keeps all of its parameters in one flat vector so the optimizer and the
//! checkpoint codec can treat it uniformly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// `C = alpha · op(A) · op(B) + beta · C` for row-major operands.
/// `op(A)` is `m × k`, `op(B)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the `m×k`, `k×n` and `m×n`
    // row-major buffers whose lengths are checked in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `k×k` zero-padded neighbourhoods into `[c·k·k][h·w]`.
pub fn im2col(input: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; channels * k * k * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        dst[(x as isize + dx) as usize] += src[x];
                    }
                }
            }
        }
    }
    out
}

/// Shape of one stride-1, zero-padded square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn n_params(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    /// Convolution of `input` (`[in][h][w]`); returns the output and the
    /// unfolded input needed by [`ConvShape::backward`].
    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let hw = h * w;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = im2col(input, self.in_channels, h, w, self.kernel);
        let (weights, bias) = params.split_at(self.weight_len());
        let mut out = vec![0.0; self.out_channels * hw];
        for (o, b) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(*b);
        }
        gemm(self.out_channels, kk, hw, 1.0, weights, false, &cols, false, 1.0, &mut out);
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// input gradient when requested.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        cols: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
        grad_params: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let hw = h * w;
        let kk = self.in_channels * self.kernel * self.kernel;
        let (gw, gb) = grad_params.split_at_mut(self.weight_len());
        gemm(self.out_channels, hw, kk, 1.0, grad_out, false, cols, true, 1.0, gw);
        for (o, g) in gb.iter_mut().enumerate() {
            *g += grad_out[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        if !need_input_grad {
            return None;
        }
        let weights = &params[..self.weight_len()];
        let mut grad_cols = vec![0.0; kk * hw];
        gemm(kk, self.out_channels, hw, 1.0, weights, true, grad_out, false, 0.0, &mut grad_cols);
        Some(col2im(&grad_cols, self.in_channels, h, w, self.kernel))
    }
}

/// Plain stack of convolutions with leaky-ReLU between layers and a linear
/// final layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvShape>,
    pub params: Vec<f64>,
}

/// Intermediate values retained by [`ConvStack::forward_cached`].
#[derive(Clone, Debug)]
pub struct StackCache {
    h: usize,
    w: usize,
    cols: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ConvStack {
    pub fn zeros(layers: Vec<ConvShape>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::ShapeMismatch(format!(
                    "layer produces {} channels but next layer expects {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        if layers.iter().any(|l| l.kernel % 2 == 0) {
            return Err(Error::ShapeMismatch("kernel sizes must be odd".into()));
        }
        let n = layers.iter().map(ConvShape::n_params).sum();
        Ok(Self {
            layers,
            params: vec![0.0; n],
        })
    }

    /// He-normal weights, zero biases; the last layer's weights are further
    /// multiplied by `last_scale` so a fresh network starts near zero output.
    pub fn init<R: Rng>(layers: Vec<ConvShape>, last_scale: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        let n_layers = net.layers.len();
        for i in 0..n_layers {
            let shape = net.layers[i];
            let fan_in = (shape.in_channels * shape.kernel * shape.kernel) as f64;
            let mut std = (2.0 / fan_in).sqrt();
            if i + 1 == n_layers {
                std *= last_scale;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            let range = net.layer_range(i);
            for w in &mut net.params[range][..shape.weight_len()] {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start: usize = self.layers[..layer].iter().map(ConvShape::n_params).sum();
        start..start + self.layers[layer].n_params()
    }

    fn check_input(&self, input: &[f64], h: usize, w: usize) -> Result<()> {
        if input.len() != self.in_channels() * h * w {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels at {h}×{w} ({} values), got {}",
                self.in_channels(),
                self.in_channels() * h * w,
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input, h, w)?.0)
    }

    pub fn forward_cached(&self, input: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, StackCache)> {
        self.check_input(input, h, w)?;
        let mut cache = StackCache {
            h,
            w,
            cols: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for (i, shape) in self.layers.iter().enumerate() {
            let (out, cols) = shape.forward(&self.params[self.layer_range(i)], &x, h, w);
            cache.cols.push(cols);
            if i + 1 < self.layers.len() {
                x = out.iter().map(|&v| leaky_relu(v)).collect();
                cache.pre_activations.push(out);
            } else {
                x = out;
            }
        }
        Ok((x, cache))
    }

    /// Accumulates into `grad_params` (same layout as `params`); returns the
    /// input gradient if `need_input_grad`.
    pub fn backward(
        &self,
        cache: &StackCache,
        grad_out: &[f64],
        grad_params: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (h, w) = (cache.h, cache.w);
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (gv, pre) in g.iter_mut().zip(&cache.pre_activations[i]) {
                    *gv *= leaky_relu_grad(*pre);
                }
            }
            let range = self.layer_range(i);
            let need = i > 0 || need_input_grad;
            let next = self.layers[i].backward(
                &self.params[range.clone()],
                &cache.cols[i],
                &g,
                h,
                w,
                &mut grad_params[range],
                need,
            );
            {
                let v = next?;
                g = v
            }
        }
        Some(g)
    }
}

/// Dense layer `y = W x + b`, `W` stored `[out][in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LinearShape {
    pub fn n_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (wts, bias) = params.split_at(self.inputs * self.outputs);
        (0..self.outputs)
            .map(|o| bias[o] + wts[o * self.inputs..][..self.inputs].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let n_w = self.inputs * self.outputs;
        let mut grad_in = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = grad_out[o];
            grad_params[n_w + o] += g;
            for i in 0..self.inputs {
                grad_params[o * self.inputs + i] += g * x[i];
                grad_in[i] += g * params[o * self.inputs + i];
            }
        }
        grad_in
    }
}

/// 2×2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * ho * wo];
    for c in 0..channels {
        for y in 0..ho {
            for x in 0..wo {
                let base = c * h * w;
                let s = input[base + 2 * y * w + 2 * x]
                    + input[base + 2 * y * w + 2 * x + 1]
                    + input[base + (2 * y + 1) * w + 2 * x]
                    + input[base + (2 * y + 1) * w + 2 * x + 1];
                out[(c * ho + y) * wo + x] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut g = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                g[(c * h + y) * w + x] = 0.25 * grad_out[(c * ho + y / 2) * wo + x / 2];
            }
        }
    }
    g
}

/// Nearest-neighbour 2× upsampling from `h × w`.
pub fn upsample2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; channels * ho * wo];
    for c in 0..channels {
        for y in 0..ho {
            for x in 0..wo {
                out[(c * ho + y) * wo + x] = input[(c * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut g = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..ho {
            for x in 0..wo {
                g[(c * h + y / 2) * w + x / 2] += grad_out[(c * ho + y) * wo + x];
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(shape: &ConvShape, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = shape.kernel as isize;
        let pad = k / 2;
        let mut out = vec![0.0; shape.out_channels * h * w];
        for o in 0..shape.out_channels {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = params[shape.weight_len() + o];
                    for i in 0..shape.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, x + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((o * shape.in_channels + i) * shape.kernel + ky as usize) * shape.kernel
                                    + kx as usize;
                                acc += params[wi] * input[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y as usize) * w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (shape, h, w) in [(ConvShape::new(3, 5, 3), 6, 9), (ConvShape::new(2, 1, 1), 4, 4), (ConvShape::new(1, 2, 5), 7, 3)] {
            let params = random_vec(shape.n_params(), &mut rng);
            let input = random_vec(shape.in_channels * h * w, &mut rng);
            let (fast, _) = shape.forward(&params, &input, h, w);
            let slow = naive_conv(&shape, &params, &input, h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ConvStack::init(
            vec![ConvShape::new(2, 4, 3), ConvShape::new(4, 4, 3), ConvShape::new(4, 3, 3)],
            1.0,
            &mut rng,
        )
        .unwrap();
        let (h, w) = (5, 4);
        let input = random_vec(2 * h * w, &mut rng);
        let dir = random_vec(3 * h * w, &mut rng);
        let loss = |net: &ConvStack, x: &[f64]| -> f64 {
            net.forward(x, h, w).unwrap().iter().zip(&dir).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_cached(&input, h, w).unwrap();
        let mut gp = vec![0.0; net.params.len()];
        let gi = net.backward(&cache, &dir, &mut gp, true).unwrap();
        let eps = 1e-6;
        for i in (0..net.params.len()).step_by(7) {
            let mut p = net.clone();
            p.params[i] += eps;
            let mut m = net.clone();
            m.params[i] -= eps;
            let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * eps);
            assert!((fd - gp[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..input.len() {
            let mut xp = input.clone();
            xp[i] += eps;
            let mut xm = input.clone();
            xm[i] -= eps;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * eps);
            assert!((fd - gi[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, h, w) = (2, 4, 6);
        let x = random_vec(c * h * w, &mut rng);
        let y = random_vec(c * h * w / 4, &mut rng);
        let lhs: f64 = avg_pool2(&x, c, h, w).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_backward(&y, c, h, w).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample2(&y, c, h / 2, w / 2).iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2_backward(&x, c, h / 2, w / 2).iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = LinearShape { inputs: 4, outputs: 3 };
        let params = random_vec(shape.n_params(), &mut rng);
        let x = random_vec(4, &mut rng);
        let g = random_vec(3, &mut rng);
        let mut gp = vec![0.0; params.len()];
        let gi = shape.backward(&params, &x, &g, &mut gp);
        let f = |p: &[f64], x: &[f64]| -> f64 { shape.forward(p, x).iter().zip(&g).map(|(a, b)| a * b).sum() };
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += 1e-6;
            let mut m = params.clone();
            m[i] -= 1e-6;
            assert!(((f(&p, &x) - f(&m, &x)) / 2e-6 - gp[i]).abs() < 1e-8);
        }
        for i in 0..4 {
            let mut p = x.clone();
            p[i] += 1e-6;
            let mut m = x.clone();
            m[i] -= 1e-6;
            assert!(((f(&params, &p) - f(&params, &m)) / 2e-6 - gi[i]).abs() < 1e-8);
        }
    }

}
