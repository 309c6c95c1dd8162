use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sgemm, Act, Param};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv3x3),
    BatchNorm(BatchNorm),
    Relu { mask: Vec<bool> },
    MaxPool(MaxPool2x2),
    Flatten { shape: (usize, usize, usize) },
    Linear(Linear),
    Dropout(Dropout),
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu { mask: Vec::new() }
    }

    pub fn flatten() -> Self {
        Layer::Flatten { shape: (0, 0, 0) }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that still belongs in a checkpoint.
    pub fn buffers(&self) -> Vec<&Vec<f32>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn forward_train(&mut self, x: Act) -> Act {
        match self {
            Layer::Conv(l) => l.forward(x, true),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::Relu { mask } => {
                let mut x = x;
                mask.clear();
                mask.extend(x.data.iter().map(|&v| v > 0.0));
                relu_in_place(&mut x.data);
                x
            }
            Layer::MaxPool(l) => l.forward(x, true),
            Layer::Flatten { shape } => {
                *shape = (x.h, x.w, x.c);
                x.flatten()
            }
            Layer::Linear(l) => l.forward(x, true),
            Layer::Dropout(l) => l.forward_train(x),
        }
    }

    pub fn forward_eval(&self, x: Act) -> Act {
        match self {
            Layer::Conv(l) => l.forward_eval(x),
            Layer::BatchNorm(l) => l.forward_eval(x),
            Layer::Relu { .. } => {
                let mut x = x;
                relu_in_place(&mut x.data);
                x
            }
            Layer::MaxPool(l) => l.forward_eval(x),
            Layer::Flatten { .. } => x.flatten(),
            Layer::Linear(l) => l.forward_eval(x),
            Layer::Dropout(_) => x,
        }
    }

    /// Accumulates parameter gradients and returns the input gradient when asked.
    pub fn backward(&mut self, dy: Act, need_dx: bool) -> Option<Act> {
        match self {
            Layer::Conv(l) => l.backward(dy, need_dx),
            Layer::BatchNorm(l) => Some(l.backward(dy)),
            Layer::Relu { mask } => {
                let mut dy = dy;
                for (g, &m) in dy.data.iter_mut().zip(mask.iter()) {
                    if !m {
                        *g = 0.0;
                    }
                }
                Some(dy)
            }
            Layer::MaxPool(l) => Some(l.backward(dy)),
            Layer::Flatten { shape } => {
                let (h, w, c) = *shape;
                Some(Act::new(dy.n, h, w, c, dy.data))
            }
            Layer::Linear(l) => l.backward(dy, need_dx),
            Layer::Dropout(l) => Some(l.backward(dy)),
        }
    }

    /// Drops per-batch caches so an idle model holds only its weights.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => {
                l.input = Vec::new();
                l.scratch = Vec::new();
            }
            Layer::BatchNorm(l) => l.xhat = Vec::new(),
            Layer::Relu { mask } => *mask = Vec::new(),
            Layer::MaxPool(l) => l.argmax = Vec::new(),
            Layer::Linear(l) => l.input = Vec::new(),
            Layer::Dropout(l) => l.mask = Vec::new(),
            Layer::Flatten { .. } => {}
        }
    }
}

fn relu_in_place(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Target size of one im2col block, in floats. Blocks are processed a few
/// images at a time so the lowered matrix stays cache resident.
const IM2COL_BLOCK: usize = 1 << 17;

/// 3x3 convolution, stride 1, zero padding 1. Weight layout `[ky, kx, cin] x cout`.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Param,
    pub bias: Param,
    input: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
    scratch: Vec<f32>,
}

/// Lowers images `[b0, b1)` of an NHWC block into rows of 3x3 patches.
fn im2col(data: &[f32], (h, w, c): (usize, usize, usize), b0: usize, b1: usize, cols: &mut Vec<f32>) {
    let width = 9 * c;
    cols.clear();
    cols.resize((b1 - b0) * h * w * width, 0.0);
    let mut row = 0;
    for b in b0..b1 {
        for y in 0..h {
            for xx in 0..w {
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let line = (b * h + iy - 1) * w;
                    let dst = row + ky * 3 * c;
                    if xx >= 1 && xx + 1 < w {
                        // All three taps are inside the row and contiguous in memory.
                        let src = (line + xx - 1) * c;
                        cols[dst..dst + 3 * c].copy_from_slice(&data[src..src + 3 * c]);
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        let src = (line + ix - 1) * c;
                        cols[dst + kx * c..dst + (kx + 1) * c].copy_from_slice(&data[src..src + c]);
                    }
                }
                row += width;
            }
        }
    }
}

/// Scatter-adds patch gradients back onto an NHWC block (`dx` covers the same images).
fn col2im(dcols: &[f32], (h, w, c): (usize, usize, usize), dx: &mut [f32]) {
    let width = 9 * c;
    let n = dx.len() / (h * w * c);
    let mut row = 0;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let line = (b * h + iy - 1) * w;
                    let src = row + ky * 3 * c;
                    let (lo, hi) = (usize::from(xx == 0), if xx + 1 < w { 3 } else { 2 });
                    let d0 = (line + xx + lo - 1) * c;
                    let span = (hi - lo) * c;
                    for (d, s) in dx[d0..d0 + span]
                        .iter_mut()
                        .zip(&dcols[src + lo * c..src + lo * c + span])
                    {
                        *d += s;
                    }
                }
                row += width;
            }
        }
    }
}

impl Conv3x3 {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = 9 * in_channels;
        Self {
            in_channels,
            out_channels,
            weight: Param::fan_in_uniform(fan_in * out_channels, fan_in, rng),
            bias: Param::zeros(out_channels, false),
            input: Vec::new(),
            in_shape: (0, 0, 0, 0),
            scratch: Vec::new(),
        }
    }

    fn images_per_block(&self, h: usize, w: usize) -> usize {
        (IM2COL_BLOCK / (h * w * 9 * self.in_channels)).max(1)
    }

    fn apply(&self, x: &Act, cols: &mut Vec<f32>) -> Act {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let (n, h, w) = (x.n, x.h, x.w);
        let (k, cout) = (9 * self.in_channels, self.out_channels);
        let mut out = Vec::with_capacity(n * h * w * cout);
        for _ in 0..n * h * w {
            out.extend_from_slice(&self.bias.value);
        }
        let step = self.images_per_block(h, w);
        for b0 in (0..n).step_by(step) {
            let b1 = (b0 + step).min(n);
            im2col(&x.data, (h, w, x.c), b0, b1, cols);
            let rows = (b1 - b0) * h * w;
            let dst = &mut out[b0 * h * w * cout..b1 * h * w * cout];
            sgemm(rows, k, cout, cols, k, 1, &self.weight.value, cout, 1, 1.0, dst);
        }
        Act::new(n, h, w, cout, out)
    }

    fn forward(&mut self, x: Act, keep: bool) -> Act {
        let mut cols = std::mem::take(&mut self.scratch);
        let out = self.apply(&x, &mut cols);
        self.scratch = cols;
        if keep {
            self.in_shape = (x.n, x.h, x.w, x.c);
            self.input = x.data;
        }
        out
    }

    fn forward_eval(&self, x: Act) -> Act {
        self.apply(&x, &mut Vec::new())
    }

    fn backward(&mut self, dy: Act, need_dx: bool) -> Option<Act> {
        let (n, h, w, c) = self.in_shape;
        let (k, cout) = (9 * c, self.out_channels);
        self.weight.ensure_grad();
        self.bias.ensure_grad();
        for row in dy.data.chunks_exact(cout) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = if need_dx { vec![0.0f32; n * h * w * c] } else { Vec::new() };
        let mut cols = std::mem::take(&mut self.scratch);
        let step = self.images_per_block(h, w);
        for b0 in (0..n).step_by(step) {
            let b1 = (b0 + step).min(n);
            let rows = (b1 - b0) * h * w;
            let dyb = &dy.data[b0 * h * w * cout..b1 * h * w * cout];
            im2col(&self.input, (h, w, c), b0, b1, &mut cols);
            // dW += cols^T dy
            sgemm(k, rows, cout, &cols, 1, k, dyb, cout, 1, 1.0, &mut self.weight.grad);
            if need_dx {
                // dcols = dy W^T, reusing the patch buffer
                sgemm(rows, cout, k, dyb, cout, 1, &self.weight.value, 1, cout, 0.0, &mut cols);
                col2im(&cols, (h, w, c), &mut dx[b0 * h * w * c..b1 * h * w * c]);
            }
        }
        self.scratch = cols;
        need_dx.then(|| Act::new(n, h, w, c, dx))
    }
}

/// Per-channel batch normalization over `n * h * w` positions.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels], false),
            beta: Param::zeros(channels, false),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            xhat: Vec::new(),
            inv_std: Vec::new(),
        }
    }

    fn forward_train(&mut self, x: Act) -> Act {
        let c = self.channels;
        assert_eq!(x.c, c, "batch norm channels");
        let m = x.data.len() / c;
        let (sum, sq) = channel_sums(&x.data, c, |v| (v, v * v));
        let mut mean = vec![0.0f32; c];
        self.inv_std.clear();
        for j in 0..c {
            let mu = sum[j] / m as f64;
            let var = (sq[j] / m as f64 - mu * mu).max(0.0);
            mean[j] = mu as f32;
            self.inv_std.push(1.0 / (var as f32 + BN_EPS).sqrt());
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            self.running_mean[j] = (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * mu as f32;
            self.running_var[j] =
                (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * unbiased as f32;
        }
        let mut out = x;
        self.xhat.clear();
        self.xhat.resize(out.data.len(), 0.0);
        let (gamma, beta, inv_std) = (&self.gamma.value, &self.beta.value, &self.inv_std);
        for (row, xh) in out.data.chunks_exact_mut(c).zip(self.xhat.chunks_exact_mut(c)) {
            for ((((v, h), &mu), &is), (&g, &b)) in row
                .iter_mut()
                .zip(xh.iter_mut())
                .zip(&mean)
                .zip(inv_std)
                .zip(gamma.iter().zip(beta))
            {
                *h = (*v - mu) * is;
                *v = g * *h + b;
            }
        }
        out
    }

    fn forward_eval(&self, x: Act) -> Act {
        let c = self.channels;
        assert_eq!(x.c, c, "batch norm channels");
        let scale: Vec<f32> = (0..c)
            .map(|j| self.gamma.value[j] / (self.running_var[j] + BN_EPS).sqrt())
            .collect();
        let shift: Vec<f32> = (0..c)
            .map(|j| self.beta.value[j] - self.running_mean[j] * scale[j])
            .collect();
        let mut out = x;
        for row in out.data.chunks_exact_mut(c) {
            for ((v, &a), &b) in row.iter_mut().zip(&scale).zip(&shift) {
                *v = *v * a + b;
            }
        }
        out
    }

    fn backward(&mut self, dy: Act) -> Act {
        let c = self.channels;
        let m = dy.data.len() / c;
        self.gamma.ensure_grad();
        self.beta.ensure_grad();
        let (sum_dy, sum_dy_xhat) = channel_sums2(&dy.data, &self.xhat, c);
        for j in 0..c {
            self.gamma.grad[j] += sum_dy_xhat[j] as f32;
            self.beta.grad[j] += sum_dy[j] as f32;
        }
        let mean_dy: Vec<f32> = sum_dy.iter().map(|&s| (s / m as f64) as f32).collect();
        let mean_dy_xhat: Vec<f32> = sum_dy_xhat.iter().map(|&s| (s / m as f64) as f32).collect();
        let scale: Vec<f32> = (0..c).map(|j| self.gamma.value[j] * self.inv_std[j]).collect();
        let mut dx = dy;
        for (row, xh) in dx.data.chunks_exact_mut(c).zip(self.xhat.chunks_exact(c)) {
            for ((((g, &h), &s), &md), &mdx) in row
                .iter_mut()
                .zip(xh)
                .zip(&scale)
                .zip(&mean_dy)
                .zip(&mean_dy_xhat)
            {
                *g = s * (*g - md - h * mdx);
            }
        }
        dx
    }
}

/// Rows per f32 partial sum before it is folded into the f64 total.
const SUM_BLOCK: usize = 256;

/// Per-channel sums of `f(v).0` and `f(v).1` over NHWC rows, in f64.
fn channel_sums(data: &[f32], c: usize, f: impl Fn(f32) -> (f32, f32)) -> (Vec<f64>, Vec<f64>) {
    let mut total = (vec![0.0f64; c], vec![0.0f64; c]);
    let mut part = (vec![0.0f32; c], vec![0.0f32; c]);
    for block in data.chunks(SUM_BLOCK * c) {
        part.0.fill(0.0);
        part.1.fill(0.0);
        for row in block.chunks_exact(c) {
            for ((a, b), &v) in part.0.iter_mut().zip(part.1.iter_mut()).zip(row) {
                let (x, y) = f(v);
                *a += x;
                *b += y;
            }
        }
        for j in 0..c {
            total.0[j] += f64::from(part.0[j]);
            total.1[j] += f64::from(part.1[j]);
        }
    }
    total
}

/// Per-channel sums of `dy` and `dy * xhat`.
fn channel_sums2(dy: &[f32], xhat: &[f32], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut total = (vec![0.0f64; c], vec![0.0f64; c]);
    let mut part = (vec![0.0f32; c], vec![0.0f32; c]);
    for (bd, bx) in dy.chunks(SUM_BLOCK * c).zip(xhat.chunks(SUM_BLOCK * c)) {
        part.0.fill(0.0);
        part.1.fill(0.0);
        for (rd, rx) in bd.chunks_exact(c).zip(bx.chunks_exact(c)) {
            for (((a, b), &d), &x) in part.0.iter_mut().zip(part.1.iter_mut()).zip(rd).zip(rx) {
                *a += d;
                *b += d * x;
            }
        }
        for j in 0..c {
            total.0[j] += f64::from(part.0[j]);
            total.1[j] += f64::from(part.1[j]);
        }
    }
    total
}

/// 2x2 max pooling, stride 2; odd edges produce a partial window (ceil mode).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    argmax: Vec<u32>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2x2 {
    pub fn output_size(size: usize) -> usize {
        size.div_ceil(2)
    }

    /// Pools `x`; with `record`, also stores the flat input index of each maximum.
    fn pool(x: &Act, record: Option<&mut Vec<u32>>) -> Act {
        let (n, h, w, c) = (x.n, x.h, x.w, x.c);
        let (oh, ow) = (Self::output_size(h), Self::output_size(w));
        let mut out = vec![0.0f32; n * oh * ow * c];
        let mut scratch = Vec::new();
        let arg = match record {
            Some(r) => r,
            None => &mut scratch,
        };
        arg.clear();
        arg.resize(out.len(), 0);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = ((b * oh + oy) * ow + ox) * c;
                    let o = &mut out[dst..dst + c];
                    let a = &mut arg[dst..dst + c];
                    let first = ((b * h + 2 * oy) * w + 2 * ox) * c;
                    o.copy_from_slice(&x.data[first..first + c]);
                    for (j, v) in a.iter_mut().enumerate() {
                        *v = (first + j) as u32;
                    }
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                        if iy >= h || ix >= w {
                            continue;
                        }
                        let src = ((b * h + iy) * w + ix) * c;
                        for (j, ((m, ai), &v)) in o.iter_mut().zip(a.iter_mut()).zip(&x.data[src..src + c]).enumerate() {
                            if v > *m {
                                *m = v;
                                *ai = (src + j) as u32;
                            }
                        }
                    }
                }
            }
        }
        Act::new(n, oh, ow, c, out)
    }

    fn forward(&mut self, x: Act, keep: bool) -> Act {
        if keep {
            self.in_shape = (x.n, x.h, x.w, x.c);
            let mut argmax = std::mem::take(&mut self.argmax);
            let out = Self::pool(&x, Some(&mut argmax));
            self.argmax = argmax;
            out
        } else {
            Self::pool(&x, None)
        }
    }

    fn forward_eval(&self, x: Act) -> Act {
        Self::pool(&x, None)
    }

    fn backward(&mut self, dy: Act) -> Act {
        let (n, h, w, c) = self.in_shape;
        let mut dx = vec![0.0f32; n * h * w * c];
        for (&src, &g) in self.argmax.iter().zip(&dy.data) {
            dx[src as usize] += g;
        }
        Act::new(n, h, w, c, dx)
    }
}

/// Fully connected layer, weight layout `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Vec<f32>,
    batch: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::fan_in_uniform(in_features * out_features, in_features, rng),
            bias: Param::zeros(out_features, false),
            input: Vec::new(),
            batch: 0,
        }
    }

    fn apply(&self, x: &Act) -> Act {
        assert_eq!(x.features(), self.in_features, "linear input features");
        let (n, o) = (x.n, self.out_features);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        sgemm(
            n,
            self.in_features,
            o,
            &x.data,
            self.in_features,
            1,
            &self.weight.value,
            o,
            1,
            1.0,
            &mut out,
        );
        Act::new(n, 1, 1, o, out)
    }

    fn forward(&mut self, x: Act, keep: bool) -> Act {
        let out = self.apply(&x);
        if keep {
            self.batch = x.n;
            self.input = x.data;
        }
        out
    }

    fn forward_eval(&self, x: Act) -> Act {
        self.apply(&x)
    }

    fn backward(&mut self, dy: Act, need_dx: bool) -> Option<Act> {
        let (n, i, o) = (self.batch, self.in_features, self.out_features);
        self.weight.ensure_grad();
        self.bias.ensure_grad();
        sgemm(i, n, o, &self.input, 1, i, &dy.data, o, 1, 1.0, &mut self.weight.grad);
        for row in dy.data.chunks_exact(o) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0f32; n * i];
        sgemm(n, o, i, &dy.data, o, 1, &self.weight.value, 1, o, 0.0, &mut dx);
        Some(Act::new(n, 1, 1, i, dx))
    }
}

/// Inverted dropout; identity at evaluation time.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f32,
    rng: ChaCha8Rng,
    mask: Vec<f32>,
}

impl Dropout {
    pub fn new(rate: f32, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: Vec::new(),
        }
    }

    fn forward_train(&mut self, x: Act) -> Act {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mut out = x;
        self.mask.clear();
        for v in out.data.iter_mut() {
            let m = if self.rng.gen::<f32>() < keep { scale } else { 0.0 };
            self.mask.push(m);
            *v *= m;
        }
        out
    }

    fn backward(&mut self, dy: Act) -> Act {
        let mut dx = dy;
        for (g, m) in dx.data.iter_mut().zip(&self.mask) {
            *g *= m;
        }
        dx
    }
}
