//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are NHWC, `f32`. Convolutions are 3x3, stride 1, zero "same"
//! padding, lowered to a single GEMM over the whole mini-batch via im2col.

mod layers;

pub use layers::{BatchNorm, Conv3x3, Dropout, Layer, Linear, MaxPool2x2};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// NHWC activation block. Dense activations use `h = w = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "activation size mismatch");
        Self { n, h, w, c, data }
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self::new(n, h, w, c, vec![0.0; n * h * w * c])
    }

    /// Features per example.
    pub fn features(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn flatten(self) -> Self {
        let f = self.features();
        Self {
            n: self.n,
            h: 1,
            w: 1,
            c: f,
            data: self.data,
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
    /// Whether L2 weight decay applies (weights yes; biases and BN affine no).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Vec<f32>, decay: bool) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad, decay }
    }

    /// Fan-in scaled uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn fan_in_uniform(len: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f32).sqrt();
        Self::new((0..len).map(|_| rng.gen_range(-bound..bound)).collect(), true)
    }

    pub fn zeros(len: usize, decay: bool) -> Self {
        Self::new(vec![0.0; len], decay)
    }

    pub fn ensure_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
    }
}

/// `c = a * b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= reach(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() >= reach(k, n, rsb, csb), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax of `logits` (`rows x cols`), in place.
pub fn softmax_rows(logits: &mut [f32], cols: usize) {
    for row in logits.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Mean softmax cross-entropy over the batch, and its gradient w.r.t. the logits.
///
/// The loss is non-finite whenever any logit is.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[u32], classes: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut grad = logits.to_vec();
    softmax_rows(&mut grad, classes);
    let mut loss = 0.0f64;
    let scale = 1.0 / n as f32;
    for ((row, z), &label) in grad
        .chunks_exact_mut(classes)
        .zip(logits.chunks_exact(classes))
        .zip(labels)
    {
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse: f64 = z.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
        loss += lse - f64::from(z[label as usize] - max);
        row[label as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    (loss / n as f64, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// SGD with classical momentum: `v <- mu v + g`, `w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) {
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
        } = self.config;
        for (i, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![0.0; p.value.len()]);
            }
            let v = &mut self.velocity[i];
            let decay = if p.decay { wd } else { 0.0 };
            for ((w, g), vel) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(v.iter_mut()) {
                let grad = *g + decay * *w;
                *vel = mu * *vel + grad;
                *w -= lr * *vel;
                *g = 0.0;
            }
        }
    }
}
