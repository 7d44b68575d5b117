//! Building blocks for the hand-written networks: affine layers, SiLU,
//! affine-free layer norm, and AdamW. Everything is plain `Vec<f64>` with
//! explicit backward passes.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub(crate) struct Affine {
    /// Row-major `out_dim x in_dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Affine {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Gaussian fan-in init, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Affine {
            w: (0..in_dim * out_dim)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.b.clone();
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.in_dim)) {
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *o += acc;
        }
        out
    }

    /// Accumulate `dw += dy ⊗ x`, `db += dy`, and optionally `dx += Wᵀ·dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut AffineGrad, dx: Option<&mut [f64]>) {
        debug_assert_eq!(dy.len(), self.out_dim);
        for (j, dyj) in dy.iter().enumerate() {
            grad.db[j] += dyj;
            let row = &mut grad.dw[j * self.in_dim..(j + 1) * self.in_dim];
            for (gw, xi) in row.iter_mut().zip(x) {
                *gw += dyj * xi;
            }
        }
        if let Some(dx) = dx {
            for (j, dyj) in dy.iter().enumerate() {
                let row = &self.w[j * self.in_dim..(j + 1) * self.in_dim];
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += wi * dyj;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AffineGrad {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl AffineGrad {
    pub fn zeros(layer: &Affine) -> Self {
        AffineGrad {
            dw: vec![0.0; layer.w.len()],
            db: vec![0.0; layer.b.len()],
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Layer norm without learned affine. Returns the normalized vector and the
/// inverse std needed by the backward pass.
pub(crate) fn layer_norm(h: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (h.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Backward of `layer_norm` given the normalized output `hn` and upstream
/// gradient `g`: `dh = inv_std · (g − mean(g) − hn · mean(g ⊙ hn))`.
pub(crate) fn layer_norm_backward(hn: &[f64], inv_std: f64, g: &[f64]) -> Vec<f64> {
    let n = hn.len() as f64;
    let g_mean = g.iter().sum::<f64>() / n;
    let ghn_mean = g.iter().zip(hn).map(|(a, b)| a * b).sum::<f64>() / n;
    g.iter()
        .zip(hn)
        .map(|(gi, hi)| inv_std * (gi - g_mean - hi * ghn_mean))
        .collect()
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub(crate) struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, betas: (f64, f64), shapes: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
