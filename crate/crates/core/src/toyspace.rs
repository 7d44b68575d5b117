//! Synthetic continuous-token datasets with known ground truth, plus
//! two-sample divergence metrics.
//!
//! Every dataset whitens its tokens to zero mean and unit per-component
//! variance using closed-form moments, so the diffusion machinery always
//! sees unit-scale data. Datasets are regenerable from `{spec, seed}`;
//! nothing is stored on disk.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::argen::TokenGrid;
use crate::error::{Error, Result};

/// Token distributions. All are two-dimensional; higher-dimensional spaces
/// are out of scope for the histogram metric and should be compared with
/// [`mmd_rbf`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ToySpec {
    Gmm2d {
        means: Vec<[f64; 2]>,
        stds: Vec<[f64; 2]>,
        weights: Vec<f64>,
    },
    Checkerboard {
        squares_per_side: usize,
        extent: f64,
    },
    /// Grids of `n_tokens` i.i.d. draws from one of `n_modes` Gaussians on
    /// a circle; the shared mode makes tokens mutually informative and
    /// serves as the label.
    CorrelatedGrid {
        n_tokens: usize,
        n_modes: usize,
        radius: f64,
        mode_std: f64,
    },
}

impl ToySpec {
    /// Single standard-normal component; whitening is the identity.
    pub fn standard_normal() -> ToySpec {
        ToySpec::Gmm2d {
            means: vec![[0.0, 0.0]],
            stds: vec![[1.0, 1.0]],
            weights: vec![1.0],
        }
    }

    /// Four well-separated corners, the default head-training mixture.
    pub fn gmm2d_default() -> ToySpec {
        ToySpec::Gmm2d {
            means: vec![[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]],
            stds: vec![[0.3, 0.3]; 4],
            weights: vec![0.25; 4],
        }
    }

    pub fn checkerboard_default() -> ToySpec {
        ToySpec::Checkerboard {
            squares_per_side: 4,
            extent: 2.0,
        }
    }

    /// 16 tokens per grid, one of 8 modes, labels = mode id.
    pub fn correlated_default() -> ToySpec {
        ToySpec::CorrelatedGrid {
            n_tokens: 16,
            n_modes: 8,
            radius: 2.0,
            mode_std: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Normalization {
    mean: [f64; 2],
    std: [f64; 2],
}

/// A dataset plus the whitening transform derived from its closed-form
/// moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDataset {
    pub spec: ToySpec,
    norm: Normalization,
}

impl ToyDataset {
    pub fn new(spec: ToySpec) -> Result<ToyDataset> {
        let norm = match &spec {
            ToySpec::Gmm2d {
                means,
                stds,
                weights,
            } => {
                if means.is_empty() || means.len() != stds.len() || means.len() != weights.len() {
                    return Err(Error::InvalidConfig(
                        "gmm2d needs matching non-empty means/stds/weights".into(),
                    ));
                }
                let wsum: f64 = weights.iter().sum();
                if !(wsum > 0.0) || weights.iter().any(|w| *w < 0.0) {
                    return Err(Error::InvalidConfig("gmm2d weights must be positive".into()));
                }
                let mut mean = [0.0; 2];
                let mut second = [0.0; 2];
                for ((m, s), w) in means.iter().zip(stds).zip(weights) {
                    for a in 0..2 {
                        mean[a] += w / wsum * m[a];
                        second[a] += w / wsum * (s[a] * s[a] + m[a] * m[a]);
                    }
                }
                Normalization {
                    mean,
                    std: [
                        (second[0] - mean[0] * mean[0]).sqrt(),
                        (second[1] - mean[1] * mean[1]).sqrt(),
                    ],
                }
            }
            ToySpec::Checkerboard {
                squares_per_side,
                extent,
            } => {
                if squares_per_side % 2 != 0 || *squares_per_side == 0 {
                    return Err(Error::InvalidConfig(
                        "checkerboard needs an even, positive squares_per_side".into(),
                    ));
                }
                if !(*extent > 0.0) {
                    return Err(Error::InvalidConfig("checkerboard extent must be positive".into()));
                }
                // Every column holds half the squares, so each marginal is
                // uniform on [-extent, extent].
                let var = extent * extent / 3.0;
                Normalization {
                    mean: [0.0; 2],
                    std: [var.sqrt(); 2],
                }
            }
            ToySpec::CorrelatedGrid {
                n_tokens,
                n_modes,
                radius,
                mode_std,
            } => {
                if *n_tokens == 0 || *n_modes < 3 {
                    return Err(Error::InvalidConfig(
                        "correlated-grid needs n_tokens >= 1 and n_modes >= 3".into(),
                    ));
                }
                // Modes on a circle: mean 0, per-axis variance sigma^2 + R^2/2.
                let var = mode_std * mode_std + radius * radius / 2.0;
                Normalization {
                    mean: [0.0; 2],
                    std: [var.sqrt(); 2],
                }
            }
        };
        Ok(ToyDataset { spec, norm })
    }

    pub fn token_dim(&self) -> usize {
        2
    }

    pub fn n_labels(&self) -> Option<usize> {
        match &self.spec {
            ToySpec::CorrelatedGrid { n_modes, .. } => Some(*n_modes),
            _ => None,
        }
    }

    pub fn grid_tokens(&self) -> usize {
        match &self.spec {
            ToySpec::CorrelatedGrid { n_tokens, .. } => *n_tokens,
            _ => 1,
        }
    }

    pub fn whiten(&self, raw: [f64; 2]) -> [f64; 2] {
        [
            (raw[0] - self.norm.mean[0]) / self.norm.std[0],
            (raw[1] - self.norm.mean[1]) / self.norm.std[1],
        ]
    }

    pub fn unwhiten(&self, white: [f64; 2]) -> [f64; 2] {
        [
            white[0] * self.norm.std[0] + self.norm.mean[0],
            white[1] * self.norm.std[1] + self.norm.mean[1],
        ]
    }

    fn raw_token(&self, rng: &mut ChaCha12Rng, mode: Option<usize>) -> [f64; 2] {
        match &self.spec {
            ToySpec::Gmm2d {
                means,
                stds,
                weights,
            } => {
                let wsum: f64 = weights.iter().sum();
                let mut pick = rng.random_range(0.0..wsum);
                let mut idx = 0;
                for (i, w) in weights.iter().enumerate() {
                    if pick < *w {
                        idx = i;
                        break;
                    }
                    pick -= w;
                    idx = i;
                }
                [
                    means[idx][0] + stds[idx][0] * rng.sample::<f64, _>(StandardNormal),
                    means[idx][1] + stds[idx][1] * rng.sample::<f64, _>(StandardNormal),
                ]
            }
            ToySpec::Checkerboard {
                squares_per_side,
                extent,
            } => {
                let k = *squares_per_side;
                let allowed = k * k / 2;
                let pick = rng.random_range(0..allowed);
                // Enumerate allowed squares row-major: (i + j) even.
                let mut seen = 0;
                let (mut si, mut sj) = (0, 0);
                'outer: for i in 0..k {
                    for j in 0..k {
                        if (i + j) % 2 == 0 {
                            if seen == pick {
                                si = i;
                                sj = j;
                                break 'outer;
                            }
                            seen += 1;
                        }
                    }
                }
                let side = 2.0 * extent / k as f64;
                [
                    -extent + (si as f64 + rng.random::<f64>()) * side,
                    -extent + (sj as f64 + rng.random::<f64>()) * side,
                ]
            }
            ToySpec::CorrelatedGrid {
                n_modes,
                radius,
                mode_std,
                ..
            } => {
                let m = mode.expect("correlated grid token needs a mode");
                let theta = 2.0 * std::f64::consts::PI * m as f64 / *n_modes as f64;
                [
                    radius * theta.cos() + mode_std * rng.sample::<f64, _>(StandardNormal),
                    radius * theta.sin() + mode_std * rng.sample::<f64, _>(StandardNormal),
                ]
            }
        }
    }

    /// One whitened token from the marginal distribution.
    pub fn sample_token(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let mode = match &self.spec {
            ToySpec::CorrelatedGrid { n_modes, .. } => Some(rng.random_range(0..*n_modes)),
            _ => None,
        };
        self.whiten(self.raw_token(rng, mode)).to_vec()
    }

    /// One whitened grid and its label (correlated-grid only).
    pub fn sample_grid(&self, rng: &mut ChaCha12Rng) -> (TokenGrid, Option<usize>) {
        match &self.spec {
            ToySpec::CorrelatedGrid {
                n_tokens, n_modes, ..
            } => {
                let mode = rng.random_range(0..*n_modes);
                let mut values = Vec::with_capacity(n_tokens * 2);
                for _ in 0..*n_tokens {
                    values.extend_from_slice(&self.whiten(self.raw_token(rng, Some(mode))));
                }
                (
                    TokenGrid::new_unmasked(2, values, (0..*n_tokens).collect()),
                    Some(mode),
                )
            }
            _ => {
                let token = self.sample_token(rng);
                (TokenGrid::new_unmasked(2, token, vec![0]), None)
            }
        }
    }

    /// `count` whitened tokens from a single mode, as a reference set for
    /// conditional metrics.
    pub fn sample_label_tokens(
        &self,
        label: usize,
        count: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<Vec<f64>>> {
        match &self.spec {
            ToySpec::CorrelatedGrid { n_modes, .. } => {
                if label >= *n_modes {
                    return Err(Error::InvalidConfig(format!(
                        "label {label} out of range for {n_modes} modes"
                    )));
                }
                Ok((0..count)
                    .map(|_| self.whiten(self.raw_token(rng, Some(label))).to_vec())
                    .collect())
            }
            _ => Err(Error::InvalidConfig("dataset has no labels".into())),
        }
    }
}

/// Histogram range: whitened data lives well inside ±5 standard deviations;
/// outliers clamp into the edge bins.
const HIST_RANGE: f64 = 5.0;

/// KL divergence between 2D histograms with Laplace smoothing (0.5 per
/// cell). Asymmetric; call as `hist_kl(generated, reference, bins)`.
pub fn hist_kl(generated: &[Vec<f64>], reference: &[Vec<f64>], bins: usize) -> Result<f64> {
    if bins < 8 {
        return Err(Error::InvalidConfig("need at least 8 bins per axis".into()));
    }
    if generated.len() < 1000 || reference.len() < 1000 {
        return Err(Error::InvalidConfig(
            "hist_kl needs at least 1000 samples per set".into(),
        ));
    }
    for s in generated.iter().chain(reference) {
        if s.len() != 2 {
            return Err(Error::InvalidConfig(
                "hist_kl is 2D only; use mmd_rbf for higher dimensions".into(),
            ));
        }
    }
    let cell = |v: f64| -> usize {
        let scaled = (v + HIST_RANGE) / (2.0 * HIST_RANGE) * bins as f64;
        (scaled.floor() as isize).clamp(0, bins as isize - 1) as usize
    };
    let count = |samples: &[Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; bins * bins];
        for s in samples {
            c[cell(s[0]) * bins + cell(s[1])] += 1.0;
        }
        c
    };
    let ca = count(generated);
    let cb = count(reference);
    let k = (bins * bins) as f64;
    let na = generated.len() as f64 + 0.5 * k;
    let nb = reference.len() as f64 + 0.5 * k;
    let mut kl = 0.0;
    for (a, b) in ca.iter().zip(&cb) {
        let pa = (a + 0.5) / na;
        let pb = (b + 0.5) / nb;
        kl += pa * (pa / pb).ln();
    }
    Ok(kl)
}

/// Unbiased MMD² estimate with an RBF kernel `exp(−‖x−y‖²/(2h²))`.
/// Symmetric in its arguments.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidConfig("bandwidth must be positive".into()));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidConfig(
            "mmd_rbf needs at least 2 samples per set".into(),
        ));
    }
    let dim = a[0].len();
    for s in a.iter().chain(b) {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: s.len(),
            });
        }
    }
    let kern = |x: &[f64], y: &[f64]| -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d2 / (2.0 * bandwidth * bandwidth)).exp()
    };
    let mut kaa = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i != j {
                kaa += kern(&a[i], &a[j]);
            }
        }
    }
    kaa /= (a.len() * (a.len() - 1)) as f64;
    let mut kbb = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            if i != j {
                kbb += kern(&b[i], &b[j]);
            }
        }
    }
    kbb /= (b.len() * (b.len() - 1)) as f64;
    let mut kab = 0.0;
    for x in a {
        for y in b {
            kab += kern(x, y);
        }
    }
    kab /= (a.len() * b.len()) as f64;
    Ok(kaa + kbb - 2.0 * kab)
}
