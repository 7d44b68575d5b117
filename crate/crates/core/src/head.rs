//! The diffusion MLP: a stack of residual blocks, each applying AdaLN
//! conditioning, a linear layer, SiLU, and a second linear layer, between
//! an input and output projection. Forward, backward, the prediction loss,
//! EMA, and the head-only training loop are all here.
//!
//! Conditioning: the condition vector z is added to a learned per-step time
//! embedding; the sum modulates every block through AdaLN (layer norm with
//! no learned affine, then condition-derived per-channel `(1+scale, shift)`).
//! The scale/shift projection and each block's second linear layer start at
//! zero, so blocks begin as exact identities.
//!
//! Gradients are always taken on the full-precision graph. In bf16-round
//! mode the simulated forward rounds every affine output and activation and
//! the resulting corrupted output drives the loss residual, but the
//! parameter gradients still flow through the clean graph; the study
//! isolates output error rather than emulating low-precision backprop.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, layer_norm_backward, silu, silu_deriv, AdamW, Affine, AffineGrad};
use crate::param::{convert, target, Parameterization, TargetVector};
use crate::precision::{round_bf16, PrecisionMode, PrecisionModel};
use crate::rng::{self, Domain};
use crate::schedule::{Schedule, ScheduleKind};
use crate::toyspace::ToyDataset;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Silu,
    /// Test hook: disables the nonlinearity so affinity probes work.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
            Activation::Identity => x,
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_deriv(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub token_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub t_max: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl HeadConfig {
    /// Toy default scaled down from the production-size head.
    pub fn small(token_dim: usize, t_max: usize) -> HeadConfig {
        HeadConfig {
            token_dim,
            width: 128,
            depth: 4,
            t_max,
            activation: Activation::Silu,
            ln_eps: default_ln_eps(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub adaln: Affine,
    pub lin1: Affine,
    pub lin2: Affine,
}

/// All parameters of the diffusion MLP.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cfg: HeadConfig,
    pub(crate) in_proj: Affine,
    pub(crate) time_embed: Vec<f64>,
    pub(crate) blocks: Vec<ResBlock>,
    pub(crate) out_proj: Affine,
}

impl HeadParams {
    pub fn zeros(cfg: HeadConfig) -> HeadParams {
        let w = cfg.width;
        HeadParams {
            cfg,
            in_proj: Affine::zeros(cfg.token_dim, w),
            time_embed: vec![0.0; (cfg.t_max + 1) * w],
            blocks: (0..cfg.depth)
                .map(|_| ResBlock {
                    adaln: Affine::zeros(w, 2 * w),
                    lin1: Affine::zeros(w, w),
                    lin2: Affine::zeros(w, w),
                })
                .collect(),
            out_proj: Affine::zeros(w, cfg.token_dim),
        }
    }

    /// Random init. The AdaLN projection and the second linear layer of each
    /// block start at zero so the residual branches vanish initially; the
    /// output projection starts at zero so the head begins as the constant
    /// zero function. The learned time-embedding table starts sinusoidal so
    /// nearby steps share conditioning from the first update.
    pub fn init(cfg: HeadConfig, rng: &mut ChaCha12Rng) -> HeadParams {
        let w = cfg.width;
        let mut p = HeadParams::zeros(cfg);
        p.in_proj = Affine::init(cfg.token_dim, w, rng);
        let half = w / 2;
        for t in 0..=cfg.t_max {
            for i in 0..half {
                let freq = 10_000f64.powf(-(i as f64) / half as f64);
                let angle = t as f64 * freq;
                p.time_embed[t * w + i] = angle.sin();
                p.time_embed[t * w + half + i] = angle.cos();
            }
        }
        for b in &mut p.blocks {
            b.lin1 = Affine::init(w, w, rng);
        }
        p
    }

    pub fn set_out_proj_bias(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cfg.token_dim);
        self.out_proj.b.copy_from_slice(bias);
    }

    fn time_row(&self, t: usize) -> &[f64] {
        let w = self.cfg.width;
        &self.time_embed[t * w..(t + 1) * w]
    }

    fn check_shapes(&self, x_t: &[f64], t: usize, z: &[f64]) -> Result<()> {
        if x_t.len() != self.cfg.token_dim {
            return Err(Error::DimensionMismatch {
                left: x_t.len(),
                right: self.cfg.token_dim,
            });
        }
        if z.len() != self.cfg.width {
            return Err(Error::DimensionMismatch {
                left: z.len(),
                right: self.cfg.width,
            });
        }
        if t > self.cfg.t_max {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.cfg.t_max,
            });
        }
        Ok(())
    }

    /// Deterministic forward pass. In bf16-round mode every affine output
    /// and activation is rounded, simulating a low-precision forward; the
    /// stochastic injection modes corrupt only the output and are applied
    /// by the samplers, not here.
    pub fn forward(&self, x_t: &[f64], t: usize, z: &[f64], pm: &PrecisionModel) -> Result<Vec<f64>> {
        self.check_shapes(x_t, t, z)?;
        let rounding = pm.mode == PrecisionMode::Bf16Round;
        let q = |v: f64| if rounding { round_bf16(v) } else { v };
        let qv = |mut v: Vec<f64>| {
            if rounding {
                for e in v.iter_mut() {
                    *e = round_bf16(*e);
                }
            }
            v
        };
        let act = self.cfg.activation;
        let c: Vec<f64> = self
            .time_row(t)
            .iter()
            .zip(z)
            .map(|(te, zi)| q(te + zi))
            .collect();
        let sc: Vec<f64> = c.iter().map(|&v| q(act.apply(v))).collect();
        let mut y = qv(self.in_proj.apply(x_t));
        for block in &self.blocks {
            let modulation = qv(block.adaln.apply(&sc));
            let (scale, shift) = modulation.split_at(self.cfg.width);
            let (hn, _) = layer_norm(&y, self.cfg.ln_eps);
            let hmod: Vec<f64> = hn
                .iter()
                .zip(scale)
                .zip(shift)
                .map(|((h, s), b)| q(h * (1.0 + s) + b))
                .collect();
            let h1 = qv(block.lin1.apply(&hmod));
            let a: Vec<f64> = h1.iter().map(|&v| q(act.apply(v))).collect();
            let h2 = qv(block.lin2.apply(&a));
            y = y.iter().zip(&h2).map(|(yi, hi)| q(yi + hi)).collect();
        }
        Ok(qv(self.out_proj.apply(&y)))
    }

    /// Full-precision forward that caches everything backward needs.
    pub fn forward_traced(&self, x_t: &[f64], t: usize, z: &[f64]) -> Result<(Vec<f64>, HeadTrace)> {
        self.check_shapes(x_t, t, z)?;
        let act = self.cfg.activation;
        let c: Vec<f64> = self.time_row(t).iter().zip(z).map(|(te, zi)| te + zi).collect();
        let sc: Vec<f64> = c.iter().map(|&v| act.apply(v)).collect();
        let mut y = self.in_proj.apply(x_t);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let modulation = block.adaln.apply(&sc);
            let (scale, _) = modulation.split_at(self.cfg.width);
            let (hn, inv_std) = layer_norm(&y, self.cfg.ln_eps);
            let hmod: Vec<f64> = hn
                .iter()
                .zip(&modulation[..self.cfg.width])
                .zip(&modulation[self.cfg.width..])
                .map(|((h, s), b)| h * (1.0 + s) + b)
                .collect();
            let h1 = block.lin1.apply(&hmod);
            let a: Vec<f64> = h1.iter().map(|&v| act.apply(v)).collect();
            let h2 = block.lin2.apply(&a);
            let scale = scale.to_vec();
            y = y.iter().zip(&h2).map(|(yi, hi)| yi + hi).collect();
            blocks.push(BlockTrace {
                hn,
                inv_std,
                scale,
                hmod,
                h1,
                a,
            });
        }
        let out = self.out_proj.apply(&y);
        Ok((
            out,
            HeadTrace {
                x_t: x_t.to_vec(),
                t,
                c,
                sc,
                blocks,
                y_final: y,
            },
        ))
    }

    /// Reverse-mode pass: accumulates parameter gradients for upstream
    /// gradient `dv` and returns the gradient w.r.t. the condition z.
    pub fn backward(&self, trace: &HeadTrace, dv: &[f64], grads: &mut HeadGrads) -> Vec<f64> {
        let w = self.cfg.width;
        let act = self.cfg.activation;
        assert_eq!(dv.len(), self.cfg.token_dim);

        let mut dy = vec![0.0; w];
        self.out_proj
            .backward(&trace.y_final, dv, &mut grads.out_proj, Some(&mut dy));

        let mut dsc = vec![0.0; w];
        for bi in (0..self.blocks.len()).rev() {
            let block = &self.blocks[bi];
            let bt = &trace.blocks[bi];
            let bg = &mut grads.blocks[bi];
            // Residual: dy is the gradient at the block output; it flows
            // unchanged through the skip and through the branch.
            let dh2 = dy.clone();
            let mut da = vec![0.0; w];
            block.lin2.backward(&bt.a, &dh2, &mut bg.lin2, Some(&mut da));
            let dh1: Vec<f64> = da.iter().zip(&bt.h1).map(|(d, h)| d * act.deriv(*h)).collect();
            let mut dhmod = vec![0.0; w];
            block
                .lin1
                .backward(&bt.hmod, &dh1, &mut bg.lin1, Some(&mut dhmod));
            // hmod = hn*(1+scale) + shift
            let d_hn: Vec<f64> = dhmod
                .iter()
                .zip(&bt.scale)
                .map(|(d, s)| d * (1.0 + s))
                .collect();
            let mut dmod = vec![0.0; 2 * w];
            for i in 0..w {
                dmod[i] = dhmod[i] * bt.hn[i]; // d scale
                dmod[w + i] = dhmod[i]; // d shift
            }
            block
                .adaln
                .backward(&trace.sc, &dmod, &mut bg.adaln, Some(&mut dsc));
            let d_block_in = layer_norm_backward(&bt.hn, bt.inv_std, &d_hn);
            for i in 0..w {
                dy[i] += d_block_in[i];
            }
        }

        let mut dx = vec![0.0; self.cfg.token_dim];
        self.in_proj
            .backward(&trace.x_t, &dy, &mut grads.in_proj, Some(&mut dx));

        // c = time_embed[t] + z feeds every block through sc = act(c).
        let dz: Vec<f64> = dsc
            .iter()
            .zip(&trace.c)
            .map(|(d, c)| d * act.deriv(*c))
            .collect();
        let row = &mut grads.time_embed[trace.t * w..(trace.t + 1) * w];
        for (r, d) in row.iter_mut().zip(&dz) {
            *r += d;
        }
        dz
    }

    /// All parameter tensors in a fixed order (used by the optimizer, EMA,
    /// and checkpoints).
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut t = vec![&self.in_proj.w, &self.in_proj.b, &self.time_embed];
        for b in &self.blocks {
            t.push(&b.adaln.w);
            t.push(&b.adaln.b);
            t.push(&b.lin1.w);
            t.push(&b.lin1.b);
            t.push(&b.lin2.w);
            t.push(&b.lin2.b);
        }
        t.push(&self.out_proj.w);
        t.push(&self.out_proj.b);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t = vec![&mut self.in_proj.w, &mut self.in_proj.b, &mut self.time_embed];
        for b in &mut self.blocks {
            t.push(&mut b.adaln.w);
            t.push(&mut b.adaln.b);
            t.push(&mut b.lin1.w);
            t.push(&mut b.lin1.b);
            t.push(&mut b.lin2.w);
            t.push(&mut b.lin2.b);
        }
        t.push(&mut self.out_proj.w);
        t.push(&mut self.out_proj.b);
        t
    }

    pub fn tensor_names(cfg: &HeadConfig) -> Vec<String> {
        let mut names = vec![
            "in_proj.w".to_string(),
            "in_proj.b".to_string(),
            "time_embed".to_string(),
        ];
        for i in 0..cfg.depth {
            for part in ["adaln.w", "adaln.b", "lin1.w", "lin1.b", "lin2.w", "lin2.b"] {
                names.push(format!("blocks.{i}.{part}"));
            }
        }
        names.push("out_proj.w".to_string());
        names.push("out_proj.b".to_string());
        names
    }
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    hn: Vec<f64>,
    inv_std: f64,
    scale: Vec<f64>,
    hmod: Vec<f64>,
    h1: Vec<f64>,
    a: Vec<f64>,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    x_t: Vec<f64>,
    t: usize,
    c: Vec<f64>,
    sc: Vec<f64>,
    blocks: Vec<BlockTrace>,
    y_final: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlockGrads {
    pub adaln: AffineGrad,
    pub lin1: AffineGrad,
    pub lin2: AffineGrad,
}

/// Gradients with the same tensor layout as [`HeadParams`].
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub(crate) in_proj: AffineGrad,
    pub(crate) time_embed: Vec<f64>,
    pub(crate) blocks: Vec<ResBlockGrads>,
    pub(crate) out_proj: AffineGrad,
}

impl HeadGrads {
    pub fn zeros(params: &HeadParams) -> HeadGrads {
        HeadGrads {
            in_proj: AffineGrad::zeros(&params.in_proj),
            time_embed: vec![0.0; params.time_embed.len()],
            blocks: params
                .blocks
                .iter()
                .map(|b| ResBlockGrads {
                    adaln: AffineGrad::zeros(&b.adaln),
                    lin1: AffineGrad::zeros(&b.lin1),
                    lin2: AffineGrad::zeros(&b.lin2),
                })
                .collect(),
            out_proj: AffineGrad::zeros(&params.out_proj),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut t = vec![&self.in_proj.dw, &self.in_proj.db, &self.time_embed];
        for b in &self.blocks {
            t.push(&b.adaln.dw);
            t.push(&b.adaln.db);
            t.push(&b.lin1.dw);
            t.push(&b.lin1.db);
            t.push(&b.lin2.dw);
            t.push(&b.lin2.db);
        }
        t.push(&self.out_proj.dw);
        t.push(&self.out_proj.db);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t = vec![&mut self.in_proj.dw, &mut self.in_proj.db, &mut self.time_embed];
        for b in &mut self.blocks {
            t.push(&mut b.adaln.dw);
            t.push(&mut b.adaln.db);
            t.push(&mut b.lin1.dw);
            t.push(&mut b.lin1.db);
            t.push(&mut b.lin2.dw);
            t.push(&mut b.lin2.db);
        }
        t.push(&mut self.out_proj.dw);
        t.push(&mut self.out_proj.db);
        t
    }
}

/// One (timestep, noise draw) pair of the loss estimator.
#[derive(Debug, Clone)]
pub struct LossSample {
    pub t: usize,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VLossOutput {
    /// Mean per-component squared error in the model's own space, with the
    /// precision model applied to the output.
    pub loss: f64,
    /// The same residuals re-expressed in v-space; for a v-pred head this
    /// equals `loss`.
    pub v_space_loss: f64,
    /// Per-sample `(t, v-space mse)` pairs for loss-vs-t statistics.
    pub per_sample_v: Vec<(usize, f64)>,
    /// Gradient w.r.t. the condition vector z (summed over samples,
    /// normalized like the loss).
    pub dz: Vec<f64>,
}

/// Denoising loss for one token under K sampled `(t, ε)` pairs, targets
/// formed by the given parameterization with unit loss weight.
///
/// Simulated low precision enters the residual: for the stochastic modes
/// the exact gradient flows through the `(1+δ)` factors; for bf16-round the
/// rounded output drives the residual while the gradient uses the clean
/// graph.
#[allow(clippy::too_many_arguments)]
pub fn v_loss(
    hp: &HeadParams,
    p: &Parameterization,
    s: &Schedule,
    x: &[f64],
    z: &[f64],
    samples: &[LossSample],
    pm: &PrecisionModel,
    inject_rng: &mut ChaCha12Rng,
    mut grads: Option<&mut HeadGrads>,
) -> Result<VLossOutput> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let d = hp.cfg.token_dim as f64;
    let k = samples.len() as f64;
    let mut own_sum = 0.0;
    let mut v_sum = 0.0;
    let mut per_sample_v = Vec::with_capacity(samples.len());
    let mut dz_total = vec![0.0; hp.cfg.width];
    for sample in samples {
        let x_t = s.forward_diffuse(sample.t, x, &sample.eps)?;
        let u_target = target(p, s, sample.t, x, &sample.eps)?;
        let (u_clean, trace) = hp.forward_traced(&x_t, sample.t, z)?;
        let factors = pm.draw_factors(inject_rng, u_clean.len());
        let u_sim: Vec<f64> = match pm.mode {
            PrecisionMode::Exact => u_clean.clone(),
            PrecisionMode::Bf16Round => hp.forward(&x_t, sample.t, z, pm)?,
            _ => u_clean
                .iter()
                .zip(factors.as_ref().unwrap())
                .map(|(u, f)| u * f)
                .collect(),
        };
        let residual: Vec<f64> = u_sim
            .iter()
            .zip(&u_target.values)
            .map(|(a, b)| a - b)
            .collect();
        let own_mse = residual.iter().map(|r| r * r).sum::<f64>() / d;
        own_sum += own_mse;

        let v_mse = if *p == Parameterization::VPred {
            own_mse
        } else {
            let v_target = target(&Parameterization::VPred, s, sample.t, x, &sample.eps)?;
            let sim_vec = TargetVector {
                values: u_sim.clone(),
                step: sample.t,
                kind: *p,
            };
            let v_sim = convert(&Parameterization::VPred, s, sample.t, &x_t, &sim_vec)?;
            v_sim
                .values
                .iter()
                .zip(&v_target.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d
        };
        v_sum += v_mse;
        per_sample_v.push((sample.t, v_mse));

        if let Some(g) = grads.as_deref_mut() {
            let dv: Vec<f64> = residual
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let f = factors.as_ref().map_or(1.0, |fs| fs[i]);
                    2.0 * r * f / (d * k)
                })
                .collect();
            let dz = hp.backward(&trace, &dv, g);
            for (acc, v) in dz_total.iter_mut().zip(&dz) {
                *acc += v;
            }
        }
    }
    Ok(VLossOutput {
        loss: own_sum / k,
        v_space_loss: v_sum / k,
        per_sample_v,
        dz: dz_total,
    })
}

/// Exponential moving average of head parameters:
/// `shadow ← m·shadow + (1−m)·live`.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: HeadParams,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(live: &HeadParams, momentum: f64) -> Result<EmaState> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "EMA momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(EmaState {
            shadow: live.clone(),
            momentum,
        })
    }

    pub fn update(&mut self, live: &HeadParams) -> Result<()> {
        let m = self.momentum;
        let live_tensors = live.tensors();
        let mut shadow_tensors = self.shadow.tensors_mut();
        if live_tensors.len() != shadow_tensors.len() {
            return Err(Error::DimensionMismatch {
                left: live_tensors.len(),
                right: shadow_tensors.len(),
            });
        }
        for (sh, lv) in shadow_tensors.iter_mut().zip(live_tensors) {
            if sh.len() != lv.len() {
                return Err(Error::DimensionMismatch {
                    left: sh.len(),
                    right: lv.len(),
                });
            }
            for (a, b) in sh.iter_mut().zip(lv) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }
}

/// Head-only training configuration. All randomness derives from `seed`
/// through fixed stream domains, so reruns are bit-identical; the precision
/// model's own seed field is ignored here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHeadConfig {
    pub head: HeadConfig,
    pub schedule: ScheduleKind,
    pub param: Parameterization,
    pub pm: PrecisionModel,
    pub steps: usize,
    pub batch_size: usize,
    pub k_timesteps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub ema_momentum: f64,
    pub seed: u64,
    pub t_buckets: usize,
    pub record_every: usize,
}

impl TrainHeadConfig {
    /// Toy-scale defaults: AdamW betas (0.9, 0.95), lr 1e-3, EMA 0.9999,
    /// uniform timestep sampling with K = 1.
    pub fn defaults(head: HeadConfig, seed: u64) -> TrainHeadConfig {
        TrainHeadConfig {
            head,
            schedule: ScheduleKind::Cosine,
            param: Parameterization::VPred,
            pm: PrecisionModel::exact(),
            steps: 20_000,
            batch_size: 64,
            k_timesteps: 1,
            lr: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.95),
            ema_momentum: 0.9999,
            seed,
            t_buckets: 20,
            record_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.k_timesteps == 0 || self.t_buckets == 0 {
            return Err(Error::InvalidConfig(
                "steps, batch_size, k_timesteps, t_buckets must be positive".into(),
            ));
        }
        self.pm.validate()
    }
}

/// Per-t loss statistics: bucketed running sums of the v-space loss.
#[derive(Debug, Clone, Default)]
pub struct PerTStats {
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl PerTStats {
    pub(crate) fn new(buckets: usize) -> PerTStats {
        PerTStats {
            sums: vec![0.0; buckets],
            counts: vec![0; buckets],
        }
    }

    pub(crate) fn add(&mut self, bucket: usize, v: f64) {
        self.sums[bucket] += v;
        self.counts[bucket] += 1;
    }

    pub fn mean(&self, bucket: usize) -> Option<f64> {
        (self.counts[bucket] > 0).then(|| self.sums[bucket] / self.counts[bucket] as f64)
    }
}

#[derive(Debug)]
pub struct TrainHeadOutput {
    pub params: HeadParams,
    pub ema: EmaState,
    /// `(step, own-space loss)` every step.
    pub loss_curve: Vec<(usize, f64)>,
    /// `(step, v-space loss)` every step.
    pub v_loss_curve: Vec<(usize, f64)>,
    /// `(step, t_bucket, mean v-space mse)` rows emitted every
    /// `record_every` steps.
    pub hist_rows: Vec<(usize, usize, f64)>,
    /// v-space loss per t-bucket accumulated over the final fifth of
    /// training.
    pub final_per_t: PerTStats,
}

fn bucket_of(t: usize, t_max: usize, buckets: usize) -> usize {
    ((t * buckets) / (t_max + 1)).min(buckets - 1)
}

/// Minibatch training of the head alone on a toy token distribution,
/// unconditional (z = 0).
pub fn train_head(cfg: &TrainHeadConfig, dataset: &ToyDataset) -> Result<TrainHeadOutput> {
    cfg.validate()?;
    if dataset.token_dim() != cfg.head.token_dim {
        return Err(Error::DimensionMismatch {
            left: dataset.token_dim(),
            right: cfg.head.token_dim,
        });
    }
    let schedule = Schedule::make(cfg.schedule, cfg.head.t_max)?;
    let mut init_rng = rng::stream(cfg.seed, Domain::Init, 0);
    let mut data_rng = rng::stream(cfg.seed, Domain::Dataset, 0);
    let mut t_rng = rng::stream(cfg.seed, Domain::Timestep, 0);
    let mut inject_rng = rng::stream(cfg.seed, Domain::Inject, 0);

    let mut params = HeadParams::init(cfg.head, &mut init_rng);
    let mut ema = EmaState::new(&params, cfg.ema_momentum)?;
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.betas, &shapes);

    let z = vec![0.0; cfg.head.width];
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut v_loss_curve = Vec::with_capacity(cfg.steps);
    let mut hist_rows = Vec::new();
    let mut window = PerTStats::new(cfg.t_buckets);
    let mut final_per_t = PerTStats::new(cfg.t_buckets);
    let final_cutoff = cfg.steps - cfg.steps / 5;

    for step in 0..cfg.steps {
        let mut grads = HeadGrads::zeros(&params);
        let mut loss = 0.0;
        let mut v_loss_val = 0.0;
        for _ in 0..cfg.batch_size {
            let token = dataset.sample_token(&mut data_rng);
            let samples: Vec<LossSample> = (0..cfg.k_timesteps)
                .map(|_| {
                    use rand::Rng;
                    use rand_distr::StandardNormal;
                    let t = t_rng.random_range(1..=cfg.head.t_max);
                    let eps = (0..cfg.head.token_dim)
                        .map(|_| t_rng.sample(StandardNormal))
                        .collect();
                    LossSample { t, eps }
                })
                .collect();
            let out = v_loss(
                &params,
                &cfg.param,
                &schedule,
                &token,
                &z,
                &samples,
                &cfg.pm,
                &mut inject_rng,
                Some(&mut grads),
            )?;
            loss += out.loss;
            v_loss_val += out.v_space_loss;
            for (t, v) in &out.per_sample_v {
                let b = bucket_of(*t, cfg.head.t_max, cfg.t_buckets);
                window.add(b, *v);
                if step >= final_cutoff {
                    final_per_t.add(b, *v);
                }
            }
        }
        loss /= cfg.batch_size as f64;
        v_loss_val /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        {
            let grad_tensors = grads.tensors();
            let mut param_tensors = params.tensors_mut();
            opt.update(&mut param_tensors, &grad_tensors);
        }
        ema.update(&params)?;
        loss_curve.push((step, loss));
        v_loss_curve.push((step, v_loss_val));
        if (step + 1) % cfg.record_every == 0 {
            for b in 0..cfg.t_buckets {
                if let Some(m) = window.mean(b) {
                    hist_rows.push((step + 1, b, m));
                }
            }
            window = PerTStats::new(cfg.t_buckets);
        }
    }

    Ok(TrainHeadOutput {
        params,
        ema,
        loss_curve,
        v_loss_curve,
        hist_rows,
        final_per_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_cfg() -> HeadConfig {
        HeadConfig {
            token_dim: 2,
            width: 8,
            depth: 2,
            t_max: 10,
            activation: Activation::Silu,
            ln_eps: 1e-6,
        }
    }

    fn rng_for(i: u64) -> ChaCha12Rng {
        stream(41, Domain::Init, i)
    }

    #[test]
    fn zero_params_with_bias_are_constant() {
        let mut p = HeadParams::zeros(small_cfg());
        p.set_out_proj_bias(&[0.7, -0.3]);
        let pm = PrecisionModel::exact();
        let mut rng = rng_for(0);
        for _ in 0..10 {
            let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let z: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            let t = rng.random_range(0..=10);
            let out = p.forward(&x, t, &z, &pm).unwrap();
            assert_eq!(out, vec![0.7, -0.3]);
        }
    }

    #[test]
    fn freshly_initialized_head_is_affine_in_input() {
        // AdaLN projections and second linears start at zero, so blocks are
        // identities and the whole map is affine in x_t; the identity
        // activation hook keeps it affine regardless of c.
        let mut cfg = small_cfg();
        cfg.activation = Activation::Identity;
        let mut rng = rng_for(1);
        let p = HeadParams::init(cfg, &mut rng);
        let pm = PrecisionModel::exact();
        let z: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let x1: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let x2: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let f = |x: &[f64]| p.forward(x, 3, &z, &pm).unwrap();
        let f0 = f(&[0.0, 0.0]);
        let fx1 = f(&x1);
        let fx2 = f(&x2);
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let fsum = f(&sum);
        for i in 0..2 {
            let lin = fx1[i] + fx2[i] - f0[i];
            assert_relative_eq!(fsum[i], lin, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = rng_for(2);
        let p = HeadParams::init(small_cfg(), &mut rng);
        let pm = PrecisionModel::bf16();
        let x = vec![0.3, -0.4];
        let z = vec![0.1; 8];
        let a = p.forward(&x, 5, &z, &pm).unwrap();
        let b = p.forward(&x, 5, &z, &pm).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    fn loss_of(p: &HeadParams, x: &[f64], t: usize, z: &[f64], dv_seed: &[f64]) -> f64 {
        // Scalar probe loss: dot(dv_seed, forward(x)).
        let pm = PrecisionModel::exact();
        let out = p.forward(x, t, z, &pm).unwrap();
        out.iter().zip(dv_seed).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng_for(3);
        let mut p = HeadParams::init(small_cfg(), &mut rng);
        // Perturb the zero-initialized tensors so every path carries signal.
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                if *v == 0.0 {
                    *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let x = vec![0.4, -0.8];
        let z: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let t = 4;
        let dv = vec![0.7, -0.2];

        let (_, trace) = p.forward_traced(&x, t, &z).unwrap();
        let mut grads = HeadGrads::zeros(&p);
        let dz = p.backward(&trace, &dv, &mut grads);

        let h = 1e-5;
        let n_tensors = p.tensors().len();
        for ti in 0..n_tensors {
            let len = p.tensors()[ti].len();
            let step_by = (len / 5).max(1);
            for idx in (0..len).step_by(step_by) {
                let orig = p.tensors()[ti][idx];
                p.tensors_mut()[ti][idx] = orig + h;
                let lp = loss_of(&p, &x, t, &z, &dv);
                p.tensors_mut()[ti][idx] = orig - h;
                let lm = loss_of(&p, &x, t, &z, &dv);
                p.tensors_mut()[ti][idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.tensors()[ti][idx];
                let rel = (an - fd).abs() / (an.abs() + 1e-8);
                assert!(rel < 1e-4, "tensor {ti} idx {idx}: analytic {an} fd {fd}");
            }
        }
        // dz against finite differences.
        let mut z_pert = z.clone();
        for i in 0..z.len() {
            z_pert[i] = z[i] + h;
            let lp = loss_of(&p, &x, t, &z_pert, &dv);
            z_pert[i] = z[i] - h;
            let lm = loss_of(&p, &x, t, &z_pert, &dv);
            z_pert[i] = z[i];
            let fd = (lp - lm) / (2.0 * h);
            let rel = (dz[i] - fd).abs() / (dz[i].abs() + 1e-8);
            assert!(rel < 1e-4, "dz[{i}]: analytic {} fd {fd}", dz[i]);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = rng_for(4);
        let p = HeadParams::init(small_cfg(), &mut rng);
        let (_, trace) = p.forward_traced(&[0.2, 0.3], 2, &vec![0.5; 8]).unwrap();
        let mut grads = HeadGrads::zeros(&p);
        let dz = p.backward(&trace, &[0.0, 0.0], &mut grads);
        assert!(dz.iter().all(|v| *v == 0.0));
        for t in grads.tensors() {
            assert!(t.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn out_proj_bias_grad_equals_upstream() {
        let mut rng = rng_for(5);
        let p = HeadParams::init(small_cfg(), &mut rng);
        let (_, trace) = p.forward_traced(&[0.2, 0.3], 2, &vec![0.5; 8]).unwrap();
        let mut grads = HeadGrads::zeros(&p);
        let dv = vec![0.9, -1.7];
        p.backward(&trace, &dv, &mut grads);
        assert_eq!(grads.out_proj.db, dv);
    }

    #[test]
    fn perfect_head_has_zero_loss() {
        // Zero head with the output bias forced to the target of one fixed
        // (t, eps) sample.
        let cfg = small_cfg();
        let s = Schedule::make(ScheduleKind::Cosine, cfg.t_max).unwrap();
        let x = vec![0.3, -0.5];
        let eps = vec![1.1, 0.4];
        let t = 6;
        let tgt = target(&Parameterization::VPred, &s, t, &x, &eps).unwrap();
        let mut p = HeadParams::zeros(cfg);
        p.set_out_proj_bias(&tgt.values);
        let pm = PrecisionModel::exact();
        let mut inj = pm.stream(0);
        let out = v_loss(
            &p,
            &Parameterization::VPred,
            &s,
            &x,
            &vec![0.0; cfg.width],
            &[LossSample { t, eps }],
            &pm,
            &mut inj,
            None,
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.v_space_loss, 0.0);
    }

    #[test]
    fn zero_head_loss_is_target_variance() {
        // A head outputting zero pays E[v^2] = 1 for unit-variance data.
        let cfg = small_cfg();
        let s = Schedule::make(ScheduleKind::Cosine, cfg.t_max).unwrap();
        let p = HeadParams::zeros(cfg);
        let pm = PrecisionModel::exact();
        let mut inj = pm.stream(0);
        let mut rng = rng_for(6);
        let mut total = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let t = rng.random_range(1..=cfg.t_max);
            let out = v_loss(
                &p,
                &Parameterization::VPred,
                &s,
                &x,
                &vec![0.0; cfg.width],
                &[LossSample { t, eps }],
                &pm,
                &mut inj,
                None,
            )
            .unwrap();
            total += out.loss;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean loss {mean}");
    }

    #[test]
    fn empty_sample_list_is_rejected() {
        let cfg = small_cfg();
        let s = Schedule::make(ScheduleKind::Cosine, cfg.t_max).unwrap();
        let p = HeadParams::zeros(cfg);
        let pm = PrecisionModel::exact();
        let mut inj = pm.stream(0);
        assert!(matches!(
            v_loss(
                &p,
                &Parameterization::VPred,
                &s,
                &[0.0, 0.0],
                &vec![0.0; cfg.width],
                &[],
                &pm,
                &mut inj,
                None
            ),
            Err(Error::EmptySamples)
        ));
    }

    #[test]
    fn ema_fixed_point_and_momentum_zero() {
        let mut rng = rng_for(7);
        let live = HeadParams::init(small_cfg(), &mut rng);
        let mut ema = EmaState::new(&live, 0.9999).unwrap();
        ema.update(&live).unwrap();
        for (s, l) in ema.shadow.tensors().iter().zip(live.tensors()) {
            for (a, b) in s.iter().zip(l.iter()) {
                assert_eq!(a, b);
            }
        }
        let other = HeadParams::init(small_cfg(), &mut rng);
        let mut ema0 = EmaState::new(&live, 0.0).unwrap();
        ema0.update(&other).unwrap();
        for (s, l) in ema0.shadow.tensors().iter().zip(other.tensors()) {
            for (a, b) in s.iter().zip(l.iter()) {
                assert_eq!(a, b);
            }
        }
        assert!(EmaState::new(&live, 1.0).is_err());
    }

    #[test]
    fn ema_closed_form_after_n_updates() {
        let mut rng = rng_for(8);
        let live = HeadParams::init(small_cfg(), &mut rng);
        let mut start = live.clone();
        for t in start.tensors_mut() {
            for v in t.iter_mut() {
                *v += 1.0;
            }
        }
        let m: f64 = 0.9999;
        let n = 1000;
        let mut ema = EmaState {
            shadow: start.clone(),
            momentum: m,
        };
        for _ in 0..n {
            ema.update(&live).unwrap();
        }
        let decay = m.powi(n);
        for ((s, l), s0) in ema
            .shadow
            .tensors()
            .iter()
            .zip(live.tensors())
            .zip(start.tensors())
        {
            for ((a, b), c) in s.iter().zip(l.iter()).zip(c0_iter(s0)) {
                let expect = b + (c - b) * decay;
                assert!((a - expect).abs() < 1e-10, "{a} vs {expect}");
            }
        }
    }

    fn c0_iter(v: &Vec<f64>) -> impl Iterator<Item = f64> + '_ {
        v.iter().copied()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let dataset = ToyDataset::new(crate::toyspace::ToySpec::gmm2d_default()).unwrap();
        let mut cfg = TrainHeadConfig::defaults(
            HeadConfig {
                token_dim: 2,
                width: 32,
                depth: 2,
                t_max: 100,
                activation: Activation::Silu,
                ln_eps: 1e-6,
            },
            11,
        );
        cfg.steps = 400;
        cfg.batch_size = 16;
        cfg.record_every = 50;
        let out1 = train_head(&cfg, &dataset).unwrap();
        let out2 = train_head(&cfg, &dataset).unwrap();
        // Bit-identical reruns.
        for ((s1, l1), (s2, l2)) in out1.loss_curve.iter().zip(&out2.loss_curve) {
            assert_eq!(s1, s2);
            assert_eq!(l1.to_bits(), l2.to_bits());
        }
        // Smoothed loss decreases.
        let window = 100;
        let head_mean: f64 = out1.loss_curve[..window].iter().map(|(_, l)| l).sum::<f64>()
            / window as f64;
        let tail_mean: f64 = out1.loss_curve[cfg.steps - window..]
            .iter()
            .map(|(_, l)| l)
            .sum::<f64>()
            / window as f64;
        assert!(
            tail_mean < head_mean,
            "loss did not decrease: {head_mean} -> {tail_mean}"
        );
    }
}
