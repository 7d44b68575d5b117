//! The studies behind the `vdiff` CLI, as pure functions of their configs.
//!
//! Every command is deterministic given `(config, seed)`: reruns produce
//! byte-identical primary output. Primary results are CSV with
//! `# config_hash=` and `# command=` header comment lines, or JSON reports
//! with one `{suite, max_abs_err, pass}` entry per check. All randomness
//! flows through [`crate::rng::stream`].

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::argen::{
    generate, train_argen, ArgenModel, ConditionerConfig, ConditionerParams, GenerateConfig,
    StageConfig, TrainArgenConfig,
};
use crate::error::{Error, Result};
use crate::head::{
    train_head, Activation, EmaState, HeadConfig, HeadParams, TrainHeadConfig, TrainHeadOutput,
};
use crate::param::{target, Parameterization, TargetVector};
use crate::precision::{PrecisionMode, PrecisionModel, BF16_DELTA};
use crate::rng::{self, Domain};
use crate::sampler::{
    ddim_step, sample_trajectory, step_list_uniform_t, CfgDenoiser, GuidanceConfig, GuidanceSpace,
    OracleDenoiser, SamplerKind,
};
use crate::schedule::{Schedule, ScheduleKind};
use crate::toyspace::{hist_kl, mmd_rbf, ToyDataset, ToySpec};

/// SHA-256 of the canonically serialized config; recorded in every output.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Output of one command: named files, the first of which is the primary
/// result, plus the config-echo JSON.
pub struct CommandOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub echo: String,
}

impl CommandOutput {
    pub fn primary(&self) -> &[u8] {
        &self.files[0].1
    }

    /// Write all files plus `config_echo.json` into a directory.
    pub fn write_to(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, data) in &self.files {
            std::fs::write(dir.join(name), data)?;
        }
        std::fs::write(dir.join("config_echo.json"), self.echo.as_bytes())?;
        Ok(())
    }
}

fn echo_json<T: Serialize>(command: &str, cfg: &T) -> String {
    let body = serde_json::json!({
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
    });
    serde_json::to_string_pretty(&body).expect("echo serializes")
}

fn csv_header<T: Serialize>(command: &str, cfg: &T, columns: &str) -> String {
    format!(
        "# config_hash={}\n# command={}\n{}\n",
        config_hash(cfg),
        command,
        columns
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub suites: Vec<SuiteResult>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.suites.iter().all(|s| s.pass)
    }
}

/// Build a parameterization from flat config fields.
pub fn parameterization_from(kind: &str, psi_offset: f64, r: f64) -> Result<Parameterization> {
    match kind {
        "eps-pred" => Ok(Parameterization::EpsPred),
        "x-pred" => Ok(Parameterization::XPred),
        "v-pred" => Ok(Parameterization::VPred),
        "custom" => Ok(Parameterization::Custom { psi_offset, r }),
        other => Err(Error::InvalidConfig(format!(
            "unknown parameterization kind '{other}'"
        ))),
    }
}

fn dataset_from(name: &str) -> Result<ToyDataset> {
    let spec = match name {
        "gmm2d" => ToySpec::gmm2d_default(),
        "standard-normal" => ToySpec::standard_normal(),
        "checkerboard" => ToySpec::checkerboard_default(),
        "correlated-grid" => ToySpec::correlated_default(),
        other => {
            return Err(Error::InvalidConfig(format!("unknown dataset '{other}'")));
        }
    };
    ToyDataset::new(spec)
}

// ---------------------------------------------------------------------------
// error-sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorSweepConfig {
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub t_stride: usize,
    pub delta_max: f64,
    pub samples_per_t: usize,
    /// ψ−φ offsets scanned as custom parameterizations, on top of the named
    /// kinds.
    pub psi_offsets: Vec<f64>,
}

impl Default for ErrorSweepConfig {
    fn default() -> Self {
        ErrorSweepConfig {
            seed: 0,
            schedule: ScheduleKind::Cosine,
            t_max: 1000,
            t_stride: 25,
            delta_max: BF16_DELTA,
            samples_per_t: 20_000,
            psi_offsets: vec![
                std::f64::consts::FRAC_PI_8,
                std::f64::consts::FRAC_PI_4,
                3.0 * std::f64::consts::FRAC_PI_8,
            ],
        }
    }
}

/// Measured per-unit-step squared error in prediction space, for one
/// parameterization and precision mode, against the closed form
/// `δ²/sin²(ψ_t−φ_t)`.
pub fn measured_unit_step_error(
    s: &Schedule,
    p: &Parameterization,
    pm: &PrecisionModel,
    t: usize,
    samples: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<f64> {
    let mut inject_rng = pm.stream(t as u64);
    let (r, gap) = p.scale_and_gap(s, t)?;
    let mut sum = 0.0;
    let mut buf = [0.0f64];
    for _ in 0..samples {
        let x: f64 = rng.sample(StandardNormal);
        let eps: f64 = rng.sample(StandardNormal);
        let u = target(p, s, t, &[x], &[eps])?.values[0];
        buf[0] = u;
        let injected = pm.inject(&mut inject_rng, &buf);
        let e = (injected[0] - u) / (r * gap);
        sum += e * e;
    }
    Ok(sum / samples as f64)
}

pub fn run_error_sweep(cfg: &ErrorSweepConfig) -> Result<CommandOutput> {
    if cfg.t_stride == 0 || cfg.samples_per_t == 0 {
        return Err(Error::InvalidConfig(
            "t_stride and samples_per_t must be positive".into(),
        ));
    }
    let s = Schedule::make(cfg.schedule, cfg.t_max)?;
    let mut params: Vec<(String, Parameterization)> = vec![
        ("eps-pred".into(), Parameterization::EpsPred),
        ("v-pred".into(), Parameterization::VPred),
        ("x-pred".into(), Parameterization::XPred),
    ];
    for off in &cfg.psi_offsets {
        params.push((
            format!("custom-{off:.4}"),
            Parameterization::Custom {
                psi_offset: *off,
                r: 1.0,
            },
        ));
    }
    let modes = [
        ("exact", PrecisionModel::exact()),
        (
            "fixed-delta",
            PrecisionModel::fixed_delta(cfg.delta_max, cfg.seed)?,
        ),
        ("bf16-round", PrecisionModel::bf16()),
    ];

    let mut csv = csv_header(
        "error-sweep",
        cfg,
        "t,alpha_bar,theory,measured,param_kind,mode",
    );
    let mut stream_idx = 0u64;
    let mut t = cfg.t_stride.max(1);
    while t <= cfg.t_max {
        let alpha = s.alpha_bar(t)?;
        for (tag, p) in &params {
            let (_, gap) = p.scale_and_gap(&s, t)?;
            for (mode_tag, pm) in &modes {
                let theory = match pm.mode {
                    PrecisionMode::Exact => 0.0,
                    _ => cfg.delta_max * cfg.delta_max / (gap * gap),
                };
                let mut rng = rng::stream(cfg.seed, Domain::Experiment, stream_idx);
                stream_idx += 1;
                let measured =
                    measured_unit_step_error(&s, p, pm, t, cfg.samples_per_t, &mut rng)?;
                csv.push_str(&format!(
                    "{t},{alpha},{theory},{measured},{tag},{mode_tag}\n"
                ));
            }
            // Per-step error std: predicted vs Monte Carlo on the adjacent
            // DDIM step.
            let pm = PrecisionModel::fixed_delta(cfg.delta_max, cfg.seed)?;
            let theory_std = {
                let sin_dphi = s.sin_phase(t - 1)? * s.cos_phase(t)?
                    - s.cos_phase(t - 1)? * s.sin_phase(t)?;
                (sin_dphi / gap).abs() * cfg.delta_max
            };
            let mut rng = rng::stream(cfg.seed, Domain::Experiment, stream_idx);
            stream_idx += 1;
            let mut inject_rng = pm.stream(1_000_000 + t as u64);
            let mut exact_rng = PrecisionModel::exact().stream(0);
            let mut sum = 0.0;
            let n_std = (cfg.samples_per_t / 10).max(100);
            for _ in 0..n_std {
                let x: f64 = rng.sample(StandardNormal);
                let eps: f64 = rng.sample(StandardNormal);
                let x_t = s.forward_diffuse(t, &[x], &[eps])?;
                let u = target(p, &s, t, &[x], &[eps])?;
                let exact = ddim_step(&s, t, t - 1, &x_t, &u, &PrecisionModel::exact(), &mut exact_rng)?;
                let noisy = ddim_step(&s, t, t - 1, &x_t, &u, &pm, &mut inject_rng)?;
                let d = noisy[0] - exact[0];
                sum += d * d;
            }
            let measured_std = (sum / n_std as f64).sqrt();
            csv.push_str(&format!(
                "{t},{alpha},{theory_std},{measured_std},{tag},step-std\n"
            ));
        }
        t += cfg.t_stride;
    }
    Ok(CommandOutput {
        files: vec![("error_sweep.csv".into(), csv.into_bytes())],
        echo: echo_json("error-sweep", cfg),
    })
}

// ---------------------------------------------------------------------------
// ddim-verify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdimVerifyConfig {
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub n_samples: usize,
    pub n_trajectories: usize,
    pub trajectory_steps: usize,
}

impl Default for DdimVerifyConfig {
    fn default() -> Self {
        DdimVerifyConfig {
            seed: 0,
            schedule: ScheduleKind::Cosine,
            t_max: 1000,
            n_samples: 10_000,
            n_trajectories: 8,
            trajectory_steps: 100,
        }
    }
}

pub fn ddim_verify_report(cfg: &DdimVerifyConfig) -> Result<Report> {
    let s = Schedule::make(cfg.schedule, cfg.t_max)?;
    let exact = PrecisionModel::exact();
    let mut suites = Vec::new();

    // 1. The general step at psi = pi/2 against the classic eps-pred DDIM
    //    update, with the (1+delta) factor folded into the model output.
    {
        let mut rng = rng::stream(cfg.seed, Domain::Experiment, 0);
        let mut worst = 0.0f64;
        for _ in 0..cfg.n_samples {
            let t_from = rng.random_range(2..=cfg.t_max);
            let t_to = rng.random_range(1..t_from);
            let x_t: f64 = rng.sample(StandardNormal);
            let e_theta: f64 = rng.sample(StandardNormal);
            let delta: f64 = rng.random_range(-0.01..0.01);
            let scaled = e_theta * (1.0 + delta);
            let u = TargetVector {
                values: vec![scaled],
                step: t_from,
                kind: Parameterization::EpsPred,
            };
            let got = ddim_step(&s, t_from, t_to, &[x_t], &u, &exact, &mut rng)?[0];
            let (af, at) = (s.alpha_bar(t_from)?, s.alpha_bar(t_to)?);
            let reference = at.sqrt() * ((x_t - (1.0 - af).sqrt() * scaled) / af.sqrt())
                + (1.0 - at).sqrt() * scaled;
            // Near the floor the update legitimately reaches ~1e4, so the
            // deviation is normalized by the reference magnitude.
            worst = worst.max((got - reference).abs() / reference.abs().max(1.0));
        }
        suites.push(SuiteResult {
            suite: "reduction-eps-form".into(),
            max_abs_err: worst,
            pass: worst < 1e-12,
        });
    }

    // 2. Round-trip recovery across kinds and random custom offsets.
    {
        let mut rng = rng::stream(cfg.seed, Domain::Experiment, 1);
        let mut worst = 0.0f64;
        for i in 0..cfg.n_samples {
            let p = match i % 4 {
                0 => Parameterization::EpsPred,
                1 => Parameterization::VPred,
                2 => Parameterization::XPred,
                _ => Parameterization::Custom {
                    psi_offset: rng.random_range(0.11..std::f64::consts::FRAC_PI_2),
                    r: rng.random_range(0.5..2.0),
                },
            };
            let t = rng.random_range(1..=cfg.t_max);
            // The 1e-12 budget applies on the well-conditioned region; the
            // conditioning loss below |sin(psi-phi)| = 0.1 is exactly what
            // the error theory quantifies.
            match p.scale_and_gap(&s, t) {
                Ok((_, gap)) if gap.abs() >= 0.1 => {}
                _ => continue,
            }
            let x: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let x_t = s.forward_diffuse(t, &[x], &[eps])?;
            let u = target(&p, &s, t, &[x], &[eps])?;
            let (x_hat, eps_hat) = crate::param::recover_x_eps(&p, &s, t, &x_t, &u)?;
            // Tracked as relative error against unit scale.
            worst = worst.max((x_hat[0] - x).abs() / x.abs().max(1.0));
            worst = worst.max((eps_hat[0] - eps).abs() / eps.abs().max(1.0));
        }
        suites.push(SuiteResult {
            suite: "roundtrip-recovery".into(),
            max_abs_err: worst,
            pass: worst < 1e-12,
        });
    }

    // 3. Oracle-driven trajectories land on the true token.
    {
        let mut worst = 0.0f64;
        for i in 0..cfg.n_trajectories {
            let mut rng = rng::stream(cfg.seed, Domain::Noise, i as u64);
            let x_true: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let kind = if i % 2 == 0 {
                Parameterization::VPred
            } else {
                Parameterization::EpsPred
            };
            let mut oracle = OracleDenoiser {
                x_true: x_true.clone(),
                kind,
                schedule: &s,
            };
            let steps = step_list_uniform_t(cfg.t_max, cfg.trajectory_steps);
            let init: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let traj =
                sample_trajectory(&mut oracle, &s, SamplerKind::Ddim, &exact, &steps, &init, &mut rng)?;
            for (a, b) in traj.final_state().iter().zip(&x_true) {
                worst = worst.max((a - b).abs());
            }
        }
        suites.push(SuiteResult {
            suite: "oracle-trajectory".into(),
            max_abs_err: worst,
            pass: worst < 1e-9,
        });
    }

    // 4. Identity conversion is exact.
    {
        let mut rng = rng::stream(cfg.seed, Domain::Experiment, 2);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let t = rng.random_range(1..=cfg.t_max);
            let x: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            let x_t = s.forward_diffuse(t, &[x], &[eps])?;
            let u = target(&Parameterization::VPred, &s, t, &[x], &[eps])?;
            let same = crate::param::convert(&Parameterization::VPred, &s, t, &x_t, &u)?;
            worst = worst.max((same.values[0] - u.values[0]).abs());
        }
        suites.push(SuiteResult {
            suite: "identity-convert".into(),
            max_abs_err: worst,
            pass: worst == 0.0,
        });
    }

    Ok(Report {
        command: "ddim-verify".into(),
        config_hash: config_hash(cfg),
        suites,
    })
}

pub fn run_ddim_verify(cfg: &DdimVerifyConfig) -> Result<CommandOutput> {
    let report = ddim_verify_report(cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    Ok(CommandOutput {
        files: vec![("ddim_verify.json".into(), json.into_bytes())],
        echo: echo_json("ddim-verify", cfg),
    })
}

// ---------------------------------------------------------------------------
// cfg-check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfgCheckConfig {
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub n_seeds: usize,
    pub omegas: Vec<f64>,
    pub trajectory_steps: usize,
}

impl Default for CfgCheckConfig {
    fn default() -> Self {
        CfgCheckConfig {
            seed: 0,
            schedule: ScheduleKind::Cosine,
            t_max: 1000,
            n_seeds: 20,
            omegas: vec![0.0, 1.0, 3.0, 10.0],
            trajectory_steps: 100,
        }
    }
}

/// Maximum deviation between v-space- and ε-space-guided DDIM trajectories
/// run from identical noise, for one guidance scale.
pub fn cfg_space_deviation(
    s: &Schedule,
    omega: f64,
    pm: &PrecisionModel,
    trajectory_steps: usize,
    root_seed: u64,
    stream: u64,
) -> Result<f64> {
    let steps = step_list_uniform_t(s.t_max(), trajectory_steps);
    let mut worst = 0.0f64;
    let mut trajs = Vec::new();
    for space in [GuidanceSpace::VSpace, GuidanceSpace::EpsSpace] {
        let mut rng = rng::stream(root_seed, Domain::Noise, stream);
        let x_cond: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let x_uncond: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let init: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let mut guided = CfgDenoiser {
            cond: OracleDenoiser {
                x_true: x_cond,
                kind: Parameterization::VPred,
                schedule: s,
            },
            uncond: OracleDenoiser {
                x_true: x_uncond,
                kind: Parameterization::VPred,
                schedule: s,
            },
            guidance: GuidanceConfig { omega, space },
            schedule: s,
        };
        trajs.push(sample_trajectory(
            &mut guided,
            s,
            SamplerKind::Ddim,
            pm,
            &steps,
            &init,
            &mut rng,
        )?);
    }
    for (sv, se) in trajs[0].states.iter().zip(&trajs[1].states) {
        for (a, b) in sv.iter().zip(se) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

pub fn cfg_check_report(cfg: &CfgCheckConfig) -> Result<Report> {
    let s = Schedule::make(cfg.schedule, cfg.t_max)?;
    let mut suites = Vec::new();
    for &omega in &cfg.omegas {
        let mut worst = 0.0f64;
        for seed_idx in 0..cfg.n_seeds {
            let dev = cfg_space_deviation(
                &s,
                omega,
                &PrecisionModel::exact(),
                cfg.trajectory_steps,
                cfg.seed,
                seed_idx as u64,
            )?;
            worst = worst.max(dev);
        }
        suites.push(SuiteResult {
            suite: format!("omega-{omega}-highprec"),
            max_abs_err: worst,
            pass: worst < 1e-9,
        });
        // bf16 deviation is reported, not asserted.
        let mut bf16_worst = 0.0f64;
        for seed_idx in 0..cfg.n_seeds.min(5) {
            let dev = cfg_space_deviation(
                &s,
                omega,
                &PrecisionModel::bf16(),
                cfg.trajectory_steps,
                cfg.seed,
                1000 + seed_idx as u64,
            )?;
            bf16_worst = bf16_worst.max(dev);
        }
        suites.push(SuiteResult {
            suite: format!("omega-{omega}-bf16-reported"),
            max_abs_err: bf16_worst,
            pass: true,
        });
    }
    Ok(Report {
        command: "cfg-check".into(),
        config_hash: config_hash(cfg),
        suites,
    })
}

pub fn run_cfg_check(cfg: &CfgCheckConfig) -> Result<CommandOutput> {
    let report = cfg_check_report(cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    Ok(CommandOutput {
        files: vec![("cfg_check.json".into(), json.into_bytes())],
        echo: echo_json("cfg-check", cfg),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header (shapes, config, step) + f32 little-endian blob.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"VDCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptHeader {
    pub step: u64,
    pub config: serde_json::Value,
    pub shapes: Vec<(String, usize)>,
}

pub fn save_checkpoint(
    path: &std::path::Path,
    config: serde_json::Value,
    step: u64,
    named: &[(String, &Vec<f64>)],
) -> Result<()> {
    let header = CkptHeader {
        step,
        config,
        shapes: named.iter().map(|(n, t)| (n.clone(), t.len())).collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, tensor) in named {
        for v in tensor.iter() {
            file.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(CkptHeader, Vec<(String, Vec<f64>)>)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: CkptHeader = serde_json::from_slice(&header_json)?;
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for (name, len) in &header.shapes {
        let mut buf = vec![0u8; len * 4];
        file.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name.clone(), values));
    }
    Ok((header, tensors))
}

fn fill_from_named(
    names: &[String],
    tensors: Vec<&mut Vec<f64>>,
    stored: &[(String, Vec<f64>)],
    prefix: &str,
) -> Result<()> {
    for (name, dst) in names.iter().zip(tensors) {
        let full = format!("{prefix}{name}");
        let src = stored
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
        if src.1.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {full} has {} values, expected {}",
                src.1.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&src.1);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArgenCkptConfig {
    conditioner: ConditionerConfig,
    head: HeadConfig,
    ema_momentum: f64,
    param: Parameterization,
    schedule: ScheduleKind,
    dataset: String,
}

pub fn save_argen_model(
    path: &std::path::Path,
    model: &ArgenModel,
    cond_cfg: &ConditionerConfig,
    head_cfg: &HeadConfig,
    param: &Parameterization,
    schedule: ScheduleKind,
    dataset: &str,
    step: u64,
) -> Result<()> {
    let cfg = ArgenCkptConfig {
        conditioner: *cond_cfg,
        head: *head_cfg,
        ema_momentum: model.ema.momentum,
        param: *param,
        schedule,
        dataset: dataset.to_string(),
    };
    let mut named: Vec<(String, &Vec<f64>)> = Vec::new();
    for (name, tensor) in ConditionerParams::tensor_names(cond_cfg)
        .into_iter()
        .zip(model.conditioner.tensors())
    {
        named.push((format!("conditioner.{name}"), tensor));
    }
    for (name, tensor) in HeadParams::tensor_names(head_cfg)
        .into_iter()
        .zip(model.head.tensors())
    {
        named.push((format!("head.{name}"), tensor));
    }
    for (name, tensor) in HeadParams::tensor_names(head_cfg)
        .into_iter()
        .zip(model.ema.shadow.tensors())
    {
        named.push((format!("ema.{name}"), tensor));
    }
    save_checkpoint(path, serde_json::to_value(&cfg)?, step, &named)
}

pub struct LoadedArgen {
    pub model: ArgenModel,
    pub param: Parameterization,
    pub schedule: ScheduleKind,
    pub dataset: String,
}

pub fn load_argen_model(path: &std::path::Path) -> Result<LoadedArgen> {
    let (header, stored) = load_checkpoint(path)?;
    let cfg: ArgenCkptConfig = serde_json::from_value(header.config)?;
    let mut seed_rng = rng::stream(0, Domain::Init, 0);
    let mut conditioner = ConditionerParams::init(cfg.conditioner, &mut seed_rng);
    let mut head = HeadParams::zeros(cfg.head);
    fill_from_named(
        &ConditionerParams::tensor_names(&cfg.conditioner),
        conditioner.tensors_mut(),
        &stored,
        "conditioner.",
    )?;
    fill_from_named(
        &HeadParams::tensor_names(&cfg.head),
        head.tensors_mut(),
        &stored,
        "head.",
    )?;
    let mut ema = EmaState::new(&head, cfg.ema_momentum)?;
    fill_from_named(
        &HeadParams::tensor_names(&cfg.head),
        ema.shadow.tensors_mut(),
        &stored,
        "ema.",
    )?;
    Ok(LoadedArgen {
        model: ArgenModel {
            conditioner,
            head,
            ema,
        },
        param: cfg.param,
        schedule: cfg.schedule,
        dataset: cfg.dataset,
    })
}

// ---------------------------------------------------------------------------
// train-head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHeadCliConfig {
    pub seed: u64,
    pub dataset: String,
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub width: usize,
    pub depth: usize,
    pub param_kind: String,
    pub psi_offset: f64,
    pub param_r: f64,
    pub precision_mode: PrecisionMode,
    pub delta_max: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub k_timesteps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub t_buckets: usize,
    pub record_every: usize,
}

impl Default for TrainHeadCliConfig {
    fn default() -> Self {
        TrainHeadCliConfig {
            seed: 0,
            dataset: "gmm2d".into(),
            schedule: ScheduleKind::Cosine,
            t_max: 1000,
            width: 128,
            depth: 4,
            param_kind: "v-pred".into(),
            psi_offset: std::f64::consts::FRAC_PI_2,
            param_r: 1.0,
            precision_mode: PrecisionMode::Exact,
            delta_max: BF16_DELTA,
            steps: 20_000,
            batch_size: 64,
            k_timesteps: 1,
            lr: 1e-3,
            weight_decay: 1e-4,
            ema_momentum: 0.9999,
            t_buckets: 20,
            record_every: 200,
        }
    }
}

impl TrainHeadCliConfig {
    pub fn to_train_config(&self) -> Result<TrainHeadConfig> {
        let dataset = dataset_from(&self.dataset)?;
        let head = HeadConfig {
            token_dim: dataset.token_dim(),
            width: self.width,
            depth: self.depth,
            t_max: self.t_max,
            activation: Activation::Silu,
            ln_eps: 1e-6,
        };
        let mut cfg = TrainHeadConfig::defaults(head, self.seed);
        cfg.schedule = self.schedule;
        cfg.param = parameterization_from(&self.param_kind, self.psi_offset, self.param_r)?;
        cfg.pm = PrecisionModel {
            mode: self.precision_mode,
            delta_max: self.delta_max,
            seed: self.seed,
        };
        cfg.steps = self.steps;
        cfg.batch_size = self.batch_size;
        cfg.k_timesteps = self.k_timesteps;
        cfg.lr = self.lr;
        cfg.weight_decay = self.weight_decay;
        cfg.ema_momentum = self.ema_momentum;
        cfg.t_buckets = self.t_buckets;
        cfg.record_every = self.record_every;
        Ok(cfg)
    }
}

fn loss_csv<T: Serialize>(command: &str, cfg: &T, hist_rows: &[(usize, usize, f64)]) -> String {
    let mut csv = csv_header(command, cfg, "step,t_bucket,mse");
    for (step, bucket, mse) in hist_rows {
        csv.push_str(&format!("{step},{bucket},{mse}\n"));
    }
    csv
}

pub fn run_train_head(cfg: &TrainHeadCliConfig) -> Result<CommandOutput> {
    let train_cfg = cfg.to_train_config()?;
    let dataset = dataset_from(&cfg.dataset)?;
    let out: TrainHeadOutput = train_head(&train_cfg, &dataset)?;

    let csv = loss_csv("train-head", cfg, &out.hist_rows);

    let head_cfg = train_cfg.head;
    let tmp = tempfile_path()?;
    let named: Vec<(String, &Vec<f64>)> = HeadParams::tensor_names(&head_cfg)
        .into_iter()
        .zip(out.params.tensors())
        .map(|(n, t)| (format!("head.{n}"), t))
        .chain(
            HeadParams::tensor_names(&head_cfg)
                .into_iter()
                .zip(out.ema.shadow.tensors())
                .map(|(n, t)| (format!("ema.{n}"), t)),
        )
        .collect();
    save_checkpoint(
        &tmp,
        serde_json::to_value(cfg)?,
        train_cfg.steps as u64,
        &named,
    )?;
    let ckpt = std::fs::read(&tmp)?;
    let _ = std::fs::remove_file(&tmp);

    Ok(CommandOutput {
        files: vec![
            ("head_loss.csv".into(), csv.into_bytes()),
            ("head.ckpt".into(), ckpt),
        ],
        echo: echo_json("train-head", cfg),
    })
}

fn tempfile_path() -> Result<std::path::PathBuf> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir();
    let name = format!("vdiff-ckpt-{}-{n}.tmp", std::process::id());
    Ok(dir.join(name))
}

// ---------------------------------------------------------------------------
// train-argen
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainArgenCliConfig {
    pub seed: u64,
    pub dataset: String,
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub width: usize,
    pub head_depth: usize,
    pub conditioner_depth: usize,
    pub param_kind: String,
    pub psi_offset: f64,
    pub param_r: f64,
    pub precision_mode: PrecisionMode,
    pub delta_max: f64,
    /// 1 or 2; stage 2 uses the (0,1] mask schedule and K = 4.
    pub stage: u8,
    pub steps: usize,
    pub batch_grids: usize,
    pub uncond_prob: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub t_buckets: usize,
    pub record_every: usize,
    /// Checkpoint to resume from (the stage-1 → stage-2 chain).
    pub resume: String,
}

impl Default for TrainArgenCliConfig {
    fn default() -> Self {
        TrainArgenCliConfig {
            seed: 0,
            dataset: "correlated-grid".into(),
            schedule: ScheduleKind::Cosine,
            t_max: 1000,
            width: 128,
            head_depth: 4,
            conditioner_depth: 2,
            param_kind: "v-pred".into(),
            psi_offset: std::f64::consts::FRAC_PI_2,
            param_r: 1.0,
            precision_mode: PrecisionMode::Exact,
            delta_max: BF16_DELTA,
            stage: 1,
            steps: 3000,
            batch_grids: 16,
            uncond_prob: 0.1,
            lr: 1e-3,
            weight_decay: 1e-4,
            ema_momentum: 0.9999,
            t_buckets: 20,
            record_every: 100,
            resume: String::new(),
        }
    }
}

impl TrainArgenCliConfig {
    pub fn to_train_config(&self) -> Result<TrainArgenConfig> {
        let dataset = dataset_from(&self.dataset)?;
        let n_labels = dataset.n_labels().unwrap_or(0);
        let conditioner = ConditionerConfig {
            token_dim: dataset.token_dim(),
            width: self.width,
            depth: self.conditioner_depth,
            max_positions: dataset.grid_tokens(),
            n_labels,
            ln_eps: 1e-6,
        };
        let head = HeadConfig {
            token_dim: dataset.token_dim(),
            width: self.width,
            depth: self.head_depth,
            t_max: self.t_max,
            activation: Activation::Silu,
            ln_eps: 1e-6,
        };
        let stage = match self.stage {
            1 => StageConfig::stage1(self.steps),
            2 => StageConfig::stage2(self.steps),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "stage must be 1 or 2, got {other}"
                )));
            }
        };
        let mut cfg = TrainArgenConfig::defaults(conditioner, head, stage, self.seed);
        cfg.schedule = self.schedule;
        cfg.param = parameterization_from(&self.param_kind, self.psi_offset, self.param_r)?;
        cfg.pm = PrecisionModel {
            mode: self.precision_mode,
            delta_max: self.delta_max,
            seed: self.seed,
        };
        cfg.batch_grids = self.batch_grids;
        cfg.uncond_prob = self.uncond_prob;
        cfg.lr = self.lr;
        cfg.weight_decay = self.weight_decay;
        cfg.ema_momentum = self.ema_momentum;
        cfg.t_buckets = self.t_buckets;
        cfg.record_every = self.record_every;
        Ok(cfg)
    }
}

pub fn run_train_argen(cfg: &TrainArgenCliConfig) -> Result<CommandOutput> {
    let train_cfg = cfg.to_train_config()?;
    let dataset = dataset_from(&cfg.dataset)?;
    let resume = if cfg.resume.is_empty() {
        None
    } else {
        Some(load_argen_model(std::path::Path::new(&cfg.resume))?.model)
    };
    let stream_offset = (cfg.stage - 1) as u64;
    let out = train_argen(&train_cfg, &dataset, resume, stream_offset)?;

    let csv = loss_csv("train-argen", cfg, &out.hist_rows);

    let tmp = tempfile_path()?;
    save_argen_model(
        &tmp,
        &out.model,
        &train_cfg.conditioner,
        &train_cfg.head,
        &train_cfg.param,
        train_cfg.schedule,
        &cfg.dataset,
        train_cfg.stage.steps as u64,
    )?;
    let ckpt = std::fs::read(&tmp)?;
    let _ = std::fs::remove_file(&tmp);

    Ok(CommandOutput {
        files: vec![
            ("argen_loss.csv".into(), csv.into_bytes()),
            ("argen.ckpt".into(), ckpt),
        ],
        echo: echo_json("train-argen", cfg),
    })
}

// ---------------------------------------------------------------------------
// sample-eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleEvalConfig {
    pub seed: u64,
    /// Path to a train-argen checkpoint.
    pub checkpoint: String,
    pub omegas: Vec<f64>,
    pub grids_per_label: usize,
    pub tokens_per_step: usize,
    pub n_diffusion_steps: usize,
    pub use_ddim: bool,
    pub precision_mode: PrecisionMode,
    pub delta_max: f64,
    pub bins: usize,
    pub mmd_bandwidth: f64,
    pub reference_tokens: usize,
    pub dump_grids: bool,
}

impl Default for SampleEvalConfig {
    fn default() -> Self {
        SampleEvalConfig {
            seed: 0,
            checkpoint: String::new(),
            omegas: vec![1.0, 2.0, 3.0, 5.0, 10.0],
            grids_per_label: 64,
            tokens_per_step: 4,
            n_diffusion_steps: 100,
            use_ddim: false,
            precision_mode: PrecisionMode::Exact,
            delta_max: BF16_DELTA,
            bins: 32,
            mmd_bandwidth: 0.5,
            reference_tokens: 4000,
            dump_grids: false,
        }
    }
}

pub struct SweepRow {
    pub omega: f64,
    pub kl: f64,
    pub mmd: f64,
}

/// Generate grids per label over an ω sweep and score them against the
/// label's true distribution. KL is averaged over labels.
#[allow(clippy::too_many_arguments)]
pub fn cfg_sweep_eval(
    model: &ArgenModel,
    param: &Parameterization,
    schedule: &Schedule,
    dataset: &ToyDataset,
    omegas: &[f64],
    gen_base: &GenerateConfig,
    grids_per_label: usize,
    reference_tokens: usize,
    bins: usize,
    mmd_bandwidth: f64,
    seed: u64,
) -> Result<(Vec<SweepRow>, Vec<crate::argen::TokenGrid>)> {
    let n_labels = dataset
        .n_labels()
        .ok_or_else(|| Error::InvalidConfig("sweep needs a labeled dataset".into()))?;
    let n_tokens = dataset.grid_tokens();
    let d = dataset.token_dim();
    let denoiser = crate::argen::HeadDenoiser {
        head: &model.ema.shadow,
        kind: *param,
        forward_pm: gen_base.pm,
    };
    let mut rows = Vec::new();
    let mut kept_grids = Vec::new();
    for (oi, &omega) in omegas.iter().enumerate() {
        let mut kl_sum = 0.0;
        let mut mmd_sum = 0.0;
        for label in 0..n_labels {
            let mut gen_cfg = gen_base.clone();
            gen_cfg.label = Some(label);
            gen_cfg.guidance.omega = omega;
            let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(grids_per_label * n_tokens);
            for g in 0..grids_per_label {
                let stream_idx = ((oi * n_labels + label) * grids_per_label + g) as u64;
                let mut rng = rng::stream(seed, Domain::Noise, stream_idx);
                let grid = generate(
                    &model.conditioner,
                    &denoiser,
                    schedule,
                    n_tokens,
                    d,
                    &gen_cfg,
                    &mut rng,
                )?;
                for slot in 0..grid.n() {
                    tokens.push(grid.token(slot).to_vec());
                }
                if oi == 0 && g == 0 {
                    kept_grids.push(grid);
                }
            }
            let mut ref_rng = rng::stream(seed, Domain::Dataset, label as u64);
            let reference = dataset.sample_label_tokens(label, reference_tokens, &mut ref_rng)?;
            kl_sum += hist_kl(&tokens, &reference, bins)?;
            mmd_sum += mmd_rbf(&tokens, &reference, mmd_bandwidth)?;
        }
        rows.push(SweepRow {
            omega,
            kl: kl_sum / n_labels as f64,
            mmd: mmd_sum / n_labels as f64,
        });
    }
    Ok((rows, kept_grids))
}

pub fn run_sample_eval(cfg: &SampleEvalConfig) -> Result<CommandOutput> {
    if cfg.omegas.is_empty() {
        return Err(Error::InvalidConfig("omega sweep must not be empty".into()));
    }
    if cfg.checkpoint.is_empty() {
        return Err(Error::InvalidConfig(
            "sample-eval needs a checkpoint path".into(),
        ));
    }
    let loaded = load_argen_model(std::path::Path::new(&cfg.checkpoint))?;
    let dataset = dataset_from(&loaded.dataset)?;
    let schedule = Schedule::make(loaded.schedule, loaded.model.head.cfg.t_max)?;
    let gen_base = GenerateConfig {
        tokens_per_step: cfg.tokens_per_step,
        sampler: if cfg.use_ddim {
            SamplerKind::Ddim
        } else {
            SamplerKind::Ddpm {
                high_precision_cast: true,
            }
        },
        n_diffusion_steps: cfg.n_diffusion_steps,
        guidance: GuidanceConfig {
            omega: 1.0,
            space: GuidanceSpace::VSpace,
        },
        pm: PrecisionModel {
            mode: cfg.precision_mode,
            delta_max: cfg.delta_max,
            seed: cfg.seed,
        },
        label: None,
    };
    let (rows, grids) = cfg_sweep_eval(
        &loaded.model,
        &loaded.param,
        &schedule,
        &dataset,
        &cfg.omegas,
        &gen_base,
        cfg.grids_per_label,
        cfg.reference_tokens,
        cfg.bins,
        cfg.mmd_bandwidth,
        cfg.seed,
    )?;
    let mut csv = csv_header("sample-eval", cfg, "omega,metric,value,seed");
    for row in &rows {
        csv.push_str(&format!("{},hist_kl,{},{}\n", row.omega, row.kl, cfg.seed));
        csv.push_str(&format!("{},mmd_rbf,{},{}\n", row.omega, row.mmd, cfg.seed));
    }
    let mut files = vec![("sample_eval.csv".into(), csv.into_bytes())];
    if cfg.dump_grids {
        files.push((
            "grids.csv".into(),
            crate::argen::grids_to_csv(&grids).into_bytes(),
        ));
        let manifest = serde_json::json!({
            "n": dataset.grid_tokens(),
            "d": dataset.token_dim(),
            "label": serde_json::Value::Null,
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
        });
        files.push((
            "grids_manifest.json".into(),
            serde_json::to_vec_pretty(&manifest)?,
        ));
    }
    Ok(CommandOutput {
        files,
        echo: echo_json("sample-eval", cfg),
    })
}
