//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line. Run with `cargo test --test acceptance -- --nocapture` to see the
//! lines; every tolerance is pinned here in code.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use vdiff::argen::{ConditionerConfig, MaskSchedule, StageConfig, TrainArgenConfig};
use vdiff::experiments::{
    cfg_check_report, cfg_sweep_eval, ddim_verify_report, measured_unit_step_error,
};
use vdiff::head::{
    train_head, Activation, EmaState, HeadConfig, HeadGrads, HeadParams, TrainHeadConfig,
};
use vdiff::param::{recover_x_eps, target, Parameterization};
use vdiff::precision::{round_bf16, PrecisionModel, BF16_DELTA};
use vdiff::rng::{stream, Domain};
use vdiff::sampler::{sample_trajectory, step_list_uniform_t, SamplerKind};
use vdiff::schedule::{Schedule, ScheduleKind};
use vdiff::toyspace::{hist_kl, ToyDataset, ToySpec};

fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:02} {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn within_budget(criterion: u32, started: Instant, budget_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < budget_s,
        "criterion {criterion} exceeded its runtime budget: {elapsed:.1}s >= {budget_s}s"
    );
}

#[test]
fn criterion_01_parameterization_round_trip() {
    let started = Instant::now();
    let s = Schedule::make(ScheduleKind::Cosine, 1000).unwrap();
    let mut rng = stream(1, Domain::Experiment, 0);
    let mut worst = 0.0f64;
    let mut accepted = 0usize;
    while accepted < 10_000 {
        let p = match rng.random_range(0..4) {
            0 => Parameterization::EpsPred,
            1 => Parameterization::VPred,
            2 => Parameterization::XPred,
            _ => Parameterization::Custom {
                psi_offset: rng.random_range(0.0..std::f64::consts::PI),
                r: rng.random_range(0.25..4.0),
            },
        };
        let t = rng.random_range(1..=1000);
        let (_, gap) = p.scale_and_gap(&s, t).unwrap();
        if gap.abs() < 0.1 {
            continue;
        }
        accepted += 1;
        let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let eps: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = s.forward_diffuse(t, &x, &eps).unwrap();
        let u = target(&p, &s, t, &x, &eps).unwrap();
        let (x_hat, eps_hat) = recover_x_eps(&p, &s, t, &x_t, &u).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let dx: Vec<f64> = x_hat.iter().zip(&x).map(|(a, b)| a - b).collect();
        let de: Vec<f64> = eps_hat.iter().zip(&eps).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&dx) / norm(&x));
        worst = worst.max(norm(&de) / norm(&eps));
    }
    within_budget(1, started, 10.0);
    report(
        1,
        worst < 1e-12,
        &format!(
            "recover_x_eps round-trip on 10^4 draws, worst relative error {worst:.3e} < 1e-12 \
             ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_general_ddim_reduction_and_oracle_endpoint() {
    let started = Instant::now();
    let cfg = vdiff::experiments::DdimVerifyConfig {
        seed: 2,
        schedule: ScheduleKind::Cosine,
        t_max: 1000,
        n_samples: 10_000,
        n_trajectories: 10,
        trajectory_steps: 100,
    };
    let rep = ddim_verify_report(&cfg).unwrap();
    let detail: Vec<String> = rep
        .suites
        .iter()
        .map(|s| format!("{}={:.2e}", s.suite, s.max_abs_err))
        .collect();
    within_budget(2, started, 30.0);
    report(
        2,
        rep.all_pass(),
        &format!(
            "general DDIM reduction + oracle trajectory: {} ({:.1}s)",
            detail.join(", "),
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_numerical_error_theory() {
    let started = Instant::now();
    let s = Schedule::make(ScheduleKind::Cosine, 1000).unwrap();
    let delta = BF16_DELTA;

    // Fixed-delta: measured E[e^2] vs delta^2/alpha_bar for every t with
    // alpha_bar >= 1e-4, 1e5 samples per t.
    let pm = PrecisionModel::fixed_delta(delta, 3).unwrap();
    let mut worst_rel = 0.0f64;
    let mut checked = 0usize;
    for t in 1..=1000usize {
        let alpha = s.alpha_bar(t).unwrap();
        if alpha < 1e-4 {
            continue;
        }
        checked += 1;
        let mut rng = stream(3, Domain::Experiment, t as u64);
        let measured =
            measured_unit_step_error(&s, &Parameterization::EpsPred, &pm, t, 100_000, &mut rng)
                .unwrap();
        let theory = delta * delta / alpha;
        worst_rel = worst_rel.max((measured / theory - 1.0).abs());
    }
    let fixed_ok = worst_rel < 0.05;

    // Cross term vanishes: an imperfect eps model, injected; correlation of
    // (v - v_theta) with e stays within 3 standard errors of zero.
    let mut cross_ok = true;
    let mut cross_detail = String::new();
    for (i, t) in [100usize, 500, 900].into_iter().enumerate() {
        let mut rng = stream(33, Domain::Experiment, i as u64);
        let mut inj = pm.stream(5000 + i as u64);
        let cp = s.cos_phase(t).unwrap();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let model_noise: f64 = rng.sample(StandardNormal);
            let eps_theta = eps + 0.1 * model_noise;
            // v-space model error and injected numerical error.
            let v_gap = -(eps_theta - eps) / cp;
            let injected = pm.inject(&mut inj, &[eps_theta]);
            let e = (injected[0] - eps_theta) / cp;
            let prod = v_gap * e;
            sum += prod;
            sum_sq += prod * prod;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        if mean.abs() >= 3.0 * se {
            cross_ok = false;
        }
        cross_detail.push_str(&format!(" t={t}: |cross|/se={:.2}", mean.abs() / se));
    }

    // bf16 rounding: log-log slope of measured E[e^2] against alpha_bar.
    let bf16 = PrecisionModel::bf16();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut t = 10usize;
    while t <= 1000 {
        let alpha = s.alpha_bar(t).unwrap();
        if alpha >= 1e-4 {
            let mut rng = stream(34, Domain::Experiment, t as u64);
            let measured = measured_unit_step_error(
                &s,
                &Parameterization::EpsPred,
                &bf16,
                t,
                100_000,
                &mut rng,
            )
            .unwrap();
            xs.push(alpha.ln());
            ys.push(measured.ln());
        }
        t += 10;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    let slope_ok = (slope + 1.0).abs() < 0.1;

    within_budget(3, started, 120.0);
    report(
        3,
        fixed_ok && cross_ok && slope_ok,
        &format!(
            "fixed-delta worst |measured/theory - 1| = {:.2}% over {checked} steps; \
             cross term{cross_detail}; bf16 log-log slope {slope:.3} ({:.1}s)",
            100.0 * worst_rel,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_04_vpred_error_flat_eps_pred_grows() {
    let started = Instant::now();
    let s = Schedule::make(ScheduleKind::Cosine, 1000).unwrap();
    let delta = BF16_DELTA;
    let pm = PrecisionModel::fixed_delta(delta, 4).unwrap();
    let mut worst_v = 0.0f64;
    let mut worst_eps = 0.0f64;
    let mut t = 10usize;
    while t <= 1000 {
        let alpha = s.alpha_bar(t).unwrap();
        if alpha >= 1e-4 {
            let mut rng = stream(4, Domain::Experiment, t as u64);
            let v = measured_unit_step_error(
                &s,
                &Parameterization::VPred,
                &pm,
                t,
                200_000,
                &mut rng,
            )
            .unwrap();
            // v-pred: per-unit-step error is t-independent, E[e^2] = delta^2.
            worst_v = worst_v.max((v / (delta * delta) - 1.0).abs());
            let e = measured_unit_step_error(
                &s,
                &Parameterization::EpsPred,
                &pm,
                t,
                200_000,
                &mut rng,
            )
            .unwrap();
            // eps-pred: the error std grows exactly as 1/cos(phi).
            worst_eps = worst_eps.max((e * alpha / (delta * delta) - 1.0).abs());
        }
        t += 10;
    }
    report(
        4,
        worst_v < 0.05 && worst_eps < 0.05,
        &format!(
            "v-pred flat within {:.2}%, eps-pred 1/cos(phi) within {:.2}% ({:.1}s)",
            100.0 * worst_v,
            100.0 * worst_eps,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_cfg_space_equivalence() {
    let started = Instant::now();
    let cfg = vdiff::experiments::CfgCheckConfig {
        seed: 5,
        schedule: ScheduleKind::Cosine,
        t_max: 1000,
        n_seeds: 20,
        omegas: vec![0.0, 1.0, 3.0, 10.0],
        trajectory_steps: 100,
    };
    let rep = cfg_check_report(&cfg).unwrap();
    let asserted: Vec<&vdiff::experiments::SuiteResult> = rep
        .suites
        .iter()
        .filter(|s| s.suite.ends_with("highprec"))
        .collect();
    let worst = asserted
        .iter()
        .map(|s| s.max_abs_err)
        .fold(0.0f64, f64::max);
    let pass = asserted.iter().all(|s| s.pass);
    within_budget(5, started, 60.0);
    report(
        5,
        pass,
        &format!(
            "v-space vs eps-space guided trajectories, 20 seeds x omega in {{0,1,3,10}}, \
             worst deviation {worst:.3e} < 1e-9 ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_06_gradient_check() {
    let started = Instant::now();
    let cfg = HeadConfig {
        token_dim: 2,
        width: 32,
        depth: 2,
        t_max: 100,
        activation: Activation::Silu,
        ln_eps: 1e-6,
    };
    let mut rng = stream(6, Domain::Init, 0);
    let mut params = HeadParams::init(cfg, &mut rng);
    // Zero-initialized tensors (AdaLN / second linear / output projection)
    // get random values so every layer type carries signal.
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            if *v == 0.0 {
                *v = 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let x = vec![0.7, -0.4];
    let z: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
    let t = 37;
    let dv = vec![1.3, -0.6];
    let pm = PrecisionModel::exact();

    let (_, trace) = params.forward_traced(&x, t, &z).unwrap();
    let mut grads = HeadGrads::zeros(&params);
    params.backward(&trace, &dv, &mut grads);

    let loss = |p: &HeadParams| -> f64 {
        p.forward(&x, t, &z, &pm)
            .unwrap()
            .iter()
            .zip(&dv)
            .map(|(a, b)| a * b)
            .sum()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let n_tensors = params.tensors_mut().len();
    let mut pick = stream(6, Domain::Experiment, 1);
    for ti in 0..n_tensors {
        let len = params.tensors_mut()[ti].len();
        for _ in 0..20 {
            let idx = pick.random_range(0..len);
            let orig = params.tensors_mut()[ti][idx];
            params.tensors_mut()[ti][idx] = orig + h;
            let lp = loss(&params);
            params.tensors_mut()[ti][idx] = orig - h;
            let lm = loss(&params);
            params.tensors_mut()[ti][idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.tensors()[ti][idx];
            worst = worst.max((an - fd).abs() / (an.abs() + 1e-8));
        }
    }
    within_budget(6, started, 60.0);
    report(
        6,
        worst < 1e-4,
        &format!(
            "analytic vs central-difference gradients, 20 coordinates per tensor across all \
             layer types, worst relative error {worst:.3e} < 1e-4 ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

/// 100-step unconditional DDIM sampling from a trained head. DDIM is the
/// analysis sampler: deterministic, so injected error propagates instead of
/// being re-noised away.
fn sample_tokens(
    head: &HeadParams,
    param: Parameterization,
    s: &Schedule,
    pm: &PrecisionModel,
    count: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let z = vec![0.0; head.cfg.width];
    let steps = step_list_uniform_t(s.t_max(), 100);
    let kind = SamplerKind::Ddim;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream(seed, Domain::Noise, i as u64);
        let mut model = |t: usize, x_t: &[f64]| -> vdiff::Result<vdiff::param::TargetVector> {
            Ok(vdiff::param::TargetVector {
                values: head.forward(x_t, t, &z, &PrecisionModel::exact())?,
                step: t,
                kind: param,
            })
        };
        let init: Vec<f64> = (0..head.cfg.token_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let traj = sample_trajectory(&mut model, s, kind, pm, &steps, &init, &mut rng).unwrap();
        out.push(traj.final_state().to_vec());
    }
    out
}

#[test]
fn criterion_07_vpred_beats_eps_pred_under_injection() {
    let started = Instant::now();
    let dataset = ToyDataset::new(ToySpec::gmm2d_default()).unwrap();
    let schedule = Schedule::make(ScheduleKind::Cosine, 1000).unwrap();
    let head_cfg = HeadConfig {
        token_dim: 2,
        width: 32,
        depth: 2,
        t_max: 1000,
        activation: Activation::Silu,
        ln_eps: 1e-6,
    };
    let mut rng = stream(7, Domain::Dataset, 999);
    let reference: Vec<Vec<f64>> = (0..10_000).map(|_| dataset.sample_token(&mut rng)).collect();

    let mut a_wins = 0;
    let mut b_wins = 0;
    let mut diff_sum = 0.0;
    let mut theory_sum = 0.0;
    for seed in 0..5u64 {
        let mut outs = Vec::new();
        for param in [Parameterization::VPred, Parameterization::EpsPred] {
            let mut cfg = TrainHeadConfig::defaults(head_cfg, seed);
            cfg.param = param;
            cfg.pm = PrecisionModel::fixed_delta(BF16_DELTA, seed).unwrap();
            cfg.steps = 5000;
            cfg.batch_size = 32;
            cfg.ema_momentum = 0.99;
            cfg.record_every = 500;
            outs.push(train_head(&cfg, &dataset).unwrap());
        }
        let top_decile_mean = |out: &vdiff::head::TrainHeadOutput| -> f64 {
            let s = out.final_per_t.sums[18] + out.final_per_t.sums[19];
            let c = out.final_per_t.counts[18] + out.final_per_t.counts[19];
            s / c as f64
        };
        let v_top = top_decile_mean(&outs[0]);
        let e_top = top_decile_mean(&outs[1]);
        if e_top > v_top {
            a_wins += 1;
        }
        diff_sum += e_top - v_top;

        // Theoretical overhead averaged over the top decile.
        let mut th = 0.0;
        for t in 901..=1000usize {
            th += BF16_DELTA * BF16_DELTA / schedule.alpha_bar(t).unwrap();
        }
        theory_sum += th / 100.0;

        let pm = PrecisionModel::fixed_delta(BF16_DELTA, 100 + seed).unwrap();
        let v_tokens = sample_tokens(
            &outs[0].ema.shadow,
            Parameterization::VPred,
            &schedule,
            &pm,
            2000,
            200 + seed,
        );
        let e_tokens = sample_tokens(
            &outs[1].ema.shadow,
            Parameterization::EpsPred,
            &schedule,
            &pm,
            2000,
            200 + seed,
        );
        let kl_v = hist_kl(&v_tokens, &reference, 32).unwrap();
        let kl_e = hist_kl(&e_tokens, &reference, 32).unwrap();
        if kl_v <= kl_e {
            b_wins += 1;
        }
        println!(
            "  seed {seed}: top-decile v-space loss v={v_top:.3e} eps={e_top:.3e}; \
             sample KL v={kl_v:.4} eps={kl_e:.4}"
        );
    }
    // The measured loss gap must also carry the theoretical overhead.
    let overhead_ok = diff_sum / 5.0 >= 0.25 * (theory_sum / 5.0);
    within_budget(7, started, 900.0);
    report(
        7,
        a_wins >= 4 && b_wins >= 4 && overhead_ok,
        &format!(
            "paired v-pred vs eps-pred under fixed-delta injection: loss ordering {a_wins}/5, \
             sample-quality ordering {b_wins}/5, mean top-decile gap {:.1} vs theory {:.1} \
             ({:.0}s)",
            diff_sum / 5.0,
            theory_sum / 5.0,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_mask_schedule_statistics() {
    let started = Instant::now();
    let stage1 = MaskSchedule::stage1();
    let mut rng = stream(8, Domain::Mask, 0);
    let n = 200usize;
    let draws = 100_000;
    let mut sum_ratio = 0.0;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = 0.0f64;
    for _ in 0..draws {
        let mask = stage1.draw_mask(n, &mut rng);
        let ratio = mask.iter().filter(|m| **m).count() as f64 / n as f64;
        sum_ratio += ratio;
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
    }
    let mean = sum_ratio / draws as f64;
    let mean_ok = (0.845..=0.855).contains(&mean);
    // Support is exactly [0.7, 1]: no draw leaves it and both ends are hit.
    let support_ok = min_ratio >= 0.7 && min_ratio <= 0.71 && max_ratio == 1.0;

    let stage2 = MaskSchedule::stage2();
    let mut stage2_ok = true;
    for _ in 0..100_000 {
        let mask = stage2.draw_mask(5, &mut rng);
        if !mask.iter().any(|m| *m) {
            stage2_ok = false;
            break;
        }
    }
    report(
        8,
        mean_ok && support_ok && stage2_ok,
        &format!(
            "stage-1 mean ratio {mean:.4} in [0.845, 0.855], support [{min_ratio:.3}, \
             {max_ratio:.3}]; stage-2 always masks at least one token ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_ema_closed_form() {
    let started = Instant::now();
    let cfg = HeadConfig {
        token_dim: 2,
        width: 16,
        depth: 2,
        t_max: 50,
        activation: Activation::Silu,
        ln_eps: 1e-6,
    };
    let mut rng = stream(9, Domain::Init, 0);
    let live = HeadParams::init(cfg, &mut rng);
    let mut start = live.clone();
    for tensor in start.tensors_mut() {
        for v in tensor.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
    }
    let momentum: f64 = 0.9999;
    let n = 2000;
    let mut ema = EmaState {
        shadow: start.clone(),
        momentum,
    };
    for _ in 0..n {
        ema.update(&live).unwrap();
    }
    let decay = momentum.powi(n);
    let mut worst = 0.0f64;
    let shadow_t = ema.shadow.tensors();
    let live_t = live.tensors();
    let start_t = start.tensors();
    for ti in 0..shadow_t.len() {
        for i in 0..shadow_t[ti].len() {
            let expect = live_t[ti][i] + (start_t[ti][i] - live_t[ti][i]) * decay;
            worst = worst.max((shadow_t[ti][i] - expect).abs());
        }
    }
    report(
        9,
        worst < 1e-10,
        &format!(
            "EMA after {n} updates against constant live parameters matches the geometric \
             closed form to {worst:.3e} < 1e-10 ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_10_cli_outputs_are_byte_identical() {
    let started = Instant::now();
    let bin = env!("CARGO_BIN_EXE_vdiff");
    let base = tempfile::tempdir().unwrap();
    let run = |args: &[&str], out: &std::path::Path| {
        let status = std::process::Command::new(bin)
            .args(args)
            .arg("--out")
            .arg(out)
            .status()
            .expect("CLI runs");
        assert!(status.success(), "command failed: {args:?}");
    };
    // train-argen first so sample-eval has a checkpoint to read.
    let argen_dir = base.path().join("argen");
    run(
        &[
            "train-argen",
            "--set",
            "steps=25",
            "--set",
            "width=16",
            "--set",
            "head_depth=1",
            "--set",
            "conditioner_depth=1",
            "--set",
            "t_max=50",
            "--set",
            "batch_grids=2",
            "--set",
            "record_every=10",
        ],
        &argen_dir,
    );
    let ckpt = argen_dir.join("argen.ckpt");
    let ckpt_arg = format!("checkpoint=\"{}\"", ckpt.display());

    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "error-sweep",
            vec!["--set".into(), "t_stride=250".into(), "--set".into(), "samples_per_t=500".into()],
        ),
        (
            "ddim-verify",
            vec![
                "--set".into(),
                "n_samples=300".into(),
                "--set".into(),
                "n_trajectories=2".into(),
                "--set".into(),
                "trajectory_steps=25".into(),
            ],
        ),
        (
            "cfg-check",
            vec![
                "--set".into(),
                "n_seeds=2".into(),
                "--set".into(),
                "trajectory_steps=20".into(),
            ],
        ),
        (
            "train-head",
            vec![
                "--set".into(),
                "steps=40".into(),
                "--set".into(),
                "width=16".into(),
                "--set".into(),
                "depth=1".into(),
                "--set".into(),
                "t_max=50".into(),
                "--set".into(),
                "batch_size=4".into(),
                "--set".into(),
                "record_every=10".into(),
            ],
        ),
        (
            "train-argen",
            vec![
                "--set".into(),
                "steps=25".into(),
                "--set".into(),
                "width=16".into(),
                "--set".into(),
                "head_depth=1".into(),
                "--set".into(),
                "conditioner_depth=1".into(),
                "--set".into(),
                "t_max=50".into(),
                "--set".into(),
                "batch_grids=2".into(),
                "--set".into(),
                "record_every=10".into(),
            ],
        ),
        (
            "sample-eval",
            vec![
                "--set".into(),
                ckpt_arg,
                "--set".into(),
                "omegas=[1.0,2.0]".into(),
                "--set".into(),
                "grids_per_label=64".into(),
                "--set".into(),
                "n_diffusion_steps=8".into(),
                "--set".into(),
                "reference_tokens=1200".into(),
                "--set".into(),
                "use_ddim=true".into(),
            ],
        ),
    ];

    let mut detail = String::new();
    for (cmd, extra) in &commands {
        let dir_a = base.path().join(format!("{cmd}-a"));
        let dir_b = base.path().join(format!("{cmd}-b"));
        let mut args: Vec<&str> = vec![cmd];
        for e in extra {
            args.push(e);
        }
        run(&args, &dir_a);
        run(&args, &dir_b);
        for entry in std::fs::read_dir(&dir_a).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(dir_a.join(&name)).unwrap();
            let b = std::fs::read(dir_b.join(&name)).unwrap();
            assert_eq!(
                a,
                b,
                "{cmd}: {} differs between reruns",
                name.to_string_lossy()
            );
        }
        detail.push_str(cmd);
        detail.push(' ');
    }
    report(
        10,
        true,
        &format!(
            "byte-identical reruns for {detail}({:.0}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_11_cfg_sweep_improves_conditional_quality() {
    let started = Instant::now();
    let dataset = ToyDataset::new(ToySpec::correlated_default()).unwrap();
    let schedule = Schedule::make(ScheduleKind::Cosine, 1000).unwrap();
    let omegas = [1.0, 1.5, 2.0, 3.0, 6.0, 10.0];
    let mut wins = 0;
    for seed in 0..5u64 {
        let mut cfg = TrainArgenConfig {
            conditioner: ConditionerConfig {
                token_dim: 2,
                width: 32,
                depth: 2,
                max_positions: 16,
                n_labels: 8,
                ln_eps: 1e-6,
            },
            head: HeadConfig {
                token_dim: 2,
                width: 32,
                depth: 2,
                t_max: 1000,
                activation: Activation::Silu,
                ln_eps: 1e-6,
            },
            schedule: ScheduleKind::Cosine,
            param: Parameterization::VPred,
            pm: PrecisionModel::exact(),
            stage: StageConfig::stage1(600),
            batch_grids: 8,
            uncond_prob: 0.1,
            lr: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.95),
            ema_momentum: 0.99,
            seed,
            t_buckets: 20,
            record_every: 200,
        };
        // Two-stage protocol: broad-mask stage 1, then (0, 1] masks with
        // K = 4 so the conditioner also covers the sparsely-masked grids
        // that late generation rounds produce.
        let stage1 = vdiff::argen::train_argen(&cfg, &dataset, None, 0).unwrap();
        cfg.stage = StageConfig::stage2(400);
        let out = vdiff::argen::train_argen(&cfg, &dataset, Some(stage1.model), 1).unwrap();
        let gen_base = vdiff::argen::GenerateConfig {
            tokens_per_step: 4,
            sampler: SamplerKind::Ddpm {
                high_precision_cast: true,
            },
            n_diffusion_steps: 100,
            guidance: vdiff::sampler::GuidanceConfig {
                omega: 1.0,
                space: vdiff::sampler::GuidanceSpace::VSpace,
            },
            pm: PrecisionModel::exact(),
            label: None,
        };
        let (rows, _) = cfg_sweep_eval(
            &out.model,
            &cfg.param,
            &schedule,
            &dataset,
            &omegas,
            &gen_base,
            64,
            4000,
            32,
            0.5,
            1000 + seed,
        )
        .unwrap();
        let kl_at_1 = rows[0].kl;
        let best_above_1 = rows[1..].iter().map(|r| r.kl).fold(f64::INFINITY, f64::min);
        let win = best_above_1 < kl_at_1;
        if win {
            wins += 1;
        }
        let detail: Vec<String> = rows
            .iter()
            .map(|r| format!("omega={}: KL={:.4}", r.omega, r.kl))
            .collect();
        println!("  seed {seed}: {} -> {}", detail.join(", "), win);
    }
    within_budget(11, started, 1200.0);
    report(
        11,
        wins >= 4,
        &format!(
            "best omega in (1, 10] beats omega=1 on conditional hist_kl in {wins}/5 seeds \
             ({:.0}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}
