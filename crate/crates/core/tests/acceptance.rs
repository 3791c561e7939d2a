//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Criteria 8 and 9 train full-size agents (ten 100k-step runs); expect
//! one to two hours on a single core.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fuselane_core::control::{map_action, pid_step, PidGains, PidState};
use fuselane_core::env::LaneEnv;
use fuselane_core::fusion::mirror_transition;
use fuselane_core::geom::Vec2;
use fuselane_core::harness::{
    ablation_run, evaluate, median_rmse, metrics_m, new_trainer, px_offsets_to_m, random_policy_return, record_rollout,
    run_trial, train_run, variant_config, write_ablation_csv, write_metrics_csv, AblationRow, Driver, RunConfig, Variant,
    ABLATION, CHECKPOINT, METRICS, TRAINING_LOG,
};
use fuselane_core::linalg::Mat;
use fuselane_core::ppo::{compute_gae, gradcheck};
use fuselane_core::reward::{m_to_px, px_to_m, total_reward, RewardParams};
use fuselane_core::semantics::{attention_with_weights, lora_attention, EncoderConfig, EncoderWeights, Vocab};
use fuselane_core::sim::{generate_track, step_dynamics, TrackProfile, TrackSpec, VehicleParams, VehicleState};
use fuselane_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Writes past the test harness's output capture so the report always shows.
fn say(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let e = start.elapsed();
    (e < limit, format!("{:.2}s/{}s", e.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- 1

/// Proximity term, cases tried in order.
fn naive_lidar(d: f64) -> f64 {
    if (4.0..=8.0).contains(&d) {
        -5.0 * (8.0 - d) / (8.0 - 4.0)
    } else if d < 2.8 {
        -10.0 + 2.0 * d
    } else if (3.0..=4.0).contains(&d) || (8.0..=10.0).contains(&d) {
        5.0
    } else {
        0.0
    }
}

/// Reward written out term by term with the published constants. Returns
/// (reward, terminated).
fn naive_reward(dx: f64, d: f64, v: f64) -> (f64, bool) {
    if dx.abs() > 85.0 || d < 2.0 {
        return (-3.0, true);
    }
    let lane = 1.0 - dx.abs() / 100.0;
    let speed = -((v - 20.0) / 20.0).powi(2);
    let center = -2.5 * (dx.abs() / 80.0).powi(2);
    let r = 0.3 * lane + 0.3 * naive_lidar(d) + 0.2 * speed + 0.2 * center;
    (r.clamp(-1.0, 1.0), false)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let p = RewardParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut mismatched_flags = 0usize;
    let mut check = |dx: f64, d: f64, v: f64| {
        let got = total_reward(dx, d, v, 0, &p);
        let (want, term) = naive_reward(dx, d, v);
        worst = worst.max((got.reward - want).abs());
        if got.terminated != term {
            mismatched_flags += 1;
        }
    };
    for _ in 0..100_000 {
        check(rng.random_range(-120.0..120.0), rng.random_range(0.0..14.0), rng.random_range(0.0..50.0));
    }
    let boundaries = [2.0, 2.8, 3.0, 4.0, 8.0, 10.0];
    for &b in &boundaries {
        for d in [b, b - 1e-9, b + 1e-9] {
            for dx in [-85.0, -40.0, 0.0, 12.5, 85.0, 85.000001] {
                check(dx, d, 18.0);
            }
        }
    }
    let mut boundary_terms = 0.0f64;
    for &b in &boundaries[1..] {
        for d in [b, b - 1e-9, b + 1e-9] {
            boundary_terms = boundary_terms.max((total_reward(0.0, d, 20.0, 0, &p).r_lidar - naive_lidar(d)).abs());
        }
    }
    let spot9 = total_reward(0.0, 9.0, 20.0, 0, &p).r_lidar;
    let spot2 = total_reward(0.0, 2.0, 20.0, 0, &p).r_lidar;
    let (fast, t) = within(start, Duration::from_secs(5));
    let pass = worst <= 1e-12 && mismatched_flags == 0 && boundary_terms <= 1e-12 && spot9 == 5.0 && spot2 == -6.0 && fast;
    outcome(
        pass,
        format!("max |diff| {worst:.1e}, flag mismatches {mismatched_flags}, boundary diff {boundary_terms:.1e}, r_lidar(9)={spot9}, r_lidar(2)={spot2}, {t}"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bound_violations = 0usize;
    let mut asymmetric = 0usize;
    for _ in 0..1000 {
        let g = PidGains {
            kp: rng.random_range(0.0..3.0),
            ki: rng.random_range(0.0..2.0),
            kd: rng.random_range(0.0..1.0),
            i_max: rng.random_range(0.1..3.0),
            u_max: rng.random_range(0.1..2.0),
            dt: rng.random_range(0.01..0.2),
        };
        let scale = rng.random_range(0.01..50.0);
        let (mut s, mut sn) = (PidState::default(), PidState::default());
        for _ in 0..1000 {
            let e = rng.random_range(-scale..scale);
            let (a, u) = pid_step(&s, e, &g).unwrap();
            let (b, un) = pid_step(&sn, -e, &g).unwrap();
            if a.integral.abs() > g.i_max || u.abs() > g.u_max {
                bound_violations += 1;
            }
            if un != -u || b.integral != -a.integral {
                asymmetric += 1;
            }
            s = a;
            sn = b;
        }
    }
    let g = PidGains { kp: 0.5, ki: 0.1, kd: 0.2, i_max: 1.0, u_max: 1.0, dt: 0.1 };
    let (_, u) = pid_step(&PidState::default(), 1.0, &g).unwrap();
    let (fast, t) = within(start, Duration::from_secs(5));
    outcome(
        bound_violations == 0 && asymmetric == 0 && u == 1.0 && fast,
        format!("10^6 steps: bound violations {bound_violations}, asymmetric steps {asymmetric}; saturation example u={u}; {t}"),
    )
}

// ---------------------------------------------------------------- 3

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}`, summed directly and cut at
/// the first terminal transition.
fn gae_series(r: &[f64], v: &[f64], done: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|k| {
            let next = if k + 1 < n { v[k + 1] } else { last };
            let live = if done[k] { 0.0 } else { 1.0 };
            r[k] + gamma * next * live - v[k]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            for k in t..n {
                a += (gamma * lambda).powi((k - t) as i32) * delta[k];
                if done[k] {
                    break;
                }
            }
            a
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let gamma = rng.random_range(0.8..1.0);
        let lambda = rng.random_range(0.8..1.0);
        let r: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(-10.0..10.0)).collect();
        let done: Vec<bool> = (0..50).map(|_| rng.random_bool(0.05)).collect();
        let last = rng.random_range(-10.0..10.0);
        let (adv, ret) = compute_gae(&r, &v, &done, last, gamma, lambda);
        let want = gae_series(&r, &v, &done, last, gamma, lambda);
        for t in 0..50 {
            worst = worst.max((adv[t] - want[t]).abs()).max((ret[t] - (want[t] + v[t])).abs());
        }
    }
    let (fast, t) = within(start, Duration::from_secs(5));
    outcome(worst < 1e-10 && fast, format!("max abs error {worst:.2e}; {t}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let start = Instant::now();
    match gradcheck(4, 10, 4, 1e-5) {
        Ok(rep) => {
            let (fast, t) = within(start, Duration::from_secs(60));
            outcome(
                rep.max_rel_error < 1e-4 && fast,
                format!("{} params, 10 batches, max rel error {:.2e} ({}[{}]); {t}", rep.params, rep.max_rel_error, rep.worst_tensor, rep.worst_index),
            )
        }
        Err(e) => outcome(false, format!("gradcheck failed: {e}")),
    }
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.sim.pool_size = 4;
    let mut env = LaneEnv::from_config(cfg.env_config(), 5).unwrap();
    let buf = record_rollout(&mut env, None, 600).unwrap();
    let involution_ok = buf.iter().all(|t| {
        let m = mirror_transition(t, None).unwrap();
        m.action == [-t.action[0], t.action[1]] && m.reward == t.reward && mirror_transition(&m, None).unwrap() == *t
    });

    let p = RewardParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reward_equal = (0..10_000).all(|_| {
        let (dx, d, v) = (rng.random_range(-100.0..100.0), rng.random_range(0.0..14.0), rng.random_range(0.0..50.0));
        total_reward(dx, d, v, 0, &p) == total_reward(-dx, d, v, 0, &p)
    });

    let vp = VehicleParams::default();
    let tracks = [TrackSpec::straight(400.0, 5.0).unwrap(), generate_track(4, TrackProfile::Curves), generate_track(9, TrackProfile::Mixed)];
    let mut worst = 0.0f64;
    for (k, track) in tracks.iter().enumerate() {
        let world_m = track.mirrored();
        let h = track.heading_at(10.0);
        let mut a = VehicleState::on_track(track, track.point_at(10.0) + Vec2::from_angle(h).right() * 0.3, h, 3.0);
        let mut b = a.mirrored();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + k as u64);
        for _ in 0..500 {
            let a1 = rng.random_range(-0.3..0.3) - 0.2 * a.lateral_offset - 0.5 * a.heading_error;
            let a2: f64 = rng.random_range(-0.5..0.5);
            let cmd = map_action(a1, a2, vp.max_steering_angle, vp.v_max);
            let cmd_m = map_action(-a1, a2, vp.max_steering_angle, vp.v_max);
            a = step_dynamics(&a, track, cmd.steering_cmd, cmd.target_speed_cmd, vp.dt, &vp).unwrap();
            b = step_dynamics(&b, &world_m, cmd_m.steering_cmd, cmd_m.target_speed_cmd, vp.dt, &vp).unwrap();
            let am = a.mirrored();
            worst = worst
                .max((am.position - b.position).norm())
                .max((am.heading - b.heading).abs())
                .max((am.lateral_offset - b.lateral_offset).abs())
                .max((am.speed - b.speed).abs());
        }
    }
    let (fast, t) = within(start, Duration::from_secs(10));
    outcome(
        involution_ok && reward_equal && worst < 1e-9 && fast,
        format!("involution {involution_ok} on {} transitions, reward-equal {reward_equal}, dynamics max diff {worst:.1e}; {t}", buf.len()),
    )
}

// ---------------------------------------------------------------- 6

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let vocab = Vocab::default().len();
    let zero_b = EncoderWeights::new(vocab, &EncoderConfig::default()).unwrap();
    let lora = EncoderWeights::new(vocab, &EncoderConfig { lora_b_std: 0.5, ..EncoderConfig::default() }).unwrap();
    let d = zero_b.d();
    let r = zero_b.config.lora_rank;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = true;
    let mut softmax_err = 0.0f64;
    for n in 1..=12 {
        let x = random_mat(n, d, &mut rng).scale(2.0);
        for block in [&zero_b.query_self, &zero_b.cross, &zero_b.text_self] {
            exact &= lora_attention(&x, block, true).unwrap() == lora_attention(&x, block, false).unwrap();
        }
        let xkv = random_mat(1 + n % 7, d, &mut rng).scale(3.0);
        for block in [&lora.query_self, &lora.cross, &lora.text_self] {
            for use_lora in [false, true] {
                let (_, p) = attention_with_weights(&x, &xkv, block, use_lora).unwrap();
                for i in 0..p.rows {
                    softmax_err = softmax_err.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    let ranks: Vec<usize> = [&lora.query_self, &lora.cross, &lora.text_self]
        .iter()
        .flat_map(|b| [b.lora_delta_q().rank(1e-10), b.lora_delta_k().rank(1e-10)])
        .collect();
    let max_rank = ranks.iter().copied().max().unwrap_or(0);
    let (fast, t) = within(start, Duration::from_secs(5));
    outcome(
        exact && softmax_err <= 1e-12 && max_rank <= r && fast,
        format!("zero-B exact {exact}, softmax row error {softmax_err:.1e}, correction ranks {ranks:?} <= {r}; {t}"),
    )
}

// ---------------------------------------------------------------- 7

/// Checks `nrmse == rmse / 5` on every data row of an emitted metrics file.
fn metrics_file_consistent(path: &Path) -> (bool, usize) {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut rows = 0;
    let mut ok = !text.is_empty();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (rmse, nrmse): (f64, f64) = match (f[4].parse(), f[6].parse()) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return (false, rows),
        };
        ok &= (nrmse - rmse / 5.0).abs() <= 1e-12;
        rows += 1;
    }
    (ok, rows)
}

fn criterion_7(metrics_csv: Option<&Path>) -> Outcome {
    let m = metrics_m(&[0.1; 37]).unwrap();
    let constant_ok = (m.rmse - 0.1).abs() < 1e-12 && m.std.abs() < 1e-12 && (m.nrmse - 0.02).abs() < 1e-12;
    let scale = px_to_m(235.0);
    let scale_vec = px_offsets_to_m(&[235.0, -235.0]);
    let scale_ok = scale == 5.0 && scale_vec == vec![5.0, -5.0] && m_to_px(5.0) == 235.0;
    let (file_ok, rows) = match metrics_csv {
        Some(p) => metrics_file_consistent(p),
        None => (false, 0),
    };
    outcome(
        constant_ok && scale_ok && file_ok,
        format!("constant 0.1 -> ({}, {}, {}), 235 px -> {scale} m, nRMSE = RMSE/5 on {rows} emitted rows: {file_ok}", m.rmse, m.std, m.nrmse),
    )
}

// ---------------------------------------------------------------- 8

struct Criterion8 {
    outcome: Outcome,
    row: Option<AblationRow>,
    metrics_csv: Option<PathBuf>,
}

fn criterion_8(base: &RunConfig) -> Criterion8 {
    let cfg = variant_config(base, Variant::Full, 0);
    let env_cfg = cfg.env_config();
    let random = random_policy_return(&env_cfg, &cfg.eval).unwrap();
    let total_updates = cfg.ppo.total_steps.div_ceil(cfg.ppo.rollout_steps as u64);
    let mut episodes: Vec<f64> = Vec::new();
    let start = Instant::now();
    let trained = train_run(&cfg, new_trainer(&cfg, None).unwrap(), |tr, _, _| {
        let u = tr.updates;
        eprintln!("[acceptance] full/seed_0 update {u}/{total_updates} return {:.1} ({:.0}s)", tr.log.last().map_or(f64::NAN, |r| r.mean_return), start.elapsed().as_secs_f64());
        if u + 5 > total_updates {
            let frozen = tr.net.frozen();
            let rec = run_trial(&env_cfg, &cfg.eval, u as usize, Driver::Policy(&frozen), Some(&tr.env.state.normalizer))?;
            episodes.push(rec.episode_return);
        }
        Ok(())
    });
    let wall = start.elapsed();
    let tr = match trained {
        Ok(tr) => tr,
        Err(e) => return Criterion8 { outcome: outcome(false, format!("training aborted: {e}")), row: None, metrics_csv: None },
    };
    let (records, summary) = evaluate(&tr.net, &env_cfg, &cfg.eval, Some(&tr.env.state.normalizer)).unwrap();
    let metrics_csv = cfg.output_dir.join(METRICS);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&metrics_csv).unwrap());
    write_metrics_csv(&mut f, &records, &summary).unwrap();
    drop(f);

    let last5 = episodes.iter().sum::<f64>() / episodes.len().max(1) as f64;
    let a = episodes.len() == 5 && last5 >= 3.0 * random;
    let b = summary.pooled.rmse < 0.5 && summary.pooled.nrmse < 0.1;
    let timed = wall < Duration::from_secs(3600);
    let row = AblationRow { variant: Variant::Full, seed: 0, final_return: tr.log.last().map_or(f64::NAN, |r| r.mean_return), summary: Some(summary.clone()) };
    Criterion8 {
        outcome: outcome(
            a && b && timed,
            format!(
                "{} steps in {:.0}s; last-5 eval return {last5:.1} vs random {random:.2} (x3 = {:.2}); eval RMSE {:.4} m, nRMSE {:.4} over {} trials, {} failures; no divergence",
                tr.steps,
                wall.as_secs_f64(),
                3.0 * random,
                summary.pooled.rmse,
                summary.pooled.nrmse,
                summary.n_trials,
                summary.failures
            ),
        ),
        row: Some(row),
        metrics_csv: Some(metrics_csv),
    }
}

// ---------------------------------------------------------------- 9

fn criterion_9(base: &RunConfig, full_seed0: Option<AblationRow>) -> Outcome {
    let mut rows: Vec<AblationRow> = Vec::new();
    for variant in [Variant::Full, Variant::NoSemanticNoPid] {
        for seed in 0..5u64 {
            if variant == Variant::Full && seed == 0 {
                if let Some(r) = &full_seed0 {
                    rows.push(r.clone());
                    continue;
                }
            }
            let start = Instant::now();
            let row = ablation_run(base, variant, seed, |tr, _, _| {
                eprintln!("[acceptance] {}/seed_{seed} update {} ({:.0}s)", variant.name(), tr.updates, start.elapsed().as_secs_f64());
                Ok(())
            })
            .unwrap();
            rows.push(row);
        }
    }
    let path = base.output_dir.join(ABLATION);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    write_ablation_csv(&mut f, &rows).unwrap();
    drop(f);
    let full = median_rmse(&rows, Variant::Full).unwrap();
    let bare = median_rmse(&rows, Variant::NoSemanticNoPid).unwrap();
    let per = |v: Variant| -> Vec<String> {
        rows.iter().filter(|r| r.variant == v).map(|r| r.summary.as_ref().map_or("diverged".into(), |s| format!("{:.3}", s.pooled.rmse))).collect()
    };
    outcome(
        full < bare,
        format!("median RMSE full {full:.4} m {:?} vs no_semantic_no_pid {bare:.4} m {:?}; {}", per(Variant::Full), per(Variant::NoSemanticNoPid), path.display()),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10(root: &Path) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 10;
    cfg.perception.height = 32;
    cfg.perception.width = 32;
    cfg.sim.lidar.rays = 30;
    cfg.sim.pool_size = 2;
    cfg.reward.max_steps = 120;
    cfg.ppo.rollout_steps = 256;
    cfg.ppo.epochs = 2;
    cfg.ppo.total_steps = 768;
    let dirs = [root.join("determinism_a"), root.join("determinism_b")];
    let run = |dir: &Path| -> Result<()> {
        let mut c = cfg.clone();
        c.output_dir = dir.to_path_buf();
        train_run(&c, new_trainer(&c, None)?, |_, _, _| Ok(()))?;
        Ok(())
    };
    for d in &dirs {
        if let Err(e) = run(d) {
            return outcome(false, format!("training failed: {e}"));
        }
    }
    let same = |f: &str| std::fs::read(dirs[0].join(f)).ok().zip(std::fs::read(dirs[1].join(f)).ok()).is_some_and(|(a, b)| a == b);
    let (log, ck) = (same(TRAINING_LOG), same(CHECKPOINT));
    outcome(log && ck, format!("{TRAINING_LOG} identical: {log}, {CHECKPOINT} identical: {ck}"))
}

#[test]
fn acceptance() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let mut base = RunConfig::default();
    base.output_dir = root.join("ablation");

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        say(&format!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((n, name, o));
    };
    report(1, "reward oracle", criterion_1());
    report(2, "PID contract", criterion_2());
    report(3, "GAE series", criterion_3());
    report(4, "gradient check", criterion_4());
    report(5, "mirror augmentation", criterion_5());
    report(6, "LoRA attention", criterion_6());
    report(10, "determinism", criterion_10(&root));
    let c8 = criterion_8(&base);
    report(7, "metrics", criterion_7(c8.metrics_csv.as_deref()));
    report(8, "end-to-end training", c8.outcome);
    report(9, "ablation direction", criterion_9(&base, c8.row));

    results.sort_by_key(|r| r.0);
    say("---- acceptance summary ----");
    for (n, name, o) in &results {
        say(&format!("criterion {n:>2} {} {name}", if o.pass { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
