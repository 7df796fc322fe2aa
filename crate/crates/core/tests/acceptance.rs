//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! and then asserts. Run with `cargo test -p meerkat-core --test acceptance -- --nocapture`
//! to see the lines.

use std::time::{Duration, Instant};

use meerkat::data::make_blobs;
use meerkat::experiment::{ExperimentConfig, Setup};
use meerkat::fed::{
    client_round, communication_cost, full_parameter_cost, high_frequency_round, multi_step_round,
    reconstruct_virtual_path, run_federation, Federation, RoundConfig, RunOptions, StepContext, SyncMode,
};
use meerkat::gradip::{apply_vp, calibrate, classify, moving_average, Calibration, VpConfig};
use meerkat::masking::{build_mask, MaskKind};
use meerkat::model::{Batch, ModelSpec, ParamVector, Quadratic};
use meerkat::prng::{masked_gaussian, SeedSchedule};
use meerkat::zo::{projected_gradient, stability_bound, zo_gradient, ZoConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
    /// Output files of the check, for the determinism rerun.
    artifacts: Vec<String>,
}

fn report(id: u32, name: &str, limit: Duration, run: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = run();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let ok = out.pass && in_time;
    println!(
        "[{}] {id:>2} {name}: {} ({:.2?}, limit {:?})",
        if ok { "PASS" } else { "FAIL" },
        out.detail,
        elapsed,
        limit
    );
    assert!(out.pass, "criterion {id} ({name}) failed: {}", out.detail);
    assert!(in_time, "criterion {id} ({name}) exceeded {limit:?}");
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn masked(g: &[f64], support: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for &i in support {
        out[i] = g[i];
    }
    out
}

const MC_SAMPLES: u32 = 100_000;

fn unbiasedness() -> Outcome {
    let spec = ModelSpec::logistic(4, 4).unwrap();
    assert_eq!(spec.dim(), 20);
    let ds = make_blobs(4, 16, 4, 1.0, 11).unwrap();
    let batch = ds.batch(&(0..ds.len()).collect::<Vec<_>>()).unwrap();
    let w = spec.init_params(3);
    let w = ParamVector::new(w.iter().map(|x| x + 0.3).collect()).unwrap();
    let mask = build_mask(MaskKind::Random, &spec, &w, &[], 0.25, 5).unwrap();
    let exact = masked(&spec.grad(&w, &batch).unwrap(), mask.support());

    let schedule = SeedSchedule::new(21);
    let mut mean = [0.0; 20];
    for t in 1..=MC_SAMPLES {
        let z = masked_gaussian(schedule.derive_seed(1, t), &mask);
        let g = projected_gradient(&spec, &w, &z, 1e-4, &batch).unwrap();
        for (i, v) in zo_gradient(g, &z).iter() {
            mean[i] += v;
        }
    }
    let err: Vec<f64> = mean.iter().zip(&exact).map(|(m, e)| m / MC_SAMPLES as f64 - e).collect();
    let rel = norm(&err) / norm(&exact);
    Outcome {
        pass: rel < 0.03,
        detail: format!("relative bias {rel:.4} < 0.03 over {MC_SAMPLES} draws, support {}", mask.support_len()),
        artifacts: vec![],
    }
}

fn second_moment() -> Outcome {
    let spectrum: Vec<f64> = (0..20).map(|i| 0.1 + 0.9 * i as f64 / 19.0).collect();
    let minimizer: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
    let q = Quadratic::with_spectrum(&spectrum, 4, &minimizer).unwrap();
    let spec = ModelSpec::PlQuadratic(q);
    let w = ParamVector::zeros(20);
    let mask = build_mask(MaskKind::Random, &spec, &w, &[], 0.25, 5).unwrap();
    let s = mask.support_len() as f64;
    let batch = Batch::empty();
    let exact = masked(&spec.grad(&w, &batch).unwrap(), mask.support());
    let target = (s + 2.0) * norm(&exact).powi(2);

    let schedule = SeedSchedule::new(22);
    let mut acc = 0.0;
    for t in 1..=MC_SAMPLES {
        let z = masked_gaussian(schedule.derive_seed(1, t), &mask);
        let g = projected_gradient(&spec, &w, &z, 1e-3, &batch).unwrap();
        acc += zo_gradient(g, &z).norm_squared();
    }
    let rel = (acc / MC_SAMPLES as f64 - target).abs() / target;
    Outcome {
        pass: rel < 0.03,
        detail: format!("relative deviation {rel:.4} < 0.03 from (s+2)|m*grad|^2 with s={s}"),
        artifacts: vec![],
    }
}

fn logistic_config(seed: u64, local_steps: usize, rounds: usize, clients: usize, mode: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"version": 1, "master_seed": {seed},
            "model": {{"kind": "logistic", "features": 6, "classes": 3}},
            "data": {{"per_class": 120, "partition": {{"kind": "dirichlet", "alpha": 0.5}}}},
            "mask": {{"density": 0.3}},
            "round": {{"local_steps": {local_steps}, "rounds": {rounds}, "clients": {clients},
                       "mode": "{mode}", "eta": 0.01}}}}"#
    ))
    .unwrap()
}

fn federation_of(cfg: &ExperimentConfig) -> (Setup, Federation) {
    let setup = Setup::build(cfg).unwrap();
    let mask = setup.mask(cfg.mask.kind, cfg.mask.density).unwrap();
    let fed = setup.federation(cfg.round.to_round_config(), mask).unwrap();
    (setup, fed)
}

fn virtual_path() -> Outcome {
    let (mut runs, mut exact) = (0, 0);
    let mut artifacts = Vec::new();
    for t in [1usize, 10, 100] {
        for seed in 0..3 {
            let cfg = logistic_config(seed, t, 3, 10, "multi-step");
            let (_, mut fed) = federation_of(&cfg);
            let zo = fed.config.zo;
            for _ in 0..3 {
                let round = fed.server.round + 1;
                let global = fed.server.global_params.clone();
                let ctx = StepContext {
                    mask: &fed.server.mask,
                    schedule: &fed.server.schedule,
                    zo: &zo,
                };
                for c in fed.clients.iter_mut() {
                    let log = client_round(c, &global, round, t, ctx).unwrap();
                    let replay =
                        reconstruct_virtual_path(&global, &log, &fed.server.mask, &fed.server.schedule, zo.eta);
                    runs += 1;
                    exact += usize::from(replay.bit_eq(&c.params));
                }
                let steps = vec![t; fed.clients.len()];
                multi_step_round(&mut fed.server, &mut fed.clients, &steps, &zo, true).unwrap();
            }
            artifacts.push(format!("{:?}", fed.server.global_params.iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
        }
    }
    Outcome {
        pass: runs > 0 && exact == runs,
        detail: format!("{exact}/{runs} client paths replayed bit-for-bit, T in {{1, 10, 100}}, K=10"),
        artifacts,
    }
}

fn protocol_equivalence() -> Outcome {
    let mut artifacts = Vec::new();
    let mut identical = true;
    for seed in 0..3 {
        let (_, mut multi) = federation_of(&logistic_config(seed, 1, 50, 10, "multi-step"));
        let (_, mut high) = federation_of(&logistic_config(seed, 1, 50, 10, "high-frequency"));
        let zo = multi.config.zo;
        let mut trace = String::new();
        for _ in 0..50 {
            let steps = vec![1; multi.clients.len()];
            multi_step_round(&mut multi.server, &mut multi.clients, &steps, &zo, true).unwrap();
            high_frequency_round(&mut high.server, &mut high.clients, &zo).unwrap();
            identical &= multi.server.global_params.bit_eq(&high.server.global_params);
            trace.push_str(&format!("{}\n", multi.evaluator.loss(&multi.server.global_params).unwrap()));
        }
        artifacts.push(trace);
    }
    Outcome {
        pass: identical,
        detail: format!("multi-step T=1 and high-frequency global models identical over 50 rounds: {identical}"),
        artifacts,
    }
}

fn quadratic_config(seed: u64, dim: usize, condition: f64, het: f64, clients: usize, t: usize, rounds: usize, density: f64, eta: f64) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"version": 1, "master_seed": {seed},
            "model": {{"kind": "pl-quadratic", "dim": {dim}, "condition": {condition}, "heterogeneity": {het}}},
            "mask": {{"density": {density}}},
            "round": {{"local_steps": {t}, "rounds": {rounds}, "clients": {clients}, "eta": {eta}}}}}"#
    ))
    .unwrap()
}

fn csv(m: &meerkat::fed::MetricsSeries) -> String {
    m.to_csv_string()
}

fn pl_convergence() -> Outcome {
    let (dim, density) = (10, 0.5);
    let s = meerkat::masking::support_size(density, dim);
    let eta = 0.5 * stability_bound(1.0, s);
    let cfg = quadratic_config(1, dim, 10.0, 0.0, 4, 1, 5000, density, eta);
    let (_, mut fed) = federation_of(&cfg);
    let m = run_federation(&mut fed, &RunOptions::default()).unwrap();
    let gap = m.final_record().unwrap().gap.unwrap();
    let first = m.records.iter().position(|r| r.gap.unwrap() < 1e-6);
    Outcome {
        pass: gap < 1e-6,
        detail: format!(
            "final gap {gap:.3e} < 1e-6 after 5000 rounds (eta = {eta:.4}, half the bound; first below at round {first:?})"
        ),
        artifacts: vec![csv(&m)],
    }
}

const FLOOR_STEPS: usize = 20_000;

fn error_floor() -> Outcome {
    let ts = [100usize, 50, 10, 1];
    let mut per_t = vec![Vec::new(); ts.len()];
    let mut artifacts = Vec::new();
    for seed in 0..10 {
        for (i, &t) in ts.iter().enumerate() {
            let cfg = quadratic_config(seed, 10, 10.0, 1.0, 2, t, FLOOR_STEPS / t, 0.5, 0.02);
            let (_, mut fed) = federation_of(&cfg);
            let m = run_federation(&mut fed, &RunOptions::default()).unwrap();
            per_t[i].push(m.tail_mean_gap(0.2).unwrap());
            artifacts.push(csv(&m));
        }
    }
    let medians: Vec<f64> = per_t.into_iter().map(median).collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    Outcome {
        pass: monotone,
        detail: format!(
            "median tail gap for T = 100, 50, 10, 1: {} (non-increasing: {monotone})",
            medians.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>().join(", ")
        ),
        artifacts,
    }
}

/// Five IID clients followed by five single-label clients.
fn mixed_config(seed: u64, offset: f64, scale: f64, eta: f64, rounds: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"version": 1, "master_seed": {seed},
            "model": {{"kind": "logistic", "features": 10, "classes": 5}},
            "data": {{"per_class": 200, "spread": 0.5, "offset": {offset}, "scale": {scale},
                      "partition": {{"kind": "mixed", "iid_clients": 5}}}},
            "mask": {{"density": 1.0}},
            "round": {{"local_steps": 30, "rounds": {rounds}, "clients": 10, "eta": {eta}}},
            "vp": {{}}}}"#
    ))
    .unwrap()
}

const IID: std::ops::Range<usize> = 0..5;
const SINGLE_LABEL: std::ops::Range<usize> = 5..10;

fn calibration_of(seed: u64) -> Calibration {
    let cfg = mixed_config(seed, 30.0, 3.0, 0.03, 1);
    let (setup, fed) = federation_of(&cfg);
    for k in SINGLE_LABEL {
        assert_eq!(setup.label_histograms[k].iter().filter(|&&n| n > 0).count(), 1);
    }
    calibrate(&fed, &setup.pretrain_gradient().unwrap(), &cfg.vp.unwrap()).unwrap()
}

fn trajectories_csv(cal: &Calibration) -> Vec<String> {
    cal.trajectories
        .iter()
        .map(|t| {
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        })
        .collect()
}

fn gradip_phenomenon() -> Outcome {
    let (mut sl_ok, mut iid_ok) = (0, 0);
    let mut artifacts = Vec::new();
    for seed in 0..10 {
        let cal = calibration_of(seed);
        assert_eq!(cal.trajectories[0].len(), 100);
        let windowed = |k: usize| moving_average(&cal.trajectories[k].grad_norm, 10)[9..].to_vec();
        let peak = |s: &[f64]| s.iter().cloned().fold(0.0, f64::max);
        let decays = SINGLE_LABEL.clone().all(|k| {
            let s = windowed(k);
            let c = &cal.classes[k];
            *s.last().unwrap() < 0.1 * peak(&s) && c.later_avg.abs() < 0.25 * c.init_avg.abs()
        });
        let s = windowed(IID.start);
        let persists = s.iter().cloned().fold(f64::INFINITY, f64::min) > 0.3 * peak(&s);
        sl_ok += usize::from(decays);
        iid_ok += usize::from(persists);
        artifacts.extend(trajectories_csv(&cal));
    }
    Outcome {
        pass: sl_ok >= 8 && iid_ok >= 8,
        detail: format!("single-label decay in {sl_ok}/10 seeds, IID persistence in {iid_ok}/10 seeds (need 8)"),
        artifacts,
    }
}

fn classification() -> Outcome {
    let cals: Vec<Calibration> = (0..10).map(calibration_of).collect();
    let mut best = (0, 0.0, 0.0);
    for rho_later in [1.5, 2.0, 5.0, 10.0, 15.0] {
        for rho_quie in [0.4, 0.5, 0.7] {
            let vp = VpConfig {
                rho_later,
                rho_quie,
                ..VpConfig::default()
            };
            let hits = cals
                .iter()
                .filter(|cal| {
                    cal.trajectories
                        .iter()
                        .enumerate()
                        .all(|(k, t)| classify(t, &vp).flagged == SINGLE_LABEL.contains(&k))
                })
                .count();
            if hits > best.0 {
                best = (hits, rho_later, rho_quie);
            }
        }
    }
    Outcome {
        pass: best.0 >= 8,
        detail: format!(
            "exact separation in {}/10 seeds at rho_later={}, rho_quie={} (need 8)",
            best.0, best.1, best.2
        ),
        artifacts: cals.iter().flat_map(trajectories_csv).collect(),
    }
}

fn vp_superiority() -> Outcome {
    let (mut plain, mut vp, mut random) = (Vec::new(), Vec::new(), Vec::new());
    let mut artifacts = Vec::new();
    let mut flagged_total = 0;
    for seed in 0..10 {
        let cfg = mixed_config(seed, 5.0, 2.0, 0.003, 60);
        let setup = Setup::build(&cfg).unwrap();
        let mask = setup.mask(cfg.mask.kind, cfg.mask.density).unwrap();
        let run = |fed: &mut Federation| run_federation(fed, &RunOptions::default()).unwrap();

        let mut a = setup.federation(cfg.round.to_round_config(), mask.clone()).unwrap();
        let ma = run(&mut a);

        let mut b = setup.federation(cfg.round.to_round_config(), mask.clone()).unwrap();
        let cal = apply_vp(&mut b, &setup.pretrain_gradient().unwrap(), cfg.vp.as_ref().unwrap()).unwrap();
        let n = cal.flagged_ids().len();
        flagged_total += n;
        let mb = run(&mut b);

        let mut c = setup.federation(cfg.round.to_round_config(), mask).unwrap();
        let mut ids: Vec<usize> = (0..10).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut stopped = ids[..n].to_vec();
        stopped.sort_unstable();
        let steps = (0..10).map(|k| if stopped.contains(&k) { 1 } else { 30 }).collect();
        c.set_local_steps(steps, stopped).unwrap();
        let mc = run(&mut c);

        plain.push(ma.final_loss().unwrap());
        vp.push(mb.final_loss().unwrap());
        random.push(mc.final_loss().unwrap());
        artifacts.extend([csv(&ma), csv(&mb), csv(&mc)]);
    }
    let (p, v, r) = (median(plain), median(vp), median(random));
    Outcome {
        pass: v <= p && v <= r,
        detail: format!(
            "median final loss: vp {v:.4}, plain {p:.4}, random early stopping {r:.4} ({flagged_total} flags over 10 seeds)"
        ),
        artifacts,
    }
}

fn communication_claim() -> Outcome {
    let d = 10_000_000;
    let cfg = RoundConfig {
        local_steps: 10,
        rounds: 1,
        clients: 1,
        mode: SyncMode::MultiStep,
        zo: ZoConfig::default(),
    };
    let sparse = communication_cost(&cfg, d, 1e-3);
    let full = full_parameter_cost(d);
    // Independent arithmetic: 10 scalars up; 10^4 sparse values and 10 seeds down.
    assert_eq!(sparse.uplink, 10 * 8);
    assert_eq!(sparse.downlink, 10_000 * 8 + 10 * 8);
    assert_eq!(full.total(), 2 * 8 * d as u64);
    let ratio = full.total() as f64 / sparse.total() as f64;
    Outcome {
        pass: ratio >= 1000.0,
        detail: format!("full {} B vs sparse {} B per client-round: {ratio:.1}x", full.total(), sparse.total()),
        artifacts: vec![],
    }
}

#[test]
fn c01_estimator_is_unbiased() {
    report(1, "estimator unbiasedness", Duration::from_secs(10), unbiasedness);
}

#[test]
fn c02_second_moment_matches() {
    report(2, "second-moment identity", Duration::from_secs(10), second_moment);
}

#[test]
fn c03_virtual_paths_replay_exactly() {
    report(3, "virtual-path exactness", Duration::from_secs(5), virtual_path);
}

#[test]
fn c04_high_frequency_equals_single_step() {
    report(4, "protocol equivalence", Duration::from_secs(5), protocol_equivalence);
}

#[test]
fn c05_pl_quadratic_converges() {
    report(5, "PL convergence", Duration::from_secs(30), pl_convergence);
}

#[test]
fn c06_error_floor_drops_with_frequency() {
    report(6, "error floor vs frequency", Duration::from_secs(120), error_floor);
}

#[test]
fn c07_gradip_phenomenon() {
    report(7, "GradIP phenomenon", Duration::from_secs(60), gradip_phenomenon);
}

#[test]
fn c08_vp_classification() {
    report(8, "vp classification", Duration::from_secs(60), classification);
}

#[test]
fn c09_vp_beats_plain_and_random() {
    report(9, "vp superiority", Duration::from_secs(180), vp_superiority);
}

#[test]
fn c10_communication_savings() {
    report(10, "communication claim", Duration::from_secs(1), communication_claim);
}

#[test]
fn c11_reruns_are_byte_identical() {
    let checks: [(u32, fn() -> Outcome); 7] = [
        (3, virtual_path),
        (4, protocol_equivalence),
        (5, pl_convergence),
        (6, error_floor),
        (7, gradip_phenomenon),
        (8, classification),
        (9, vp_superiority),
    ];
    let mut differing = Vec::new();
    let start = Instant::now();
    for (id, check) in checks {
        let (a, b) = (check().artifacts, check().artifacts);
        if a.is_empty() || a != b {
            differing.push(id);
        }
    }
    let pass = differing.is_empty();
    println!(
        "[{}] 11 determinism: artifacts of checks 3-9 identical across reruns, differing: {differing:?} ({:.2?})",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed()
    );
    assert!(pass, "criterion 11 failed for {differing:?}");
}
