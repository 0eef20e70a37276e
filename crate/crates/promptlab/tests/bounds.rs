use promptlab::bounds::{self, BoundInputs, CotConfig, IclConfig, Y_SET_CAP};
use promptlab::world::{self, CotWorld, QueryRule, Sequence, World};
use promptlab::Error;

fn seq(w: &World, t: &[usize]) -> Sequence {
    w.seq(t).unwrap()
}

#[test]
fn pretraining_terms() {
    let inp = BoundInputs { v_size: 2, n: 2, big_n: Some(16.0), d: 2, big_m: 4.0, r: 1, delta: 0.5, ..Default::default() };
    let t = bounds::rhs_pretraining(&inp);
    assert_eq!(t.main_total, 16.0 / 32f64.powf(0.25) + (2f64.ln() / 32.0).sqrt());
    assert!(t.appendix_width_term > 0.0 && t.rademacher > 0.0);
    assert_eq!(t.rademacher_summed, 2.0 * t.rademacher);
    let mut prev = f64::INFINITY;
    for n in [1e2, 1e4, 1e8, 1e16] {
        let v = bounds::rhs_pretraining(&BoundInputs { big_n: Some(n), ..inp.clone() }).main_total;
        assert!(v < prev);
        prev = v;
    }
    let limit = bounds::rhs_pretraining(&BoundInputs { big_n: None, ..inp });
    assert_eq!(limit.main_total, 0.0);
    assert_eq!(limit.rademacher, 0.0);
}

#[test]
fn icl_formula() {
    let base = BoundInputs { phi: 0.0, c: 1.0, epsilon: 0.1, ambiguity: 0.5, r: 2, n: 4, ..Default::default() };
    assert_eq!(bounds::rhs_icl(&BoundInputs { m: 0, ..base.clone() }).decay, 0.5);
    let d2 = bounds::rhs_icl(&BoundInputs { m: 2, ..base.clone() }).decay;
    assert!((d2 - 0.005).abs() < 1e-17);
    let grow = BoundInputs { phi: 0.5, ..base.clone() };
    assert!(bounds::icl_rate(&grow) > 1.0);
    assert!(bounds::rhs_icl(&BoundInputs { m: 3, ..grow.clone() }).decay > bounds::rhs_icl(&BoundInputs { m: 2, ..grow.clone() }).decay);
    let c = bounds::rhs_icl(&grow);
    assert_eq!(c.rphi_stated, 1.0);
    assert_eq!(c.rphi, 1f64.exp_m1());
    assert_eq!(c.stat, 0.0);
}

#[test]
fn cot_formula() {
    let inp = BoundInputs { phi: 0.0, c1: 1.0, c2: 1.0, epsilon: 0.1, m: 1, k: 2, l: 2, n: 3, ..Default::default() };
    let c = bounds::rhs_cot(&inp, false).unwrap();
    assert!((c.decay - 0.01 / 0.9).abs() < 1e-17);
    assert_eq!(c.mismatch, 0.0);
    assert_eq!(bounds::rhs_cot(&BoundInputs { k: 3, ..inp.clone() }, false).unwrap().decay, 0.0);
    assert_eq!(bounds::rhs_cot(&inp, true).unwrap().mismatch, 0.0);
    let shifted = bounds::rhs_cot(&BoundInputs { varphi: 0.1, m_recip: 2.0, ..inp.clone() }, true).unwrap();
    assert!((shifted.mismatch - 0.6).abs() < 1e-15);
    let with_delta = bounds::rhs_cot(&BoundInputs { delta_mismatch: 0.25, m_recip: 4.0, ..inp.clone() }, false).unwrap();
    assert_eq!(with_delta.mismatch, 1.0);
    let err = bounds::rhs_cot(&BoundInputs { epsilon: 1.0, ..inp }, false).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn response_set_layout() {
    let w = world::canonical_icl_world();
    let ys = bounds::response_set(&w, 2, Y_SET_CAP, 0).unwrap();
    assert_eq!(ys.len(), 7);
    let sub = bounds::response_set(&w, 2, 3, 5).unwrap();
    assert_eq!(sub.len(), 3);
    assert_eq!(sub, bounds::response_set(&w, 2, 3, 5).unwrap());
}

#[test]
fn zero_shot_examples() {
    let w = world::canonical_icl_world();
    let x = seq(&w, &[0]);
    let ys = bounds::response_set(&w, 1, Y_SET_CAP, 0).unwrap();
    let rep = bounds::run_zero_shot(&w, &x, &ys).unwrap();
    assert!(rep.measured_error <= 0.1);
    assert!(rep.slack >= 0.0);
    let amb = promptlab::inference::ambiguity(&w, &x, None).unwrap();
    assert_eq!(rep.rhs_total.to_bits(), amb.ambiguity.to_bits());

    let mut cfg = w.config().clone();
    cfg.tasks.remove(1);
    cfg.tasks[1].id = 1;
    cfg.prior = vec![1.0];
    let single = World::new(cfg).unwrap();
    let rep = bounds::run_zero_shot(&single, &seq(&single, &[0]), &ys).unwrap();
    assert_eq!((rep.measured_error, rep.rhs_total), (0.0, 0.0));
}

fn icl_cfg(w: &World, x: usize, y: usize, q: usize, r: usize) -> IclConfig {
    IclConfig { demos: vec![(seq(w, &[x]), seq(w, &[y]))], query: seq(w, &[q]), r, y_cap: Y_SET_CAP, seed: 0, big_n: None, delta: 0.05, parallel: 1 }
}

#[test]
fn icl_sweep_m0_equals_zero_shot() {
    let w = world::canonical_icl_world();
    let cfg = icl_cfg(&w, 0, 0, 0, 2);
    let reps = bounds::run_icl_sweep(&w, &cfg, 0..=4).unwrap();
    let zs = bounds::run_zero_shot(&w, &cfg.query, &bounds::response_set(&w, 2, Y_SET_CAP, 0).unwrap()).unwrap();
    assert_eq!(reps[0].measured_error, zs.measured_error);
    assert_eq!(reps[0].rhs_total, zs.rhs_total);
    for p in reps.windows(2) {
        assert!(p[1].measured_error <= p[0].measured_error);
    }
    // Errors frozen from an exact sweep of this world.
    let frozen = [1.35e-2, 1.646e-3, 1.849e-4, 2.057e-5, 2.286e-6];
    for (r, f) in reps.iter().zip(frozen) {
        assert!((r.measured_error - f).abs() / f < 2e-3, "m={}: {}", r.m, r.measured_error);
    }
}

#[test]
fn icl_task_consistency_is_gated() {
    let w = world::canonical_icl_world();
    let err = bounds::run_icl_sweep(&w, &icl_cfg(&w, 1, 1, 0, 1), 0..=2).unwrap_err();
    assert!(matches!(err, Error::Assumption { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
}

fn cot_cfg(w: &World, x: usize, step: usize, steps: usize) -> CotConfig {
    CotConfig {
        demos: vec![(seq(w, &[x]), vec![seq(w, &[step]); steps])],
        query: seq(w, &[x]),
        step_lengths: vec![1; steps],
        y_cap: Y_SET_CAP,
        seed: 0,
        shifted: false,
        big_n: None,
        delta: 0.05,
        parallel: 1,
    }
}

#[test]
fn stationary_single_step_cot_matches_icl() {
    // With a tied query rule and L = 1, q̃ is the embedded q and θ⃗* = θ_x.
    let w = world::cot_step_world();
    let cw = CotWorld::stationary(w.clone(), 1, QueryRule::Tied).unwrap();
    let mut cfg = cot_cfg(&w, 0, 1, 1);
    cfg.query = seq(&w, &[1]);
    let cot = bounds::run_cot_sweep(&cw, &cfg, 1..=3).unwrap();
    let icl = bounds::run_icl_sweep(&w, &icl_cfg(&w, 0, 1, 1, 1), 1..=3).unwrap();
    for (a, b) in cot.iter().zip(&icl) {
        assert!((a.measured_error - b.measured_error).abs() < 1e-12, "m={}: {} vs {}", a.m, a.measured_error, b.measured_error);
    }
}

#[test]
fn cot_sweep_on_step_world() {
    let w = world::cot_step_world();
    let cw = CotWorld::new(w.clone(), vec![(vec![0, 0], 0.5), (vec![1, 1], 0.5)], QueryRule::Prior, None).unwrap();
    let reps = bounds::run_cot_sweep(&cw, &cot_cfg(&w, 0, 1, 2), 1..=3).unwrap();
    let frozen = [3.53e-2, 2.335e-3, 1.464e-4];
    for (r, f) in reps.iter().zip(frozen) {
        assert_eq!(r.k, 2);
        assert_eq!(r.rhs.mismatch, 0.0);
        assert!(r.slack > 0.0);
        assert!((r.measured_error - f).abs() / f < 2e-3, "m={}: {}", r.m, r.measured_error);
        assert!((r.extras["c1_epsilon"] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn cot_disagreeing_demos_are_reported() {
    let w = world::canonical_icl_world();
    let cw = CotWorld::stationary(w.clone(), 1, QueryRule::Tied).unwrap();
    let mut cfg = cot_cfg(&w, 1, 1, 1);
    cfg.demos.push((seq(&w, &[1]), vec![seq(&w, &[0])]));
    let err = bounds::run_cot_sweep(&cw, &cfg, 2..=2).unwrap_err();
    assert!(matches!(&err, Error::Assumption { name, .. } if name.contains("invariance")), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn csv_is_round_trip_exact() {
    let w = world::canonical_icl_world();
    let reps = bounds::run_icl_sweep(&w, &icl_cfg(&w, 0, 0, 0, 2), 0..=2).unwrap();
    let csv = bounds::reports_to_csv(&reps).unwrap();
    let mut rd = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, bounds::CSV_HEADER.to_vec());
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let measured: f64 = rows[1][13].parse().unwrap();
    assert_eq!(measured.to_bits(), reps[1].measured_error.to_bits());
    assert_eq!(bounds::fmt17(0.1).parse::<f64>().unwrap(), 0.1);
}

#[test]
fn proposition_suite_small_run() {
    let a = bounds::verify_propositions(50, 1, 2).unwrap();
    assert_eq!(a.violations(), 0);
    assert!(a.premise_frequency > 0.0 && a.premise_frequency <= 1.0);
    let b = bounds::verify_propositions(50, 1, 4).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
