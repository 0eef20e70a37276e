use promptlab::world::{self, CompositeTask, CotWorld, QueryRule, RandomWorldSpec, Sequence, TaskSel, World};
use promptlab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn canonical() -> World {
    world::canonical_icl_world()
}

#[test]
fn canonical_layout() {
    let w = canonical();
    assert_eq!(w.vocab.content(), &[0, 1]);
    assert_eq!(w.vocab.emission(), &[0, 1, 3]);
    assert_eq!((w.vocab.sos, w.vocab.eos, w.vocab.pad, w.vocab.delim), (2, 3, 4, 5));
    assert_eq!(w.num_content(), 2);
    assert!(w.has_delimiter_task());
    assert_eq!(w.prior(), &[0.5, 0.5]);
}

#[test]
fn sequence_rejects_overflow_and_inner_pad() {
    assert!(matches!(Sequence::new(vec![0; 5], 4, 9), Err(Error::LengthOverflow { got: 5, width: 4 })));
    assert!(Sequence::new(vec![0, 9, 1], 4, 9).is_err());
    let s = Sequence::new(vec![0, 1], 4, 9).unwrap();
    assert_eq!(s.columns(), vec![0, 1, 9, 9]);
    assert_eq!(world::genuine_length(&s), 2);
}

#[test]
fn from_columns_rejects_pad_before_token() {
    assert!(Sequence::from_columns(&[0, 9, 1, 9], 9).is_err());
    let s = Sequence::from_columns(&[0, 1, 9, 9], 9).unwrap();
    assert_eq!(s.tokens(), &[0, 1]);
}

#[test]
fn concat_checks_width() {
    let a = Sequence::new(vec![0, 1], 3, 9).unwrap();
    let b = Sequence::new(vec![1, 1], 3, 9).unwrap();
    assert!(matches!(world::concat(&[&a, &b]), Err(Error::LengthOverflow { .. })));
    let e = Sequence::empty(3, 9);
    assert_eq!(world::concat(&[&a, &e]).unwrap().tokens(), &[0, 1]);
    assert!(matches!(world::concat(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn row_sum_violation_is_config_error() {
    let mut cfg = canonical().config().clone();
    cfg.tasks[0].init.as_mut().unwrap()[0] += 1e-6;
    let err = World::new(cfg).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn prior_sum_violation_is_config_error() {
    let mut cfg = canonical().config().clone();
    cfg.prior = vec![0.5, 0.6];
    assert!(matches!(World::new(cfg), Err(Error::Config { .. })));
}

#[test]
fn json_round_trip() {
    let w = canonical();
    let back = World::from_json_str(&w.to_json()).unwrap();
    assert_eq!(back.to_json(), w.to_json());
}

#[test]
fn doc_likelihood_matches_hand_product() {
    let w = canonical();
    let d = w.seq(&[0, 1, 3]).unwrap();
    // Task A: 0.9 · 0.45 · 0.1.
    let p = world::doc_likelihood(&w, &d, TaskSel::Task(0)).unwrap();
    assert!((p - 0.9 * 0.45 * 0.1).abs() < 1e-15);
    assert!(matches!(world::doc_likelihood(&w, &d, TaskSel::Task(7)), Err(Error::UnknownTask(7))));
}

#[test]
fn forced_eos_at_last_position() {
    let w = canonical();
    let ctx = vec![0; w.n - 1];
    let row = w.dist(0, &ctx);
    assert_eq!(row[w.vocab.eos], 1.0);
    assert_eq!(row.iter().sum::<f64>(), 1.0);
}

#[test]
fn sampled_documents_end_in_eos_and_have_positive_likelihood() {
    let w = canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let d = world::sample_document(&w, TaskSel::Task(1), &mut rng).unwrap();
        assert_eq!(*d.tokens().last().unwrap(), w.vocab.eos);
        assert!(d.genuine_length() <= w.n);
        assert!(world::doc_likelihood(&w, &d, TaskSel::Task(1)).unwrap() > 0.0);
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let w = canonical();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| world::sample_document(&w, TaskSel::Task(0), &mut rng).unwrap().tokens().to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(draw(11), draw(11));
}

#[test]
fn document_mass_sums_to_one() {
    // Exhaustive sum over every document of a small world.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = world::random_world(RandomWorldSpec { content: 2, tasks: 2, n: 5, b: 0.05, table: true }, &mut rng).unwrap();
    let mut total = 0.0;
    let mut stack: Vec<Vec<usize>> = vec![vec![]];
    while let Some(p) = stack.pop() {
        for &t in w.vocab.emission() {
            let mut q = p.clone();
            q.push(t);
            if t == w.vocab.eos {
                total += world::marginal_likelihood(&w, &w.seq(&q).unwrap());
            } else if q.len() < w.n {
                stack.push(q);
            }
        }
    }
    assert!((total - 1.0).abs() < 1e-12, "{total}");
}

#[test]
fn cond_prob_mixture_matches_bayes_ratio() {
    let w = canonical();
    let x = w.seq(&[1]).unwrap();
    let y = w.seq(&[0]).unwrap();
    let joint = world::marginal_likelihood(&w, &w.seq(&[1, 0]).unwrap());
    let marg = world::marginal_likelihood(&w, &x);
    let got = world::cond_prob(&w, &y, &x, None).unwrap();
    assert!((got - joint / marg).abs() < 1e-15);
}

#[test]
fn composite_task_governs_segments() {
    let w = canonical();
    let c = CompositeTask::new(vec![0, 1]);
    assert_eq!(c.task_at(0), 0);
    assert_eq!(c.task_at(1), 1);
    assert_eq!(c.task_at(5), 1);
    let y = w.seq(&[1, 1]).unwrap();
    let x = w.seq(&[0]).unwrap();
    let p = world::cond_prob(&w, &y, &x, Some(TaskSel::Composite(&c))).unwrap();
    // Step 1 under A after a: 0.45; step 2 under B after b: 0.6.
    assert!((p - 0.45 * 0.6).abs() < 1e-15);
}

#[test]
fn history_count_respects_counting_bound() {
    let w = world::memorizer_world();
    let h = world::enumerate_histories(&w).unwrap();
    // 1 + 3 + 9 + 27 contexts of length ≤ 3.
    assert_eq!(h.len(), 40);
    assert!((h.len() as f64) <= (w.vocab.size() as f64).powi(w.n as i32));
    assert_eq!(h[0].genuine_length(), 0);
}

#[test]
fn cot_world_validation() {
    let base = world::cot_step_world();
    assert!(CotWorld::new(base.clone(), vec![], QueryRule::Prior, None).is_err());
    assert!(CotWorld::new(base.clone(), vec![(vec![0, 0], 0.5), (vec![0, 0], 0.5)], QueryRule::Prior, None).is_err());
    assert!(CotWorld::new(base.clone(), vec![(vec![0, 0], 0.4), (vec![1, 1], 0.5)], QueryRule::Prior, None).is_err());
    assert!(CotWorld::new(base.clone(), vec![(vec![0, 9], 1.0)], QueryRule::Prior, None).is_err());
    let cw = CotWorld::stationary(base, 3, QueryRule::Tied).unwrap();
    assert_eq!(cw.steps(), 3);
    assert_eq!(cw.trajectories.len(), 2);
}

#[test]
fn floor_mix_keeps_floor() {
    let row = vec![1.0, 0.0, 0.0, 0.0];
    let out = world::floor_mix(&row, &[0, 1, 3], 0.1);
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(out[1] >= 0.1 && out[3] >= 0.1);
    assert_eq!(out[2], 0.0);
}

#[test]
fn world_files_load() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    for f in ["canonical_world.json", "cot_world.json", "memorizer_world.json"] {
        World::load(std::path::Path::new(&format!("{dir}/{f}"))).unwrap();
    }
    let missing = World::load(std::path::Path::new("/nonexistent/world.json")).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
}
