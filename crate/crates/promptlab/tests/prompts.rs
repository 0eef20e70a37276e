mod common;

use std::path::Path;

use promptlab::prompts::{self, PromptConfig};
use promptlab::world::{self, CotWorld, QueryRule, RandomWorldSpec, World};
use promptlab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg_path(name: &str) -> String {
    format!("{}/configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn icl_layout_and_parse() {
    let w = world::canonical_icl_world();
    let s = |t: &[usize]| w.seq(t).unwrap();
    let p = prompts::build_icl(vec![(s(&[0]), s(&[1, 1])), (s(&[1, 0]), s(&[0]))], 5, s(&[1])).unwrap();
    assert_eq!(p.flattened.tokens(), &[0, 1, 1, 5, 1, 0, 0, 5, 1]);
    let back = prompts::parse_icl(&p.flattened, 5, &[1, 2]).unwrap();
    assert_eq!(back, p);
    assert!(matches!(prompts::parse_icl(&p.flattened, 5, &[1]), Err(Error::Parse(_))));
}

#[test]
fn cot_layout_and_parse() {
    let w = world::cot_step_world();
    let s = |t: &[usize]| w.seq(t).unwrap();
    let p = prompts::build_cot(vec![(s(&[0]), vec![s(&[1]), s(&[0, 1])])], 5, s(&[0])).unwrap();
    assert_eq!(p.flattened.tokens(), &[0, 1, 0, 1, 5, 0]);
    assert_eq!(p.steps(), 2);
    let back = prompts::parse_cot(&p.flattened, 5, &p.layout()).unwrap();
    assert_eq!(back, p);
    assert!(prompts::parse_cot(&p.flattened, 5, &[(1, vec![1, 1])]).is_err());
}

#[test]
fn prompt_contract_violations() {
    let w = world::canonical_icl_world();
    let s = |t: &[usize]| w.seq(t).unwrap();
    assert!(prompts::build_icl(vec![(s(&[0, 5]), s(&[1]))], 5, s(&[1])).is_err());
    assert!(prompts::build_icl(vec![(s(&[0]), s(&[]))], 5, s(&[1])).is_err());
    assert!(prompts::build_icl(vec![], w.vocab.pad, s(&[1])).is_err());
    let long: Vec<_> = (0..6).map(|_| (s(&[0]), s(&[1]))).collect();
    assert!(matches!(prompts::build_icl(long, 5, s(&[1])), Err(Error::LengthOverflow { .. })));
    assert!(prompts::build_cot(vec![(s(&[0]), vec![s(&[1])]), (s(&[0]), vec![s(&[1]), s(&[1])])], 5, s(&[0])).is_err());
}

#[test]
fn markov_reset_world_has_zero_phi_and_unit_c() {
    let w = world::canonical_icl_world();
    assert_eq!(prompts::estimate_phi(&w, w.n).unwrap(), 0.0);
    assert_eq!(prompts::prior_imbalance(&w).unwrap(), 1.0);
}

#[test]
fn delimiter_free_tables_reset_exactly() {
    // Lookups back off to the longest stored suffix, so a table without
    // delimiter keys forgets everything before the last delimiter.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = world::random_world(RandomWorldSpec { content: 2, tasks: 2, n: 5, b: 0.05, table: true }, &mut rng).unwrap();
    assert_eq!(prompts::estimate_phi(&w, w.n).unwrap(), 0.0);
}

#[test]
fn delimiter_keyed_row_gives_positive_phi() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = world::random_world(RandomWorldSpec { content: 2, tasks: 2, n: 5, b: 0.05, table: true }, &mut rng).unwrap();
    let mut cfg = w.config().clone();
    let delim = w.vocab.delim;
    let table = cfg.tasks[0].table.as_mut().unwrap();
    let mut row = table[0].probs.clone();
    // Swap the first content entry with EOS to change the row after a delimiter.
    row.swap(0, w.vocab.eos);
    table.push(world::TableRow { context: vec![1, delim], probs: row.clone() });
    let shifted = World::new(cfg).unwrap();
    let phi = prompts::estimate_phi(&shifted, shifted.n).unwrap();
    let init = w.dist(0, &[]);
    let want = (row[0].ln() - init[0].ln()).abs().max((row[w.vocab.eos].ln() - init[w.vocab.eos].ln()).abs());
    assert!(phi > 0.0 && phi.is_finite());
    assert!((phi - want).abs() < 1e-12, "{phi} vs {want}");
}

#[test]
fn icl_epsilon_matches_oracle() {
    let w = world::canonical_icl_world();
    let a = w.seq(&[0]).unwrap();
    let p = prompts::build_icl(vec![(a.clone(), a.clone())], 5, a).unwrap();
    let chains = common::canonical_chains();
    let demo_amb = 1.0 - common::brute_posterior(&[0.5, 0.5], &chains, &[&[0, 0]])[0];
    let query_amb = 1.0 - common::brute_posterior(&[0.5, 0.5], &chains, &[&[0]])[0];
    let want = demo_amb / (1.0 - demo_amb) / (1.0 - query_amb);
    assert!((prompts::epsilon_icl(&w, &p).unwrap() - want).abs() < 1e-15);
    assert!((want - 10.0 / 81.0).abs() < 1e-15);
}

fn k2_world() -> CotWorld {
    CotWorld::new(world::cot_step_world(), vec![(vec![0, 0], 0.5), (vec![1, 1], 0.5)], QueryRule::Prior, None).unwrap()
}

fn cot_prompt(w: &World, steps: usize, m: usize) -> prompts::CotPrompt {
    let (a, b) = (w.seq(&[0]).unwrap(), w.seq(&[1]).unwrap());
    prompts::build_cot(vec![(a.clone(), vec![b; steps]); m], 5, a).unwrap()
}

#[test]
fn cot_constants_on_step_world() {
    let cw = k2_world();
    let p = cot_prompt(&cw.base, 2, 1);
    // Step b after a: A 0.8 vs B 0.2, so each step has ambiguity 0.2 and ε = 0.25.
    assert!((prompts::epsilon_cot(&cw.base, &p).unwrap() - 0.25).abs() < 1e-15);
    assert_eq!(prompts::step_optimal_tasks(&cw.base, &p).unwrap(), vec![0, 0]);
    assert_eq!(prompts::k_separation(&cw, &p).unwrap(), 2);
    assert_eq!(prompts::prior_mismatch(&cw, &p).unwrap(), 0.0);
    assert!((prompts::regularity_c1(&cw, &p).unwrap() - 2.0).abs() < 1e-12);
    assert!((prompts::regularity_c2(&cw, &p).unwrap() - 0.8).abs() < 1e-15);
    let stationary = CotWorld::stationary(cw.base.clone(), 1, QueryRule::Prior).unwrap();
    assert_eq!(prompts::k_separation(&stationary, &cot_prompt(&cw.base, 1, 1)).unwrap(), 1);
}

#[test]
fn non_stationary_prior_has_mismatch() {
    let base = world::cot_step_world();
    let cw = CotWorld::new(base.clone(), vec![(vec![0, 1], 0.5), (vec![1, 0], 0.5)], QueryRule::Prior, None).unwrap();
    let p = cot_prompt(&base, 2, 1);
    // Four trajectories carry prompt mass; each differs from the stationary prior by 0.5.
    assert!((prompts::prior_mismatch(&cw, &p).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn hamming_distance() {
    assert_eq!(prompts::hamming(&[0, 1, 2], &[0, 2, 2]), 1);
    assert_eq!(prompts::hamming(&[], &[]), 0);
}

#[test]
fn identical_shift_has_zero_varphi() {
    let w = world::cot_step_world();
    assert_eq!(prompts::estimate_varphi(&w, &[w.clone(), w.clone()]).unwrap(), 0.0);
    assert!(prompts::estimate_varphi(&w, &[world::memorizer_world()]).is_err());
}

#[test]
fn prompt_files_load_and_build() {
    let w = World::load(Path::new(&cfg_path("canonical_world.json"))).unwrap();
    let icl = PromptConfig::load(Path::new(&cfg_path("icl_prompt.json"))).unwrap();
    assert_eq!(icl.icl_prompt(&w, 3).unwrap().m(), 3);
    let cw_base = World::load(Path::new(&cfg_path("cot_world.json"))).unwrap();
    let k2 = PromptConfig::load(Path::new(&cfg_path("cot_k2_prompt.json"))).unwrap();
    let cw = k2.cot_world(cw_base.clone(), None).unwrap();
    assert_eq!(cw.steps(), 2);
    assert_eq!(k2.step_lengths(), vec![1, 1]);
    assert_eq!(k2.cot_prompt(&cw_base, 2).unwrap().m(), 2);
    let err = PromptConfig::load(Path::new("/nonexistent/prompt.json")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn prompt_config_rejects_foreign_tokens() {
    let w = world::canonical_icl_world();
    let mut cfg = PromptConfig::load(Path::new(&cfg_path("icl_prompt.json"))).unwrap();
    cfg.query = vec![3];
    assert!(matches!(cfg.icl_prompt(&w, 1), Err(Error::Config { .. })));
}
