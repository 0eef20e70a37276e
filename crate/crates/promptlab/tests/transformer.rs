mod common;

use nalgebra::{DMatrix, DVector};
use promptlab::inference;
use promptlab::transformer::{self, AttentionParams, FfnParams, MemorizerModel, ScoreScale, Witness};
use promptlab::world::{self, Sequence, World};
use promptlab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn softmax_examples() {
    let z = transformer::softmax_cols(&DMatrix::zeros(4, 2)).unwrap();
    assert!(z.iter().all(|&x| x == 0.25));
    let m = DMatrix::from_column_slice(2, 1, &[0.0, f64::NEG_INFINITY]);
    assert_eq!(transformer::softmax_cols(&m).unwrap().as_slice(), &[1.0, 0.0]);
    let a = transformer::softmax(&[0.3, -1.2, 2.0]).unwrap();
    let b = transformer::softmax(&[100.3, 98.8, 102.0]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
    let dead = DMatrix::from_column_slice(2, 1, &[f64::NEG_INFINITY; 2]);
    assert!(matches!(transformer::softmax_cols(&dead), Err(Error::EmptyInput(_))));
}

#[test]
fn logits_to_simplex_identity() {
    let p = [0.1, 0.25, 0.65];
    for c in [-30.0, 0.0, 7.5] {
        let logits: Vec<f64> = p.iter().map(|x: &f64| x.ln() + c).collect();
        let q = transformer::softmax(&logits).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn boltz_examples() {
    assert_eq!(transformer::boltz(&[2.5; 4]).unwrap(), 2.5);
    let e = std::f64::consts::E;
    let v = transformer::boltz(&[1.0, 0.0]).unwrap();
    assert!((v - e / (e + 1.0)).abs() < 1e-15);
    assert!((v - common::naive_boltz(&[1.0, 0.0])).abs() < 1e-15);
    assert!((v - 0.731_058_578_630_004_9).abs() < 1e-15);
    let shifted = transformer::boltz(&[4.0, 3.0]).unwrap();
    assert!((shifted - (v + 3.0)).abs() < 1e-14);
    assert_eq!(transformer::boltz(&[1.0, f64::NEG_INFINITY]).unwrap(), 1.0);
    assert!(matches!(transformer::boltz(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn boltz_diff_agrees_with_direct_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let a: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let direct = common::naive_boltz(&a) - common::naive_boltz(&b);
        assert!((transformer::boltz_diff(&a, &b).unwrap() - direct).abs() < 1e-12);
    }
    assert_eq!(transformer::boltz_diff(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
}

#[test]
fn positional_encoder_columns() {
    let p = transformer::positional_encoder(1.0, 3, 3);
    for i in 0..3 {
        assert_eq!(p.row(i).iter().cloned().collect::<Vec<_>>(), vec![2.0, 4.0, 6.0]);
    }
    let q = transformer::positional_encoder(0.5, 4, 5);
    for j in 0..5 {
        let want = 2.0 * (j + 1) as f64 * 0.5 * 2.0;
        assert!((q.column(j).norm() - want).abs() < 1e-12);
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, count: usize, d: usize, alpha: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = alpha * rng.gen_range(0.3..1.0);
            v.iter().map(|x| x / n * r).collect()
        })
        .collect()
}

fn encode_all(emb: &[Vec<f64>], p: &DMatrix<f64>, seqs: &[Vec<usize>]) -> Vec<DMatrix<f64>> {
    seqs.iter().map(|s| DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| emb[s[j]][i] + p[(i, j)])).collect()
}

#[test]
fn corrected_encoder_bounds_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..300 {
        let d = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=4);
        let alpha = rng.gen_range(0.5..2.0);
        let emb = random_tokens(&mut rng, 4, d, alpha);
        let dist = |a: &[f64], b: &[f64]| world::euclid(a, b);
        let (mut beta, mut dmax) = (f64::INFINITY, 0.0f64);
        for i in 0..4 {
            for j in (i + 1)..4 {
                beta = beta.min(dist(&emb[i], &emb[j]));
                dmax = dmax.max(dist(&emb[i], &emb[j]));
            }
        }
        let (r_min, r_max, eta) = transformer::encoder_bounds(alpha, beta * (1.0 - 1e-9), dmax, n, d);
        if eta <= 0.0 {
            continue;
        }
        let p = transformer::positional_encoder(alpha, d, n);
        let seqs: Vec<Vec<usize>> = (0..6).map(|_| (0..n).map(|_| rng.gen_range(0..4)).collect()).collect();
        let xs = encode_all(&emb, &p, &seqs);
        assert!(transformer::verify_separateness(&xs, r_min, r_max, eta).is_empty());
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn literal_encoder_radius_fails() {
    // r_max = (2n+1)α misses the √d factor: with d = 2, n = 3 the last PAD column
    // has norm 6√2 α > 7α.
    let alpha = 1.0;
    let emb = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
    let p = transformer::positional_encoder(alpha, 2, 3);
    let xs = encode_all(&emb, &p, &[vec![0, 1, 1]]);
    let beta = 1.0;
    let w = transformer::verify_separateness(&xs, alpha, 7.0 * alpha, 2.0 * alpha - beta);
    assert!(w.iter().any(|w| matches!(w, Witness::Norm { col: 2, .. })));
    let (r_min, r_max, eta) = transformer::encoder_bounds(alpha, beta, 1.0, 3, 2);
    assert!(transformer::verify_separateness(&xs, r_min, r_max, eta).is_empty());
}

#[test]
fn separateness_certificate_cases() {
    let dup = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let cert = transformer::check_separateness(&[dup]);
    assert!(!cert.is_valid());
    assert!(matches!(cert.witnesses[0], Witness::Duplicate { seq: 0, cols: (0, 1) }));
    let single = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
    let cert = transformer::check_separateness(&[single]);
    assert!(cert.r_min < 5.0 && cert.r_max > 5.0);
    assert!((cert.r_min - 5.0).abs() < 1e-10 && (cert.r_max - 5.0).abs() < 1e-10);
}

#[test]
fn canonical_histories_are_separated() {
    let w = world::canonical_icl_world();
    let cw = World::new({
        let mut c = w.config().clone();
        c.n = 5;
        c
    })
    .unwrap();
    let s = promptlab::cli::describe(&cw).unwrap();
    assert!(s.separateness.is_valid());
    assert!(s.separateness.r_min >= cw.vocab.alpha);
}

#[test]
fn separating_vector_for_two_tokens() {
    let pts = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-1.0, 0.0])];
    let kappa = 3.0;
    let sv = transformer::find_separating_vector(&pts, kappa, 0).unwrap();
    assert!((sv.v.norm() - 1.0).abs() <= 1e-12);
    // Post-hoc exhaustive score-gap check over all triples.
    let prod = sv.u * sv.u_prime;
    for a in &pts {
        for b in &pts {
            if a == b {
                continue;
            }
            for c in &pts {
                assert!(prod * sv.v.dot(&(a - b)).abs() * sv.v.dot(c).abs() > kappa);
            }
        }
    }
    // v = (1, 0) meets the projection band for N = 2, d = 2.
    let lower = (8.0 / (std::f64::consts::PI * 2.0)).sqrt() / 9.0;
    let e1 = DVector::from_vec(vec![1.0, 0.0]);
    assert!(pts.iter().all(|c| e1.dot(c).abs() >= lower * c.norm() && e1.dot(c).abs() <= c.norm()));
    assert!(matches!(transformer::find_separating_vector_budget(&pts, kappa, 0, 0), Err(Error::SearchBudget(0))));
}

fn random_attention(rng: &mut ChaCha8Rng, d: usize, n: usize) -> AttentionParams {
    let m = |rng: &mut ChaCha8Rng, r, c| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    AttentionParams { w_o: m(rng, d, 2), w_v: m(rng, 2, d), w_k: m(rng, 2, d), w_q: m(rng, 2, d), mask: transformer::causal_mask(n) }
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
    let mut p = random_attention(&mut rng, 3, 4);
    p.w_v = DMatrix::zeros(2, 3);
    assert_eq!(transformer::attention_forward(&p, &x).unwrap(), x);
    let p1 = random_attention(&mut rng, 3, 1);
    let x1 = x.columns(0, 1).into_owned();
    let want = &x1 + &p1.w_o * (&p1.w_v * &x1);
    assert!((transformer::attention_forward(&p1, &x1).unwrap() - want).amax() < 1e-15);
    assert!(matches!(transformer::attention_forward(&p1, &x), Err(Error::Shape(_))));
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (d, n) = (3, 5);
        let p = random_attention(&mut rng, d, n);
        let x = DMatrix::from_fn(d, n, |_, _| rng.gen_range(-1.0..1.0));
        let k = rng.gen_range(0..n);
        let mut y = x.clone();
        for j in (k + 1)..n {
            for i in 0..d {
                y[(i, j)] += rng.gen_range(-5.0..5.0);
            }
        }
        let (a, b) = (transformer::attention_forward(&p, &x).unwrap(), transformer::attention_forward(&p, &y).unwrap());
        for j in 0..=k {
            assert_eq!(a.column(j), b.column(j));
        }
    }
}

fn memo_inputs(w: &World) -> Vec<DMatrix<f64>> {
    let p = transformer::positional_encoder(w.vocab.alpha, w.vocab.d(), w.n);
    world::enumerate_histories(w)
        .unwrap()
        .iter()
        .filter(|h| h.genuine_length() < w.n)
        .map(|h| transformer::encode(&w.vocab.embeddings, w.vocab.sos, w.vocab.pad, &p, h.tokens()).unwrap())
        .collect()
}

#[test]
fn contextual_attention_separates_prefixes() {
    let w = world::memorizer_world();
    let xs = memo_inputs(&w);
    let (params, cert) = transformer::build_contextual_attention(&xs, transformer::default_kappa(w.n), 1, ScoreScale::Bounded(4.0)).unwrap();
    assert!(cert.passes());
    // Sequences a·b and b·b differ in an early token: their last-column outputs differ.
    let p = transformer::positional_encoder(w.vocab.alpha, w.vocab.d(), w.n);
    let enc = |h: &[usize]| transformer::encode(&w.vocab.embeddings, w.vocab.sos, w.vocab.pad, &p, h).unwrap();
    let (oa, ob) = (transformer::attention_forward(&params, &enc(&[0, 1])).unwrap(), transformer::attention_forward(&params, &enc(&[1, 1])).unwrap());
    assert!((oa.column(2) - ob.column(2)).norm() > cert.gamma);
    let oc = transformer::attention_forward(&params, &enc(&[0, 1])).unwrap();
    assert_eq!(oa, oc);
    for x in &xs {
        let o = transformer::attention_forward(&params, x).unwrap();
        assert!(o.column_iter().all(|c| c.norm() < cert.r));
    }
    // The lemma's scale collides in floating point; the certificate says so.
    let (_, lemma) = transformer::build_contextual_attention(&xs, transformer::default_kappa(w.n), 1, ScoreScale::Lemma).unwrap();
    assert!(lemma.log_gamma_lemma < -700.0);
}

#[test]
fn residual_elimination_examples() {
    let d = 3;
    let zero = FfnParams { w1: DMatrix::zeros(2, d), b1: DVector::zeros(2), w2: DMatrix::zeros(d, 2), b2: DVector::zeros(d), residual: true };
    let wide = transformer::residual_eliminate(&zero);
    assert_eq!(wide.width(), 2 + 2 * d);
    assert!(!wide.residual);
    let x = DVector::from_vec(vec![0.5, -2.0, 3.25]);
    assert_eq!(wide.forward(&x).unwrap(), x);
}

fn memorize(w: &World) -> (MemorizerModel, Vec<(Sequence, Vec<f64>)>) {
    let pairs = transformer::memorizer_pairs(w).unwrap();
    let (model, rep) = transformer::build_memorizer(&w.vocab, w.n, &pairs, 9).unwrap();
    assert!(rep.max_error <= 1e-6);
    assert_eq!(model.depth, 1);
    (model, pairs)
}

#[test]
fn memorizer_reproduces_targets_at_n3() {
    let mut cfg = world::memorizer_world().config().clone();
    cfg.n = 3;
    let w = World::new(cfg).unwrap();
    let (model, pairs) = memorize(&w);
    for (h, target) in &pairs {
        let out = transformer::model_forward(&model, h).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let err = out.iter().zip(target).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-6, "{err}");
        assert_eq!(transformer::model_forward(&model, h).unwrap(), out);
    }
}

#[test]
fn single_history_model_is_constant() {
    let w = world::memorizer_world();
    let pairs = vec![(w.seq(&[]).unwrap(), vec![0.1, 0.2, 0.3, 0.4])];
    let (model, rep) = transformer::build_memorizer(&w.vocab, w.n, &pairs, 0).unwrap();
    assert!(rep.max_error <= 1e-12);
    let out = transformer::model_forward(&model, &pairs[0].0).unwrap();
    assert!(out.iter().zip(&pairs[0].1).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn zero_target_entry_is_rejected() {
    let w = world::memorizer_world();
    let pairs = vec![(w.seq(&[0]).unwrap(), vec![0.0, 0.5, 0.25, 0.25])];
    assert!(transformer::build_memorizer(&w.vocab, w.n, &pairs, 0).is_err());
}

#[test]
fn model_dump_is_bit_exact() {
    let w = world::memorizer_world();
    let (model, pairs) = memorize(&w);
    let back = MemorizerModel::from_json(&model.to_json()).unwrap();
    assert_eq!(back, model);
    for (h, _) in &pairs {
        let (a, b) = (transformer::model_forward(&model, h).unwrap(), transformer::model_forward(&back, h).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(MemorizerModel::from_json("{\"version\": 99}").is_err());
}

#[test]
fn memorizer_substitution_preserves_zero_shot_error() {
    // Measured zero-shot error with the model in place of q moves by at most |V|·1e-6·r.
    let w = world::memorizer_world();
    let (model, _) = memorize(&w);
    let emission = w.vocab.emission();
    let r = 2;
    let tol = w.vocab.size() as f64 * 1e-6 * r as f64;
    for &x0 in w.vocab.content() {
        let x = w.seq(&[x0]).unwrap();
        let post = inference::posterior(&w, &x, None).unwrap();
        let kx = post.argmax();
        for (i, &y0) in emission.iter().enumerate() {
            for (j, &y1) in emission.iter().enumerate() {
                if y0 == w.vocab.eos && j > 0 {
                    continue;
                }
                let toks: Vec<usize> = if y0 == w.vocab.eos { vec![y0] } else { vec![y0, y1] };
                let y = w.seq(&toks).unwrap();
                let exact = world::cond_prob(&w, &y, &x, None).unwrap();
                let own = world::cond_prob(&w, &y, &x, Some(world::TaskSel::Task(kx))).unwrap();
                let mut modeled = transformer::model_forward(&model, &x).unwrap()[i];
                if toks.len() == 2 {
                    modeled *= transformer::model_forward(&model, &w.seq(&[x0, y0]).unwrap()).unwrap()[j];
                }
                assert!(((exact - own).abs() - (modeled - own).abs()).abs() <= tol);
            }
        }
    }
}
