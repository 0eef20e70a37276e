//! One-block masked-attention transformer built by hand: positional encoding,
//! an attention layer certified as a contextual mapping, and a two-layer ReLU
//! network that maps context ids to next-token logits.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference;
use crate::world::{self, Sequence, TokenId, Vocab, World};

pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Draw budget for the separating-vector search.
pub const SEARCH_BUDGET: usize = 100_000;
/// Relative margin used to turn tight scan values into strict bounds.
pub const STRICT_MARGIN: f64 = 1e-12;
/// Context ids closer than this are treated as colliding, whatever the
/// analytic γ says: the FFN bumps need a gap well above rounding noise.
pub const GAMMA_FLOOR: f64 = 1e-7;

/// Column-wise softmax with max subtraction; −∞ entries get weight 0.
pub fn softmax_cols(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return Err(Error::EmptyInput("no finite entries".into()));
        }
        let mut s = 0.0;
        for x in col.iter_mut() {
            *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - mx).exp() };
            s += *x;
        }
        col /= s;
    }
    Ok(out)
}

/// Softmax of a single vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let m = softmax_cols(&DMatrix::from_column_slice(v.len(), 1, v))?;
    Ok(m.iter().cloned().collect())
}

/// aᵀ·softmax(a); −∞ entries are dropped.
pub fn boltz(a: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyInput("no finite entries".into()));
    }
    let w = softmax(a)?;
    Ok(a.iter().zip(&w).filter(|(_, &w)| w > 0.0).map(|(x, w)| x * w).sum())
}

/// boltz(a) − boltz(b) computed as Σ_{i,j}(a_i − b_j)e^{a_i+b_j−2m}/(Z_a Z_b).
/// Entries shared by both vectors (matched as multisets) contribute
/// antisymmetric pairs that cancel exactly, so they are skipped; the gap is
/// then resolvable far below one ulp of the inputs.
pub fn boltz_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("no finite entries".into()));
    }
    let m = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::EmptyInput("no finite entries".into()));
    }
    let za: f64 = a.iter().map(|x| (x - m).exp()).sum();
    let zb: f64 = b.iter().map(|x| (x - m).exp()).sum();
    let mut b_shared = vec![false; b.len()];
    let a_shared: Vec<bool> = a
        .iter()
        .map(|x| match (0..b.len()).find(|&j| !b_shared[j] && b[j] == *x) {
            Some(j) => {
                b_shared[j] = true;
                true
            }
            None => false,
        })
        .collect();
    let mut terms = Vec::new();
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            if (a_shared[i] && b_shared[j]) || x == y || x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
                continue;
            }
            terms.push((x - y) * (x + y - 2.0 * m).exp());
        }
    }
    // Summing by increasing magnitude keeps small survivors from vanishing.
    terms.sort_by(|p, q| p.abs().total_cmp(&q.abs()));
    Ok(terms.iter().sum::<f64>() / (za * zb))
}

/// P[i][j] = 2·j·alpha for 1-indexed column j, identical rows.
pub fn positional_encoder(alpha: f64, d: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |_, j| 2.0 * (j + 1) as f64 * alpha)
}

/// Separateness parameters guaranteed for encoded sequences of a vocabulary
/// with ‖t‖ ≤ α, pairwise distances in [β, D]: r_min = α, r_max = (2n√d+1)α,
/// η = min(β, 2α√d − D). Requires 2α√d > D for η > 0.
pub fn encoder_bounds(alpha: f64, beta: f64, max_pair: f64, n: usize, d: usize) -> (f64, f64, f64) {
    let sd = (d as f64).sqrt();
    (alpha, (2.0 * n as f64 * sd + 1.0) * alpha, beta.min(2.0 * alpha * sd - max_pair))
}

// ---------------------------------------------------------------------------
// Tokenwise separateness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Witness {
    /// Sequence with two identical columns.
    Duplicate { seq: usize, cols: (usize, usize) },
    /// Column whose norm breaks a bound.
    Norm { seq: usize, col: usize, norm: f64 },
    /// Two distinct columns closer than η.
    Close { a: (usize, usize), b: (usize, usize), dist: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparatenessCert {
    pub r_min: f64,
    pub r_max: f64,
    pub eta: f64,
    pub witnesses: Vec<Witness>,
}

impl SeparatenessCert {
    pub fn is_valid(&self) -> bool {
        self.witnesses.is_empty() && self.r_min > 0.0 && self.eta > 0.0
    }
}

fn col_key(m: &DMatrix<f64>, k: usize) -> Vec<u64> {
    m.column(k).iter().map(|x| x.to_bits()).collect()
}

fn margin(x: f64) -> f64 {
    STRICT_MARGIN * x.abs().max(1.0)
}

/// Tightest strict (r_min, r_max, η); duplicates within a sequence and
/// coinciding distinct columns show up as witnesses.
pub fn check_separateness(seqs: &[DMatrix<f64>]) -> SeparatenessCert {
    let mut witnesses = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut cols: Vec<((usize, usize), Vec<u64>, DVector<f64>)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, x) in seqs.iter().enumerate() {
        for k in 0..x.ncols() {
            for l in 0..k {
                if col_key(x, k) == col_key(x, l) {
                    witnesses.push(Witness::Duplicate { seq: i, cols: (l, k) });
                }
            }
            let nrm = x.column(k).norm();
            lo = lo.min(nrm);
            hi = hi.max(nrm);
            let key = col_key(x, k);
            if seen.insert(key.clone()) {
                cols.push(((i, k), key, x.column(k).into_owned()));
            }
        }
    }
    let mut eta = f64::INFINITY;
    let mut closest = None;
    for a in 0..cols.len() {
        for b in (a + 1)..cols.len() {
            let dist = (&cols[a].2 - &cols[b].2).norm();
            if dist < eta {
                eta = dist;
                closest = Some((cols[a].0, cols[b].0));
            }
        }
    }
    if eta == 0.0 {
        let (a, b) = closest.expect("a pair exists");
        witnesses.push(Witness::Close { a, b, dist: 0.0 });
    }
    SeparatenessCert { r_min: lo - margin(lo), r_max: hi + margin(hi), eta: eta - margin(eta), witnesses }
}

/// Checks the three strict conditions for given parameters and returns every
/// violation found.
pub fn verify_separateness(seqs: &[DMatrix<f64>], r_min: f64, r_max: f64, eta: f64) -> Vec<Witness> {
    let mut out = Vec::new();
    let mut all: Vec<((usize, usize), DVector<f64>)> = Vec::new();
    for (i, x) in seqs.iter().enumerate() {
        for k in 0..x.ncols() {
            let nrm = x.column(k).norm();
            if !(nrm > r_min && nrm < r_max) {
                out.push(Witness::Norm { seq: i, col: k, norm: nrm });
            }
            all.push(((i, k), x.column(k).into_owned()));
        }
    }
    for a in 0..all.len() {
        for b in (a + 1)..all.len() {
            if all[a].1 != all[b].1 {
                let dist = (&all[a].1 - &all[b].1).norm();
                if dist <= eta {
                    out.push(Witness::Close { a: all[a].0, b: all[b].0, dist });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Separating vector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatingVector {
    pub v: DVector<f64>,
    pub u: f64,
    pub u_prime: f64,
    /// min over a ≠ b, c of |u·u'|·|vᵀ(a−b)|·|vᵀc|
    pub min_score_gap: f64,
    pub draws: usize,
}

/// Distinct points of a column set, in first-seen order.
pub fn distinct_columns(seqs: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for x in seqs {
        for k in 0..x.ncols() {
            if seen.insert(col_key(x, k)) {
                out.push(x.column(k).into_owned());
            }
        }
    }
    out
}

/// |u·u'| = (N+1)⁴·(πd/8)·κ/(η·r_min), N the number of points.
pub fn lemma_product(count: usize, d: usize, kappa: f64, eta: f64, r_min: f64) -> f64 {
    ((count + 1) as f64).powi(4) * std::f64::consts::PI * d as f64 / 8.0 * kappa / (eta * r_min)
}

fn band_lower(count: usize, d: usize) -> f64 {
    (8.0 / (std::f64::consts::PI * d as f64)).sqrt() / ((count + 1) as f64).powi(2)
}

/// min_{a≠b}|vᵀ(a−b)| and min_c |vᵀc|, which bound every triple exhaustively.
fn projection_gaps(v: &DVector<f64>, pts: &[DVector<f64>]) -> (f64, f64) {
    let mut proj: Vec<f64> = pts.iter().map(|p| v.dot(p)).collect();
    let min_abs = proj.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    proj.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let gap = proj.windows(2).fold(f64::INFINITY, |m, w| m.min(w[1] - w[0]));
    (gap, min_abs)
}

/// Rejection-samples unit vectors until the score-gap and projection-band
/// conditions hold for every token triple.
pub fn find_separating_vector(points: &[DVector<f64>], kappa: f64, seed: u64) -> Result<SeparatingVector> {
    find_separating_vector_budget(points, kappa, seed, SEARCH_BUDGET)
}

pub fn find_separating_vector_budget(points: &[DVector<f64>], kappa: f64, seed: u64, budget: usize) -> Result<SeparatingVector> {
    if points.is_empty() {
        return Err(Error::EmptyInput("no finite entries".into()));
    }
    let d = points[0].len();
    let r_min = points.iter().map(|p| p.norm()).fold(f64::INFINITY, f64::min);
    let mut eta = f64::INFINITY;
    for a in 0..points.len() {
        for b in (a + 1)..points.len() {
            eta = eta.min((&points[a] - &points[b]).norm());
        }
    }
    if !(r_min > 0.0) || !(eta > 0.0) {
        return Err(Error::Certification("points must be nonzero and distinct".into()));
    }
    let eta = if eta.is_finite() { eta } else { r_min };
    let product = lemma_product(points.len(), d, kappa, eta, r_min);
    let lower = band_lower(points.len(), d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for draw in 1..=budget {
        let raw: DVector<f64> = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..=1.0));
        let nrm = raw.norm();
        if !(nrm <= 1.0 && nrm > 1e-3) {
            continue;
        }
        let v = raw / nrm;
        let band = points.iter().all(|c| {
            let p = v.dot(c).abs();
            p >= lower * c.norm() && p <= c.norm() * (1.0 + 1e-12)
        });
        if !band {
            continue;
        }
        let (gap, min_abs) = projection_gaps(&v, points);
        let min_score_gap = if points.len() > 1 { product * gap * min_abs } else { f64::INFINITY };
        if min_score_gap > kappa {
            let u = product.sqrt();
            return Ok(SeparatingVector { v, u, u_prime: u, min_score_gap, draws: draw });
        }
    }
    Err(Error::SearchBudget(budget))
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_o: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub mask: DMatrix<f64>,
}

/// n×n causal mask: 0 where the key index is at most the query index, −∞ above.
pub fn causal_mask(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |l, k| if l <= k { 0.0 } else { f64::NEG_INFINITY })
}

/// X + W_O W_V X σ_S[(W_K X)ᵀ(W_Q X) + M].
pub fn attention_forward(p: &AttentionParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, n) = x.shape();
    let s = p.w_v.nrows();
    let ok = p.w_k.shape() == (s, d) && p.w_q.shape() == (s, d) && p.w_v.ncols() == d && p.w_o.shape() == (d, s) && p.mask.shape() == (n, n);
    if !ok {
        return Err(Error::Shape(format!("attention weights do not fit a {d}x{n} input")));
    }
    let scores = (&p.w_k * x).transpose() * (&p.w_q * x) + &p.mask;
    let attn = softmax_cols(&scores)?;
    Ok(x + &p.w_o * (&p.w_v * x) * attn)
}

/// How |u·u'| is chosen when building the attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScoreScale {
    /// The lemma's value (N+1)⁴(πd/8)κ/(η r_min).
    Lemma,
    /// The smallest value keeping every score gap above κ.
    Tight,
    /// Largest |score| over the inputs equals the given value.
    Bounded(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextualCert {
    pub scale: ScoreScale,
    pub product: f64,
    pub r: f64,
    /// ln γ from the lemma; γ itself underflows for any realistic input.
    pub log_gamma_lemma: f64,
    /// max(γ_lemma, GAMMA_FLOOR), the threshold actually certified.
    pub gamma: f64,
    pub min_distance: f64,
    pub max_norm: f64,
    /// Pairs (seq, col) whose prefixes differ but whose outputs are within γ,
    /// or columns with norm ≥ r.
    pub witnesses: Vec<((usize, usize), (usize, usize))>,
}

impl ContextualCert {
    pub fn passes(&self) -> bool {
        self.witnesses.is_empty() && self.max_norm < self.r
    }
}

/// ln of the lemma's γ with κ = 2 log n + 3.
pub fn log_gamma_lemma(n: usize, count: usize, d: usize, eta: f64, r_min: f64, r_max: f64) -> f64 {
    let ln_n = (n as f64).ln();
    let kappa = 2.0 * ln_n + 3.0;
    let v4 = ((count + 1) as f64).powi(4);
    let pi_d = std::f64::consts::PI * d as f64;
    let pre = 2.0 * ln_n * ln_n * eta * eta * r_min / (r_max * r_max * v4 * kappa * pi_d);
    pre.ln() - v4 * kappa * pi_d * r_max * r_max / (4.0 * eta * r_min)
}

/// Default κ for sequences of width n.
pub fn default_kappa(n: usize) -> f64 {
    2.0 * (n as f64).ln() + 3.0
}

/// Builds the rank-1 attention layer and certifies it over every
/// (sequence, column) output, comparing columns by their full prefix.
pub fn build_contextual_attention(seqs: &[DMatrix<f64>], kappa: f64, seed: u64, scale: ScoreScale) -> Result<(AttentionParams, ContextualCert)> {
    let sep = check_separateness(seqs);
    if !sep.is_valid() {
        return Err(Error::Certification(format!("inputs are not tokenwise separated: {:?}", sep.witnesses.first())));
    }
    let (d, n) = seqs[0].shape();
    if seqs.iter().any(|x| x.shape() != (d, n)) {
        return Err(Error::Shape("sequences differ in shape".into()));
    }
    let pts = distinct_columns(seqs);
    let sv = find_separating_vector(&pts, kappa, seed)?;
    let v = &sv.v;
    let lemma = sv.u * sv.u_prime;
    let (gap, min_abs) = projection_gaps(v, &pts);
    let max_abs = pts.iter().fold(0.0f64, |m, p| m.max(v.dot(p).abs()));
    let product = match scale {
        ScoreScale::Lemma => lemma,
        ScoreScale::Tight => kappa / (gap * min_abs) * (1.0 + 1e-9),
        ScoreScale::Bounded(s) => s / (max_abs * max_abs),
    };
    let root = product.sqrt();
    let vt = DMatrix::from_row_slice(1, d, v.as_slice());
    let w_o = DMatrix::from_column_slice(d, 1, v.as_slice()) * (sep.eta / (4.0 * sep.r_max));
    let params = AttentionParams { w_o, w_v: vt.clone(), w_k: &vt * root, w_q: &vt * root, mask: causal_mask(n) };
    let outs: Vec<DMatrix<f64>> = seqs.iter().map(|x| attention_forward(&params, x)).collect::<Result<_>>()?;

    let r = sep.r_max + sep.eta / 4.0;
    let lg = log_gamma_lemma(n, pts.len(), d, sep.eta, sep.r_min, sep.r_max);
    let gamma = lg.exp().max(GAMMA_FLOOR);
    // One representative output per distinct prefix.
    let mut reps: std::collections::BTreeMap<Vec<u64>, ((usize, usize), DVector<f64>)> = Default::default();
    let mut witnesses = Vec::new();
    let mut max_norm = 0.0f64;
    for (i, (x, o)) in seqs.iter().zip(&outs).enumerate() {
        let mut prefix = Vec::new();
        for k in 0..n {
            prefix.extend(col_key(x, k));
            max_norm = max_norm.max(o.column(k).norm());
            reps.entry(prefix.clone()).or_insert(((i, k), o.column(k).into_owned()));
        }
    }
    let reps: Vec<_> = reps.into_values().collect();
    let mut min_distance = f64::INFINITY;
    for a in 0..reps.len() {
        for b in (a + 1)..reps.len() {
            let dist = (&reps[a].1 - &reps[b].1).norm();
            min_distance = min_distance.min(dist);
            if dist <= gamma {
                witnesses.push((reps[a].0, reps[b].0));
            }
        }
    }
    let cert = ContextualCert { scale, product, r, log_gamma_lemma: lg, gamma, min_distance, max_norm, witnesses };
    Ok((params, cert))
}

// ---------------------------------------------------------------------------
// Feed-forward layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub residual: bool,
}

impl FfnParams {
    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if self.w1.ncols() != x.len() || self.w2.ncols() != self.w1.nrows() || self.b1.len() != self.w1.nrows() || self.b2.len() != self.w2.nrows() {
            return Err(Error::Shape(format!("FFN does not accept an input of length {}", x.len())));
        }
        let h = (&self.w1 * x + &self.b1).map(|v| v.max(0.0));
        let y = &self.w2 * h + &self.b2;
        if self.residual {
            if y.len() != x.len() {
                return Err(Error::Shape("residual FFN must preserve width".into()));
            }
            Ok(x + y)
        } else {
            Ok(y)
        }
    }
}

/// Rewrites x + W2σ(W1x+b1) + b2 as a single non-residual ReLU net of width
/// r + 2d, using x = σ(x) − σ(−x).
pub fn residual_eliminate(ffn: &FfnParams) -> FfnParams {
    let d = ffn.w1.ncols();
    let r = ffn.w1.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut w1 = DMatrix::zeros(r + 2 * d, d);
    w1.view_mut((0, 0), (r, d)).copy_from(&ffn.w1);
    w1.view_mut((r, 0), (d, d)).copy_from(&eye);
    w1.view_mut((r + d, 0), (d, d)).copy_from(&(-&eye));
    let mut b1 = DVector::zeros(r + 2 * d);
    b1.rows_mut(0, r).copy_from(&ffn.b1);
    let out = ffn.w2.nrows();
    let mut w2 = DMatrix::zeros(out, r + 2 * d);
    w2.view_mut((0, 0), (out, r)).copy_from(&ffn.w2);
    if ffn.residual {
        w2.view_mut((0, r), (out, d)).copy_from(&eye);
        w2.view_mut((0, r + d), (out, d)).copy_from(&(-&eye));
    }
    FfnParams { w1, b1, w2, b2: ffn.b2.clone(), residual: false }
}

// ---------------------------------------------------------------------------
// Memorizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MemorizerModel {
    /// Token embeddings (input map), indexed by token id.
    pub embeddings: Vec<Vec<f64>>,
    pub sos: TokenId,
    pub pad: TokenId,
    /// Token ids of the output coordinates.
    pub outputs: Vec<TokenId>,
    pub p: DMatrix<f64>,
    pub attention: AttentionParams,
    pub ffn: FfnParams,
    pub out_map: DMatrix<f64>,
    pub width: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorizerReport {
    pub histories: usize,
    pub separateness: SeparatenessCert,
    pub contextual: ContextualCert,
    /// Scales tried before one certified.
    pub scales_tried: Vec<ScoreScale>,
    /// Smallest gap between scalar context ids.
    pub id_gap: f64,
    pub width: usize,
    /// max over stored histories of the sup-norm error.
    pub max_error: f64,
}

/// Input matrix X + P: SOS in column 1, the history next, PAD after.
pub fn encode(emb: &[Vec<f64>], sos: TokenId, pad: TokenId, p: &DMatrix<f64>, h: &[TokenId]) -> Result<DMatrix<f64>> {
    let (d, n) = p.shape();
    if h.len() + 1 > n {
        return Err(Error::LengthOverflow { got: h.len() + 1, width: n });
    }
    let mut x = p.clone();
    for k in 0..n {
        let t = if k == 0 {
            sos
        } else if k <= h.len() {
            h[k - 1]
        } else {
            pad
        };
        let e = emb.get(t).ok_or_else(|| Error::Shape(format!("token {t} has no embedding")))?;
        if e.len() != d {
            return Err(Error::Shape("embedding width differs from d".into()));
        }
        for i in 0..d {
            x[(i, k)] += e[i];
        }
    }
    Ok(x)
}

/// Every non-forced reachable history (length ≤ n−2) with its next-token
/// distribution over the emission alphabet.
pub fn memorizer_pairs(world: &World) -> Result<Vec<(Sequence, Vec<f64>)>> {
    let emission = world.vocab.emission();
    let mut out = Vec::new();
    for h in world::enumerate_histories(world)? {
        if h.genuine_length() + 2 > world.n {
            continue;
        }
        let post = inference::posterior(world, &h, None)?;
        let mut target = vec![0.0; emission.len()];
        for k in 0..world.num_content() {
            let row = world.dist(k, h.tokens());
            for (i, &t) in emission.iter().enumerate() {
                target[i] += post.weights[k] * row[t];
            }
        }
        out.push((h, target));
    }
    Ok(out)
}

/// Scales tried in order; the first one whose certificate passes is used.
pub const SCALE_LADDER: [ScoreScale; 4] = [ScoreScale::Lemma, ScoreScale::Tight, ScoreScale::Bounded(4.0), ScoreScale::Bounded(1.0)];

/// Builds T with T(h) = target(h) for every pair. Histories are evaluated at
/// their last genuine column (the SOS column for the empty history).
pub fn build_memorizer(vocab: &Vocab, n: usize, pairs: &[(Sequence, Vec<f64>)], seed: u64) -> Result<(MemorizerModel, MemorizerReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no finite entries".into()));
    }
    let outputs = vocab.emission().to_vec();
    for (i, (h, t)) in pairs.iter().enumerate() {
        if t.len() != outputs.len() {
            return Err(Error::Shape(format!("target {i} has {} entries, expected {}", t.len(), outputs.len())));
        }
        if t.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::assumption("floor", format!("target {i} has an entry that is not positive")));
        }
        if (t.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Shape(format!("target {i} does not sum to 1")));
        }
        if pairs[..i].iter().any(|(g, _)| g.tokens() == h.tokens()) {
            return Err(Error::config("pairs", format!("history {i} is repeated")));
        }
    }
    let d = vocab.d();
    let p = positional_encoder(vocab.alpha, d, n);
    let xs: Vec<DMatrix<f64>> = pairs.iter().map(|(h, _)| encode(&vocab.embeddings, vocab.sos, vocab.pad, &p, h.tokens())).collect::<Result<_>>()?;
    let separateness = check_separateness(&xs);
    if !separateness.is_valid() {
        return Err(Error::Certification(format!("encoded histories are not separated: {:?}", separateness.witnesses.first())));
    }
    let kappa = default_kappa(n);
    let mut tried = Vec::new();
    let mut chosen = None;
    for scale in SCALE_LADDER {
        tried.push(scale);
        let (att, cert) = build_contextual_attention(&xs, kappa, seed, scale)?;
        if cert.passes() {
            chosen = Some((att, cert));
            break;
        }
    }
    let (attention, contextual) = chosen.ok_or_else(|| Error::Certification("no score scale separates every context".into()))?;

    let ids: Vec<DVector<f64>> = pairs
        .iter()
        .zip(&xs)
        .map(|((h, _), x)| Ok(attention_forward(&attention, x)?.column(h.genuine_length()).into_owned()))
        .collect::<Result<_>>()?;
    let (w, id_gap) = best_projection(&ids, seed);
    if !(id_gap > GAMMA_FLOOR) {
        return Err(Error::Certification(format!("scalar context ids collide (gap {id_gap:e})")));
    }
    // A single history has no neighbour; any finite half-width works.
    let delta = if id_gap.is_finite() { id_gap / 2.0 } else { 1.0 };
    let m = pairs.len();
    let e = outputs.len();
    let mut w1 = DMatrix::zeros(3 * m, d);
    let mut b1 = DVector::zeros(3 * m);
    let mut w2 = DMatrix::zeros(e, 3 * m);
    for (i, ((_, target), z)) in pairs.iter().zip(&ids).enumerate() {
        let s = w.dot(z);
        for (j, off) in [-delta, 0.0, delta].into_iter().enumerate() {
            w1.row_mut(3 * i + j).copy_from(&w.transpose());
            b1[3 * i + j] = -(s + off);
        }
        for (o, &pt) in target.iter().enumerate() {
            let logit = pt.ln();
            w2[(o, 3 * i)] = logit / delta;
            w2[(o, 3 * i + 1)] = -2.0 * logit / delta;
            w2[(o, 3 * i + 2)] = logit / delta;
        }
    }
    let ffn = FfnParams { w1, b1, w2, b2: DVector::zeros(e), residual: false };
    let model = MemorizerModel {
        embeddings: vocab.embeddings.clone(),
        sos: vocab.sos,
        pad: vocab.pad,
        outputs,
        p,
        attention,
        ffn,
        out_map: DMatrix::identity(e, e),
        width: 3 * m,
        depth: 1,
    };
    let mut max_error = 0.0f64;
    for (h, target) in pairs {
        let got = model_forward(&model, h)?;
        for (a, b) in got.iter().zip(target) {
            max_error = max_error.max((a - b).abs());
        }
    }
    let report = MemorizerReport { histories: m, separateness, contextual, scales_tried: tried, id_gap, width: 3 * m, max_error };
    Ok((model, report))
}

/// Unit direction maximizing the smallest gap between projected ids; axes
/// first, then seeded random candidates.
fn best_projection(ids: &[DVector<f64>], seed: u64) -> (DVector<f64>, f64) {
    let d = ids[0].len();
    let gap_of = |w: &DVector<f64>| {
        let mut s: Vec<f64> = ids.iter().map(|z| w.dot(z)).collect();
        s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        s.windows(2).fold(f64::INFINITY, |m, p| m.min(p[1] - p[0]))
    };
    let mut best = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let mut best_gap = gap_of(&best);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cands: Vec<DVector<f64>> = (0..d).map(|a| DVector::from_fn(d, |i, _| if i == a { 1.0 } else { 0.0 })).collect();
    for _ in 0..4096 {
        let raw: DVector<f64> = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..=1.0));
        if raw.norm() > 1e-3 {
            cands.push(raw.normalize());
        }
    }
    for c in cands {
        let g = gap_of(&c);
        if g > best_gap {
            best_gap = g;
            best = c;
        }
    }
    (best, best_gap)
}

/// softmax ∘ out_map ∘ FFN ∘ SA ∘ (X + P), read at the last genuine column.
pub fn model_forward(model: &MemorizerModel, h: &Sequence) -> Result<Vec<f64>> {
    let x = encode(&model.embeddings, model.sos, model.pad, &model.p, h.tokens())?;
    let z = attention_forward(&model.attention, &x)?;
    let hidden = model.ffn.forward(&z.column(h.genuine_length()).into_owned())?;
    if model.out_map.ncols() != hidden.len() {
        return Err(Error::Shape("out_map does not match the FFN output".into()));
    }
    let logits = &model.out_map * hidden;
    softmax(logits.as_slice())
}

// ---------------------------------------------------------------------------
// Dump / load with bit-exact hex floats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct HexMatrix {
    rows: usize,
    cols: usize,
    /// Row-major IEEE-754 bit patterns as 16 hex digits.
    data: Vec<String>,
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|e| Error::Parse(format!("bad hex float {s:?}: {e}")))
}

impl HexMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(hex(m[(i, j)]));
            }
        }
        HexMatrix { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse(format!("matrix {}x{} has {} entries", self.rows, self.cols, self.data.len())));
        }
        let vals: Vec<f64> = self.data.iter().map(|s| unhex(s)).collect::<Result<_>>()?;
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &vals))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDump {
    format_version: u32,
    sos: TokenId,
    pad: TokenId,
    outputs: Vec<TokenId>,
    width: usize,
    depth: usize,
    embeddings: HexMatrix,
    p: HexMatrix,
    w_o: HexMatrix,
    w_v: HexMatrix,
    w_k: HexMatrix,
    w_q: HexMatrix,
    mask: HexMatrix,
    w1: HexMatrix,
    b1: HexMatrix,
    w2: HexMatrix,
    b2: HexMatrix,
    residual: bool,
    out_map: HexMatrix,
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

impl MemorizerModel {
    pub fn to_json(&self) -> String {
        let d = self.p.nrows();
        let emb = DMatrix::from_fn(self.embeddings.len(), d, |i, j| self.embeddings[i][j]);
        let dump = ModelDump {
            format_version: MODEL_FORMAT_VERSION,
            sos: self.sos,
            pad: self.pad,
            outputs: self.outputs.clone(),
            width: self.width,
            depth: self.depth,
            embeddings: HexMatrix::from(&emb),
            p: HexMatrix::from(&self.p),
            w_o: HexMatrix::from(&self.attention.w_o),
            w_v: HexMatrix::from(&self.attention.w_v),
            w_k: HexMatrix::from(&self.attention.w_k),
            w_q: HexMatrix::from(&self.attention.w_q),
            mask: HexMatrix::from(&self.attention.mask),
            w1: HexMatrix::from(&self.ffn.w1),
            b1: HexMatrix::from(&col(&self.ffn.b1)),
            w2: HexMatrix::from(&self.ffn.w2),
            b2: HexMatrix::from(&col(&self.ffn.b2)),
            residual: self.ffn.residual,
            out_map: HexMatrix::from(&self.out_map),
        };
        serde_json::to_string_pretty(&dump).expect("model dump serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dump: ModelDump = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if dump.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported model format version {}", dump.format_version)));
        }
        let emb = dump.embeddings.to_matrix()?;
        let vec_of = |m: &HexMatrix| -> Result<DVector<f64>> { Ok(DVector::from_column_slice(m.to_matrix()?.as_slice())) };
        Ok(MemorizerModel {
            embeddings: (0..emb.nrows()).map(|i| emb.row(i).iter().cloned().collect()).collect(),
            sos: dump.sos,
            pad: dump.pad,
            outputs: dump.outputs,
            p: dump.p.to_matrix()?,
            attention: AttentionParams {
                w_o: dump.w_o.to_matrix()?,
                w_v: dump.w_v.to_matrix()?,
                w_k: dump.w_k.to_matrix()?,
                w_q: dump.w_q.to_matrix()?,
                mask: dump.mask.to_matrix()?,
            },
            ffn: FfnParams { w1: dump.w1.to_matrix()?, b1: vec_of(&dump.b1)?, w2: dump.w2.to_matrix()?, b2: vec_of(&dump.b2)?, residual: dump.residual },
            out_map: dump.out_map.to_matrix()?,
            width: dump.width,
            depth: dump.depth,
        })
    }
}
