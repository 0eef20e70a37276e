//! Right-hand sides of the error bounds and the sweep experiments that
//! compare them with exactly measured prediction errors.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, icl_posterior, Posterior};
use crate::prompts::{self, AssumptionConstants, CotPrompt, IclPrompt};
use crate::world::{self, concat, CotWorld, RandomWorldSpec, Sequence, TokenId, World};

/// Default cap on the number of responses a sweep compares.
pub const Y_SET_CAP: usize = 10_000;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundInputs {
    pub v_size: usize,
    pub n: usize,
    /// Number of pretraining sequences; `None` reports the statistical term as 0.
    pub big_n: Option<f64>,
    pub d: usize,
    pub big_m: f64,
    pub r: usize,
    pub delta: f64,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub phi: f64,
    pub varphi: f64,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub epsilon: f64,
    pub delta_mismatch: f64,
    pub m_recip: f64,
    pub ambiguity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub label: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainingTerms {
    /// |V|^{n+2}/(Nn)^{1/4}
    pub width_term: f64,
    /// √(ln(1/δ)/(Nn))
    pub concentration: f64,
    pub main_total: f64,
    /// r·|V|^{n+2}/(Nn)^{1/4} + √(r² ln(1/δ)/(Nn)), the any-response form.
    pub response_total: f64,
    /// |V|²M/(Nn)^{1/4}, the appendix variant of the width term.
    pub appendix_width_term: f64,
    /// √(|V|d²(d+M)(n²+dn+|V|d+|V|M))·ln(Nn)/√(Nn)
    pub rademacher: f64,
    /// The same with the extra |V| factor from summing over output coordinates.
    pub rademacher_summed: f64,
}

/// Statistical terms with unit constants. Overflow shows up as +∞.
pub fn rhs_pretraining(inp: &BoundInputs) -> PretrainingTerms {
    let nn = inp.big_n.unwrap_or(f64::INFINITY) * inp.n as f64;
    let v = inp.v_size as f64;
    let (n, d, m, r) = (inp.n as f64, inp.d as f64, inp.big_m, inp.r.max(1) as f64);
    let quart = nn.powf(0.25);
    let width_term = v.powf(n + 2.0) / quart;
    let log_inv = (1.0 / inp.delta).ln();
    let concentration = (log_inv / nn).sqrt();
    let cap = v * d * d * (d + m) * (n * n + d * n + v * d + v * m);
    let rademacher = cap.sqrt() * nn.ln() / nn.sqrt();
    let zero_if_inf = |x: f64| if nn.is_infinite() { 0.0 } else { x };
    PretrainingTerms {
        width_term: zero_if_inf(width_term),
        concentration: zero_if_inf(concentration),
        main_total: zero_if_inf(width_term + concentration),
        response_total: zero_if_inf(r * width_term + (r * r * log_inv / nn).sqrt()),
        appendix_width_term: zero_if_inf(v * v * m / quart),
        rademacher: zero_if_inf(rademacher),
        rademacher_summed: zero_if_inf(v * rademacher),
    }
}

/// Statistical term used by the ICL/CoT reports (0 without N).
fn stat_term(inp: &BoundInputs) -> f64 {
    if inp.big_n.is_none() {
        0.0
    } else {
        rhs_pretraining(inp).response_total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhsComponents {
    pub stat: f64,
    /// r·φ as stated.
    pub rphi_stated: f64,
    /// e^{rφ} − 1, the exact drift used for slack.
    pub rphi: f64,
    pub mismatch: f64,
    pub decay: f64,
}

impl RhsComponents {
    /// Total excluding the statistical term (exact-q regime).
    pub fn total(&self) -> f64 {
        self.rphi + self.mismatch + self.decay
    }

    pub fn labeled(&self) -> Vec<Component> {
        vec![
            Component { label: "statistical", value: self.stat },
            Component { label: "r_phi", value: self.rphi },
            Component { label: "mismatch", value: self.mismatch },
            Component { label: "decay", value: self.decay },
        ]
    }
}

fn drift(inp: &BoundInputs) -> (f64, f64) {
    let rp = inp.r as f64 * inp.phi;
    (rp, rp.exp_m1())
}

/// Decay ratio e^{2nφ}·c·ε of the ICL bound.
pub fn icl_rate(inp: &BoundInputs) -> f64 {
    (2.0 * inp.n as f64 * inp.phi).exp() * inp.c * inp.epsilon
}

/// ICL bound: rφ + (e^{2nφ}cε)^m·𝒜(x).
pub fn rhs_icl(inp: &BoundInputs) -> RhsComponents {
    let (rphi_stated, rphi) = drift(inp);
    RhsComponents { stat: stat_term(inp), rphi_stated, rphi, mismatch: 0.0, decay: icl_rate(inp).powi(inp.m as i32) * inp.ambiguity }
}

/// CoT bound: rφ + ℳΔ + C·(e^{2nφ}c₁ε)^{mK}; the shifted variant swaps ℳΔ for
/// 2nφ + 3mℳ(φ_shift + Δ). A K above L marks a singleton support (decay 0).
pub fn rhs_cot(inp: &BoundInputs, shifted: bool) -> Result<RhsComponents> {
    let (rphi_stated, rphi) = drift(inp);
    let n = inp.n as f64;
    let mismatch = if shifted {
        2.0 * n * inp.phi + 3.0 * inp.m as f64 * inp.m_recip * (inp.varphi + inp.delta_mismatch)
    } else if inp.delta_mismatch == 0.0 {
        0.0
    } else {
        inp.m_recip * inp.delta_mismatch
    };
    let decay = if inp.k > inp.l {
        0.0
    } else {
        let ce = inp.c1 * inp.epsilon;
        if ce >= 1.0 {
            return Err(Error::Divergence(ce));
        }
        let big_c = inp.c1 * (2.0 * n * (inp.l as f64 - inp.k as f64) * inp.phi).exp() * inp.c2.powi(-(inp.m as i32 + 1)) / (1.0 - ce);
        let rate = (2.0 * n * inp.phi).exp() * ce;
        big_c * rate.powi((inp.m * inp.k) as i32)
    };
    Ok(RhsComponents { stat: stat_term(inp), rphi_stated, rphi, mismatch, decay })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub run_id: String,
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub constants: AssumptionConstants,
    /// ε used by this bound (ICL or CoT form).
    pub epsilon: f64,
    pub ambiguity: f64,
    pub measured_error: f64,
    pub rhs: RhsComponents,
    pub rhs_components: Vec<Component>,
    pub rhs_total: f64,
    pub slack: f64,
    /// Additional diagnostics (posterior concentration, decay rate, ...).
    pub extras: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(run_id: String, m: usize, k: usize, l: usize, constants: AssumptionConstants, epsilon: f64, ambiguity: f64, measured: f64, rhs: RhsComponents) -> Self {
        let total = rhs.total();
        BoundReport {
            run_id,
            m,
            k,
            l,
            constants,
            epsilon,
            ambiguity,
            measured_error: measured,
            rhs_components: rhs.labeled(),
            rhs_total: total,
            slack: total - measured,
            rhs,
            extras: BTreeMap::new(),
        }
    }
}

pub const CSV_HEADER: [&str; 20] = [
    "run_id", "m", "K", "L", "phi", "varphi", "c", "c1", "c2", "epsilon", "delta_mismatch", "M_recip", "ambiguity", "measured", "rhs_stat", "rhs_rphi",
    "rhs_mismatch", "rhs_decay", "rhs_total", "slack",
];

/// 17 significant digits, '.' decimal separator, independent of locale.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn reports_to_csv(reports: &[BoundReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io { path: "csv".into(), msg: e.to_string() };
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in reports {
        let c = &r.constants;
        let row = vec![
            r.run_id.clone(),
            r.m.to_string(),
            r.k.to_string(),
            r.l.to_string(),
            fmt17(c.phi),
            fmt17(c.varphi),
            fmt17(c.c),
            fmt17(c.c1),
            fmt17(c.c2),
            fmt17(r.epsilon),
            fmt17(c.delta_mismatch),
            fmt17(c.m_recip),
            fmt17(r.ambiguity),
            fmt17(r.measured_error),
            fmt17(r.rhs.stat),
            fmt17(r.rhs.rphi),
            fmt17(r.rhs.mismatch),
            fmt17(r.rhs.decay),
            fmt17(r.rhs_total),
            fmt17(r.slack),
        ];
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io { path: "csv".into(), msg: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

// ---------------------------------------------------------------------------
// Response sets
// ---------------------------------------------------------------------------

fn words(alphabet: &[TokenId], len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|w| {
                alphabet.iter().map(move |&t| {
                    let mut v = w.clone();
                    v.push(t);
                    v
                })
            })
            .collect();
    }
    out
}

/// Responses of length `r`: all content words of length r plus every shorter
/// content word followed by EOS. Exhaustive when the count fits `cap`,
/// otherwise a seeded subset of size `cap`.
pub fn response_set(world: &World, r: usize, cap: usize, seed: u64) -> Result<Vec<Sequence>> {
    let content = world.vocab.content();
    let count: f64 = (content.len() as f64).powi(r as i32) + (0..r).map(|k| (content.len() as f64).powi(k as i32)).sum::<f64>();
    if count > world::ENUM_GUARD * 10.0 {
        return Err(Error::Explosion { count, guard: world::ENUM_GUARD * 10.0 });
    }
    let mut all: Vec<Vec<TokenId>> = words(content, r);
    for k in 0..r {
        for mut w in words(content, k) {
            w.push(world.vocab.eos);
            all.push(w);
        }
    }
    if all.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(cap);
        all.sort();
    }
    all.into_iter().map(|w| world.seq(&w)).collect()
}

// ---------------------------------------------------------------------------
// Zero-shot
// ---------------------------------------------------------------------------

/// max over y of |q(y|x) − q(y|x,θ_x)| against 𝒜(x).
pub fn run_zero_shot(world: &World, x: &Sequence, y_set: &[Sequence]) -> Result<BoundReport> {
    let post = inference::posterior(world, x, None)?;
    let amb = inference::report(&post, |&id| id);
    let kx = world.content_index(amb.dominated_task)?;
    let mut measured: f64 = 0.0;
    for y in y_set {
        let total = x.genuine_length() + y.genuine_length();
        if total > world.n {
            return Err(Error::LengthOverflow { got: total, width: world.n });
        }
        let mut mix = 0.0;
        for k in 0..world.num_content() {
            if post.weights[k] > 0.0 {
                mix += post.weights[k] * world.log_chain(k, x.tokens(), y.tokens()).exp();
            }
        }
        let own = world.log_chain(kx, x.tokens(), y.tokens()).exp();
        measured = measured.max((mix - own).abs());
    }
    let rhs = RhsComponents { stat: 0.0, rphi_stated: 0.0, rphi: 0.0, mismatch: 0.0, decay: amb.ambiguity };
    let constants = AssumptionConstants { c: prompts::prior_imbalance(world)?, ..Default::default() };
    Ok(BoundReport::new("zero-shot".into(), 0, 0, 1, constants, 0.0, amb.ambiguity, measured, rhs))
}

// ---------------------------------------------------------------------------
// ICL sweep
// ---------------------------------------------------------------------------

/// Inputs for an ICL sweep: demonstrations cycle when m exceeds their count.
#[derive(Debug, Clone)]
pub struct IclConfig {
    pub demos: Vec<(Sequence, Sequence)>,
    pub query: Sequence,
    pub r: usize,
    pub y_cap: usize,
    pub seed: u64,
    pub big_n: Option<f64>,
    pub delta: f64,
    pub parallel: usize,
}

fn icl_prompt(world: &World, cfg: &IclConfig, m: usize) -> Result<IclPrompt> {
    if m > 0 && cfg.demos.is_empty() {
        return Err(Error::config("demos", "m > 0 needs at least one demonstration"));
    }
    let demos = (0..m).map(|i| cfg.demos[i % cfg.demos.len()].clone()).collect();
    prompts::build_icl(demos, world.vocab.delim, cfg.query.clone())
}

/// Hard gates for the ICL bound; returns (θ_x, φ, c).
pub fn check_icl_assumptions(world: &World, cfg: &IclConfig) -> Result<(usize, f64, f64)> {
    if !world.has_delimiter_task() {
        return Err(Error::assumption("tasks of delimiter", "world has no deterministic delimiter task"));
    }
    let theta_x = inference::ambiguity(world, &cfg.query, None)?.dominated_task;
    for (i, (x, y)) in cfg.demos.iter().enumerate() {
        let t = inference::ambiguity(world, &concat(&[x, y])?, None)?.dominated_task;
        if t != theta_x {
            return Err(Error::assumption("task consistency", format!("demo {i} is dominated by task {t}, the query by task {theta_x}")));
        }
    }
    let phi = prompts::estimate_phi(world, world.n)?;
    let c = prompts::prior_imbalance(world)?;
    if !phi.is_finite() {
        return Err(Error::assumption("nearly markov", "phi is infinite"));
    }
    Ok((theta_x, phi, c))
}

fn pool(parallel: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build().map_err(|e| Error::config("parallel", e.to_string()))
}

fn icl_cell(world: &World, cfg: &IclConfig, m: usize, theta_x: usize, phi: f64, c: f64, y_set: &[Sequence]) -> Result<BoundReport> {
    let prompt = icl_prompt(world, cfg, m)?;
    let post: Posterior<usize> = icl_posterior(world, &prompt)?;
    let kx = world.content_index(theta_x)?;
    let ctx = prompt.flattened.tokens();
    let x = cfg.query.tokens();
    let mut measured: f64 = 0.0;
    for y in y_set {
        let total = ctx.len() + y.genuine_length();
        if total > world.n {
            return Err(Error::LengthOverflow { got: total, width: world.n });
        }
        let mut mix = 0.0;
        for k in 0..world.num_content() {
            if post.weights[k] > 0.0 {
                mix += post.weights[k] * world.log_chain(k, ctx, y.tokens()).exp();
            }
        }
        let own = world.log_chain(kx, x, y.tokens()).exp();
        measured = measured.max((mix - own).abs());
    }
    let eps = prompts::epsilon_icl(world, &prompt)?;
    let amb = inference::ambiguity(world, &cfg.query, None)?.ambiguity;
    let inp = BoundInputs {
        v_size: world.vocab.size(),
        n: world.n,
        big_n: cfg.big_n,
        d: world.vocab.d(),
        r: cfg.r,
        delta: cfg.delta,
        m,
        l: 1,
        phi,
        c,
        epsilon: eps,
        ambiguity: amb,
        ..Default::default()
    };
    let rhs = rhs_icl(&inp);
    let constants = AssumptionConstants { phi, c, epsilon_icl: eps, k: 1, ..Default::default() };
    let mut rep = BoundReport::new(format!("icl-s{}-m{m}", cfg.seed), m, 1, 1, constants, eps, amb, measured, rhs);
    rep.extras.insert("posterior_theta_x".into(), post.weight_of(&theta_x));
    rep.extras.insert("decay_rate".into(), icl_rate(&inp));
    rep.extras.insert("r_phi_stated".into(), rep.rhs.rphi_stated);
    Ok(rep)
}

/// One report per m; results are independent of the parallelism hint.
pub fn run_icl_sweep(world: &World, cfg: &IclConfig, m_range: std::ops::RangeInclusive<usize>) -> Result<Vec<BoundReport>> {
    let (theta_x, phi, c) = check_icl_assumptions(world, cfg)?;
    let y_set = response_set(world, cfg.r, cfg.y_cap, cfg.seed)?;
    let ms: Vec<usize> = m_range.collect();
    let out: Vec<Result<BoundReport>> = pool(cfg.parallel)?.install(|| ms.par_iter().map(|&m| icl_cell(world, cfg, m, theta_x, phi, c, &y_set)).collect());
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// CoT sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CotConfig {
    pub demos: Vec<(Sequence, Vec<Sequence>)>,
    pub query: Sequence,
    /// Token count of each response step.
    pub step_lengths: Vec<usize>,
    pub y_cap: usize,
    pub seed: u64,
    pub shifted: bool,
    pub big_n: Option<f64>,
    pub delta: f64,
    pub parallel: usize,
}

fn cot_prompt(cw: &CotWorld, cfg: &CotConfig, m: usize) -> Result<CotPrompt> {
    if cfg.demos.is_empty() {
        return Err(Error::config("demos", "CoT sweeps need at least one demonstration"));
    }
    let demos = (0..m).map(|i| cfg.demos[i % cfg.demos.len()].clone()).collect();
    prompts::build_cot(demos, cw.base.vocab.delim, cfg.query.clone())
}

/// Per-step responses: every content word of the total step length, split.
fn step_responses(world: &World, lens: &[usize], cap: usize, seed: u64) -> Result<Vec<Vec<Vec<TokenId>>>> {
    let total: usize = lens.iter().sum();
    let count = (world.vocab.content().len() as f64).powi(total as i32);
    if count > world::ENUM_GUARD * 10.0 {
        return Err(Error::Explosion { count, guard: world::ENUM_GUARD * 10.0 });
    }
    let mut all = words(world.vocab.content(), total);
    if all.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(cap);
        all.sort();
    }
    Ok(all
        .into_iter()
        .map(|w| {
            let mut at = 0;
            lens.iter()
                .map(|&l| {
                    let s = w[at..at + l].to_vec();
                    at += l;
                    s
                })
                .collect()
        })
        .collect())
}

/// log Π_l q̃_l(y_l | ctx∘y_{≺l}, θ_l).
fn log_steps(cw: &CotWorld, ctx: &[TokenId], ys: &[Vec<TokenId>], traj_idx: &[usize]) -> f64 {
    let mut buf = ctx.to_vec();
    let mut lp = 0.0;
    for (l, y) in ys.iter().enumerate() {
        lp += cw.step_world(l + 1).log_chain(traj_idx[l], &buf, y);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        buf.extend_from_slice(y);
    }
    lp
}

/// Every constant the CoT bound needs, measured on one prompt.
pub fn cot_constants(cw: &CotWorld, prompt: &CotPrompt) -> Result<AssumptionConstants> {
    let base = &cw.base;
    let phi = prompts::estimate_phi(base, base.n)?;
    let varphi = match &cw.shifted {
        Some(s) => prompts::estimate_varphi(base, s)?,
        None => 0.0,
    };
    Ok(AssumptionConstants {
        phi,
        varphi,
        c: prompts::prior_imbalance(base)?,
        c1: prompts::regularity_c1(cw, prompt)?,
        c2: prompts::regularity_c2(cw, prompt)?,
        epsilon_icl: 0.0,
        epsilon_cot: prompts::epsilon_cot(base, prompt)?,
        k: prompts::k_separation(cw, prompt)?,
        delta_mismatch: prompts::prior_mismatch(cw, prompt)?,
        m_recip: prompts::m_recip(cw, prompt)?,
    })
}

fn cot_cell(cw: &CotWorld, cfg: &CotConfig, m: usize, star: &[usize], ys: &[Vec<Vec<TokenId>>]) -> Result<BoundReport> {
    let base = &cw.base;
    let prompt = cot_prompt(cw, cfg, m)?;
    let consts = cot_constants(cw, &prompt)?;
    if !consts.phi.is_finite() {
        return Err(Error::assumption("nearly markov", "phi is infinite"));
    }
    let post = inference::composite_posterior(cw, &prompt)?;
    let idx: Vec<Vec<usize>> = post.support.iter().map(|s| inference::traj_indices(base, s)).collect::<Result<_>>()?;
    let star_idx = inference::traj_indices(base, star)?;
    let ctx = prompt.flattened.tokens();
    let total: usize = cfg.step_lengths.iter().sum();
    if ctx.len() + total > base.n {
        return Err(Error::LengthOverflow { got: ctx.len() + total, width: base.n });
    }
    let mut measured: f64 = 0.0;
    for y in ys {
        let mut mix = 0.0;
        for (w, ti) in post.weights.iter().zip(&idx) {
            if *w > 0.0 {
                mix += w * log_steps(cw, ctx, y, ti).exp();
            }
        }
        let own = log_steps(cw, cfg.query.tokens(), y, &star_idx).exp();
        measured = measured.max((mix - own).abs());
    }
    let l = cw.steps();
    let inp = BoundInputs {
        v_size: base.vocab.size(),
        n: base.n,
        big_n: cfg.big_n,
        d: base.vocab.d(),
        r: total,
        delta: cfg.delta,
        m,
        k: consts.k,
        l,
        phi: consts.phi,
        varphi: consts.varphi,
        c: consts.c,
        c1: consts.c1,
        c2: consts.c2,
        epsilon: consts.epsilon_cot,
        delta_mismatch: consts.delta_mismatch,
        m_recip: consts.m_recip,
        ambiguity: inference::ambiguity(base, &cfg.query, None)?.ambiguity,
        ..Default::default()
    };
    let rhs = rhs_cot(&inp, cfg.shifted)?;
    let mut rep = BoundReport::new(format!("cot-s{}-m{m}", cfg.seed), m, consts.k, l, consts.clone(), consts.epsilon_cot, inp.ambiguity, measured, rhs);
    rep.extras.insert("posterior_theta_star".into(), post.weight_of(&star.to_vec()));
    rep.extras.insert("c1_epsilon".into(), consts.c1 * consts.epsilon_cot);
    rep.extras.insert("r_phi_stated".into(), rep.rhs.rphi_stated);
    Ok(rep)
}

/// Hard gates shared by every m of a CoT sweep; returns θ⃗*.
pub fn check_cot_assumptions(cw: &CotWorld, cfg: &CotConfig) -> Result<Vec<usize>> {
    if !cw.base.has_delimiter_task() {
        return Err(Error::assumption("tasks of delimiter", "world has no deterministic delimiter task"));
    }
    let probe = cot_prompt(cw, cfg, cfg.demos.len())?;
    if probe.steps() != cw.steps() || cfg.step_lengths.len() != cw.steps() {
        return Err(Error::config("L", format!("prompt and responses must have L = {} steps", cw.steps())));
    }
    prompts::step_optimal_tasks(&cw.base, &probe)
}

pub fn run_cot_sweep(cw: &CotWorld, cfg: &CotConfig, m_range: std::ops::RangeInclusive<usize>) -> Result<Vec<BoundReport>> {
    let star = check_cot_assumptions(cw, cfg)?;
    let ys = step_responses(&cw.base, &cfg.step_lengths, cfg.y_cap, cfg.seed)?;
    let ms: Vec<usize> = m_range.collect();
    let out: Vec<Result<BoundReport>> = pool(cfg.parallel)?.install(|| ms.par_iter().map(|&m| cot_cell(cw, cfg, m, &star, &ys)).collect());
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Proposition checks on random worlds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct CheckTally {
    pub checked: u64,
    pub violations: u64,
    /// Smallest (rhs − lhs) seen; negative beyond tolerance means a violation.
    pub worst_margin: f64,
}

impl CheckTally {
    fn record(&mut self, lhs: f64, rhs: f64, tol: f64) {
        let margin = rhs - lhs;
        if self.checked == 0 || margin < self.worst_margin {
            self.worst_margin = margin;
        }
        self.checked += 1;
        if margin < -tol {
            self.violations += 1;
        }
    }

    fn merge(&mut self, o: &CheckTally) {
        if o.checked > 0 && (self.checked == 0 || o.worst_margin < self.worst_margin) {
            self.worst_margin = o.worst_margin;
        }
        self.checked += o.checked;
        self.violations += o.violations;
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PropositionReport {
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub monotonicity: CheckTally,
    pub expected_contraction: CheckTally,
    pub conditional_contraction: CheckTally,
    /// How often the pointwise-contraction premise held among the completions tried.
    pub premise_frequency: f64,
    pub entropy_bound: CheckTally,
    pub pinsker: CheckTally,
    pub total_mass: CheckTally,
}

impl PropositionReport {
    pub fn violations(&self) -> u64 {
        self.monotonicity.violations
            + self.expected_contraction.violations
            + self.conditional_contraction.violations
            + self.entropy_bound.violations
            + self.pinsker.violations
            + self.total_mass.violations
    }
}

/// Random world drawn from the family used by proposition checks:
/// emission alphabet ≤ 5, at most 4 tasks, n ≤ 6.
pub fn random_family_world<R: Rng>(rng: &mut R) -> Result<World> {
    let spec = RandomWorldSpec {
        content: rng.gen_range(1..=4),
        tasks: rng.gen_range(1..=4),
        n: rng.gen_range(2..=6),
        b: 0.01,
        table: rng.gen_bool(0.3),
    };
    world::random_world(spec, rng)
}

/// Depth-limited completions x₂ of a context with their predictive mass:
/// content words of length `depth` or shorter words ending in EOS.
fn completions(world: &World, weights: &[f64], ctx: &[TokenId], depth: usize) -> Vec<(Vec<TokenId>, f64)> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, Vec<f64>)> = vec![(Vec::new(), weights.to_vec())];
    while let Some((w, ws)) = stack.pop() {
        let mut full = ctx.to_vec();
        full.extend_from_slice(&w);
        if w.len() == depth || w.last() == Some(&world.vocab.eos) {
            out.push((w, ws.iter().sum()));
            continue;
        }
        for &t in world.vocab.emission() {
            let nw: Vec<f64> = ws.iter().enumerate().map(|(k, &m)| m * world.prob(k, &full, t)).collect();
            if nw.iter().sum::<f64>() > 0.0 {
                let mut g = w.clone();
                g.push(t);
                stack.push((g, nw));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn amb_restricted(weights: &[f64], subset: &[usize]) -> f64 {
    1.0 - subset.iter().map(|&k| weights[k]).fold(0.0, f64::max)
}

fn random_word<R: Rng>(world: &World, len: usize, rng: &mut R) -> Vec<TokenId> {
    let c = world.vocab.content();
    (0..len).map(|_| c[rng.gen_range(0..c.len())]).collect()
}

fn random_dist<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn proposition_trial(seed: u64, trial: u64, tol: f64) -> Result<(PropositionReport, u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let world = random_family_world(&mut rng)?;
    let mut rep = PropositionReport::default();
    let nk = world.num_content();

    // Monotonicity and entropy bound over all short inputs.
    let max_len = (world.n - 1).min(3);
    for len in 1..=max_len {
        for x in words(world.vocab.content(), len) {
            let post = inference::posterior(&world, &world.seq(&x)?, None)?;
            let mut perm: Vec<usize> = (0..nk).collect();
            perm.shuffle(&mut rng);
            let small = rng.gen_range(1..=nk);
            let big = rng.gen_range(small..=nk);
            rep.monotonicity.record(amb_restricted(&post.weights, &perm[..big]), amb_restricted(&post.weights, &perm[..small]), tol);
            let r = inference::report(&post, |&i| i);
            rep.entropy_bound.record(r.ambiguity, 1.0 - (-r.entropy).exp(), tol);
        }
    }

    // Expected and conditional contraction with a random history.
    let (mut premise_hits, mut premise_tries) = (0u64, 0u64);
    for _ in 0..4 {
        let room = world.n - 1;
        if room == 0 {
            break;
        }
        let lh = rng.gen_range(0..room);
        let lx = rng.gen_range(1..=(room - lh));
        let h = world.seq(&random_word(&world, lh, &mut rng))?;
        let x1 = world.seq(&random_word(&world, lx, &mut rng))?;
        let post1 = inference::posterior(&world, &x1, Some(&h))?;
        let r1 = inference::report(&post1, |&i| i);
        rep.entropy_bound.record(r1.ambiguity, 1.0 - (-r1.entropy).exp(), tol);
        let depth = (world.n - lh - lx).min(2);
        let mut ctx = h.tokens().to_vec();
        ctx.extend_from_slice(x1.tokens());
        let comps = completions(&world, &post1.weights, &ctx, depth);
        let mass: f64 = comps.iter().map(|c| c.1).sum();
        rep.total_mass.record((mass - 1.0).abs(), 0.0, tol);
        let k1 = world.content_index(r1.dominated_task)?;
        let mut expect = 0.0;
        for (x2, p) in &comps {
            let mut joined = x1.tokens().to_vec();
            joined.extend_from_slice(x2);
            let post12 = inference::posterior(&world, &world.seq(&joined)?, Some(&h))?;
            let r12 = inference::report(&post12, |&i| i);
            rep.entropy_bound.record(r12.ambiguity, 1.0 - (-r12.entropy).exp(), tol);
            expect += p * r12.ambiguity;
            let lik: Vec<f64> = (0..nk).map(|k| world.log_chain(k, &ctx, x2)).collect();
            premise_tries += 1;
            if r12.dominated_task == r1.dominated_task && lik.iter().all(|&l| lik[k1] >= l) {
                premise_hits += 1;
                rep.conditional_contraction.record(r12.ambiguity, r1.ambiguity, tol);
            }
        }
        rep.expected_contraction.record(expect, r1.ambiguity, tol);
    }

    // Pinsker on random distribution pairs.
    for _ in 0..4 {
        let k = rng.gen_range(2..=6);
        let (p, q) = (random_dist(k, &mut rng), random_dist(k, &mut rng));
        let t = inference::tv(&p, &q)?;
        let kl = inference::kl(&p, &q)?;
        rep.pinsker.record(t, (kl / 2.0).sqrt(), tol);
    }
    Ok((rep, premise_hits, premise_tries))
}

/// Runs every proposition check on `trials` random worlds.
pub fn verify_propositions(trials: usize, seed: u64, parallel: usize) -> Result<PropositionReport> {
    let tol = 1e-9;
    let cells: Vec<u64> = (0..trials as u64).collect();
    let parts: Vec<Result<(PropositionReport, u64, u64)>> = pool(parallel)?.install(|| cells.par_iter().map(|&t| proposition_trial(seed, t, tol)).collect());
    let mut rep = PropositionReport { trials, seed, tolerance: tol, ..Default::default() };
    let (mut hits, mut tries) = (0u64, 0u64);
    for p in parts {
        let (r, h, t) = p?;
        rep.monotonicity.merge(&r.monotonicity);
        rep.expected_contraction.merge(&r.expected_contraction);
        rep.conditional_contraction.merge(&r.conditional_contraction);
        rep.entropy_bound.merge(&r.entropy_bound);
        rep.pinsker.merge(&r.pinsker);
        rep.total_mass.merge(&r.total_mass);
        hits += h;
        tries += t;
    }
    rep.premise_frequency = if tries > 0 { hits as f64 / tries as f64 } else { 0.0 };
    Ok(rep)
}
