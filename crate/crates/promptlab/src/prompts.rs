//! ICL and CoT prompt assembly, parsing, and measurement of the assumption
//! constants that enter the error bounds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, composite_log_likelihood, log_prompt_likelihood, logsumexp, traj_indices};
use crate::world::{concat, CotWorld, QueryRule, Sequence, TokenId, Transition, World, ENUM_GUARD};

/// Log-likelihood threshold below which a trajectory counts as unsupported.
pub const SUPPORT_LOG_FLOOR: f64 = -690.775_527_898_213_7; // ln(1e-300)

#[derive(Debug, Clone, PartialEq)]
pub struct IclPrompt {
    pub demos: Vec<(Sequence, Sequence)>,
    pub delimiter: TokenId,
    pub query: Sequence,
    pub flattened: Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CotPrompt {
    pub demos: Vec<(Sequence, Vec<Sequence>)>,
    pub delimiter: TokenId,
    pub query: Sequence,
    pub flattened: Sequence,
}

impl IclPrompt {
    pub fn m(&self) -> usize {
        self.demos.len()
    }

    /// Input lengths per demonstration; enough to parse the flattened form back.
    pub fn layout(&self) -> Vec<usize> {
        self.demos.iter().map(|d| d.0.genuine_length()).collect()
    }
}

impl CotPrompt {
    pub fn m(&self) -> usize {
        self.demos.len()
    }

    /// Number of reasoning steps per demonstration (L); 0 without demos.
    pub fn steps(&self) -> usize {
        self.demos.first().map_or(0, |d| d.1.len())
    }

    /// (input length, step lengths) per demonstration.
    pub fn layout(&self) -> Vec<(usize, Vec<usize>)> {
        self.demos.iter().map(|(x, ys)| (x.genuine_length(), ys.iter().map(|y| y.genuine_length()).collect())).collect()
    }

    /// The ICL prompt with each demonstration's steps merged into one response.
    pub fn as_icl(&self) -> Result<IclPrompt> {
        let demos = self
            .demos
            .iter()
            .map(|(x, ys)| {
                let refs: Vec<&Sequence> = ys.iter().collect();
                Ok((x.clone(), concat(&refs)?))
            })
            .collect::<Result<Vec<_>>>()?;
        build_icl(demos, self.delimiter, self.query.clone())
    }
}

fn delim_seq(like: &Sequence, delimiter: TokenId) -> Result<Sequence> {
    Sequence::new(vec![delimiter], like.width(), like.pad())
}

/// x₁∘y₁∘delim∘…∘x_m∘y_m∘delim∘query.
pub fn build_icl(demos: Vec<(Sequence, Sequence)>, delimiter: TokenId, query: Sequence) -> Result<IclPrompt> {
    if delimiter == query.pad() {
        return Err(Error::config("delimiter", "delimiter cannot be PAD"));
    }
    let d = delim_seq(&query, delimiter)?;
    let mut parts: Vec<&Sequence> = Vec::new();
    for (i, (x, y)) in demos.iter().enumerate() {
        if x.genuine_length() == 0 || y.genuine_length() == 0 {
            return Err(Error::config(format!("demos[{i}]"), "demonstration input and response must be non-empty"));
        }
        if x.tokens().contains(&delimiter) || y.tokens().contains(&delimiter) {
            return Err(Error::config(format!("demos[{i}]"), "demonstrations may not contain the delimiter"));
        }
        parts.extend([x, y, &d]);
    }
    parts.push(&query);
    let flattened = concat(&parts)?;
    Ok(IclPrompt { demos, delimiter, query, flattened })
}

/// x⁽¹⁾∘y⁽¹⁾₁∘…∘y⁽¹⁾_L∘delim∘…∘x.
pub fn build_cot(demos: Vec<(Sequence, Vec<Sequence>)>, delimiter: TokenId, query: Sequence) -> Result<CotPrompt> {
    if delimiter == query.pad() {
        return Err(Error::config("delimiter", "delimiter cannot be PAD"));
    }
    let l = demos.first().map_or(0, |d| d.1.len());
    let d = delim_seq(&query, delimiter)?;
    let mut parts: Vec<&Sequence> = Vec::new();
    for (i, (x, ys)) in demos.iter().enumerate() {
        if ys.len() != l || l == 0 {
            return Err(Error::config(format!("demos[{i}].y"), format!("every demonstration needs exactly L = {l} >= 1 steps")));
        }
        if x.genuine_length() == 0 || ys.iter().any(|y| y.genuine_length() == 0) {
            return Err(Error::config(format!("demos[{i}]"), "inputs and steps must be non-empty"));
        }
        if x.tokens().contains(&delimiter) || ys.iter().any(|y| y.tokens().contains(&delimiter)) {
            return Err(Error::config(format!("demos[{i}]"), "demonstrations may not contain the delimiter"));
        }
        parts.push(x);
        parts.extend(ys.iter());
        parts.push(&d);
    }
    parts.push(&query);
    let flattened = concat(&parts)?;
    Ok(CotPrompt { demos, delimiter, query, flattened })
}

fn split_on(tokens: &[TokenId], delimiter: TokenId) -> Vec<&[TokenId]> {
    tokens.split(|&t| t == delimiter).collect()
}

fn take(seg: &[TokenId], at: &mut usize, len: usize, like: &Sequence) -> Result<Sequence> {
    if *at + len > seg.len() {
        return Err(Error::Parse("segment shorter than the declared layout".into()));
    }
    let s = Sequence::new(seg[*at..*at + len].to_vec(), like.width(), like.pad())?;
    *at += len;
    Ok(s)
}

/// Inverse of [`build_icl`] given each demonstration's input length.
pub fn parse_icl(flattened: &Sequence, delimiter: TokenId, x_lens: &[usize]) -> Result<IclPrompt> {
    let segs = split_on(flattened.tokens(), delimiter);
    if segs.len() != x_lens.len() + 1 {
        return Err(Error::Parse(format!("expected {} delimiters, found {}", x_lens.len(), segs.len() - 1)));
    }
    let mut demos = Vec::new();
    for (seg, &xl) in segs.iter().zip(x_lens) {
        let mut at = 0;
        let x = take(seg, &mut at, xl, flattened)?;
        let y = take(seg, &mut at, seg.len() - xl.min(seg.len()), flattened)?;
        demos.push((x, y));
    }
    let query = Sequence::new(segs[x_lens.len()].to_vec(), flattened.width(), flattened.pad())?;
    build_icl(demos, delimiter, query)
}

/// Inverse of [`build_cot`] given (input length, step lengths) per demonstration.
pub fn parse_cot(flattened: &Sequence, delimiter: TokenId, layout: &[(usize, Vec<usize>)]) -> Result<CotPrompt> {
    let segs = split_on(flattened.tokens(), delimiter);
    if segs.len() != layout.len() + 1 {
        return Err(Error::Parse(format!("expected {} delimiters, found {}", layout.len(), segs.len() - 1)));
    }
    let mut demos = Vec::new();
    for (seg, (xl, ls)) in segs.iter().zip(layout) {
        let mut at = 0;
        let x = take(seg, &mut at, *xl, flattened)?;
        let ys = ls.iter().map(|&l| take(seg, &mut at, l, flattened)).collect::<Result<Vec<_>>>()?;
        if at != seg.len() {
            return Err(Error::Parse("trailing tokens after the declared steps".into()));
        }
        demos.push((x, ys));
    }
    let query = Sequence::new(segs[layout.len()].to_vec(), flattened.width(), flattened.pad())?;
    build_cot(demos, delimiter, query)
}

// ---------------------------------------------------------------------------
// Prompt configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoConfig {
    pub x: Vec<TokenId>,
    /// One response (ICL) or L reasoning steps (CoT).
    pub y: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub steps: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptConfig {
    pub demos: Vec<DemoConfig>,
    pub delimiter: TokenId,
    pub query: Vec<TokenId>,
    #[serde(rename = "L", default = "one")]
    pub l: usize,
    #[serde(default)]
    pub m: Option<usize>,
    /// Response length for ICL sweeps (defaults to 1).
    #[serde(default)]
    pub r: Option<usize>,
    /// CoT trajectory prior; defaults to the stationary embedding of the world prior.
    #[serde(default)]
    pub trajectories: Option<Vec<TrajectoryConfig>>,
    #[serde(default)]
    pub query_rule: Option<QueryRule>,
    /// Shifted step worlds (paths relative to the prompt file), one per l = 0..=L.
    #[serde(default)]
    pub shifted_worlds: Option<Vec<String>>,
}

fn one() -> usize {
    1
}

impl PromptConfig {
    pub fn load(path: &Path) -> Result<PromptConfig> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), msg: e.to_string() })?;
        serde_json::from_str(&s).map_err(|e| Error::config(format!("{}: line {} column {}", path.display(), e.line(), e.column()), e.to_string()))
    }

    fn check_tokens(&self, world: &World) -> Result<()> {
        let ok = |t: TokenId| world.vocab.content().contains(&t);
        for (i, d) in self.demos.iter().enumerate() {
            if let Some(t) = d.x.iter().chain(d.y.iter().flatten()).find(|&&t| !ok(t)) {
                return Err(Error::config(format!("demos[{i}]"), format!("token {t} is not a content token")));
            }
        }
        if let Some(t) = self.query.iter().find(|&&t| !ok(t)) {
            return Err(Error::config("query", format!("token {t} is not a content token")));
        }
        if self.delimiter != world.vocab.delim {
            return Err(Error::config("delimiter", format!("expected the reserved delimiter id {}", world.vocab.delim)));
        }
        Ok(())
    }

    /// Demonstrations cycle when `m` exceeds the number listed.
    fn demo(&self, i: usize) -> Result<&DemoConfig> {
        if self.demos.is_empty() {
            return Err(Error::config("demos", "no demonstrations listed"));
        }
        Ok(&self.demos[i % self.demos.len()])
    }

    pub fn icl_prompt(&self, world: &World, m: usize) -> Result<IclPrompt> {
        self.check_tokens(world)?;
        let mut demos = Vec::new();
        for i in 0..m {
            let d = self.demo(i)?;
            let y: Vec<TokenId> = d.y.iter().flatten().copied().collect();
            demos.push((world.seq(&d.x)?, world.seq(&y)?));
        }
        build_icl(demos, self.delimiter, world.seq(&self.query)?)
    }

    pub fn cot_prompt(&self, world: &World, m: usize) -> Result<CotPrompt> {
        self.check_tokens(world)?;
        let mut demos = Vec::new();
        for i in 0..m {
            let d = self.demo(i)?;
            if d.y.len() != self.l {
                return Err(Error::config(format!("demos[{}].y", i % self.demos.len()), format!("expected L = {} steps", self.l)));
            }
            demos.push((world.seq(&d.x)?, d.y.iter().map(|s| world.seq(s)).collect::<Result<Vec<_>>>()?));
        }
        build_cot(demos, self.delimiter, world.seq(&self.query)?)
    }

    /// Step lengths for CoT responses, taken from the first demonstration.
    pub fn step_lengths(&self) -> Vec<usize> {
        self.demos.first().map_or(vec![1; self.l], |d| d.y.iter().map(|s| s.len()).collect())
    }

    pub fn cot_world(&self, base: World, prompt_dir: Option<&Path>) -> Result<CotWorld> {
        let rule = self.query_rule.unwrap_or(QueryRule::Prior);
        let shifted = match &self.shifted_worlds {
            None => None,
            Some(paths) => Some(
                paths
                    .iter()
                    .map(|p| {
                        let full = prompt_dir.map_or_else(|| Path::new(p).to_path_buf(), |d| d.join(p));
                        World::load(&full)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        match &self.trajectories {
            None => {
                let mut cw = CotWorld::stationary(base, self.l, rule)?;
                cw.shifted = shifted;
                CotWorld::new(cw.base, cw.trajectories, rule, cw.shifted)
            }
            Some(ts) => CotWorld::new(base, ts.iter().map(|t| (t.steps.clone(), t.weight)).collect(), rule, shifted),
        }
    }
}

// ---------------------------------------------------------------------------
// Assumption constants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct AssumptionConstants {
    pub phi: f64,
    pub varphi: f64,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub epsilon_icl: f64,
    pub epsilon_cot: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub delta_mismatch: f64,
    #[serde(rename = "M_recip")]
    pub m_recip: f64,
}

fn log_ratio(p: f64, q: f64) -> f64 {
    if p == q {
        0.0
    } else if p <= 0.0 || q <= 0.0 {
        f64::INFINITY
    } else {
        (p.ln() - q.ln()).abs()
    }
}

/// All sequences over `alphabet` of length exactly `len`, lexicographic.
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

/// Nearly-Markov constant: the largest |log q(t|h∘delim∘s,θ) − log q(t|s,θ)|
/// over contexts with ℓ(h)+ℓ(s)+1 ≤ budget that leave the next position free.
pub fn estimate_phi(world: &World, budget: usize) -> Result<f64> {
    let limit = budget.min(world.n.saturating_sub(2));
    if limit == 0 {
        return Ok(0.0);
    }
    let emit = world.vocab.emission();
    let delim = world.vocab.delim;
    let all_markov = (0..world.num_content()).all(|k| matches!(world.content_task(k).transition, Transition::Markov { .. }));
    let mut phi: f64 = 0.0;
    if all_markov {
        // Only the last token matters: s non-empty gives identical rows; s empty
        // compares the delimiter row with the initial row.
        for k in 0..world.num_content() {
            let after = world.dist(k, &[delim]);
            let init = world.dist(k, &[]);
            for &t in emit {
                phi = phi.max(log_ratio(after[t], init[t]));
            }
        }
        return Ok(phi);
    }
    let content = world.vocab.content();
    let mut hist_alpha = content.to_vec();
    hist_alpha.push(delim);
    let (nc, nh) = (content.len() as f64, hist_alpha.len() as f64);
    let mut count = 0.0;
    for lh in 0..limit {
        for ls in 0..(limit - lh) {
            count += nh.powi(lh as i32) * nc.powi(ls as i32);
        }
    }
    count *= world.num_content() as f64;
    if count > ENUM_GUARD {
        return Err(Error::Explosion { count, guard: ENUM_GUARD });
    }
    for lh in 0..limit {
        for h in words(&hist_alpha, lh) {
            for ls in 0..(limit - lh) {
                for s in words(content, ls) {
                    let mut full = h.clone();
                    full.push(delim);
                    full.extend_from_slice(&s);
                    for k in 0..world.num_content() {
                        let (p, q) = (world.dist(k, &full), world.dist(k, &s));
                        for &t in emit {
                            phi = phi.max(log_ratio(p[t], q[t]));
                        }
                    }
                }
            }
        }
    }
    Ok(phi)
}

/// Evidence-shift constant: max over step worlds, free contexts and tasks of
/// the total variation between pretraining and shifted next-token rows.
pub fn estimate_varphi(pre: &World, shifted: &[World]) -> Result<f64> {
    let mut out: f64 = 0.0;
    for (l, w) in shifted.iter().enumerate() {
        if w.vocab.size() != pre.vocab.size() || w.content_ids() != pre.content_ids() || w.n != pre.n {
            return Err(Error::config(format!("shifted[{l}]"), "structure differs from the pretraining world"));
        }
        let both_markov = (0..pre.num_content()).all(|k| {
            matches!(pre.content_task(k).transition, Transition::Markov { .. }) && matches!(w.content_task(k).transition, Transition::Markov { .. })
        });
        let mut alpha = pre.vocab.content().to_vec();
        alpha.push(pre.vocab.delim);
        let max_len = pre.n.saturating_sub(2);
        let contexts: Vec<Vec<TokenId>> = if both_markov {
            let mut c = vec![Vec::new()];
            if max_len >= 1 {
                c.extend(alpha.iter().map(|&t| vec![t]));
            }
            c
        } else {
            let count: f64 = (0..=max_len).map(|k| (alpha.len() as f64).powi(k as i32)).sum::<f64>() * pre.num_content() as f64;
            if count > ENUM_GUARD {
                return Err(Error::Explosion { count, guard: ENUM_GUARD });
            }
            (0..=max_len).flat_map(|len| words(&alpha, len)).collect()
        };
        for ctx in &contexts {
            for k in 0..pre.num_content() {
                out = out.max(inference::tv(pre.dist(k, ctx), w.dist(k, ctx))?);
            }
        }
    }
    Ok(out)
}

/// c = max over task pairs of the prior ratio.
pub fn prior_imbalance(world: &World) -> Result<f64> {
    let p = world.prior();
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::config("prior", "zero prior weight"));
    }
    Ok(p.iter().cloned().fold(0.0, f64::max) / min)
}

fn ratio_of(a: f64, what: &str) -> Result<f64> {
    if a >= 1.0 {
        return Err(Error::DegenerateAmbiguity(what.to_string()));
    }
    Ok(a / (1.0 - a))
}

/// ε for ICL: (1/(1−A(x))) · max_i A(x_i∘y_i)/(1−A(x_i∘y_i)); 0 with no demos.
pub fn epsilon_icl(world: &World, prompt: &IclPrompt) -> Result<f64> {
    let aq = inference::ambiguity(world, &prompt.query, None)?.ambiguity;
    if aq >= 1.0 {
        return Err(Error::DegenerateAmbiguity("query".into()));
    }
    let mut worst: f64 = 0.0;
    for (i, (x, y)) in prompt.demos.iter().enumerate() {
        let a = inference::ambiguity(world, &concat(&[x, y])?, None)?.ambiguity;
        worst = worst.max(ratio_of(a, &format!("demo {i}"))?);
    }
    Ok(worst / (1.0 - aq))
}

/// Step ambiguities A^{x_i∘y_{≺j}}(y_j) as a matrix [demo][step].
pub fn step_ambiguities(world: &World, prompt: &CotPrompt) -> Result<Vec<Vec<inference::AmbiguityReport>>> {
    prompt
        .demos
        .iter()
        .map(|(x, ys)| {
            let mut hist = x.clone();
            ys.iter()
                .map(|y| {
                    let r = inference::ambiguity(world, y, Some(&hist))?;
                    hist = concat(&[&hist, y])?;
                    Ok(r)
                })
                .collect()
        })
        .collect()
}

/// ε for CoT: max over demos and steps of A/(1−A); no query prefactor.
pub fn epsilon_cot(world: &World, prompt: &CotPrompt) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, row) in step_ambiguities(world, prompt)?.iter().enumerate() {
        for (j, r) in row.iter().enumerate() {
            worst = worst.max(ratio_of(r.ambiguity, &format!("demo {i} step {}", j + 1))?);
        }
    }
    Ok(worst)
}

/// Step-wise dominated tasks θ*_l; demonstrations must agree on every step.
pub fn step_optimal_tasks(world: &World, prompt: &CotPrompt) -> Result<Vec<usize>> {
    let amb = step_ambiguities(world, prompt)?;
    let first = amb.first().ok_or_else(|| Error::assumption("step-optimal tasks", "no demonstrations"))?;
    let star: Vec<usize> = first.iter().map(|r| r.dominated_task).collect();
    for (i, row) in amb.iter().enumerate() {
        for (j, r) in row.iter().enumerate() {
            if r.dominated_task != star[j] {
                return Err(Error::assumption(
                    "step-optimal task invariance",
                    format!("demo {i} step {} prefers task {} but demo 0 prefers {}", j + 1, r.dominated_task, star[j]),
                ));
            }
        }
    }
    Ok(star)
}

/// Log-likelihood of the prompt for every trajectory carrying prior mass.
fn supported_trajectories(cw: &CotWorld, prompt: &CotPrompt) -> Result<Vec<(Vec<usize>, f64, f64)>> {
    let mut out = Vec::new();
    for (steps, w) in &cw.trajectories {
        let ll = composite_log_likelihood(cw, prompt, &traj_indices(&cw.base, steps)?);
        if ll > SUPPORT_LOG_FLOOR {
            out.push((steps.clone(), *w, ll));
        }
    }
    Ok(out)
}

pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Minimum pairwise Hamming distance over trajectories with positive
/// posterior mass; L+1 when only one trajectory survives.
pub fn k_separation(cw: &CotWorld, prompt: &CotPrompt) -> Result<usize> {
    let l = cw.steps();
    let count = (cw.trajectories.len() as f64).powi(2);
    if count > ENUM_GUARD * ENUM_GUARD {
        return Err(Error::Explosion { count, guard: ENUM_GUARD });
    }
    let sup = supported_trajectories(cw, prompt)?;
    let mut k = l + 1;
    for i in 0..sup.len() {
        for j in (i + 1)..sup.len() {
            k = k.min(hamming(&sup[i].0, &sup[j].0));
        }
    }
    Ok(k)
}

/// Odometer over Θ^L in lexicographic order of content indices.
fn for_each_trajectory(num: usize, l: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let count = (num as f64).powi(l as i32);
    if count > ENUM_GUARD {
        return Err(Error::Explosion { count, guard: ENUM_GUARD });
    }
    let mut idx = vec![0usize; l];
    loop {
        f(&idx)?;
        let mut p = l;
        loop {
            if p == 0 {
                return Ok(());
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < num {
                break;
            }
            idx[p] = 0;
        }
    }
}

/// Δ = Σ over trajectories with positive prompt likelihood of |q̃(θ⃗) − q(θ⃗)|,
/// where q is the stationary embedding of the atomic prior.
pub fn prior_mismatch(cw: &CotWorld, prompt: &CotPrompt) -> Result<f64> {
    let base = &cw.base;
    let ids = base.content_ids();
    let mut delta = 0.0;
    for_each_trajectory(base.num_content(), cw.steps(), |idx| {
        if composite_log_likelihood(cw, prompt, idx) <= SUPPORT_LOG_FLOOR {
            return Ok(());
        }
        let steps: Vec<usize> = idx.iter().map(|&k| ids[k]).collect();
        let q_tilde = cw.trajectories.iter().find(|t| t.0 == steps).map_or(0.0, |t| t.1);
        let q_stat = if idx.iter().all(|&k| k == idx[0]) { base.prior()[idx[0]] } else { 0.0 };
        delta += (q_tilde - q_stat).abs();
        Ok(())
    })?;
    Ok(delta)
}

/// Largest posterior ratio among tasks with positive posterior mass.
fn posterior_spread(weights: &[f64]) -> f64 {
    let pos: Vec<f64> = weights.iter().cloned().filter(|&w| w > 1e-300).collect();
    let max = pos.iter().cloned().fold(0.0, f64::max);
    let min = pos.iter().cloned().fold(f64::INFINITY, f64::min);
    if pos.len() < 2 {
        1.0
    } else {
        max / min
    }
}

/// c₁: the larger of the global trajectory-prior ratio over the support and the
/// local posterior ratio q(θ | x⁽ⁱ⁾∘y⁽ⁱ⁾_{≺j}) over every demo and step.
pub fn regularity_c1(cw: &CotWorld, prompt: &CotPrompt) -> Result<f64> {
    let sup = supported_trajectories(cw, prompt)?;
    let ws: Vec<f64> = sup.iter().map(|t| t.1).collect();
    let mut c1 = posterior_spread(&ws);
    for (x, ys) in &prompt.demos {
        let mut hist = x.clone();
        for y in ys {
            let post = inference::posterior(&cw.base, &hist, None)?;
            c1 = c1.max(posterior_spread(&post.weights));
            hist = concat(&[&hist, y])?;
        }
    }
    Ok(c1)
}

/// c₂: min over demos of max over tasks of q(x⁽ⁱ⁾ | θ).
pub fn regularity_c2(cw: &CotWorld, prompt: &CotPrompt) -> Result<f64> {
    let base = &cw.base;
    let mut c2 = f64::INFINITY;
    for (x, _) in &prompt.demos {
        let best = (0..base.num_content()).map(|k| base.log_chain(k, &[], x.tokens()).exp()).fold(0.0, f64::max);
        c2 = c2.min(best);
    }
    Ok(if c2.is_finite() { c2 } else { 1.0 })
}

/// Pretraining marginal q(P) of a flattened prompt (delimiters contribute 1).
pub fn prompt_marginal(world: &World, flattened: &Sequence) -> f64 {
    let terms: Vec<f64> = (0..world.num_content()).map(|k| world.prior()[k].ln() + log_prompt_likelihood(world, k, flattened.tokens())).collect();
    logsumexp(&terms).exp()
}

/// ℳ = max(1/q(P), 1/q̃(P)).
pub fn m_recip(cw: &CotWorld, prompt: &CotPrompt) -> Result<f64> {
    let q = prompt_marginal(&cw.base, &prompt.flattened);
    let mut terms = Vec::new();
    for (steps, w) in &cw.trajectories {
        terms.push(w.ln() + composite_log_likelihood(cw, prompt, &traj_indices(&cw.base, steps)?));
    }
    let qt = logsumexp(&terms).exp();
    Ok((1.0 / q).max(1.0 / qt))
}
