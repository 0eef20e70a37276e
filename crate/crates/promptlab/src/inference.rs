//! Exact Bayesian quantities over the task space: posteriors, dominated
//! tasks, ambiguity, entropy and divergences. All posterior arithmetic runs
//! in log space and is exponentiated once, after normalization.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::prompts::{CotPrompt, IclPrompt};
use crate::world::{CotWorld, QueryRule, Sequence, TokenId, World};

/// Normalized weights over atomic task ids (`usize`) or trajectories (`Vec<usize>`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Posterior<K> {
    pub support: Vec<K>,
    pub weights: Vec<f64>,
}

impl<K: Clone> Posterior<K> {
    /// Index of the largest weight; ties go to the earliest entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    pub fn weight_of(&self, key: &K) -> f64
    where
        K: PartialEq,
    {
        self.support.iter().position(|k| k == key).map_or(0.0, |i| self.weights[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmbiguityReport {
    pub dominated_task: usize,
    pub ambiguity: f64,
    /// Posterior entropy in nats.
    pub entropy: f64,
}

/// log Σ exp(x), with −∞ for an empty or all −∞ input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Turns unnormalized log weights into probabilities.
pub fn normalize_log(logw: &[f64]) -> Result<Vec<f64>> {
    let z = logsumexp(logw);
    if !z.is_finite() {
        return Err(Error::ZeroEvidence);
    }
    Ok(logw.iter().map(|l| (l - z).exp()).collect())
}

/// Per-task log q(x | history, θ) for every content task.
pub fn log_likelihoods(world: &World, x: &Sequence, history: Option<&Sequence>) -> Result<Vec<f64>> {
    let h: &[TokenId] = history.map_or(&[], |h| h.tokens());
    let total = h.len() + x.genuine_length();
    if total > world.n {
        return Err(Error::LengthOverflow { got: total, width: world.n });
    }
    Ok((0..world.num_content()).map(|k| world.log_chain(k, h, x.tokens())).collect())
}

/// Task posterior with weights ∝ q(θ)·q(x | history, θ).
///
/// The history acts as conditioning context for the transitions only; with no
/// history this is the ordinary Bayesian posterior given x. The full posterior
/// given h∘x is `posterior(world, &concat(h, x), None)`.
pub fn posterior(world: &World, x: &Sequence, history: Option<&Sequence>) -> Result<Posterior<usize>> {
    let ll = log_likelihoods(world, x, history)?;
    let logw: Vec<f64> = ll.iter().zip(world.prior()).map(|(l, p)| l + p.ln()).collect();
    Ok(Posterior { support: world.content_ids(), weights: normalize_log(&logw)? })
}

/// Shannon entropy in nats with 0·log 0 = 0.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
}

pub fn report<K: Clone>(post: &Posterior<K>, id_of: impl Fn(&K) -> usize) -> AmbiguityReport {
    let i = post.argmax();
    AmbiguityReport { dominated_task: id_of(&post.support[i]), ambiguity: 1.0 - post.weights[i], entropy: entropy(&post.weights) }
}

pub fn ambiguity(world: &World, x: &Sequence, history: Option<&Sequence>) -> Result<AmbiguityReport> {
    Ok(report(&posterior(world, x, history)?, |&id| id))
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(format!("lengths {} and {}", p.len(), q.len())));
    }
    Ok(())
}

/// KL(p || q) in nats.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut s = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::SupportMismatch(format!("q[{i}] = 0 where p[{i}] = {a}")));
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

/// Total variation: half the L1 distance.
pub fn tv(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

// ---------------------------------------------------------------------------
// Prompt likelihoods
// ---------------------------------------------------------------------------

/// log q(tokens | θ_k) where delimiter tokens contribute factor 1 (they are
/// emitted by delimiter tasks with probability 1) but stay in the context.
pub fn log_prompt_likelihood(world: &World, k: usize, tokens: &[TokenId]) -> f64 {
    let mut lp = 0.0;
    for j in 0..tokens.len() {
        if tokens[j] == world.vocab.delim {
            continue;
        }
        let p = world.prob(k, &tokens[..j], tokens[j]);
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        lp += p.ln();
    }
    lp
}

/// Posterior over Θ given a flattened ICL prompt.
pub fn icl_posterior(world: &World, prompt: &IclPrompt) -> Result<Posterior<usize>> {
    let toks = prompt.flattened.tokens();
    let logw: Vec<f64> = (0..world.num_content()).map(|k| log_prompt_likelihood(world, k, toks) + world.prior()[k].ln()).collect();
    Ok(Posterior { support: world.content_ids(), weights: normalize_log(&logw)? })
}

/// Log-likelihood of the query-task factor q(segment | ctx, θ^(i)).
fn query_factor(cw: &CotWorld, traj_idx: &[usize], ctx: &[TokenId], seg: &[TokenId]) -> f64 {
    let w0 = cw.step_world(0);
    match cw.query_rule {
        QueryRule::Tied => w0.log_chain(traj_idx[0], ctx, seg),
        QueryRule::Prior => {
            let terms: Vec<f64> = (0..w0.num_content()).map(|k| w0.prior()[k].ln() + w0.log_chain(k, ctx, seg)).collect();
            logsumexp(&terms)
        }
    }
}

/// log q̃(P_CoT | θ⃗) with trajectory given as content indices per step.
///
/// Each demonstration contributes its input under the query-task rule, a
/// delimiter factor of 1, and each reasoning step under its own step task.
pub fn composite_log_likelihood(cw: &CotWorld, prompt: &CotPrompt, traj_idx: &[usize]) -> f64 {
    let mut ctx: Vec<TokenId> = Vec::new();
    let mut lp = 0.0;
    for (x, steps) in &prompt.demos {
        lp += query_factor(cw, traj_idx, &ctx, x.tokens());
        ctx.extend_from_slice(x.tokens());
        for (j, y) in steps.iter().enumerate() {
            lp += cw.step_world(j + 1).log_chain(traj_idx[j], &ctx, y.tokens());
            ctx.extend_from_slice(y.tokens());
        }
        ctx.push(prompt.delimiter);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
    }
    lp + query_factor(cw, traj_idx, &ctx, prompt.query.tokens())
}

/// Content indices for a trajectory of task ids.
pub fn traj_indices(world: &World, steps: &[usize]) -> Result<Vec<usize>> {
    steps.iter().map(|&s| world.content_index(s)).collect()
}

/// Posterior over the trajectories carrying prior mass in the CoT world.
pub fn composite_posterior(cw: &CotWorld, prompt: &CotPrompt) -> Result<Posterior<Vec<usize>>> {
    if prompt.steps() != cw.steps() {
        return Err(Error::Parse(format!("prompt has {} steps per demo, world has L = {}", prompt.steps(), cw.steps())));
    }
    let mut logw = Vec::with_capacity(cw.trajectories.len());
    for (steps, w) in &cw.trajectories {
        let idx = traj_indices(&cw.base, steps)?;
        logw.push(w.ln() + composite_log_likelihood(cw, prompt, &idx));
    }
    Ok(Posterior { support: cw.trajectories.iter().map(|t| t.0.clone()).collect(), weights: normalize_log(&logw)? })
}
