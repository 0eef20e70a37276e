//! Oracles shared by integration tests. They work from raw probability tables
//! and never call the library's inference code.
#![allow(dead_code)]

/// First-order chain over the emission alphabet: `init` and `after[t]` index
/// emission slots (content tokens first, then EOS).
pub struct RawChain {
    pub init: Vec<f64>,
    pub after: Vec<Vec<f64>>,
}

impl RawChain {
    /// Product over segments, each restarting from the initial row (a
    /// delimiter resets the chain and is emitted with probability 1).
    pub fn likelihood(&self, segments: &[&[usize]]) -> f64 {
        let mut p = 1.0;
        for seg in segments {
            let mut prev: Option<usize> = None;
            for &t in *seg {
                p *= match prev {
                    None => self.init[t],
                    Some(s) => self.after[s][t],
                };
                prev = Some(t);
            }
        }
        p
    }
}

/// Brute-force Bayes over the listed chains for a delimiter-separated prompt.
pub fn brute_posterior(prior: &[f64], chains: &[RawChain], segments: &[&[usize]]) -> Vec<f64> {
    let joint: Vec<f64> = prior.iter().zip(chains).map(|(p, c)| p * c.likelihood(segments)).collect();
    let z: f64 = joint.iter().sum();
    joint.into_iter().map(|j| j / z).collect()
}

/// Raw tables of the canonical two-task ICL world (a = 0, b = 1, EOS = 2).
pub fn canonical_chains() -> Vec<RawChain> {
    vec![
        RawChain { init: vec![0.9, 0.05, 0.05], after: vec![vec![0.45, 0.45, 0.1], vec![0.6, 0.3, 0.1]] },
        RawChain { init: vec![0.1, 0.85, 0.05], after: vec![vec![0.45, 0.45, 0.1], vec![0.3, 0.6, 0.1]] },
    ]
}

/// Least-squares slope of ln(y) against x.
pub fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = xs.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// aᵀ softmax(a) evaluated directly, for finite vectors.
pub fn naive_boltz(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    a.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z
}
