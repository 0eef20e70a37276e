//! Synthetic language worlds: vocabulary, latent tasks, the generative
//! process, and exact enumeration helpers.
//!
//! Conventions used throughout the crate:
//! * a [`Sequence`] holds emitted tokens only; the leading SOS is implicit,
//! * a context of length `n - 1` can only emit EOS, so every document ends
//!   within `n` tokens,
//! * a context already ending in EOS emits nothing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Row sums must match 1 to this tolerance.
pub const ROW_TOL: f64 = 1e-12;
/// Upper bound on the number of items any exhaustive enumeration may visit.
pub const ENUM_GUARD: f64 = 1e6;

// ---------------------------------------------------------------------------
// Configuration (the on-disk JSON shape)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Content,
    Sos,
    Eos,
    Pad,
    Delim,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenConfig {
    pub name: String,
    pub role: Role,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Content,
    Delimiter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub context: Vec<TokenId>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub id: usize,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<TableRow>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    pub d: usize,
    pub n: usize,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tokens: Vec<TokenConfig>,
    pub tasks: Vec<TaskConfig>,
    /// Prior over content tasks, in ascending task-id order.
    pub prior: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter_prior: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Validated domain types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Vocab {
    pub names: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub sos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub delim: TokenId,
    pub alpha: f64,
    pub beta: f64,
    content: Vec<TokenId>,
    emission: Vec<TokenId>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.embeddings.len()
    }

    pub fn d(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.len())
    }

    /// Non-special tokens in id order.
    pub fn content(&self) -> &[TokenId] {
        &self.content
    }

    /// Tokens a content task may emit: content tokens plus EOS, in id order.
    pub fn emission(&self) -> &[TokenId] {
        &self.emission
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t == self.sos || t == self.eos || t == self.pad || t == self.delim
    }

    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone)]
pub enum Transition {
    /// First-order chain: `init` for the empty context, `rows[t]` after token `t`.
    Markov { init: Vec<f64>, rows: Vec<Vec<f64>> },
    /// Rows keyed by emitted context; lookups back off to the longest stored suffix.
    Table { rows: BTreeMap<Vec<TokenId>, Vec<f64>> },
    /// Emits a single token with probability 1.
    Deterministic(TokenId),
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub kind: TaskKind,
    pub transition: Transition,
}

#[derive(Debug, Clone)]
pub struct TaskSpace {
    pub tasks: Vec<Task>,
    /// Prior over content tasks, aligned with [`TaskSpace::content`].
    pub prior: Vec<f64>,
    pub delimiter_prior: Vec<f64>,
    content: Vec<usize>,
    delimiters: Vec<usize>,
}

impl TaskSpace {
    /// Indices into `tasks` of the content tasks, ascending by id.
    pub fn content(&self) -> &[usize] {
        &self.content
    }

    pub fn delimiters(&self) -> &[usize] {
        &self.delimiters
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub vocab: Vocab,
    pub task_space: TaskSpace,
    pub n: usize,
    pub b: f64,
    config: WorldConfig,
    eos_row: Vec<f64>,
    zero_row: Vec<f64>,
}

/// Fixed-width token sequence. Only the genuine (non-PAD) prefix is stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence {
    tokens: Vec<TokenId>,
    width: usize,
    pad: TokenId,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, width: usize, pad: TokenId) -> Result<Self> {
        if tokens.len() > width {
            return Err(Error::LengthOverflow { got: tokens.len(), width });
        }
        if tokens.contains(&pad) {
            return Err(Error::config("sequence", "PAD inside the genuine prefix"));
        }
        Ok(Sequence { tokens, width, pad })
    }

    /// Rebuilds from padded columns, checking no PAD precedes a real token.
    pub fn from_columns(columns: &[TokenId], pad: TokenId) -> Result<Self> {
        let len = columns.iter().position(|&t| t == pad).unwrap_or(columns.len());
        if columns[len..].iter().any(|&t| t != pad) {
            return Err(Error::config("sequence", "PAD column precedes a non-PAD column"));
        }
        Sequence::new(columns[..len].to_vec(), columns.len(), pad)
    }

    pub fn empty(width: usize, pad: TokenId) -> Self {
        Sequence { tokens: Vec::new(), width, pad }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn columns(&self) -> Vec<TokenId> {
        let mut c = self.tokens.clone();
        c.resize(self.width, self.pad);
        c
    }

    pub fn genuine_length(&self) -> usize {
        self.tokens.len()
    }
}

pub fn genuine_length(s: &Sequence) -> usize {
    s.genuine_length()
}

/// Merges the genuine segments of `parts` in order.
pub fn concat(parts: &[&Sequence]) -> Result<Sequence> {
    let first = parts.first().ok_or_else(|| Error::EmptyInput("concat needs at least one part".into()))?;
    let total: usize = parts.iter().map(|p| p.genuine_length()).sum();
    if total > first.width {
        return Err(Error::LengthOverflow { got: total, width: first.width });
    }
    let mut tokens = Vec::with_capacity(total);
    for p in parts {
        tokens.extend_from_slice(&p.tokens);
    }
    Ok(Sequence { tokens, width: first.width, pad: first.pad })
}

/// An element of Θ^L: one content task per reasoning step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeTask {
    pub steps: Vec<usize>,
    /// Tokens governed by each step when sampling; the last step runs to EOS.
    #[serde(default)]
    pub segment_lengths: Vec<usize>,
}

impl CompositeTask {
    pub fn new(steps: Vec<usize>) -> Self {
        let segment_lengths = vec![1; steps.len()];
        CompositeTask { steps, segment_lengths }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn validate(&self, world: &World) -> Result<()> {
        if self.steps.is_empty() || self.steps.len() > world.n {
            return Err(Error::config("composite.steps", format!("L = {} outside [1, n]", self.steps.len())));
        }
        if !self.segment_lengths.is_empty() && self.segment_lengths.len() != self.steps.len() {
            return Err(Error::config("composite.segment_lengths", "one length per step required"));
        }
        for &s in &self.steps {
            world.content_index(s)?;
        }
        Ok(())
    }

    /// Task id governing the token at `pos` (0-based within the governed span).
    pub fn task_at(&self, pos: usize) -> usize {
        let mut end = 0;
        for (j, &s) in self.steps.iter().enumerate() {
            end += self.segment_lengths.get(j).copied().unwrap_or(1);
            if pos < end {
                return s;
            }
        }
        *self.steps.last().expect("validated non-empty")
    }
}

/// Selects an atomic task by id or a composite trajectory.
#[derive(Debug, Clone, Copy)]
pub enum TaskSel<'a> {
    Task(usize),
    Composite(&'a CompositeTask),
}

// ---------------------------------------------------------------------------
// World construction and validation
// ---------------------------------------------------------------------------

fn check_dist(path: &str, row: &[f64], size: usize) -> Result<()> {
    if row.len() != size {
        return Err(Error::config(path, format!("expected {} entries, got {}", size, row.len())));
    }
    if let Some(i) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::config(format!("{path}[{i}]"), "probability must be finite and >= 0"));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::config(path, format!("row sums to {s:.17}, not 1")));
    }
    Ok(())
}

impl World {
    pub fn new(config: WorldConfig) -> Result<World> {
        let c = &config;
        if c.d == 0 {
            return Err(Error::config("d", "must be positive"));
        }
        if c.n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        if !(c.b > 0.0 && c.b < 1.0) {
            return Err(Error::config("b", "floor must lie in (0, 1)"));
        }
        if !(c.alpha > 0.0) || !(c.beta > 0.0) {
            return Err(Error::config("alpha", "alpha and beta must be positive"));
        }
        let vocab = Self::build_vocab(c)?;
        let size = vocab.size();
        if c.b * vocab.emission().len() as f64 > 1.0 + ROW_TOL {
            return Err(Error::config("b", "floor times emission alphabet size exceeds 1"));
        }

        let mut order: Vec<usize> = (0..c.tasks.len()).collect();
        order.sort_by_key(|&i| c.tasks[i].id);
        for w in order.windows(2) {
            if c.tasks[w[0]].id == c.tasks[w[1]].id {
                return Err(Error::config(format!("tasks[{}].id", w[1]), "duplicate task id"));
            }
        }
        let mut tasks = Vec::with_capacity(c.tasks.len());
        for &i in &order {
            tasks.push(Self::build_task(c, &vocab, i)?);
        }
        let content: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].kind == TaskKind::Content).collect();
        let delimiters: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].kind == TaskKind::Delimiter).collect();
        if content.is_empty() {
            return Err(Error::config("tasks", "at least one content task required"));
        }
        if c.prior.len() != content.len() {
            return Err(Error::config("prior", format!("expected {} weights, got {}", content.len(), c.prior.len())));
        }
        if let Some(i) = c.prior.iter().position(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::config(format!("prior[{i}]"), "prior weights must be > 0"));
        }
        let ps: f64 = c.prior.iter().sum();
        if (ps - 1.0).abs() > ROW_TOL {
            return Err(Error::config("prior", format!("sums to {ps:.17}, not 1")));
        }
        let delimiter_prior = match &c.delimiter_prior {
            Some(dp) => {
                if dp.len() != delimiters.len() {
                    return Err(Error::config("delimiter_prior", "one weight per delimiter task required"));
                }
                if !delimiters.is_empty() {
                    check_dist("delimiter_prior", dp, delimiters.len())?;
                }
                dp.clone()
            }
            None => vec![1.0 / delimiters.len().max(1) as f64; delimiters.len()],
        };

        let mut eos_row = vec![0.0; size];
        eos_row[vocab.eos] = 1.0;
        let world = World {
            vocab,
            task_space: TaskSpace { tasks, prior: c.prior.clone(), delimiter_prior, content, delimiters },
            n: c.n,
            b: c.b,
            config: config.clone(),
            eos_row,
            zero_row: vec![0.0; size],
        };
        world.check_floor()?;
        Ok(world)
    }

    fn build_vocab(c: &WorldConfig) -> Result<Vocab> {
        let mut ids: BTreeMap<&'static str, TokenId> = BTreeMap::new();
        let mut content = Vec::new();
        for (i, t) in c.tokens.iter().enumerate() {
            if t.embedding.len() != c.d {
                return Err(Error::config(format!("tokens[{i}].embedding"), format!("expected dimension {}", c.d)));
            }
            if t.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("tokens[{i}].embedding"), "non-finite entry"));
            }
            let key = match t.role {
                Role::Content => {
                    content.push(i);
                    continue;
                }
                Role::Sos => "sos",
                Role::Eos => "eos",
                Role::Pad => "pad",
                Role::Delim => "delim",
            };
            if ids.insert(key, i).is_some() {
                return Err(Error::config(format!("tokens[{i}].role"), format!("second {key} token")));
            }
        }
        let get = |k: &str| ids.get(k).copied().ok_or_else(|| Error::config("tokens", format!("missing {k} token")));
        let (sos, eos, pad, delim) = (get("sos")?, get("eos")?, get("pad")?, get("delim")?);
        if content.is_empty() {
            return Err(Error::config("tokens", "at least one content token required"));
        }
        if c.tokens[pad].embedding.iter().any(|&x| x != 0.0) {
            return Err(Error::config(format!("tokens[{pad}].embedding"), "PAD embedding must be the zero vector"));
        }
        for (i, t) in c.tokens.iter().enumerate() {
            let norm = t.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > c.alpha + 1e-12 {
                return Err(Error::config(format!("tokens[{i}].embedding"), format!("norm {norm} exceeds alpha {}", c.alpha)));
            }
        }
        for i in 0..c.tokens.len() {
            for j in (i + 1)..c.tokens.len() {
                let dist = euclid(&c.tokens[i].embedding, &c.tokens[j].embedding);
                if dist < c.beta - 1e-12 {
                    return Err(Error::config(
                        format!("tokens[{j}].embedding"),
                        format!("distance {dist} to tokens[{i}] is below beta {}", c.beta),
                    ));
                }
            }
        }
        let mut emission = content.clone();
        emission.push(eos);
        emission.sort_unstable();
        Ok(Vocab {
            names: c.tokens.iter().map(|t| t.name.clone()).collect(),
            embeddings: c.tokens.iter().map(|t| t.embedding.clone()).collect(),
            sos,
            eos,
            pad,
            delim,
            alpha: c.alpha,
            beta: c.beta,
            content,
            emission,
        })
    }

    fn check_content_row(c: &WorldConfig, v: &Vocab, path: &str, row: &[f64]) -> Result<()> {
        check_dist(path, row, v.size())?;
        for t in [v.sos, v.pad, v.delim] {
            if row[t] != 0.0 {
                return Err(Error::config(format!("{path}[{t}]"), "content tasks give SOS, PAD and the delimiter probability 0"));
            }
        }
        let _ = c;
        Ok(())
    }

    fn build_task(c: &WorldConfig, v: &Vocab, i: usize) -> Result<Task> {
        let tc = &c.tasks[i];
        let base = format!("tasks[{i}]");
        let transition = match tc.kind {
            TaskKind::Delimiter => Transition::Deterministic(v.delim),
            TaskKind::Content => match (&tc.init, &tc.matrix, &tc.table) {
                (Some(init), Some(matrix), None) => {
                    Self::check_content_row(c, v, &format!("{base}.init"), init)?;
                    if matrix.len() != v.size() {
                        return Err(Error::config(format!("{base}.matrix"), format!("expected {} rows", v.size())));
                    }
                    for (t, row) in matrix.iter().enumerate() {
                        let p = format!("{base}.matrix[{t}]");
                        if t == v.sos || t == v.eos || t == v.pad {
                            if row.len() != v.size() {
                                return Err(Error::config(p, "row has the wrong length"));
                            }
                            continue;
                        }
                        Self::check_content_row(c, v, &p, row)?;
                    }
                    Transition::Markov { init: init.clone(), rows: matrix.clone() }
                }
                (None, None, Some(table)) => {
                    let mut rows = BTreeMap::new();
                    for (r, tr) in table.iter().enumerate() {
                        let p = format!("{base}.table[{r}]");
                        if let Some(k) = tr.context.iter().position(|&t| t >= v.size() || t == v.sos || t == v.pad || t == v.eos) {
                            return Err(Error::config(format!("{p}.context[{k}]"), "contexts hold content or delimiter tokens only"));
                        }
                        Self::check_content_row(c, v, &format!("{p}.probs"), &tr.probs)?;
                        if rows.insert(tr.context.clone(), tr.probs.clone()).is_some() {
                            return Err(Error::config(format!("{p}.context"), "duplicate context"));
                        }
                    }
                    if !rows.contains_key(&Vec::new()) {
                        return Err(Error::config(format!("{base}.table"), "the empty context row is required"));
                    }
                    Transition::Table { rows }
                }
                _ => {
                    return Err(Error::config(&base, "content task needs either init+matrix or table"));
                }
            },
        };
        Ok(Task { id: tc.id, kind: tc.kind, transition })
    }

    /// Every emission entry of every row reachable at a free (non-forced) position is at least `b`.
    fn check_floor(&self) -> Result<()> {
        let emit = self.vocab.emission();
        let floor_ok = |row: &[f64]| emit.iter().all(|&t| row[t] >= self.b);
        for (k, &ti) in self.task_space.content.iter().enumerate() {
            let task = &self.task_space.tasks[ti];
            let path = format!("tasks[id={}]", task.id);
            match &task.transition {
                Transition::Markov { init, rows } => {
                    if !floor_ok(init) {
                        return Err(Error::config(format!("{path}.init"), format!("entry below floor b = {}", self.b)));
                    }
                    for (t, row) in rows.iter().enumerate() {
                        if t == self.vocab.sos || t == self.vocab.eos || t == self.vocab.pad {
                            continue;
                        }
                        if !floor_ok(row) {
                            return Err(Error::config(format!("{path}.matrix[{t}]"), format!("entry below floor b = {}", self.b)));
                        }
                    }
                }
                Transition::Table { rows } => {
                    for (ctx, row) in rows {
                        if ctx.len() + 2 <= self.n && !floor_ok(row) {
                            return Err(Error::config(format!("{path}.table{ctx:?}"), format!("entry below floor b = {}", self.b)));
                        }
                    }
                }
                Transition::Deterministic(_) => unreachable!("content task {k} is never deterministic"),
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<World> {
        let cfg: WorldConfig = serde_json::from_str(s).map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        World::new(cfg)
    }

    pub fn load(path: &Path) -> Result<World> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), msg: e.to_string() })?;
        World::from_json_str(&s)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.config).expect("config serializes")
    }

    // -- task lookup ---------------------------------------------------------

    pub fn num_content(&self) -> usize {
        self.task_space.content.len()
    }

    pub fn content_task(&self, k: usize) -> &Task {
        &self.task_space.tasks[self.task_space.content[k]]
    }

    /// Content task ids, ascending.
    pub fn content_ids(&self) -> Vec<usize> {
        (0..self.num_content()).map(|k| self.content_task(k).id).collect()
    }

    /// Position of content task `id` within the content ordering.
    pub fn content_index(&self, id: usize) -> Result<usize> {
        (0..self.num_content()).find(|&k| self.content_task(k).id == id).ok_or(Error::UnknownTask(id))
    }

    pub fn prior(&self) -> &[f64] {
        &self.task_space.prior
    }

    pub fn has_delimiter_task(&self) -> bool {
        self.task_space.delimiters.iter().any(|&i| matches!(self.task_space.tasks[i].transition, Transition::Deterministic(t) if t == self.vocab.delim))
    }

    // -- conditionals ----------------------------------------------------------

    /// q(. | ctx, θ_k) over the full vocabulary for the k-th content task.
    pub fn dist(&self, k: usize, ctx: &[TokenId]) -> &[f64] {
        if ctx.last() == Some(&self.vocab.eos) || ctx.len() >= self.n {
            return &self.zero_row;
        }
        if ctx.len() + 1 == self.n {
            return &self.eos_row;
        }
        match &self.content_task(k).transition {
            Transition::Markov { init, rows } => match ctx.last() {
                None => init,
                Some(&t) => &rows[t],
            },
            Transition::Table { rows } => {
                for i in 0..=ctx.len() {
                    if let Some(r) = rows.get(&ctx[i..]) {
                        return r;
                    }
                }
                unreachable!("empty context row is validated")
            }
            Transition::Deterministic(_) => unreachable!(),
        }
    }

    pub fn prob(&self, k: usize, ctx: &[TokenId], t: TokenId) -> f64 {
        self.dist(k, ctx)[t]
    }

    /// log q(tokens | ctx, θ_k), chaining each token onto the context.
    pub fn log_chain(&self, k: usize, ctx: &[TokenId], tokens: &[TokenId]) -> f64 {
        let mut buf = Vec::with_capacity(ctx.len() + tokens.len());
        buf.extend_from_slice(ctx);
        let mut lp = 0.0;
        for &t in tokens {
            let p = self.prob(k, &buf, t);
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            lp += p.ln();
            buf.push(t);
        }
        lp
    }

    pub fn seq(&self, tokens: &[TokenId]) -> Result<Sequence> {
        Sequence::new(tokens.to_vec(), self.n, self.vocab.pad)
    }

    pub fn seq_by_names(&self, names: &[&str]) -> Result<Sequence> {
        let ids = names
            .iter()
            .map(|n| self.vocab.id_of(n).ok_or_else(|| Error::config("tokens", format!("unknown token name {n}"))))
            .collect::<Result<Vec<_>>>()?;
        self.seq(&ids)
    }

    fn sel_index(&self, sel: TaskSel<'_>) -> Result<()> {
        match sel {
            TaskSel::Task(id) => self.content_index(id).map(|_| ()),
            TaskSel::Composite(c) => c.validate(self),
        }
    }
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Generative process and exact probabilities
// ---------------------------------------------------------------------------

fn sample_index<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (t, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = t;
            if u < acc {
                return t;
            }
        }
    }
    last
}

/// Draws one document (tokens after SOS, ending with EOS).
pub fn sample_document<R: Rng + ?Sized>(world: &World, sel: TaskSel<'_>, rng: &mut R) -> Result<Sequence> {
    world.sel_index(sel)?;
    let mut toks = Vec::new();
    while toks.len() < world.n {
        let id = match sel {
            TaskSel::Task(id) => id,
            TaskSel::Composite(c) => c.task_at(toks.len()),
        };
        let k = world.content_index(id)?;
        let t = sample_index(world.dist(k, &toks), rng);
        toks.push(t);
        if t == world.vocab.eos {
            return world.seq(&toks);
        }
    }
    Err(Error::NonTermination(world.n))
}

/// Product of per-token conditionals along the genuine prefix of `d`.
pub fn doc_likelihood(world: &World, d: &Sequence, sel: TaskSel<'_>) -> Result<f64> {
    world.sel_index(sel)?;
    let toks = d.tokens();
    let mut lp = 0.0;
    for j in 0..toks.len() {
        let id = match sel {
            TaskSel::Task(id) => id,
            TaskSel::Composite(c) => c.task_at(j),
        };
        let p = world.prob(world.content_index(id)?, &toks[..j], toks[j]);
        if p <= 0.0 {
            return Ok(0.0);
        }
        lp += p.ln();
    }
    Ok(lp.exp())
}

pub fn marginal_likelihood(world: &World, d: &Sequence) -> f64 {
    (0..world.num_content()).map(|k| world.prior()[k] * world.log_chain(k, &[], d.tokens()).exp()).sum()
}

/// q(y | x, task) as a chain product; without a task, mixes over the posterior given x.
pub fn cond_prob(world: &World, y: &Sequence, x: &Sequence, sel: Option<TaskSel<'_>>) -> Result<f64> {
    let total = x.genuine_length() + y.genuine_length();
    if total > world.n {
        return Err(Error::LengthOverflow { got: total, width: world.n });
    }
    match sel {
        Some(TaskSel::Task(id)) => Ok(world.log_chain(world.content_index(id)?, x.tokens(), y.tokens()).exp()),
        Some(TaskSel::Composite(c)) => {
            c.validate(world)?;
            let mut ctx = x.tokens().to_vec();
            let mut lp = 0.0;
            for (j, &t) in y.tokens().iter().enumerate() {
                let p = world.prob(world.content_index(c.task_at(j))?, &ctx, t);
                if p <= 0.0 {
                    return Ok(0.0);
                }
                lp += p.ln();
                ctx.push(t);
            }
            Ok(lp.exp())
        }
        None => {
            let post = crate::inference::posterior(world, x, None)?;
            let mut acc = 0.0;
            for k in 0..world.num_content() {
                if post.weights[k] > 0.0 {
                    acc += post.weights[k] * world.log_chain(k, x.tokens(), y.tokens()).exp();
                }
            }
            Ok(acc)
        }
    }
}

/// Every reachable context (emitted prefix without EOS) of length at most n-1,
/// shortest first, lexicographic within a length.
pub fn enumerate_histories(world: &World) -> Result<Vec<Sequence>> {
    let c = world.vocab.content().len() as f64;
    let count: f64 = (0..world.n).map(|k| c.powi(k as i32)).sum();
    if count > ENUM_GUARD {
        return Err(Error::Explosion { count, guard: ENUM_GUARD });
    }
    let mut out = vec![world.seq(&[])?];
    let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
    for _ in 1..world.n {
        let mut next = Vec::new();
        for h in &frontier {
            for &t in world.vocab.content() {
                let mut g = h.clone();
                g.push(t);
                let seq = world.seq(&g)?;
                if marginal_likelihood(world, &seq) > 0.0 {
                    out.push(seq);
                    next.push(g);
                }
            }
        }
        frontier = next;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// World builders used by experiments and tests
// ---------------------------------------------------------------------------

/// Mixes a row with the uniform distribution over the emission alphabet at
/// total weight `b * |emission|`, so every emission entry is at least `b`.
pub fn floor_mix(row: &[f64], emission: &[TokenId], b: f64) -> Vec<f64> {
    let lam = b * emission.len() as f64;
    let mut out: Vec<f64> = row.iter().map(|p| (1.0 - lam) * p).collect();
    for &t in emission {
        out[t] += b;
    }
    out
}

/// Tokens laid out as: content names, then SOS, EOS, PAD, DELIM. Embeddings sit
/// on a circle of radius `alpha` in the plane (PAD at the origin).
pub fn circle_tokens(content: &[&str], alpha: f64, d: usize) -> Vec<TokenConfig> {
    assert!(d >= 2, "circle layout needs d >= 2");
    let mut toks: Vec<(String, Role)> = content.iter().map(|s| (s.to_string(), Role::Content)).collect();
    toks.push(("<sos>".into(), Role::Sos));
    toks.push(("<eos>".into(), Role::Eos));
    toks.push(("<pad>".into(), Role::Pad));
    toks.push(("<delim>".into(), Role::Delim));
    let on_circle = toks.len() - 1;
    let mut k = 0;
    toks.into_iter()
        .map(|(name, role)| {
            let mut e = vec![0.0; d];
            if role != Role::Pad {
                let ang = std::f64::consts::TAU * k as f64 / on_circle as f64;
                e[0] = alpha * ang.cos();
                e[1] = alpha * ang.sin();
                k += 1;
            }
            TokenConfig { name, role, embedding: e }
        })
        .collect()
}

/// Smallest pairwise distance among a token layout.
pub fn min_pairwise(tokens: &[TokenConfig]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..tokens.len() {
        for j in (i + 1)..tokens.len() {
            m = m.min(euclid(&tokens[i].embedding, &tokens[j].embedding));
        }
    }
    m
}

/// Markov world over `circle_tokens`. `emission_rows(task)` yields
/// (init, rows-after-each-content-token, row-after-delimiter) over the
/// emission alphabet (content tokens then EOS).
pub struct MarkovSpec {
    pub content: Vec<String>,
    pub n: usize,
    pub b: f64,
    pub prior: Vec<f64>,
    /// Per task: init row, one row per content token, delimiter row; each over content+EOS.
    pub tasks: Vec<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)>,
}

impl MarkovSpec {
    pub fn build(&self) -> Result<World> {
        let names: Vec<&str> = self.content.iter().map(|s| s.as_str()).collect();
        let alpha = 1.0;
        let tokens = circle_tokens(&names, alpha, 2);
        let beta = min_pairwise(&tokens) * (1.0 - 1e-9);
        let nc = names.len();
        let size = tokens.len();
        let (eos, delim) = (nc + 1, nc + 3);
        let widen = |r: &[f64]| -> Result<Vec<f64>> {
            if r.len() != nc + 1 {
                return Err(Error::config("markov_spec", format!("row needs {} entries", nc + 1)));
            }
            let mut out = vec![0.0; size];
            out[..nc].copy_from_slice(&r[..nc]);
            out[eos] = r[nc];
            Ok(out)
        };
        let mut tasks = Vec::new();
        for (i, (init, rows, drow)) in self.tasks.iter().enumerate() {
            if rows.len() != nc {
                return Err(Error::config(format!("markov_spec.tasks[{i}]"), "one row per content token"));
            }
            let mut matrix = vec![vec![0.0; size]; size];
            for (t, r) in rows.iter().enumerate() {
                matrix[t] = widen(r)?;
            }
            matrix[delim] = widen(drow)?;
            tasks.push(TaskConfig { id: i, kind: TaskKind::Content, init: Some(widen(init)?), matrix: Some(matrix), table: None });
        }
        tasks.push(TaskConfig { id: self.tasks.len(), kind: TaskKind::Delimiter, init: None, matrix: None, table: None });
        World::new(WorldConfig {
            d: 2,
            n: self.n,
            b: self.b,
            alpha,
            beta,
            tokens,
            tasks,
            prior: self.prior.clone(),
            delimiter_prior: None,
        })
    }
}

/// Parameters for random worlds used by property runs.
#[derive(Debug, Clone, Copy)]
pub struct RandomWorldSpec {
    pub content: usize,
    pub tasks: usize,
    pub n: usize,
    pub b: f64,
    /// Table backend with history-dependent rows instead of a Markov chain.
    pub table: bool,
}

fn random_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Random world with floor `b`; Markov rows or full context tables.
pub fn random_world<R: Rng + ?Sized>(spec: RandomWorldSpec, rng: &mut R) -> Result<World> {
    let names: Vec<String> = (0..spec.content).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let tokens = circle_tokens(&refs, 1.0, 2);
    let beta = min_pairwise(&tokens) * (1.0 - 1e-9);
    let nc = spec.content;
    let size = tokens.len();
    let (eos, delim) = (nc + 1, nc + 3);
    let mut emission: Vec<TokenId> = (0..nc).collect();
    emission.push(eos);
    let row = |rng: &mut R| -> Vec<f64> {
        let s = random_simplex(nc + 1, rng);
        let mut out = vec![0.0; size];
        for (i, &t) in emission.iter().enumerate() {
            out[t] = s[i];
        }
        floor_mix(&out, &emission, spec.b)
    };
    let mut tasks = Vec::new();
    for id in 0..spec.tasks {
        if spec.table {
            let mut table = Vec::new();
            let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
            for len in 0..spec.n.saturating_sub(1) {
                let mut next = Vec::new();
                for ctx in &frontier {
                    table.push(TableRow { context: ctx.clone(), probs: row(rng) });
                    if len + 1 < spec.n.saturating_sub(1) {
                        for t in 0..nc {
                            let mut c = ctx.clone();
                            c.push(t);
                            next.push(c);
                        }
                    }
                }
                frontier = next;
            }
            if table.is_empty() {
                table.push(TableRow { context: Vec::new(), probs: row(rng) });
            }
            tasks.push(TaskConfig { id, kind: TaskKind::Content, init: None, matrix: None, table: Some(table) });
        } else {
            let init = row(rng);
            let mut matrix = vec![vec![0.0; size]; size];
            for t in 0..nc {
                matrix[t] = row(rng);
            }
            matrix[delim] = init.clone();
            tasks.push(TaskConfig { id, kind: TaskKind::Content, init: Some(init), matrix: Some(matrix), table: None });
        }
    }
    tasks.push(TaskConfig { id: spec.tasks, kind: TaskKind::Delimiter, init: None, matrix: None, table: None });
    let prior = random_simplex(spec.tasks, rng).into_iter().map(|p| 0.05 / spec.tasks as f64 + 0.95 * p).collect::<Vec<_>>();
    let s: f64 = prior.iter().sum();
    World::new(WorldConfig {
        d: 2,
        n: spec.n,
        b: spec.b,
        alpha: 1.0,
        beta,
        tokens,
        tasks,
        prior: prior.into_iter().map(|p| p / s).collect(),
        delimiter_prior: None,
    })
}

/// The two-task reference world used by the ICL experiments.
///
/// Task A starts with `a` w.p. 0.9, task B w.p. 0.1; after `a` both tasks
/// share one row, after `b` they differ; the delimiter resets to the initial row.
pub fn canonical_icl_world() -> World {
    let a_init = vec![0.9, 0.05, 0.05];
    let b_init = vec![0.1, 0.85, 0.05];
    let after_a = vec![0.45, 0.45, 0.1];
    MarkovSpec {
        content: vec!["a".into(), "b".into()],
        n: 16,
        b: 0.05,
        prior: vec![0.5, 0.5],
        tasks: vec![
            (a_init.clone(), vec![after_a.clone(), vec![0.6, 0.3, 0.1]], a_init),
            (b_init.clone(), vec![after_a, vec![0.3, 0.6, 0.1]], b_init),
        ],
    }
    .build()
    .expect("canonical world is valid")
}

/// Two-task world for CoT experiments. Every step token `b` after any content
/// token favors task A by a factor of 4, while an input `a` at the start of a
/// demonstration favors task B by a factor of 2, which keeps c₁ε at 1/2.
pub fn cot_step_world() -> World {
    let (init_a, init_b) = (vec![0.4, 0.5, 0.1], vec![0.8, 0.1, 0.1]);
    let (row_a, row_b) = (vec![0.1, 0.8, 0.1], vec![0.7, 0.2, 0.1]);
    MarkovSpec {
        content: vec!["a".into(), "b".into()],
        n: 16,
        b: 0.05,
        prior: vec![0.5, 0.5],
        tasks: vec![(init_a.clone(), vec![row_a.clone(), row_a], init_a), (init_b.clone(), vec![row_b.clone(), row_b], init_b)],
    }
    .build()
    .expect("cot step world is valid")
}

/// Three content tokens, n = 4: small enough to memorize every history.
pub fn memorizer_world() -> World {
    MarkovSpec {
        content: vec!["a".into(), "b".into(), "c".into()],
        n: 4,
        b: 0.05,
        prior: vec![0.5, 0.5],
        tasks: vec![
            (vec![0.5, 0.3, 0.1, 0.1], vec![vec![0.6, 0.2, 0.1, 0.1], vec![0.2, 0.6, 0.1, 0.1], vec![0.1, 0.2, 0.6, 0.1]], vec![0.5, 0.3, 0.1, 0.1]),
            (vec![0.1, 0.3, 0.5, 0.1], vec![vec![0.1, 0.2, 0.6, 0.1], vec![0.3, 0.3, 0.3, 0.1], vec![0.6, 0.2, 0.1, 0.1]], vec![0.1, 0.3, 0.5, 0.1]),
        ],
    }
    .build()
    .expect("memorizer world is valid")
}

/// Composite-task world: an atomic world plus a prior over trajectories in Θ^L.
#[derive(Debug, Clone)]
pub struct CotWorld {
    pub base: World,
    /// Trajectories (task ids per step) with their prior weights.
    pub trajectories: Vec<(Vec<usize>, f64)>,
    pub query_rule: QueryRule,
    /// Optional shifted step worlds for l = 0..=L (index 0 governs queries).
    pub shifted: Option<Vec<World>>,
}

/// How the task generating each demonstration input is drawn given the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryRule {
    /// Independently from the atomic prior.
    Prior,
    /// Equal to the first step's task.
    Tied,
}

impl CotWorld {
    pub fn new(base: World, trajectories: Vec<(Vec<usize>, f64)>, query_rule: QueryRule, shifted: Option<Vec<World>>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::config("trajectories", "at least one trajectory required"));
        }
        let l = trajectories[0].0.len();
        for (i, (steps, w)) in trajectories.iter().enumerate() {
            if steps.len() != l || l == 0 {
                return Err(Error::config(format!("trajectories[{i}].steps"), "all trajectories need the same positive length"));
            }
            for &s in steps {
                base.content_index(s)?;
            }
            if !(*w > 0.0) {
                return Err(Error::config(format!("trajectories[{i}].weight"), "weights must be > 0"));
            }
            if trajectories[..i].iter().any(|(s, _)| s == steps) {
                return Err(Error::config(format!("trajectories[{i}].steps"), "duplicate trajectory"));
            }
        }
        let s: f64 = trajectories.iter().map(|t| t.1).sum();
        if (s - 1.0).abs() > ROW_TOL {
            return Err(Error::config("trajectories", format!("weights sum to {s:.17}, not 1")));
        }
        if let Some(sh) = &shifted {
            if sh.len() != l + 1 {
                return Err(Error::config("shifted", format!("expected {} step worlds (l = 0..=L)", l + 1)));
            }
            for (i, w) in sh.iter().enumerate() {
                if w.vocab.size() != base.vocab.size() || w.content_ids() != base.content_ids() || w.n != base.n {
                    return Err(Error::config(format!("shifted[{i}]"), "vocabulary, task ids and n must match the base world"));
                }
            }
        }
        Ok(CotWorld { base, trajectories, query_rule, shifted })
    }

    /// Stationary embedding of the atomic prior: q(θ,...,θ) = q(θ).
    pub fn stationary(base: World, l: usize, query_rule: QueryRule) -> Result<Self> {
        let trajectories = base.content_ids().into_iter().zip(base.prior().to_vec()).map(|(id, p)| (vec![id; l], p)).collect();
        CotWorld::new(base, trajectories, query_rule, None)
    }

    pub fn steps(&self) -> usize {
        self.trajectories[0].0.len()
    }

    /// World governing step `l` (0 = demonstration inputs and query).
    pub fn step_world(&self, l: usize) -> &World {
        match &self.shifted {
            Some(s) => &s[l],
            None => &self.base,
        }
    }
}
