//! IBM Model 1 and a log-linear diagonal Model 2 trained by EM, Viterbi
//! decoding and symmetrization heuristics.
//!
//! The model generates each token on its output side from one token on its
//! input side or from a null word. `Direction::Forward` reads source and
//! generates target; `Backward` is the reverse. Links are always reported as
//! (source index, target index).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{AlignmentSet, LabeledPair, ParallelCorpus, SentencePair};
use crate::error::{Error, Result};
use crate::eval::{score, ScoreMode};

/// Probability given to lexical pairs never seen in training.
pub const UNSEEN_PROB: f64 = 1e-12;
pub const NULL_TOKEN: &str = "<null>";
/// Upper end of the tension search interval.
pub const LAMBDA_MAX: f64 = 100.0;
const GOLDEN_ITERS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatMode {
    Model1,
    Model2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn reversed(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

macro_rules! text_enum {
    ($ty:ty { $($name:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(Error::invalid(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

text_enum!(StatMode { "model1" => StatMode::Model1, "model2" => StatMode::Model2 });
text_enum!(Direction { "forward" => Direction::Forward, "backward" => Direction::Backward });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub iterations: usize,
    pub mode: StatMode,
    pub p0: f64,
    /// Starting tension; ignored in Model 1 mode.
    pub lambda: f64,
    pub optimize_lambda: bool,
    pub direction: Direction,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            iterations: 5,
            mode: StatMode::Model2,
            p0: 0.08,
            lambda: 4.0,
            optimize_lambda: true,
            direction: Direction::Forward,
        }
    }
}

impl EmConfig {
    pub fn model1() -> Self {
        EmConfig {
            mode: StatMode::Model1,
            lambda: 0.0,
            optimize_lambda: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.p0) {
            return Err(Error::invalid(format!("p0 = {} outside [0, 1)", self.p0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda = {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Lexical table plus alignment prior for one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct StatModel {
    pub mode: StatMode,
    pub direction: Direction,
    pub lambda: f64,
    pub p0: f64,
    /// Marginal log-likelihood of the training data measured in each E step.
    pub log_likelihood: Vec<f64>,
    input_vocab: IndexMap<String, u32>,
    output_vocab: IndexMap<String, u32>,
    /// Row 0 is the null word; row `k + 1` is input token id `k`.
    table: Vec<IndexMap<u32, f64>>,
}

/// Log of the diagonal prior normaliser for output position `j` (0-based).
fn log_partition(lambda: f64, j: usize, m: usize, n: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let feats: Vec<f64> = (0..n).map(|k| -lambda * diag_distance(j, m, k, n)).collect();
    for &f in &feats {
        max = max.max(f);
    }
    max + feats.iter().map(|f| (f - max).exp()).sum::<f64>().ln()
}

/// `|(j+1)/m - (k+1)/n|` with 1-based positions.
fn diag_distance(j: usize, m: usize, k: usize, n: usize) -> f64 {
    ((j + 1) as f64 / m as f64 - (k + 1) as f64 / n as f64).abs()
}

/// Prior over the `n` input positions for output position `j`, excluding the
/// null mass. Sums to `1 - p0`.
fn position_prior(mode: StatMode, lambda: f64, p0: f64, j: usize, m: usize, n: usize, out: &mut Vec<f64>) {
    out.clear();
    match mode {
        StatMode::Model1 => out.extend(std::iter::repeat((1.0 - p0) / n as f64).take(n)),
        StatMode::Model2 => {
            let lz = log_partition(lambda, j, m, n);
            out.extend((0..n).map(|k| (1.0 - p0) * (-lambda * diag_distance(j, m, k, n) - lz).exp()));
        }
    }
}

/// Sentence pair already mapped to model ids, oriented input -> output.
struct Encoded {
    input: Vec<u32>,
    output: Vec<u32>,
}

fn intern(vocab: &mut IndexMap<String, u32>, tok: &str) -> u32 {
    if let Some(&id) = vocab.get(tok) {
        return id;
    }
    let id = vocab.len() as u32;
    vocab.insert(tok.to_owned(), id);
    id
}

fn oriented(pair: &SentencePair, direction: Direction) -> (&[String], &[String]) {
    match direction {
        Direction::Forward => (&pair.source, &pair.target),
        Direction::Backward => (&pair.target, &pair.source),
    }
}

/// Maximises `lambda * e - sum_w w * ln Z(lambda)` over [0, LAMBDA_MAX].
fn golden_section(f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, LAMBDA_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

pub fn em_train(corpus: &ParallelCorpus, cfg: &EmConfig) -> Result<StatModel> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train on an empty corpus"));
    }
    let mut input_vocab = IndexMap::new();
    let mut output_vocab = IndexMap::new();
    let mut data = Vec::with_capacity(corpus.len());
    for pair in corpus {
        pair.validate()?;
        let (inp, out) = oriented(pair, cfg.direction);
        data.push(Encoded {
            input: inp.iter().map(|t| intern(&mut input_vocab, t)).collect(),
            output: out.iter().map(|t| intern(&mut output_vocab, t)).collect(),
        });
    }

    // Uniform start over co-occurring pairs.
    let uniform = 1.0 / output_vocab.len() as f64;
    let mut table: Vec<IndexMap<u32, f64>> = vec![IndexMap::new(); input_vocab.len() + 1];
    for e in &data {
        for &o in &e.output {
            table[0].insert(o, uniform);
            for &i in &e.input {
                table[i as usize + 1].insert(o, uniform);
            }
        }
    }

    let lambda = match cfg.mode {
        StatMode::Model1 => 0.0,
        StatMode::Model2 => cfg.lambda,
    };
    let mut model = StatModel {
        mode: cfg.mode,
        direction: cfg.direction,
        lambda,
        p0: cfg.p0,
        log_likelihood: Vec::with_capacity(cfg.iterations),
        input_vocab,
        output_vocab,
        table,
    };

    let mut prior = Vec::new();
    let mut post = Vec::new();
    for _ in 0..cfg.iterations {
        let mut counts: Vec<IndexMap<u32, f64>> = vec![IndexMap::new(); model.table.len()];
        let mut ll = 0.0;
        // (j, m, n) -> non-null posterior mass, for the tension update.
        let mut mass: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        let mut expected_feature = 0.0;

        for e in &data {
            let (n, m) = (e.input.len(), e.output.len());
            for (j, &o) in e.output.iter().enumerate() {
                position_prior(model.mode, model.lambda, model.p0, j, m, n, &mut prior);
                post.clear();
                let null = model.p0 * model.lookup(0, o);
                let mut z = null;
                for (k, &i) in e.input.iter().enumerate() {
                    let p = prior[k] * model.lookup(i as usize + 1, o);
                    post.push(p);
                    z += p;
                }
                ll += z.ln();
                *counts[0].entry(o).or_insert(0.0) += null / z;
                let mut non_null = 0.0;
                for (k, &i) in e.input.iter().enumerate() {
                    let q = post[k] / z;
                    *counts[i as usize + 1].entry(o).or_insert(0.0) += q;
                    non_null += q;
                    expected_feature -= q * diag_distance(j, m, k, n);
                }
                *mass.entry((j, m, n)).or_insert(0.0) += non_null;
            }
        }
        model.log_likelihood.push(ll);

        for (row, c) in model.table.iter_mut().zip(counts) {
            let total: f64 = c.values().sum();
            if total > 0.0 {
                *row = c.into_iter().map(|(o, v)| (o, v / total)).collect();
            }
        }

        if cfg.mode == StatMode::Model2 && cfg.optimize_lambda {
            model.lambda = golden_section(|lam| {
                lam * expected_feature
                    - mass
                        .iter()
                        .map(|(&(j, m, n), &w)| w * log_partition(lam, j, m, n))
                        .sum::<f64>()
            });
        }
    }
    Ok(model)
}

/// Symmetrization heuristics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heuristic {
    #[serde(rename = "intersection")]
    Intersection,
    #[serde(rename = "union")]
    Union,
    #[serde(rename = "grow-diag-final-and")]
    GrowDiagFinalAnd,
}

text_enum!(Heuristic {
    "intersection" => Heuristic::Intersection,
    "union" => Heuristic::Union,
    "grow-diag-final-and" => Heuristic::GrowDiagFinalAnd,
});

const NEIGHBOURS: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];

pub fn symmetrize(fwd: &AlignmentSet, bwd: &AlignmentSet, heuristic: Heuristic, n: usize, m: usize) -> Result<AlignmentSet> {
    fwd.check_bounds(n, m, 0)?;
    bwd.check_bounds(n, m, 0)?;
    let union = fwd.union(bwd);
    let mut out = fwd.intersection(bwd);
    match heuristic {
        Heuristic::Intersection => return Ok(out),
        Heuristic::Union => return Ok(union),
        Heuristic::GrowDiagFinalAnd => {}
    }
    let mut src_cov = vec![false; n];
    let mut tgt_cov = vec![false; m];
    for (i, j) in out.iter() {
        src_cov[i] = true;
        tgt_cov[j] = true;
    }

    loop {
        let mut added = false;
        for i in 0..n {
            for j in 0..m {
                if !out.contains(i, j) {
                    continue;
                }
                for (di, dj) in NEIGHBOURS {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni as usize >= n || nj as usize >= m {
                        continue;
                    }
                    let (ni, nj) = (ni as usize, nj as usize);
                    if (!src_cov[ni] || !tgt_cov[nj]) && union.contains(ni, nj) && !out.contains(ni, nj) {
                        out.insert(ni, nj);
                        src_cov[ni] = true;
                        tgt_cov[nj] = true;
                        added = true;
                    }
                }
            }
        }
        if !added {
            break;
        }
    }

    for dir in [fwd, bwd] {
        for (i, j) in dir.iter() {
            if !src_cov[i] && !tgt_cov[j] {
                out.insert(i, j);
                src_cov[i] = true;
                tgt_cov[j] = true;
            }
        }
    }
    Ok(out)
}

impl StatModel {
    /// Builds a model from explicit `(input, output, prob)` entries. Use
    /// [`NULL_TOKEN`] as the input to set null-word probabilities.
    pub fn from_entries<'a>(
        mode: StatMode,
        direction: Direction,
        lambda: f64,
        p0: f64,
        entries: impl IntoIterator<Item = (&'a str, &'a str, f64)>,
    ) -> Result<Self> {
        let mut model = StatModel {
            mode,
            direction,
            lambda,
            p0,
            log_likelihood: Vec::new(),
            input_vocab: IndexMap::new(),
            output_vocab: IndexMap::new(),
            table: vec![IndexMap::new()],
        };
        for (inp, out, p) in entries {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("probability {p} for `{inp} {out}` outside [0, 1]")));
            }
            let row = if inp == NULL_TOKEN {
                0
            } else {
                let id = intern(&mut model.input_vocab, inp) as usize + 1;
                if model.table.len() <= id {
                    model.table.resize(id + 1, IndexMap::new());
                }
                id
            };
            let o = intern(&mut model.output_vocab, out);
            model.table[row].insert(o, p);
        }
        EmConfig {
            iterations: 1,
            mode,
            p0,
            lambda,
            optimize_lambda: false,
            direction,
        }
        .validate()?;
        Ok(model)
    }

    fn lookup(&self, row: usize, o: u32) -> f64 {
        self.table.get(row).and_then(|r| r.get(&o)).copied().unwrap_or(UNSEEN_PROB)
    }

    fn row_of(&self, token: &str) -> Option<usize> {
        self.input_vocab.get(token).map(|&i| i as usize + 1)
    }

    /// t(output | input); pass [`NULL_TOKEN`] for the null word.
    pub fn prob(&self, input: &str, output: &str) -> f64 {
        let row = if input == NULL_TOKEN { Some(0) } else { self.row_of(input) };
        match (row, self.output_vocab.get(output)) {
            (Some(r), Some(&o)) => self.lookup(r, o),
            _ => UNSEEN_PROB,
        }
    }

    /// Sum of each lexical row; every trained row is 1 up to rounding.
    pub fn row_sums(&self) -> Vec<f64> {
        self.table.iter().filter(|r| !r.is_empty()).map(|r| r.values().sum()).collect()
    }

    /// Most probable generator for each output token; null wins only when
    /// strictly better, and ties between input positions go to the smaller index.
    pub fn viterbi_align(&self, pair: &SentencePair) -> AlignmentSet {
        let (inp, out) = oriented(pair, self.direction);
        let (n, m) = (inp.len(), out.len());
        let rows: Vec<Option<usize>> = inp.iter().map(|t| self.row_of(t)).collect();
        let mut prior = Vec::new();
        let mut links = AlignmentSet::new();
        for (j, tok) in out.iter().enumerate() {
            let o = self.output_vocab.get(tok.as_str()).copied();
            let lex = |row: Option<usize>| match (row, o) {
                (Some(r), Some(o)) => self.lookup(r, o),
                _ => UNSEEN_PROB,
            };
            position_prior(self.mode, self.lambda, self.p0, j, m, n, &mut prior);
            let mut best: Option<(usize, f64)> = None;
            for k in 0..n {
                let s = prior[k] * lex(rows[k]);
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
            let null = self.p0 * lex(Some(0));
            if let Some((k, s)) = best {
                if s >= null {
                    match self.direction {
                        Direction::Forward => links.insert(k, j),
                        Direction::Backward => links.insert(j, k),
                    };
                }
            }
        }
        links
    }

    pub fn align_corpus(&self, corpus: &ParallelCorpus) -> Vec<AlignmentSet> {
        corpus.iter().map(|p| self.viterbi_align(p)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "stat-model lambda={} p0={} direction={} mode={}\n",
            self.lambda, self.p0, self.direction, self.mode
        );
        let in_names: Vec<&str> = self.input_vocab.keys().map(String::as_str).collect();
        let out_names: Vec<&str> = self.output_vocab.keys().map(String::as_str).collect();
        let mut lines: Vec<(&str, &str, f64)> = Vec::new();
        for (row, entries) in self.table.iter().enumerate() {
            let inp = if row == 0 { NULL_TOKEN } else { in_names[row - 1] };
            for (&o, &p) in entries {
                lines.push((inp, out_names[o as usize], p));
            }
        }
        lines.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for (i, o, p) in lines {
            let _ = writeln!(out, "{i} {o} {p}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "missing stat-model header"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("stat-model") {
            return Err(Error::parse(1, "header must start with `stat-model`"));
        }
        let mut kv = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| Error::parse(1, format!("bad header field `{f}`")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::parse(1, format!("header lacks `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::parse(1, format!("bad `{k}` value"))) };
        let (lambda, p0) = (num("lambda")?, num("p0")?);
        let direction: Direction = get("direction")?.parse()?;
        let mode: StatMode = get("mode")?.parse()?;

        let mut entries = Vec::new();
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [i, o, p] = parts[..] else {
                return Err(Error::parse(k + 2, "expected `input output prob`"));
            };
            let p: f64 = p.parse().map_err(|_| Error::parse(k + 2, format!("bad probability `{p}`")))?;
            entries.push((i, o, p));
        }
        Self::from_entries(mode, direction, lambda, p0, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Forward and backward models trained with the same settings.
#[derive(Clone, Debug)]
pub struct StatPair {
    pub forward: StatModel,
    pub backward: StatModel,
}

impl StatPair {
    pub fn train(corpus: &ParallelCorpus, cfg: &EmConfig) -> Result<Self> {
        let fwd = EmConfig {
            direction: Direction::Forward,
            ..cfg.clone()
        };
        let bwd = EmConfig {
            direction: Direction::Backward,
            ..cfg.clone()
        };
        Ok(StatPair {
            forward: em_train(corpus, &fwd)?,
            backward: em_train(corpus, &bwd)?,
        })
    }

    pub fn align(&self, pair: &SentencePair, heuristic: Heuristic) -> Result<AlignmentSet> {
        symmetrize(
            &self.forward.viterbi_align(pair),
            &self.backward.viterbi_align(pair),
            heuristic,
            pair.src_len(),
            pair.tgt_len(),
        )
    }

    pub fn align_corpus(&self, corpus: &ParallelCorpus, heuristic: Heuristic) -> Result<Vec<AlignmentSet>> {
        corpus.iter().map(|p| self.align(p, heuristic)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub p0: f64,
    pub iterations: usize,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub rows: Vec<TuneRow>,
    pub best: EmConfig,
    pub best_f1: f64,
}

/// Grid search over `p0` and iteration count, scoring symmetrized alignments
/// of `dev` (macro F1). `corpus` should already contain the dev bitext if it is
/// meant to be seen by EM; gold links are never used for training.
pub fn tune(
    corpus: &ParallelCorpus,
    dev: &[LabeledPair],
    base: &EmConfig,
    p0_grid: &[f64],
    iteration_grid: &[usize],
    heuristic: Heuristic,
) -> Result<TuneReport> {
    if dev.is_empty() || p0_grid.is_empty() || iteration_grid.is_empty() {
        return Err(Error::invalid("tuning needs a dev set and non-empty grids"));
    }
    let gold: Vec<AlignmentSet> = dev.iter().map(|lp| lp.gold.clone()).collect();
    let mut rows = Vec::new();
    let mut best: Option<(EmConfig, f64)> = None;
    for &p0 in p0_grid {
        for &iterations in iteration_grid {
            let cfg = EmConfig {
                p0,
                iterations,
                ..base.clone()
            };
            let models = StatPair::train(corpus, &cfg)?;
            let pred = dev
                .iter()
                .map(|lp| models.align(&lp.pair, heuristic))
                .collect::<Result<Vec<_>>>()?;
            let f1 = score(&pred, &gold, ScoreMode::Macro)?.f1;
            rows.push(TuneRow { p0, iterations, f1 });
            if best.as_ref().map_or(true, |(_, b)| f1 > *b) {
                best = Some((cfg, f1));
            }
        }
    }
    let (best, best_f1) = best.expect("non-empty grid");
    Ok(TuneReport { rows, best, best_f1 })
}
