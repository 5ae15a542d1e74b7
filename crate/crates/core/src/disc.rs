//! Discriminative alignment head over encoder/decoder states.
//!
//! Source and target states pass through one shared three-layer network
//! (tanh, tanh, linear). Their dot products form an N x M score matrix that
//! is convolved with a 3x3 kernel, shifted by a scalar bias and squashed to
//! independent link probabilities. Training minimises per-cell binary cross
//! entropy against gold links.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AlignmentSet, LabeledPair, ParallelCorpus, SentencePair};
use crate::error::{Error, Result};
use crate::eval::{alpha_grid, sweep_threshold, threshold, ScoreMode, SweepReport};
use crate::numerics::{conv2d_same, sigmoid, AdamConfig, Container, Graph, Matrix, NodeId, ParamStore};
use crate::projection::Aligner;
use crate::seq2seq::{sum_nodes, Binding, HiddenStates, Seq2SeqModel};
use crate::subword::{apply_bpe, reduce_alignment, segment_labeled, MergeTable};

pub const KERNEL: usize = 3;
const W: [&str; 3] = ["align.w1", "align.w2", "align.w3"];
const B: [&str; 3] = ["align.b1", "align.b2", "align.b3"];
const CONV: &str = "align.conv";
const CONV_BIAS: &str = "align.conv_bias";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvMode {
    #[default]
    Trained,
    /// Kernel fixed at the identity (ablation).
    IdentityFrozen,
}

impl std::str::FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(ConvMode::Trained),
            "identity-frozen" => Ok(ConvMode::IdentityFrozen),
            other => Err(Error::invalid(format!("unknown conv mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignerConfig {
    pub hidden: usize,
    pub conv: ConvMode,
    /// Update encoder/decoder weights along with the head.
    pub finetune: bool,
    pub lr: f64,
    /// Learning rate for encoder/decoder weights when finetuning.
    pub mt_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Dropout rate on encoder/decoder states while training the head.
    pub dropout: f64,
    pub seed: u64,
    /// Threshold used until one is tuned.
    pub alpha: f64,
    pub conv_noise: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            hidden: 64,
            conv: ConvMode::Trained,
            finetune: false,
            lr: 4e-3,
            mt_lr: 5e-4,
            steps: 6000,
            batch_size: 16,
            dropout: 0.3,
            seed: 1,
            alpha: 0.5,
            conv_noise: 0.01,
        }
    }
}

impl AlignerConfig {
    /// Defaults with encoder/decoder finetuning switched on.
    pub fn finetuned() -> Self {
        AlignerConfig {
            finetune: true,
            ..AlignerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::invalid("hidden width and batch size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lr > 0.0 && self.mt_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Head parameters: W1 d x h, W2 h x h, W3 h x h, row biases, a 3x3 kernel
/// and a scalar bias.
pub fn init_params(d: usize, cfg: &AlignerConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let h = cfg.hidden;
    for (k, (w, b)) in W.iter().zip(B).enumerate() {
        let fan_in = if k == 0 { d } else { h };
        store.insert_uniform(w, fan_in, h, (1.0 / fan_in as f64).sqrt(), &mut rng);
        store.insert(b, Matrix::zeros(1, h))?;
    }
    let kernel = match cfg.conv {
        ConvMode::Trained => Matrix::from_fn(KERNEL, KERNEL, |i, j| {
            let centre = f64::from(i == KERNEL / 2 && j == KERNEL / 2);
            centre + rng.gen_range(-cfg.conv_noise..=cfg.conv_noise)
        }),
        ConvMode::IdentityFrozen => identity_kernel(),
    };
    store.insert(CONV, kernel)?;
    store.insert(CONV_BIAS, Matrix::scalar(0.0))?;
    Ok(store)
}

fn identity_kernel() -> Matrix {
    Matrix::from_fn(KERNEL, KERNEL, |i, j| f64::from(i == KERNEL / 2 && j == KERNEL / 2))
}

/// Shared projection applied row-wise: `tanh(tanh(x W1 + b1) W2 + b2) W3 + b3`.
pub fn project(x: &Matrix, params: &ParamStore) -> Result<Matrix> {
    let get = |n: &str| params.get(n).ok_or_else(|| Error::invalid(format!("missing parameter `{n}`")));
    let mut h = x.clone();
    for k in 0..3 {
        let w = get(W[k])?;
        if h.cols() != w.rows() {
            return Err(Error::Shape(format!("state width {} does not match W{} rows {}", h.cols(), k + 1, w.rows())));
        }
        h = h.matmul(w)?;
        let b = get(B[k])?;
        for i in 0..h.rows() {
            for (v, bb) in h.row_mut(i).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        if k < 2 {
            h = h.map(f64::tanh);
        }
    }
    Ok(h)
}

/// Projects source and target states with the same weights.
pub fn project_states(states: &HiddenStates, params: &ParamStore) -> Result<(Matrix, Matrix)> {
    Ok((project(&states.encoder, params)?, project(&states.decoder, params)?))
}

/// `A[i][j] = S'_i . T'_j`.
pub fn score_matrix(s: &Matrix, t: &Matrix) -> Result<Matrix> {
    if s.cols() != t.cols() {
        return Err(Error::Shape(format!("projection widths differ: {} vs {}", s.cols(), t.cols())));
    }
    s.matmul_t(t)
}

/// `sigmoid(conv(A, K) + b)` for one pair.
pub fn forward(states: &HiddenStates, params: &ParamStore) -> Result<Matrix> {
    let (s, t) = project_states(states, params)?;
    let a = score_matrix(&s, &t)?;
    let kernel = params.get(CONV).ok_or_else(|| Error::invalid("missing conv kernel"))?;
    let bias = params.get(CONV_BIAS).map_or(0.0, |b| b.data()[0]);
    Ok(conv2d_same(&a, kernel)?.map(|v| sigmoid(v + bias)))
}

/// Independent per-cell decisions: link iff `p >= alpha`.
pub fn decode(probs: &Matrix, alpha: f64) -> AlignmentSet {
    threshold(probs, alpha)
}

/// Head graph over already-bound state nodes; returns the probability node.
pub(crate) fn head_graph(g: &mut Graph, store: &ParamStore, s: NodeId, t: NodeId, conv: ConvMode) -> Result<NodeId> {
    let mlp = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
        let mut h = x;
        for k in 0..3 {
            let w = g.param(store, W[k])?;
            let b = g.param(store, B[k])?;
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            if k < 2 {
                h = g.tanh(h);
            }
        }
        Ok(h)
    };
    let sp = mlp(g, s)?;
    let tp = mlp(g, t)?;
    let a = g.matmul_t(sp, tp)?;
    let kernel = match conv {
        ConvMode::Trained => g.param(store, CONV)?,
        ConvMode::IdentityFrozen => g.constant(identity_kernel()),
    };
    let a2 = g.conv2d_same(a, kernel)?;
    let bias = g.param(store, CONV_BIAS)?;
    let z = g.add_scalar(a2, bias)?;
    Ok(g.sigmoid(z))
}

/// Inverted dropout with a fresh mask drawn from `rng`.
fn dropout(g: &mut Graph, x: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
    if rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = g.value(x).shape();
    let keep = 1.0 / (1.0 - rate);
    let mask = g.constant(Matrix::from_fn(r, c, |_, _| if rng.gen_bool(rate) { 0.0 } else { keep }));
    g.mul(x, mask)
}

/// 0/1 label matrix for a gold link set.
pub fn label_matrix(gold: &AlignmentSet, n: usize, m: usize) -> Result<Matrix> {
    gold.check_bounds(n, m, 0)?;
    let mut y = Matrix::zeros(n, m);
    for (i, j) in gold.iter() {
        y.set(i, j, 1.0);
    }
    Ok(y)
}

/// Summed BCE of one pair given fixed states.
pub fn pair_loss(
    g: &mut Graph,
    store: &ParamStore,
    states: &HiddenStates,
    gold: &AlignmentSet,
    conv: ConvMode,
) -> Result<NodeId> {
    let labels = label_matrix(gold, states.encoder.rows(), states.decoder.rows())?;
    let s = g.constant(states.encoder.clone());
    let t = g.constant(states.decoder.clone());
    let p = head_graph(g, store, s, t, conv)?;
    g.bce(p, labels)
}

/// Trained head plus the encoder-decoder that feeds it.
#[derive(Clone, Debug)]
pub struct DiscAligner {
    pub config: AlignerConfig,
    pub params: ParamStore,
    pub mt: Seq2SeqModel,
    pub alpha: f64,
    /// When set, pairs are aligned at subword level and reduced to words.
    pub bpe: Option<MergeTable>,
    /// Mean per-pair loss of each training batch.
    pub loss_history: Vec<f64>,
}

impl DiscAligner {
    /// Starts a fresh optimizer for `mt`, so a model fresh from pretraining
    /// and the same model reloaded from disk train identically.
    pub fn new(mut mt: Seq2SeqModel, config: &AlignerConfig, bpe: Option<MergeTable>) -> Result<Self> {
        config.validate()?;
        mt.params.reset_optimizer();
        let params = init_params(mt.config.model_dim, config)?;
        Ok(DiscAligner {
            config: config.clone(),
            params,
            mt,
            alpha: config.alpha,
            bpe,
            loss_history: Vec::new(),
        })
    }

    fn segment(&self, pair: &SentencePair) -> SentencePair {
        match &self.bpe {
            None => pair.clone(),
            Some(table) => SentencePair {
                id: pair.id.clone(),
                source: apply_bpe(&pair.source, table).0,
                target: apply_bpe(&pair.target, table).0,
            },
        }
    }

    fn to_unit_level(&self, data: &[LabeledPair]) -> Result<Vec<LabeledPair>> {
        match &self.bpe {
            None => Ok(data.to_vec()),
            Some(table) => data.iter().map(|lp| segment_labeled(lp, table)).collect(),
        }
    }

    /// Runs `config.steps` Adam updates over `data`.
    pub fn train(&mut self, data: &[LabeledPair]) -> Result<()> {
        self.train_steps(data, self.config.steps)
    }

    pub fn train_steps(&mut self, data: &[LabeledPair], steps: usize) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("no labeled pairs to train on"));
        }
        let units = self.to_unit_level(data)?;
        for lp in &units {
            lp.gold.check_bounds(lp.pair.src_len(), lp.pair.tgt_len(), 0)?;
        }
        let cached: Vec<HiddenStates> = if self.config.finetune {
            Vec::new()
        } else {
            units
                .iter()
                .map(|lp| self.mt.encode_pair(&lp.pair).map(|(h, _)| h))
                .collect::<Result<_>>()?
        };
        let head_adam = AdamConfig::with_lr(self.config.lr);
        let mt_adam = AdamConfig::with_lr(self.config.mt_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xa11_9e5);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let batch = self.config.batch_size.min(units.len());
        for _ in 0..steps {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch);
            for _ in 0..batch {
                if cursor == order.len() {
                    order = (0..units.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let k = order[cursor];
                cursor += 1;
                let lp = &units[k];
                let (enc, dec) = if self.config.finetune {
                    let (src, tgt) = self.mt.ids(&lp.pair)?;
                    let f = self.mt.forward(&mut g, &self.mt.params, &src, &tgt, Binding::Train)?;
                    (f.encoder, g.slice_rows(f.decoder, 0, tgt.len())?)
                } else {
                    (g.constant(cached[k].encoder.clone()), g.constant(cached[k].decoder.clone()))
                };
                let enc = dropout(&mut g, enc, self.config.dropout, &mut rng)?;
                let dec = dropout(&mut g, dec, self.config.dropout, &mut rng)?;
                let p = head_graph(&mut g, &self.params, enc, dec, self.config.conv)?;
                let loss = g.bce(p, label_matrix(&lp.gold, lp.pair.src_len(), lp.pair.tgt_len())?)?;
                losses.push(loss);
            }
            let total = sum_nodes(&mut g, &losses)?;
            let mean = g.scale(total, 1.0 / batch as f64);
            self.loss_history.push(g.scalar(mean));
            let grads = g.backward(mean).params();
            self.params.adam_step(&self.params.select(&grads), &head_adam)?;
            if self.config.finetune {
                let mt_grads = self.mt.params.select(&grads);
                self.mt.params.adam_step(&mt_grads, &mt_adam)?;
            }
        }
        Ok(())
    }

    /// Link probabilities at the level the head operates on (subwords in
    /// BPE mode).
    pub fn unit_probs(&self, pair: &SentencePair) -> Result<Matrix> {
        let (states, _) = self.mt.encode_pair(&self.segment(pair))?;
        forward(&states, &self.params)
    }

    pub fn align_at(&self, pair: &SentencePair, alpha: f64) -> Result<AlignmentSet> {
        let probs = self.unit_probs(pair)?;
        self.word_level(pair, &decode(&probs, alpha))
    }

    fn word_level(&self, pair: &SentencePair, units: &AlignmentSet) -> Result<AlignmentSet> {
        match &self.bpe {
            None => Ok(units.clone()),
            Some(table) => {
                let (_, sm) = apply_bpe(&pair.source, table);
                let (_, tm) = apply_bpe(&pair.target, table);
                reduce_alignment(units, &sm, &tm)
            }
        }
    }

    pub fn align(&self, pair: &SentencePair) -> Result<AlignmentSet> {
        self.align_at(pair, self.alpha)
    }

    /// Sweeps `grid` on `dev` at word level and keeps the best threshold.
    pub fn tune_alpha(&mut self, dev: &[LabeledPair], grid: &[f64], mode: ScoreMode) -> Result<SweepReport> {
        let report = self.sweep(dev, grid, mode)?;
        self.alpha = report.best_alpha;
        Ok(report)
    }

    pub fn sweep(&self, dev: &[LabeledPair], grid: &[f64], mode: ScoreMode) -> Result<SweepReport> {
        let gold: Vec<AlignmentSet> = dev.iter().map(|lp| lp.gold.clone()).collect();
        if self.bpe.is_none() {
            let probs = dev
                .iter()
                .map(|lp| self.unit_probs(&lp.pair))
                .collect::<Result<Vec<_>>>()?;
            return sweep_threshold(&probs, &gold, grid, mode);
        }
        // Word-level rows need reduction per threshold.
        let probs = dev
            .iter()
            .map(|lp| self.unit_probs(&lp.pair))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(grid.len());
        for &alpha in grid {
            let pred = dev
                .iter()
                .zip(&probs)
                .map(|(lp, p)| self.word_level(&lp.pair, &decode(p, alpha)))
                .collect::<Result<Vec<_>>>()?;
            let r = crate::eval::score(&pred, &gold, mode)?;
            rows.push(crate::eval::SweepRow {
                alpha,
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
            });
        }
        let best = rows.iter().fold(rows[0], |b, r| if r.f1 > b.f1 { *r } else { b });
        Ok(SweepReport {
            mode,
            best_alpha: best.alpha,
            best_f1: best.f1,
            rows,
        })
    }

    pub fn to_container(&self) -> Container {
        let mt = self.mt.to_container();
        let header = serde_json::json!({
            "kind": "disc-align",
            "config": self.config,
            "alpha": self.alpha,
            "bpe": self.bpe.as_ref().map(MergeTable::to_text),
            "loss_history": self.loss_history,
            "mt": mt.header,
        });
        let mut params = self.params.values();
        for (k, v) in mt.params {
            params.insert(format!("mt.{k}"), v);
        }
        Container::new(header, params)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.get("kind").and_then(|k| k.as_str()) != Some("disc-align") {
            return Err(Error::Format("container does not hold a disc aligner".into()));
        }
        let field = |k: &str| c.header.get(k).cloned().ok_or_else(|| Error::Format(format!("header lacks `{k}`")));
        let config: AlignerConfig = serde_json::from_value(field("config")?)?;
        let alpha: f64 = serde_json::from_value(field("alpha")?)?;
        let bpe: Option<String> = serde_json::from_value(field("bpe")?)?;
        let loss_history: Vec<f64> = serde_json::from_value(field("loss_history")?)?;
        let mut head = indexmap::IndexMap::new();
        let mut mt_params = indexmap::IndexMap::new();
        for (k, v) in &c.params {
            match k.strip_prefix("mt.") {
                Some(rest) => mt_params.insert(rest.to_owned(), v.clone()),
                None => head.insert(k.clone(), v.clone()),
            };
        }
        let mt = Seq2SeqModel::from_container(&Container::new(field("mt")?, mt_params))?;
        Ok(DiscAligner {
            config,
            params: ParamStore::from_values(head)?,
            mt,
            alpha,
            bpe: bpe.as_deref().map(MergeTable::parse).transpose()?,
            loss_history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl Aligner for DiscAligner {
    fn name(&self) -> String {
        "disc".into()
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.alpha)
    }

    fn align_corpus(&self, corpus: &ParallelCorpus) -> Result<Vec<AlignmentSet>> {
        corpus.iter().map(|p| self.align(p)).collect()
    }
}

/// Pretrained model plus a head trained on `train`, with α tuned on `tune`.
pub fn train_aligner(
    mt: Seq2SeqModel,
    train: &[LabeledPair],
    tune: &[LabeledPair],
    config: &AlignerConfig,
    bpe: Option<MergeTable>,
) -> Result<(DiscAligner, SweepReport)> {
    let mut aligner = DiscAligner::new(mt, config, bpe)?;
    aligner.train(train)?;
    let report = aligner.tune_alpha(tune, &default_alpha_grid(), ScoreMode::Macro)?;
    Ok((aligner, report))
}

pub fn default_alpha_grid() -> Vec<f64> {
    alpha_grid(0.05, 0.95, 18)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::seq2seq::Seq2SeqConfig;

    fn scalar_params(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        for k in 0..3 {
            p.insert(W[k], Matrix::scalar(w)).unwrap();
            p.insert(B[k], Matrix::scalar(0.0)).unwrap();
        }
        p.insert(CONV, identity_kernel()).unwrap();
        p.insert(CONV_BIAS, Matrix::scalar(0.0)).unwrap();
        p
    }

    #[test]
    fn projection_cases() {
        let zero = scalar_params(0.0);
        assert_eq!(project(&Matrix::scalar(3.0), &zero).unwrap(), Matrix::scalar(0.0));
        let one = scalar_params(1.0);
        let out = project(&Matrix::scalar(1.0), &one).unwrap().data()[0];
        assert!((out - 1f64.tanh().tanh()).abs() < 1e-15);
        assert!((out - 0.64201).abs() < 1e-5);

        let cfg = AlignerConfig { hidden: 5, ..AlignerConfig::default() };
        let p = init_params(4, &cfg).unwrap();
        let v = Matrix::from_rows(&[[0.3, -0.2, 0.9, 0.1]]);
        let states = HiddenStates { encoder: v.clone(), decoder: v };
        let (s, t) = project_states(&states, &p).unwrap();
        assert_eq!(s, t);
        assert!(project(&Matrix::zeros(1, 3), &p).is_err());
    }

    #[test]
    fn score_matrix_cases() {
        let s = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let t = Matrix::from_rows(&[[1.0, 0.0]]);
        assert_eq!(score_matrix(&s, &t).unwrap(), Matrix::from_rows(&[[1.0], [0.0]]));
        let o = Matrix::from_rows(&[[0.0, 1.0]]);
        assert_eq!(score_matrix(&t, &o).unwrap(), Matrix::scalar(0.0));
        assert_eq!(score_matrix(&s, &t).unwrap(), s.matmul(&t.transpose()).unwrap());
        assert!(score_matrix(&s, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn forward_cases() {
        let zero = scalar_params(0.0);
        let states = HiddenStates {
            encoder: Matrix::from_rows(&[[1.0], [2.0]]),
            decoder: Matrix::from_rows(&[[1.0], [-1.0], [0.5]]),
        };
        let p = forward(&states, &zero).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));

        let one = scalar_params(1.0);
        let (s, t) = project_states(&states, &one).unwrap();
        let expect = score_matrix(&s, &t).unwrap().map(sigmoid);
        assert_eq!(forward(&states, &one).unwrap(), expect);

        let single = HiddenStates {
            encoder: Matrix::scalar(1.0),
            decoder: Matrix::scalar(1.0),
        };
        assert_eq!(forward(&single, &one).unwrap().shape(), (1, 1));
    }

    #[test]
    fn decode_cases() {
        let p = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]);
        assert_eq!(decode(&p, 0.5).iter().collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert_eq!(decode(&p, 0.0).len(), 4);
        assert!(decode(&p, 0.95).is_empty());
    }

    #[test]
    fn end_to_end_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = HiddenStates {
            encoder: Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0)),
            decoder: Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let gold: AlignmentSet = [(0, 0), (1, 2), (2, 3)].into_iter().collect();
        let cfg = AlignerConfig { hidden: 5, conv_noise: 0.3, ..AlignerConfig::default() };
        let mut store = init_params(4, &cfg).unwrap();
        let err = grad_check(&mut store, |g, s| pair_loss(g, s, &states, &gold, ConvMode::Trained)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn tiny_mt(pairs: &[(&str, &str)]) -> (Seq2SeqModel, Vec<SentencePair>) {
        let ps: Vec<SentencePair> = pairs
            .iter()
            .enumerate()
            .map(|(k, (s, t))| SentencePair::from_text(k.to_string(), s, t).unwrap())
            .collect();
        let corpus = ParallelCorpus::new(ps.clone());
        let mt = Seq2SeqModel::init(&corpus, &Seq2SeqConfig { steps: 0, ..Seq2SeqConfig::default() }).unwrap();
        (mt, ps)
    }

    #[test]
    fn empty_gold_drives_probabilities_down() {
        let (mt, ps) = tiny_mt(&[("a b c", "x y"), ("b c", "y z w"), ("a", "w")]);
        let data: Vec<LabeledPair> = ps.into_iter().map(|p| LabeledPair { pair: p, gold: AlignmentSet::new() }).collect();
        let mut al = DiscAligner::new(mt, &AlignerConfig { steps: 200, ..AlignerConfig::default() }, None).unwrap();
        al.train(&data).unwrap();
        let mean: f64 = data.iter().map(|lp| al.unit_probs(&lp.pair).unwrap().mean()).sum::<f64>() / data.len() as f64;
        assert!(mean < 0.1, "{mean}");
    }

    #[test]
    fn full_gold_drives_probabilities_up() {
        let (mt, ps) = tiny_mt(&[("a b c", "x y")]);
        let gold: AlignmentSet = (0..3).flat_map(|i| (0..2).map(move |j| (i, j))).collect();
        let data = vec![LabeledPair { pair: ps[0].clone(), gold }];
        let mut al = DiscAligner::new(mt, &AlignerConfig { steps: 200, ..AlignerConfig::default() }, None).unwrap();
        al.train(&data).unwrap();
        let mean = al.unit_probs(&data[0].pair).unwrap().mean();
        assert!(mean > 0.9, "{mean}");
    }

    #[test]
    fn finetune_updates_encoder_and_round_trips() {
        let (mt, ps) = tiny_mt(&[("a b", "x y"), ("b a", "y x")]);
        let data: Vec<LabeledPair> = ps
            .iter()
            .map(|p| LabeledPair {
                pair: p.clone(),
                gold: [(0, 0), (1, 1)].into_iter().collect(),
            })
            .collect();
        let before = mt.params.values();
        let cfg = AlignerConfig { steps: 3, finetune: true, ..AlignerConfig::default() };
        let mut al = DiscAligner::new(mt, &cfg, None).unwrap();
        al.train(&data).unwrap();
        assert_ne!(al.mt.params.values(), before);

        let bytes = al.to_container().to_bytes().unwrap();
        let back = DiscAligner::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
        assert_eq!(back.unit_probs(&ps[0]).unwrap(), al.unit_probs(&ps[0]).unwrap());
    }

    #[test]
    fn identity_frozen_kernel_never_moves() {
        let (mt, ps) = tiny_mt(&[("a b", "x y")]);
        let data = vec![LabeledPair { pair: ps[0].clone(), gold: [(0, 1)].into_iter().collect() }];
        let cfg = AlignerConfig { steps: 20, conv: ConvMode::IdentityFrozen, ..AlignerConfig::default() };
        let mut al = DiscAligner::new(mt, &cfg, None).unwrap();
        al.train(&data).unwrap();
        assert_eq!(al.params.get(CONV).unwrap(), &identity_kernel());
    }

    #[test]
    fn finetuning_ignores_pretraining_optimizer_state() {
        let (mut mt, ps) = tiny_mt(&[("a b", "x y"), ("b a", "y x")]);
        mt.train(&ParallelCorpus::new(ps.clone()), 5).unwrap();
        let reloaded = Seq2SeqModel::from_container(&mt.to_container()).unwrap();
        let data: Vec<LabeledPair> = ps
            .iter()
            .map(|p| LabeledPair { pair: p.clone(), gold: [(0, 0)].into_iter().collect() })
            .collect();
        let cfg = AlignerConfig { steps: 4, finetune: true, ..AlignerConfig::default() };
        let mut a = DiscAligner::new(mt, &cfg, None).unwrap();
        let mut b = DiscAligner::new(reloaded, &cfg, None).unwrap();
        a.train(&data).unwrap();
        b.train(&data).unwrap();
        assert_eq!(a.mt.params, b.mt.params);
        assert_eq!(a.params, b.params);
    }
}
