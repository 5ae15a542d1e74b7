//! Small pre-LN transformer encoder-decoder.
//!
//! Supplies teacher-forced encoder/decoder states to the alignment head,
//! exposes cross-attention for the attention-average baseline, and decodes
//! greedily for projection experiments.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AlignmentSet, ParallelCorpus, SentencePair, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Container, Graph, Matrix, NodeId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Upper bounds on vocabulary size, reserved entries included.
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// One joint vocabulary with shared source and target embeddings.
    pub tie_weights: bool,
    pub lr: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            layers: 2,
            heads: 2,
            model_dim: 32,
            ff_dim: 64,
            src_vocab_size: 4096,
            tgt_vocab_size: 4096,
            tie_weights: true,
            lr: 5e-3,
            seed: 1,
            steps: 1000,
            batch_size: 32,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.layers, self.heads, self.model_dim, self.ff_dim, self.batch_size]
            .iter()
            .any(|&v| v == 0)
        {
            return Err(Error::invalid("layers, heads, dims and batch size must be >= 1"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Teacher-forced states for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// N x d, final encoder output.
    pub encoder: Matrix,
    /// M x d; row j is the final decoder output at the step that predicts
    /// target token j (input: the start token and tokens before j).
    pub decoder: Matrix,
}

/// `layers[l][h]` is the M x N cross-attention of head h in decoder layer
/// l, restricted to the rows that predict each target token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Vec<Matrix>>,
}

impl AttentionStack {
    /// Head average of the final layer.
    pub fn final_average(&self) -> Option<Matrix> {
        let last = self.layers.last()?;
        let mut acc = last.first()?.clone();
        for m in &last[1..] {
            acc.add_assign(m);
        }
        Some(acc.scale(1.0 / last.len() as f64))
    }
}

/// Links (i, j) where the head-averaged final-layer attention of target j on
/// source i is at least `alpha`.
pub fn attention_align(stack: &AttentionStack, alpha: f64) -> AlignmentSet {
    let mut out = AlignmentSet::new();
    if let Some(avg) = stack.final_average() {
        for j in 0..avg.rows() {
            for (i, &w) in avg.row(j).iter().enumerate() {
                if w >= alpha {
                    out.insert(i, j);
                }
            }
        }
    }
    out
}

/// How transformer parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Train,
    Frozen,
}

pub(crate) struct Forward {
    pub encoder: NodeId,
    /// Final decoder output for inputs `[BOS, t_1 .. t_M]`.
    pub decoder: NodeId,
    pub cross_attention: Vec<Vec<NodeId>>,
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    pub config: Seq2SeqConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub params: ParamStore,
    /// Mean per-token training cross entropy of each step's batch.
    pub loss_history: Vec<f64>,
}

fn sinusoid(len: usize, d: usize) -> Matrix {
    Matrix::from_fn(len, d, |pos, k| {
        let rate = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Seq2SeqModel {
    /// Builds vocabularies from `corpus` and initialises parameters.
    pub fn init(corpus: &ParallelCorpus, config: &Seq2SeqConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::invalid("cannot pretrain on an empty corpus"));
        }
        let (src_vocab, tgt_vocab) = if config.tie_weights {
            let joint = Vocabulary::build(corpus.iter().flat_map(|p| p.source.iter().chain(&p.target)));
            (joint.clone(), joint)
        } else {
            (
                Vocabulary::build(corpus.iter().flat_map(|p| &p.source)),
                Vocabulary::build(corpus.iter().flat_map(|p| &p.target)),
            )
        };
        for (side, vocab, limit) in [
            ("source", &src_vocab, config.src_vocab_size),
            ("target", &tgt_vocab, config.tgt_vocab_size),
        ] {
            if vocab.len() > limit {
                return Err(Error::VocabOverflow {
                    side,
                    found: vocab.len(),
                    limit,
                });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.model_dim;
        let dk = config.head_dim();
        let emb_scale = 1.0 / (d as f64).sqrt();
        let lin = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        if config.tie_weights {
            params.insert_uniform("emb", src_vocab.len(), d, emb_scale, &mut rng);
        } else {
            params.insert_uniform("src_emb", src_vocab.len(), d, emb_scale, &mut rng);
            params.insert_uniform("tgt_emb", tgt_vocab.len(), d, emb_scale, &mut rng);
        }
        // Small output weights keep the untrained prediction near uniform.
        params.insert_uniform("out_w", tgt_vocab.len(), d, 0.1 * emb_scale, &mut rng);
        params.insert("out_b", Matrix::zeros(1, tgt_vocab.len()))?;

        let attention = |params: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
            for h in 0..config.heads {
                for w in ["q", "k", "v"] {
                    params.insert_uniform(&format!("{prefix}.{w}{h}"), d, dk, lin(d), rng);
                }
            }
            params.insert_uniform(&format!("{prefix}.o"), d, d, lin(d), rng);
        };
        for l in 0..config.layers {
            attention(&mut params, &format!("enc{l}.self"), &mut rng);
            attention(&mut params, &format!("dec{l}.self"), &mut rng);
            attention(&mut params, &format!("dec{l}.cross"), &mut rng);
            for side in ["enc", "dec"] {
                let p = format!("{side}{l}.ff");
                params.insert_uniform(&format!("{p}.w1"), d, config.ff_dim, lin(d), &mut rng);
                params.insert(&format!("{p}.b1"), Matrix::zeros(1, config.ff_dim))?;
                params.insert_uniform(&format!("{p}.w2"), config.ff_dim, d, lin(config.ff_dim), &mut rng);
                params.insert(&format!("{p}.b2"), Matrix::zeros(1, d))?;
            }
        }

        Ok(Seq2SeqModel {
            config: config.clone(),
            src_vocab,
            tgt_vocab,
            params,
            loss_history: Vec::new(),
        })
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore, name: &str, mode: Binding) -> Result<NodeId> {
        match mode {
            Binding::Train => g.param(store, name),
            Binding::Frozen => g.frozen(store, name),
        }
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], target: bool, mode: Binding) -> Result<NodeId> {
        let name = match (self.config.tie_weights, target) {
            (true, _) => "emb",
            (false, false) => "src_emb",
            (false, true) => "tgt_emb",
        };
        let table = self.bind(g, store, name, mode)?;
        let rows = g.gather(table, ids)?;
        let scaled = g.scale(rows, (self.config.model_dim as f64).sqrt());
        let pos = g.constant(sinusoid(ids.len(), self.config.model_dim));
        g.add(scaled, pos)
    }

    /// Multi-head attention of `query` rows over `memory` rows; returns the
    /// output and each head's weights.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: &str,
        query: NodeId,
        memory: NodeId,
        causal: bool,
        mode: Binding,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let wq = self.bind(g, store, &format!("{prefix}.q{h}"), mode)?;
            let wk = self.bind(g, store, &format!("{prefix}.k{h}"), mode)?;
            let wv = self.bind(g, store, &format!("{prefix}.v{h}"), mode)?;
            let q = g.matmul(query, wq)?;
            let k = g.matmul(memory, wk)?;
            let v = g.matmul(memory, wv)?;
            let s = g.matmul_t(q, k)?;
            let s = g.scale(s, scale);
            let a = if causal { g.causal_softmax_rows(s) } else { g.softmax_rows(s) };
            heads.push(g.matmul(a, v)?);
            weights.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let wo = self.bind(g, store, &format!("{prefix}.o"), mode)?;
        Ok((g.matmul(cat, wo)?, weights))
    }

    fn feed_forward(&self, g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId, mode: Binding) -> Result<NodeId> {
        let w1 = self.bind(g, store, &format!("{prefix}.w1"), mode)?;
        let b1 = self.bind(g, store, &format!("{prefix}.b1"), mode)?;
        let w2 = self.bind(g, store, &format!("{prefix}.w2"), mode)?;
        let b2 = self.bind(g, store, &format!("{prefix}.b2"), mode)?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, src: &[usize], mode: Binding) -> Result<NodeId> {
        let mut x = self.embed(g, store, src, false, mode)?;
        for l in 0..self.config.layers {
            let n = g.layer_norm(x);
            let (a, _) = self.attention(g, store, &format!("enc{l}.self"), n, n, false, mode)?;
            x = g.add(x, a)?;
            let n = g.layer_norm(x);
            let f = self.feed_forward(g, store, &format!("enc{l}.ff"), n, mode)?;
            x = g.add(x, f)?;
        }
        Ok(g.layer_norm(x))
    }

    fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: NodeId,
        dec_in: &[usize],
        mode: Binding,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let mut y = self.embed(g, store, dec_in, true, mode)?;
        let mut cross = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let n = g.layer_norm(y);
            let (a, _) = self.attention(g, store, &format!("dec{l}.self"), n, n, true, mode)?;
            y = g.add(y, a)?;
            let n = g.layer_norm(y);
            let (c, w) = self.attention(g, store, &format!("dec{l}.cross"), n, enc, false, mode)?;
            cross.push(w);
            y = g.add(y, c)?;
            let n = g.layer_norm(y);
            let f = self.feed_forward(g, store, &format!("dec{l}.ff"), n, mode)?;
            y = g.add(y, f)?;
        }
        Ok((g.layer_norm(y), cross))
    }

    fn logits(&self, g: &mut Graph, store: &ParamStore, dec: NodeId, mode: Binding) -> Result<NodeId> {
        let w = self.bind(g, store, "out_w", mode)?;
        let b = self.bind(g, store, "out_b", mode)?;
        let l = g.matmul_t(dec, w)?;
        g.add_row(l, b)
    }

    /// Teacher-forced pass; `store` must hold this model's parameter names.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: &[usize],
        tgt: &[usize],
        mode: Binding,
    ) -> Result<Forward> {
        let enc = self.encode(g, store, src, mode)?;
        let mut dec_in = Vec::with_capacity(tgt.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(tgt);
        let (decoder, cross_attention) = self.decode(g, store, enc, &dec_in, mode)?;
        Ok(Forward {
            encoder: enc,
            decoder,
            cross_attention,
        })
    }

    pub fn ids(&self, pair: &SentencePair) -> Result<(Vec<usize>, Vec<usize>)> {
        pair.validate()?;
        Ok((self.src_vocab.encode(&pair.source), self.tgt_vocab.encode(&pair.target)))
    }

    /// Summed cross entropy of `[t_1 .. t_M, EOS]` and the token count.
    pub fn pair_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pair: &SentencePair,
        mode: Binding,
    ) -> Result<(NodeId, usize)> {
        let (src, tgt) = self.ids(pair)?;
        let f = self.forward(g, store, &src, &tgt, mode)?;
        let logits = self.logits(g, store, f.decoder, mode)?;
        let mut gold = tgt;
        gold.push(EOS);
        let n = gold.len();
        Ok((g.cross_entropy(logits, &gold)?, n))
    }

    /// Mean per-token cross entropy over `corpus` without updating anything.
    pub fn evaluate_loss(&self, corpus: &ParallelCorpus) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0);
        for pair in corpus {
            let mut g = Graph::new();
            let (loss, n) = self.pair_loss(&mut g, &self.params, pair, Binding::Frozen)?;
            total += g.scalar(loss);
            count += n;
        }
        Ok(total / count.max(1) as f64)
    }

    /// Runs `steps` Adam updates on mini-batches drawn from `corpus` in
    /// seeded epoch order.
    pub fn train(&mut self, corpus: &ParallelCorpus, steps: usize) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot train on an empty corpus"));
        }
        let adam = AdamConfig::with_lr(self.config.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0f_7ea1);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for _ in 0..steps {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(self.config.batch_size);
            let mut tokens = 0;
            for _ in 0..self.config.batch_size.min(corpus.len()) {
                if cursor == order.len() {
                    order = (0..corpus.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let pair = &corpus.pairs[order[cursor]];
                cursor += 1;
                let (loss, n) = self.pair_loss(&mut g, &self.params, pair, Binding::Train)?;
                losses.push(loss);
                tokens += n;
            }
            let total = sum_nodes(&mut g, &losses)?;
            let mean = g.scale(total, 1.0 / tokens as f64);
            self.loss_history.push(g.scalar(mean));
            let grads = g.backward(mean).params();
            self.params.adam_step(&grads, &adam)?;
        }
        Ok(())
    }

    /// Teacher-forced states and cross-attention for one pair.
    pub fn encode_pair(&self, pair: &SentencePair) -> Result<(HiddenStates, AttentionStack)> {
        let (src, tgt) = self.ids(pair)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &self.params, &src, &tgt, Binding::Frozen)?;
        let m = tgt.len();
        let decoder = g.value(f.decoder).slice_rows(0, m);
        let layers = f
            .cross_attention
            .iter()
            .map(|heads| heads.iter().map(|&h| g.value(h).slice_rows(0, m)).collect())
            .collect();
        Ok((
            HiddenStates {
                encoder: g.value(f.encoder).clone(),
                decoder,
            },
            AttentionStack { layers },
        ))
    }

    /// Greedy decoding; stops at the end token or after `max_len` tokens.
    pub fn translate(&self, source: &[String], max_len: usize) -> Result<Vec<String>> {
        if source.is_empty() {
            return Ok(Vec::new());
        }
        let src = self.src_vocab.encode(source);
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &self.params, &src, Binding::Frozen)?;
        let mut out: Vec<usize> = Vec::new();
        while out.len() < max_len {
            let mut dec_in = vec![BOS];
            dec_in.extend_from_slice(&out);
            let (dec, _) = self.decode(&mut g, &self.params, enc, &dec_in, Binding::Frozen)?;
            let last = g.slice_rows(dec, dec_in.len() - 1, dec_in.len())?;
            let logits = self.logits(&mut g, &self.params, last, Binding::Frozen)?;
            let row = g.value(logits).row(0);
            // Reserved ids other than EOS are never emitted.
            let mut best = EOS;
            for (id, &v) in row.iter().enumerate().skip(EOS) {
                if v > row[best] {
                    best = id;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
        }
        Ok(out
            .into_iter()
            .map(|id| self.tgt_vocab.token(id).unwrap_or("<unk>").to_owned())
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let header = serde_json::json!({
            "kind": "seq2seq",
            "config": self.config,
            "src_vocab": self.src_vocab.tokens(),
            "tgt_vocab": if self.config.tie_weights { Vec::new() } else { self.tgt_vocab.tokens() },
            "loss_history": self.loss_history,
        });
        Container::new(header, self.params.values())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.get("kind").and_then(|k| k.as_str()) != Some("seq2seq") {
            return Err(Error::Format("container does not hold a seq2seq model".into()));
        }
        let field = |k: &str| c.header.get(k).cloned().ok_or_else(|| Error::Format(format!("header lacks `{k}`")));
        let config: Seq2SeqConfig = serde_json::from_value(field("config")?)?;
        config.validate()?;
        let src: Vec<String> = serde_json::from_value(field("src_vocab")?)?;
        let src_vocab = Vocabulary::from_tokens(&src)?;
        let tgt_vocab = if config.tie_weights {
            src_vocab.clone()
        } else {
            Vocabulary::from_tokens(&serde_json::from_value::<Vec<String>>(field("tgt_vocab")?)?)?
        };
        let loss_history: Vec<f64> = serde_json::from_value(field("loss_history")?)?;
        Ok(Seq2SeqModel {
            config,
            src_vocab,
            tgt_vocab,
            params: ParamStore::from_values(c.params.clone())?,
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

pub(crate) fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = nodes.split_first().ok_or_else(|| Error::invalid("empty batch"))?;
    rest.iter().try_fold(first, |acc, &n| g.add(acc, n))
}

/// Builds vocabularies, initialises and trains for `config.steps` steps.
pub fn pretrain_mt(corpus: &ParallelCorpus, config: &Seq2SeqConfig) -> Result<Seq2SeqModel> {
    let mut model = Seq2SeqModel::init(corpus, config)?;
    model.train(corpus, config.steps)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn corpus(lines: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::new(
            lines
                .iter()
                .enumerate()
                .map(|(k, (s, t))| SentencePair::from_text(k.to_string(), s, t).unwrap())
                .collect(),
        )
    }

    fn small() -> Seq2SeqConfig {
        Seq2SeqConfig {
            steps: 0,
            ..Seq2SeqConfig::default()
        }
    }

    #[test]
    fn shapes_and_attention_rows() {
        let c = corpus(&[("a b c", "x y")]);
        let m = Seq2SeqModel::init(&c, &small()).unwrap();
        let (h, att) = m.encode_pair(&c.pairs[0]).unwrap();
        assert_eq!(h.encoder.shape(), (3, 32));
        assert_eq!(h.decoder.shape(), (2, 32));
        assert_eq!(att.layers.len(), 2);
        for head in att.layers.iter().flatten() {
            assert_eq!(head.shape(), (2, 3));
            for j in 0..2 {
                assert!((head.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(head.row(j).iter().all(|&w| w >= 0.0));
            }
        }
        let (h2, att2) = m.encode_pair(&c.pairs[0]).unwrap();
        assert_eq!((h.clone(), att), (h2, att2));

        // Row j is computed before target token j is read.
        let swapped = SentencePair::from_text("1", "a b c", "x z").unwrap();
        let (h3, _) = m.encode_pair(&swapped).unwrap();
        assert_eq!(h3.decoder.row(1), h.decoder.row(1));
        let changed = SentencePair::from_text("1", "a b c", "y y").unwrap();
        let (h4, _) = m.encode_pair(&changed).unwrap();
        assert_eq!(h4.decoder.row(0), h.decoder.row(0));
        assert_ne!(h4.decoder.row(1), h.decoder.row(1));
    }

    #[test]
    fn untrained_loss_is_uniform() {
        let c = corpus(&[("a b c d", "x y z"), ("e f", "w v")]);
        let m = Seq2SeqModel::init(&c, &small()).unwrap();
        let loss = m.evaluate_loss(&c).unwrap();
        let uniform = (m.tgt_vocab.len() as f64).ln();
        assert!((loss - uniform).abs() < 0.1, "{loss} vs {uniform}");
    }

    #[test]
    fn vocabulary_overflow() {
        let c = corpus(&[("a b c d", "x y z")]);
        let cfg = Seq2SeqConfig {
            src_vocab_size: 8,
            ..small()
        };
        assert!(matches!(Seq2SeqModel::init(&c, &cfg), Err(Error::VocabOverflow { .. })));
        let untied = Seq2SeqConfig {
            tie_weights: false,
            ..cfg
        };
        assert!(Seq2SeqModel::init(&c, &untied).is_ok());
        assert!(Seq2SeqModel::init(&c, &Seq2SeqConfig { heads: 3, ..small() }).is_err());
    }

    #[test]
    fn gradient_check_tiny_model() {
        let c = corpus(&[("a b", "x y z")]);
        let cfg = Seq2SeqConfig {
            layers: 1,
            heads: 1,
            model_dim: 8,
            ff_dim: 8,
            tie_weights: false,
            ..small()
        };
        let m = Seq2SeqModel::init(&c, &cfg).unwrap();
        let mut store = m.params.clone();
        let err = grad_check(&mut store, |g, s| Ok(m.pair_loss(g, s, &c.pairs[0], Binding::Train)?.0)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_threshold_extremes() {
        let stack = AttentionStack {
            layers: vec![vec![
                Matrix::from_rows(&[[0.7, 0.3], [0.2, 0.8]]),
                Matrix::from_rows(&[[0.5, 0.5], [0.0, 1.0]]),
            ]],
        };
        assert_eq!(attention_align(&stack, 0.0).len(), 4);
        assert!(attention_align(&stack, 1.0 + 1e-9).is_empty());
        assert_eq!(attention_align(&stack, 0.6).iter().collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        let lo = attention_align(&stack, 0.3);
        assert!(attention_align(&stack, 0.5).is_subset(&lo));
    }

    #[test]
    fn deterministic_training_and_round_trip() {
        let c = corpus(&[("a b c", "a b c"), ("b c", "b c"), ("c a", "c a")]);
        let cfg = Seq2SeqConfig {
            steps: 3,
            batch_size: 2,
            ..Seq2SeqConfig::default()
        };
        let a = pretrain_mt(&c, &cfg).unwrap();
        let b = pretrain_mt(&c, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.params.values(), b.params.values());

        let bytes = a.to_container().to_bytes().unwrap();
        let back = Seq2SeqModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
        assert_eq!(back.encode_pair(&c.pairs[0]).unwrap(), a.encode_pair(&c.pairs[0]).unwrap());
    }

    #[test]
    fn copy_task_learns() {
        let spec = crate::synth::SynthSpec::plain();
        let c = crate::synth::generate(&spec, 2000).unwrap();
        let copy = ParallelCorpus::new(
            c.pairs
                .iter()
                .map(|p| SentencePair::new(p.id.clone(), p.source.clone(), p.source.clone()).unwrap())
                .collect(),
        );
        let m = pretrain_mt(&copy, &Seq2SeqConfig { steps: 300, ..Seq2SeqConfig::default() }).unwrap();
        let held = ParallelCorpus::new(copy.pairs[..200].to_vec());
        let loss = m.evaluate_loss(&held).unwrap();
        assert!(loss < 0.1, "{loss}");
        let src: Vec<String> = copy.pairs[0].source.clone();
        assert_eq!(m.translate(&src, 30).unwrap(), src);
    }

    #[test]
    fn empty_source_translates_to_nothing() {
        let c = corpus(&[("a", "x")]);
        let m = Seq2SeqModel::init(&c, &small()).unwrap();
        assert!(m.translate(&[], 10).unwrap().is_empty());
        let src = vec!["a".to_owned()];
        assert_eq!(m.translate(&src, 5).unwrap(), m.translate(&src, 5).unwrap());
    }
}
