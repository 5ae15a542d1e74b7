//! Desk-scale experiments on synthetic corpora: method comparison, conv
//! ablation, labeled/pretraining data grid and tag projection quality.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{AlignmentSet, LabeledPair, ParallelCorpus, TaggedSentence};
use crate::disc::{AlignerConfig, ConvMode, DiscAligner};
use crate::error::{Error, Result};
use crate::eval::{alpha_grid, score, sweep_threshold, tag_f1, Prf, ScoreMode, ScoreReport, SweepReport};
use crate::numerics::Matrix;
use crate::projection::{project_corpus, Aligner, ProjectionPolicy, StatAligner};
use crate::seq2seq::{attention_align, pretrain_mt, Seq2SeqConfig, Seq2SeqModel};
use crate::stat::{EmConfig, Heuristic, StatPair};
use crate::synth::{generate, SynthCorpus, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    /// Unlabeled pairs for MT pretraining (also the largest pretraining
    /// size of the data grid).
    pub pretrain_pairs: usize,
    /// Labeled pairs available to the grid; the comparison uses the first
    /// `labeled_pairs` of them.
    pub labeled_pool: usize,
    pub labeled_pairs: usize,
    /// Labeled pairs used only for threshold selection.
    pub tune_pairs: usize,
    pub dev_pairs: usize,
    pub mt: Seq2SeqConfig,
    pub aligner: AlignerConfig,
    pub em: EmConfig,
    pub heuristic: Heuristic,
    pub mode: ScoreMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthSpec::default(),
            pretrain_pairs: 5000,
            labeled_pool: 1000,
            labeled_pairs: 500,
            tune_pairs: 100,
            dev_pairs: 300,
            mt: Seq2SeqConfig {
                steps: 3000,
                ..Seq2SeqConfig::default()
            },
            aligner: AlignerConfig::finetuned(),
            em: EmConfig::default(),
            heuristic: Heuristic::GrowDiagFinalAnd,
            mode: ScoreMode::Macro,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_pairs > self.labeled_pool {
            return Err(Error::invalid(format!(
                "labeled_pairs {} exceeds labeled_pool {}",
                self.labeled_pairs, self.labeled_pool
            )));
        }
        if [self.pretrain_pairs, self.labeled_pairs, self.tune_pairs, self.dev_pairs].contains(&0) {
            return Err(Error::invalid("every split needs at least one pair"));
        }
        self.synth.validate()?;
        self.mt.validate()?;
        self.aligner.validate()
    }
}

pub fn default_alpha_grid() -> Vec<f64> {
    alpha_grid(0.05, 0.95, 18)
}

/// Disjoint splits of one generated corpus, in generation order:
/// pretraining, labeled pool, tune, dev.
#[derive(Clone, Debug)]
pub struct Splits {
    pub pretrain: SynthCorpus,
    pub labeled_pool: SynthCorpus,
    pub tune: SynthCorpus,
    pub dev: SynthCorpus,
}

impl Splits {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let p = cfg.pretrain_pairs;
        let l = p + cfg.labeled_pool;
        let t = l + cfg.tune_pairs;
        let d = t + cfg.dev_pairs;
        let all = generate(&cfg.synth, d)?;
        Ok(Splits {
            pretrain: all.slice(0, p),
            labeled_pool: all.slice(p, l),
            tune: all.slice(l, t),
            dev: all.slice(t, d),
        })
    }

    /// Every bitext pair across all splits, for unsupervised EM.
    pub fn all_bitext(&self) -> ParallelCorpus {
        self.pretrain
            .pairs
            .concat(&self.labeled_pool.pairs)
            .concat(&self.tune.pairs)
            .concat(&self.dev.pairs)
    }
}

/// Head-averaged final-layer cross-attention as an N x M matrix.
pub fn attention_probs(mt: &Seq2SeqModel, pair: &crate::corpus::SentencePair) -> Result<Matrix> {
    let (_, stack) = mt.encode_pair(pair)?;
    let avg = stack
        .final_average()
        .ok_or_else(|| Error::invalid("model has no cross-attention layers"))?;
    Ok(avg.transpose())
}

/// Thresholded attention baseline.
pub struct AttentionAligner<'a> {
    pub mt: &'a Seq2SeqModel,
    pub alpha: f64,
}

impl AttentionAligner<'_> {
    pub fn sweep(&self, data: &[LabeledPair], grid: &[f64], mode: ScoreMode) -> Result<SweepReport> {
        let probs = data
            .iter()
            .map(|lp| attention_probs(self.mt, &lp.pair))
            .collect::<Result<Vec<_>>>()?;
        let gold: Vec<AlignmentSet> = data.iter().map(|lp| lp.gold.clone()).collect();
        sweep_threshold(&probs, &gold, grid, mode)
    }

    pub fn tune_alpha(&mut self, data: &[LabeledPair], grid: &[f64], mode: ScoreMode) -> Result<SweepReport> {
        let report = self.sweep(data, grid, mode)?;
        self.alpha = report.best_alpha;
        Ok(report)
    }
}

impl Aligner for AttentionAligner<'_> {
    fn name(&self) -> String {
        "attention".into()
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.alpha)
    }

    fn align_corpus(&self, corpus: &ParallelCorpus) -> Result<Vec<AlignmentSet>> {
        corpus
            .iter()
            .map(|p| Ok(attention_align(&self.mt.encode_pair(p)?.1, self.alpha)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: String,
    pub alpha: Option<f64>,
    /// Dev-set score in the configured mode.
    pub report: ScoreReport,
    /// Micro F1 on the same predictions.
    pub micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<MethodResult>,
}

impl Comparison {
    pub fn f1(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.report.f1)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\talpha\tP\tR\tF1\tmicro_F1\n");
        for r in &self.rows {
            let alpha = r.alpha.map_or_else(|| "-".to_owned(), |a| format!("{a:.4}"));
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                r.method, alpha, r.report.precision, r.report.recall, r.report.f1, r.micro_f1
            ));
        }
        out
    }
}

/// Dev F1 as a pretraining-size x labeled-size table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataGrid {
    pub pretrain_sizes: Vec<usize>,
    pub labeled_sizes: Vec<usize>,
    /// `f1[p][l]` for `pretrain_sizes[p]`, `labeled_sizes[l]`.
    pub f1: Vec<Vec<f64>>,
}

impl DataGrid {
    /// F1 never drops as labeled data grows, at every pretraining size.
    pub fn labels_monotone(&self) -> bool {
        self.f1.iter().all(|row| row.windows(2).all(|w| w[1] >= w[0]))
    }

    /// Mean F1 change per step along the labeled axis.
    pub fn mean_label_gain(&self) -> f64 {
        mean(self.f1.iter().flat_map(|row| row.windows(2).map(|w| w[1] - w[0])))
    }

    /// Mean F1 change per step along the pretraining axis.
    pub fn mean_pretrain_gain(&self) -> f64 {
        mean(self.f1.windows(2).flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| b - a)))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("pretrain\\labeled");
        for l in &self.labeled_sizes {
            out.push_str(&format!("\t{l}"));
        }
        out.push('\n');
        for (p, row) in self.pretrain_sizes.iter().zip(&self.f1) {
            out.push_str(&p.to_string());
            for v in row {
                out.push_str(&format!("\t{v:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionResult {
    pub aligner: String,
    pub tags: Prf,
    /// Every output sentence passes the BIO check.
    pub bio_valid: bool,
    /// Every unaligned target token carries the default label.
    pub unaligned_default: bool,
}

/// Splits plus the configuration that produced them.
pub struct Lab {
    pub config: ExperimentConfig,
    pub splits: Splits,
    pub grid: Vec<f64>,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let splits = Splits::generate(&config)?;
        Ok(Lab {
            config,
            splits,
            grid: default_alpha_grid(),
        })
    }

    pub fn labeled(&self, n: usize) -> Result<Vec<LabeledPair>> {
        if n == 0 || n > self.splits.labeled_pool.len() {
            return Err(Error::invalid(format!(
                "labeled size {n} outside 1..={}",
                self.splits.labeled_pool.len()
            )));
        }
        Ok(self.splits.labeled_pool.slice(0, n).labeled())
    }

    /// Pretrains the MT model on the first `pairs` pretraining pairs.
    pub fn pretrain(&self, pairs: usize) -> Result<Seq2SeqModel> {
        if pairs == 0 || pairs > self.splits.pretrain.len() {
            return Err(Error::invalid(format!(
                "pretraining size {pairs} outside 1..={}",
                self.splits.pretrain.len()
            )));
        }
        pretrain_mt(&self.splits.pretrain.slice(0, pairs).pairs, &self.config.mt)
    }

    /// Both EM directions over every bitext pair (EM needs no labels).
    pub fn train_stat(&self) -> Result<StatPair> {
        StatPair::train(&self.splits.all_bitext(), &self.config.em)
    }

    pub fn attention<'a>(&self, mt: &'a Seq2SeqModel) -> Result<(AttentionAligner<'a>, SweepReport)> {
        let mut aligner = AttentionAligner { mt, alpha: 0.5 };
        let report = aligner.tune_alpha(&self.splits.tune.labeled(), &self.grid, self.config.mode)?;
        Ok((aligner, report))
    }

    /// Trains the head on the first `labeled` pool pairs and tunes α on the
    /// tune split.
    pub fn train_disc(&self, mt: &Seq2SeqModel, labeled: usize, conv: ConvMode) -> Result<(DiscAligner, SweepReport)> {
        let cfg = AlignerConfig {
            conv,
            ..self.config.aligner.clone()
        };
        let mut aligner = DiscAligner::new(mt.clone(), &cfg, None)?;
        aligner.train(&self.labeled(labeled)?)?;
        let report = aligner.tune_alpha(&self.splits.tune.labeled(), &self.grid, self.config.mode)?;
        Ok((aligner, report))
    }

    pub fn evaluate(&self, aligner: &dyn Aligner) -> Result<MethodResult> {
        let pred = aligner.align_corpus(&self.splits.dev.pairs)?;
        let report = score(&pred, &self.splits.dev.gold, self.config.mode)?;
        let micro = score(&pred, &self.splits.dev.gold, ScoreMode::Micro)?;
        Ok(MethodResult {
            method: aligner.name(),
            alpha: aligner.alpha(),
            report,
            micro_f1: micro.f1,
        })
    }

    /// Dev scores for the attention baseline, the symmetrized statistical
    /// baseline and the trained head.
    pub fn compare(&self, mt: &Seq2SeqModel, stat: &StatPair, disc: &DiscAligner) -> Result<Comparison> {
        let (attention, _) = self.attention(mt)?;
        let stat_aligner = StatAligner {
            models: stat,
            heuristic: self.config.heuristic,
        };
        Ok(Comparison {
            rows: vec![
                self.evaluate(&attention)?,
                self.evaluate(&stat_aligner)?,
                self.evaluate(disc)?,
            ],
        })
    }

    /// Dev F1 for every (pretraining size, labeled size) cell. `known`
    /// supplies cells that were already trained.
    pub fn data_grid(
        &self,
        pretrain_sizes: &[usize],
        labeled_sizes: &[usize],
        known: &[(usize, usize, f64)],
        mut progress: impl FnMut(usize, usize, f64),
    ) -> Result<DataGrid> {
        let mut f1 = Vec::with_capacity(pretrain_sizes.len());
        for &p in pretrain_sizes {
            let mut mt = None;
            let mut row = Vec::with_capacity(labeled_sizes.len());
            for &l in labeled_sizes {
                let value = match known.iter().find(|k| k.0 == p && k.1 == l) {
                    Some(k) => k.2,
                    None => {
                        if mt.is_none() {
                            mt = Some(self.pretrain(p)?);
                        }
                        let model = mt.as_ref().expect("pretrained above");
                        let (disc, _) = self.train_disc(model, l, self.config.aligner.conv)?;
                        self.evaluate(&disc)?.report.f1
                    }
                };
                progress(p, l, value);
                row.push(value);
            }
            f1.push(row);
        }
        Ok(DataGrid {
            pretrain_sizes: pretrain_sizes.to_vec(),
            labeled_sizes: labeled_sizes.to_vec(),
            f1,
        })
    }

    /// Projects dev source tags onto dev targets with each aligner and
    /// scores the result against the generated target tags.
    pub fn projection(&self, aligner: &dyn Aligner, policy: &ProjectionPolicy) -> Result<ProjectionResult> {
        let dev = &self.splits.dev;
        let projected = project_corpus(&dev.source_tags, &dev.pairs.targets(), aligner, policy)?;
        let tags = tag_f1(&projected.sentences, &dev.target_tags)?;
        let bio_valid = projected.sentences.iter().all(TaggedSentence::is_bio_valid);
        let unaligned_default = projected.sentences.iter().zip(&projected.alignments).all(|(s, a)| {
            (0..s.len()).all(|j| a.iter().any(|(_, jj)| jj == j) || s.tags[j] == policy.default_label)
        });
        Ok(ProjectionResult {
            aligner: aligner.name(),
            tags,
            bio_valid,
            unaligned_default,
        })
    }
}

/// Runs `f`, returning its value and wall time in seconds.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let value = f()?;
    Ok((value, start.elapsed().as_secs_f64()))
}
