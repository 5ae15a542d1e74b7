//! Synthetic parallel corpora with known alignments and tags.
//!
//! Source words `s{k}` translate one-to-one to `t{π(k)}`. Ambiguous pairs
//! `a{k} b{k}` translate to `u{k} v{k}` or `v{k} u{k}` depending on the parity
//! of the preceding source word, so the correct link for `u{k}` cannot be
//! read off the lexicon alone. Target windows of width `w` are shuffled and
//! unaligned function words `f{k}` are inserted.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_alignments, write_bitext, write_tagged, AlignmentSet, LabeledPair, ParallelCorpus, SentencePair, TaggedSentence,
    OUTSIDE,
};
use crate::error::{Error, Result};
use crate::projection::{project_tags, ProjectionPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TagSpec {
    pub types: Vec<String>,
    /// Chance that a span starts at any free source position.
    pub span_rate: f64,
    pub max_span: usize,
}

impl Default for TagSpec {
    fn default() -> Self {
        TagSpec {
            types: vec!["PER".into(), "LOC".into(), "ORG".into()],
            span_rate: 0.15,
            max_span: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Ordinary (unambiguous) source word types.
    pub vocab_size: usize,
    pub function_words: usize,
    pub ambiguous_pairs: usize,
    /// Sentence length in units; an ambiguous unit is three tokens.
    pub min_units: usize,
    pub max_units: usize,
    pub window: usize,
    pub insertion_rate: f64,
    /// Expected fraction of source tokens that belong to ambiguous pairs.
    pub ambiguity_rate: f64,
    pub tags: TagSpec,
    pub lexicon_seed: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 16,
            function_words: 8,
            ambiguous_pairs: 6,
            min_units: 4,
            max_units: 8,
            window: 2,
            insertion_rate: 0.2,
            ambiguity_rate: 0.3,
            tags: TagSpec::default(),
            lexicon_seed: 7,
            seed: 1,
        }
    }
}

impl SynthSpec {
    /// No reordering, insertions or ambiguity.
    pub fn plain() -> Self {
        SynthSpec {
            window: 1,
            insertion_rate: 0.0,
            ambiguity_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if !(0.0..1.0).contains(&self.insertion_rate) {
            return bad(format!("insertion rate {} outside [0, 1)", self.insertion_rate));
        }
        if !(0.0..=2.0 / 3.0).contains(&self.ambiguity_rate) {
            return bad(format!("ambiguity rate {} outside [0, 2/3]", self.ambiguity_rate));
        }
        if !(0.0..=1.0).contains(&self.tags.span_rate) {
            return bad(format!("span rate {} outside [0, 1]", self.tags.span_rate));
        }
        if self.window == 0 || self.min_units == 0 || self.min_units > self.max_units {
            return bad("need window >= 1 and 1 <= min_units <= max_units".into());
        }
        if self.vocab_size < 2 * self.max_units {
            return bad(format!("vocab_size must be at least {}", 2 * self.max_units));
        }
        if self.ambiguity_rate > 0.0 && self.ambiguous_pairs == 0 {
            return bad("ambiguity needs at least one ambiguous pair".into());
        }
        if self.insertion_rate > 0.0 && self.function_words == 0 {
            return bad("insertions need at least one function word".into());
        }
        if self.tags.types.is_empty() || self.tags.max_span == 0 {
            return bad("tag spec needs types and max_span >= 1".into());
        }
        Ok(())
    }

    /// Per-unit probability of an ambiguous triple giving the requested token
    /// fraction: 2q / (1 + 2q) = r.
    fn pair_unit_prob(&self) -> f64 {
        let r = self.ambiguity_rate;
        if r == 0.0 {
            0.0
        } else {
            r / (2.0 * (1.0 - r))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub pairs: ParallelCorpus,
    pub gold: Vec<AlignmentSet>,
    pub source_tags: Vec<TaggedSentence>,
    pub target_tags: Vec<TaggedSentence>,
}

impl SynthCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labeled(&self) -> Vec<LabeledPair> {
        self.pairs
            .iter()
            .zip(&self.gold)
            .map(|(p, g)| LabeledPair {
                pair: p.clone(),
                gold: g.clone(),
            })
            .collect()
    }

    /// Sentences `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> SynthCorpus {
        SynthCorpus {
            spec: self.spec.clone(),
            pairs: ParallelCorpus::new(self.pairs.pairs[start..end].to_vec()),
            gold: self.gold[start..end].to_vec(),
            source_tags: self.source_tags[start..end].to_vec(),
            target_tags: self.target_tags[start..end].to_vec(),
        }
    }

    /// Writes `bitext.txt`, `gold.aln`, `source.tags`, `target.tags` and
    /// `spec.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_bitext(&self.pairs, dir.join("bitext.txt"))?;
        write_alignments(&self.gold, dir.join("gold.aln"))?;
        write_tagged(&self.source_tags, &[], dir.join("source.tags"))?;
        write_tagged(&self.target_tags, &[], dir.join("target.tags"))?;
        let spec = serde_json::to_string_pretty(&self.spec)?;
        let path = dir.join("spec.json");
        std::fs::write(&path, spec + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn generate(spec: &SynthSpec, sentences: usize) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut lex_rng = ChaCha8Rng::seed_from_u64(spec.lexicon_seed);
    let mut lexicon: Vec<usize> = (0..spec.vocab_size).collect();
    lexicon.shuffle(&mut lex_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let q = spec.pair_unit_prob();
    let ordinary: Vec<usize> = (0..spec.vocab_size).collect();
    let pair_ids: Vec<usize> = (0..spec.ambiguous_pairs).collect();
    let policy = ProjectionPolicy::default();

    let mut pairs = Vec::with_capacity(sentences);
    let mut gold = Vec::with_capacity(sentences);
    let mut source_tags = Vec::with_capacity(sentences);
    let mut target_tags = Vec::with_capacity(sentences);

    for n in 0..sentences {
        let units = rng.gen_range(spec.min_units..=spec.max_units);
        let mut words = ordinary.choose_multiple(&mut rng, 2 * units).copied();
        let mut ambig = pair_ids.choose_multiple(&mut rng, units).copied();

        let mut source = Vec::new();
        let mut core = Vec::new();
        for _ in 0..units {
            let w = words.next().expect("vocab_size >= 2 * max_units");
            source.push(format!("s{w}"));
            core.push(format!("t{}", lexicon[w]));
            if q > 0.0 && rng.gen_bool(q) {
                if let Some(k) = ambig.next() {
                    source.push(format!("a{k}"));
                    source.push(format!("b{k}"));
                    if w % 2 == 0 {
                        core.push(format!("u{k}"));
                        core.push(format!("v{k}"));
                    } else {
                        core.push(format!("v{k}"));
                        core.push(format!("u{k}"));
                    }
                }
            }
        }

        // Shuffle each window of core positions; `order[p]` is the core
        // index placed at reordered position p.
        let mut order: Vec<usize> = (0..core.len()).collect();
        for chunk in order.chunks_mut(spec.window) {
            chunk.shuffle(&mut rng);
        }

        let mut target = Vec::new();
        let mut links = AlignmentSet::new();
        for &c in &order {
            while spec.insertion_rate > 0.0 && rng.gen_bool(spec.insertion_rate) {
                target.push(format!("f{}", rng.gen_range(0..spec.function_words)));
            }
            links.insert(c, target.len());
            target.push(core[c].clone());
        }

        let src_tagged = sample_tags(&source, &spec.tags, &mut rng);
        let tgt_tagged = project_tags(&src_tagged, &links, &target, &policy)?;
        pairs.push(SentencePair::new((n + 1).to_string(), source, target)?);
        gold.push(links);
        source_tags.push(src_tagged);
        target_tags.push(tgt_tagged);
    }

    Ok(SynthCorpus {
        spec: spec.clone(),
        pairs: ParallelCorpus::new(pairs),
        gold,
        source_tags,
        target_tags,
    })
}

fn sample_tags(tokens: &[String], spec: &TagSpec, rng: &mut impl Rng) -> TaggedSentence {
    let mut tags = vec![OUTSIDE.to_owned(); tokens.len()];
    let mut k = 0;
    while k < tokens.len() {
        if rng.gen_bool(spec.span_rate) {
            let len = rng.gen_range(1..=spec.max_span).min(tokens.len() - k);
            let ty = spec.types.choose(rng).expect("non-empty types");
            tags[k] = format!("B-{ty}");
            for t in tags.iter_mut().skip(k + 1).take(len - 1) {
                *t = format!("I-{ty}");
            }
            // Leave a gap so adjacent spans never merge.
            k += len + 1;
        } else {
            k += 1;
        }
    }
    TaggedSentence {
        tokens: tokens.to_vec(),
        tags,
    }
}
