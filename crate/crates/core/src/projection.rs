//! Tag transfer from source to target tokens across alignment links.

use serde::{Deserialize, Serialize};

use crate::corpus::{tag_type, AlignmentSet, ParallelCorpus, SentencePair, TaggedSentence, OUTSIDE};
use crate::error::{Error, Result};
use crate::stat::{Heuristic, StatPair};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictRule {
    /// Tag of the lowest-indexed aligned source token.
    #[default]
    First,
    /// Most frequent tag; ties go to the tag seen first by source index.
    Majority,
}

impl std::str::FromStr for ConflictRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(ConflictRule::First),
            "majority" => Ok(ConflictRule::Majority),
            other => Err(Error::invalid(format!("unknown conflict rule `{other}`"))),
        }
    }
}

impl std::fmt::Display for ConflictRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConflictRule::First => "first",
            ConflictRule::Majority => "majority",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionPolicy {
    pub default_label: String,
    pub conflict: ConflictRule,
    pub bio_repair: bool,
}

impl Default for ProjectionPolicy {
    fn default() -> Self {
        ProjectionPolicy {
            default_label: OUTSIDE.to_owned(),
            conflict: ConflictRule::First,
            bio_repair: true,
        }
    }
}

impl ProjectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if tag_type(&self.default_label).is_some() {
            return Err(Error::invalid(format!(
                "default label `{}` must be an outside-class tag",
                self.default_label
            )));
        }
        Ok(())
    }
}

/// Rewrites each maximal run of same-type tags as `B-X I-X ...`.
pub fn normalize_bio_runs(tags: &mut [String]) {
    let mut prev: Option<String> = None;
    for tag in tags.iter_mut() {
        let ty = tag_type(tag).map(str::to_owned);
        if let Some(t) = &ty {
            *tag = if prev.as_ref() == Some(t) { format!("I-{t}") } else { format!("B-{t}") };
        }
        prev = ty;
    }
}

pub fn project_tags(
    src: &TaggedSentence,
    align: &AlignmentSet,
    target: &[String],
    policy: &ProjectionPolicy,
) -> Result<TaggedSentence> {
    align.check_bounds(src.len(), target.len(), 0)?;
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); target.len()];
    for (i, j) in align.iter() {
        sources[j].push(i);
    }
    let mut tags: Vec<String> = sources
        .iter()
        .map(|is| {
            if is.is_empty() {
                return policy.default_label.clone();
            }
            match policy.conflict {
                ConflictRule::First => src.tags[is[0]].clone(),
                ConflictRule::Majority => {
                    // `is` is sorted, so the first maximum seen is the earliest.
                    let mut best: Option<(&str, usize)> = None;
                    for &i in is {
                        let tag = src.tags[i].as_str();
                        let count = is.iter().filter(|&&k| src.tags[k] == tag).count();
                        if best.map_or(true, |(_, c)| count > c) {
                            best = Some((tag, count));
                        }
                    }
                    best.expect("non-empty").0.to_owned()
                }
            }
        })
        .collect();
    if policy.bio_repair {
        normalize_bio_runs(&mut tags);
    }
    TaggedSentence::new(target.to_vec(), tags)
}

/// Anything that can align a whole corpus.
pub trait Aligner {
    fn name(&self) -> String;

    /// Decision threshold, for aligners that have one.
    fn alpha(&self) -> Option<f64> {
        None
    }

    fn align_corpus(&self, corpus: &ParallelCorpus) -> Result<Vec<AlignmentSet>>;
}

/// Alignments computed elsewhere, replayed in order.
pub struct Precomputed {
    pub name: String,
    pub sets: Vec<AlignmentSet>,
}

impl Aligner for Precomputed {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn align_corpus(&self, corpus: &ParallelCorpus) -> Result<Vec<AlignmentSet>> {
        if corpus.len() != self.sets.len() {
            return Err(Error::invalid(format!(
                "{} precomputed alignments for {} pairs",
                self.sets.len(),
                corpus.len()
            )));
        }
        Ok(self.sets.clone())
    }
}

/// Symmetrized statistical baseline.
pub struct StatAligner<'a> {
    pub models: &'a StatPair,
    pub heuristic: Heuristic,
}

impl Aligner for StatAligner<'_> {
    fn name(&self) -> String {
        format!("stat-{}-{}", self.models.forward.mode, self.heuristic)
    }

    fn align_corpus(&self, corpus: &ParallelCorpus) -> Result<Vec<AlignmentSet>> {
        self.models.align_corpus(corpus, self.heuristic)
    }
}

#[derive(Clone, Debug)]
pub struct ProjectedCorpus {
    pub sentences: Vec<TaggedSentence>,
    pub alignments: Vec<AlignmentSet>,
    /// Provenance lines, written as `# key=value` headers.
    pub comments: Vec<String>,
}

pub fn project_corpus(
    sources: &[TaggedSentence],
    targets: &[Vec<String>],
    aligner: &dyn Aligner,
    policy: &ProjectionPolicy,
) -> Result<ProjectedCorpus> {
    policy.validate()?;
    if sources.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} tagged source sentences vs {} targets",
            sources.len(),
            targets.len()
        )));
    }
    let pairs = sources
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(k, (s, t))| SentencePair::new((k + 1).to_string(), s.tokens.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let corpus = ParallelCorpus::new(pairs);
    let alignments = aligner.align_corpus(&corpus)?;
    let sentences = sources
        .iter()
        .zip(targets)
        .zip(&alignments)
        .map(|((s, t), a)| project_tags(s, a, t, policy))
        .collect::<Result<Vec<_>>>()?;
    let mut comments = vec![format!("aligner={}", aligner.name())];
    if let Some(alpha) = aligner.alpha() {
        comments.push(format!("alpha={alpha}"));
    }
    comments.push(format!(
        "policy=conflict:{},default:{},bio_repair:{}",
        policy.conflict, policy.default_label, policy.bio_repair
    ));
    Ok(ProjectedCorpus {
        sentences,
        alignments,
        comments,
    })
}
