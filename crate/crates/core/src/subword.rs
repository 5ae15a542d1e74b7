//! Byte-pair encoding and word <-> subword alignment conversion.
//!
//! The final symbol of every word carries the `</w>` marker, so merges never
//! cross word boundaries and stripping the marker from concatenated
//! subwords recovers the word.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use crate::corpus::{AlignmentSet, LabeledPair, SentencePair};
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

/// Ordered merge operations; earlier merges take precedence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (k, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), k).is_some() {
                return Err(Error::invalid(format!("duplicate merge `{} {}`", pair.0, pair.1)));
            }
        }
        Ok(MergeTable { merges, ranks })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // Allocation-free lookup would need a borrowed key type; tables are small.
        self.ranks.get(&(left.to_owned(), right.to_owned())).copied()
    }

    pub fn to_text(&self) -> String {
        self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_ascii_whitespace().collect();
            match parts.as_slice() {
                [] => continue,
                [l, r] => merges.push(((*l).to_owned(), (*r).to_owned())),
                _ => return Err(Error::parse(k + 1, "expected `left right`")),
            }
        }
        Self::new(merges)
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

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(k, c)| {
            if k == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut k = 0;
    while k < symbols.len() {
        if k + 1 < symbols.len() && symbols[k] == left && symbols[k + 1] == right {
            out.push(format!("{left}{right}"));
            k += 2;
        } else {
            out.push(std::mem::take(&mut symbols[k]));
            k += 1;
        }
    }
    *symbols = out;
}

/// Greedy most-frequent-pair merging; frequency ties go to the
/// lexicographically smallest pair.
pub fn learn_bpe<S: AsRef<[String]>>(corpus: &[S], merges: usize) -> MergeTable {
    let mut words: BTreeMap<&str, usize> = BTreeMap::new();
    for sent in corpus {
        for w in sent.as_ref() {
            *words.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(Vec<String>, usize)> = words
        .into_iter()
        .map(|(w, c)| (initial_symbols(w), c))
        .collect();

    let mut table = Vec::with_capacity(merges);
    for _ in 0..merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &entries {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((l, r), _)| (l.to_owned(), r.to_owned()));
        let Some((l, r)) = best else { break };
        for (syms, _) in &mut entries {
            merge_pair(syms, &l, &r);
        }
        table.push((l, r));
    }
    MergeTable::new(table).expect("learned merges are unique")
}

/// Subwords of one word under `table`.
pub fn segment_word(word: &str, table: &MergeTable) -> Vec<String> {
    let mut syms = initial_symbols(word);
    loop {
        let best = syms
            .windows(2)
            .filter_map(|w| table.rank(&w[0], &w[1]))
            .min();
        let Some(rank) = best else { break };
        let (l, r) = &table.merges[rank];
        merge_pair(&mut syms, l, r);
    }
    syms
}

/// Per-word contiguous ranges of subword indices for one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    ranges: Vec<Range<usize>>,
    word_of: Vec<usize>,
}

impl SegmentationMap {
    /// Builds a map from subword counts per word.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let mut ranges = Vec::with_capacity(counts.len());
        let mut word_of = Vec::new();
        let mut start = 0;
        for (w, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::invalid(format!("word {w} has no subwords")));
            }
            ranges.push(start..start + c);
            word_of.extend(std::iter::repeat(w).take(c));
            start += c;
        }
        Ok(SegmentationMap { ranges, word_of })
    }

    /// One subword per word.
    pub fn identity(words: usize) -> Self {
        Self::from_counts(&vec![1; words]).expect("non-zero counts")
    }

    pub fn num_words(&self) -> usize {
        self.ranges.len()
    }

    pub fn num_subwords(&self) -> usize {
        self.word_of.len()
    }

    pub fn range(&self, word: usize) -> Option<Range<usize>> {
        self.ranges.get(word).cloned()
    }

    pub fn word_of(&self, subword: usize) -> Option<usize> {
        self.word_of.get(subword).copied()
    }
}

pub fn apply_bpe(sentence: &[String], table: &MergeTable) -> (Vec<String>, SegmentationMap) {
    let mut subwords = Vec::new();
    let mut counts = Vec::with_capacity(sentence.len());
    for w in sentence {
        let segs = segment_word(w, table);
        counts.push(segs.len());
        subwords.extend(segs);
    }
    let map = SegmentationMap::from_counts(&counts).expect("every word yields a subword");
    (subwords, map)
}

/// Inverse of [`apply_bpe`]: concatenates each word's subwords and strips the marker.
pub fn join_subwords(subwords: &[String], map: &SegmentationMap) -> Vec<String> {
    map.ranges
        .iter()
        .map(|r| {
            let joined: String = subwords[r.clone()].concat();
            joined.strip_suffix(END_OF_WORD).unwrap_or(&joined).to_owned()
        })
        .collect()
}

/// A pair segmented into subwords together with both maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedPair {
    pub pair: SentencePair,
    pub src_map: SegmentationMap,
    pub tgt_map: SegmentationMap,
}

pub fn segment_pair(pair: &SentencePair, table: &MergeTable) -> SegmentedPair {
    let (source, src_map) = apply_bpe(&pair.source, table);
    let (target, tgt_map) = apply_bpe(&pair.target, table);
    SegmentedPair {
        pair: SentencePair {
            id: pair.id.clone(),
            source,
            target,
        },
        src_map,
        tgt_map,
    }
}

/// Segments a labeled pair and expands its gold alignment to subword level.
pub fn segment_labeled(lp: &LabeledPair, table: &MergeTable) -> Result<LabeledPair> {
    let seg = segment_pair(&lp.pair, table);
    let gold = expand_alignment(&lp.gold, &seg.src_map, &seg.tgt_map)?;
    Ok(LabeledPair { pair: seg.pair, gold })
}

/// Every subword of source word `i` is linked to every subword of target word `j`.
pub fn expand_alignment(
    word_align: &AlignmentSet,
    src_map: &SegmentationMap,
    tgt_map: &SegmentationMap,
) -> Result<AlignmentSet> {
    let mut out = AlignmentSet::new();
    for (i, j) in word_align.iter() {
        let (Some(si), Some(tj)) = (src_map.range(i), tgt_map.range(j)) else {
            return Err(Error::invalid(format!("word link {i}-{j} outside segmentation")));
        };
        for a in si {
            for b in tj.clone() {
                out.insert(a, b);
            }
        }
    }
    Ok(out)
}

/// Words `i` and `j` are linked when any of their subwords are.
pub fn reduce_alignment(
    sub_align: &AlignmentSet,
    src_map: &SegmentationMap,
    tgt_map: &SegmentationMap,
) -> Result<AlignmentSet> {
    sub_align
        .iter()
        .map(|(a, b)| match (src_map.word_of(a), tgt_map.word_of(b)) {
            (Some(i), Some(j)) => Ok((i, j)),
            _ => Err(Error::invalid(format!("subword link {a}-{b} outside segmentation"))),
        })
        .collect()
}
