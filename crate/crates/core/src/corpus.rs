//! Corpus artifacts and their on-disk formats.
//!
//! * bitext: one pair per line, `source tokens ||| target tokens`
//! * alignments: Pharaoh format, space separated `i-j`, 0-based
//! * tags: `token<TAB>tag` rows, blank line between sentences; lines
//!   starting with `#` and holding no tab are comments

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A tokenized translation pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn new(id: impl Into<String>, source: Vec<String>, target: Vec<String>) -> Result<Self> {
        let pair = SentencePair {
            id: id.into(),
            source,
            target,
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Builds a pair from whitespace separated strings.
    pub fn from_text(id: impl Into<String>, source: &str, target: &str) -> Result<Self> {
        Self::new(id, tokenize(source), tokenize(target))
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::invalid(format!("pair {}: empty source", self.id)));
        }
        if self.target.is_empty() {
            return Err(Error::invalid(format!("pair {}: empty target", self.id)));
        }
        for tok in self.source.iter().chain(&self.target) {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("pair {}: bad token {tok:?}", self.id)));
            }
        }
        Ok(())
    }

    pub fn src_len(&self) -> usize {
        self.source.len()
    }

    pub fn tgt_len(&self) -> usize {
        self.target.len()
    }

    /// The same pair with source and target exchanged.
    pub fn swapped(&self) -> SentencePair {
        SentencePair {
            id: self.id.clone(),
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_ascii_whitespace().map(str::to_owned).collect()
}

/// An ordered collection of sentence pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SentencePair> {
        self.pairs.iter()
    }

    pub fn swapped(&self) -> ParallelCorpus {
        ParallelCorpus::new(self.pairs.iter().map(SentencePair::swapped).collect())
    }

    pub fn concat(&self, other: &ParallelCorpus) -> ParallelCorpus {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        ParallelCorpus::new(pairs)
    }

    pub fn sources(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }
}

impl<'a> IntoIterator for &'a ParallelCorpus {
    type Item = &'a SentencePair;
    type IntoIter = std::slice::Iter<'a, SentencePair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

/// A set of (source index, target index) links, iterated in (i, j) order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignmentSet {
    links: BTreeSet<(usize, usize)>,
}

impl AlignmentSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, i: usize, j: usize) -> bool {
        self.links.insert((i, j))
    }

    pub fn remove(&mut self, i: usize, j: usize) -> bool {
        self.links.remove(&(i, j))
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.links.contains(&(i, j))
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    pub fn intersection(&self, other: &AlignmentSet) -> AlignmentSet {
        self.links.intersection(&other.links).copied().collect()
    }

    pub fn union(&self, other: &AlignmentSet) -> AlignmentSet {
        self.links.union(&other.links).copied().collect()
    }

    pub fn is_subset(&self, other: &AlignmentSet) -> bool {
        self.links.is_subset(&other.links)
    }

    /// Exchanges the roles of source and target.
    pub fn transposed(&self) -> AlignmentSet {
        self.iter().map(|(i, j)| (j, i)).collect()
    }

    /// Checks every link against an `n` x `m` pair.
    pub fn check_bounds(&self, n: usize, m: usize, line: usize) -> Result<()> {
        match self.iter().find(|&(i, j)| i >= n || j >= m) {
            Some((i, j)) => Err(Error::LinkOutOfBounds { line, i, j, n, m }),
            None => Ok(()),
        }
    }

    pub fn to_pharaoh(&self) -> String {
        let parts: Vec<String> = self.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        parts.join(" ")
    }

    /// Parses one Pharaoh line; `line` is only used for error messages.
    pub fn parse_pharaoh(text: &str, line: usize) -> Result<AlignmentSet> {
        let mut set = AlignmentSet::new();
        for item in text.split_ascii_whitespace() {
            let (i, j) = item
                .split_once('-')
                .ok_or_else(|| Error::parse(line, format!("malformed link `{item}`")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(line, format!("bad index `{s}` in link `{item}`")))
            };
            set.insert(parse(i)?, parse(j)?);
        }
        Ok(set)
    }
}

impl FromIterator<(usize, usize)> for AlignmentSet {
    fn from_iter<T: IntoIterator<Item = (usize, usize)>>(iter: T) -> Self {
        AlignmentSet {
            links: iter.into_iter().collect(),
        }
    }
}

impl fmt::Display for AlignmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_pharaoh())
    }
}

/// A gold-labeled pair used for supervised aligner training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPair {
    pub pair: SentencePair,
    pub gold: AlignmentSet,
}

impl LabeledPair {
    pub fn new(pair: SentencePair, gold: AlignmentSet) -> Result<Self> {
        gold.check_bounds(pair.src_len(), pair.tgt_len(), 0)?;
        Ok(LabeledPair { pair, gold })
    }
}

pub fn zip_labeled(corpus: &ParallelCorpus, gold: &[AlignmentSet]) -> Result<Vec<LabeledPair>> {
    validate_alignments(corpus, gold)?;
    Ok(corpus
        .iter()
        .zip(gold)
        .map(|(p, g)| LabeledPair {
            pair: p.clone(),
            gold: g.clone(),
        })
        .collect())
}

/// Checks that `sets` matches `corpus` line for line and that every link is in bounds.
pub fn validate_alignments(corpus: &ParallelCorpus, sets: &[AlignmentSet]) -> Result<()> {
    if corpus.len() != sets.len() {
        return Err(Error::invalid(format!(
            "{} alignment lines for {} sentence pairs",
            sets.len(),
            corpus.len()
        )));
    }
    for (k, (pair, set)) in corpus.iter().zip(sets).enumerate() {
        set.check_bounds(pair.src_len(), pair.tgt_len(), k + 1)?;
    }
    Ok(())
}

/// Token labels for one sentence; spans use the BIO scheme.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

pub const OUTSIDE: &str = "O";

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::invalid(format!(
                "{} tags for {} tokens",
                tags.len(),
                tokens.len()
            )));
        }
        Ok(TaggedSentence { tokens, tags })
    }

    /// All tokens labeled `O`.
    pub fn outside(tokens: Vec<String>) -> Self {
        let tags = vec![OUTSIDE.to_owned(); tokens.len()];
        TaggedSentence { tokens, tags }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_bio_valid(&self) -> bool {
        bio_violations(&self.tags).is_empty()
    }

    pub fn spans(&self) -> Vec<Span> {
        bio_spans(&self.tags)
    }
}

/// Splits `B-PER` into (`B`, `PER`); `O` and unprefixed tags have no type.
pub fn split_tag(tag: &str) -> (char, Option<&str>) {
    match tag.split_once('-') {
        Some(("B", ty)) => ('B', Some(ty)),
        Some(("I", ty)) => ('I', Some(ty)),
        _ => ('O', None),
    }
}

pub fn tag_type(tag: &str) -> Option<&str> {
    split_tag(tag).1
}

/// Positions of `I-X` tags not preceded by `B-X` or `I-X`.
pub fn bio_violations(tags: &[String]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<&str> = None;
    for (k, tag) in tags.iter().enumerate() {
        let (prefix, ty) = split_tag(tag);
        if prefix == 'I' && prev != ty {
            out.push(k);
        }
        prev = ty;
    }
    out
}

/// Rewrites each unopened `I-X` as `B-X`; returns the repaired positions.
pub fn repair_bio_openers(tags: &mut [String]) -> Vec<usize> {
    let bad = bio_violations(tags);
    for &k in &bad {
        let ty = tag_type(&tags[k]).unwrap_or_default().to_owned();
        tags[k] = format!("B-{ty}");
    }
    bad
}

/// Half-open token range `[start, end)` with an optional entity type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span {
            start,
            end,
            label: None,
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        self.start <= k && k < self.end
    }
}

pub fn bio_spans(tags: &[String]) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    let mut open: Option<Span> = None;
    for (k, tag) in tags.iter().enumerate() {
        let (prefix, ty) = split_tag(tag);
        let continues = prefix == 'I' && open.as_ref().and_then(|s| s.label.as_deref()) == ty;
        if continues {
            if let Some(s) = open.as_mut() {
                s.end = k + 1;
            }
            continue;
        }
        spans.extend(open.take());
        if let Some(ty) = ty {
            open = Some(Span {
                start: k,
                end: k + 1,
                label: Some(ty.to_owned()),
            });
        }
    }
    spans.extend(open);
    spans
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token <-> id map with fixed reserved ids for padding, unknown, begin and end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: IndexMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        let ids = RESERVED
            .iter()
            .enumerate()
            .map(|(k, t)| ((*t).to_owned(), k))
            .collect();
        Vocabulary { ids }
    }

    /// Sorted, deduplicated tokens appended after the reserved entries.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let mut sorted: Vec<&String> = tokens.into_iter().collect();
        sorted.sort();
        sorted.dedup();
        let mut vocab = Vocabulary::new();
        for tok in sorted {
            vocab.add(tok);
        }
        vocab
    }

    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary does not start with the reserved entries".into()));
        }
        let mut vocab = Vocabulary::new();
        for tok in &tokens[RESERVED.len()..] {
            if vocab.ids.contains_key(tok) {
                return Err(Error::Format(format!("duplicate vocabulary entry {tok:?}")));
            }
            vocab.add(tok);
        }
        Ok(vocab)
    }

    pub fn add(&mut self, token: &str) -> usize {
        let next = self.ids.len();
        *self.ids.entry(token.to_owned()).or_insert(next)
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.ids.get_index(id).map(|(t, _)| t.as_str())
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.len() == RESERVED.len()
    }

    pub fn tokens(&self) -> Vec<String> {
        self.ids.keys().cloned().collect()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn parse_bitext_line(text: &str, line: usize) -> Result<SentencePair> {
    let (src, tgt) = text
        .split_once("|||")
        .ok_or_else(|| Error::parse(line, "missing `|||` separator"))?;
    let source = tokenize(src);
    let target = tokenize(tgt);
    if source.is_empty() {
        return Err(Error::parse(line, "empty source"));
    }
    if target.is_empty() {
        return Err(Error::parse(line, "empty target"));
    }
    Ok(SentencePair {
        id: line.to_string(),
        source,
        target,
    })
}

pub fn parse_bitext(reader: impl BufRead) -> Result<ParallelCorpus> {
    let mut pairs = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<bitext>", e))?;
        pairs.push(parse_bitext_line(&line, k + 1)?);
    }
    Ok(ParallelCorpus::new(pairs))
}

pub fn read_bitext(path: impl AsRef<Path>) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    parse_bitext(open(path)?).map_err(|e| with_path(e, path))
}

pub fn write_bitext(corpus: &ParallelCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for p in corpus {
        writeln!(w, "{} ||| {}", p.source.join(" "), p.target.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_alignments(reader: impl BufRead) -> Result<Vec<AlignmentSet>> {
    reader
        .lines()
        .enumerate()
        .map(|(k, line)| {
            let line = line.map_err(|e| Error::io("<alignments>", e))?;
            AlignmentSet::parse_pharaoh(&line, k + 1)
        })
        .collect()
}

pub fn read_alignments(path: impl AsRef<Path>) -> Result<Vec<AlignmentSet>> {
    let path = path.as_ref();
    parse_alignments(open(path)?).map_err(|e| with_path(e, path))
}

pub fn format_alignments(sets: &[AlignmentSet]) -> String {
    let mut out = String::new();
    for set in sets {
        out.push_str(&set.to_pharaoh());
        out.push('\n');
    }
    out
}

pub fn write_alignments(sets: &[AlignmentSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_alignments(sets)).map_err(|e| Error::io(path, e))
}

/// Parsed tagged file: sentences plus any `#` header comments and the
/// positions where BIO repair was applied.
#[derive(Clone, Debug, Default)]
pub struct TaggedFile {
    pub sentences: Vec<TaggedSentence>,
    pub comments: Vec<String>,
    pub repairs: Vec<(usize, usize)>,
}

pub fn parse_tagged(reader: impl BufRead) -> Result<TaggedFile> {
    let mut file = TaggedFile::default();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, file: &mut TaggedFile| {
        if tokens.is_empty() {
            return;
        }
        let sent_idx = file.sentences.len();
        for k in repair_bio_openers(tags) {
            log::warn!("sentence {}: unopened `I-` tag at token {k} repaired to `B-`", sent_idx + 1);
            file.repairs.push((sent_idx, k));
        }
        file.sentences.push(TaggedSentence {
            tokens: std::mem::take(tokens),
            tags: std::mem::take(tags),
        });
    };
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<tags>", e))?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut file);
            continue;
        }
        if trimmed.starts_with('#') && !trimmed.contains('\t') {
            file.comments.push(trimmed.trim_start_matches('#').trim().to_owned());
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 2 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(Error::parse(
                k + 1,
                format!("expected `token<TAB>tag`, found {} column(s)", cols.len()),
            ));
        }
        tokens.push(cols[0].to_owned());
        tags.push(cols[1].to_owned());
    }
    flush(&mut tokens, &mut tags, &mut file);
    Ok(file)
}

pub fn read_tagged_file(path: impl AsRef<Path>) -> Result<TaggedFile> {
    let path = path.as_ref();
    parse_tagged(open(path)?).map_err(|e| with_path(e, path))
}

pub fn read_tagged(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    read_tagged_file(path).map(|f| f.sentences)
}

pub fn format_tagged(sentences: &[TaggedSentence], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    for (k, s) in sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    out
}

pub fn write_tagged(sentences: &[TaggedSentence], comments: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_tagged(sentences, comments)).map_err(|e| Error::io(path, e))
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}
