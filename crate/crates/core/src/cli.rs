//! Command-line entry point.
//!
//! Settings resolve as defaults, then the `--config` TOML file, then flags.
//! The resolved settings are logged as JSON at the start of every run.

use std::ffi::OsString;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{
    read_alignments, read_bitext, read_tagged, read_tagged_file, tokenize, write_alignments, write_bitext,
    write_tagged, AlignmentSet, LabeledPair, ParallelCorpus, SentencePair, Span,
};
use crate::disc::{default_alpha_grid, AlignerConfig, ConvMode, DiscAligner};
use crate::eval::{alpha_grid, score, score_span_restricted, ScoreMode};
use crate::experiments::AttentionAligner;
use crate::projection::{project_corpus, Aligner, ConflictRule, Precomputed, ProjectionPolicy, StatAligner};
use crate::seq2seq::{pretrain_mt, Seq2SeqConfig, Seq2SeqModel};
use crate::service::{score_annotator, serve, Session, TaskSet, TaskStore};
use crate::stat::{symmetrize, EmConfig, Heuristic, StatMode, StatModel, StatPair};
use crate::subword::{expand_alignment, learn_bpe, segment_pair, MergeTable};
use crate::synth::{generate, SynthSpec};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "wordalign", version, about = "Word alignment toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, Args, Serialize)]
pub struct Common {
    /// Seed for every random draw of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with `[synth]`, `[mt]`, `[aligner]`, `[em]`, `[projection]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with gold alignments and tags.
    Synth(SynthArgs),
    /// Pretrain the encoder-decoder on a bitext.
    Pretrain(PretrainArgs),
    /// Train the alignment head on gold-aligned pairs.
    TrainAligner(TrainAlignerArgs),
    /// Align a bitext with a trained head.
    Align(AlignArgs),
    /// Train both EM directions and symmetrize.
    EmAlign(EmAlignArgs),
    /// Threshold averaged cross-attention.
    AttnAlign(AttnAlignArgs),
    /// Combine forward and backward alignment files.
    Symmetrize(SymmetrizeArgs),
    /// Learn a joint BPE merge table from a bitext.
    BpeLearn(BpeLearnArgs),
    /// Segment a bitext (and optionally gold links) with a merge table.
    BpeApply(BpeApplyArgs),
    /// Score predicted alignments against gold.
    Score(ScoreArgs),
    /// Precision/recall/F1 across a threshold grid.
    Sweep(SweepArgs),
    /// Project source tags onto targets across alignments.
    Project(ProjectArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Rate and accuracy of an annotation session.
    ScoreAnnotator(ScoreAnnotatorArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1000)]
    pub sentences: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub bitext: PathBuf,
    /// Segment the bitext with this merge table first.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainAlignerArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretrained encoder-decoder.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bitext: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Held-out labeled pairs for threshold selection.
    #[arg(long, requires = "tune_gold")]
    pub tune_bitext: Option<PathBuf>,
    #[arg(long, requires = "tune_bitext")]
    pub tune_gold: Option<PathBuf>,
    /// Merge table the encoder-decoder was pretrained with.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    /// Update encoder-decoder weights along with the head.
    #[arg(long)]
    pub finetune: bool,
    #[arg(long)]
    pub conv: Option<ConvMode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained aligner.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bitext: PathBuf,
    /// Override the stored threshold.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Pharaoh output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmAlignArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub bitext: PathBuf,
    #[arg(long, default_value = "grow-diag-final-and")]
    pub heuristic: Heuristic,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// `model1` or `model2`.
    #[arg(long)]
    pub ibm: Option<StatMode>,
    /// Also write `PREFIX.fwd` and `PREFIX.bwd` model files.
    #[arg(long)]
    pub save_models: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnAlignArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretrained encoder-decoder.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bitext: PathBuf,
    #[arg(long, required_unless_present = "tune_gold")]
    pub alpha: Option<f64>,
    #[arg(long, requires = "tune_gold")]
    pub tune_bitext: Option<PathBuf>,
    #[arg(long, requires = "tune_bitext")]
    pub tune_gold: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SymmetrizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Source-to-target links, `i-j` per pair.
    #[arg(long)]
    pub forward: PathBuf,
    /// Target-to-source model output, also written `i-j`.
    #[arg(long)]
    pub backward: PathBuf,
    /// Bitext giving sentence lengths.
    #[arg(long)]
    pub bitext: PathBuf,
    #[arg(long, default_value = "grow-diag-final-and")]
    pub heuristic: Heuristic,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BpeLearnArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bitext; both sides feed one joint table.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub merges: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BpeApplyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Word-level gold links to expand to subword level.
    #[arg(long, requires = "gold_out")]
    pub gold: Option<PathBuf>,
    #[arg(long, requires = "gold")]
    pub gold_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, default_value = "macro")]
    pub mode: ScoreMode,
    /// Source-side BIO tags; only links from tagged spans are scored.
    #[arg(long)]
    pub spans: Option<PathBuf>,
    /// TSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Disc,
    Attention,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained aligner (disc) or encoder-decoder (attention).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "disc")]
    pub kind: SweepKind,
    #[arg(long)]
    pub bitext: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// `lo:hi:steps` or a comma-separated ascending list.
    #[arg(long, default_value = "0.05:0.95:18")]
    pub grid: String,
    #[arg(long, default_value = "macro")]
    pub mode: ScoreMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AlignerKind {
    Disc,
    Stat,
    Attention,
    Precomputed,
}

#[derive(Debug, Args, Serialize)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Tagged source sentences.
    #[arg(long)]
    pub tags: PathBuf,
    /// Bitext whose target side holds the translations; its source side must
    /// match the tagged tokens.
    #[arg(long, conflicts_with = "translations", required_unless_present = "translations")]
    pub bitext: Option<PathBuf>,
    /// One whitespace-tokenized translation per line.
    #[arg(long)]
    pub translations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "disc")]
    pub aligner: AlignerKind,
    /// Aligner model (disc), encoder-decoder (attention) or model prefix (stat).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Pharaoh links for `--aligner precomputed`.
    #[arg(long)]
    pub alignments: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value = "grow-diag-final-and")]
    pub heuristic: Heuristic,
    #[arg(long)]
    pub conflict: Option<ConflictRule>,
    #[arg(long)]
    pub default_label: Option<String>,
    #[arg(long)]
    pub no_bio_repair: bool,
    /// Also write the links used.
    #[arg(long)]
    pub alignments_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bitext of sentence pairs to annotate.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Pharaoh file pre-filling the links.
    #[arg(long)]
    pub links: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of UI assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub annotator: Option<String>,
    /// Journal file; created if absent, replayed if present.
    #[arg(long, alias = "journal")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreAnnotatorArgs {
    #[command(flatten)]
    pub common: Common,
    /// Session journal; only submitted tasks are scored.
    #[arg(long, conflicts_with = "links", required_unless_present = "links")]
    pub journal: Option<PathBuf>,
    /// Exported Pharaoh links, one line per task.
    #[arg(long, requires = "elapsed_ms")]
    pub links: Option<PathBuf>,
    /// Total annotation time for `--links`.
    #[arg(long)]
    pub elapsed_ms: Option<u64>,
    /// The task bitext the session ran on.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub spans: Option<PathBuf>,
    #[arg(long, default_value = "macro")]
    pub mode: ScoreMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file. Missing tables and keys keep defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthSpec,
    pub mt: Seq2SeqConfig,
    pub aligner: AlignerConfig,
    pub em: EmConfig,
    pub projection: ProjectionPolicy,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn log_resolved(command: &str, args: &impl Serialize, seed: u64, settings: serde_json::Value) {
    let resolved = json!({ "command": command, "seed": seed, "args": args, "settings": settings });
    log::info!("resolved config: {resolved}");
}

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::TrainAligner(a) => train_aligner_cmd(a),
        Command::Align(a) => align_cmd(a),
        Command::EmAlign(a) => em_align_cmd(a),
        Command::AttnAlign(a) => attn_align_cmd(a),
        Command::Symmetrize(a) => symmetrize_cmd(a),
        Command::BpeLearn(a) => bpe_learn_cmd(a),
        Command::BpeApply(a) => bpe_apply_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Project(a) => project_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::ScoreAnnotator(a) => score_annotator_cmd(a),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn emit_alignments(sets: &[AlignmentSet], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_alignments(sets, p),
        None => write_text(None, &crate::corpus::format_alignments(sets)),
    }
}

fn labeled(bitext: &Path, gold: &Path) -> Result<Vec<LabeledPair>> {
    crate::corpus::zip_labeled(&read_bitext(bitext)?, &read_alignments(gold)?)
}

fn segment_corpus(corpus: &ParallelCorpus, table: &MergeTable) -> ParallelCorpus {
    ParallelCorpus::new(corpus.iter().map(|p| segment_pair(p, table).pair).collect())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut spec = FileConfig::load(a.common.config.as_deref())?.synth;
    if let Some(seed) = a.common.seed {
        spec.seed = seed;
    }
    log_resolved("synth", &a, spec.seed, to_json(&spec));
    generate(&spec, a.sentences)?.write_dir(&a.out)?;
    log::info!("wrote {} pairs to {}", a.sentences, a.out.display());
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut cfg = FileConfig::load(a.common.config.as_deref())?.mt;
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    log_resolved("pretrain", &a, cfg.seed, to_json(&cfg));
    let mut corpus = read_bitext(&a.bitext)?;
    if let Some(path) = &a.bpe {
        corpus = segment_corpus(&corpus, &MergeTable::load(path)?);
    }
    let model = pretrain_mt(&corpus, &cfg)?;
    let tail = &model.loss_history[model.loss_history.len().saturating_sub(20)..];
    if !tail.is_empty() {
        log::info!("final training loss {:.4}", tail.iter().sum::<f64>() / tail.len() as f64);
    }
    model.save(&a.out)
}

fn train_aligner_cmd(a: TrainAlignerArgs) -> Result<()> {
    let mut cfg = FileConfig::load(a.common.config.as_deref())?.aligner;
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if a.finetune {
        cfg.finetune = true;
    }
    if let Some(conv) = a.conv {
        cfg.conv = conv;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    log_resolved("train-aligner", &a, cfg.seed, to_json(&cfg));
    let mt = Seq2SeqModel::load(&a.model)?;
    let bpe = a.bpe.as_deref().map(MergeTable::load).transpose()?;
    let data = labeled(&a.bitext, &a.gold)?;
    let mut aligner = DiscAligner::new(mt, &cfg, bpe)?;
    aligner.train(&data)?;
    if let (Some(tb), Some(tg)) = (&a.tune_bitext, &a.tune_gold) {
        let report = aligner.tune_alpha(&labeled(tb, tg)?, &default_alpha_grid(), ScoreMode::Macro)?;
        log::info!("tuned alpha {} (macro F1 {:.4})", report.best_alpha, report.best_f1);
    }
    aligner.save(&a.out)
}

fn align_cmd(a: AlignArgs) -> Result<()> {
    let mut aligner = DiscAligner::load(&a.model)?;
    if let Some(alpha) = a.alpha {
        aligner.alpha = alpha;
    }
    log_resolved(
        "align",
        &a,
        a.common.seed.unwrap_or(aligner.config.seed),
        json!({ "aligner": aligner.config, "alpha": aligner.alpha }),
    );
    let corpus = read_bitext(&a.bitext)?;
    emit_alignments(&aligner.align_corpus(&corpus)?, a.out.as_deref())
}

fn em_align_cmd(a: EmAlignArgs) -> Result<()> {
    let mut cfg = FileConfig::load(a.common.config.as_deref())?.em;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(mode) = a.ibm {
        cfg = match mode {
            StatMode::Model1 => EmConfig {
                iterations: cfg.iterations,
                p0: cfg.p0,
                ..EmConfig::model1()
            },
            StatMode::Model2 => EmConfig { mode, ..cfg },
        };
    }
    log_resolved("em-align", &a, a.common.seed.unwrap_or(0), to_json(&cfg));
    let corpus = read_bitext(&a.bitext)?;
    let models = StatPair::train(&corpus, &cfg)?;
    if let Some(prefix) = &a.save_models {
        models.forward.save(with_suffix(prefix, "fwd"))?;
        models.backward.save(with_suffix(prefix, "bwd"))?;
    }
    emit_alignments(&models.align_corpus(&corpus, a.heuristic)?, a.out.as_deref())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn attn_align_cmd(a: AttnAlignArgs) -> Result<()> {
    let mt = Seq2SeqModel::load(&a.model)?;
    let mut aligner = AttentionAligner {
        mt: &mt,
        alpha: a.alpha.unwrap_or(0.5),
    };
    if let (Some(tb), Some(tg)) = (&a.tune_bitext, &a.tune_gold) {
        let report = aligner.tune_alpha(&labeled(tb, tg)?, &default_alpha_grid(), ScoreMode::Macro)?;
        log::info!("tuned alpha {} (macro F1 {:.4})", report.best_alpha, report.best_f1);
    }
    log_resolved("attn-align", &a, a.common.seed.unwrap_or(mt.config.seed), json!({ "alpha": aligner.alpha }));
    let corpus = read_bitext(&a.bitext)?;
    emit_alignments(&aligner.align_corpus(&corpus)?, a.out.as_deref())
}

fn symmetrize_cmd(a: SymmetrizeArgs) -> Result<()> {
    log_resolved("symmetrize", &a, a.common.seed.unwrap_or(0), json!({ "heuristic": a.heuristic }));
    let corpus = read_bitext(&a.bitext)?;
    let fwd = read_alignments(&a.forward)?;
    let bwd = read_alignments(&a.backward)?;
    crate::corpus::validate_alignments(&corpus, &fwd)?;
    crate::corpus::validate_alignments(&corpus, &bwd)?;
    let sets = corpus
        .iter()
        .zip(fwd.iter().zip(&bwd))
        .map(|(p, (f, b))| symmetrize(f, b, a.heuristic, p.src_len(), p.tgt_len()))
        .collect::<Result<Vec<_>>>()?;
    emit_alignments(&sets, a.out.as_deref())
}

fn bpe_learn_cmd(a: BpeLearnArgs) -> Result<()> {
    log_resolved("bpe-learn", &a, a.common.seed.unwrap_or(0), json!({ "merges": a.merges }));
    let corpus = read_bitext(&a.input)?;
    let sentences: Vec<Vec<String>> = corpus.sources().into_iter().chain(corpus.targets()).collect();
    let table = learn_bpe(&sentences, a.merges);
    log::info!("learned {} merges", table.len());
    table.save(&a.out)
}

fn bpe_apply_cmd(a: BpeApplyArgs) -> Result<()> {
    log_resolved("bpe-apply", &a, a.common.seed.unwrap_or(0), json!({}));
    let table = MergeTable::load(&a.table)?;
    let corpus = read_bitext(&a.input)?;
    let segmented: Vec<_> = corpus.iter().map(|p| segment_pair(p, &table)).collect();
    write_bitext(&ParallelCorpus::new(segmented.iter().map(|s| s.pair.clone()).collect()), &a.out)?;
    if let (Some(gold), Some(gold_out)) = (&a.gold, &a.gold_out) {
        let sets = read_alignments(gold)?;
        crate::corpus::validate_alignments(&corpus, &sets)?;
        let expanded = sets
            .iter()
            .zip(&segmented)
            .map(|(g, s)| expand_alignment(g, &s.src_map, &s.tgt_map))
            .collect::<Result<Vec<_>>>()?;
        write_alignments(&expanded, gold_out)?;
    }
    Ok(())
}

/// Spans and source lengths from a tagged source file.
fn read_spans(path: &Path) -> Result<(Vec<Vec<Span>>, Vec<usize>)> {
    let sentences = read_tagged(path)?;
    Ok((
        sentences.iter().map(|s| s.spans()).collect(),
        sentences.iter().map(|s| s.len()).collect(),
    ))
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    log_resolved("score", &a, a.common.seed.unwrap_or(0), json!({ "mode": a.mode }));
    let pred = read_alignments(&a.pred)?;
    let gold = read_alignments(&a.gold)?;
    let report = match &a.spans {
        None => score(&pred, &gold, a.mode)?,
        Some(path) => {
            let (spans, lens) = read_spans(path)?;
            score_span_restricted(&pred, &gold, &spans, &lens, a.mode)?
        }
    };
    println!("P={:.4} R={:.4} F1={:.4}", report.precision, report.recall, report.f1);
    if let Some(out) = &a.out {
        write_text(Some(out), &report.to_tsv())?;
    }
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::invalid(format!("bad grid `{text}`; want lo:hi:steps or a comma list"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let steps: usize = parts[2].trim().parse().map_err(|_| bad())?;
        return Ok(alpha_grid(lo, hi, steps));
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    log_resolved("sweep", &a, a.common.seed.unwrap_or(0), json!({ "grid": grid }));
    let data = labeled(&a.bitext, &a.gold)?;
    let report = match a.kind {
        SweepKind::Disc => DiscAligner::load(&a.model)?.sweep(&data, &grid, a.mode)?,
        SweepKind::Attention => {
            let mt = Seq2SeqModel::load(&a.model)?;
            AttentionAligner { mt: &mt, alpha: 0.5 }.sweep(&data, &grid, a.mode)?
        }
    };
    log::info!("best alpha {} ({} F1 {:.4})", report.best_alpha, a.mode, report.best_f1);
    write_text(a.out.as_deref(), &report.to_tsv())
}

fn load_stat_pair(prefix: &Path) -> Result<StatPair> {
    Ok(StatPair {
        forward: StatModel::load(with_suffix(prefix, "fwd"))?,
        backward: StatModel::load(with_suffix(prefix, "bwd"))?,
    })
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, kind: AlignerKind) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("--aligner {kind:?} needs {flag}").to_lowercase()))
}

fn project_cmd(a: ProjectArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut policy = file.projection;
    if let Some(c) = a.conflict {
        policy.conflict = c;
    }
    if let Some(label) = &a.default_label {
        policy.default_label = label.clone();
    }
    if a.no_bio_repair {
        policy.bio_repair = false;
    }
    log_resolved(
        "project",
        &a,
        a.common.seed.unwrap_or(0),
        json!({ "policy": policy, "em": file.em }),
    );
    let source = read_tagged_file(&a.tags)?;
    let targets: Vec<Vec<String>> = match (&a.bitext, &a.translations) {
        (Some(path), _) => {
            let corpus = read_bitext(path)?;
            if corpus.len() != source.sentences.len() {
                return Err(Error::invalid(format!(
                    "{} tagged sentences vs {} bitext pairs",
                    source.sentences.len(),
                    corpus.len()
                )));
            }
            for (k, (s, p)) in source.sentences.iter().zip(corpus.iter()).enumerate() {
                if s.tokens != p.source {
                    return Err(Error::invalid(format!(
                        "{}: source side of pair {} differs from tagged sentence {}",
                        path.display(),
                        p.id,
                        k + 1
                    )));
                }
            }
            corpus.targets()
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.lines().map(tokenize).collect()
        }
        (None, None) => return Err(Error::invalid("need --bitext or --translations")),
    };

    let mt_holder;
    let stat_holder;
    let aligner: Box<dyn Aligner + '_> = match a.aligner {
        AlignerKind::Disc => {
            let mut d = DiscAligner::load(require(&a.model, "--model", a.aligner)?)?;
            if let Some(alpha) = a.alpha {
                d.alpha = alpha;
            }
            Box::new(d)
        }
        AlignerKind::Attention => {
            mt_holder = Seq2SeqModel::load(require(&a.model, "--model", a.aligner)?)?;
            let alpha = a
                .alpha
                .ok_or_else(|| Error::invalid("--aligner attention needs --alpha"))?;
            Box::new(AttentionAligner { mt: &mt_holder, alpha })
        }
        AlignerKind::Stat => {
            stat_holder = match &a.model {
                Some(prefix) => load_stat_pair(prefix)?,
                None => {
                    let pairs = source
                        .sentences
                        .iter()
                        .zip(&targets)
                        .enumerate()
                        .map(|(k, (s, t))| SentencePair::new((k + 1).to_string(), s.tokens.clone(), t.clone()))
                        .collect::<Result<Vec<_>>>()?;
                    StatPair::train(&ParallelCorpus::new(pairs), &file.em)?
                }
            };
            Box::new(StatAligner {
                models: &stat_holder,
                heuristic: a.heuristic,
            })
        }
        AlignerKind::Precomputed => Box::new(Precomputed {
            name: "precomputed".into(),
            sets: read_alignments(require(&a.alignments, "--alignments", a.aligner)?)?,
        }),
    };

    let projected = project_corpus(&source.sentences, &targets, aligner.as_ref(), &policy)?;
    let mut comments = source.comments.clone();
    comments.extend(projected.comments.iter().cloned());
    write_tagged(&projected.sentences, &comments, &a.out)?;
    if let Some(path) = &a.alignments_out {
        write_alignments(&projected.alignments, path)?;
    }
    log::info!("projected {} sentences", projected.sentences.len());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    log_resolved("serve", &a, a.common.seed.unwrap_or(0), json!({}));
    let corpus = read_bitext(&a.tasks)?;
    let prefill = a.links.as_deref().map(read_alignments).transpose()?;
    let tasks = TaskSet::new(&corpus, prefill.as_deref(), a.annotator.as_deref())?;
    let store = TaskStore::open(tasks, &a.out, a.annotator.clone())?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::invalid(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::invalid(format!("cannot start runtime: {e}")))?;
    runtime.block_on(serve(store, addr, a.static_dir.clone(), |bound| {
        println!("listening on http://{bound}");
        let _ = std::io::stdout().flush();
    }))
}

fn score_annotator_cmd(a: ScoreAnnotatorArgs) -> Result<()> {
    log_resolved("score-annotator", &a, a.common.seed.unwrap_or(0), json!({ "mode": a.mode }));
    let corpus = read_bitext(&a.tasks)?;
    let gold = read_alignments(&a.gold)?;
    crate::corpus::validate_alignments(&corpus, &gold)?;
    let session = match (&a.journal, &a.links) {
        (Some(journal), _) => {
            let mut tasks = TaskSet::new(&corpus, None, None)?;
            if !journal.exists() {
                return Err(Error::invalid(format!("{}: journal not found", journal.display())));
            }
            tasks.replay(journal)?;
            Session::submitted(&tasks)
        }
        (None, Some(links)) => {
            let sets = read_alignments(links)?;
            crate::corpus::validate_alignments(&corpus, &sets)?;
            Session::exported(sets, a.elapsed_ms.unwrap_or(0))
        }
        (None, None) => return Err(Error::invalid("need --journal or --links")),
    };
    let spans = a.spans.as_deref().map(read_spans).transpose()?;
    let report = score_annotator(
        &session,
        &gold,
        spans.as_ref().map(|(s, l)| (s.as_slice(), l.as_slice())),
        a.mode,
    )?;
    print!("{}", report.to_tsv());
    if let Some(out) = &a.out {
        write_text(Some(out), &report.to_tsv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0:1:4").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_grid("0.1, 0.3").unwrap(), vec![0.1, 0.3]);
        assert!(parse_grid("a:b").is_err());
    }

    #[test]
    fn config_file_overrides_and_rejects_unknown_keys() {
        let cfg: FileConfig = toml::from_str("[aligner]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.aligner.steps, 7);
        assert_eq!(cfg.aligner.hidden, AlignerConfig::default().hidden);
        assert!(toml::from_str::<FileConfig>("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn every_subcommand_takes_the_common_flags() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            for flag in ["seed", "config", "out"] {
                assert!(
                    sub.get_arguments().any(|a| a.get_long() == Some(flag)),
                    "{} lacks --{flag}",
                    sub.get_name()
                );
            }
        }
    }
}
