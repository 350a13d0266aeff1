use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use quicklists::data::{
    generate_synthetic_corpus, load_corpus, save_corpus, split_train_test, Corpus, Playlist, SideInfoVector,
    SynthConfig, TrackId,
};
use quicklists::encoder::{EncoderConfig, QuickListsModel};
use quicklists::evaluation::{evaluate_model, BaselineContext, BaselineKind, LesionKind};
use quicklists::recommender::{apply_overrides, build_index, RecommendationIndex};
use quicklists::track2vec::{train_sgns_with_history, SgnsConfig, TrackEmbeddingTable};
use quicklists::training::{train_with_callback, Metric, TrainConfig};

/// Exit codes. Clap reports usage errors with 2 as well.
mod exit {
    pub const FAILURE: u8 = 1;
    pub const INVALID: u8 = 2;
    pub const IO: u8 = 3;
    pub const FORMAT: u8 = 4;
    pub const VOCAB: u8 = 5;
    pub const K_RANGE: u8 = 6;
    pub const STALE: u8 = 7;
}

/// Marks a `--k` outside `1..=N`, which gets its own exit code.
#[derive(Debug)]
struct KOutOfRange;

impl std::fmt::Display for KOutOfRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("k out of range")
    }
}

impl std::error::Error for KOutOfRange {}

fn invalid(msg: impl Into<String>) -> quicklists::Error {
    quicklists::Error::InvalidArgument(msg.into())
}

#[derive(Parser, Debug)]
#[command(name = "quicklists", version, about = "Playlist-embedding recommender: synthesize, pretrain, train, index, recommend, evaluate")]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step [default: from config, else 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Computation is sequential; values above 1 are accepted and ignored.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with latent genres.
    Synth(SynthArgs),
    /// Pretrain track vectors with skip-gram negative sampling.
    Pretrain(PretrainArgs),
    /// Train the two-tower model.
    Train(TrainArgs),
    /// Embed a candidate pool with the future tower.
    Index(IndexArgs),
    /// Recommend playlists for a query, cold start, or side-info override.
    Recommend(RecommendArgs),
    /// Score the model, its lesions and the baselines on a test corpus.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output corpus file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the train split here.
    #[arg(long)]
    train_out: Option<PathBuf>,
    /// Also write the test split here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Also write latent track and user genres (JSON) here.
    #[arg(long)]
    genres_out: Option<PathBuf>,
    /// Users [default: from config, else 2000].
    #[arg(long)]
    users: Option<usize>,
    /// Vocabulary size before filtering [default: from config, else 500].
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Latent genres [default: from config, else 8].
    #[arg(long)]
    genres: Option<usize>,
    /// Probability of staying in the current genre [default: from config, else 0.8].
    #[arg(long)]
    coherence: Option<f64>,
    /// Flip probability of side-info genre bits [default: from config, else 0.1].
    #[arg(long)]
    side_noise: Option<f64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Corpus to learn from (normally the train split).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output track-vector table.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write vectors as text, one track per line.
    #[arg(long)]
    text_out: Option<PathBuf>,
    /// Vector width [default: from config, else 32].
    #[arg(long)]
    dim: Option<usize>,
    /// Passes over the corpus [default: from config, else 5].
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Train split [default: paths.train from config].
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test split [default: paths.test from config].
    #[arg(long)]
    test: Option<PathBuf>,
    /// Track-vector table from `pretrain`.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Output model checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch statistics CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Directory for periodic checkpoints (see train.checkpoint_every).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Training epochs [default: from config, else 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: from config, else 0.001].
    #[arg(long)]
    lr0: Option<f64>,
    /// Batch size [default: from config, else 64].
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Model checkpoint [default: paths.model from config].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Corpus whose future playlists form the candidate pool.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Output index file [default: paths.index from config].
    #[arg(long)]
    out: Option<PathBuf>,
    /// euclidean, cosine or dot_distance [default: from config, else euclidean].
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    /// Model checkpoint [default: paths.model from config].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Recommendation index [default: paths.index from config].
    #[arg(long)]
    index: Option<PathBuf>,
    /// Comma-separated track ids of the current playlist, oldest first.
    #[arg(long, value_delimiter = ',', conflicts_with = "cold")]
    current_tracks: Vec<u32>,
    /// Comma-separated indices of active side-info bits.
    #[arg(long, value_delimiter = ',')]
    side_bits: Vec<usize>,
    /// Recommend from side information alone.
    #[arg(long)]
    cold: bool,
    /// Side-info override `bit=value` (value 0 or 1); repeatable. Prints
    /// recommendations before and after.
    #[arg(long = "override", value_parser = parse_override)]
    overrides: Vec<(usize, bool)>,
    /// Number of playlists to return.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Model checkpoint [default: paths.model from config].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Recommendation index [default: paths.index from config].
    #[arg(long)]
    index: Option<PathBuf>,
    /// Train split (baseline popularity statistics).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test split [default: paths.test from config].
    #[arg(long)]
    test: Option<PathBuf>,
    /// Track-vector table for the word2vec baseline; the baseline is skipped without it.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Output directory for report.txt, report.json and per_user.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_override(s: &str) -> std::result::Result<(usize, bool), String> {
    let (bit, value) = s.split_once('=').ok_or_else(|| format!("expected bit=value, got {s:?}"))?;
    let bit = bit.trim().parse().map_err(|_| format!("bad bit index {bit:?}"))?;
    let value = match value.trim() {
        "1" | "true" => true,
        "0" | "false" => false,
        other => return Err(format!("value must be 0 or 1, got {other:?}")),
    };
    Ok((bit, value))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    corpus: Option<PathBuf>,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    genres: Option<PathBuf>,
    pretrained: Option<PathBuf>,
    model: Option<PathBuf>,
    index: Option<PathBuf>,
    history: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
    report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    /// Fraction of users in the train split.
    train_ratio: f64,
    synth: SynthConfig,
    sgns: SgnsConfig,
    encoder: EncoderConfig,
    train: TrainConfig,
    paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_ratio: 0.85,
            synth: SynthConfig::default(),
            sgns: SgnsConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| invalid(format!("missing --{name} (or paths.{name} in the config)")).into())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_metric(s: &str) -> Result<Metric> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| invalid(format!("unknown metric {s:?}")).into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use quicklists::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<KOutOfRange>().is_some() {
            return exit::K_RANGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::Shape(_) | E::EmptyCorpus(_) | E::NonFinite(_) => exit::INVALID,
                E::OutOfVocab { .. } => exit::VOCAB,
                E::Format { .. } | E::Version(_) | E::Json(_) => exit::FORMAT,
                E::StaleIndex { .. } => exit::STALE,
                E::Io(_) => exit::IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::FAILURE
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    if cli.threads == 0 {
        bail!(invalid("--threads must be at least 1"));
    }
    if cli.threads > 1 {
        warn!("--threads {} requested; computation runs on one thread", cli.threads);
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Pretrain(a) => pretrain(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Index(a) => index(cfg, a),
        Command::Recommend(a) => recommend(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
    }
}

fn log_config(cfg: &RunConfig) {
    info!("resolved config: {}", serde_json::to_string(cfg).expect("config serializes"));
}

fn load(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

#[derive(Serialize)]
struct GenreSidecar<'a> {
    track_genre: &'a [usize],
    users: Vec<(&'a str, &'a [usize])>,
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    set(&mut cfg.synth.users, a.users);
    set(&mut cfg.synth.vocab_size, a.vocab_size);
    set(&mut cfg.synth.genres, a.genres);
    set(&mut cfg.synth.coherence, a.coherence);
    set(&mut cfg.synth.side_noise, a.side_noise);
    let out = required(a.out, &cfg.paths.corpus, "out")?;
    log_config(&cfg);

    let syn = generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
    save_corpus(&syn.corpus, &out).with_context(|| format!("writing {}", out.display()))?;
    let train_out = a.train_out.or_else(|| cfg.paths.train.clone());
    let test_out = a.test_out.or_else(|| cfg.paths.test.clone());
    if train_out.is_some() || test_out.is_some() {
        let (train, test) = split_train_test(&syn.corpus, cfg.train_ratio, cfg.seed)?;
        for (path, part) in [(train_out, &train), (test_out, &test)] {
            if let Some(path) = path {
                save_corpus(part, &path).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    if let Some(path) = a.genres_out.or_else(|| cfg.paths.genres.clone()) {
        let sidecar = GenreSidecar {
            track_genre: &syn.track_genre,
            users: syn
                .corpus
                .examples()
                .iter()
                .zip(&syn.user_genres)
                .map(|(ex, g)| (ex.user_id.as_str(), g.as_slice()))
                .collect(),
        };
        fs::write(&path, serde_json::to_string(&sidecar)?).with_context(|| format!("writing {}", path.display()))?;
    }

    let (within, cross) = syn.transition_counts();
    let c = &syn.corpus;
    let mean_future = c.future_lengths().iter().sum::<usize>() as f64 / c.len() as f64;
    println!("users: {}", c.len());
    println!("vocab: {}", c.vocab_size());
    println!("side width: {}", c.side_width());
    println!("genres: {}", cfg.synth.genres);
    println!("mean future length: {mean_future:.2}");
    println!("within-genre transitions: {within}");
    println!("cross-genre transitions: {cross}");
    Ok(())
}

fn pretrain(mut cfg: RunConfig, a: PretrainArgs) -> Result<()> {
    set(&mut cfg.sgns.dim, a.dim);
    set(&mut cfg.sgns.epochs, a.epochs);
    let corpus_path = required(a.corpus, &cfg.paths.train, "corpus")?;
    let out = required(a.out, &cfg.paths.pretrained, "out")?;
    log_config(&cfg);
    let corpus = load(&corpus_path)?;
    let (table, history) = train_sgns_with_history(&corpus, &cfg.sgns, cfg.seed)?;
    for e in &history {
        info!("sgns epoch {}: sampled loss {:.4}", e.epoch, e.sampled_loss);
    }
    table.save(&out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = a.text_out {
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        table.write_text(&mut f)?;
    }
    println!("wrote {} track vectors of width {} to {}", table.vocab_size(), table.dim(), out.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.lr0, a.lr0);
    set(&mut cfg.train.batch_size, a.batch_size);
    cfg.train.seed = cfg.seed;
    let train_path = required(a.train, &cfg.paths.train, "train")?;
    let test_path = required(a.test, &cfg.paths.test, "test")?;
    let pretrained = required(a.pretrained, &cfg.paths.pretrained, "pretrained")?;
    let out = required(a.out, &cfg.paths.model, "out")?;
    let history_path = a.history.or_else(|| cfg.paths.history.clone());
    let checkpoint_dir = a.checkpoint_dir.or_else(|| cfg.paths.checkpoint_dir.clone());
    log_config(&cfg);

    let train_c = load(&train_path)?;
    let test_c = load(&test_path)?;
    let table = TrackEmbeddingTable::load(&pretrained).with_context(|| format!("loading {}", pretrained.display()))?;
    if table.vocab_size() != train_c.vocab_size() {
        bail!(quicklists::Error::Shape(format!(
            "pretrained table covers {} tracks, corpus has {}",
            table.vocab_size(),
            train_c.vocab_size()
        )));
    }
    let mut model = QuickListsModel::with_pretrained(cfg.encoder.clone(), &table, train_c.side_width(), cfg.seed)?;
    if let Some(dir) = &checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let every = cfg.train.checkpoint_every;
    let history = train_with_callback(&mut model, &train_c, &test_c, &cfg.train, |record, model| {
        if let (Some(dir), true) = (&checkpoint_dir, every > 0 && (record.epoch + 1) % every == 0) {
            let path = dir.join(format!("epoch-{:04}.bin", record.epoch + 1));
            model.save(&path, true)?;
            info!("checkpoint {}", path.display());
        }
        Ok(())
    })?;
    model.save(&out, true).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = history_path {
        history.write_csv(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs; train mean x̂ {:.4}{}; model {}",
        history.epochs.len(),
        last.train.mean_x_hat,
        last.test.as_ref().map(|t| format!(", test mean x̂ {:.4}", t.mean_x_hat)).unwrap_or_default(),
        model.checksum()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<QuickListsModel> {
    QuickListsModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn index(cfg: RunConfig, a: IndexArgs) -> Result<()> {
    let model_path = required(a.model, &cfg.paths.model, "model")?;
    let candidates = required(a.candidates, &cfg.paths.train, "candidates")?;
    let out = required(a.out, &cfg.paths.index, "out")?;
    let metric = match a.metric {
        Some(m) => parse_metric(&m)?,
        None => cfg.train.metric,
    };
    log_config(&cfg);
    let model = load_model(&model_path)?;
    let pool = load(&candidates)?.future_playlists();
    let index = build_index(pool, &model, metric)?;
    index.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!("indexed {} candidates to {}", index.len(), out.display());
    Ok(())
}

fn recommend(cfg: RunConfig, a: RecommendArgs) -> Result<()> {
    let model_path = required(a.model, &cfg.paths.model, "model")?;
    let index_path = required(a.index, &cfg.paths.index, "index")?;
    log_config(&cfg);
    let model = load_model(&model_path)?;
    let index = RecommendationIndex::load(&index_path).with_context(|| format!("loading index {}", index_path.display()))?;
    index.check_model(&model)?;
    if a.k == 0 || a.k > index.len() {
        return Err(anyhow!(KOutOfRange).context(format!("k must be in 1..={}, got {}", index.len(), a.k)));
    }
    let side = SideInfoVector::with_bits(model.side_width(), &a.side_bits)?;
    let current = if a.cold {
        None
    } else if a.current_tracks.is_empty() {
        bail!(invalid("give --current-tracks, or --cold for a side-info-only query"));
    } else {
        let p = Playlist::new(a.current_tracks.iter().map(|&t| TrackId(t)).collect())?;
        p.check_vocab(model.vocab_size())?;
        Some(p)
    };
    let query = |side: &SideInfoVector| -> Result<serde_json::Value> {
        let rec = match &current {
            Some(p) => quicklists::recommender::recommend(p, side, &index, &model, a.k)?,
            None => quicklists::recommender::recommend_cold(side, &index, &model, a.k)?,
        };
        Ok(rec.to_json(&index, current.as_ref(), side, None))
    };
    let output = if a.overrides.is_empty() {
        query(&side)?
    } else {
        let changed = apply_overrides(&side, &a.overrides)?;
        serde_json::json!({ "before": query(&side)?, "after": query(&changed)? })
    };
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn evaluate(cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    let model_path = required(a.model, &cfg.paths.model, "model")?;
    let index_path = required(a.index, &cfg.paths.index, "index")?;
    let train_path = required(a.train, &cfg.paths.train, "train")?;
    let test_path = required(a.test, &cfg.paths.test, "test")?;
    let out = required(a.out, &cfg.paths.report_dir, "out")?;
    let pretrained = a.pretrained.or_else(|| cfg.paths.pretrained.clone());
    log_config(&cfg);
    let model = load_model(&model_path)?;
    let index = RecommendationIndex::load(&index_path).with_context(|| format!("loading index {}", index_path.display()))?;
    let train_c = load(&train_path)?;
    let test_c = load(&test_path)?;
    let table = match &pretrained {
        Some(p) => Some(TrackEmbeddingTable::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut report = evaluate_model(&model, &index, &test_c, &LesionKind::ALL, cfg.seed)?;
    let ctx = BaselineContext::new(&train_c, &test_c, table.as_ref());
    let kinds: Vec<BaselineKind> = BaselineKind::ALL
        .into_iter()
        .filter(|&k| k != BaselineKind::Word2vecAverage || table.is_some())
        .collect();
    if table.is_none() {
        warn!("no --pretrained table; skipping the word2vec baseline");
    }
    report.add_baselines(&test_c, &ctx, &kinds, cfg.seed)?;
    report.write_all(&out).with_context(|| format!("writing report to {}", out.display()))?;
    print!("{}", report.to_table());
    Ok(())
}
