//! Command-line surface. `main.rs` parses arguments and maps errors to exit
//! codes; everything else lives here so it can be tested in-process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_synthetic_corpus, length_statistics, load_dataset, split_by_setting, Dataset, LengthStats, Setting,
    Summary,
};
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, format_reports, macro_f1, reports_to_json_lines, AblationReport, AblationRow, GroupBy,
};
use crate::io::write_atomic;
use crate::postprocess::{apply_overrides, build_override_table, PredictionSet};
use crate::tokenizer::{build_vocab, Tokenizer, WordPieceTokenizer, WordTokenizer};
use crate::training::{
    ensemble_predict, ensemble_predict_members, history_to_json_lines, train_with_progress, EnsembleSpec, RunConfig,
};

#[derive(Debug, Parser)]
#[command(name = "mwe-idiom", version, about = "Idiomatic MWE detection: train, predict, post-process, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset sizes and target-length statistics.
    Stats(StatsArgs),
    /// Write a synthetic train/dev corpus as task-format CSV files.
    Synth(SynthArgs),
    /// Train a model, keeping the best dev-epoch checkpoint.
    Train(TrainArgs),
    /// Predict labels with one checkpoint or a probability-averaged ensemble.
    Predict(PredictArgs),
    /// Score a prediction CSV against gold labels.
    Evaluate(EvaluateArgs),
    /// Run the objective ablation on synthetic corpora.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenizerKind {
    /// Word-level tokenizer with a vocabulary built from the data.
    Builtin,
    /// WordPiece tokenizer over an external `vocab.txt` (needs --vocab).
    Adapter,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Task-format CSV or TSV file.
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = TokenizerKind::Builtin)]
    pub tokenizer: TokenizerKind,
    /// WordPiece vocabulary for `--tokenizer adapter`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total rows over train and dev.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Probability that a row's cue word agrees with its label.
    #[arg(long, default_value_t = 1.0)]
    pub cue_strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// key=value config file; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Warm-start parameters and vocabulary from this checkpoint.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `setting` from the config file (picks the learning rate).
    #[arg(long)]
    pub setting: Option<Setting>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// One or more checkpoints; several are averaged.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Labeled training data; enables the single-label override rule.
    #[arg(long)]
    pub postprocess: Option<PathBuf>,
    /// Prediction CSV path. Sidecars are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Report per language or per setting as well as overall.
    #[arg(long)]
    pub group_by: Option<GroupBy>,
    /// Print JSON lines instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Corpus size per seed.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.85)]
    pub cue_strength: f64,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Base key=value config for every row.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// What a command did, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// key=value text of the effective config, when the command has one.
    pub config: Option<String>,
    pub datasets: Vec<String>,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    fn start(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config: None,
            datasets: Vec::new(),
            seed: None,
            checkpoint: None,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
        }
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now();
        write_atomic(path, &serde_json::to_vec_pretty(&self)?)
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut String) -> Result<()> {
    match cli.command {
        Command::Stats(a) => cmd_stats(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
    }
}

fn summary_line(s: &Summary) -> String {
    format!(
        "mean {:.2}  median {:.1}  max {}  p90 {}  (n = {})",
        s.mean, s.median, s.max, s.p90, s.count
    )
}

pub fn format_stats(d: &Dataset, stats: &LengthStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "rows: {}", d.len());
    for (lang, n) in d.count_by_language().into_iter().filter(|&(_, n)| n > 0) {
        let (zs, os) = split_by_setting(&d.filter(|i| i.language == lang));
        let _ = writeln!(s, "  {lang}: {n} (zero_shot {}, one_shot {})", zs.len(), os.len());
    }
    let _ = writeln!(s, "target length (tokens): {}", summary_line(&stats.length));
    match &stats.mwe_position {
        Some(p) => {
            let _ = writeln!(s, "first MWE token index: {}", summary_line(p));
        }
        None => {
            let _ = writeln!(s, "first MWE token index: MWE never found");
        }
    }
    s
}

pub fn cmd_stats(a: &StatsArgs, out: &mut String) -> Result<()> {
    let d = load_dataset(&a.data, false)?;
    let tokenizer: Box<dyn Tokenizer> = match a.tokenizer {
        TokenizerKind::Builtin => Box::new(WordTokenizer::new(build_vocab(&d, 1)?)),
        TokenizerKind::Adapter => {
            let vocab = a.vocab.as_ref().ok_or_else(|| Error::InvalidConfig {
                key: "vocab".into(),
                message: "--tokenizer adapter needs --vocab".into(),
            })?;
            Box::new(WordPieceTokenizer::load(vocab)?)
        }
    };
    let stats = length_statistics(&d, tokenizer.as_ref())?;
    out.push_str(&format_stats(&d, &stats));
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, out: &mut String) -> Result<()> {
    create_dir(&a.out_dir)?;
    let corpus = generate_synthetic_corpus(a.n, a.cue_strength, a.seed);
    let train = a.out_dir.join("train.csv");
    let dev = a.out_dir.join("dev.csv");
    corpus.train.save(&train)?;
    corpus.dev.save(&dev)?;
    let _ = writeln!(out, "wrote {} ({} rows)", display(&train), corpus.train.len());
    let _ = writeln!(out, "wrote {} ({} rows)", display(&dev), corpus.dev.len());
    Ok(())
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut String) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(setting) = a.setting {
        cfg.train.setting = setting;
    }
    cfg.validate()?;
    let train = load_dataset(&a.train, true)?;
    let dev = load_dataset(&a.dev, true)?;
    let init = a.init_checkpoint.as_ref().map(Checkpoint::<f32>::load).transpose()?;
    create_dir(&a.out_dir)?;

    let outcome = train_with_progress(&train, &dev, &cfg, init.as_ref(), |r| {
        eprintln!(
            "epoch {:>3}  ce {:.4}  kl {:.4}  adv {:.4}  con {:.4}  dev_f1 {:.4}  lr {:.3e}",
            r.epoch, r.ce, r.kl, r.adversarial_ce, r.contrastive, r.dev_macro_f1, r.lr
        );
    })?;

    let ckpt = a.out_dir.join("model.ckpt");
    let history = a.out_dir.join("history.jsonl");
    let config = a.out_dir.join("config.txt");
    outcome.checkpoint.save(&ckpt)?;
    write_atomic(&history, history_to_json_lines(&outcome.history)?.as_bytes())?;
    let mut effective = cfg.clone();
    effective.encoder = outcome.checkpoint.encoder.config.clone();
    effective.save(&config)?;

    let _ = writeln!(
        out,
        "best epoch {} dev macro F1 {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_dev_macro_f1,
        display(&ckpt)
    );
    manifest.config = Some(effective.to_text());
    manifest.datasets = vec![train.provenance, dev.provenance];
    if let Some(p) = &a.init_checkpoint {
        manifest.datasets.push(format!("init:{}", display(p)));
    }
    manifest.seed = Some(cfg.train.seed);
    manifest.checkpoint = Some(display(&ckpt));
    manifest.outputs = vec![display(&ckpt), display(&history), display(&config)];
    manifest.finish(&a.out_dir.join("manifest.json"))
}

pub fn cmd_predict(a: &PredictArgs, out: &mut String) -> Result<()> {
    let mut manifest = RunManifest::start("predict");
    let data = load_dataset(&a.data, false)?;
    let spec = EnsembleSpec::new(a.checkpoints.clone());
    let mut preds = ensemble_predict(&spec, &data)?;
    let mut outputs = vec![display(&a.out)];
    let mut datasets = vec![data.provenance.clone()];
    let overrides_path = with_suffix(&a.out, ".overrides.tsv");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    if let Some(train_path) = &a.postprocess {
        let train = load_dataset(train_path, true)?;
        let table = build_override_table(&train);
        preds = apply_overrides(&preds, &table);
        write_atomic(&overrides_path, table.to_text().as_bytes())?;
        outputs.push(display(&overrides_path));
        datasets.push(train.provenance);
    }
    write_atomic(&a.out, &preds.to_csv()?)?;
    let sidecar = with_suffix(&a.out, ".probs.tsv");
    write_atomic(&sidecar, preds.to_sidecar_tsv().as_bytes())?;
    outputs.push(display(&sidecar));
    let overridden = preds.predictions.iter().filter(|p| p.overridden).count();
    let _ = writeln!(
        out,
        "{} predictions from {} model(s), {} overridden; wrote {}",
        preds.len(),
        a.checkpoints.len(),
        overridden,
        display(&a.out)
    );
    manifest.datasets = datasets;
    manifest.checkpoint = Some(a.checkpoints.iter().map(|p| display(p)).collect::<Vec<_>>().join(","));
    manifest.outputs = outputs;
    manifest.finish(&with_suffix(&a.out, ".manifest.json"))
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut String) -> Result<()> {
    let preds = PredictionSet::read_csv(&a.pred)?;
    let gold = load_dataset(&a.gold, true)?;
    let reports = evaluate(&preds, &gold, a.group_by)?;
    if a.json {
        out.push_str(&reports_to_json_lines(&reports)?);
    } else {
        out.push_str(&format_reports(&reports));
    }
    Ok(())
}

/// Ablation row names, in table order.
pub const ABLATION_ROWS: [&str; 6] = [
    "baseline",
    "+fgm",
    "+rdrop",
    "+rdrop+postprocess",
    "+aeda",
    "+contrastive",
];

fn row_config(base: &RunConfig, row: &str, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train.seed = seed;
    match row {
        "+fgm" => cfg.train.fgm_epsilon = 1.0,
        "+rdrop" | "+rdrop+postprocess" => cfg.train.rdrop_alpha = 1.0,
        "+aeda" => cfg.train.aeda_enabled = true,
        "+contrastive" => cfg.train.contrastive_weight = 0.1,
        _ => {}
    }
    cfg
}

/// Zero-shot then warm-started one-shot dev Macro F1 for one row and seed.
/// Rows that end in `+postprocess` apply the override rule built from all
/// training data to both columns.
pub fn ablation_cell(base: &RunConfig, row: &str, n: usize, cue_strength: f64, seed: u64) -> Result<(f64, f64)> {
    let corpus = generate_synthetic_corpus(n, cue_strength, seed);
    let (train_zs, _) = split_by_setting(&corpus.train);
    let (dev_zs, dev_os) = split_by_setting(&corpus.dev);
    let mut cfg = row_config(base, row, seed);
    cfg.train.setting = Setting::ZeroShot;
    let zs = train_with_progress::<f32>(&train_zs, &dev_zs, &cfg, None, |_| {})?;
    cfg.train.setting = Setting::OneShot;
    let os = train_with_progress::<f32>(&corpus.train, &dev_os, &cfg, Some(&zs.checkpoint), |_| {})?;
    if !row.ends_with("+postprocess") {
        return Ok((zs.best_dev_macro_f1, os.best_dev_macro_f1));
    }
    let table = build_override_table(&corpus.train);
    let score = |ck: &Checkpoint<f32>, dev: &Dataset| -> Result<f64> {
        let preds = apply_overrides(&ensemble_predict_members(std::slice::from_ref(ck), dev)?, &table);
        let gold: Vec<_> = dev.iter().map(|i| i.label.expect("synthetic rows are labeled")).collect();
        macro_f1(&gold, &preds.labels())
    };
    Ok((score(&zs.checkpoint, &dev_zs)?, score(&os.checkpoint, &dev_os)?))
}

pub fn run_ablation(
    base: &RunConfig,
    rows: &[&str],
    n: usize,
    cue_strength: f64,
    seeds: impl IntoIterator<Item = u64> + Clone,
    mut progress: impl FnMut(&str, u64, (f64, f64)),
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &row in rows {
        let mut r = AblationRow {
            name: row.to_string(),
            zero_shot: Vec::new(),
            one_shot: Vec::new(),
        };
        for seed in seeds.clone() {
            let (z, o) = ablation_cell(base, row, n, cue_strength, seed)?;
            progress(row, seed, (z, o));
            r.zero_shot.push(z);
            r.one_shot.push(o);
        }
        report.rows.push(r);
    }
    if let (Some(b), Some(r)) = (report.row("baseline"), report.row("+rdrop")) {
        let wins = b.zero_shot.iter().zip(&r.zero_shot).filter(|(b, r)| r >= b).count();
        report.notes.push(format!(
            "+rdrop >= baseline (zero-shot) in {wins}/{} seeds",
            b.zero_shot.len()
        ));
    }
    if let (Some(r), Some(p)) = (report.row("+rdrop"), report.row("+rdrop+postprocess")) {
        let ok = r.one_shot.iter().zip(&p.one_shot).filter(|(r, p)| p >= r).count();
        report.notes.push(format!(
            "+rdrop+postprocess >= +rdrop (one-shot) in {ok}/{} seeds",
            r.one_shot.len()
        ));
    }
    Ok(report)
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut String) -> Result<()> {
    let mut manifest = RunManifest::start("ablate");
    let base = load_run_config(a.config.as_deref())?;
    create_dir(&a.out_dir)?;
    let seeds = a.seed..a.seed + a.seeds;
    let report = run_ablation(&base, &ABLATION_ROWS, a.n, a.cue_strength, seeds, |row, seed, (z, o)| {
        eprintln!("{row:<20} seed {seed}: zero-shot {z:.4}  one-shot {o:.4}");
    })?;
    let text = report.to_text();
    let table = a.out_dir.join("ablation.txt");
    let lines = a.out_dir.join("ablation.jsonl");
    write_atomic(&table, text.as_bytes())?;
    write_atomic(&lines, report.to_json_lines()?.as_bytes())?;
    out.push_str(&text);
    manifest.config = Some(base.to_text());
    manifest.datasets = vec![format!("synthetic n={} cue_strength={}", a.n, a.cue_strength)];
    manifest.seed = Some(a.seed);
    manifest.outputs = vec![display(&table), display(&lines)];
    manifest.finish(&a.out_dir.join("manifest.json"))
}
