//! Subcommand implementations. Each writes its human-readable report to
//! `out` and returns whether the run succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dapa_core::data::{generate_synthetic_corpus, load_corpus, Corpus, Split, SyntheticSpec};
use dapa_core::gradcheck::{run_suite, SUITE_SEED};
use dapa_core::metrics::{predict_corpus, predictions_csv, EvalReport, SessionPrediction};
use dapa_core::model::UnknownDomainPolicy;
use dapa_core::train::{checkpoint_scalar, load_inference_model, Trainer};
use dapa_core::{DapaError, DapaModel, Result, Scalar};

use crate::config::{load_run_config, to_toml, LoadedConfig, Precision};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DapaError + '_ {
    move |source| DapaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(io_err(Path::new("<stdout>")))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => { say($out, format_args!($($arg)*)) };
}

pub struct SynthArgs {
    pub spec: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<bool> {
    let text = fs::read_to_string(&args.spec).map_err(io_err(&args.spec))?;
    let mut spec: SyntheticSpec = toml::from_str(&text)
        .map_err(|e| DapaError::Config(format!("{}: {e}", args.spec.display())))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let summary = generate_synthetic_corpus(&spec, &args.out)?;
    say!(out, "seed: {}", spec.seed)?;
    say!(out, "manifest: {}", summary.manifest.display())?;
    say!(out, "domains: {}", summary.domains)?;
    say!(out, "sessions: {}", summary.sessions)?;
    say!(out, "frames: {}", summary.frames)?;
    say!(out, "latent correlation: {:.4}", summary.latent_correlation)?;
    Ok(true)
}

#[derive(Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub precision: Option<Precision>,
    pub eval_train: bool,
    pub target_train_ccc: Option<f64>,
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<bool> {
    let LoadedConfig { mut config, d_in_given } = match &args.config {
        Some(path) => load_run_config(path)?,
        None => LoadedConfig::default(),
    };
    let t = &mut config.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.lr_peak = v;
    }
    if let Some(v) = args.batch {
        t.batch_train = v;
    }
    if args.eval_train {
        t.eval_train = true;
    }
    if let Some(v) = args.target_train_ccc {
        t.target_train_ccc = Some(v);
        t.eval_train = true;
    }
    if let Some(p) = args.precision {
        config.data.precision = p;
    }
    if let Some(p) = &args.data {
        config.data.manifest = Some(p.clone());
    }
    if let Some(p) = &args.out {
        config.data.out = Some(p.clone());
    }
    let manifest = config
        .data
        .manifest
        .clone()
        .ok_or_else(|| DapaError::Usage("no corpus given: pass --data or set data.manifest".into()))?;
    let out_dir = config
        .data
        .out
        .clone()
        .ok_or_else(|| DapaError::Usage("no output directory: pass --out or set data.out".into()))?;

    let corpus = load_corpus(&manifest)?;
    if !d_in_given {
        if let Some(d) = corpus.feature_dim() {
            config.model.d_in = d;
        }
    }
    config.model.validate()?;
    config.train.validate()?;

    let echo = to_toml(&config)?;
    say!(out, "seed: {}", config.train.seed)?;
    say!(out, "effective configuration:\n{echo}")?;
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let echo_path = out_dir.join("config.toml");
    fs::write(&echo_path, &echo).map_err(io_err(&echo_path))?;

    let trained = match config.data.precision {
        Precision::F32 => fit::<f32>(&config, &corpus, args, &out_dir)?,
        Precision::F64 => fit::<f64>(&config, &corpus, args, &out_dir)?,
    };
    say!(out, "epochs: {}", trained.epochs)?;
    if let Some(loss) = trained.last_loss {
        say!(out, "final train loss: {loss:.6}")?;
    }
    if let Some(c) = trained.train_ccc {
        say!(out, "final train CCC: {c:.4}")?;
    }
    if let (Some(c), Some(e)) = (trained.best_val, trained.best_epoch) {
        say!(out, "best validation CCC: {c:.4} (epoch {e})")?;
    }
    say!(out, "checkpoint: {}", out_dir.join("best").display())?;
    Ok(true)
}

struct TrainSummary {
    epochs: usize,
    last_loss: Option<f64>,
    train_ccc: Option<f64>,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
}

fn fit<T: Scalar>(
    config: &crate::config::RunConfigFile,
    corpus: &Corpus,
    args: &TrainArgs,
    out_dir: &Path,
) -> Result<TrainSummary> {
    let mut trainer = match &args.resume {
        Some(dir) => {
            let mut t = Trainer::<T>::load(dir)?;
            if let Some(e) = args.epochs {
                t.cfg.epochs = e;
            }
            log::info!("resuming from {} at epoch {}", dir.display(), t.epoch);
            t
        }
        None => {
            let model = DapaModel::<T>::new(config.model.clone(), &corpus.domains(), config.train.seed)?;
            log::info!("{} parameters over {} domains", model.num_params(), model.domains().len());
            Trainer::new(model, config.train.clone())?
        }
    };
    trainer.fit(corpus, None, Some(out_dir))?;
    let last = trainer.history.last();
    Ok(TrainSummary {
        epochs: trainer.epoch,
        last_loss: last.map(|r| r.train_loss),
        train_ccc: last.and_then(|r| r.train_ccc),
        best_val: trainer.best_val_ccc,
        best_epoch: trainer.best_epoch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

impl SplitChoice {
    fn select(self, corpus: Corpus) -> Corpus {
        match self {
            SplitChoice::All => corpus,
            SplitChoice::Train => corpus.split(Split::Train),
            SplitChoice::Val => corpus.split(Split::Val),
            SplitChoice::Test => corpus.split(Split::Test),
        }
    }
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: PathBuf,
    pub dataset_map: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: SplitChoice,
    pub unknown_domain: Option<UnknownDomainPolicy>,
    pub labels_as_predictions: bool,
}

/// `domain,dataset` rows; a header row is optional.
pub fn read_dataset_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let fmt = |message: String| DapaError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fmt(e.to_string()))?;
    let mut map = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        if rec.len() != 2 {
            return Err(fmt(format!("line {}: expected 'domain,dataset', got {} fields", i + 1, rec.len())));
        }
        if i == 0 && &rec[0] == "domain" && &rec[1] == "dataset" {
            continue;
        }
        if map.insert(rec[0].to_string(), rec[1].to_string()).is_some() {
            return Err(fmt(format!("line {}: domain '{}' mapped twice", i + 1, &rec[0])));
        }
    }
    Ok(map)
}

fn predictions<T: Scalar>(
    checkpoint: &Path,
    corpus: &Corpus,
    dataset_of: &(dyn Fn(&dapa_core::data::Session) -> String + Sync),
    policy: Option<UnknownDomainPolicy>,
) -> Result<(Vec<SessionPrediction>, u64)> {
    let (mut model, cfg) = load_inference_model::<T>(checkpoint)?;
    if let Some(p) = policy {
        model.config.unknown_domain = p;
    }
    let preds = predict_corpus(&model, corpus, &cfg.window, dataset_of).map_err(|e| match e {
        DapaError::Lookup(m) => DapaError::Lookup(format!("{m} (or pass --unknown-domain mean-prompt)")),
        other => other,
    })?;
    Ok((preds, cfg.seed))
}

fn checkpoint_predictions(
    checkpoint: &Path,
    corpus: &Corpus,
    dataset_of: &(dyn Fn(&dapa_core::data::Session) -> String + Sync),
    policy: Option<UnknownDomainPolicy>,
) -> Result<(Vec<SessionPrediction>, u64)> {
    match checkpoint_scalar(checkpoint)?.as_str() {
        "f64" => predictions::<f64>(checkpoint, corpus, dataset_of, policy),
        _ => predictions::<f32>(checkpoint, corpus, dataset_of, policy),
    }
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<bool> {
    let corpus = args.split.select(load_corpus(&args.data)?);
    if corpus.is_empty() {
        return Err(DapaError::Usage(format!("no sessions in split {:?}", args.split)));
    }
    let map = args.dataset_map.as_deref().map(read_dataset_map).transpose()?;
    if let Some(m) = &map {
        if let Some(d) = corpus.domains().into_iter().find(|d| !m.contains_key(d)) {
            return Err(DapaError::Lookup(format!("dataset map has no entry for domain '{d}'")));
        }
    }
    let dataset_of = |s: &dapa_core::data::Session| match &map {
        Some(m) => m[&s.domain].clone(),
        None => s.domain.clone(),
    };
    let (preds, seed, name) = if args.labels_as_predictions {
        let preds = corpus
            .sessions
            .iter()
            .map(|s| SessionPrediction {
                session_id: s.id.clone(),
                dataset: dataset_of(s),
                prediction: s.labels.clone(),
                truth: s.labels.clone(),
            })
            .collect();
        (preds, None, "labels".to_string())
    } else {
        let dir = args
            .checkpoint
            .as_deref()
            .ok_or_else(|| DapaError::Usage("--checkpoint is required".into()))?;
        let (preds, seed) = checkpoint_predictions(dir, &corpus, &dataset_of, args.unknown_domain)?;
        (preds, Some(seed), dir.display().to_string())
    };
    let report = EvalReport::from_predictions(&name, &preds)?;
    if let Some(seed) = seed {
        say!(out, "seed: {seed}")?;
    }
    write!(out, "{}", report.to_text()).map_err(io_err(Path::new("<stdout>")))?;
    let dir = args
        .out
        .clone()
        .or_else(|| args.checkpoint.as_ref().map(|c| c.join("eval")));
    if let Some(dir) = dir {
        report.write_files(&dir)?;
        say!(out, "report files: {}", dir.display())?;
    }
    Ok(true)
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub split: SplitChoice,
    pub unknown_domain: Option<UnknownDomainPolicy>,
}

pub fn predict(args: &PredictArgs, out: &mut dyn Write) -> Result<bool> {
    let corpus = args.split.select(load_corpus(&args.data)?);
    let (preds, seed) =
        checkpoint_predictions(&args.checkpoint, &corpus, &|s| s.domain.clone(), args.unknown_domain)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&args.out, predictions_csv(&preds)).map_err(io_err(&args.out))?;
    say!(out, "seed: {seed}")?;
    say!(
        out,
        "wrote {} frames of {} sessions to {}",
        preds.iter().map(|p| p.prediction.len()).sum::<usize>(),
        preds.len(),
        args.out.display()
    )?;
    Ok(true)
}

pub fn gradcheck(full: bool, out: &mut dyn Write) -> Result<bool> {
    let results = run_suite(full)?;
    say!(out, "seed: {SUITE_SEED}")?;
    say!(out, "{:<26} {:>12} {:>10} {:>8}", "block", "max rel err", "coords", "result")?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        say!(
            out,
            "{:<26} {:>12.3e} {:>10} {:>8}",
            r.block,
            r.check.max_rel_error,
            r.check.coordinates,
            verdict
        )?;
        if !r.passed() {
            failed.push(r.block.as_str());
        }
    }
    if failed.is_empty() {
        say!(out, "all {} blocks below {:e}", results.len(), results[0].tolerance)?;
        Ok(true)
    } else {
        say!(out, "failing blocks: {}", failed.join(", "))?;
        Ok(false)
    }
}
