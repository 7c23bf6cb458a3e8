//! Pipeline commands behind the `aird` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use aird::counterfeiter::MGModel;
use aird::data::{load_dataset, load_dataset_with_vocabulary, save_dataset, split_stratified, Dataset};
use aird::detector::CVModel;
use aird::evaluation::{retrieval_metrics, retrieval_runs, train_mp, EvalReport, NamedDetector, Protocol, RetrievalMetrics};
use aird::neural::Checkpoint;
use aird::synthbench::{confusability_report, generate};
use aird::training::{train, write_history, TrainMode};
use aird::vecindex::{load_index, save_index, IndexModel};

mod config;

pub use config::RunConfig;

/// A bad invocation or configuration; the binary exits with status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn dataset(&self) -> (PathBuf, PathBuf) {
        (self.file("dataset.emb"), self.file("dataset.tsv"))
    }

    pub fn train(&self) -> (PathBuf, PathBuf) {
        (self.file("train.emb"), self.file("train.tsv"))
    }

    pub fn test(&self) -> (PathBuf, PathBuf) {
        (self.file("test.emb"), self.file("test.tsv"))
    }

    pub fn index(&self) -> PathBuf {
        self.file("index.bin")
    }

    pub fn cv_checkpoint(&self, mode: TrainMode) -> PathBuf {
        self.file(&format!("{}.cv.ckpt", mode_name(mode)))
    }

    pub fn mg_checkpoint(&self) -> PathBuf {
        self.file("aird.mg.ckpt")
    }

    pub fn history(&self, mode: TrainMode) -> PathBuf {
        self.file(&format!("{}.history.tsv", mode_name(mode)))
    }

    pub fn mp_checkpoint(&self) -> PathBuf {
        self.file("mp.ckpt")
    }

    pub fn report_json(&self) -> PathBuf {
        self.file("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.file("report.txt")
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.txt")
    }
}

pub fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Adversarial => "aird",
        TrainMode::Nad => "nad",
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("missing {what}: {}", path.display())).into());
    }
    Ok(())
}

/// Loads the train split.
pub fn load_train(layout: &Layout) -> Result<Dataset> {
    let (emb, meta) = layout.train();
    require(&emb, "train embeddings")?;
    require(&meta, "train metadata")?;
    load_dataset(&emb, &meta).with_context(|| format!("loading {}", emb.display()))
}

/// Loads the test split with metadata ids aligned to `train`.
pub fn load_test(layout: &Layout, train: &Dataset) -> Result<Dataset> {
    let (emb, meta) = layout.test();
    require(&emb, "test embeddings")?;
    require(&meta, "test metadata")?;
    load_dataset_with_vocabulary(&emb, &meta, train.vocabulary().clone())
        .with_context(|| format!("loading {}", emb.display()))
}

pub fn load_index_file(layout: &Layout) -> Result<IndexModel> {
    let path = layout.index();
    require(&path, "index")?;
    load_index(&path).with_context(|| format!("loading {}", path.display()))
}

/// Generates a synthetic benchmark and its stratified split.
pub fn cmd_synth(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let bench = cfg.bench()?;
    let fraction = cfg.train_fraction()?;
    fs::create_dir_all(&layout.dir)?;
    let ds = generate(&bench)?;
    let split = split_stratified(&ds, fraction, cfg.seed()?)?;
    let (e, m) = layout.dataset();
    save_dataset(&ds, &e, &m)?;
    let (e, m) = layout.train();
    save_dataset(&split.train, &e, &m)?;
    let (e, m) = layout.test();
    save_dataset(&split.test, &e, &m)?;
    let median = confusability_report(&ds).median().unwrap_or(f64::NAN);
    Ok(format!(
        "packages {} entities {} train {} test {} median nearest cross-entity cosine {median:.4}\n",
        ds.len(),
        ds.vocabulary().len(),
        split.train.len(),
        split.test.len()
    ))
}

/// Builds the index over the train split and measures self-recall.
pub fn cmd_index(cfg: &RunConfig, layout: &Layout) -> Result<(IndexModel, RetrievalMetrics)> {
    let params = cfg.index_params()?;
    let probe = cfg.probe()?;
    let k = cfg.train_config()?.k;
    let train = load_train(layout)?;
    let idx = IndexModel::build(&train, &params)?;
    save_index(&idx, &layout.index())?;
    let runs = retrieval_runs(&idx, train.packages(), k, true, &probe)?;
    let metrics = retrieval_metrics(&runs, k)?;
    Ok((idx, metrics))
}

pub fn format_retrieval(m: &RetrievalMetrics) -> String {
    format!("MAP@{k} {:.4}\tP@{k} {:.4}\n", m.map_at_k, m.precision_at_k, k = m.k)
}

/// Trains the detector in the configured mode and writes its checkpoints.
pub fn cmd_train(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let tc = cfg.train_config()?;
    let train_ds = load_train(layout)?;
    let idx = load_index_file(layout)?;
    let out = train(&tc, &train_ds, &idx)?;
    out.cv
        .to_checkpoint(&out.encoder)
        .save(&layout.cv_checkpoint(tc.mode))?;
    if let Some(mg) = &out.mg {
        mg.to_checkpoint(&out.encoder).save(&layout.mg_checkpoint())?;
    }
    write_history(&layout.history(tc.mode), &out.history)?;
    Ok(format!(
        "{}: {} epochs, kept epoch {}\n",
        mode_name(tc.mode),
        out.history.len(),
        out.best_epoch
    ))
}

fn load_cv(path: &Path) -> Result<(CVModel, aird::counterfeiter::MetadataEncoder)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(CVModel::from_checkpoint(&ck)?)
}

/// Loads a counterfeiter checkpoint written by [`cmd_train`].
pub fn load_mg(path: &Path) -> Result<MGModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(MGModel::from_checkpoint(&ck)?.0)
}

/// Runs the evaluation protocol on the test split.
pub fn cmd_eval(cfg: &RunConfig, layout: &Layout) -> Result<EvalReport> {
    let tc = cfg.train_config()?;
    let mp_cfg = cfg.mp_config()?;
    let aird_path = layout.cv_checkpoint(TrainMode::Adversarial);
    require(&aird_path, "AIRD checkpoint")?;
    let train_ds = load_train(layout)?;
    let test_ds = load_test(layout, &train_ds)?;
    let idx = load_index_file(layout)?;
    let (aird_cv, aird_enc) = load_cv(&aird_path)?;
    let nad_path = layout.cv_checkpoint(TrainMode::Nad);
    let nad = if nad_path.exists() { Some(load_cv(&nad_path)?) } else { None };
    let mut detectors = vec![NamedDetector {
        name: "AIRD",
        cv: &aird_cv,
        encoder: &aird_enc,
    }];
    if let Some((cv, enc)) = &nad {
        detectors.push(NamedDetector {
            name: "NAD",
            cv,
            encoder: enc,
        });
    }
    let mp = train_mp(&train_ds, &mp_cfg)?;
    mp.to_checkpoint().save(&layout.mp_checkpoint())?;
    let protocol = Protocol {
        train: &train_ds,
        test: &test_ds,
        idx: &idx,
        k: tc.k,
        seed: cfg.seed()?,
        probe: tc.probe,
    };
    let (_, report) = protocol.run(&detectors, Some(&mp))?;
    fs::write(layout.report_json(), report.to_json())?;
    fs::write(layout.report_txt(), report.to_table())?;
    Ok(report)
}
