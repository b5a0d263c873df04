//! Pipeline stages over one output directory.
//!
//! ```text
//! events.jsonl rejects.jsonl features.csv        ingest
//! corpus.jsonl                                   fetch-text
//! states/<arch>/ embeddings/<arch>.bin           embed
//! datasets/h<N>_<model>.csv                      build-dataset
//! models/h<N>_<model>.json                       train
//! predictions/h<N>_<model>.csv index.json        evaluate
//! report.csv report.txt figures/                 report
//! run_manifest.json                              every stage
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use floodlens::dataset::{self, DatasetSplit};
use floodlens::evalmetrics::{self, EvalRun};
use floodlens::featstat::{self, GridYearFeatures};
use floodlens::ingest::{self, EventTable, IngestConfig};
use floodlens::model::{self, TrainedClassifier};
use floodlens::textcorpus::mock::{MockPages, MockWikiServer};
use floodlens::textcorpus::wiki::WikiClient;
use floodlens::textcorpus::{self, CorpusCache};
use floodlens::textembed::store::{self, StateSidecar};
use floodlens::textembed::{self, Architecture, EmbeddingTable, Encoder, TrainedState};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    FetchText,
    Embed,
    BuildDataset,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::FetchText,
        Stage::Embed,
        Stage::BuildDataset,
        Stage::Train,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::FetchText => "fetch-text",
            Stage::Embed => "embed",
            Stage::BuildDataset => "build-dataset",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

/// A stage was asked to run before the stage that produces its input.
#[derive(Debug)]
pub struct StageDependency {
    pub stage: &'static str,
    pub missing: PathBuf,
    pub producer: &'static str,
}

impl fmt::Display for StageDependency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "`{}` needs {}, which does not exist; run `floodlens {}` first (or `floodlens all`)",
            self.stage,
            self.missing.display(),
            self.producer
        )
    }
}

impl std::error::Error for StageDependency {}

/// Another pipeline holds the output directory.
#[derive(Debug)]
pub struct LockHeld(pub PathBuf);

impl fmt::Display for LockHeld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "output directory is locked by {}; another run is in progress, or remove the file if it is stale",
            self.0.display()
        )
    }
}

impl std::error::Error for LockHeld {}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".floodlens.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).ok();
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LockHeld(path).into()),
            Err(e) => Err(io_err(&path, e).into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Process exit status for an error: 1 for user and configuration
/// problems, 2 for the environment (files, network, weights, locks).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<StageDependency>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<LockHeld>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<floodlens::Error>() {
            use floodlens::Error as E;
            return match e {
                E::Io { .. }
                | E::Environment(_)
                | E::Transient(_)
                | E::Protocol(_)
                | E::Artifact { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

pub const MODEL_BASELINE: &str = "baseline";
pub const MODEL_STATISTICAL: &str = "statistical";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndexEntry {
    pub model: String,
    pub horizon: u32,
    pub feature_count: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub stages: Vec<String>,
    pub backbone_checksum: Option<String>,
    /// Output-relative path → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub struct Pipeline {
    pub config: RunConfig,
    out: PathBuf,
    stages_run: Vec<String>,
    backbone_checksum: Option<String>,
    _lock: Lock,
}

fn io_err(path: &Path, source: std::io::Error) -> floodlens::Error {
    floodlens::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        let name = e.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || name.ends_with(".tmp") || name == "run_manifest.json" {
            continue;
        }
        if p.is_dir() {
            walk(&p, root, out)?;
        } else {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

impl Pipeline {
    /// Validates the config, creates the output directory and takes its lock.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = config.paths.output.clone();
        fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let lock = Lock::acquire(&out)?;
        Ok(Self {
            config,
            out,
            stages_run: Vec::new(),
            backbone_checksum: None,
            _lock: lock,
        })
    }

    pub fn output(&self) -> &Path {
        &self.out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, stage: Stage, rel: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(StageDependency {
                stage: stage.name(),
                missing: p,
                producer: producer.name(),
            }
            .into())
        }
    }

    fn model_names(&self) -> Vec<String> {
        std::iter::once(MODEL_STATISTICAL.to_string())
            .chain(
                self.config
                    .architectures
                    .iter()
                    .map(|a| a.as_str().to_string()),
            )
            .collect()
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        info!("stage {}", stage.name());
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::FetchText => self.fetch_text(),
            Stage::Embed => self.embed(),
            Stage::BuildDataset => self.build_dataset(),
            Stage::Train => self.train(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
        .with_context(|| format!("stage {} failed", stage.name()))?;
        self.stages_run.push(stage.name().to_string());
        self.write_manifest()
    }

    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.path("run_manifest.json");
        let mut stages = Vec::new();
        let mut backbone = None;
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(prev) = serde_json::from_str::<RunManifest>(&text) {
                stages = prev.stages;
                backbone = prev.backbone_checksum;
            }
        }
        for s in &self.stages_run {
            if !stages.contains(s) {
                stages.push(s.clone());
            }
        }
        let mut artifacts = BTreeMap::new();
        walk(&self.out, &self.out, &mut artifacts)?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            stages,
            backbone_checksum: self.backbone_checksum.clone().or(backbone),
            artifacts,
        };
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    fn load_events(&self, stage: Stage) -> Result<EventTable> {
        let p = self.require(stage, "events.jsonl", Stage::Ingest)?;
        Ok(EventTable::read_jsonl(&p)?)
    }

    fn ingest(&mut self) -> Result<()> {
        let window = self.config.study_window()?;
        let (table, rejects) = ingest::parse_events(
            &self.config.paths.disasters,
            self.config.paths.damage.as_deref(),
            &IngestConfig { window },
        )?;
        table.write_jsonl(&self.path("events.jsonl"))?;
        rejects.write_jsonl(&self.path("rejects.jsonl"))?;
        let grids = ingest::unique_grids(&table);
        let rows = featstat::feature_matrix(&table, &grids, window);
        let fpath = self.path("features.csv");
        let tmp = self.path("features.csv.tmp");
        featstat::write_csv(&rows, &tmp)?;
        fs::rename(&tmp, &fpath)?;
        info!(
            "ingest: {} events, {} rejected rows, {} grids, {} with at least {} floods",
            table.len(),
            rejects.len(),
            grids.len(),
            dataset::filter_grids(&table).len(),
            dataset::MIN_GRID_FLOODS
        );
        Ok(())
    }

    fn cache_path(&self, key_source: &[u8]) -> PathBuf {
        let key = hex::encode(Sha256::digest(key_source));
        self.config
            .paths
            .cache
            .join(format!("corpus-{}.jsonl", &key[..16]))
    }

    fn fetch_text(&mut self) -> Result<()> {
        let table = self.load_events(Stage::FetchText)?;
        let grids = ingest::unique_grids(&table);
        let cache_dir = &self.config.paths.cache;
        fs::create_dir_all(cache_dir).map_err(|e| io_err(cache_dir, e))?;

        let mut server = None;
        let (base, cache_path) = match &self.config.wiki.mock_pages {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
                let s = MockWikiServer::start(MockPages::load(p)?)?;
                let base = s.base_url().to_string();
                server = Some(s);
                (base, self.cache_path(&bytes))
            }
            None => {
                let base = self.config.wiki.base_url.clone();
                let key = base.clone().into_bytes();
                (base, self.cache_path(&key))
            }
        };
        let mut client = WikiClient::new(self.config.client_config(&base))?;
        let cache = CorpusCache::load(&cache_path)?;
        let cache =
            textcorpus::build_corpus(&table, &grids, &mut client, cache, Some(&cache_path))?;
        drop(server);

        let log = cache.manifest.clone();
        let mut corpus = CorpusCache {
            entries: cache
                .entries
                .into_iter()
                .filter(|(g, _)| grids.contains(g))
                .collect(),
            manifest: log.clone(),
        };
        corpus.manifest.failed.retain(|g| grids.contains(g));
        corpus.save(&self.path("corpus.jsonl"))?;
        info!(
            "fetch-text: {} grids, {} with text, {} from cache, {} HTTP requests, {} failed",
            corpus.len(),
            corpus.coverage(),
            log.cache_hits,
            log.http_requests,
            corpus.manifest.failed.len()
        );
        Ok(())
    }

    fn backbone(&mut self) -> Result<Encoder> {
        let enc = match &self.config.paths.encoder {
            Some(dir) => Encoder::load(dir)?,
            None => Encoder::tiny(self.config.seeds.encoder),
        };
        self.backbone_checksum = Some(enc.checksum());
        Ok(enc)
    }

    fn embed(&mut self) -> Result<()> {
        let table = self.load_events(Stage::Embed)?;
        let corpus_path = self.require(Stage::Embed, "corpus.jsonl", Stage::FetchText)?;
        let corpus = CorpusCache::load(&corpus_path)?;
        let backbone = self.backbone()?;
        let labelled: BTreeSet<_> = corpus.entries.keys().copied().collect();
        let labels = textembed::label_floodiness(&table, &labelled);
        let filtered = dataset::filter_grids(&table);
        if filtered.is_empty() {
            return Err(
                floodlens::Error::Degenerate("no grid has at least two floods".into()).into(),
            );
        }
        for &arch in &self.config.architectures.clone() {
            let tc = self.config.train_config(arch);
            let (state, classifier, log) = match arch {
                Architecture::PretrainedAvg => (TrainedState::Pretrained, None, Default::default()),
                Architecture::FinetunedAvg => {
                    let ft = textembed::finetune_classifier(&backbone, &corpus, &labels, &tc)?;
                    (
                        TrainedState::Finetuned(Box::new(ft.encoder)),
                        Some(ft.classifier),
                        ft.log,
                    )
                }
                Architecture::TransferHead => {
                    let (head, log) =
                        textembed::train_transfer_head(&backbone, &corpus, &labels, &tc)?;
                    (TrainedState::Head(head), None, log)
                }
            };
            let state_dir = self.path(&format!("states/{arch}"));
            if state_dir.exists() {
                fs::remove_dir_all(&state_dir).map_err(|e| io_err(&state_dir, e))?;
            }
            let sidecar = StateSidecar {
                architecture: arch,
                epochs: if arch == Architecture::PretrainedAvg {
                    0
                } else {
                    tc.epochs
                },
                seed: tc.seed,
                backbone_checksum: backbone.checksum(),
                mask_policy: tc.mask_policy,
                sigmoid_placement: tc.sigmoid_placement,
                metrics: log,
            };
            store::save_state(&state_dir, &state, classifier.as_ref(), &sidecar)?;
            let emb = textembed::embed_corpus(
                &backbone,
                &corpus,
                &filtered,
                &state,
                tc.mask_policy,
                tc.seed,
            )?;
            emb.write(&self.path(&format!("embeddings/{arch}.bin")))?;
            info!(
                "embed: {arch} → {} grids × {} dims",
                emb.len(),
                emb.dimension
            );
        }
        Ok(())
    }

    fn dataset_rel(horizon: u32, model: &str) -> String {
        format!("datasets/h{horizon}_{model}.csv")
    }

    fn build_dataset(&mut self) -> Result<()> {
        let table = self.load_events(Stage::BuildDataset)?;
        let fpath = self.require(Stage::BuildDataset, "features.csv", Stage::Ingest)?;
        let features: Vec<GridYearFeatures> = featstat::read_csv(&fpath)?;
        let mut embeddings = Vec::new();
        for &arch in &self.config.architectures {
            let p = self.require(
                Stage::BuildDataset,
                &format!("embeddings/{arch}.bin"),
                Stage::Embed,
            )?;
            embeddings.push((arch, EmbeddingTable::read(&p)?));
        }
        let dcfg = self.config.dataset_config()?;
        fs::create_dir_all(self.path("datasets"))?;
        for &n in &self.config.horizons {
            let seed = self.config.seeds.split;
            let stat = dataset::assemble(&table, &features, None, n, seed, &dcfg)?;
            stat.write(&self.path(&Self::dataset_rel(n, MODEL_STATISTICAL)))?;
            for (arch, emb) in &embeddings {
                let split = dataset::assemble(&table, &features, Some(emb), n, seed, &dcfg)?;
                split.write(&self.path(&Self::dataset_rel(n, arch.as_str())))?;
            }
            let m = stat.manifest();
            info!(
                "build-dataset: horizon {n}: {} train / {} test examples, {} grids, {:.1}% positive",
                m.n_train,
                m.n_test,
                m.grids,
                100.0 * (m.train_positives + m.test_positives) as f64 / (m.n_train + m.n_test) as f64
            );
        }
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let search = self.config.search_config();
        fs::create_dir_all(self.path("models"))?;
        for &n in &self.config.horizons {
            for model in self.model_names() {
                let p = self.require(
                    Stage::Train,
                    &Self::dataset_rel(n, &model),
                    Stage::BuildDataset,
                )?;
                let split = DatasetSplit::read(&p)?;
                let x = split.matrix(&split.train);
                let y = DatasetSplit::labels(&split.train);
                let clf = model::train(
                    &x,
                    &y,
                    &split.selected_names(),
                    &search,
                    self.config.seeds.split,
                )?;
                clf.save(&self.path(&format!("models/h{n}_{model}.json")))?;
                info!(
                    "train: horizon {n} {model}: cv ROCAUC {:.4} with {:?}",
                    clf.cv_auc, clf.best_hyperparameters
                );
            }
        }
        Ok(())
    }

    fn write_predictions(
        path: &Path,
        examples: &[dataset::LabeledExample],
        scores: &[f64],
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["grid", "year", "label", "score"])?;
        for (e, s) in examples.iter().zip(scores) {
            w.write_record([
                e.grid.to_string(),
                e.year.to_string(),
                e.label.to_string(),
                format!("{s}"),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        write_atomic(path, &bytes)
    }

    fn evaluate(&mut self) -> Result<()> {
        let mut index = Vec::new();
        for &n in &self.config.horizons {
            let stat_path = self.require(
                Stage::Evaluate,
                &Self::dataset_rel(n, MODEL_STATISTICAL),
                Stage::BuildDataset,
            )?;
            let stat = DatasetSplit::read(&stat_path)?;
            let rows: Vec<Vec<f64>> = stat.test.iter().map(|e| e.features.clone()).collect();
            let base: Vec<f64> = model::baseline_predict(&rows)
                .into_iter()
                .map(f64::from)
                .collect();
            let file = format!("predictions/h{n}_{MODEL_BASELINE}.csv");
            Self::write_predictions(&self.path(&file), &stat.test, &base)?;
            index.push(PredictionIndexEntry {
                model: MODEL_BASELINE.into(),
                horizon: n,
                feature_count: 1,
                file,
            });
            for model in self.model_names() {
                let split_path = self.require(
                    Stage::Evaluate,
                    &Self::dataset_rel(n, &model),
                    Stage::BuildDataset,
                )?;
                let split = DatasetSplit::read(&split_path)?;
                let mpath = self.require(
                    Stage::Evaluate,
                    &format!("models/h{n}_{model}.json"),
                    Stage::Train,
                )?;
                let clf = TrainedClassifier::load(&mpath)?;
                let scores =
                    clf.predict_proba(&split.selected_names(), &split.matrix(&split.test))?;
                let file = format!("predictions/h{n}_{model}.csv");
                Self::write_predictions(&self.path(&file), &split.test, &scores)?;
                index.push(PredictionIndexEntry {
                    model,
                    horizon: n,
                    feature_count: split.feature_count(),
                    file,
                });
            }
        }
        write_atomic(
            &self.path("predictions/index.json"),
            serde_json::to_string_pretty(&index)?.as_bytes(),
        )
    }

    fn read_predictions(path: &Path) -> Result<(Vec<f64>, Vec<u8>)> {
        let mut r = csv::Reader::from_reader(File::open(path).map_err(|e| io_err(path, e))?);
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let bad = || floodlens::Error::Schema {
                path: path.to_path_buf(),
                message: "malformed prediction row".into(),
            };
            labels.push(rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?);
            scores.push(rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?);
        }
        Ok((scores, labels))
    }

    fn report(&mut self) -> Result<()> {
        let ipath = self.require(Stage::Report, "predictions/index.json", Stage::Evaluate)?;
        let index: Vec<PredictionIndexEntry> = serde_json::from_str(&fs::read_to_string(&ipath)?)?;
        let mut runs = Vec::with_capacity(index.len());
        for e in &index {
            let (scores, labels) = Self::read_predictions(&self.path(&e.file))?;
            runs.push(EvalRun {
                model: e.model.clone(),
                horizon: e.horizon,
                feature_count: e.feature_count,
                scores,
                labels,
            });
        }
        let report = evalmetrics::build_report(&runs)?;
        let tmp = self.path("report.csv.tmp");
        report.write_csv(&tmp)?;
        fs::rename(&tmp, self.path("report.csv"))?;
        write_atomic(&self.path("report.txt"), report.to_table().as_bytes())?;
        let figures = self.path("figures");
        fs::create_dir_all(&figures)?;
        evalmetrics::write_roc_figures(&runs, &figures)?;
        info!("report: {} rows", report.rows.len());
        Ok(())
    }
}
