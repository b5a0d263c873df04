//! Run configuration: a TOML file whose every key has a default, plus
//! environment and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use floodlens::dataset::{DatasetConfig, SelectionConfig, SplitMode};
use floodlens::ingest::StudyWindow;
use floodlens::model::SearchConfig;
use floodlens::textcorpus::wiki::ClientConfig;
use floodlens::textembed::{Architecture, MaskPolicy, SigmoidPlacement, TrainConfig};

pub const ENV_WIKI_BASE: &str = "FLOODLENS_WIKI_BASE";
pub const ENV_CACHE_DIR: &str = "FLOODLENS_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub window: Window,
    pub horizons: Vec<u32>,
    pub architectures: Vec<Architecture>,
    pub seeds: Seeds,
    pub wiki: Wiki,
    pub embedding: Embedding,
    pub dataset: Dataset,
    pub search: Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub disasters: PathBuf,
    /// Optional damage-cost CSV joined by record id.
    pub damage: Option<PathBuf>,
    pub output: PathBuf,
    /// Holds the text corpus cache shared between runs.
    pub cache: PathBuf,
    /// Pretrained encoder directory; unset uses the bundled tiny encoder.
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Window {
    pub start: i32,
    pub end: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Train/test split and CV folds.
    pub split: u64,
    /// Text-model training.
    pub training: u64,
    /// Weights of the tiny encoder when no pretrained one is given.
    pub encoder: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Wiki {
    pub base_url: String,
    pub requests_per_second: f64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    pub user_agent: String,
    /// Serve these fixture pages from an in-process mock server instead of
    /// calling `base_url`.
    pub mock_pages: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Embedding {
    pub epochs: usize,
    pub batch_size: usize,
    pub finetune_learning_rate: f64,
    pub head_learning_rate: f64,
    pub train_fraction: f64,
    pub mask_policy: MaskPolicy,
    pub sigmoid_placement: SigmoidPlacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dataset {
    pub split: SplitMode,
    pub train_fraction: f64,
    pub feature_selection: bool,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Search {
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub n_trees: Vec<usize>,
    pub folds: usize,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            disasters: PathBuf::from("data/disasters.csv"),
            damage: None,
            output: PathBuf::from("out"),
            cache: PathBuf::from("cache"),
            encoder: None,
        }
    }
}

impl Default for Window {
    fn default() -> Self {
        let w = StudyWindow::default();
        Self {
            start: w.start,
            end: w.end,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            split: 42,
            training: 42,
            encoder: 0,
        }
    }
}

impl Default for Wiki {
    fn default() -> Self {
        let c = ClientConfig::default();
        Self {
            base_url: c.base_url,
            requests_per_second: c.requests_per_second,
            max_retries: c.max_retries,
            initial_backoff_ms: c.initial_backoff_ms,
            timeout_secs: c.timeout_secs,
            user_agent: c.user_agent,
            mock_pages: None,
        }
    }
}

impl Default for Embedding {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            finetune_learning_rate: floodlens::textembed::train::FINETUNE_LR,
            head_learning_rate: floodlens::textembed::train::HEAD_LR,
            train_fraction: t.train_fraction,
            mask_policy: t.mask_policy,
            sigmoid_placement: t.sigmoid_placement,
        }
    }
}

impl Default for Dataset {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            split: d.split,
            train_fraction: d.train_fraction,
            feature_selection: d.selection.enabled,
            top_k: d.selection.top_k,
        }
    }
}

impl Default for Search {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            max_depth: s.max_depth,
            learning_rate: s.learning_rate,
            n_trees: s.n_trees,
            folds: s.folds,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            window: Window::default(),
            horizons: vec![1, 2, 5],
            architectures: Architecture::ALL.to_vec(),
            seeds: Seeds::default(),
            wiki: Wiki::default(),
            embedding: Embedding::default(),
            dataset: Dataset::default(),
            search: Search::default(),
        }
    }
}

/// Command-line values that replace config keys when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub disasters: Option<PathBuf>,
    pub damage: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub horizons: Option<Vec<u32>>,
    pub architectures: Option<Vec<Architecture>>,
    pub seed: Option<u64>,
    pub wiki_base: Option<String>,
    pub mock_pages: Option<PathBuf>,
    pub split: Option<SplitMode>,
    pub window_start: Option<i32>,
    pub window_end: Option<i32>,
}

impl RunConfig {
    /// Parses `path`; relative paths inside the file are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| floodlens::Error::Configuration(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.disasters);
        fix(&mut self.paths.output);
        fix(&mut self.paths.cache);
        for p in [
            &mut self.paths.damage,
            &mut self.paths.encoder,
            &mut self.wiki.mock_pages,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Applies environment variables, then flags.
    pub fn apply(&mut self, o: &Overrides) {
        if let Ok(v) = std::env::var(ENV_WIKI_BASE) {
            if !v.is_empty() {
                self.wiki.base_url = v;
            }
        }
        if let Ok(v) = std::env::var(ENV_CACHE_DIR) {
            if !v.is_empty() {
                self.paths.cache = PathBuf::from(v);
            }
        }
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(o.disasters, self.paths.disasters);
        set!(o.output, self.paths.output);
        set!(o.cache, self.paths.cache);
        set!(o.horizons, self.horizons);
        set!(o.architectures, self.architectures);
        set!(o.wiki_base, self.wiki.base_url);
        set!(o.split, self.dataset.split);
        set!(o.window_start, self.window.start);
        set!(o.window_end, self.window.end);
        if o.damage.is_some() {
            self.paths.damage = o.damage.clone();
        }
        if o.encoder.is_some() {
            self.paths.encoder = o.encoder.clone();
        }
        if o.mock_pages.is_some() {
            self.wiki.mock_pages = o.mock_pages.clone();
        }
        if let Some(s) = o.seed {
            self.seeds.split = s;
            self.seeds.training = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| -> Result<()> { Err(floodlens::Error::Configuration(m).into()) };
        if self.horizons.is_empty() {
            return cfg_err("horizons must not be empty".into());
        }
        if let Some(h) = self.horizons.iter().find(|h| !(1..=5).contains(*h)) {
            return cfg_err(format!("horizon {h} outside [1, 5]"));
        }
        let mut seen = self.horizons.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.horizons.len() {
            return cfg_err("duplicate horizons".into());
        }
        let mut arch = self.architectures.clone();
        arch.sort();
        arch.dedup();
        if arch.len() != self.architectures.len() {
            return cfg_err("duplicate architectures".into());
        }
        self.study_window()?;
        if self.wiki.requests_per_second.is_nan() || self.wiki.requests_per_second <= 0.0 {
            return cfg_err("wiki.requests_per_second must be positive".into());
        }
        if self.search.max_depth.is_empty()
            || self.search.learning_rate.is_empty()
            || self.search.n_trees.is_empty()
        {
            return cfg_err("search grid must not be empty".into());
        }
        if self.search.folds < 2 {
            return cfg_err("search.folds must be at least 2".into());
        }
        if self.embedding.batch_size == 0 {
            return cfg_err("embedding.batch_size must be positive".into());
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            bail!(floodlens::Error::Configuration(
                "dataset.train_fraction must be in (0, 1)".into()
            ));
        }
        Ok(())
    }

    pub fn study_window(&self) -> Result<StudyWindow> {
        Ok(StudyWindow::new(self.window.start, self.window.end)?)
    }

    pub fn client_config(&self, base_url: &str) -> ClientConfig {
        ClientConfig {
            base_url: base_url.to_string(),
            requests_per_second: self.wiki.requests_per_second,
            max_retries: self.wiki.max_retries,
            initial_backoff_ms: self.wiki.initial_backoff_ms,
            timeout_secs: self.wiki.timeout_secs,
            user_agent: self.wiki.user_agent.clone(),
        }
    }

    pub fn train_config(&self, architecture: Architecture) -> TrainConfig {
        let lr = match architecture {
            Architecture::FinetunedAvg => self.embedding.finetune_learning_rate,
            _ => self.embedding.head_learning_rate,
        };
        TrainConfig {
            epochs: self.embedding.epochs,
            learning_rate: Some(lr),
            batch_size: self.embedding.batch_size,
            seed: self.seeds.training,
            train_fraction: self.embedding.train_fraction,
            mask_policy: self.embedding.mask_policy,
            sigmoid_placement: self.embedding.sigmoid_placement,
        }
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        Ok(DatasetConfig {
            window: self.study_window()?,
            train_fraction: self.dataset.train_fraction,
            split: self.dataset.split,
            selection: SelectionConfig {
                enabled: self.dataset.feature_selection,
                top_k: self.dataset.top_k,
                ..SelectionConfig::default()
            },
        })
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            max_depth: self.search.max_depth.clone(),
            learning_rate: self.search.learning_rate.clone(),
            n_trees: self.search.n_trees.clone(),
            folds: self.search.folds,
            ..SearchConfig::default()
        }
    }
}
