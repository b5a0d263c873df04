//! Flood classifier: boosted trees tuned by stratified k-fold grid search
//! on ROCAUC, and the persistence baseline.

pub mod gbdt;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use gbdt::{BinnedData, Gbdt, GbdtParams};

use crate::error::{Error, Result};
use crate::evalmetrics::rocauc;
use crate::featstat::flood_binary_index;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub n_trees: Vec<usize>,
    pub folds: usize,
    pub lambda: f64,
    pub min_child_weight: f64,
    pub max_bins: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_depth: vec![3, 5, 7],
            learning_rate: vec![0.05, 0.1, 0.3],
            n_trees: vec![100, 300],
            folds: 3,
            lambda: 1.0,
            min_child_weight: 1.0,
            max_bins: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub n_trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub params: Hyperparameters,
    pub fold_auc: Vec<f64>,
    pub mean_auc: f64,
}

/// SHA-256 over the newline-joined feature names.
pub fn manifest_checksum(names: &[String]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub model: Gbdt,
    pub best_hyperparameters: Hyperparameters,
    pub cv_auc: f64,
    pub cv_results: Vec<CvResult>,
    pub search: SearchConfig,
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub manifest_checksum: String,
}

/// Sidecar written next to the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub search: SearchConfig,
    pub best_hyperparameters: Hyperparameters,
    pub cv_auc: f64,
    pub cv_results: Vec<CvResult>,
    pub seed: u64,
    pub scale_pos_weight: f64,
    pub manifest_checksum: String,
    pub feature_count: usize,
}

fn stratified_folds(y: &[u8], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; y.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    fold
}

fn class_counts(y: &[u8]) -> (usize, usize) {
    let pos = y.iter().filter(|&&v| v == 1).count();
    (y.len() - pos, pos)
}

/// Grid search with stratified k-fold CV scored by ROCAUC, then refit of
/// the best point on all rows. Ties keep the earlier grid point.
pub fn train(
    x: &[Vec<f64>],
    y: &[u8],
    feature_names: &[String],
    search: &SearchConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    if x.len() != y.len() {
        return Err(Error::Training("feature and label counts differ".into()));
    }
    if x.iter().any(|r| r.len() != feature_names.len()) {
        return Err(Error::FeatureContract(
            "feature rows do not match the feature manifest".into(),
        ));
    }
    let (neg, pos) = class_counts(y);
    if neg == 0 || pos == 0 {
        return Err(Error::Training(
            "training labels contain a single class".into(),
        ));
    }
    let k = search.folds;
    if k < 2 || neg < k || pos < k {
        return Err(Error::Training(format!(
            "{k}-fold CV needs at least {k} examples of each class ({pos} positive, {neg} negative)"
        )));
    }
    if search.max_depth.is_empty() || search.learning_rate.is_empty() || search.n_trees.is_empty() {
        return Err(Error::Configuration("empty hyperparameter grid".into()));
    }

    let data = BinnedData::from_rows(x, search.max_bins)?;
    let folds = stratified_folds(y, k, seed);
    let mut n_trees = search.n_trees.clone();
    n_trees.sort_unstable();
    n_trees.dedup();
    let max_trees = *n_trees.last().expect("non-empty");

    let mut results: Vec<CvResult> = Vec::new();
    for &depth in &search.max_depth {
        for &lr in &search.learning_rate {
            let mut fold_auc = vec![Vec::with_capacity(k); n_trees.len()];
            for f in 0..k {
                let train_rows: Vec<u32> = (0..y.len())
                    .filter(|&i| folds[i] != f)
                    .map(|i| i as u32)
                    .collect();
                let val: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
                let (tn, tp) = class_counts(
                    &train_rows
                        .iter()
                        .map(|&i| y[i as usize])
                        .collect::<Vec<_>>(),
                );
                let params = GbdtParams {
                    max_depth: depth,
                    learning_rate: lr,
                    n_trees: max_trees,
                    lambda: search.lambda,
                    min_child_weight: search.min_child_weight,
                    scale_pos_weight: tn as f64 / tp as f64,
                    max_bins: search.max_bins,
                };
                let (m, _) = Gbdt::fit_binned(&data, y, &train_rows, &params)?;
                let val_y: Vec<u8> = val.iter().map(|&i| y[i]).collect();
                // Smaller ensembles are prefixes of the largest one.
                let mut margins = vec![0.0; val.len()];
                let mut done = 0;
                for (j, &nt) in n_trees.iter().enumerate() {
                    for t in &m.trees[done..nt] {
                        for (s, &i) in margins.iter_mut().zip(&val) {
                            *s += t.predict(&x[i]);
                        }
                    }
                    done = nt;
                    fold_auc[j].push(rocauc(&margins, &val_y)?);
                }
            }
            for (j, &nt) in n_trees.iter().enumerate() {
                let mean_auc = fold_auc[j].iter().sum::<f64>() / k as f64;
                results.push(CvResult {
                    params: Hyperparameters {
                        max_depth: depth,
                        learning_rate: lr,
                        n_trees: nt,
                    },
                    fold_auc: fold_auc[j].clone(),
                    mean_auc,
                });
            }
        }
    }
    let best = results
        .iter()
        .fold(None::<&CvResult>, |b, r| match b {
            Some(b) if b.mean_auc >= r.mean_auc => Some(b),
            _ => Some(r),
        })
        .expect("non-empty grid")
        .clone();

    let params = GbdtParams {
        max_depth: best.params.max_depth,
        learning_rate: best.params.learning_rate,
        n_trees: best.params.n_trees,
        lambda: search.lambda,
        min_child_weight: search.min_child_weight,
        scale_pos_weight: neg as f64 / pos as f64,
        max_bins: search.max_bins,
    };
    let rows: Vec<u32> = (0..y.len() as u32).collect();
    let (model, _) = Gbdt::fit_binned(&data, y, &rows, &params)?;
    Ok(TrainedClassifier {
        model,
        best_hyperparameters: best.params,
        cv_auc: best.mean_auc,
        cv_results: results,
        search: search.clone(),
        seed,
        feature_names: feature_names.to_vec(),
        manifest_checksum: manifest_checksum(feature_names),
    })
}

impl TrainedClassifier {
    /// Scores in `[0, 1]`, one per row, in input order.
    pub fn predict_proba(&self, feature_names: &[String], rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let got = manifest_checksum(feature_names);
        if got != self.manifest_checksum {
            return Err(Error::FeatureContract(format!(
                "feature manifest {got} does not match the training manifest {}",
                self.manifest_checksum
            )));
        }
        rows.iter()
            .map(|r| {
                if r.len() != self.feature_names.len() {
                    return Err(Error::FeatureContract(format!(
                        "row has {} features, model expects {}",
                        r.len(),
                        self.feature_names.len()
                    )));
                }
                Ok(self.model.predict_proba(r))
            })
            .collect()
    }

    pub fn sidecar(&self) -> ModelSidecar {
        ModelSidecar {
            search: self.search.clone(),
            best_hyperparameters: self.best_hyperparameters,
            cv_auc: self.cv_auc,
            cv_results: self.cv_results.clone(),
            seed: self.seed,
            scale_pos_weight: self.model.params.scale_pos_weight,
            manifest_checksum: self.manifest_checksum.clone(),
            feature_count: self.feature_names.len(),
        }
    }

    /// Writes `<path>` (full model, JSON) and `<path>.meta.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::textembed::store::write_atomic(path, serde_json::to_string(self)?.as_bytes())?;
        let mut meta = path.as_os_str().to_owned();
        meta.push(".meta.json");
        crate::textembed::store::write_atomic(
            Path::new(&meta),
            serde_json::to_string_pretty(&self.sidecar())?.as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| Error::artifact(path, e.to_string()))?;
        if m.manifest_checksum != manifest_checksum(&m.feature_names) {
            return Err(Error::artifact(
                path,
                "manifest checksum does not match feature names",
            ));
        }
        Ok(m)
    }
}

/// Persistence rule: predict the current year's flood indicator. Rows are
/// full (unselected) feature vectors whose statistical block comes first.
pub fn baseline_predict(rows: &[Vec<f64>]) -> Vec<u8> {
    let i = flood_binary_index();
    rows.iter().map(|r| u8::from(r[i] > 0.0)).collect()
}
