//! Next-N-year labeled examples per (grid, year): statistical features,
//! the year, and the grid's text embedding, with split and selection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstat::{self, GridYearFeatures};
use crate::geogrid::GridId;
use crate::ingest::{DisasterType, EventTable, StudyWindow};
use crate::model::{Gbdt, GbdtParams};
use crate::textembed::{Architecture, EmbeddingTable};

pub const MAX_HORIZON: u32 = 5;
/// Grids need at least this many floods to enter the dataset.
pub const MIN_GRID_FLOODS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub grid: GridId,
    pub year: i32,
    pub horizon: u32,
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Random over examples.
    #[default]
    Random,
    /// Whole grids go to one side.
    GroupedByGrid,
    /// Earliest years train, latest years test.
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub enabled: bool,
    pub top_k: usize,
    /// Preliminary ensemble used to rank features.
    pub probe: GbdtParams,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            top_k: 64,
            probe: GbdtParams {
                max_depth: 3,
                learning_rate: 0.1,
                n_trees: 50,
                ..GbdtParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub window: StudyWindow,
    pub train_fraction: f64,
    pub split: SplitMode,
    pub selection: SelectionConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: StudyWindow::default(),
            train_fraction: 0.7,
            split: SplitMode::Random,
            selection: SelectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
    pub horizon: u32,
    /// Text architecture, absent for statistical-only datasets.
    pub architecture: Option<Architecture>,
    pub split_mode: SplitMode,
    /// Names of every assembled column, in feature order.
    pub feature_names: Vec<String>,
    pub selected_feature_indices: Vec<usize>,
}

/// 1 iff the grid has a flood in `[year + 1, year + n]`.
pub fn flood_label(
    table: &EventTable,
    grid: GridId,
    year: i32,
    n: u32,
    window: StudyWindow,
) -> Result<u8> {
    check_horizon(n)?;
    if year + n as i32 > window.end {
        return Err(Error::Horizon(format!(
            "year {year} + {n} exceeds the study window end {}",
            window.end
        )));
    }
    let hit = (1..=n as i32).any(|d| {
        table
            .at(grid, year + d)
            .any(|e| e.disaster_type == DisasterType::Flood)
    });
    Ok(u8::from(hit))
}

fn check_horizon(n: u32) -> Result<()> {
    if (1..=MAX_HORIZON).contains(&n) {
        Ok(())
    } else {
        Err(Error::Horizon(format!(
            "horizon {n} outside [1, {MAX_HORIZON}]"
        )))
    }
}

/// Grids with at least two floods over the whole table.
pub fn filter_grids(table: &EventTable) -> BTreeSet<GridId> {
    table
        .counts_by_grid(DisasterType::Flood)
        .into_iter()
        .filter(|&(_, c)| c >= MIN_GRID_FLOODS)
        .map(|(g, _)| g)
        .collect()
}

/// Column names for a dataset with the given embedding block.
pub fn feature_manifest(embeddings: Option<&EmbeddingTable>) -> Vec<String> {
    let mut names = featstat::feature_names();
    if let Some(e) = embeddings {
        names.extend(e.feature_names());
    }
    names
}

/// Builds every example for horizon `n`, splits it, and fits feature
/// selection on the train part. `embeddings = None` is statistical-only.
pub fn assemble(
    table: &EventTable,
    features: &[GridYearFeatures],
    embeddings: Option<&EmbeddingTable>,
    n: u32,
    seed: u64,
    config: &DatasetConfig,
) -> Result<DatasetSplit> {
    check_horizon(n)?;
    let window = config.window;
    let last_year = window.end - n as i32;
    if last_year < window.start {
        return Err(Error::Horizon(format!(
            "horizon {n} leaves no example years in {}-{}",
            window.start, window.end
        )));
    }
    let grids = filter_grids(table);
    let stats: HashMap<(GridId, i32), &GridYearFeatures> =
        features.iter().map(|f| ((f.grid, f.year), f)).collect();

    let mut examples = Vec::new();
    for &grid in &grids {
        let emb = match embeddings {
            Some(e) => Some(
                e.get(grid)
                    .ok_or_else(|| Error::Join(format!("no embedding for grid {grid}")))?,
            ),
            None => None,
        };
        for year in window.start..=last_year {
            let row = stats.get(&(grid, year)).ok_or_else(|| {
                Error::Join(format!(
                    "no statistical features for grid {grid}, year {year}"
                ))
            })?;
            let mut x = row.to_vector();
            if let Some(e) = emb {
                x.extend_from_slice(e);
            }
            examples.push(LabeledExample {
                grid,
                year,
                horizon: n,
                features: x,
                label: flood_label(table, grid, year, n, window)?,
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::Degenerate(
            "no grid passes the flood-count filter".into(),
        ));
    }
    let (train, test) = split_examples(examples, seed, config)?;
    let feature_names = feature_manifest(embeddings);
    let selected_feature_indices = if config.selection.enabled {
        select_features(&train, &config.selection)?
    } else {
        (0..feature_names.len()).collect()
    };
    Ok(DatasetSplit {
        train,
        test,
        seed,
        horizon: n,
        architecture: embeddings.map(|e| e.architecture),
        split_mode: config.split,
        feature_names,
        selected_feature_indices,
    })
}

fn split_examples(
    mut examples: Vec<LabeledExample>,
    seed: u64,
    config: &DatasetConfig,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let frac = config.train_fraction;
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Configuration(format!(
            "train_fraction {frac} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = examples.len();
    let target = ((total as f64) * frac).round() as usize;
    let in_train: Vec<bool> = match config.split {
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..total).collect();
            idx.shuffle(&mut rng);
            let mut mark = vec![false; total];
            for &i in &idx[..target] {
                mark[i] = true;
            }
            mark
        }
        SplitMode::GroupedByGrid => {
            let mut grids: Vec<GridId> = examples
                .iter()
                .map(|e| e.grid)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            grids.shuffle(&mut rng);
            let per_grid: BTreeMap<GridId, usize> =
                examples.iter().fold(BTreeMap::new(), |mut m, e| {
                    *m.entry(e.grid).or_insert(0) += 1;
                    m
                });
            let mut chosen = BTreeSet::new();
            let mut count = 0;
            for g in grids {
                if count >= target {
                    break;
                }
                count += per_grid[&g];
                chosen.insert(g);
            }
            examples.iter().map(|e| chosen.contains(&e.grid)).collect()
        }
        SplitMode::Temporal => {
            let mut years: Vec<i32> = examples.iter().map(|e| e.year).collect();
            years.sort_unstable();
            let cutoff = years[target.min(total - 1)];
            examples.iter().map(|e| e.year < cutoff).collect()
        }
    };
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(total - target);
    for (e, t) in examples.drain(..).zip(in_train) {
        if t {
            train.push(e);
        } else {
            test.push(e);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Degenerate("split left one side empty".into()));
    }
    Ok((train, test))
}

/// Drops zero-variance columns, then keeps the `top_k` columns with the
/// largest total split gain in a preliminary ensemble. Returns ascending
/// indices. Sees only the examples it is given.
pub fn select_features(train: &[LabeledExample], config: &SelectionConfig) -> Result<Vec<usize>> {
    let first = train
        .first()
        .ok_or_else(|| Error::Degenerate("feature selection needs training examples".into()))?;
    let d = first.features.len();
    let varying: Vec<usize> = (0..d)
        .filter(|&j| train.iter().any(|e| e.features[j] != first.features[j]))
        .collect();
    if varying.is_empty() {
        return Err(Error::Degenerate(
            "every feature is constant on the training set".into(),
        ));
    }
    if varying.len() <= config.top_k {
        return Ok(varying);
    }
    let x: Vec<Vec<f64>> = train
        .iter()
        .map(|e| varying.iter().map(|&j| e.features[j]).collect())
        .collect();
    let y: Vec<u8> = train.iter().map(|e| e.label).collect();
    let pos = y.iter().filter(|&&v| v == 1).count();
    let probe = GbdtParams {
        scale_pos_weight: if pos == 0 {
            1.0
        } else {
            (y.len() - pos) as f64 / pos as f64
        },
        ..config.probe
    };
    let data = crate::model::BinnedData::from_rows(&x, probe.max_bins)?;
    let rows: Vec<u32> = (0..x.len() as u32).collect();
    let (_, gain) = Gbdt::fit_binned(&data, &y, &rows, &probe)?;
    let mut order: Vec<usize> = (0..varying.len()).collect();
    order.sort_by(|&a, &b| gain[b].total_cmp(&gain[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[..config.top_k].iter().map(|&i| varying[i]).collect();
    keep.sort_unstable();
    Ok(keep)
}

impl DatasetSplit {
    pub fn selected_names(&self) -> Vec<String> {
        self.selected_feature_indices
            .iter()
            .map(|&i| self.feature_names[i].clone())
            .collect()
    }

    /// Selected columns of `examples`.
    pub fn matrix(&self, examples: &[LabeledExample]) -> Vec<Vec<f64>> {
        examples
            .iter()
            .map(|e| {
                self.selected_feature_indices
                    .iter()
                    .map(|&i| e.features[i])
                    .collect()
            })
            .collect()
    }

    pub fn labels(examples: &[LabeledExample]) -> Vec<u8> {
        examples.iter().map(|e| e.label).collect()
    }

    /// Length of the full feature manifest, before selection.
    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let positives = |v: &[LabeledExample]| v.iter().filter(|e| e.label == 1).count();
        DatasetManifest {
            horizon: self.horizon,
            seed: self.seed,
            architecture: self.architecture,
            split_mode: self.split_mode,
            feature_names: self.feature_names.clone(),
            selected_feature_indices: self.selected_feature_indices.clone(),
            selection_method:
                "zero-variance filter, then top-k by boosted-tree split gain on train".into(),
            n_train: self.train.len(),
            n_test: self.test.len(),
            train_positives: positives(&self.train),
            test_positives: positives(&self.test),
            grids: self
                .train
                .iter()
                .chain(&self.test)
                .map(|e| e.grid)
                .collect::<BTreeSet<_>>()
                .len(),
        }
    }

    /// Writes `<path>` (CSV) and `<path>.manifest.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = csv::Writer::from_writer(file);
            let mut header = vec![
                "split".to_string(),
                "grid".into(),
                "year".into(),
                "label".into(),
            ];
            header.extend(self.feature_names.iter().cloned());
            w.write_record(&header)?;
            for (part, rows) in [("train", &self.train), ("test", &self.test)] {
                for e in rows {
                    let mut rec = vec![
                        part.to_string(),
                        e.grid.to_string(),
                        e.year.to_string(),
                        e.label.to_string(),
                    ];
                    rec.extend(e.features.iter().map(|v| featstat::format_number(*v)));
                    w.write_record(&rec)?;
                }
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        crate::textembed::store::write_atomic(
            &manifest_path(path),
            serde_json::to_string_pretty(&self.manifest())?.as_bytes(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::artifact(&mpath, e.to_string()))?;
        let schema = |msg: String| Error::Schema {
            path: path.to_path_buf(),
            message: msg,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let header = r.headers()?.clone();
        let names: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
        if names != m.feature_names {
            return Err(schema("columns do not match the manifest".into()));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| schema(format!("bad number in column {i}")))
            };
            let grid = GridId::new(num(1)? as u32)?;
            let e = LabeledExample {
                grid,
                year: num(2)? as i32,
                horizon: m.horizon,
                label: num(3)? as u8,
                features: (4..rec.len()).map(num).collect::<Result<_>>()?,
            };
            match &rec[0] {
                "train" => train.push(e),
                "test" => test.push(e),
                other => return Err(schema(format!("unknown split {other:?}"))),
            }
        }
        Ok(Self {
            train,
            test,
            seed: m.seed,
            horizon: m.horizon,
            architecture: m.architecture,
            split_mode: m.split_mode,
            feature_names: m.feature_names,
            selected_feature_indices: m.selected_feature_indices,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub horizon: u32,
    pub seed: u64,
    pub architecture: Option<Architecture>,
    pub split_mode: SplitMode,
    pub feature_names: Vec<String>,
    pub selected_feature_indices: Vec<usize>,
    pub selection_method: String,
    pub n_train: usize,
    pub n_test: usize,
    pub train_positives: usize,
    pub test_positives: usize,
    pub grids: usize,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".tmp");
    PathBuf::from(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::locate;
    use crate::ingest::GeoEvent;

    fn event(id: usize, kind: DisasterType, year: i32, lat: f64) -> GeoEvent {
        GeoEvent {
            record_id: format!("r{id}"),
            disaster_type: kind,
            year,
            lat,
            lon: 10.5,
            location_name: "P".into(),
            country: None,
            damage_cost: None,
            grid: locate(lat, 10.5).unwrap(),
        }
    }

    #[test]
    fn label_examples() {
        let t = EventTable::from_events(vec![
            event(0, DisasterType::Flood, 2000, 5.5),
            event(1, DisasterType::Flood, 2003, 5.5),
            event(2, DisasterType::Storm, 2001, 6.5),
        ])
        .unwrap();
        let g = locate(5.5, 10.5).unwrap();
        let w = StudyWindow::default();
        assert_eq!(flood_label(&t, g, 2000, 2, w).unwrap(), 0);
        assert_eq!(flood_label(&t, g, 2001, 2, w).unwrap(), 1);
        let dry = locate(6.5, 10.5).unwrap();
        for y in 1960..=2013 {
            for n in 1..=5 {
                assert_eq!(flood_label(&t, dry, y, n, w).unwrap(), 0);
            }
        }
        assert!(matches!(
            flood_label(&t, g, 2017, 2, w),
            Err(Error::Horizon(_))
        ));
        assert!(matches!(
            flood_label(&t, g, 2000, 0, w),
            Err(Error::Horizon(_))
        ));
    }

    #[test]
    fn filter_threshold_is_two() {
        let mut ev = Vec::new();
        let mut id = 0;
        for (lat, floods) in [(1.5, 0), (2.5, 1), (3.5, 2), (4.5, 5)] {
            for k in 0..floods {
                ev.push(event(id, DisasterType::Flood, 1990 + k, lat));
                id += 1;
            }
            ev.push(event(id, DisasterType::Storm, 1990, lat));
            id += 1;
        }
        let t = EventTable::from_events(ev).unwrap();
        let got: Vec<GridId> = filter_grids(&t).into_iter().collect();
        assert_eq!(
            got,
            vec![locate(3.5, 10.5).unwrap(), locate(4.5, 10.5).unwrap()]
        );
        assert!(filter_grids(&EventTable::from_events(vec![]).unwrap()).is_empty());
    }

    fn rows(n: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                grid: GridId::new(i as u32).unwrap(),
                year: 2000,
                horizon: 1,
                features: (0..d).map(|j| f(i, j)).collect(),
                label: u8::from(i % 3 == 0),
            })
            .collect()
    }

    #[test]
    fn selection_drops_constants_and_respects_k() {
        let ex = rows(60, 5, |i, j| {
            if j == 2 {
                7.0
            } else {
                ((i * (j + 1)) % 11) as f64
            }
        });
        let cfg = SelectionConfig::default();
        assert_eq!(select_features(&ex, &cfg).unwrap(), vec![0, 1, 3, 4]);

        // Strong feature duplicated: selection still bounded by k.
        let ex = rows(90, 6, |i, j| match j {
            0 | 1 => f64::from(u8::from(i % 3 == 0)) + (i % 5) as f64 * 0.01,
            _ => ((i * 7 + j * 13) % 17) as f64,
        });
        let cfg = SelectionConfig {
            top_k: 3,
            ..SelectionConfig::default()
        };
        let sel = select_features(&ex, &cfg).unwrap();
        assert_eq!(sel.len(), 3);
        assert!(sel.contains(&0) || sel.contains(&1));

        let flat = rows(10, 3, |_, _| 1.0);
        assert!(matches!(
            select_features(&flat, &cfg),
            Err(Error::Degenerate(_))
        ));
    }
}
