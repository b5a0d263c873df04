//! Deterministic synthetic worlds for tests and demos: disaster and damage
//! CSVs plus wiki pages, where each grid's flood recurrence depends on a
//! latent "flood-prone" trait that its page text describes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{GridCell, GridId};
use crate::ingest::{DisasterType, StudyWindow};
use crate::textcorpus::mock::MockPages;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_grids: usize,
    pub window: StudyWindow,
    pub seed: u64,
    pub prone_fraction: f64,
    /// Yearly flood probability for prone and ordinary grids.
    pub prone_flood_rate: f64,
    pub dry_flood_rate: f64,
    /// Added to the flood probability after a flood year.
    pub persistence: f64,
    /// Share of grids whose page describes the opposite trait.
    pub text_noise: f64,
    pub missing_page_fraction: f64,
    pub summary_only_fraction: f64,
    /// Share of pages titled `Name (Country)` instead of `Name`.
    pub qualified_title_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_grids: 50,
            window: StudyWindow {
                start: 1999,
                end: 2018,
            },
            seed: 7,
            prone_fraction: 0.5,
            prone_flood_rate: 0.4,
            dry_flood_rate: 0.12,
            persistence: 0.1,
            text_noise: 0.1,
            missing_page_fraction: 0.04,
            summary_only_fraction: 0.1,
            qualified_title_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGrid {
    pub grid: GridId,
    pub name: String,
    pub country: String,
    pub flood_prone: bool,
    /// Trait the page text describes (differs from `flood_prone` for noisy grids).
    pub described_prone: bool,
    pub page: PageKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageKind {
    Geography,
    SummaryOnly,
    QualifiedTitle,
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub grids: Vec<SynthGrid>,
    pub disasters_csv: String,
    pub damage_csv: String,
    pub pages: MockPages,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub disasters: PathBuf,
    pub damage: PathBuf,
    pub pages: PathBuf,
    pub truth: PathBuf,
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mer", "ta", "vin", "so", "ra", "del", "bu", "nor", "ish", "an", "pe", "ko", "zan",
    "ri", "mu", "tel", "go", "ven", "sa", "lin", "dor", "e",
];
const COUNTRIES: [&str; 6] = ["Aldera", "Borvia", "Caskel", "Dunmar", "Eswen", "Fyrland"];

const WET: [&str; 8] = [
    "The district lies on a low fertile floodplain along a wide river.",
    "Heavy monsoon rains frequently flood the delta lowlands.",
    "The region drains into a broad estuary fed by many tributaries.",
    "Much of the land is wetland, marsh and mangrove near the coast.",
    "The river often overflows its levee during the wet season.",
    "Alluvial soils cover the flat coastal plain around the bay.",
    "Frequent cyclones bring heavy rainfall to the humid lowland.",
    "Rice is farmed in the flooded fields of the river valley.",
];
const DRY: [&str; 8] = [
    "The district lies on a high arid plateau far from the sea.",
    "The terrain is rocky and mountainous with steep slopes.",
    "Rainfall is light and droughts are common in summer.",
    "Much of the land is desert and dry steppe grassland.",
    "A cold continental climate dominates the highland ridges.",
    "Sandy soils cover the dry hills around the central range.",
    "The region has a hot semi arid climate with little water.",
    "Cattle graze on the sparse grassland of the high plains.",
];
const NEUTRAL: [&str; 6] = [
    "The economy is based on agriculture and trade.",
    "A main road and a railway connect the town to the capital.",
    "The population is mostly rural.",
    "It is one of the largest districts of the province.",
    "Several villages surround the central town.",
    "The area is known for its markets and industry.",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], k: usize) -> Vec<&'a str> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..k.min(pool.len()) {
        let j = rng.random_range(i..pool.len());
        idx.swap(i, j);
    }
    idx[..k.min(pool.len())].iter().map(|&i| pool[i]).collect()
}

fn page_text(rng: &mut ChaCha8Rng, g: &SynthGrid) -> String {
    let trait_pool: &[&str] = if g.described_prone { &WET } else { &DRY };
    let mut body: Vec<&str> = pick(rng, trait_pool, 3);
    body.extend(pick(rng, &NEUTRAL, 2));
    let summary = format!("{} is a district of {}.", g.name, g.country);
    match g.page {
        PageKind::SummaryOnly => format!("{summary} {}", body.join(" ")),
        _ => format!(
            "{summary}\n\n== Geography ==\n{}\n\n== Economy ==\n{}",
            body.join(" "),
            NEUTRAL[0]
        ),
    }
}

/// Builds a world from `config`; identical configs give identical worlds.
pub fn generate(config: &SynthConfig) -> Result<SynthWorld> {
    if config.n_grids == 0 || config.window.is_empty() {
        return Err(Error::Configuration(
            "synthetic world needs grids and years".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut cells = BTreeSet::new();
    let mut names = BTreeSet::new();
    let mut grids = Vec::with_capacity(config.n_grids);
    while grids.len() < config.n_grids {
        let cell = GridCell::new(rng.random_range(-55..70), rng.random_range(-180..180))?;
        if !cells.insert(cell.id()) {
            continue;
        }
        let name = loop {
            let n = rng.random_range(2..4);
            let s: String = (0..n)
                .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
                .collect();
            let s = capitalize(&s);
            if names.insert(s.clone()) {
                break s;
            }
        };
        let flood_prone = rng.random_bool(config.prone_fraction);
        let described_prone = flood_prone ^ rng.random_bool(config.text_noise);
        let u: f64 = rng.random();
        let page = if u < config.missing_page_fraction {
            PageKind::Missing
        } else if u < config.missing_page_fraction + config.summary_only_fraction {
            PageKind::SummaryOnly
        } else if u < config.missing_page_fraction
            + config.summary_only_fraction
            + config.qualified_title_fraction
        {
            PageKind::QualifiedTitle
        } else {
            PageKind::Geography
        };
        grids.push(SynthGrid {
            grid: cell.id(),
            name,
            country: COUNTRIES[rng.random_range(0..COUNTRIES.len())].to_string(),
            flood_prone,
            described_prone,
            page,
        });
    }

    let mut pages = MockPages::default();
    for g in &grids {
        let text = page_text(&mut rng, g);
        match g.page {
            PageKind::Missing => {}
            PageKind::QualifiedTitle => {
                pages
                    .pages
                    .insert(format!("{} ({})", g.name, g.country), text);
            }
            _ => {
                pages.pages.insert(g.name.clone(), text);
            }
        }
    }

    let damage_dist = LogNormal::<f64>::new(15.0, 1.5).expect("valid parameters");
    let mut dis = csv::Writer::from_writer(Vec::new());
    let mut dmg = csv::Writer::from_writer(Vec::new());
    dis.write_record([
        "record_id",
        "disaster_type",
        "year",
        "lat",
        "lon",
        "location_name",
        "country",
    ])?;
    dmg.write_record(["record_id", "damage_cost"])?;
    let mut next_id = 0usize;
    let span = (config.window.end - config.window.start).max(1) as f64;
    for g in &grids {
        let cell = g.grid.cell();
        let mut flooded_last_year = false;
        for year in config.window.years() {
            let trend = 0.03 * (year - config.window.start) as f64 / span;
            let base = if g.flood_prone {
                config.prone_flood_rate
            } else {
                config.dry_flood_rate
            };
            let p_flood = (base
                + trend
                + if flooded_last_year {
                    config.persistence
                } else {
                    0.0
                })
            .min(0.95);
            let rates: [(DisasterType, f64); 8] = [
                (DisasterType::Flood, p_flood),
                (DisasterType::Storm, if g.flood_prone { 0.45 } else { 0.08 }),
                (DisasterType::Earthquake, 0.05),
                (DisasterType::ExtremeTemperature, 0.04),
                (
                    DisasterType::Landslide,
                    if g.flood_prone { 0.08 } else { 0.03 },
                ),
                (DisasterType::VolcanicActivity, 0.01),
                (
                    DisasterType::Drought,
                    if g.flood_prone { 0.03 } else { 0.12 },
                ),
                (DisasterType::MassMovementDry, 0.02),
            ];
            flooded_last_year = false;
            for (kind, p) in rates {
                if !rng.random_bool(p) {
                    continue;
                }
                // Prone grids see more multi-event flood years.
                let multi = if kind == DisasterType::Flood && g.flood_prone {
                    0.4
                } else {
                    0.15
                };
                let count = if rng.random_bool(multi) { 2 } else { 1 };
                if kind == DisasterType::Flood {
                    flooded_last_year = true;
                }
                for _ in 0..count {
                    let id = format!("syn-{next_id:06}");
                    next_id += 1;
                    let lat = cell.lat_floor() as f64 + rng.random_range(0.05..0.95);
                    let lon = cell.lon_floor() as f64 + rng.random_range(0.05..0.95);
                    dis.write_record([
                        id.as_str(),
                        kind.as_str(),
                        &year.to_string(),
                        &format!("{lat:.4}"),
                        &format!("{lon:.4}"),
                        &g.name,
                        &g.country,
                    ])?;
                    if rng.random_bool(0.6) {
                        let cost = damage_dist.sample(&mut rng).round();
                        dmg.write_record([id.as_str(), &format!("{cost}")])?;
                    }
                }
            }
        }
    }
    let finish = |w: csv::Writer<Vec<u8>>| -> Result<String> {
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Configuration(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Configuration(e.to_string()))
    };
    Ok(SynthWorld {
        config: *config,
        grids,
        disasters_csv: finish(dis)?,
        damage_csv: finish(dmg)?,
        pages,
    })
}

impl SynthWorld {
    pub fn truth(&self) -> BTreeMap<GridId, bool> {
        self.grids.iter().map(|g| (g.grid, g.flood_prone)).collect()
    }

    /// Writes `disasters.csv`, `damage.csv`, `wiki_pages.json` and
    /// `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths {
            disasters: dir.join("disasters.csv"),
            damage: dir.join("damage.csv"),
            pages: dir.join("wiki_pages.json"),
            truth: dir.join("truth.json"),
        };
        fs::write(&paths.disasters, &self.disasters_csv)
            .map_err(|e| Error::io(&paths.disasters, e))?;
        fs::write(&paths.damage, &self.damage_csv).map_err(|e| Error::io(&paths.damage, e))?;
        self.pages.save(&paths.pages)?;
        let truth = serde_json::to_string_pretty(&self.grids)?;
        fs::write(&paths.truth, truth).map_err(|e| Error::io(&paths.truth, e))?;
        Ok(paths)
    }
}

/// A 100-row disaster CSV with exactly three malformed rows (bad latitude
/// text, latitude out of range, unknown disaster type).
pub fn ingest_fixture() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "record_id",
        "disaster_type",
        "year",
        "lat",
        "lon",
        "location_name",
        "country",
    ])
    .expect("in-memory write");
    for i in 0..100 {
        let kind = DisasterType::ALL[rng.random_range(0..8)]
            .as_str()
            .to_string();
        let year = rng.random_range(1960..=2018).to_string();
        let mut lat = format!("{:.3}", rng.random_range(-60.0..70.0));
        let lon = format!("{:.3}", rng.random_range(-180.0..180.0));
        let mut kind = kind;
        match i {
            17 => lat = "north".into(),
            48 => lat = "95.2".into(),
            81 => kind = "meteor".into(),
            _ => {}
        }
        w.write_record([
            format!("fx-{i:03}"),
            kind,
            year,
            lat,
            lon,
            format!("Site {}", i % 23),
            COUNTRIES[i % COUNTRIES.len()].to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
}
