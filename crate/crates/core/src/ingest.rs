//! Geocoded disaster records and their damage estimates.
//!
//! Input is a normalized CSV pair (see README): one disaster file keyed by
//! `record_id` plus an optional damage file joined on the same column. Rows
//! that cannot be turned into a [`GeoEvent`] are dropped and described in a
//! [`RejectsReport`]; they never abort the parse.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{self, GridId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisasterType {
    Flood,
    Storm,
    Earthquake,
    ExtremeTemperature,
    Landslide,
    VolcanicActivity,
    Drought,
    MassMovementDry,
}

impl DisasterType {
    /// Feature-block order used everywhere downstream.
    pub const ALL: [DisasterType; 8] = [
        DisasterType::Flood,
        DisasterType::Storm,
        DisasterType::Earthquake,
        DisasterType::ExtremeTemperature,
        DisasterType::Landslide,
        DisasterType::VolcanicActivity,
        DisasterType::Drought,
        DisasterType::MassMovementDry,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DisasterType::Flood => "flood",
            DisasterType::Storm => "storm",
            DisasterType::Earthquake => "earthquake",
            DisasterType::ExtremeTemperature => "extreme_temperature",
            DisasterType::Landslide => "landslide",
            DisasterType::VolcanicActivity => "volcanic_activity",
            DisasterType::Drought => "drought",
            DisasterType::MassMovementDry => "mass_movement_dry",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for DisasterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DisasterType {
    type Err = String;

    /// Case-insensitive; spaces, hyphens and underscores are interchangeable
    /// and parentheses are ignored, so `"Mass movement (dry)"` parses.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| *c != '(' && *c != ')')
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        let key = key
            .split('_')
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join("_");
        DisasterType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| format!("unknown disaster type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: i32,
    pub end: i32,
}

impl StudyWindow {
    pub fn new(start: i32, end: i32) -> Result<Self> {
        if start > end {
            return Err(Error::Configuration(format!(
                "study window start {start} after end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start..=self.end).contains(&year)
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for StudyWindow {
    fn default() -> Self {
        Self {
            start: 1960,
            end: 2018,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoEvent {
    pub record_id: String,
    pub disaster_type: DisasterType,
    /// Start year; multi-year events are not split.
    pub year: i32,
    pub lat: f64,
    pub lon: f64,
    pub location_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    pub damage_cost: Option<f64>,
    pub grid: GridId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub source: String,
    /// 1-based line number in the source file, header included.
    pub line: u64,
    pub record_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RejectsReport {
    pub rows: Vec<Reject>,
}

impl RejectsReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rejected rows coming from the disaster file.
    pub fn disaster_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.source == "disaster").count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub window: StudyWindow,
}

/// Geocoded events with a `(grid, year)` index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTable {
    events: Vec<GeoEvent>,
    index: BTreeMap<(GridId, i32), Vec<usize>>,
}

impl EventTable {
    /// Builds a table, rejecting duplicate record ids.
    pub fn from_events(events: Vec<GeoEvent>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &events {
            if !seen.insert(e.record_id.as_str()) {
                return Err(Error::Join(format!("duplicate record_id {}", e.record_id)));
            }
            let expected = geogrid::locate(e.lat, e.lon)?;
            if expected != e.grid {
                return Err(Error::Join(format!(
                    "record {} carries grid {} but its coordinates map to {}",
                    e.record_id, e.grid, expected
                )));
            }
        }
        let mut index: BTreeMap<(GridId, i32), Vec<usize>> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            index.entry((e.grid, e.year)).or_default().push(i);
        }
        Ok(Self { events, index })
    }

    pub fn events(&self) -> &[GeoEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn at(&self, grid: GridId, year: i32) -> impl Iterator<Item = &GeoEvent> {
        self.index
            .get(&(grid, year))
            .into_iter()
            .flatten()
            .map(move |&i| &self.events[i])
    }

    /// All events of `grid`, ordered by year then input order.
    pub fn at_grid(&self, grid: GridId) -> impl Iterator<Item = &GeoEvent> {
        self.index
            .range((grid, i32::MIN)..=(grid, i32::MAX))
            .flat_map(move |(_, ids)| ids.iter().map(move |&i| &self.events[i]))
    }

    /// Total events of type `kind` per grid.
    pub fn counts_by_grid(&self, kind: DisasterType) -> BTreeMap<GridId, usize> {
        let mut out = BTreeMap::new();
        for e in &self.events {
            if e.disaster_type == kind {
                *out.entry(e.grid).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut events = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }
        Self::from_events(events)
    }
}

/// Distinct grids with at least one event of any type.
pub fn unique_grids(table: &EventTable) -> BTreeSet<GridId> {
    table.events.iter().map(|e| e.grid).collect()
}

const DISASTER_COLUMNS: [&str; 6] = [
    "record_id",
    "disaster_type",
    "year",
    "lat",
    "lon",
    "location_name",
];
const DAMAGE_COLUMNS: [&str; 2] = ["record_id", "damage_cost"];

fn column_positions(
    path: &Path,
    headers: &csv::StringRecord,
    required: &[&str],
) -> Result<HashMap<String, usize>> {
    let positions: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_string(), i))
        .collect();
    let missing: Vec<_> = required
        .iter()
        .filter(|c| !positions.contains_key(**c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("missing column(s) {missing:?}; found {headers:?}"),
        });
    }
    Ok(positions)
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).from_reader(file))
}

fn parse_damage(raw: &str) -> std::result::Result<Option<f64>, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| format!("unparseable damage_cost {raw:?}"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!(
            "damage_cost must be finite and non-negative, got {v}"
        ));
    }
    Ok(Some(v))
}

fn read_damage(path: &Path, rejects: &mut RejectsReport) -> Result<HashMap<String, f64>> {
    let mut reader = open_csv(path)?;
    let cols = column_positions(path, reader.headers()?, &DAMAGE_COLUMNS)?;
    let (id_col, cost_col) = (cols["record_id"], cols["damage_cost"]);
    let mut out = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let mut reject = |record_id: Option<String>, reason: String| {
            rejects.rows.push(Reject {
                source: "damage".into(),
                line,
                record_id,
                reason,
            })
        };
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                reject(None, format!("csv: {e}"));
                continue;
            }
        };
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        if id.is_empty() {
            reject(None, "empty record_id".into());
            continue;
        }
        match parse_damage(row.get(cost_col).unwrap_or("")) {
            Ok(None) => {}
            Ok(Some(v)) => {
                if let Entry::Vacant(slot) = out.entry(id.clone()) {
                    slot.insert(v);
                } else {
                    reject(Some(id), "duplicate damage record".into());
                }
            }
            Err(reason) => reject(Some(id), reason),
        }
    }
    Ok(out)
}

/// Parses the disaster file and joins damage estimates onto it.
///
/// Every data row of the disaster file ends up either as an event or as a
/// `"disaster"` entry of the returned report.
pub fn parse_events(
    disaster_file: &Path,
    damage_file: Option<&Path>,
    config: &IngestConfig,
) -> Result<(EventTable, RejectsReport)> {
    let mut rejects = RejectsReport::default();
    let mut reader = open_csv(disaster_file)?;
    let cols = column_positions(disaster_file, reader.headers()?, &DISASTER_COLUMNS)?;
    let country_col = cols.get("country").copied();

    let damage = match damage_file {
        Some(p) => read_damage(p, &mut rejects)?,
        None => HashMap::new(),
    };

    let mut events = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.rows.push(Reject {
                    source: "disaster".into(),
                    line,
                    record_id: None,
                    reason: format!("csv: {e}"),
                });
                continue;
            }
        };
        let field = |name: &str| row.get(cols[name]).unwrap_or("").trim();
        let record_id = field("record_id").to_string();
        let parsed = parse_row(&row, &cols, country_col, config).and_then(|mut e| {
            if record_id.is_empty() {
                return Err("empty record_id".to_string());
            }
            if !seen.insert(record_id.clone()) {
                return Err("duplicate record_id".to_string());
            }
            e.damage_cost = damage.get(&record_id).copied();
            e.record_id = record_id.clone();
            Ok(e)
        });
        match parsed {
            Ok(e) => events.push(e),
            Err(reason) => rejects.rows.push(Reject {
                source: "disaster".into(),
                line,
                record_id: (!record_id.is_empty()).then_some(record_id),
                reason,
            }),
        }
    }
    let table = EventTable::from_events(events)?;
    Ok((table, rejects))
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &HashMap<String, usize>,
    country_col: Option<usize>,
    config: &IngestConfig,
) -> std::result::Result<GeoEvent, String> {
    let field = |name: &str| row.get(cols[name]).unwrap_or("").trim();
    let disaster_type: DisasterType = field("disaster_type").parse()?;
    let year: i32 = field("year")
        .parse()
        .map_err(|_| format!("unparseable year {:?}", field("year")))?;
    if !config.window.contains(year) {
        return Err(format!(
            "year {year} outside study window {}-{}",
            config.window.start, config.window.end
        ));
    }
    let coord = |name: &str| -> std::result::Result<f64, String> {
        field(name)
            .parse::<f64>()
            .map_err(|_| format!("unparseable {name} {:?}", field(name)))
    };
    let (lat, lon) = (coord("lat")?, coord("lon")?);
    let grid = geogrid::locate(lat, lon).map_err(|e| e.to_string())?;
    let country = country_col
        .and_then(|c| row.get(c))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    Ok(GeoEvent {
        record_id: String::new(),
        disaster_type,
        year,
        lat,
        lon,
        location_name: field("location_name").to_string(),
        country,
        damage_cost: None,
        grid,
    })
}
