//! Per-(grid, year) statistical features built from the current year only.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::GridId;
use crate::ingest::{DisasterType, EventTable, StudyWindow};

pub const TYPE_FEATURES: usize = 24;
/// Type features plus the numeric year.
pub const STAT_FEATURES: usize = TYPE_FEATURES + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridYearFeatures {
    pub grid: GridId,
    pub year: i32,
    pub counts: [u32; 8],
    pub binary: [u8; 8],
    pub damage: [f64; 8],
    pub year_feature: f64,
}

impl GridYearFeatures {
    pub fn zeros(grid: GridId, year: i32) -> Self {
        Self {
            grid,
            year,
            counts: [0; 8],
            binary: [0; 8],
            damage: [0.0; 8],
            year_feature: year as f64,
        }
    }

    pub fn count(&self, kind: DisasterType) -> u32 {
        self.counts[kind.index()]
    }

    pub fn flag(&self, kind: DisasterType) -> u8 {
        self.binary[kind.index()]
    }

    pub fn damage(&self, kind: DisasterType) -> f64 {
        self.damage[kind.index()]
    }

    /// `[count, binary, damage]` per type in [`DisasterType::ALL`] order,
    /// followed by the year.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(STAT_FEATURES);
        for t in 0..8 {
            v.push(self.counts[t] as f64);
            v.push(self.binary[t] as f64);
            v.push(self.damage[t]);
        }
        v.push(self.year_feature);
        v
    }
}

/// Column names matching [`GridYearFeatures::to_vector`].
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(STAT_FEATURES);
    for t in DisasterType::ALL {
        for suffix in ["count", "binary", "damage"] {
            names.push(format!("{t}_{suffix}"));
        }
    }
    names.push("year_feature".into());
    names
}

/// Index of the current-year flood indicator inside the feature vector.
pub fn flood_binary_index() -> usize {
    DisasterType::Flood.index() * 3 + 1
}

pub fn aggregate_year(table: &EventTable, grid: GridId, year: i32) -> GridYearFeatures {
    let mut f = GridYearFeatures::zeros(grid, year);
    for e in table.at(grid, year) {
        let t = e.disaster_type.index();
        f.counts[t] += 1;
        f.damage[t] += e.damage_cost.unwrap_or(0.0);
    }
    for t in 0..8 {
        f.binary[t] = u8::from(f.counts[t] > 0);
    }
    f
}

/// Dense matrix over `grids × years`, ordered by `(grid, year)`.
pub fn feature_matrix(
    table: &EventTable,
    grids: &BTreeSet<GridId>,
    years: StudyWindow,
) -> Vec<GridYearFeatures> {
    grids
        .iter()
        .flat_map(|&g| years.years().map(move |y| aggregate_year(table, g, y)))
        .collect()
}

pub fn write_csv(rows: &[GridYearFeatures], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["grid".to_string(), "year".to_string()];
    header.extend(feature_names());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.grid.to_string(), r.year.to_string()];
        rec.extend(r.to_vector().iter().map(|v| format_number(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<GridYearFeatures>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let expected = 2 + STAT_FEATURES;
    if r.headers()?.len() != expected {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("expected {expected} columns"),
        });
    }
    let bad = |m: String| Error::Schema {
        path: path.to_path_buf(),
        message: m,
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let grid: u32 = rec[0]
            .parse()
            .map_err(|_| bad(format!("grid {:?}", &rec[0])))?;
        let year: i32 = rec[1]
            .parse()
            .map_err(|_| bad(format!("year {:?}", &rec[1])))?;
        let mut f = GridYearFeatures::zeros(GridId::new(grid)?, year);
        let vals: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("value {s:?}"))))
            .collect::<Result<_>>()?;
        for t in 0..8 {
            f.counts[t] = vals[3 * t] as u32;
            f.binary[t] = vals[3 * t + 1] as u8;
            f.damage[t] = vals[3 * t + 2];
        }
        f.year_feature = vals[TYPE_FEATURES];
        out.push(f);
    }
    Ok(out)
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_number(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid;
    use crate::ingest::GeoEvent;

    fn ev(id: &str, t: DisasterType, year: i32, lat: f64, damage: Option<f64>) -> GeoEvent {
        GeoEvent {
            record_id: id.into(),
            disaster_type: t,
            year,
            lat,
            lon: 3.5,
            location_name: "x".into(),
            country: None,
            damage_cost: damage,
            grid: geogrid::locate(lat, 3.5).unwrap(),
        }
    }

    #[test]
    fn three_event_fixture() {
        let table = EventTable::from_events(vec![
            ev("1", DisasterType::Flood, 2001, 1.2, Some(1.0e6)),
            ev("2", DisasterType::Flood, 2001, 1.7, None),
            ev("3", DisasterType::Storm, 2001, 1.1, None),
            ev("4", DisasterType::Flood, 2002, 1.1, Some(9.0)),
        ])
        .unwrap();
        let g = geogrid::locate(1.5, 3.5).unwrap();
        let f = aggregate_year(&table, g, 2001);
        assert_eq!(f.count(DisasterType::Flood), 2);
        assert_eq!(f.flag(DisasterType::Flood), 1);
        assert_eq!(f.damage(DisasterType::Flood), 1.0e6);
        assert_eq!(f.count(DisasterType::Storm), 1);
        assert_eq!(f.flag(DisasterType::Storm), 1);
        assert_eq!(f.damage(DisasterType::Storm), 0.0);
        let v = f.to_vector();
        assert_eq!(v.len(), 25);
        let nonzero: Vec<usize> = (0..24).filter(|&i| v[i] != 0.0).collect();
        assert_eq!(nonzero, vec![0, 1, 2, 3, 4]);
        assert_eq!(v[24], 2001.0);
    }

    #[test]
    fn quiet_year_is_all_zero() {
        let g = geogrid::locate(0.0, 0.0).unwrap();
        let f = aggregate_year(&EventTable::default(), g, 1977);
        assert!(f.to_vector()[..24].iter().all(|v| *v == 0.0));
        assert_eq!(f.year_feature, 1977.0);
    }

    #[test]
    fn single_earthquake() {
        let table = EventTable::from_events(vec![ev(
            "1",
            DisasterType::Earthquake,
            1990,
            5.5,
            Some(2.5e7),
        )])
        .unwrap();
        let f = aggregate_year(&table, table.events()[0].grid, 1990);
        let v = f.to_vector();
        assert_eq!(&v[6..9], &[1.0, 1.0, 2.5e7]);
        assert_eq!(v[..24].iter().filter(|x| **x != 0.0).count(), 3);
    }

    #[test]
    fn names_line_up() {
        let names = feature_names();
        assert_eq!(names.len(), STAT_FEATURES);
        assert_eq!(names[flood_binary_index()], "flood_binary");
        assert_eq!(names[23], "mass_movement_dry_damage");
    }

    #[test]
    fn matrix_is_dense_and_csv_round_trips() {
        let table = EventTable::from_events(vec![
            ev("1", DisasterType::Flood, 2001, 1.2, Some(0.1)),
            ev("2", DisasterType::Drought, 2003, 7.2, None),
        ])
        .unwrap();
        let grids: BTreeSet<_> = table.events().iter().map(|e| e.grid).collect();
        let rows = feature_matrix(&table, &grids, StudyWindow::new(2001, 2003).unwrap());
        assert_eq!(rows.len(), 6);
        assert!(rows
            .windows(2)
            .all(|w| (w[0].grid, w[0].year) < (w[1].grid, w[1].year)));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_csv(&rows, &p).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
    }
}
