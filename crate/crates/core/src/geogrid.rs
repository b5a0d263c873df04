//! 1°×1° latitude/longitude lattice and its dense integer encoding.
//!
//! Cells are addressed by the floor of their south-west corner. Ids are laid
//! out row-major starting from the (-90, -180) corner, so `0..64800` covers
//! the whole globe without gaps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAT_CELLS: i32 = 180;
pub const LON_CELLS: i32 = 360;
pub const CELL_COUNT: u32 = (LAT_CELLS * LON_CELLS) as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    lat_floor: i32,
    lon_floor: i32,
}

impl GridCell {
    pub fn new(lat_floor: i32, lon_floor: i32) -> Result<Self> {
        if !(-90..=89).contains(&lat_floor) || !(-180..=179).contains(&lon_floor) {
            return Err(Error::CellRange {
                lat_floor,
                lon_floor,
            });
        }
        Ok(Self {
            lat_floor,
            lon_floor,
        })
    }

    pub fn lat_floor(&self) -> i32 {
        self.lat_floor
    }

    pub fn lon_floor(&self) -> i32 {
        self.lon_floor
    }

    /// Centre of the cell in degrees.
    pub fn centre(&self) -> (f64, f64) {
        (self.lat_floor as f64 + 0.5, self.lon_floor as f64 + 0.5)
    }

    pub fn id(&self) -> GridId {
        grid_id(*self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct GridId(u32);

impl GridId {
    pub fn new(value: u32) -> Result<Self> {
        if value >= CELL_COUNT {
            return Err(Error::GridIdRange(value as i64));
        }
        Ok(GridId(value))
    }

    pub fn value(&self) -> u32 {
        self.0
    }

    pub fn cell(&self) -> GridCell {
        let lat = (self.0 / LON_CELLS as u32) as i32 - 90;
        let lon = (self.0 % LON_CELLS as u32) as i32 - 180;
        GridCell {
            lat_floor: lat,
            lon_floor: lon,
        }
    }
}

impl TryFrom<u32> for GridId {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        GridId::new(value)
    }
}

impl From<GridId> for u32 {
    fn from(id: GridId) -> u32 {
        id.0
    }
}

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cell containing `(lat, lon)`.
///
/// `lat = 90` is folded into the northernmost row and `lon = 180` wraps to
/// `-180`, so every valid coordinate lands in exactly one cell.
pub fn cell_of(lat: f64, lon: f64) -> Result<GridCell> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        // NaN fails both range checks and ends up here too.
        return Err(Error::CoordinateRange { lat, lon });
    }
    let lat_floor = (lat.floor() as i32).min(89);
    let mut lon_floor = lon.floor() as i32;
    if lon_floor == 180 {
        lon_floor = -180;
    }
    Ok(GridCell {
        lat_floor,
        lon_floor,
    })
}

pub fn grid_id(cell: GridCell) -> GridId {
    GridId(((cell.lat_floor + 90) * LON_CELLS + (cell.lon_floor + 180)) as u32)
}

pub fn cell_of_id(id: i64) -> Result<GridCell> {
    if !(0..CELL_COUNT as i64).contains(&id) {
        return Err(Error::GridIdRange(id));
    }
    Ok(GridId(id as u32).cell())
}

/// Convenience: grid id of the cell holding `(lat, lon)`.
pub fn locate(lat: f64, lon: f64) -> Result<GridId> {
    cell_of(lat, lon).map(grid_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(lat: i32, lon: i32) -> GridCell {
        GridCell::new(lat, lon).unwrap()
    }

    #[test]
    fn floors_fractions() {
        assert_eq!(cell_of(0.5, 0.5).unwrap(), cell(0, 0));
        assert_eq!(cell_of(-0.5, -0.5).unwrap(), cell(-1, -1));
    }

    #[test]
    fn boundary_clamps_and_wraps() {
        assert_eq!(cell_of(90.0, 180.0).unwrap(), cell(89, -180));
        assert_eq!(cell_of(-90.0, -180.0).unwrap(), cell(-90, -180));
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(
            cell_of(90.1, 0.0),
            Err(Error::CoordinateRange { .. })
        ));
        assert!(cell_of(0.0, -180.5).is_err());
        assert!(cell_of(f64::NAN, 0.0).is_err());
        assert!(GridCell::new(90, 0).is_err());
        assert!(GridCell::new(0, 180).is_err());
    }

    #[test]
    fn id_examples() {
        assert_eq!(grid_id(cell(0, 0)).value(), 32580);
        assert_eq!(grid_id(cell(-90, -180)).value(), 0);
        assert_eq!(grid_id(cell(89, 179)).value(), 64799);
        assert_eq!(cell_of_id(32580).unwrap(), cell(0, 0));
        assert_eq!(cell_of_id(0).unwrap(), cell(-90, -180));
        assert_eq!(cell_of_id(64799).unwrap(), cell(89, 179));
        assert!(matches!(cell_of_id(64800), Err(Error::GridIdRange(64800))));
        assert!(cell_of_id(-1).is_err());
    }

    #[test]
    fn serde_rejects_bad_ids() {
        let ok: GridId = serde_json::from_str("32580").unwrap();
        assert_eq!(ok.cell(), cell(0, 0));
        assert!(serde_json::from_str::<GridId>("70000").is_err());
    }

    proptest! {
        #[test]
        fn point_lies_in_its_cell(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0) {
            let c = cell_of(lat, lon).unwrap();
            if lat < 90.0 {
                prop_assert!(c.lat_floor() as f64 <= lat && lat < c.lat_floor() as f64 + 1.0);
            } else {
                prop_assert_eq!(c.lat_floor(), 89);
            }
            if lon < 180.0 {
                prop_assert!(c.lon_floor() as f64 <= lon && lon < c.lon_floor() as f64 + 1.0);
            } else {
                prop_assert_eq!(c.lon_floor(), -180);
            }
            prop_assert_eq!(cell_of_id(grid_id(c).value() as i64).unwrap(), c);
        }
    }
}
