//! Station/day panels of PM observations and the train/test views cut from them.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A monitoring site in planar km coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub x: f64,
    pub y: f64,
    /// Region label; `None` until assigned from a [`RegionGrid`].
    pub region: Option<String>,
}

impl Station {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Self {
        Station {
            id: id.into(),
            x,
            y,
            region: None,
        }
    }

    pub fn with_region(mut self, region: impl Into<String>) -> Self {
        self.region = Some(region.into());
        self
    }

    pub fn location(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// One station-day record. `station` and `day` index into the owning
/// [`Dataset`]'s station list and day labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub station: usize,
    pub day: usize,
    pub pm: f64,
    pub aod: f64,
    pub covariates: Vec<f64>,
}

/// A station/day panel. Days are dense indices into `day_labels`, which
/// keeps the original (calendar or integer) day identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    stations: Vec<Station>,
    observations: Vec<Observation>,
    covariate_names: Vec<String>,
    day_labels: Vec<i64>,
}

impl Dataset {
    /// Structural checks only; see [`validate_dataset`] for count filtering.
    pub fn new(
        stations: Vec<Station>,
        observations: Vec<Observation>,
        covariate_names: Vec<String>,
        day_labels: Vec<i64>,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &stations {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidValue(format!("station id {} repeated", s.id)));
            }
            if !(s.x.is_finite() && s.y.is_finite()) {
                return Err(Error::NonFinite(format!("coordinates of station {}", s.id)));
            }
        }
        let mut labels = HashSet::new();
        if let Some(dup) = day_labels.iter().find(|&&d| !labels.insert(d)) {
            return Err(Error::InvalidValue(format!("day label {dup} repeated")));
        }
        let p = covariate_names.len();
        for (row, o) in observations.iter().enumerate() {
            if o.station >= stations.len() {
                return Err(Error::UnknownStation(format!("index {} (row {row})", o.station)));
            }
            if o.day >= day_labels.len() {
                return Err(Error::InvalidValue(format!("day index {} (row {row})", o.day)));
            }
            if o.covariates.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: o.covariates.len(),
                });
            }
            if !o.pm.is_finite() || !o.aod.is_finite() || o.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("row {row}")));
            }
        }
        Ok(Dataset {
            stations,
            observations,
            covariate_names,
            day_labels,
        })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn day_labels(&self) -> &[i64] {
        &self.day_labels
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn day_count(&self) -> usize {
        self.day_labels.len()
    }

    /// Number of distinct region labels among stations (unassigned ones excluded).
    pub fn region_count(&self) -> usize {
        self.stations
            .iter()
            .filter_map(|s| s.region.as_deref())
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn station_lookup(&self) -> HashMap<&str, usize> {
        self.stations
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn day_index(&self, label: i64) -> Option<usize> {
        self.day_labels.iter().position(|&d| d == label)
    }

    pub fn station_of(&self, row: usize) -> &Station {
        &self.stations[self.observations[row].station]
    }

    pub fn response(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.pm).collect()
    }

    /// Returns a copy whose station list is replaced, index for index.
    pub fn with_stations(&self, stations: Vec<Station>) -> Result<Dataset> {
        if stations.len() != self.stations.len() {
            return Err(Error::DimensionMismatch {
                expected: self.stations.len(),
                got: stations.len(),
            });
        }
        Dataset::new(
            stations,
            self.observations.clone(),
            self.covariate_names.clone(),
            self.day_labels.clone(),
        )
    }

    /// Sub-panel made of the given rows. Stations and days that no longer
    /// appear are dropped; the remaining ones keep their relative order.
    pub fn subset_rows(&self, rows: &[usize]) -> Dataset {
        let mut keep_station = vec![false; self.stations.len()];
        let mut keep_day = vec![false; self.day_labels.len()];
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &r in &sorted {
            keep_station[self.observations[r].station] = true;
            keep_day[self.observations[r].day] = true;
        }
        let station_map = reindex(&keep_station);
        let day_map = reindex(&keep_day);
        let stations = self
            .stations
            .iter()
            .zip(&keep_station)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect();
        let day_labels = self
            .day_labels
            .iter()
            .zip(&keep_day)
            .filter(|(_, &k)| k)
            .map(|(&d, _)| d)
            .collect();
        let observations = sorted
            .iter()
            .map(|&r| {
                let o = &self.observations[r];
                Observation {
                    station: station_map[o.station],
                    day: day_map[o.day],
                    ..o.clone()
                }
            })
            .collect();
        Dataset {
            stations,
            observations,
            covariate_names: self.covariate_names.clone(),
            day_labels,
        }
    }

    /// Row indices grouped by day index.
    pub fn rows_by_day(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.day_labels.len()];
        for (r, o) in self.observations.iter().enumerate() {
            out[o.day].push(r);
        }
        out
    }

    /// Row indices grouped by station index.
    pub fn rows_by_station(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.stations.len()];
        for (r, o) in self.observations.iter().enumerate() {
            out[o.station].push(r);
        }
        out
    }
}

fn reindex(keep: &[bool]) -> Vec<usize> {
    let mut next = 0;
    keep.iter()
        .map(|&k| {
            let idx = next;
            if k {
                next += 1;
            }
            idx
        })
        .collect()
}

/// Drops sparse days and stations until every retained day has at least
/// `min_per_day` observations and every retained station `min_per_station`.
///
/// Dropping days can push stations under their threshold and vice versa, so
/// the two passes repeat until nothing changes.
pub fn validate_dataset(raw: &Dataset, min_per_day: usize, min_per_station: usize) -> Result<Dataset> {
    let mut seen = HashSet::with_capacity(raw.n_obs());
    for o in &raw.observations {
        if !seen.insert((o.station, o.day)) {
            return Err(Error::DuplicateKey {
                station: raw.stations[o.station].id.clone(),
                day: raw.day_labels[o.day],
            });
        }
    }

    let mut alive = vec![true; raw.n_obs()];
    loop {
        let mut changed = false;
        let mut per_day = vec![0usize; raw.day_count()];
        for (o, _) in raw.observations.iter().zip(&alive).filter(|(_, &a)| a) {
            per_day[o.day] += 1;
        }
        for (o, a) in raw.observations.iter().zip(alive.iter_mut()) {
            if *a && per_day[o.day] < min_per_day {
                *a = false;
                changed = true;
            }
        }
        let mut per_station = vec![0usize; raw.stations.len()];
        for (o, _) in raw.observations.iter().zip(&alive).filter(|(_, &a)| a) {
            per_station[o.station] += 1;
        }
        for (o, a) in raw.observations.iter().zip(alive.iter_mut()) {
            if *a && per_station[o.station] < min_per_station {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let rows: Vec<usize> = (0..raw.n_obs()).filter(|&r| alive[r]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyAfterFilter {
            min_per_day,
            min_per_station,
        });
    }
    Ok(raw.subset_rows(&rows))
}

/// Square tessellation used to define regions when the input has none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub cell_size: f64,
    pub origin: (f64, f64),
}

impl RegionGrid {
    pub fn new(cell_size: f64, origin: (f64, f64)) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidValue(format!("region cell size {cell_size}")));
        }
        Ok(RegionGrid { cell_size, origin })
    }

    /// Half-open cell indices: a point on a boundary goes to the higher cell.
    pub fn cell(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.origin.0) / self.cell_size).floor() as i64,
            ((y - self.origin.1) / self.cell_size).floor() as i64,
        )
    }

    pub fn label(&self, x: f64, y: f64) -> String {
        let (i, j) = self.cell(x, y);
        format!("cell_{i}_{j}")
    }
}

/// Fills missing region labels from `grid`; explicit labels are kept.
pub fn assign_regions(stations: &[Station], grid: &RegionGrid) -> Vec<Station> {
    stations
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if s.region.is_none() {
                s.region = Some(grid.label(s.x, s.y));
            }
            s
        })
        .collect()
}

/// Splits rows into (train, test). Rows of `dropped` stations land in neither.
pub fn split_by_stations(
    data: &Dataset,
    test_stations: &BTreeSet<String>,
    dropped_stations: &BTreeSet<String>,
) -> Result<(Dataset, Dataset)> {
    let lookup = data.station_lookup();
    for id in test_stations.iter().chain(dropped_stations) {
        if !lookup.contains_key(id.as_str()) {
            return Err(Error::UnknownStation(id.clone()));
        }
    }
    if let Some(both) = test_stations.intersection(dropped_stations).next() {
        return Err(Error::OverlappingSets(format!("{both} is both test and dropped")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, o) in data.observations.iter().enumerate() {
        let id = &data.stations[o.station].id;
        if test_stations.contains(id) {
            test.push(r);
        } else if !dropped_stations.contains(id) {
            train.push(r);
        }
    }
    Ok((data.subset_rows(&train), data.subset_rows(&test)))
}
