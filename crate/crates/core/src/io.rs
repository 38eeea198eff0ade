//! CSV panels, coordinate projection and atomic file output.
//!
//! Panel schema: `station_id, x_km, y_km, day, pm25, aod`, an optional
//! `region_id`, and any further columns as covariates in file order.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::domain::{assign_regions, validate_dataset, Dataset, Observation, RegionGrid, Station};
use crate::error::{Error, Result};
use crate::models::Target;

pub const REQUIRED_COLUMNS: [&str; 6] = ["station_id", "x_km", "y_km", "day", "pm25", "aod"];
pub const REGION_COLUMN: &str = "region_id";

/// Equirectangular projection around latitude `lat0`, in km.
pub fn project_lonlat(lon: f64, lat: f64, lat0: f64) -> Result<(f64, f64)> {
    if !(lat.abs() < 89.0) {
        return Err(Error::InvalidValue(format!("latitude {lat}")));
    }
    Ok((111.320 * lat0.to_radians().cos() * lon, 110.574 * lat))
}

struct Columns {
    index: HashMap<String, usize>,
    covariates: Vec<(String, usize)>,
}

impl Columns {
    fn new(header: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let index: HashMap<String, usize> = header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        if index.len() != header.len() {
            return Err(Error::Schema("duplicate column name".into()));
        }
        for name in required {
            if !index.contains_key(*name) {
                return Err(Error::Schema((*name).to_string()));
            }
        }
        let covariates = header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .filter(|(h, _)| !REQUIRED_COLUMNS.contains(&h.as_str()) && h != REGION_COLUMN)
            .collect();
        Ok(Columns { index, covariates })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index.get(name).and_then(|&i| rec.get(i)).map(str::trim)
    }
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn field<'r>(cols: &Columns, rec: &'r csv::StringRecord, name: &str) -> Result<&'r str> {
    cols.get(rec, name).ok_or_else(|| Error::Parse {
        line: line_of(rec),
        message: format!("missing field {name}"),
    })
}

fn number(rec: &csv::StringRecord, name: &str, text: &str) -> Result<f64> {
    text.parse::<f64>().map_err(|_| Error::Parse {
        line: line_of(rec),
        message: format!("{name}: cannot parse {text:?} as a number"),
    })
}

fn day_label(rec: &csv::StringRecord, text: &str) -> Result<i64> {
    text.parse::<i64>().map_err(|_| Error::Parse {
        line: line_of(rec),
        message: format!("day: cannot parse {text:?} as an integer"),
    })
}

fn records<R: Read>(reader: R) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        match rec {
            Ok(r) => rows.push(r),
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                return Err(Error::Parse {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok((header, rows))
}

/// Parses a panel without filtering. Stations keep their order of first
/// appearance and days are sorted; an empty `region_id` cell means none.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let (header, rows) = records(reader)?;
    let cols = Columns::new(&header, &REQUIRED_COLUMNS)?;
    let mut stations: Vec<Station> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut days = BTreeSet::new();
    let mut raw = Vec::with_capacity(rows.len());
    for rec in &rows {
        let id = field(&cols, rec, "station_id")?;
        if id.is_empty() {
            return Err(Error::Parse {
                line: line_of(rec),
                message: "empty station_id".into(),
            });
        }
        let x = number(rec, "x_km", field(&cols, rec, "x_km")?)?;
        let y = number(rec, "y_km", field(&cols, rec, "y_km")?)?;
        let region = cols
            .get(rec, REGION_COLUMN)
            .filter(|r| !r.is_empty())
            .map(str::to_string);
        let s = match lookup.get(id) {
            Some(&s) => {
                let st = &stations[s];
                if st.x != x || st.y != y || st.region != region {
                    return Err(Error::Parse {
                        line: line_of(rec),
                        message: format!("station {id} changes location or region"),
                    });
                }
                s
            }
            None => {
                let mut st = Station::new(id, x, y);
                st.region = region;
                stations.push(st);
                lookup.insert(id.to_string(), stations.len() - 1);
                stations.len() - 1
            }
        };
        let day = day_label(rec, field(&cols, rec, "day")?)?;
        days.insert(day);
        let pm = number(rec, "pm25", field(&cols, rec, "pm25")?)?;
        let aod = number(rec, "aod", field(&cols, rec, "aod")?)?;
        let covariates = cols
            .covariates
            .iter()
            .map(|(name, _)| number(rec, name, field(&cols, rec, name)?))
            .collect::<Result<Vec<f64>>>()?;
        raw.push((s, day, pm, aod, covariates));
    }
    let day_labels: Vec<i64> = days.into_iter().collect();
    let day_pos: HashMap<i64, usize> = day_labels.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let observations = raw
        .into_iter()
        .map(|(station, day, pm, aod, covariates)| Observation {
            station,
            day: day_pos[&day],
            pm,
            aod,
            covariates,
        })
        .collect();
    let names = cols.covariates.into_iter().map(|(n, _)| n).collect();
    Dataset::new(stations, observations, names, day_labels)
}

/// Reads, labels regions where the file has none, and filters sparse days
/// and stations.
pub fn ingest_csv(path: &Path, grid: &RegionGrid, min_per_day: usize, min_per_station: usize) -> Result<Dataset> {
    let raw = read_dataset(fs::File::open(path)?)?;
    let raw = if raw.stations().iter().any(|s| s.region.is_none()) {
        raw.with_stations(assign_regions(raw.stations(), grid))?
    } else {
        raw
    };
    validate_dataset(&raw, min_per_day, min_per_station)
}

/// Writes rows in dataset order; `region_id` is included when any station
/// has one.
pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let with_region = data.stations().iter().any(|s| s.region.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    if with_region {
        header.push(REGION_COLUMN.into());
    }
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for o in data.observations() {
        let s = &data.stations()[o.station];
        let mut rec = vec![
            s.id.clone(),
            s.x.to_string(),
            s.y.to_string(),
            data.day_labels()[o.day].to_string(),
            o.pm.to_string(),
            o.aod.to_string(),
        ];
        if with_region {
            rec.push(s.region.clone().unwrap_or_default());
        }
        rec.extend(o.covariates.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Prediction targets: the panel schema with `pm25` optional; covariate
/// columns are matched to `covariate_names` by name.
pub fn read_targets<R: Read>(reader: R, covariate_names: &[String]) -> Result<Vec<Target>> {
    let (header, rows) = records(reader)?;
    let required = ["station_id", "x_km", "y_km", "day", "aod"];
    let cols = Columns::new(&header, &required)?;
    for name in covariate_names {
        if !cols.index.contains_key(name) {
            return Err(Error::Schema(name.clone()));
        }
    }
    rows.iter()
        .map(|rec| {
            Ok(Target {
                label: field(&cols, rec, "station_id")?.to_string(),
                x: number(rec, "x_km", field(&cols, rec, "x_km")?)?,
                y: number(rec, "y_km", field(&cols, rec, "y_km")?)?,
                day: day_label(rec, field(&cols, rec, "day")?)?,
                aod: number(rec, "aod", field(&cols, rec, "aod")?)?,
                covariates: covariate_names
                    .iter()
                    .map(|n| number(rec, n, field(&cols, rec, n)?))
                    .collect::<Result<_>>()?,
                region: cols
                    .get(rec, REGION_COLUMN)
                    .filter(|r| !r.is_empty())
                    .map(str::to_string),
            })
        })
        .collect()
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidValue(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Renders with `render` into memory and writes atomically.
pub fn write_atomic_with<F>(path: &Path, render: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    render(&mut buf)?;
    write_atomic(path, &buf)
}
