//! Delimited trip files.
//!
//! Two column profiles are understood, selected by [`TripProfile`]:
//!
//! * `latlon`: `start_time, end_time, start_lon, start_lat, end_lon, end_lat`
//! * `station`: `start_time, end_time, start_station_id, end_station_id`,
//!   plus a station table with `station_id, lon, lat`.
//!
//! Columns are located by header name; a few spellings used by public
//! bike-share exports are accepted as aliases. Rows that fail to parse are
//! counted as malformed and skipped.

use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use csv::StringRecord;
use serde::{Deserialize, Serialize};

use super::{Binner, DemandTensor, GeoPoint, GridSpec, IngestReport, Location, StationTable, TripRecord};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripProfile {
    Latlon,
    Station,
}

impl FromStr for TripProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latlon" => Ok(TripProfile::Latlon),
            "station" => Ok(TripProfile::Station),
            other => Err(Error::Config(format!("unknown trip profile {other:?} (expected latlon or station)"))),
        }
    }
}

const START_TIME: &[&str] = &["start_time", "started_at", "starttime", "start date"];
const END_TIME: &[&str] = &["end_time", "ended_at", "stoptime", "end date"];
const START_LON: &[&str] = &["start_lon", "start_lng", "start station longitude"];
const START_LAT: &[&str] = &["start_lat", "start station latitude"];
const END_LON: &[&str] = &["end_lon", "end_lng", "end station longitude"];
const END_LAT: &[&str] = &["end_lat", "end station latitude"];
const START_STATION: &[&str] = &["start_station_id", "start station id", "start station number"];
const END_STATION: &[&str] = &["end_station_id", "end station id", "end station number"];

fn column(headers: &StringRecord, names: &[&str]) -> Result<usize> {
    headers
        .iter()
        .position(|h| {
            let h = h.trim().to_ascii_lowercase();
            names.iter().any(|n| *n == h)
        })
        .ok_or_else(|| Error::Data(format!("trip file has no {:?} column", names[0])))
}

/// Parse an ISO-8601 timestamp into Unix seconds. Timestamps without an
/// explicit offset are taken to be in the dataset's local time.
pub fn parse_timestamp(s: &str, utc_offset_s: i64) -> Option<i64> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp());
    }
    const FORMATS: &[&str] = &["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc().timestamp() - utc_offset_s)
}

struct Columns {
    start: usize,
    end: usize,
    origin: (usize, usize),
    destination: (usize, usize),
}

pub struct TripReader<R: Read> {
    rows: csv::StringRecordsIntoIter<R>,
    profile: TripProfile,
    columns: Columns,
    utc_offset_s: i64,
}

impl<R: Read> TripReader<R> {
    /// `Ok(None)` for an input without even a header row.
    pub fn new(reader: R, profile: TripProfile, utc_offset_s: i64) -> Result<Option<Self>> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() {
            return Ok(None);
        }
        let columns = match profile {
            TripProfile::Latlon => Columns {
                start: column(&headers, START_TIME)?,
                end: column(&headers, END_TIME)?,
                origin: (column(&headers, START_LON)?, column(&headers, START_LAT)?),
                destination: (column(&headers, END_LON)?, column(&headers, END_LAT)?),
            },
            TripProfile::Station => {
                let o = column(&headers, START_STATION)?;
                let d = column(&headers, END_STATION)?;
                Columns {
                    start: column(&headers, START_TIME)?,
                    end: column(&headers, END_TIME)?,
                    origin: (o, o),
                    destination: (d, d),
                }
            }
        };
        Ok(Some(TripReader {
            rows: rdr.into_records(),
            profile,
            columns,
            utc_offset_s,
        }))
    }

    fn parse(&self, row: &StringRecord) -> Option<TripRecord> {
        let c = &self.columns;
        let start_time = parse_timestamp(row.get(c.start)?, self.utc_offset_s)?;
        let end_time = parse_timestamp(row.get(c.end)?, self.utc_offset_s)?;
        let loc = |(a, b): (usize, usize)| -> Option<Location> {
            match self.profile {
                TripProfile::Latlon => Some(Location::Point(GeoPoint {
                    lon: row.get(a)?.trim().parse().ok()?,
                    lat: row.get(b)?.trim().parse().ok()?,
                })),
                TripProfile::Station => {
                    let id = row.get(a)?.trim();
                    (!id.is_empty()).then(|| Location::Station(id.to_string()))
                }
            }
        };
        Some(TripRecord {
            start_time,
            end_time,
            origin: loc(c.origin)?,
            destination: loc(c.destination)?,
        })
    }
}

impl<R: Read> Iterator for TripReader<R> {
    /// `None` marks a malformed row.
    type Item = Option<TripRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let row = self.rows.next()?;
        Some(row.ok().and_then(|r| self.parse(&r)))
    }
}

/// Stream a trip file into a demand tensor over `[spec.t0, t_end)`.
pub fn ingest_csv<R: Read>(
    reader: R,
    profile: TripProfile,
    spec: &GridSpec,
    t_end: i64,
) -> Result<(DemandTensor, IngestReport)> {
    if profile == TripProfile::Station && spec.stations.is_none() {
        return Err(Error::Config("the station profile needs a station table".into()));
    }
    let mut binner = Binner::new(spec, t_end)?;
    let Some(trips) = TripReader::new(reader, profile, spec.utc_offset_s)? else {
        return Ok(binner.finish());
    };
    for trip in trips {
        match trip {
            Some(t) => binner.push(&t),
            None => binner.push_malformed(),
        }
    }
    Ok(binner.finish())
}

pub fn read_station_table(path: &Path) -> Result<StationTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let id = column(&headers, &["station_id", "id"])?;
    let lon = column(&headers, &["lon", "lng", "longitude"])?;
    let lat = column(&headers, &["lat", "latitude"])?;
    let mut table = StationTable::new();
    for row in rdr.records() {
        let row = row?;
        let parse = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Data(format!("bad coordinate in station table row {:?}", row)))
        };
        table.insert(
            row.get(id).unwrap_or_default().trim().to_string(),
            GeoPoint { lon: parse(lon)?, lat: parse(lat)? },
        );
    }
    Ok(table)
}
