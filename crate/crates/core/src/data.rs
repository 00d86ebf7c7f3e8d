//! Long-format ordinal response data.
//!
//! The on-disk format is a CSV with header `unit_id,item_id,time,response`.
//! Units and items are indexed in lexicographic order of their ids, and every
//! subset derived from a dataset (splits, masks) keeps the parent's index maps
//! so that model parameters stay aligned.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["unit_id", "item_id", "time", "response"];

/// One observed response `y_ijt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub unit: usize,
    pub item: usize,
    pub time: f64,
    /// 1-based ordinal level.
    pub response: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDataset {
    units: Vec<String>,
    items: Vec<String>,
    num_levels: usize,
    observations: Vec<Observation>,
    trait_map: Option<BTreeMap<String, String>>,
}

impl ResponseDataset {
    /// Builds a dataset over explicit unit/item vocabularies.
    pub fn new(
        units: Vec<String>,
        items: Vec<String>,
        num_levels: usize,
        observations: Vec<Observation>,
    ) -> Result<Self> {
        if num_levels == 0 {
            return Err(Error::Data("number of levels must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(observations.len());
        for obs in &observations {
            if obs.unit >= units.len() || obs.item >= items.len() {
                return Err(Error::Data(format!(
                    "observation indices ({}, {}) outside {} units x {} items",
                    obs.unit,
                    obs.item,
                    units.len(),
                    items.len()
                )));
            }
            if !obs.time.is_finite() {
                return Err(Error::Data(format!("non-finite time {}", obs.time)));
            }
            if obs.response == 0 || obs.response > num_levels {
                return Err(Error::Data(format!(
                    "response {} outside 1..={num_levels} (unit {}, item {})",
                    obs.response, units[obs.unit], items[obs.item]
                )));
            }
            if !seen.insert((obs.unit, obs.item, obs.time.to_bits())) {
                return Err(Error::Data(format!(
                    "duplicate observation for unit {}, item {}, time {}",
                    units[obs.unit], items[obs.item], obs.time
                )));
            }
        }
        Ok(Self {
            units,
            items,
            num_levels,
            observations,
            trait_map: None,
        })
    }

    /// Builds a dataset from string-keyed records, indexing units and items
    /// lexicographically. `num_levels` defaults to the largest response.
    pub fn from_records(
        records: &[(String, String, f64, usize)],
        num_levels: Option<usize>,
    ) -> Result<Self> {
        let units: Vec<String> = records
            .iter()
            .map(|r| r.0.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let items: Vec<String> = records
            .iter()
            .map(|r| r.1.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let observed_max = records.iter().map(|r| r.3).max().unwrap_or(0);
        let num_levels = match num_levels {
            Some(c) => c,
            None if records.is_empty() => 1,
            None => observed_max,
        };
        let unit_index = |id: &str| units.binary_search_by(|u| u.as_str().cmp(id)).unwrap();
        let item_index = |id: &str| items.binary_search_by(|u| u.as_str().cmp(id)).unwrap();
        let observations = records
            .iter()
            .map(|(u, i, t, y)| Observation {
                unit: unit_index(u),
                item: item_index(i),
                time: *t,
                response: *y,
            })
            .collect();
        Self::new(units.clone(), items.clone(), num_levels, observations)
    }

    /// Same vocabularies and levels, different observations.
    pub fn with_observations(&self, observations: Vec<Observation>) -> Result<Self> {
        let mut out = Self::new(
            self.units.clone(),
            self.items.clone(),
            self.num_levels,
            observations,
        )?;
        out.trait_map = self.trait_map.clone();
        Ok(out)
    }

    pub fn filter<P: FnMut(&Observation) -> bool>(&self, mut keep: P) -> Self {
        Self {
            units: self.units.clone(),
            items: self.items.clone(),
            num_levels: self.num_levels,
            observations: self
                .observations
                .iter()
                .filter(|o| keep(o))
                .copied()
                .collect(),
            trait_map: self.trait_map.clone(),
        }
    }

    pub fn with_trait_map(mut self, trait_map: BTreeMap<String, String>) -> Result<Self> {
        if let Some(item) = self.items.iter().find(|i| !trait_map.contains_key(*i)) {
            return Err(Error::Data(format!("item {item} has no trait label")));
        }
        self.trait_map = Some(trait_map);
        Ok(self)
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn trait_map(&self) -> Option<&BTreeMap<String, String>> {
        self.trait_map.as_ref()
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    /// `(min, max)` observed time of a unit, `None` if it has no rows.
    pub fn time_range(&self, unit: usize) -> Option<(f64, f64)> {
        self.observations
            .iter()
            .filter(|o| o.unit == unit)
            .fold(None, |acc, o| match acc {
                None => Some((o.time, o.time)),
                Some((lo, hi)) => Some((lo.min(o.time), hi.max(o.time))),
            })
    }

    /// Observation count per unit.
    pub fn unit_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.units.len()];
        for o in &self.observations {
            counts[o.unit] += 1;
        }
        counts
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(CSV_HEADER)?;
        for o in &self.observations {
            writer.write_record([
                self.units[o.unit].as_str(),
                self.items[o.item].as_str(),
                &o.time.to_string(),
                &o.response.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Reads a long-format response CSV.
pub fn ingest_csv<P: AsRef<Path>>(path: P, num_levels: Option<usize>) -> Result<ResponseDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != CSV_HEADER {
        return Err(Error::Data(format!(
            "{}: expected header {}, found {}",
            path.display(),
            CSV_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut records = Vec::new();
    for (row, record) in reader.records().enumerate() {
        // header is line 1
        let line = row + 2;
        let record =
            record.map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
        if record.len() != 4 {
            return Err(Error::Data(format!(
                "{} line {line}: expected 4 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        let time: f64 = record[2].parse().map_err(|_| {
            Error::Data(format!(
                "{} line {line}: bad time '{}'",
                path.display(),
                &record[2]
            ))
        })?;
        let response: usize = record[3].parse().map_err(|_| {
            Error::Data(format!(
                "{} line {line}: bad response '{}'",
                path.display(),
                &record[3]
            ))
        })?;
        if response == 0 {
            return Err(Error::Data(format!(
                "{} line {line}: response levels start at 1",
                path.display()
            )));
        }
        records.push((record[0].to_owned(), record[1].to_owned(), time, response));
    }
    ResponseDataset::from_records(&records, num_levels)
}

/// Reads an `item_id,trait` CSV.
pub fn ingest_trait_map<P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::Data(
                "trait map rows need exactly item_id,trait".into(),
            ));
        }
        map.insert(record[0].to_owned(), record[1].to_owned());
    }
    Ok(map)
}
