//! Sparse spatio-temporal observations with per-entry error variances.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One observed value at a (location, time) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsEntry {
    pub location: usize,
    pub time: usize,
    pub value: f64,
    pub error_sd: f64,
}

/// Sparse spatio-temporal observations. Locations and times index into the
/// field layout of [`crate::kron::FieldVector`]. `time_sd` records dating
/// uncertainty as metadata; it does not enter any covariance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObservationSet {
    entries: Vec<ObsEntry>,
    pub time_sd: Option<Vec<f64>>,
}

impl ObservationSet {
    pub fn new(entries: Vec<ObsEntry>) -> Result<Self> {
        for e in &entries {
            if !e.value.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite observation at location {} time {}",
                    e.location, e.time
                )));
            }
            if !(e.error_sd.is_finite() && e.error_sd >= 0.0) {
                return Err(Error::Data(format!(
                    "invalid error sd {} at location {} time {}",
                    e.error_sd, e.location, e.time
                )));
            }
        }
        Ok(ObservationSet {
            entries,
            time_sd: None,
        })
    }

    pub fn entries(&self) -> &[ObsEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Distinct observed locations, ascending. Every returned location has at
    /// least one observed time point.
    pub fn observed_locations(&self) -> Vec<usize> {
        let mut locs: Vec<usize> = self.entries.iter().map(|e| e.location).collect();
        locs.sort_unstable();
        locs.dedup();
        locs
    }

    /// Number of observed time points at `location`.
    pub fn count_at(&self, location: usize) -> usize {
        self.entries.iter().filter(|e| e.location == location).count()
    }

    /// Entries at one location, ordered by time.
    pub fn at_location(&self, location: usize) -> Vec<ObsEntry> {
        let mut v: Vec<ObsEntry> = self
            .entries
            .iter()
            .copied()
            .filter(|e| e.location == location)
            .collect();
        v.sort_by_key(|e| e.time);
        v
    }

    /// Restrict to a subset of locations.
    pub fn restrict(&self, locations: &[usize]) -> ObservationSet {
        ObservationSet {
            entries: self
                .entries
                .iter()
                .copied()
                .filter(|e| locations.contains(&e.location))
                .collect(),
            time_sd: self.time_sd.clone(),
        }
    }

    /// Mean observation-error variance per time index, over all entries at
    /// that time; times with no entries get the global mean. Used to build a
    /// diagonal temporal observation-error factor shared across locations.
    pub fn temporal_error_variances(&self, n_times: usize) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(Error::Data("no observations".into()));
        }
        let mut per_time: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut total = 0.0;
        for e in &self.entries {
            if e.time >= n_times {
                return Err(Error::Index(format!(
                    "observation time {} exceeds axis length {}",
                    e.time, n_times
                )));
            }
            let v = e.error_sd * e.error_sd;
            total += v;
            let slot = per_time.entry(e.time).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
        }
        let global = total / self.entries.len() as f64;
        Ok((0..n_times)
            .map(|t| match per_time.get(&t) {
                Some((s, k)) => s / *k as f64,
                None => global,
            })
            .collect())
    }
}
