//! Alarm datasets: loading, binning, vertical partitioning, stratified folds
//! and a synthetic generator.
//!
//! An observation is one 15-minute window on one microwave link. Each raw cell
//! holds the number of seconds an alarm was active in that window, so raw
//! values live in `0..=900`. Models consume the 4-level categorical binning
//! produced by [`bin_alarm_counts`].

mod folds;
mod io;
mod partition;
mod synthetic;

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{stratified_kfold, FoldPlan};
pub use io::{load_csv, read_csv, write_binned_csv, write_csv, CsvSchema};
pub use partition::{partition_features, FeatureGroups, FeaturePartition, ScenarioKind};
pub use synthetic::{generate_synthetic, DurationRange, GeneratorSpec, GroupSpec, SignatureAlarm, SyntheticData};

/// Length of an observation window in seconds.
pub const WINDOW_SECONDS: u16 = 900;

/// Number of categorical levels after binning.
pub const N_LEVELS: u8 = 4;

/// Failure cause of an observation. Serialized as the dataset's 1-based label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureClass {
    #[serde(rename = "IDU")]
    Idu,
    #[serde(rename = "ODU")]
    Odu,
    #[serde(rename = "Cable")]
    Cable,
    #[serde(rename = "Power")]
    Power,
}

impl FailureClass {
    pub const ALL: [FailureClass; 4] = [FailureClass::Idu, FailureClass::Odu, FailureClass::Cable, FailureClass::Power];
    pub const COUNT: usize = 4;

    /// Zero-based class index used by the models.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// 1-based label as it appears in the CSV `label` column.
    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_label(label: u8) -> Option<Self> {
        label.checked_sub(1).and_then(|i| Self::from_index(i as usize))
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FailureClass::Idu => "IDU",
            FailureClass::Odu => "ODU",
            FailureClass::Cable => "Cable",
            FailureClass::Power => "Power",
        };
        f.write_str(name)
    }
}

fn check_names(names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidDataset(format!("duplicate feature name `{name}`")));
        }
    }
    Ok(())
}

/// Raw alarm-activity matrix with one failure label per observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmDataset {
    feature_names: Vec<String>,
    raw: Array2<u16>,
    labels: Vec<FailureClass>,
}

impl AlarmDataset {
    pub fn new(feature_names: Vec<String>, raw: Array2<u16>, labels: Vec<FailureClass>) -> Result<Self> {
        if raw.ncols() != feature_names.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                raw.ncols()
            )));
        }
        if raw.nrows() != labels.len() {
            return Err(Error::InvalidDataset(format!("{} labels for {} rows", labels.len(), raw.nrows())));
        }
        check_names(&feature_names)?;
        if let Some(((r, c), v)) = raw.indexed_iter().find(|(_, &v)| v > WINDOW_SECONDS) {
            return Err(Error::InvalidDataset(format!(
                "cell ({r}, {}) = {v} outside [0, {WINDOW_SECONDS}]",
                feature_names[c]
            )));
        }
        Ok(Self { feature_names, raw, labels })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn raw(&self) -> &Array2<u16> {
        &self.raw
    }

    pub fn labels(&self) -> &[FailureClass] {
        &self.labels
    }

    pub fn n_obs(&self) -> usize {
        self.raw.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.raw.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.raw.dim()
    }

    /// Observation count per class, indexed by [`FailureClass::index`].
    pub fn class_counts(&self) -> [usize; FailureClass::COUNT] {
        class_counts(&self.labels)
    }
}

/// Alarm dataset after categorical binning; cells are in `0..4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedDataset {
    feature_names: Vec<String>,
    cells: Array2<u8>,
    labels: Vec<FailureClass>,
}

impl BinnedDataset {
    pub fn new(feature_names: Vec<String>, cells: Array2<u8>, labels: Vec<FailureClass>) -> Result<Self> {
        if cells.ncols() != feature_names.len() || cells.nrows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "shape {:?} does not match {} names / {} labels",
                cells.dim(),
                feature_names.len(),
                labels.len()
            )));
        }
        check_names(&feature_names)?;
        if cells.iter().any(|&v| v >= N_LEVELS) {
            return Err(Error::InvalidDataset("binned cell outside 0..4".into()));
        }
        Ok(Self { feature_names, cells, labels })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn cells(&self) -> &Array2<u8> {
        &self.cells
    }

    pub fn labels(&self) -> &[FailureClass] {
        &self.labels
    }

    /// Labels as zero-based class indices.
    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|c| c.index()).collect()
    }

    pub fn n_obs(&self) -> usize {
        self.cells.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.cells.ncols()
    }

    pub fn class_counts(&self) -> [usize; FailureClass::COUNT] {
        class_counts(&self.labels)
    }

    /// Rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> BinnedDataset {
        BinnedDataset {
            feature_names: self.feature_names.clone(),
            cells: self.cells.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Columns in the given order.
    pub fn select_features(&self, features: &[usize]) -> BinnedDataset {
        BinnedDataset {
            feature_names: features.iter().map(|&f| self.feature_names[f].clone()).collect(),
            cells: self.cells.select(Axis(1), features),
            labels: self.labels.clone(),
        }
    }

    /// The cells as real-valued model inputs (levels 0..3 fed ordinally).
    pub fn to_f64(&self) -> Array2<f64> {
        self.cells.mapv(f64::from)
    }
}

fn class_counts(labels: &[FailureClass]) -> [usize; FailureClass::COUNT] {
    let mut counts = [0; FailureClass::COUNT];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

/// Removes every feature whose column is zero in all observations, keeping
/// the relative order of the remaining features.
pub fn drop_all_zero_features(d: &AlarmDataset) -> AlarmDataset {
    let keep: Vec<usize> = (0..d.n_features()).filter(|&j| d.raw.column(j).iter().any(|&v| v != 0)).collect();
    AlarmDataset {
        feature_names: keep.iter().map(|&j| d.feature_names[j].clone()).collect(),
        raw: d.raw.select(Axis(1), &keep),
        labels: d.labels.clone(),
    }
}

/// Categorical level of a raw activity count: OFF, up to 45 s, up to 450 s,
/// longer. Bins above zero are left-open and right-closed.
pub fn bin_value(seconds: u16) -> u8 {
    match seconds {
        0 => 0,
        1..=45 => 1,
        46..=450 => 2,
        _ => 3,
    }
}

pub fn bin_alarm_counts(d: &AlarmDataset) -> BinnedDataset {
    BinnedDataset { feature_names: d.feature_names.clone(), cells: d.raw.mapv(bin_value), labels: d.labels.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("A_{i}")).collect()
    }

    #[test]
    fn binning_documented_points() {
        assert_eq!(bin_value(0), 0);
        assert_eq!(bin_value(30), 1);
        assert_eq!(bin_value(200), 2);
        assert_eq!(bin_value(600), 3);
        assert_eq!(bin_value(45), 1);
        assert_eq!(bin_value(46), 2);
        assert_eq!(bin_value(450), 2);
        assert_eq!(bin_value(451), 3);
        assert_eq!(bin_value(900), 3);
    }

    #[test]
    fn binning_is_monotone_over_whole_window() {
        let mut prev = 0;
        for v in 0..=WINDOW_SECONDS {
            let b = bin_value(v);
            assert!(b < N_LEVELS);
            assert!(b >= prev, "bin decreased at {v}");
            prev = b;
        }
    }

    #[test]
    fn drop_middle_zero_column() {
        let d = AlarmDataset::new(names(3), array![[5, 0, 0], [0, 0, 7]], vec![FailureClass::Idu, FailureClass::Power])
            .unwrap();
        let out = drop_all_zero_features(&d);
        assert_eq!(out.feature_names(), &["A_1".to_string(), "A_3".to_string()]);
        assert_eq!(out.raw(), &array![[5, 0], [0, 7]]);
        assert_eq!(drop_all_zero_features(&out), out);
    }

    #[test]
    fn drop_without_zero_columns_is_identity() {
        let d = AlarmDataset::new(names(2), array![[1, 2]], vec![FailureClass::Cable]).unwrap();
        assert_eq!(drop_all_zero_features(&d), d);
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        let err = AlarmDataset::new(names(1), array![[901]], vec![FailureClass::Idu]);
        assert!(matches!(err, Err(Error::InvalidDataset(_))));
        let dup = vec!["x".to_string(), "x".to_string()];
        assert!(AlarmDataset::new(dup, array![[1, 1]], vec![FailureClass::Idu]).is_err());
        assert!(AlarmDataset::new(names(1), array![[1]], vec![]).is_err());
    }

    #[test]
    fn label_round_trip() {
        for c in FailureClass::ALL {
            assert_eq!(FailureClass::from_label(c.label()), Some(c));
        }
        assert_eq!(FailureClass::from_label(0), None);
        assert_eq!(FailureClass::from_label(5), None);
    }
}
