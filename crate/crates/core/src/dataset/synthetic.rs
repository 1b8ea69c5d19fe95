//! Synthetic alarm data with planted per-class signatures.
//!
//! Each class owns a set of signature alarms that fire with a given
//! probability and an activity duration drawn from a per-alarm range. Every
//! class's signature spans at least two equipment groups, so a single vendor
//! never sees the full signal for its class. Background alarms fire on every
//! feature independently.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AlarmDataset, FailureClass, FeatureGroups, WINDOW_SECONDS};
use crate::error::{Error, Result};

/// Inclusive range of active seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationRange {
    pub lo: u16,
    pub hi: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    /// One of `IDU`, `ODU`, `NOS`.
    pub name: String,
    pub n_features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureAlarm {
    pub feature: String,
    pub prob: f64,
    pub duration: DurationRange,
}

/// Generator parameters. Live features are named `A_1..` in group order;
/// `n_dead_features` never-firing columns follow them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_obs: usize,
    pub groups: Vec<GroupSpec>,
    #[serde(default)]
    pub n_dead_features: usize,
    /// Relative class weights in IDU, ODU, Cable, Power order.
    pub class_priors: [f64; 4],
    pub background_rate: f64,
    pub background_duration: DurationRange,
    pub signatures: BTreeMap<FailureClass, Vec<SignatureAlarm>>,
}

impl GeneratorSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The shipped spec: 1669 observations with 31/54/34 IDU/ODU/NOS alarms,
    /// 45 dead alarms and the 515:611:207:336 class mix.
    pub fn default_alarms() -> Self {
        Self::from_json(include_str!("../../data/alarm_generator.json")).expect("shipped generator spec parses")
    }
}

/// Generated dataset together with the generator's group mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: AlarmDataset,
    pub groups: FeatureGroups,
}

fn check_range(r: DurationRange, what: &str) -> Result<()> {
    if r.lo == 0 || r.lo > r.hi || r.hi > WINDOW_SECONDS {
        return Err(Error::Generator(format!(
            "{what}: duration range [{}, {}] must satisfy 1 <= lo <= hi <= {WINDOW_SECONDS}",
            r.lo, r.hi
        )));
    }
    Ok(())
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Generator(format!("{what}: probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Splits `n` into integer counts proportional to `weights` (largest remainder).
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64) -> Result<SyntheticData> {
    let mut groups = FeatureGroups::default();
    let mut names = Vec::new();
    let mut group_of: HashMap<String, &str> = HashMap::new();
    for g in &spec.groups {
        let slot = match g.name.as_str() {
            "IDU" => &mut groups.idu,
            "ODU" => &mut groups.odu,
            "NOS" => &mut groups.nos,
            other => return Err(Error::Generator(format!("unknown group `{other}`"))),
        };
        for _ in 0..g.n_features {
            let name = format!("A_{}", names.len() + 1);
            slot.push(name.clone());
            group_of.insert(name.clone(), g.name.as_str());
            names.push(name);
        }
    }
    let n_live = names.len();
    for _ in 0..spec.n_dead_features {
        names.push(format!("A_{}", names.len() + 1));
    }
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    if spec.class_priors.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || spec.class_priors.iter().sum::<f64>() <= 0.0
    {
        return Err(Error::Generator("class priors must be non-negative with a positive sum".into()));
    }
    check_prob(spec.background_rate, "background")?;
    check_range(spec.background_duration, "background")?;

    let mut compiled: Vec<Vec<(usize, f64, DurationRange)>> = vec![Vec::new(); FailureClass::COUNT];
    for (class, alarms) in &spec.signatures {
        let mut spanned = HashSet::new();
        for a in alarms {
            let j = *index.get(a.feature.as_str()).filter(|&&j| j < n_live).ok_or_else(|| {
                Error::Generator(format!("signature of {class} references unknown feature `{}`", a.feature))
            })?;
            check_prob(a.prob, &a.feature)?;
            check_range(a.duration, &a.feature)?;
            spanned.insert(group_of[&a.feature]);
            compiled[class.index()].push((j, a.prob, a.duration));
        }
        if !alarms.is_empty() && spanned.len() < 2 {
            return Err(Error::Generator(format!("signature of {class} spans fewer than two groups")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = allocate(spec.n_obs, &spec.class_priors);
    let mut labels: Vec<FailureClass> =
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(FailureClass::ALL[c], n)).collect();
    labels.shuffle(&mut rng);

    let mut raw = Array2::<u16>::zeros((spec.n_obs, names.len()));
    let bg = spec.background_duration;
    for (i, label) in labels.iter().enumerate() {
        for j in 0..n_live {
            if rng.random_bool(spec.background_rate) {
                raw[[i, j]] = rng.random_range(bg.lo..=bg.hi);
            }
        }
        for &(j, p, dur) in &compiled[label.index()] {
            if rng.random_bool(p) {
                raw[[i, j]] = rng.random_range(dur.lo..=dur.hi);
            }
        }
    }
    Ok(SyntheticData { dataset: AlarmDataset::new(names, raw, labels)?, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{bin_alarm_counts, drop_all_zero_features, partition_features, ScenarioKind};

    #[test]
    fn default_spec_shapes() {
        let spec = GeneratorSpec::default_alarms();
        let data = generate_synthetic(&spec, 11).unwrap();
        assert_eq!(data.dataset.shape(), (1669, 164));
        assert_eq!(data.dataset.class_counts(), [515, 611, 207, 336]);
        let live = drop_all_zero_features(&data.dataset);
        assert_eq!(live.n_features(), 119);
        let binned = bin_alarm_counts(&live);
        let p = partition_features(&binned, ScenarioKind::ThreeVs, &data.groups, None).unwrap();
        assert_eq!(p.party_sizes(), vec![31, 54, 34]);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = GeneratorSpec::default_alarms();
        let a = generate_synthetic(&spec, 5).unwrap();
        let b = generate_synthetic(&spec, 5).unwrap();
        let c = generate_synthetic(&spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dataset.raw(), c.dataset.raw());
    }

    #[test]
    fn empty_generation() {
        let spec = GeneratorSpec { n_obs: 0, ..GeneratorSpec::default_alarms() };
        let data = generate_synthetic(&spec, 0).unwrap();
        assert_eq!(data.dataset.n_obs(), 0);
    }

    #[test]
    fn unknown_signature_feature() {
        let mut spec = GeneratorSpec::default_alarms();
        spec.signatures.get_mut(&FailureClass::Idu).unwrap()[0].feature = "A_999".into();
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Generator(_))));
        let mut spec = GeneratorSpec::default_alarms();
        // dead features cannot carry signal
        spec.signatures.get_mut(&FailureClass::Idu).unwrap()[0].feature = "A_150".into();
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn single_group_signature_rejected() {
        let mut spec = GeneratorSpec::default_alarms();
        let one = SignatureAlarm { feature: "A_1".into(), prob: 0.5, duration: DurationRange { lo: 1, hi: 10 } };
        spec.signatures.insert(FailureClass::Cable, vec![one]);
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Generator(_))));
    }

    #[test]
    fn signatures_span_two_groups() {
        let spec = GeneratorSpec::default_alarms();
        let data = generate_synthetic(&spec, 0).unwrap();
        let group = |f: &str| {
            if data.groups.idu.iter().any(|n| n == f) {
                0
            } else if data.groups.odu.iter().any(|n| n == f) {
                1
            } else {
                2
            }
        };
        for class in FailureClass::ALL {
            let spanned: HashSet<_> = spec.signatures[&class].iter().map(|a| group(&a.feature)).collect();
            assert!(spanned.len() >= 2, "{class}");
        }
    }

    #[test]
    fn largest_remainder_allocation() {
        assert_eq!(allocate(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(allocate(1669, &[515.0, 611.0, 207.0, 336.0]), vec![515, 611, 207, 336]);
        assert_eq!(allocate(0, &[1.0, 2.0]), vec![0, 0]);
    }
}
