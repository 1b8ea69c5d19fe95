use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BinnedDataset;
use crate::error::{Error, Result};

/// Vendor deployment scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Single vendor: one party holds every feature.
    #[serde(rename = "SVS")]
    Svs,
    /// Two vendors: ODU hardware vs. IDU hardware plus NOS software.
    #[serde(rename = "2VS")]
    TwoVs,
    /// Three vendors: IDU, ODU and NOS each held separately.
    #[serde(rename = "3VS")]
    ThreeVs,
}

impl ScenarioKind {
    pub fn n_parties(self) -> usize {
        match self {
            ScenarioKind::Svs => 1,
            ScenarioKind::TwoVs => 2,
            ScenarioKind::ThreeVs => 3,
        }
    }

    /// Label-holding party when the caller does not choose one.
    pub fn default_active_party(self) -> usize {
        match self {
            ScenarioKind::Svs => 0,
            ScenarioKind::TwoVs => 1,
            ScenarioKind::ThreeVs => 0,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Svs => "SVS",
            ScenarioKind::TwoVs => "2VS",
            ScenarioKind::ThreeVs => "3VS",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "SVS" => Ok(ScenarioKind::Svs),
            "2VS" => Ok(ScenarioKind::TwoVs),
            "3VS" => Ok(ScenarioKind::ThreeVs),
            _ => Err(Error::Config(format!("unknown scenario `{s}`"))),
        }
    }
}

/// Alarm names per equipment group, as read from the feature-group JSON.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroups {
    #[serde(rename = "IDU")]
    pub idu: Vec<String>,
    #[serde(rename = "ODU")]
    pub odu: Vec<String>,
    #[serde(rename = "NOS")]
    pub nos: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Group {
    Idu,
    Odu,
    Nos,
}

impl FeatureGroups {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The table with every name outside `names` removed.
    pub fn restricted_to(&self, names: &[String]) -> Self {
        let keep: HashSet<&str> = names.iter().map(String::as_str).collect();
        let filter = |v: &Vec<String>| v.iter().filter(|n| keep.contains(n.as_str())).cloned().collect();
        Self { idu: filter(&self.idu), odu: filter(&self.odu), nos: filter(&self.nos) }
    }

    fn group_of(&self, names: &[String]) -> Result<Vec<Group>> {
        let mut lookup: HashMap<&str, Group> = HashMap::new();
        for (group, members) in [(Group::Idu, &self.idu), (Group::Odu, &self.odu), (Group::Nos, &self.nos)] {
            for name in members {
                if let Some(prev) = lookup.insert(name.as_str(), group) {
                    return Err(Error::Groups(format!("feature `{name}` listed in both {prev:?} and {group:?}")));
                }
            }
        }
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        if let Some(unknown) = lookup.keys().find(|n| !index.contains_key(*n)) {
            return Err(Error::Groups(format!("unknown feature `{unknown}`")));
        }
        names
            .iter()
            .map(|n| {
                lookup
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::Groups(format!("feature `{n}` is not assigned to any group")))
            })
            .collect()
    }
}

/// Assignment of every dataset feature to exactly one party.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePartition {
    pub party_names: Vec<String>,
    /// Party index for each feature column.
    pub assignment: Vec<usize>,
    /// Party holding the labels.
    pub active_party: usize,
}

impl FeaturePartition {
    pub fn new(party_names: Vec<String>, assignment: Vec<usize>, active_party: usize) -> Result<Self> {
        if active_party >= party_names.len() {
            return Err(Error::Config(format!(
                "active party {active_party} out of range for {} parties",
                party_names.len()
            )));
        }
        if let Some(&bad) = assignment.iter().find(|&&p| p >= party_names.len()) {
            return Err(Error::Config(format!("feature assigned to unknown party {bad}")));
        }
        Ok(Self { party_names, assignment, active_party })
    }

    /// Every feature owned by one party.
    pub fn single(n_features: usize, name: &str) -> Self {
        Self { party_names: vec![name.to_string()], assignment: vec![0; n_features], active_party: 0 }
    }

    pub fn n_parties(&self) -> usize {
        self.party_names.len()
    }

    /// Column indices owned by `party`, in dataset order.
    pub fn party_features(&self, party: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, &p)| p == party).map(|(j, _)| j).collect()
    }

    pub fn party_sizes(&self) -> Vec<usize> {
        (0..self.n_parties()).map(|p| self.party_features(p).len()).collect()
    }
}

/// Splits the dataset's features between vendors according to `scenario`.
///
/// `active` overrides the scenario's default label holder.
pub fn partition_features(
    d: &BinnedDataset,
    scenario: ScenarioKind,
    groups: &FeatureGroups,
    active: Option<usize>,
) -> Result<FeaturePartition> {
    let membership = groups.group_of(d.feature_names())?;
    let (names, party_of): (Vec<&str>, fn(Group) -> usize) = match scenario {
        ScenarioKind::Svs => (vec!["SVS"], |_| 0),
        ScenarioKind::TwoVs => (vec!["ODU", "IDU+NOS"], |g| match g {
            Group::Odu => 0,
            Group::Idu | Group::Nos => 1,
        }),
        ScenarioKind::ThreeVs => (vec!["IDU", "ODU", "NOS"], |g| match g {
            Group::Idu => 0,
            Group::Odu => 1,
            Group::Nos => 2,
        }),
    };
    FeaturePartition::new(
        names.into_iter().map(String::from).collect(),
        membership.into_iter().map(party_of).collect(),
        active.unwrap_or(scenario.default_active_party()),
    )
}
