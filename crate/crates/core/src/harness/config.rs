//! Experiment configuration and dataset resolution.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    bin_alarm_counts, drop_all_zero_features, generate_synthetic, load_csv, BinnedDataset, CsvSchema, FeatureGroups,
    FeaturePartition, GeneratorSpec, ScenarioKind,
};
use crate::error::{Error, Result};
use crate::federation::ExecMode;
use crate::gbdt::GbdtParams;
use crate::nn::Activation;
use crate::paillier::{SUPPORTED_KEY_BITS, TEST_KEY_BITS};
use crate::splitnn::{BottomShape, MergeOp};

/// Where the alarm table comes from. Relative paths resolve against the
/// directory of the config file they were read from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        /// Feature-group JSON mapping alarm names to IDU/ODU/NOS.
        groups: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
    Generator {
        /// Generator spec JSON; the shipped spec when absent.
        #[serde(default)]
        spec: Option<PathBuf>,
        /// Generator seed; the experiment seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

impl DataSource {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Csv { path, groups, .. } => {
                join(path);
                join(groups);
            }
            DataSource::Generator { spec, .. } => {
                if let Some(p) = spec {
                    join(p);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Xgb,
    Nn,
    Fedtree,
    FedtreeHe,
    Splitnn,
}

impl ModelKind {
    pub fn family(self) -> ModelFamily {
        match self {
            ModelKind::Xgb | ModelKind::Fedtree | ModelKind::FedtreeHe => ModelFamily::Gbdt,
            ModelKind::Nn | ModelKind::Splitnn => ModelFamily::Nn,
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, ModelKind::Fedtree | ModelKind::FedtreeHe | ModelKind::Splitnn)
    }

    /// Name used in rendered tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Xgb => "XGB",
            ModelKind::Nn => "NN",
            ModelKind::Fedtree => "FedTree",
            ModelKind::FedtreeHe => "FedTreeHE",
            ModelKind::Splitnn => "SplitNN",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Xgb => "xgb",
            ModelKind::Nn => "nn",
            ModelKind::Fedtree => "fedtree",
            ModelKind::FedtreeHe => "fedtree-he",
            ModelKind::Splitnn => "splitnn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    Gbdt,
    Nn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cooperation {
    Federated,
    Centralized,
    NonCooperative,
}

impl fmt::Display for Cooperation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cooperation::Federated => "federated",
            Cooperation::Centralized => "centralized",
            Cooperation::NonCooperative => "non-cooperative",
        })
    }
}

/// Hyperparameters of one grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum HyperParams {
    Gbdt(GbdtParams),
    Nn(NnParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnParams {
    pub hidden_layers: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub activation: Activation,
}

impl fmt::Display for HyperParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyperParams::Gbdt(p) => write!(f, "T={} d={} eta={}", p.n_trees, p.max_depth, p.learning_rate),
            HyperParams::Nn(p) => write!(
                f,
                "layers={} width={} lr={} epochs={} batch={} act={}",
                p.hidden_layers,
                p.width,
                p.learning_rate,
                p.epochs,
                p.batch_size,
                serde_json::to_value(p.activation).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtGrid {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for GbdtGrid {
    fn default() -> Self {
        Self { n_trees: vec![10, 20, 40], max_depth: vec![4, 5, 6], learning_rate: vec![0.3], lambda: vec![1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnGrid {
    pub hidden_layers: Vec<usize>,
    pub width: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub activation: Vec<Activation>,
    /// Per-client bottom networks of a split network.
    pub bottom: BottomShape,
    pub merge: MergeOp,
}

impl Default for NnGrid {
    fn default() -> Self {
        Self {
            hidden_layers: vec![1, 2],
            width: vec![64, 128],
            learning_rate: vec![0.01, 0.05],
            epochs: vec![25, 50],
            batch_size: vec![32, 64],
            activation: vec![Activation::Tanh, Activation::Relu],
            bottom: BottomShape::default(),
            merge: MergeOp::Concat,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub gbdt: GbdtGrid,
    pub nn: NnGrid,
}

impl GridSpec {
    /// Cartesian product for `family`, in a fixed nesting order.
    pub fn points(&self, family: ModelFamily) -> Vec<HyperParams> {
        let mut out = Vec::new();
        match family {
            ModelFamily::Gbdt => {
                let g = &self.gbdt;
                for &n_trees in &g.n_trees {
                    for &max_depth in &g.max_depth {
                        for &learning_rate in &g.learning_rate {
                            for &lambda in &g.lambda {
                                out.push(HyperParams::Gbdt(GbdtParams {
                                    n_trees,
                                    max_depth,
                                    learning_rate,
                                    lambda,
                                    ..GbdtParams::default()
                                }));
                            }
                        }
                    }
                }
            }
            ModelFamily::Nn => {
                let g = &self.nn;
                for &hidden_layers in &g.hidden_layers {
                    for &width in &g.width {
                        for &learning_rate in &g.learning_rate {
                            for &epochs in &g.epochs {
                                for &batch_size in &g.batch_size {
                                    for &activation in &g.activation {
                                        out.push(HyperParams::Nn(NnParams {
                                            hidden_layers,
                                            width,
                                            learning_rate,
                                            epochs,
                                            batch_size,
                                            activation,
                                        }));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self, family: ModelFamily) -> Result<()> {
        let points = self.points(family);
        if points.is_empty() {
            return Err(Error::Config("grid has no points for this model family".into()));
        }
        for p in &points {
            match p {
                HyperParams::Gbdt(g) => {
                    g.validate()?;
                    if g.n_trees == 0 {
                        return Err(Error::Config("grid needs at least one tree".into()));
                    }
                }
                HyperParams::Nn(n) => {
                    if n.width == 0 || n.epochs == 0 || n.batch_size == 0 {
                        return Err(Error::Config(format!("invalid network grid point {n:?}")));
                    }
                    if !(n.learning_rate > 0.0 && n.learning_rate.is_finite()) {
                        return Err(Error::Config(format!("learning rate {} must be positive", n.learning_rate)));
                    }
                }
            }
        }
        if family == ModelFamily::Nn {
            let b = &self.nn.bottom;
            if b.width == 0 || b.output == 0 {
                return Err(Error::Config("bottom network widths must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub scenario: ScenarioKind,
    pub model: ModelKind,
    pub cooperation: Cooperation,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub seed: u64,
    /// Label holder; the scenario's default when absent.
    #[serde(default)]
    pub active_party: Option<usize>,
    /// Paillier modulus length for `fedtree-he`.
    #[serde(default = "default_key_bits")]
    pub key_bits: usize,
    #[serde(default)]
    pub exec: ExecMode,
}

fn default_folds() -> usize {
    5
}

fn default_key_bits() -> usize {
    TEST_KEY_BITS
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config, resolving relative data paths against its directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.data.resolve(base);
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scenario == ScenarioKind::Svs && self.cooperation != Cooperation::Centralized {
            return fail(format!("SVS admits only centralized training, got {}", self.cooperation));
        }
        match self.cooperation {
            Cooperation::Federated if !self.model.is_federated() => {
                return fail(format!("model {} is not a federated protocol", self.model));
            }
            Cooperation::Centralized | Cooperation::NonCooperative if self.model.is_federated() => {
                return fail(format!("model {} requires federated cooperation", self.model));
            }
            _ => {}
        }
        if self.folds < 2 {
            return fail(format!("{} folds; at least 2 required", self.folds));
        }
        if let Some(a) = self.active_party {
            if a >= self.scenario.n_parties() {
                return fail(format!("active party {a} out of range for {}", self.scenario));
            }
        }
        if self.model == ModelKind::FedtreeHe && !SUPPORTED_KEY_BITS.contains(&self.key_bits) {
            return fail(format!("unsupported key length {} bits", self.key_bits));
        }
        self.grid.validate(self.model.family())
    }

    pub fn grid_points(&self) -> Vec<HyperParams> {
        self.grid.points(self.model.family())
    }
}

/// Binned features with the group table restricted to the surviving columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub data: BinnedDataset,
    pub groups: FeatureGroups,
    /// Human-readable origin of the data.
    pub origin: String,
}

impl PreparedData {
    pub fn partition(&self, scenario: ScenarioKind, active: Option<usize>) -> Result<FeaturePartition> {
        crate::dataset::partition_features(&self.data, scenario, &self.groups, active)
    }
}

/// Loads or generates the raw table, drops dead alarms and bins durations.
pub fn prepare_data(source: &DataSource, default_seed: u64) -> Result<PreparedData> {
    let (raw, groups, origin) = match source {
        DataSource::Csv { path, groups, label_column } => {
            let schema = CsvSchema { label_column: label_column.clone() };
            let raw = load_csv(path, &schema)?;
            let groups = FeatureGroups::from_json(&std::fs::read_to_string(groups)?)?;
            (raw, groups, path.display().to_string())
        }
        DataSource::Generator { spec, seed } => {
            let spec_value = match spec {
                Some(p) => GeneratorSpec::from_json(&std::fs::read_to_string(p)?)?,
                None => GeneratorSpec::default_alarms(),
            };
            let seed = seed.unwrap_or(default_seed);
            let synthetic = generate_synthetic(&spec_value, seed)?;
            let name = spec.as_ref().map_or("shipped generator".to_string(), |p| p.display().to_string());
            (synthetic.dataset, synthetic.groups, format!("{name} (seed {seed})"))
        }
    };
    let data = bin_alarm_counts(&drop_all_zero_features(&raw));
    let groups = groups.restricted_to(data.feature_names());
    Ok(PreparedData { data, groups, origin })
}
