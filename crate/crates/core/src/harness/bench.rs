//! Training-time benchmark at fixed hyperparameters.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{prepare_data, Cooperation, DataSource, ExperimentConfig, HyperParams, ModelKind, PreparedData};
use super::experiment::{thread_pool, Task, Trained};
use super::report::Timing;
use crate::dataset::ScenarioKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub scenario: ScenarioKind,
    pub model: ModelKind,
    pub cooperation: Cooperation,
    pub params: HyperParams,
    pub n_obs: usize,
    pub repeats: usize,
    /// Median over repeats of the wall-clock training time.
    pub train_seconds: f64,
    /// Median over repeats of encryption plus decryption time.
    pub he_seconds: f64,
    pub he_share: f64,
    pub bytes_exchanged: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

/// Several experiments timed together; a bare experiment config is read as
/// a one-run benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub runs: Vec<ExperimentConfig>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_repeats() -> usize {
    3
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("runs").is_some() {
            Ok(serde_json::from_value(value)?)
        } else {
            Ok(Self { runs: vec![serde_json::from_value(value)?], repeats: default_repeats() })
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.runs.iter_mut().for_each(|r| r.resolve_paths(base));
        Ok(cfg)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One training on every row with the first grid point of `cfg`; parties'
/// local models are summed for non-cooperative runs.
fn time_once(cfg: &ExperimentConfig, prepared: &PreparedData, params: &HyperParams) -> Result<Trained> {
    let rows: Vec<usize> = (0..prepared.data.n_obs()).collect();
    match cfg.cooperation {
        Cooperation::Centralized => {
            Task::new(&prepared.data, None, cfg.model)?.configured(cfg).fit_predict(params, &rows, &[], cfg.seed)
        }
        Cooperation::Federated => {
            let partition = prepared.partition(cfg.scenario, cfg.active_party)?;
            Task::new(&prepared.data, Some(&partition), cfg.model)?.configured(cfg).fit_predict(
                params,
                &rows,
                &[],
                cfg.seed,
            )
        }
        Cooperation::NonCooperative => {
            let partition = prepared.partition(cfg.scenario, cfg.active_party)?;
            let (mut train, mut he) = (0.0, 0.0);
            for p in 0..partition.n_parties() {
                let local = prepared.data.select_features(&partition.party_features(p));
                let t =
                    Task::new(&local, None, cfg.model)?.configured(cfg).fit_predict(params, &rows, &[], cfg.seed)?;
                train += t.timing.train_seconds;
                he += t.timing.he_seconds;
            }
            Ok(Trained { predictions: Vec::new(), timing: Timing::new(train, he), bytes_exchanged: 0 })
        }
    }
}

/// Times each configuration `repeats` times on its full dataset, using the
/// first point of its grid as the fixed hyperparameters.
pub fn benchmark_time(cfgs: &[ExperimentConfig], repeats: usize) -> Result<TimingTable> {
    if repeats == 0 {
        return Err(Error::Config("benchmark needs at least one repeat".into()));
    }
    let mut cache: Vec<(DataSource, u64, PreparedData)> = Vec::new();
    let pool = thread_pool()?;
    let mut rows = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        cfg.validate()?;
        let key = (cfg.data.clone(), cfg.seed);
        let idx = match cache.iter().position(|(d, s, _)| (d, *s) == (&key.0, key.1)) {
            Some(i) => i,
            None => {
                cache.push((key.0, key.1, prepare_data(&cfg.data, cfg.seed)?));
                cache.len() - 1
            }
        };
        let prepared = &cache[idx].2;
        let params = cfg.grid_points()[0];
        let runs: Vec<Trained> =
            pool.install(|| (0..repeats).map(|_| time_once(cfg, prepared, &params)).collect::<Result<_>>())?;
        let train_seconds = median(runs.iter().map(|r| r.timing.train_seconds).collect());
        let he_seconds = median(runs.iter().map(|r| r.timing.he_seconds).collect());
        rows.push(TimingRow {
            scenario: cfg.scenario,
            model: cfg.model,
            cooperation: cfg.cooperation,
            params,
            n_obs: prepared.data.n_obs(),
            repeats,
            train_seconds,
            he_seconds,
            he_share: Timing::new(train_seconds, he_seconds).he_share,
            bytes_exchanged: runs[0].bytes_exchanged,
        });
    }
    Ok(TimingTable { rows })
}

pub fn render_timing_markdown(table: &TimingTable) -> String {
    let mut out = String::from(
        "| Scenario | Model | Cooperation | Training time (s) | HE time (s) | HE share (%) | Bytes |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {} |",
            r.scenario,
            r.model.display_name(),
            r.cooperation,
            r.train_seconds,
            r.he_seconds,
            100.0 * r.he_share,
            r.bytes_exchanged
        );
    }
    out
}

pub fn render_timing_csv(table: &TimingTable) -> String {
    let mut out = String::from("scenario,model,cooperation,train_seconds,he_seconds,he_share,bytes_exchanged\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{}",
            r.scenario, r.model, r.cooperation, r.train_seconds, r.he_seconds, r.he_share, r.bytes_exchanged
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
    }

    #[test]
    fn bare_config_is_a_single_run() {
        let one = r#"{"data":{"kind":"generator"},"scenario":"SVS","model":"xgb","cooperation":"centralized"}"#;
        let b = BenchConfig::from_json(one).unwrap();
        assert_eq!((b.runs.len(), b.repeats), (1, 3));
        let many = format!(r#"{{"runs":[{one},{one}],"repeats":1}}"#);
        assert_eq!(BenchConfig::from_json(&many).unwrap().runs.len(), 2);
    }
}
