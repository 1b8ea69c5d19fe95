//! Grid search over stratified k-fold cross-validation.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::config::{prepare_data, Cooperation, ExperimentConfig, HyperParams, ModelFamily, ModelKind, PreparedData};
use super::metrics::{compute_metrics, metrics_from_confusion, pool_confusion, Stat};
use super::report::{FoldMetrics, GridPointSummary, MetricsReport, PartyReport, Timing};
use crate::dataset::{stratified_kfold, BinnedDataset, FailureClass, FeaturePartition, FoldPlan};
use crate::error::{Error, Result};
use crate::federation::{ExecMode, Transcript};
use crate::fedtree::{predict_federated, split_columns, train_fedtree, FedTreeConfig, FedTreeMode};
use crate::gbdt::fit;
use crate::nn::{self, derive_seed, predict, MlpSpec, TrainConfig};
use crate::paillier::TEST_KEY_BITS;
use crate::splitnn::{predict_splitnn, train_splitnn, BottomShape, MergeOp, SplitNnTopology, TopShape};

const N_CLASSES: usize = FailureClass::COUNT;

/// Environment variable capping the worker threads of a run.
pub const THREADS_ENV: &str = "VFLAB_THREADS";

/// A pool sized by `VFLAB_THREADS` (all cores when unset or 0).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}=`{v}` is not a count")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Fails if any fold's test rows leak into its training rows.
pub fn check_fold_isolation(plan: &FoldPlan) -> Result<()> {
    let n = plan.assignments.len();
    for fold in 0..plan.k {
        let mut in_test = vec![false; n];
        let test = plan.test_indices(fold);
        for &i in &test {
            in_test[i] = true;
        }
        let train = plan.train_indices(fold);
        if train.iter().any(|&i| in_test[i]) || train.len() + test.len() != n {
            return Err(Error::Training(format!("fold {fold} train and test rows overlap")));
        }
    }
    Ok(())
}

/// Predictions on held-out rows with the cost of producing them.
#[derive(Clone, Debug)]
pub struct Trained {
    pub predictions: Vec<usize>,
    pub timing: Timing,
    pub bytes_exchanged: u64,
}

/// One model family bound to a dataset (and, if federated, a partition).
pub struct Task<'a> {
    pub data: &'a BinnedDataset,
    pub partition: Option<&'a FeaturePartition>,
    pub model: ModelKind,
    pub key_bits: usize,
    pub exec: ExecMode,
    /// Bottom networks and merge of a split network.
    pub bottom: BottomShape,
    pub merge: MergeOp,
    labels: Vec<usize>,
    reals: Option<Array2<f64>>,
}

fn cross_party_bytes(t: &Transcript) -> u64 {
    t.bytes_by_direction().iter().filter(|d| d.sender != d.receiver).map(|d| d.bytes).sum()
}

fn party_slices<T: Clone>(x: ArrayView2<T>, partition: &FeaturePartition) -> Vec<Array2<T>> {
    (0..partition.n_parties()).map(|p| x.select(Axis(1), &partition.party_features(p))).collect()
}

impl<'a> Task<'a> {
    /// Test-size keys, lockstep execution and default split-network shape.
    pub fn new(data: &'a BinnedDataset, partition: Option<&'a FeaturePartition>, model: ModelKind) -> Result<Self> {
        if model.is_federated() != partition.is_some() {
            return Err(Error::Config(format!("model {model} and partition presence disagree")));
        }
        if data.n_features() == 0 {
            return Err(Error::Config("no features to train on".into()));
        }
        if let Some(p) = partition {
            if let Some(empty) = (0..p.n_parties()).find(|&i| p.party_features(i).is_empty()) {
                return Err(Error::Config(format!("party {} holds no features", p.party_names[empty])));
            }
        }
        let reals = (model.family() == ModelFamily::Nn).then(|| data.to_f64());
        Ok(Self {
            data,
            partition,
            model,
            key_bits: TEST_KEY_BITS,
            exec: ExecMode::Lockstep,
            bottom: BottomShape::default(),
            merge: MergeOp::Concat,
            labels: data.class_indices(),
            reals,
        })
    }

    /// Key length, execution mode and split-network shape taken from `cfg`.
    pub fn configured(mut self, cfg: &ExperimentConfig) -> Self {
        self.key_bits = cfg.key_bits;
        self.exec = cfg.exec;
        self.bottom = cfg.grid.nn.bottom;
        self.merge = cfg.grid.nn.merge;
        self
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Trains on `train` rows and predicts `test` rows.
    pub fn fit_predict(&self, params: &HyperParams, train: &[usize], test: &[usize], seed: u64) -> Result<Trained> {
        let y: Vec<usize> = train.iter().map(|&i| self.labels[i]).collect();
        let rows = |m: &Array2<u8>, r: &[usize]| m.select(Axis(0), r);
        match (self.model, params) {
            (ModelKind::Xgb, HyperParams::Gbdt(p)) => {
                let cells = self.data.cells();
                let (xtr, xte) = (rows(cells, train), rows(cells, test));
                let start = Instant::now();
                let model = fit(xtr.view(), &y, N_CLASSES, p)?;
                let seconds = start.elapsed().as_secs_f64();
                Ok(Trained {
                    predictions: model.predict(xte.view()),
                    timing: Timing::new(seconds, 0.0),
                    bytes_exchanged: 0,
                })
            }
            (ModelKind::Fedtree | ModelKind::FedtreeHe, HyperParams::Gbdt(p)) => {
                let partition = self.partition.expect("federated task has a partition");
                let cells = self.data.cells();
                let parties = split_columns(rows(cells, train).view(), partition)?;
                let test_cells = rows(cells, test);
                let test_parts = party_slices(test_cells.view(), partition);
                let mode =
                    if self.model == ModelKind::FedtreeHe { FedTreeMode::Paillier } else { FedTreeMode::Plaintext };
                let cfg = FedTreeConfig {
                    params: *p,
                    mode,
                    key_bits: self.key_bits,
                    active_party: partition.active_party,
                    exec: self.exec,
                    seed,
                };
                let out = train_fedtree(&parties, &y, N_CLASSES, &cfg)?;
                let views: Vec<ArrayView2<u8>> = test_parts.iter().map(|a| a.view()).collect();
                Ok(Trained {
                    predictions: predict_federated(&out.model, &views)?,
                    timing: Timing::new(out.transcript.wall_seconds, out.transcript.phases.he()),
                    bytes_exchanged: cross_party_bytes(&out.transcript),
                })
            }
            (ModelKind::Nn, HyperParams::Nn(p)) => {
                let x = self.reals.as_ref().expect("network task has real inputs");
                let (xtr, xte) = (x.select(Axis(0), train), x.select(Axis(0), test));
                let spec = MlpSpec::classifier(x.ncols(), p.hidden_layers, p.width, p.activation, N_CLASSES)
                    .with_seed(derive_seed(seed, 0));
                let cfg = TrainConfig {
                    learning_rate: p.learning_rate,
                    epochs: p.epochs,
                    batch_size: p.batch_size,
                    seed: derive_seed(seed, 1),
                    shuffle: true,
                };
                let start = Instant::now();
                let model = nn::train(xtr.view(), &y, &spec, &cfg)?.model;
                let seconds = start.elapsed().as_secs_f64();
                Ok(Trained {
                    predictions: predict(&model, xte.view())?,
                    timing: Timing::new(seconds, 0.0),
                    bytes_exchanged: 0,
                })
            }
            (ModelKind::Splitnn, HyperParams::Nn(p)) => {
                let partition = self.partition.expect("federated task has a partition");
                let x = self.reals.as_ref().expect("network task has real inputs");
                let tr = party_slices(x.select(Axis(0), train).view(), partition);
                let te = party_slices(x.select(Axis(0), test).view(), partition);
                let inputs: Vec<usize> = tr.iter().map(|s| s.ncols()).collect();
                let top = TopShape { hidden: p.hidden_layers, width: p.width, activation: p.activation };
                let cfg = TrainConfig {
                    learning_rate: p.learning_rate,
                    epochs: p.epochs,
                    batch_size: p.batch_size,
                    seed: derive_seed(seed, 1),
                    shuffle: true,
                };
                let topo = SplitNnTopology::symmetric(&inputs, self.bottom, top, self.merge, cfg, derive_seed(seed, 0));
                let views: Vec<ArrayView2<f64>> = tr.iter().map(|a| a.view()).collect();
                let out = train_splitnn(&views, &y, &topo, self.exec)?;
                let test_views: Vec<ArrayView2<f64>> = te.iter().map(|a| a.view()).collect();
                Ok(Trained {
                    predictions: predict_splitnn(&out.model, &test_views)?,
                    timing: Timing::new(out.transcript.wall_seconds, 0.0),
                    bytes_exchanged: cross_party_bytes(&out.transcript),
                })
            }
            (model, params) => Err(Error::Config(format!("model {model} cannot use parameters {params}"))),
        }
    }
}

/// Cross-validated scores of every grid point, and the winner's folds.
pub struct GridOutcome {
    pub grid: Vec<GridPointSummary>,
    pub best: usize,
    pub folds: Vec<FoldMetrics>,
}

/// Seed of grid point `point` on fold `fold`.
fn job_seed(seed: u64, point: usize, fold: usize) -> u64 {
    derive_seed(derive_seed(seed, point as u64), fold as u64)
}

/// Runs every (grid point, fold) job and picks the point with the highest mean
/// accuracy, the earliest point winning ties.
pub fn grid_search(task: &Task, points: &[HyperParams], plan: &FoldPlan, seed: u64) -> Result<GridOutcome> {
    if points.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    check_fold_isolation(plan)?;
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|g| (0..plan.k).map(move |f| (g, f))).collect();
    let results: Vec<FoldMetrics> = jobs
        .par_iter()
        .map(|&(g, fold)| {
            let (train, test) = (plan.train_indices(fold), plan.test_indices(fold));
            let trained = task.fit_predict(&points[g], &train, &test, job_seed(seed, g, fold))?;
            let truth: Vec<usize> = test.iter().map(|&i| task.labels()[i]).collect();
            Ok(FoldMetrics {
                fold,
                test_size: test.len(),
                metrics: compute_metrics(&truth, &trained.predictions, N_CLASSES)?,
                timing: trained.timing,
                bytes_exchanged: trained.bytes_exchanged,
            })
        })
        .collect::<Result<_>>()?;
    let per_point: Vec<&[FoldMetrics]> = results.chunks(plan.k).collect();
    let grid: Vec<GridPointSummary> = points
        .iter()
        .zip(&per_point)
        .map(|(params, folds)| GridPointSummary {
            params: *params,
            accuracy: Stat::of(&folds.iter().map(|f| f.metrics.accuracy).collect::<Vec<_>>()),
            macro_f1: Stat::of(&folds.iter().map(|f| f.metrics.macro_f1).collect::<Vec<_>>()),
        })
        .collect();
    let mut best = 0;
    for (i, g) in grid.iter().enumerate() {
        if g.accuracy.mean > grid[best].accuracy.mean {
            best = i;
        }
    }
    Ok(GridOutcome { folds: per_point[best].to_vec(), grid, best })
}

fn fold_stats(folds: &[FoldMetrics]) -> (Stat, Stat, Stat) {
    let pick = |f: fn(&FoldMetrics) -> f64| Stat::of(&folds.iter().map(f).collect::<Vec<_>>());
    (pick(|f| f.metrics.accuracy), pick(|f| f.metrics.macro_f1), pick(|f| f.metrics.weighted_f1))
}

fn sum_timing<'a>(folds: impl IntoIterator<Item = &'a FoldMetrics>) -> (Timing, u64) {
    let (mut train, mut he, mut bytes) = (0.0, 0.0, 0);
    for f in folds {
        train += f.timing.train_seconds;
        he += f.timing.he_seconds;
        bytes += f.bytes_exchanged;
    }
    (Timing::new(train, he), bytes)
}

fn plan_for(cfg: &ExperimentConfig, data: &BinnedDataset) -> Result<FoldPlan> {
    stratified_kfold(&data.class_indices(), cfg.folds, cfg.seed)
}

/// Loads the configured data and runs the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let prepared = prepare_data(&cfg.data, cfg.seed)?;
    run_experiment_on(cfg, &prepared)
}

/// As [`run_experiment`], on already prepared data.
pub fn run_experiment_on(cfg: &ExperimentConfig, prepared: &PreparedData) -> Result<MetricsReport> {
    cfg.validate()?;
    if cfg.cooperation == Cooperation::NonCooperative {
        return run_non_cooperative_on(cfg, prepared);
    }
    thread_pool()?.install(|| {
        let data = &prepared.data;
        let partition = match cfg.cooperation {
            Cooperation::Federated => Some(prepared.partition(cfg.scenario, cfg.active_party)?),
            _ => None,
        };
        let task = Task::new(data, partition.as_ref(), cfg.model)?.configured(cfg);
        let plan = plan_for(cfg, data)?;
        let outcome = grid_search(&task, &cfg.grid_points(), &plan, cfg.seed)?;
        let (accuracy, macro_f1, weighted_f1) = fold_stats(&outcome.folds);
        let pooled = metrics_from_confusion(pool_confusion(outcome.folds.iter().map(|f| &f.metrics.confusion)))?;
        let (timing, bytes_exchanged) = sum_timing(&outcome.folds);
        Ok(MetricsReport {
            scenario: cfg.scenario,
            model: cfg.model,
            cooperation: cfg.cooperation,
            k_folds: cfg.folds,
            seed: cfg.seed,
            data: prepared.origin.clone(),
            n_obs: data.n_obs(),
            n_features: data.n_features(),
            n_parties: partition.as_ref().map_or(1, FeaturePartition::n_parties),
            accuracy,
            macro_f1,
            weighted_f1,
            per_class: pooled.per_class,
            confusion: pooled.confusion,
            timing,
            bytes_exchanged,
            best_params: Some(outcome.grid[outcome.best].params),
            folds: outcome.folds,
            grid: outcome.grid,
            parties: Vec::new(),
        })
    })
}

/// Local model per party on its own columns; headline scores are the mean
/// and spread of the parties' cross-validated accuracies.
pub fn run_non_cooperative(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let prepared = prepare_data(&cfg.data, cfg.seed)?;
    run_non_cooperative_on(cfg, &prepared)
}

pub fn run_non_cooperative_on(cfg: &ExperimentConfig, prepared: &PreparedData) -> Result<MetricsReport> {
    cfg.validate()?;
    if cfg.cooperation != Cooperation::NonCooperative {
        return Err(Error::Config(format!("{} run passed to the non-cooperative driver", cfg.cooperation)));
    }
    let partition = prepared.partition(cfg.scenario, cfg.active_party)?;
    let plan = plan_for(cfg, &prepared.data)?;
    let points = cfg.grid_points();
    let parties: Vec<PartyReport> = thread_pool()?.install(|| {
        (0..partition.n_parties())
            .map(|p| {
                let local = prepared.data.select_features(&partition.party_features(p));
                let task = Task::new(&local, None, cfg.model)
                    .map_err(|e| Error::Config(format!("party {}: {e}", partition.party_names[p])))?
                    .configured(cfg);
                let outcome = grid_search(&task, &points, &plan, cfg.seed)?;
                let (accuracy, macro_f1, weighted_f1) = fold_stats(&outcome.folds);
                Ok(PartyReport {
                    party: partition.party_names[p].clone(),
                    n_features: local.n_features(),
                    best_params: outcome.grid[outcome.best].params,
                    accuracy,
                    macro_f1,
                    weighted_f1,
                    folds: outcome.folds,
                    grid: outcome.grid,
                })
            })
            .collect::<Result<_>>()
    })?;
    let over = |f: fn(&PartyReport) -> f64| Stat::of(&parties.iter().map(f).collect::<Vec<_>>());
    let pooled =
        metrics_from_confusion(pool_confusion(parties.iter().flat_map(|p| &p.folds).map(|f| &f.metrics.confusion)))?;
    let (timing, bytes_exchanged) = sum_timing(parties.iter().flat_map(|p| &p.folds));
    Ok(MetricsReport {
        scenario: cfg.scenario,
        model: cfg.model,
        cooperation: cfg.cooperation,
        k_folds: cfg.folds,
        seed: cfg.seed,
        data: prepared.origin.clone(),
        n_obs: prepared.data.n_obs(),
        n_features: prepared.data.n_features(),
        n_parties: partition.n_parties(),
        accuracy: over(|p| p.accuracy.mean),
        macro_f1: over(|p| p.macro_f1.mean),
        weighted_f1: over(|p| p.weighted_f1.mean),
        per_class: pooled.per_class,
        confusion: pooled.confusion,
        timing,
        bytes_exchanged,
        best_params: None,
        folds: Vec::new(),
        grid: Vec::new(),
        parties,
    })
}
