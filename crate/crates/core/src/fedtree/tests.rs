use super::*;
use crate::federation::{assert_locality, LocalityPolicy, MessageKind, PartyId};
use crate::gbdt::fit;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four-level cells whose classes leave signatures on several columns.
fn problem(seed: u64, n: usize, m: usize, k: usize) -> (Array2<u8>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let cells = Array2::from_shape_fn((n, m), |(i, j)| {
        if j % k == labels[i] && rng.random_bool(0.6) {
            rng.random_range(1..4)
        } else if rng.random_bool(0.15) {
            rng.random_range(0..4)
        } else {
            0
        }
    });
    (cells, labels)
}

/// Random assignment of columns to `p` parties, each party non-empty.
fn random_split(cells: &Array2<u8>, p: usize, rng: &mut ChaCha8Rng) -> Vec<PartyColumns> {
    let m = cells.ncols();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut owner = vec![0; m];
    for (pos, &j) in order.iter().enumerate() {
        owner[j] = if pos < p { pos } else { rng.random_range(0..p) };
    }
    let partition = FeaturePartition::new((0..p).map(|i| format!("P{i}")).collect(), owner, 0).unwrap();
    split_columns(cells.view(), &partition).unwrap()
}

fn views(parties: &[PartyColumns]) -> Vec<ArrayView2<'_, u8>> {
    parties.iter().map(|c| c.cells.view()).collect()
}

fn assert_same_structure(a: &GbdtModel, b: &GbdtModel, weight_tol: f64) {
    assert_eq!(a.trees.len(), b.trees.len());
    for (ra, rb) in a.trees.iter().zip(&b.trees) {
        for (ta, tb) in ra.iter().zip(rb) {
            assert_eq!(ta.nodes.len(), tb.nodes.len());
            for (na, nb) in ta.nodes.iter().zip(&tb.nodes) {
                match (na, nb) {
                    (TreeNode::Leaf { weight: wa }, TreeNode::Leaf { weight: wb }) => {
                        assert!((wa - wb).abs() <= weight_tol, "leaf {wa} vs {wb}");
                    }
                    (sa @ TreeNode::Split { .. }, sb @ TreeNode::Split { .. }) => {
                        assert_eq!(sa, sb)
                    }
                    _ => panic!("node kinds differ: {na:?} vs {nb:?}"),
                }
            }
        }
    }
}

#[test]
fn plaintext_matches_centralized_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for instance in 0..8 {
        let n = rng.random_range(60..200);
        let m = rng.random_range(3..12);
        let k = rng.random_range(2..5);
        let (cells, labels) = problem(instance, n, m, k);
        let p = rng.random_range(2..4);
        let parties = random_split(&cells, p, &mut rng);
        let params =
            GbdtParams { n_trees: rng.random_range(1..5), max_depth: rng.random_range(1..5), ..Default::default() };
        let cfg = FedTreeConfig { params, active_party: rng.random_range(0..p), ..Default::default() };
        let fed = train_fedtree(&parties, &labels, k, &cfg).unwrap();
        let central = fit(cells.view(), &labels, k, &params).unwrap();
        let back = fed.model.to_centralized();
        assert_eq!(back.trees, central.trees, "instance {instance}");
        assert_eq!(back.base_score, central.base_score);
        let margins = fed.model.predict_margins(&views(&parties)).unwrap();
        assert_eq!(margins, central.predict_margins(cells.view()));
        assert_eq!(predict_federated(&fed.model, &views(&parties)).unwrap(), central.predict(cells.view()));
    }
}

#[test]
fn single_party_is_centralized() {
    let (cells, labels) = problem(3, 120, 6, 4);
    let params = GbdtParams { n_trees: 3, max_depth: 3, ..Default::default() };
    let parties = vec![PartyColumns::new(cells.clone(), (0..6).collect()).unwrap()];
    let fed = train_fedtree(&parties, &labels, 4, &FedTreeConfig { params, ..Default::default() }).unwrap();
    assert_eq!(fed.model.to_centralized(), fit(cells.view(), &labels, 4, &params).unwrap());
    assert!(fed.transcript.messages.iter().all(|m| m.sender == m.receiver));
}

#[test]
fn paillier_mode_is_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for instance in 0..2 {
        let (cells, labels) = problem(40 + instance, 80, 6, 3);
        let parties = random_split(&cells, 2 + instance as usize, &mut rng);
        let params = GbdtParams { n_trees: 2, max_depth: 3, ..Default::default() };
        let plain = train_fedtree(&parties, &labels, 3, &FedTreeConfig { params, ..Default::default() }).unwrap();
        let cfg = FedTreeConfig { params, mode: FedTreeMode::Paillier, seed: instance, ..Default::default() };
        let he = train_fedtree(&parties, &labels, 3, &cfg).unwrap();
        assert_same_structure(&plain.model.to_centralized(), &he.model.to_centralized(), 1e-6);
        let t = &he.transcript;
        assert!(t.count(MessageKind::GradientsCipher) > 0 && t.count(MessageKind::HistogramCipher) > 0);
        assert_eq!(t.count(MessageKind::GradientsPlain), 0);
        assert!(t.messages.iter().filter(|m| m.kind == MessageKind::HistogramPlain).all(|m| m.sender == m.receiver));
        assert!(t.phases.encrypt > 0.0 && t.phases.decrypt > 0.0);
        let policy = LocalityPolicy { label_holders: vec![PartyId(0)], require_ciphertext: true };
        assert!(assert_locality(t, &policy).passed());
    }
}

#[test]
fn plaintext_run_passes_locality_with_note() {
    let (cells, labels) = problem(8, 90, 7, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let parties = random_split(&cells, 3, &mut rng);
    let cfg = FedTreeConfig { active_party: 1, ..Default::default() };
    let fed = train_fedtree(&parties, &labels, 4, &cfg).unwrap();
    let policy = LocalityPolicy { label_holders: vec![PartyId(1)], require_ciphertext: false };
    let report = assert_locality(&fed.transcript, &policy);
    assert!(report.passed());
    assert!(!report.rule("statistics-encrypted").unwrap().notes.is_empty());
    assert!(!assert_locality(&fed.transcript, &LocalityPolicy { require_ciphertext: true, ..policy }).passed());
}

#[test]
fn smallest_run_exchanges_gradients_and_histograms() {
    let cells = Array2::from_shape_vec((2, 2), vec![0, 1, 2, 0]).unwrap();
    let parties = vec![
        PartyColumns::new(cells.column(0).to_owned().insert_axis(ndarray::Axis(1)), vec![0]).unwrap(),
        PartyColumns::new(cells.column(1).to_owned().insert_axis(ndarray::Axis(1)), vec![1]).unwrap(),
    ];
    let params = GbdtParams { n_trees: 1, max_depth: 1, ..Default::default() };
    let fed = train_fedtree(&parties, &[0, 1], 2, &FedTreeConfig { params, ..Default::default() }).unwrap();
    let t = &fed.transcript;
    assert!(t.count(MessageKind::GradientsPlain) >= 1);
    assert!(t.count(MessageKind::HistogramPlain) >= 2);
}

#[test]
fn threaded_matches_lockstep() {
    let (cells, labels) = problem(21, 150, 9, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let parties = random_split(&cells, 3, &mut rng);
    let params = GbdtParams { n_trees: 3, max_depth: 4, ..Default::default() };
    let a = train_fedtree(&parties, &labels, 4, &FedTreeConfig { params, ..Default::default() }).unwrap();
    let cfg = FedTreeConfig { params, exec: ExecMode::Threaded, ..Default::default() };
    let b = train_fedtree(&parties, &labels, 4, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.transcript.canonical(), b.transcript.canonical());
}

#[test]
fn regrouping_columns_does_not_change_the_model() {
    let (cells, labels) = problem(17, 160, 9, 4);
    let params = GbdtParams { n_trees: 4, max_depth: 4, ..Default::default() };
    let two = FeaturePartition::new(vec!["A".into(), "B".into()], vec![0, 1, 1, 0, 1, 1, 0, 1, 1], 1).unwrap();
    let three =
        FeaturePartition::new(vec!["A".into(), "B".into(), "C".into()], vec![0, 1, 2, 0, 1, 2, 0, 1, 2], 0).unwrap();
    let m2 = train_fedtree(
        &split_columns(cells.view(), &two).unwrap(),
        &labels,
        4,
        &FedTreeConfig { params, active_party: 1, ..Default::default() },
    )
    .unwrap()
    .model;
    let m3 = train_fedtree(
        &split_columns(cells.view(), &three).unwrap(),
        &labels,
        4,
        &FedTreeConfig { params, ..Default::default() },
    )
    .unwrap()
    .model;
    assert_eq!(m2.to_centralized(), m3.to_centralized());
}

#[test]
fn prediction_edge_cases() {
    let (cells, labels) = problem(1, 60, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let parties = random_split(&cells, 2, &mut rng);
    let fed = train_fedtree(&parties, &labels, 2, &FedTreeConfig::default()).unwrap();
    let empty: Vec<Array2<u8>> = parties.iter().map(|p| Array2::zeros((0, p.feature_ids.len()))).collect();
    let empty_views: Vec<ArrayView2<u8>> = empty.iter().map(|a| a.view()).collect();
    assert!(predict_federated(&fed.model, &empty_views).unwrap().is_empty());
    assert!(predict_federated(&fed.model, &views(&parties)[..1]).is_err());
    assert_eq!(FederatedModel::from_json(&fed.model.to_json()).unwrap(), fed.model);
}

#[test]
fn invalid_inputs_are_rejected() {
    let (cells, labels) = problem(2, 40, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut parties = random_split(&cells, 2, &mut rng);
    assert!(train_fedtree(&parties, &labels[..39], 2, &FedTreeConfig::default()).is_err());
    assert!(train_fedtree(&parties, &labels, 2, &FedTreeConfig { active_party: 2, ..Default::default() }).is_err());
    let bad_key = FedTreeConfig { mode: FedTreeMode::Paillier, key_bits: 300, ..Default::default() };
    assert!(matches!(train_fedtree(&parties, &labels, 2, &bad_key), Err(Error::Config(_))));
    parties[1].feature_ids[0] = parties[0].feature_ids[0];
    assert!(matches!(train_fedtree(&parties, &labels, 2, &FedTreeConfig::default()), Err(Error::Config(_))));
    assert!(train_fedtree(&[], &labels, 2, &FedTreeConfig::default()).is_err());
    assert!(PartyColumns::new(Array2::zeros((3, 2)), vec![0]).is_err());
}
