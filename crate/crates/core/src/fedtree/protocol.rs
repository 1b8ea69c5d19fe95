use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use rayon::prelude::*;

use super::{FedTreeConfig, FedTreeMode, FederatedModel, PartyColumns};
use crate::error::{Error, Result};
use crate::federation::wire::{Reader, Writer};
use crate::federation::{
    run_protocol, violation, Context, Message, MessageKind, Party, PartyId, PartyState, Phase, ProtocolError,
    RunOptions, Schedule, Transcript,
};
use crate::gbdt::{
    accumulate_round, base_scores, best_split, check_labels, compute_hist, initial_scores, propose_split_candidates,
    quantize_gradients, update_gradients, BinStats, FeatureBlock, FeatureHistogram, GbdtParams, Histogram, LevelSplit,
    Tree, TreeGrower, GRADIENT_SCALE_BITS,
};
use crate::nn::derive_seed;
use crate::paillier::{keygen, Ciphertext, FixedPointEncoding, PaillierKeys, PublicKey};

type PResult<T> = std::result::Result<T, ProtocolError>;

fn party_error(party: PartyId) -> impl Fn(Error) -> ProtocolError {
    move |e| ProtocolError::Party { party, source: Box::new(e) }
}

/// A frontier node of one class tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct NodeKey {
    class: u32,
    node: u32,
}

fn write_key(w: &mut Writer, k: NodeKey) {
    w.u32(k.class).u32(k.node);
}

fn read_key(r: &mut Reader) -> PResult<NodeKey> {
    Ok(NodeKey { class: r.u32()?, node: r.u32()? })
}

/// Round and level stamp carried by every per-level frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Stamp {
    round: u32,
    level: u32,
}

fn write_stamp(w: &mut Writer, s: Stamp) {
    w.u32(s.round).u32(s.level);
}

fn read_stamp(r: &mut Reader) -> PResult<Stamp> {
    Ok(Stamp { round: r.u32()?, level: r.u32()? })
}

fn bits_to_samples(bits: &[bool]) -> Vec<usize> {
    bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// Statistics of one bin: gradient and hessian sums plus the plaintext count.
#[derive(Clone, Debug)]
struct Bin<T> {
    g: T,
    h: T,
    count: u64,
}

#[derive(Clone, Debug)]
struct FeatureStats<T> {
    slot: u32,
    feature: u64,
    thresholds: Vec<f64>,
    bins: Vec<Bin<T>>,
}

#[derive(Clone, Debug)]
struct NodeStats<T> {
    key: NodeKey,
    features: Vec<FeatureStats<T>>,
}

fn encode_hist<T>(stamp: Stamp, nodes: &[NodeStats<T>], mut put: impl FnMut(&mut Writer, &T)) -> Vec<u8> {
    let mut w = Writer::new();
    write_stamp(&mut w, stamp);
    w.u32(nodes.len() as u32);
    for n in nodes {
        write_key(&mut w, n.key);
        w.u32(n.features.len() as u32);
        for f in &n.features {
            w.u32(f.slot).u64(f.feature).f64s(&f.thresholds).u32(f.bins.len() as u32);
            for b in &f.bins {
                put(&mut w, &b.g);
                put(&mut w, &b.h);
                w.u64(b.count);
            }
        }
    }
    w.finish()
}

fn decode_hist<T>(
    payload: &[u8],
    mut get: impl FnMut(&mut Reader) -> PResult<T>,
) -> PResult<(Stamp, Vec<NodeStats<T>>)> {
    let mut r = Reader::new(payload);
    let stamp = read_stamp(&mut r)?;
    let n_nodes = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
    for _ in 0..n_nodes {
        let key = read_key(&mut r)?;
        let n_features = r.u32()? as usize;
        let mut features = Vec::with_capacity(n_features.min(1 << 16));
        for _ in 0..n_features {
            let slot = r.u32()?;
            let feature = r.u64()?;
            let thresholds = r.f64s()?;
            let n_bins = r.u32()? as usize;
            if n_bins != thresholds.len() + 1 {
                return Err(ProtocolError::Decode(format!("{n_bins} bins for {} thresholds", thresholds.len())));
            }
            let mut bins = Vec::with_capacity(n_bins);
            for _ in 0..n_bins {
                bins.push(Bin { g: get(&mut r)?, h: get(&mut r)?, count: r.u64()? });
            }
            features.push(FeatureStats { slot, feature, thresholds, bins });
        }
        nodes.push(NodeStats { key, features });
    }
    r.finish()?;
    Ok((stamp, nodes))
}

fn plain_stats(key: NodeKey, hist: Histogram, slots: &HashMap<usize, usize>) -> NodeStats<f64> {
    NodeStats {
        key,
        features: hist
            .features
            .into_iter()
            .map(|f| FeatureStats {
                slot: slots[&f.feature] as u32,
                feature: f.feature as u64,
                thresholds: f.thresholds,
                bins: f.bins.into_iter().map(|b| Bin { g: b.g, h: b.h, count: b.count as u64 }).collect(),
            })
            .collect(),
    }
}

/// Gradient frame: round, rows, classes, then per class the `g` and `h`
/// vectors, as floats or as fixed-width ciphertexts.
fn encode_plain_gradients(round: u32, g: &[Vec<f64>], h: &[Vec<f64>]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(round).u32(g.first().map_or(0, Vec::len) as u32).u32(g.len() as u32);
    for (gk, hk) in g.iter().zip(h) {
        w.f64s(gk).f64s(hk);
    }
    w.finish()
}

fn encode_cipher_gradients(round: u32, n: usize, k: usize, cts: &[Ciphertext], pk: &PublicKey) -> PResult<Vec<u8>> {
    let mut w = Writer::new();
    w.u32(round).u32(n as u32).u32(k as u32);
    for c in cts {
        w.raw(&pk.serialize(c).map_err(|e| ProtocolError::Decode(e.to_string()))?);
    }
    Ok(w.finish())
}

enum Gradients {
    Plain { g: Vec<Vec<f64>>, h: Vec<Vec<f64>> },
    Cipher { g: Vec<Vec<Ciphertext>>, h: Vec<Vec<Ciphertext>> },
}

struct Active {
    id: PartyId,
    n_parties: usize,
    block: FeatureBlock,
    slots: HashMap<usize, usize>,
    labels: Vec<usize>,
    n_classes: usize,
    params: GbdtParams,
    mode: FedTreeMode,
    key_bits: usize,
    enc: FixedPointEncoding,
    seed: u64,
    keys: Option<PaillierKeys>,
    scores: Array2<f64>,
    round: u32,
    level: u32,
    g: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    growers: Vec<TreeGrower>,
    /// Frontier nodes of the current level: class and position in its grower's frontier.
    entries: Vec<(usize, usize)>,
    hists: BTreeMap<PartyId, Vec<Histogram>>,
    /// Owning party and local slot of every global feature id seen.
    owners: HashMap<usize, (PartyId, usize)>,
    decisions: Vec<Option<LevelSplit>>,
    /// Entries whose partition bits each passive owner still owes.
    awaiting: BTreeMap<PartyId, Vec<usize>>,
    trees: Vec<Vec<Tree>>,
    state: PartyState,
}

impl Active {
    fn stamp(&self) -> Stamp {
        Stamp { round: self.round, level: self.level }
    }

    fn key(&self, e: usize) -> NodeKey {
        let (class, pos) = self.entries[e];
        NodeKey { class: class as u32, node: self.growers[class].frontier()[pos].id as u32 }
    }

    fn samples(&self, e: usize) -> &[usize] {
        let (class, pos) = self.entries[e];
        &self.growers[class].frontier()[pos].samples
    }

    fn has_passive(&self) -> bool {
        self.n_parties > 1
    }

    fn begin_round(&mut self, ctx: &mut Context) -> PResult<()> {
        if self.round as usize == self.params.n_trees {
            if self.has_passive() {
                ctx.broadcast(MessageKind::Done, Vec::new());
            }
            self.state = PartyState::Done;
            return Ok(());
        }
        let gp = quantize_gradients(update_gradients(&self.labels, self.scores.view()));
        self.g = (0..self.n_classes).map(|k| gp.g.column(k).to_vec()).collect();
        self.h = (0..self.n_classes).map(|k| gp.h.column(k).to_vec()).collect();
        if self.has_passive() {
            let n = self.labels.len();
            let payload = match &self.keys {
                None => {
                    let p = ctx.time(Phase::Transfer, || encode_plain_gradients(self.round, &self.g, &self.h));
                    (MessageKind::GradientsPlain, p)
                }
                Some(keys) => {
                    let flat: Vec<f64> =
                        self.g.iter().zip(&self.h).flat_map(|(gk, hk)| gk.iter().chain(hk).copied()).collect();
                    let seed = derive_seed(self.seed, u64::from(self.round) + 1);
                    let enc = self.enc;
                    let cts = ctx
                        .time(Phase::Encrypt, || keys.encrypt_batch(&flat, enc, seed))
                        .map_err(|e| party_error(self.id)(e.into()))?;
                    let p = ctx.time(Phase::Transfer, || {
                        encode_cipher_gradients(self.round, n, self.n_classes, &cts, keys.public())
                    })?;
                    (MessageKind::GradientsCipher, p)
                }
            };
            ctx.broadcast(payload.0, payload.1);
        }
        let all: Vec<usize> = (0..self.labels.len()).collect();
        let p = &self.params;
        self.growers = (0..self.n_classes)
            .map(|k| {
                TreeGrower::new(all.len(), all.clone(), &self.g[k], &self.h[k], p.max_depth, p.min_child, p.lambda)
            })
            .collect();
        self.level = 0;
        self.begin_level(ctx)
    }

    fn begin_level(&mut self, ctx: &mut Context) -> PResult<()> {
        self.entries = self
            .growers
            .iter()
            .enumerate()
            .flat_map(|(k, gr)| (0..gr.frontier().len()).map(move |pos| (k, pos)))
            .collect();
        if self.entries.is_empty() {
            return self.finish_round(ctx);
        }
        self.hists.clear();
        self.decisions = vec![None; self.entries.len()];
        let n = self.labels.len();
        if self.has_passive() {
            let payload = ctx.time(Phase::Transfer, || {
                let mut w = Writer::new();
                write_stamp(&mut w, self.stamp());
                w.u32(self.entries.len() as u32);
                let mut bits = vec![false; n];
                for e in 0..self.entries.len() {
                    write_key(&mut w, self.key(e));
                    bits.iter_mut().for_each(|b| *b = false);
                    for &i in self.samples(e) {
                        bits[i] = true;
                    }
                    w.bits(&bits);
                }
                w.finish()
            });
            ctx.broadcast(MessageKind::NodeFrontier, payload);
        }
        let local: Vec<NodeStats<f64>> = (0..self.entries.len())
            .into_par_iter()
            .map(|e| {
                let k = self.entries[e].0;
                plain_stats(
                    self.key(e),
                    compute_hist(&self.block, &self.g[k], &self.h[k], self.samples(e)),
                    &self.slots,
                )
            })
            .collect();
        let payload = ctx.time(Phase::Transfer, || {
            encode_hist(self.stamp(), &local, |w, &v| {
                w.f64(v);
            })
        });
        ctx.send(self.id, MessageKind::HistogramPlain, payload);
        Ok(())
    }

    fn accept_hist(&mut self, from: PartyId, kind: MessageKind, nodes: Vec<NodeStats<f64>>) -> PResult<()> {
        if self.hists.contains_key(&from) {
            return Err(violation(self.id, kind, format!("second histogram from {from} this level")));
        }
        if nodes.len() != self.entries.len() {
            return Err(violation(self.id, kind, format!("{} nodes, expected {}", nodes.len(), self.entries.len())));
        }
        let mut hists = Vec::with_capacity(nodes.len());
        for (e, node) in nodes.into_iter().enumerate() {
            if node.key != self.key(e) {
                return Err(violation(self.id, kind, format!("node {:?} out of order", node.key)));
            }
            let mut features = Vec::with_capacity(node.features.len());
            for f in node.features {
                let feature = f.feature as usize;
                match self.owners.get(&feature) {
                    Some(&(owner, slot)) if owner != from || slot != f.slot as usize => {
                        return Err(violation(
                            self.id,
                            kind,
                            format!("feature {feature} claimed by {from} and {owner}"),
                        ));
                    }
                    _ => {
                        self.owners.insert(feature, (from, f.slot as usize));
                    }
                }
                let total: u64 = f.bins.iter().map(|b| b.count).sum();
                if total != self.samples(e).len() as u64 {
                    return Err(violation(self.id, kind, format!("feature {feature} counts {total} samples")));
                }
                let fh = FeatureHistogram {
                    feature,
                    thresholds: f.thresholds,
                    bins: f.bins.into_iter().map(|b| BinStats { g: b.g, h: b.h, count: b.count as usize }).collect(),
                };
                let sum = fh.total();
                let (class, pos) = self.entries[e];
                let node = &self.growers[class].frontier()[pos];
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + b.abs());
                if !close(sum.g, node.g_sum) || !close(sum.h, node.h_sum) {
                    return Err(violation(self.id, kind, format!("feature {feature} does not conserve node totals")));
                }
                features.push(fh);
            }
            hists.push(Histogram { features });
        }
        self.hists.insert(from, hists);
        Ok(())
    }

    fn choose_splits(&mut self, ctx: &mut Context) -> PResult<()> {
        let split_params = self.params.split_params();
        let mut per_party = std::mem::take(&mut self.hists);
        let mut columns: Vec<std::vec::IntoIter<Histogram>> =
            per_party.values_mut().map(|v| std::mem::take(v).into_iter()).collect();
        let unions: Vec<Histogram> = (0..self.entries.len())
            .map(|_| Histogram::union(columns.iter_mut().map(|c| c.next().expect("one histogram per entry"))))
            .collect();
        let choices: Vec<_> = unions.par_iter().map(|h| best_split(h, &split_params)).collect();
        let mut instructions: BTreeMap<PartyId, Vec<(usize, usize, usize)>> = BTreeMap::new();
        for (e, choice) in choices.into_iter().enumerate() {
            let Some(c) = choice else { continue };
            let (owner, slot) = self.owners[&c.feature];
            let go_left = if owner == self.id { self.block.go_left(slot, c.bin, self.samples(e)) } else { Vec::new() };
            self.decisions[e] = Some(LevelSplit { feature: c.feature, threshold: c.threshold, go_left });
            if owner != self.id {
                instructions.entry(owner).or_default().push((e, slot, c.bin));
            }
        }
        self.awaiting.clear();
        for (owner, list) in instructions {
            let payload = ctx.time(Phase::Transfer, || {
                let mut w = Writer::new();
                write_stamp(&mut w, self.stamp());
                w.u32(list.len() as u32);
                for &(e, slot, bin) in &list {
                    write_key(&mut w, self.key(e));
                    w.u32(slot as u32).u32(bin as u32);
                }
                w.finish()
            });
            ctx.send(owner, MessageKind::SplitInstruction, payload);
            self.awaiting.insert(owner, list.into_iter().map(|(e, _, _)| e).collect());
        }
        if self.awaiting.is_empty() {
            self.apply_level(ctx)
        } else {
            Ok(())
        }
    }

    fn accept_bits(&mut self, from: PartyId, payload: &[u8], ctx: &mut Context) -> PResult<()> {
        let kind = MessageKind::PartitionBits;
        let expected = self
            .awaiting
            .remove(&from)
            .ok_or_else(|| violation(self.id, kind, format!("unrequested bits from {from}")))?;
        let (stamp, parts) = ctx.time(Phase::Transfer, || -> PResult<_> {
            let mut r = Reader::new(payload);
            let stamp = read_stamp(&mut r)?;
            let n = r.u32()? as usize;
            let mut parts = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                parts.push((read_key(&mut r)?, r.bits()?));
            }
            r.finish()?;
            Ok((stamp, parts))
        })?;
        if stamp != self.stamp() || parts.len() != expected.len() {
            return Err(violation(self.id, kind, format!("bits {stamp:?} for {:?}", self.stamp())));
        }
        for (e, (key, bits)) in expected.into_iter().zip(parts) {
            if key != self.key(e) || bits.len() != self.samples(e).len() {
                return Err(violation(self.id, kind, format!("bits for {key:?} do not match the request")));
            }
            self.decisions[e].as_mut().expect("instructed entry has a split").go_left = bits;
        }
        if self.awaiting.is_empty() {
            self.apply_level(ctx)
        } else {
            Ok(())
        }
    }

    fn apply_level(&mut self, ctx: &mut Context) -> PResult<()> {
        let mut per_class: Vec<Vec<Option<LevelSplit>>> = vec![Vec::new(); self.n_classes];
        for (&(k, _), d) in self.entries.iter().zip(std::mem::take(&mut self.decisions)) {
            per_class[k].push(d);
        }
        for (k, decisions) in per_class.into_iter().enumerate() {
            if !self.growers[k].is_done() {
                self.growers[k].apply_level(decisions, &self.g[k], &self.h[k]);
            }
        }
        self.level += 1;
        self.begin_level(ctx)
    }

    fn finish_round(&mut self, ctx: &mut Context) -> PResult<()> {
        let (round, weights): (Vec<Tree>, Vec<Vec<f64>>) =
            std::mem::take(&mut self.growers).into_iter().map(TreeGrower::finish).unzip();
        accumulate_round(&mut self.scores, &weights, self.params.learning_rate);
        self.trees.push(round);
        self.round += 1;
        self.begin_round(ctx)
    }
}

impl Party for Active {
    fn id(&self) -> PartyId {
        self.id
    }

    fn start(&mut self, ctx: &mut Context) -> PResult<()> {
        self.state = PartyState::Waiting;
        if self.mode == FedTreeMode::Paillier && self.has_passive() {
            let seed = derive_seed(self.seed, 0);
            let keys = ctx
                .time(Phase::Encrypt, || keygen(self.key_bits, Some(seed)))
                .map_err(|e| party_error(self.id)(e.into()))?;
            let payload = ctx.time(Phase::Transfer, || {
                let mut w = Writer::new();
                w.bytes(&keys.public().to_bytes()).u32(self.enc.scale_bits);
                w.finish()
            });
            ctx.broadcast(MessageKind::PublicKey, payload);
            self.keys = Some(keys);
        }
        self.begin_round(ctx)
    }

    fn handle(&mut self, msg: &Message, ctx: &mut Context) -> PResult<()> {
        if self.state != PartyState::Waiting {
            return Err(violation(self.id, msg.kind, "frame after training finished"));
        }
        match msg.kind {
            MessageKind::HistogramPlain => {
                if self.keys.is_some() && msg.sender != self.id {
                    return Err(violation(self.id, msg.kind, "plaintext histogram in encrypted mode"));
                }
                let (stamp, nodes) = ctx.time(Phase::Transfer, || decode_hist(&msg.payload, |r| r.f64()))?;
                if stamp != self.stamp() {
                    return Err(violation(self.id, msg.kind, format!("histogram {stamp:?} for {:?}", self.stamp())));
                }
                self.accept_hist(msg.sender, msg.kind, nodes)?;
            }
            MessageKind::HistogramCipher => {
                let Some(keys) = &self.keys else {
                    return Err(violation(self.id, msg.kind, "encrypted histogram in plaintext mode"));
                };
                let pk = keys.public();
                let width = pk.ciphertext_len();
                let (stamp, nodes) = ctx.time(Phase::Transfer, || {
                    decode_hist(&msg.payload, |r| {
                        pk.deserialize(r.raw(width)?).map_err(|e| ProtocolError::Decode(e.to_string()))
                    })
                })?;
                if stamp != self.stamp() {
                    return Err(violation(self.id, msg.kind, format!("histogram {stamp:?} for {:?}", self.stamp())));
                }
                let nodes = ctx
                    .time(Phase::Decrypt, || decrypt_stats(keys, nodes))
                    .map_err(|e| party_error(self.id)(e.into()))?;
                self.accept_hist(msg.sender, msg.kind, nodes)?;
            }
            MessageKind::PartitionBits => return self.accept_bits(msg.sender, &msg.payload, ctx),
            other => return Err(violation(self.id, other, "unexpected frame at the active party")),
        }
        if self.hists.len() == self.n_parties {
            self.choose_splits(ctx)?;
        }
        Ok(())
    }

    fn state(&self) -> PartyState {
        self.state
    }

    fn describe(&self) -> String {
        format!(
            "{:?} round {} level {}, {} of {} histograms, awaiting bits from {:?}",
            self.state,
            self.round,
            self.level,
            self.hists.len(),
            self.n_parties,
            self.awaiting.keys().collect::<Vec<_>>()
        )
    }
}

fn decrypt_stats(
    keys: &PaillierKeys,
    nodes: Vec<NodeStats<Ciphertext>>,
) -> std::result::Result<Vec<NodeStats<f64>>, crate::paillier::PaillierError> {
    nodes
        .into_par_iter()
        .map(|n| {
            let features = n
                .features
                .into_par_iter()
                .map(|f| {
                    let bins = f
                        .bins
                        .iter()
                        .map(|b| Ok(Bin { g: keys.decrypt(&b.g)?, h: keys.decrypt(&b.h)?, count: b.count }))
                        .collect::<std::result::Result<_, _>>()?;
                    Ok(FeatureStats { slot: f.slot, feature: f.feature, thresholds: f.thresholds, bins })
                })
                .collect::<std::result::Result<_, _>>()?;
            Ok(NodeStats { key: n.key, features })
        })
        .collect()
}

struct Passive {
    id: PartyId,
    active: PartyId,
    n: usize,
    block: FeatureBlock,
    slots: HashMap<usize, usize>,
    mode: FedTreeMode,
    pk: Option<PublicKey>,
    enc: FixedPointEncoding,
    round: u32,
    grads: Option<Gradients>,
    stamp: Option<Stamp>,
    nodes: HashMap<NodeKey, Vec<usize>>,
    state: PartyState,
}

impl Passive {
    fn decode_gradients(&self, kind: MessageKind, payload: &[u8]) -> PResult<(u32, Gradients)> {
        let mut r = Reader::new(payload);
        let round = r.u32()?;
        let (n, k) = (r.u32()? as usize, r.u32()? as usize);
        if n != self.n {
            return Err(violation(self.id, kind, format!("{n} gradient rows, this party holds {}", self.n)));
        }
        let grads = match kind {
            MessageKind::GradientsPlain => {
                let (mut g, mut h) = (Vec::with_capacity(k), Vec::with_capacity(k));
                for _ in 0..k {
                    g.push(r.f64s()?);
                    h.push(r.f64s()?);
                }
                if g.iter().chain(&h).any(|v| v.len() != n) {
                    return Err(ProtocolError::Decode("gradient vector length".into()));
                }
                Gradients::Plain { g, h }
            }
            _ => {
                let pk = self.pk.as_ref().ok_or_else(|| violation(self.id, kind, "no public key yet"))?;
                let width = pk.ciphertext_len();
                let read = |r: &mut Reader| -> PResult<Vec<Ciphertext>> {
                    (0..n)
                        .map(|_| pk.deserialize(r.raw(width)?).map_err(|e| ProtocolError::Decode(e.to_string())))
                        .collect()
                };
                let (mut g, mut h) = (Vec::with_capacity(k), Vec::with_capacity(k));
                for _ in 0..k {
                    g.push(read(&mut r)?);
                    h.push(read(&mut r)?);
                }
                Gradients::Cipher { g, h }
            }
        };
        r.finish()?;
        Ok((round, grads))
    }

    fn histograms(&self, ctx: &mut Context, stamp: Stamp, keys: &[NodeKey]) -> PResult<()> {
        let grads =
            self.grads.as_ref().ok_or_else(|| violation(self.id, MessageKind::NodeFrontier, "no gradients yet"))?;
        let n_classes = match grads {
            Gradients::Plain { g, .. } => g.len(),
            Gradients::Cipher { g, .. } => g.len(),
        };
        if let Some(k) = keys.iter().find(|k| k.class as usize >= n_classes) {
            return Err(violation(self.id, MessageKind::NodeFrontier, format!("class {} out of range", k.class)));
        }
        match grads {
            Gradients::Plain { g, h } => {
                let stats: Vec<NodeStats<f64>> = keys
                    .par_iter()
                    .map(|&key| {
                        let k = key.class as usize;
                        plain_stats(key, compute_hist(&self.block, &g[k], &h[k], &self.nodes[&key]), &self.slots)
                    })
                    .collect();
                let payload = ctx.time(Phase::Transfer, || {
                    encode_hist(stamp, &stats, |w, &v| {
                        w.f64(v);
                    })
                });
                ctx.send(self.active, MessageKind::HistogramPlain, payload);
            }
            Gradients::Cipher { g, h } => {
                let pk = self.pk.as_ref().expect("cipher gradients imply a key");
                let stats = self.cipher_stats(pk, g, h, keys).map_err(|e| party_error(self.id)(e.into()))?;
                let payload = ctx.time(Phase::Transfer, || {
                    encode_hist(stamp, &stats, |w, c| {
                        w.raw(&pk.serialize(c).expect("ciphertext under the session key"));
                    })
                });
                ctx.send(self.active, MessageKind::HistogramCipher, payload);
            }
        }
        Ok(())
    }

    /// Homomorphic per-bin sums, parallel over (node, feature) pairs.
    fn cipher_stats(
        &self,
        pk: &PublicKey,
        g: &[Vec<Ciphertext>],
        h: &[Vec<Ciphertext>],
        keys: &[NodeKey],
    ) -> std::result::Result<Vec<NodeStats<Ciphertext>>, crate::paillier::PaillierError> {
        let m = self.block.n_features();
        let tasks: Vec<(usize, usize)> = (0..keys.len()).flat_map(|e| (0..m).map(move |s| (e, s))).collect();
        let features: Vec<FeatureStats<Ciphertext>> = tasks
            .par_iter()
            .map(|&(e, slot)| {
                let key = keys[e];
                let k = key.class as usize;
                let mut bins: Vec<Bin<Ciphertext>> = (0..self.block.n_bins(slot))
                    .map(|_| Bin { g: pk.zero(self.enc), h: pk.zero(self.enc), count: 0 })
                    .collect();
                for &i in &self.nodes[&key] {
                    let b = &mut bins[self.block.bin(slot, i)];
                    pk.add_assign(&mut b.g, &g[k][i])?;
                    pk.add_assign(&mut b.h, &h[k][i])?;
                    b.count += 1;
                }
                Ok(FeatureStats {
                    slot: slot as u32,
                    feature: self.block.keys()[slot] as u64,
                    thresholds: self.block.thresholds(slot).to_vec(),
                    bins,
                })
            })
            .collect::<std::result::Result<_, _>>()?;
        let mut it = features.into_iter();
        Ok(keys.iter().map(|&key| NodeStats { key, features: it.by_ref().take(m).collect() }).collect())
    }
}

impl Party for Passive {
    fn id(&self) -> PartyId {
        self.id
    }

    fn start(&mut self, _: &mut Context) -> PResult<()> {
        self.state = PartyState::Waiting;
        Ok(())
    }

    fn handle(&mut self, msg: &Message, ctx: &mut Context) -> PResult<()> {
        if msg.sender != self.active {
            return Err(violation(self.id, msg.kind, format!("frame from passive party {}", msg.sender)));
        }
        self.state = PartyState::Waiting;
        match msg.kind {
            MessageKind::PublicKey => {
                let (n, scale) = ctx.time(Phase::Transfer, || -> PResult<_> {
                    let mut r = Reader::new(&msg.payload);
                    let n = r.bytes()?.to_vec();
                    let scale = r.u32()?;
                    r.finish()?;
                    Ok((n, scale))
                })?;
                self.pk = Some(PublicKey::from_bytes(&n).map_err(|e| party_error(self.id)(e.into()))?);
                self.enc = FixedPointEncoding::new(scale);
            }
            MessageKind::GradientsPlain | MessageKind::GradientsCipher => {
                if (msg.kind == MessageKind::GradientsPlain) != (self.mode == FedTreeMode::Plaintext) {
                    return Err(violation(self.id, msg.kind, format!("gradients do not match {:?} mode", self.mode)));
                }
                let (round, grads) = ctx.time(Phase::Transfer, || self.decode_gradients(msg.kind, &msg.payload))?;
                self.round = round;
                self.grads = Some(grads);
            }
            MessageKind::NodeFrontier => {
                let (stamp, nodes) = ctx.time(Phase::Transfer, || -> PResult<_> {
                    let mut r = Reader::new(&msg.payload);
                    let stamp = read_stamp(&mut r)?;
                    let count = r.u32()? as usize;
                    let mut nodes = Vec::with_capacity(count.min(1 << 16));
                    for _ in 0..count {
                        let key = read_key(&mut r)?;
                        let bits = r.bits()?;
                        nodes.push((key, bits));
                    }
                    r.finish()?;
                    Ok((stamp, nodes))
                })?;
                if stamp.round != self.round {
                    return Err(violation(
                        self.id,
                        msg.kind,
                        format!("frontier for round {}, gradients of {}", stamp.round, self.round),
                    ));
                }
                if let Some((key, _)) = nodes.iter().find(|(_, b)| b.len() != self.n) {
                    return Err(violation(self.id, msg.kind, format!("membership of {key:?} has the wrong length")));
                }
                let keys: Vec<NodeKey> = nodes.iter().map(|(k, _)| *k).collect();
                self.nodes = nodes.into_iter().map(|(k, b)| (k, bits_to_samples(&b))).collect();
                self.stamp = Some(stamp);
                self.histograms(ctx, stamp, &keys)?;
            }
            MessageKind::SplitInstruction => {
                let (stamp, list) = ctx.time(Phase::Transfer, || -> PResult<_> {
                    let mut r = Reader::new(&msg.payload);
                    let stamp = read_stamp(&mut r)?;
                    let count = r.u32()? as usize;
                    let mut list = Vec::with_capacity(count.min(1 << 16));
                    for _ in 0..count {
                        list.push((read_key(&mut r)?, r.u32()? as usize, r.u32()? as usize));
                    }
                    r.finish()?;
                    Ok((stamp, list))
                })?;
                if Some(stamp) != self.stamp {
                    return Err(violation(self.id, msg.kind, format!("instruction {stamp:?} for {:?}", self.stamp)));
                }
                let mut w = Writer::new();
                write_stamp(&mut w, stamp);
                w.u32(list.len() as u32);
                for (key, slot, bin) in list {
                    let samples = self
                        .nodes
                        .get(&key)
                        .ok_or_else(|| violation(self.id, msg.kind, format!("unknown node {key:?}")))?;
                    if slot >= self.block.n_features() || bin + 1 >= self.block.n_bins(slot) {
                        return Err(violation(self.id, msg.kind, format!("split slot {slot} bin {bin} out of range")));
                    }
                    write_key(&mut w, key);
                    w.bits(&self.block.go_left(slot, bin, samples));
                }
                ctx.send(self.active, MessageKind::PartitionBits, w.finish());
            }
            MessageKind::Done => self.state = PartyState::Done,
            other => return Err(violation(self.id, other, "unexpected frame at a passive party")),
        }
        Ok(())
    }

    fn state(&self) -> PartyState {
        self.state
    }

    fn describe(&self) -> String {
        format!("{:?} round {}, stamp {:?}", self.state, self.round, self.stamp)
    }
}

#[derive(Clone, Debug)]
pub struct FedTreeOutcome {
    pub model: FederatedModel,
    pub transcript: Transcript,
}

fn block_of(cols: &PartyColumns) -> (FeatureBlock, HashMap<usize, usize>) {
    let candidates = propose_split_candidates(cols.cells.view());
    let block = FeatureBlock::new(cols.cells.view(), cols.feature_ids.clone(), &candidates);
    let slots = cols.feature_ids.iter().enumerate().map(|(s, &f)| (f, s)).collect();
    (block, slots)
}

/// Trains a boosted ensemble across `parties` (party `p` runs as
/// `PartyId(p)`). Labels live with `cfg.active_party`.
pub fn train_fedtree(
    parties: &[PartyColumns],
    labels: &[usize],
    n_classes: usize,
    cfg: &FedTreeConfig,
) -> Result<FedTreeOutcome> {
    let n_parties = parties.len();
    if n_parties == 0 {
        return Err(Error::Config("at least one party is required".into()));
    }
    cfg.validate(n_parties)?;
    let n = labels.len();
    for (p, cols) in parties.iter().enumerate() {
        if cols.cells.nrows() != n {
            return Err(Error::Shape(format!("party {p} has {} rows, labels {n}", cols.cells.nrows())));
        }
        if cols.cells.ncols() != cols.feature_ids.len() {
            return Err(Error::Shape(format!(
                "party {p} has {} columns, {} ids",
                cols.cells.ncols(),
                cols.feature_ids.len()
            )));
        }
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = parties.iter().flat_map(|c| &c.feature_ids).find(|&&f| !seen.insert(f)) {
        return Err(Error::Config(format!("feature id {dup} held by two parties")));
    }
    check_labels(labels, n_classes)?;

    let enc = FixedPointEncoding::new(GRADIENT_SCALE_BITS);
    let active_id = PartyId(cfg.active_party as u32);
    let base = base_scores(labels, n_classes);
    let (block, slots) = block_of(&parties[cfg.active_party]);
    let mut active = Active {
        id: active_id,
        n_parties,
        block,
        slots,
        labels: labels.to_vec(),
        n_classes,
        params: cfg.params,
        mode: cfg.mode,
        key_bits: cfg.key_bits,
        enc,
        seed: cfg.seed,
        keys: None,
        scores: initial_scores(n, &base),
        round: 0,
        level: 0,
        g: Vec::new(),
        h: Vec::new(),
        growers: Vec::new(),
        entries: Vec::new(),
        hists: BTreeMap::new(),
        owners: HashMap::new(),
        decisions: Vec::new(),
        awaiting: BTreeMap::new(),
        trees: Vec::new(),
        state: PartyState::Idle,
    };
    let mut passive: Vec<Passive> = parties
        .iter()
        .enumerate()
        .filter(|&(p, _)| p != cfg.active_party)
        .map(|(p, cols)| {
            let (block, slots) = block_of(cols);
            Passive {
                id: PartyId(p as u32),
                active: active_id,
                n,
                block,
                slots,
                mode: cfg.mode,
                pk: None,
                enc,
                round: 0,
                grads: None,
                stamp: None,
                nodes: HashMap::new(),
                state: PartyState::Idle,
            }
        })
        .collect();

    let q = n_parties - 1;
    let (t, d) = (cfg.params.n_trees, cfg.params.max_depth);
    let bound = 2 * q + t * (q + d * (3 * q + n_parties));
    let transcript = {
        let mut all: Vec<&mut dyn Party> = Vec::with_capacity(n_parties);
        all.push(&mut active);
        all.extend(passive.iter_mut().map(|p| p as &mut dyn Party));
        let opts = RunOptions { mode: cfg.exec, max_messages: Some(bound) };
        run_protocol(&mut all, &Schedule::start(active_id), &opts).map_err(|e| match e {
            ProtocolError::Party { source, .. } => *source,
            other => Error::Protocol(other),
        })?
    };
    let party_features = parties.iter().map(|c| c.feature_ids.clone()).collect();
    let model = FederatedModel::from_global(cfg.params, n_classes, base, party_features, active.trees)?;
    Ok(FedTreeOutcome { model, transcript })
}
