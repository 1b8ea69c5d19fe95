use ndarray::{Array2, ArrayView2, Axis};

use super::{merge, merge_backward, MergeOp, SplitNnModel, SplitNnTopology};
use crate::error::{Error, Result};
use crate::federation::wire::{Reader, Writer};
use crate::federation::{
    run_protocol, violation, Context, ExecMode, Message, MessageKind, Party, PartyId, PartyState, Phase, ProtocolError,
    RunOptions, Schedule, Transcript,
};
use crate::nn::{batch_schedule, softmax_cross_entropy, Activations, MlpModel, TrainConfig};

fn party_error(party: PartyId) -> impl Fn(Error) -> ProtocolError {
    move |e| ProtocolError::Party { party, source: Box::new(e) }
}

/// Header of a cut frame, followed by `rows × width` little-endian floats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct CutHeader {
    client: u32,
    epoch: u32,
    batch: u32,
}

fn encode_cut(h: CutHeader, m: &Array2<f64>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(h.client).u32(h.epoch).u32(h.batch).u32(m.nrows() as u32).u32(m.ncols() as u32);
    for &v in m.iter() {
        w.f64(v);
    }
    w.finish()
}

fn decode_cut(payload: &[u8]) -> std::result::Result<(CutHeader, Array2<f64>), ProtocolError> {
    let mut r = Reader::new(payload);
    let h = CutHeader { client: r.u32()?, epoch: r.u32()?, batch: r.u32()? };
    let (rows, width) = (r.u32()? as usize, r.u32()? as usize);
    let data = (0..rows * width).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::Decode("non-finite cut entry".into()));
    }
    let m = Array2::from_shape_vec((rows, width), data).expect("length checked");
    Ok((h, m))
}

fn encode_schedule(epoch: u32, batches: &[Vec<usize>]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(epoch).u32(batches.len() as u32);
    for b in batches {
        w.u32(b.len() as u32);
        for &i in b {
            w.u32(i as u32);
        }
    }
    w.finish()
}

fn decode_schedule(payload: &[u8]) -> std::result::Result<(u32, Vec<Vec<usize>>), ProtocolError> {
    let mut r = Reader::new(payload);
    let epoch = r.u32()?;
    let n = r.u32()? as usize;
    let mut batches = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        batches.push((0..len).map(|_| r.u32().map(|v| v as usize)).collect::<std::result::Result<_, _>>()?);
    }
    r.finish()?;
    Ok((epoch, batches))
}

struct Client {
    id: PartyId,
    index: u32,
    server: PartyId,
    x: Array2<f64>,
    model: MlpModel,
    lr: f64,
    epoch: u32,
    schedule: Vec<Vec<usize>>,
    batch: usize,
    pending: Option<Activations>,
    state: PartyState,
}

impl Client {
    fn forward_next(&mut self, ctx: &mut Context) -> std::result::Result<(), ProtocolError> {
        if self.batch >= self.schedule.len() {
            self.state = PartyState::Waiting;
            return Ok(());
        }
        let rows = &self.schedule[self.batch];
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.x.nrows()) {
            return Err(violation(self.id, MessageKind::BatchSchedule, format!("row {bad} out of range")));
        }
        let xb = self.x.select(Axis(0), rows);
        let acts = self.model.forward(xb.view()).map_err(party_error(self.id))?;
        if acts.output().iter().any(|v| !v.is_finite()) {
            let diverged = Error::Diverged { epoch: self.epoch as usize, batch: self.batch };
            return Err(party_error(self.id)(diverged));
        }
        let header = CutHeader { client: self.index, epoch: self.epoch, batch: self.batch as u32 };
        let payload = ctx.time(Phase::Transfer, || encode_cut(header, acts.output()));
        ctx.send(self.server, MessageKind::CutForward, payload);
        self.pending = Some(acts);
        self.state = PartyState::Waiting;
        Ok(())
    }
}

impl Party for Client {
    fn id(&self) -> PartyId {
        self.id
    }

    fn start(&mut self, _: &mut Context) -> std::result::Result<(), ProtocolError> {
        self.state = PartyState::Waiting;
        Ok(())
    }

    fn handle(&mut self, msg: &Message, ctx: &mut Context) -> std::result::Result<(), ProtocolError> {
        if msg.sender != self.server {
            return Err(violation(self.id, msg.kind, format!("frame from non-server {}", msg.sender)));
        }
        match msg.kind {
            MessageKind::BatchSchedule => {
                let (epoch, batches) = ctx.time(Phase::Transfer, || decode_schedule(&msg.payload))?;
                self.epoch = epoch;
                self.schedule = batches;
                self.batch = 0;
                self.forward_next(ctx)
            }
            MessageKind::CutBackward => {
                let (h, grad) = ctx.time(Phase::Transfer, || decode_cut(&msg.payload))?;
                let expect = CutHeader { client: self.index, epoch: self.epoch, batch: self.batch as u32 };
                let acts = self.pending.take().ok_or_else(|| violation(self.id, msg.kind, "no batch in flight"))?;
                if h != expect || grad.dim() != acts.output().dim() {
                    return Err(violation(
                        self.id,
                        msg.kind,
                        format!("gradient {h:?} {:?} for {expect:?}", grad.dim()),
                    ));
                }
                let (grads, _) = self.model.backward(&acts, grad.view()).map_err(party_error(self.id))?;
                self.model.sgd_step(&grads, self.lr);
                if !self.model.is_finite() {
                    let diverged = Error::Diverged { epoch: self.epoch as usize, batch: self.batch };
                    return Err(party_error(self.id)(diverged));
                }
                self.batch += 1;
                self.forward_next(ctx)
            }
            MessageKind::Done => {
                self.state = PartyState::Done;
                Ok(())
            }
            other => Err(violation(self.id, other, "unexpected frame for a client")),
        }
    }

    fn state(&self) -> PartyState {
        self.state
    }

    fn describe(&self) -> String {
        format!("client {:?} epoch {} batch {}/{}", self.state, self.epoch, self.batch, self.schedule.len())
    }
}

struct Server {
    id: PartyId,
    clients: Vec<PartyId>,
    labels: Vec<usize>,
    model: MlpModel,
    merge: MergeOp,
    cfg: TrainConfig,
    epoch: usize,
    schedule: Vec<Vec<usize>>,
    batch: usize,
    cuts: Vec<Option<Array2<f64>>>,
    loss_sum: f64,
    epoch_loss: Vec<f64>,
    state: PartyState,
}

impl Server {
    /// Broadcasts the next non-empty epoch's schedule, or `Done`.
    fn begin_epoch(&mut self, ctx: &mut Context) {
        while self.epoch < self.cfg.epochs {
            self.schedule = batch_schedule(self.labels.len(), &self.cfg, self.epoch);
            self.batch = 0;
            self.loss_sum = 0.0;
            let payload = ctx.time(Phase::Transfer, || encode_schedule(self.epoch as u32, &self.schedule));
            ctx.broadcast(MessageKind::BatchSchedule, payload);
            if !self.schedule.is_empty() {
                self.state = PartyState::Waiting;
                return;
            }
            self.epoch_loss.push(0.0);
            self.epoch += 1;
        }
        ctx.broadcast(MessageKind::Done, Vec::new());
        self.state = PartyState::Done;
    }

    fn step(&mut self, ctx: &mut Context) -> std::result::Result<(), ProtocolError> {
        let fail = party_error(self.id);
        let cuts: Vec<Array2<f64>> = self.cuts.iter_mut().map(|c| c.take().expect("all cuts present")).collect();
        let rows = &self.schedule[self.batch];
        let yb: Vec<usize> = rows.iter().map(|&i| self.labels[i]).collect();
        let merged = merge(&cuts, self.merge).map_err(&fail)?;
        let top = self.model.forward(merged.view()).map_err(&fail)?;
        let (loss, upstream) = softmax_cross_entropy(top.output().view(), &yb);
        if !loss.is_finite() {
            return Err(fail(Error::Diverged { epoch: self.epoch, batch: self.batch }));
        }
        let (grads, d_merged) = self.model.backward(&top, upstream.view()).map_err(&fail)?;
        let d_cuts = merge_backward(d_merged.view(), self.merge, &cuts).map_err(&fail)?;
        for (c, (&client, d)) in self.clients.iter().zip(&d_cuts).enumerate() {
            let header = CutHeader { client: c as u32, epoch: self.epoch as u32, batch: self.batch as u32 };
            let payload = ctx.time(Phase::Transfer, || encode_cut(header, d));
            ctx.send(client, MessageKind::CutBackward, payload);
        }
        self.model.sgd_step(&grads, self.cfg.learning_rate);
        if !self.model.is_finite() {
            return Err(fail(Error::Diverged { epoch: self.epoch, batch: self.batch }));
        }
        self.loss_sum += loss * rows.len() as f64;
        self.batch += 1;
        if self.batch == self.schedule.len() {
            self.epoch_loss.push(self.loss_sum / self.labels.len() as f64);
            self.epoch += 1;
            self.begin_epoch(ctx);
        }
        Ok(())
    }
}

impl Party for Server {
    fn id(&self) -> PartyId {
        self.id
    }

    fn start(&mut self, ctx: &mut Context) -> std::result::Result<(), ProtocolError> {
        self.begin_epoch(ctx);
        Ok(())
    }

    fn handle(&mut self, msg: &Message, ctx: &mut Context) -> std::result::Result<(), ProtocolError> {
        if msg.kind != MessageKind::CutForward {
            return Err(violation(self.id, msg.kind, "server only accepts forward cuts"));
        }
        let c = self
            .clients
            .iter()
            .position(|&p| p == msg.sender)
            .ok_or_else(|| violation(self.id, msg.kind, format!("unknown client {}", msg.sender)))?;
        let (h, cut) = ctx.time(Phase::Transfer, || decode_cut(&msg.payload))?;
        let expect = CutHeader { client: c as u32, epoch: self.epoch as u32, batch: self.batch as u32 };
        if self.state != PartyState::Waiting || h != expect || cut.nrows() != self.schedule[self.batch].len() {
            return Err(violation(self.id, msg.kind, format!("cut {h:?} while expecting {expect:?}")));
        }
        if self.cuts[c].replace(cut).is_some() {
            return Err(violation(self.id, msg.kind, format!("duplicate cut from {}", msg.sender)));
        }
        if self.cuts.iter().all(Option::is_some) {
            self.step(ctx)?;
        }
        Ok(())
    }

    fn state(&self) -> PartyState {
        self.state
    }

    fn describe(&self) -> String {
        let have = self.cuts.iter().filter(|c| c.is_some()).count();
        format!("server {:?} epoch {} batch {} cuts {have}/{}", self.state, self.epoch, self.batch, self.cuts.len())
    }
}

#[derive(Clone, Debug)]
pub struct SplitNnOutcome {
    pub model: SplitNnModel,
    /// Mean training cross-entropy per epoch, as seen by the server.
    pub epoch_loss: Vec<f64>,
    pub transcript: Transcript,
}

/// Trains a split network over the bus. Client `c` is `PartyId(c)` and holds
/// `slices[c]`; the server is `PartyId(k)` and alone holds `labels`. Rows are
/// aligned across slices.
pub fn train_splitnn(
    slices: &[ArrayView2<f64>],
    labels: &[usize],
    topo: &SplitNnTopology,
    mode: ExecMode,
) -> Result<SplitNnOutcome> {
    let n_classes = topo.server.output_width();
    topo.validate(n_classes)?;
    let k = topo.n_clients();
    if slices.len() != k {
        return Err(Error::Shape(format!("{} feature slices for {k} clients", slices.len())));
    }
    for (c, (x, spec)) in slices.iter().zip(&topo.clients).enumerate() {
        if x.nrows() != labels.len() {
            return Err(Error::Shape(format!("client {c} has {} rows, labels {}", x.nrows(), labels.len())));
        }
        if x.ncols() != spec.input_width {
            return Err(Error::Shape(format!(
                "client {c} has {} features, network expects {}",
                x.ncols(),
                spec.input_width
            )));
        }
    }
    crate::nn::train::check_targets(labels, labels.len(), n_classes)?;
    let init = SplitNnModel::init(topo)?;
    let server_id = PartyId(k as u32);
    let mut clients: Vec<Client> = init
        .clients
        .into_iter()
        .zip(slices)
        .enumerate()
        .map(|(c, (model, x))| Client {
            id: PartyId(c as u32),
            index: c as u32,
            server: server_id,
            x: x.to_owned(),
            model,
            lr: topo.train.learning_rate,
            epoch: 0,
            schedule: Vec::new(),
            batch: 0,
            pending: None,
            state: PartyState::Idle,
        })
        .collect();
    let mut server = Server {
        id: server_id,
        clients: (0..k as u32).map(PartyId).collect(),
        labels: labels.to_vec(),
        model: init.server,
        merge: topo.merge,
        cfg: topo.train,
        epoch: 0,
        schedule: Vec::new(),
        batch: 0,
        cuts: vec![None; k],
        loss_sum: 0.0,
        epoch_loss: Vec::new(),
        state: PartyState::Idle,
    };

    let batches_per_epoch = labels.len().div_ceil(topo.train.batch_size);
    let bound = topo.train.epochs * (k + 2 * k * batches_per_epoch) + k;
    let transcript = {
        let mut parties: Vec<&mut dyn Party> = clients.iter_mut().map(|c| c as &mut dyn Party).collect();
        parties.push(&mut server);
        let mut starts: Vec<PartyId> = (0..k as u32).map(PartyId).collect();
        starts.push(server_id);
        let opts = RunOptions { mode, max_messages: Some(bound) };
        run_protocol(&mut parties, &Schedule { starts }, &opts).map_err(|e| match e {
            ProtocolError::Party { source, .. } => *source,
            other => Error::Protocol(other),
        })?
    };
    Ok(SplitNnOutcome {
        model: SplitNnModel {
            clients: clients.into_iter().map(|c| c.model).collect(),
            server: server.model,
            merge: topo.merge,
        },
        epoch_loss: server.epoch_loss,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{assert_locality, LocalityPolicy};
    use crate::nn::{train_model, Activation, Gradients, LayerSpec, MlpSpec};
    use crate::splitnn::{BottomShape, TopShape};
    use ndarray::{s, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, widths: &[usize], seed: u64) -> (Vec<Array2<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slices: Vec<Array2<f64>> =
            widths.iter().map(|&w| Array2::from_shape_simple_fn((n, w), || rng.random_range(0..4) as f64)).collect();
        let labels = (0..n)
            .map(|i| {
                let total: f64 = slices.iter().map(|x| x[[i, 0]]).sum();
                (total as usize) % 4
            })
            .collect();
        (slices, labels)
    }

    fn views(slices: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
        slices.iter().map(|x| x.view()).collect()
    }

    #[test]
    fn frames_roundtrip() {
        let m = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - j as f64 * 0.5);
        let h = CutHeader { client: 2, epoch: 7, batch: 9 };
        assert_eq!(decode_cut(&encode_cut(h, &m)).unwrap(), (h, m));
        let batches = vec![vec![3, 1], vec![0], vec![]];
        assert_eq!(decode_schedule(&encode_schedule(4, &batches)).unwrap(), (4, batches));
    }

    #[test]
    fn modes_agree_and_locality_holds() {
        let (slices, labels) = toy(40, &[3, 2, 4], 1);
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 3, batch_size: 8, seed: 2, shuffle: true };
        let topo = SplitNnTopology::symmetric(
            &[3, 2, 4],
            BottomShape::default(),
            TopShape::default(),
            MergeOp::Concat,
            cfg,
            5,
        );
        let a = train_splitnn(&views(&slices), &labels, &topo, ExecMode::Lockstep).unwrap();
        let b = train_splitnn(&views(&slices), &labels, &topo, ExecMode::Threaded).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_loss, b.epoch_loss);
        assert_eq!(a.transcript.canonical(), b.transcript.canonical());
        assert_eq!(a.transcript.count(MessageKind::CutForward), 3 * 3 * 5);
        assert_eq!(a.transcript.count(MessageKind::CutBackward), 3 * 3 * 5);
        let policy = LocalityPolicy { label_holders: vec![PartyId(3)], require_ciphertext: false };
        assert!(assert_locality(&a.transcript, &policy).passed());
    }

    #[test]
    fn single_client_equals_stacked_network() {
        let (slices, labels) = toy(30, &[4], 3);
        let cfg = TrainConfig { learning_rate: 0.1, epochs: 2, batch_size: 7, seed: 4, shuffle: true };
        let topo =
            SplitNnTopology::symmetric(&[4], BottomShape::default(), TopShape::default(), MergeOp::Concat, cfg, 6);
        let init = SplitNnModel::init(&topo).unwrap();
        let split = train_splitnn(&views(&slices), &labels, &topo, ExecMode::Lockstep).unwrap();
        let stacked = stack(&init.clients[0], &init.server);
        let mono = train_model(stacked, slices[0].view(), &labels, &cfg).unwrap();
        let n_bottom = init.clients[0].n_layers();
        for l in 0..mono.model.n_layers() {
            let (w, b) = if l < n_bottom {
                (&split.model.clients[0].weights[l], &split.model.clients[0].biases[l])
            } else {
                (&split.model.server.weights[l - n_bottom], &split.model.server.biases[l - n_bottom])
            };
            assert!(max_diff(&mono.model.weights[l], w) <= 1e-12);
            assert!(b.iter().zip(&mono.model.biases[l]).all(|(a, c)| (a - c).abs() <= 1e-12));
        }
        for (x, y) in split.epoch_loss.iter().zip(&mono.epoch_loss) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    fn stack(bottom: &MlpModel, top: &MlpModel) -> MlpModel {
        let mut spec = bottom.spec.clone();
        spec.layers.extend(top.spec.layers.iter().copied());
        MlpModel {
            spec,
            weights: bottom.weights.iter().chain(&top.weights).cloned().collect(),
            biases: bottom.biases.iter().chain(&top.biases).cloned().collect(),
        }
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        assert_eq!(a.dim(), b.dim());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn divergence_surfaces_as_error() {
        let (slices, labels) = toy(20, &[2, 2], 5);
        let cfg = TrainConfig { learning_rate: 1e300, epochs: 5, batch_size: 5, seed: 0, shuffle: false };
        let bottom = BottomShape { activation: Activation::Relu, ..Default::default() };
        let top = TopShape { activation: Activation::Relu, ..Default::default() };
        let topo = SplitNnTopology::symmetric(&[2, 2], bottom, top, MergeOp::Concat, cfg, 1);
        let err = train_splitnn(&views(&slices), &labels, &topo, ExecMode::Lockstep).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn every_merge_trains() {
        let (slices, labels) = toy(24, &[2, 3], 8);
        for op in [MergeOp::Concat, MergeOp::Max, MergeOp::Min, MergeOp::Average, MergeOp::Product, MergeOp::Sum] {
            let cfg = TrainConfig { learning_rate: 0.05, epochs: 2, batch_size: 6, seed: 1, shuffle: true };
            let topo = SplitNnTopology::symmetric(&[2, 3], BottomShape::default(), TopShape::default(), op, cfg, 2);
            let out = train_splitnn(&views(&slices), &labels, &topo, ExecMode::Lockstep).unwrap();
            assert_eq!(out.epoch_loss.len(), 2);
            assert!(out.model.clients.iter().all(MlpModel::is_finite));
        }
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (slices, labels) = toy(10, &[2, 3], 2);
        let topo = SplitNnTopology::symmetric(
            &[2, 2],
            BottomShape::default(),
            TopShape::default(),
            MergeOp::Concat,
            TrainConfig::default(),
            2,
        );
        assert!(matches!(train_splitnn(&views(&slices), &labels, &topo, ExecMode::Lockstep), Err(Error::Shape(_))));
        assert!(train_splitnn(&views(&slices[..1]), &labels, &topo, ExecMode::Lockstep).is_err());
    }

    /// Random same-depth bottoms with per-layer shared activations, so the
    /// stacked bottoms form one block-diagonal network.
    fn random_topology(rng: &mut ChaCha8Rng) -> (SplitNnTopology, Vec<usize>) {
        let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
        let k = rng.random_range(1..=3);
        let depth = rng.random_range(1..=2);
        let layer_acts: Vec<Activation> = (0..depth).map(|_| acts[rng.random_range(0..3)]).collect();
        let inputs: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
        let clients: Vec<MlpSpec> = inputs
            .iter()
            .map(|&input_width| MlpSpec {
                input_width,
                layers: layer_acts
                    .iter()
                    .map(|&a| LayerSpec { width: rng.random_range(1..=4), activation: a })
                    .collect(),
                init: crate::nn::Init::GlorotUniform,
                seed: rng.random(),
            })
            .collect();
        let merged: usize = clients.iter().map(MlpSpec::output_width).sum();
        let server = MlpSpec::classifier(
            merged,
            rng.random_range(0..=2),
            rng.random_range(2..=5),
            acts[rng.random_range(0..2)],
            4,
        )
        .with_seed(rng.random());
        let train = TrainConfig {
            learning_rate: rng.random_range(0.05..0.5),
            epochs: 1,
            batch_size: rng.random_range(2..=6),
            seed: 0,
            shuffle: false,
        };
        (SplitNnTopology { clients, merge: MergeOp::Concat, server, train }, inputs)
    }

    /// Monolithic network whose bottom layers hold the client weights on the
    /// diagonal and zeros elsewhere; returns it with the block masks.
    fn block_diagonal(model: &SplitNnModel) -> (MlpModel, Vec<Array2<f64>>) {
        let depth = model.clients[0].n_layers();
        let mut layers = Vec::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut masks = Vec::new();
        for l in 0..depth {
            let rows: usize = model.clients.iter().map(|c| c.weights[l].nrows()).sum();
            let cols: usize = model.clients.iter().map(|c| c.weights[l].ncols()).sum();
            let mut w = Array2::zeros((rows, cols));
            let mut mask = Array2::zeros((rows, cols));
            let (mut r0, mut c0) = (0, 0);
            for c in &model.clients {
                let (r, k) = c.weights[l].dim();
                w.slice_mut(s![r0..r0 + r, c0..c0 + k]).assign(&c.weights[l]);
                mask.slice_mut(s![r0..r0 + r, c0..c0 + k]).fill(1.0);
                r0 += r;
                c0 += k;
            }
            let b: Array1<f64> = model.clients.iter().flat_map(|c| c.biases[l].iter().copied()).collect();
            layers.push(LayerSpec { width: cols, activation: model.clients[0].spec.layers[l].activation });
            weights.push(w);
            biases.push(b);
            masks.push(mask);
        }
        for (l, (w, b)) in model.server.weights.iter().zip(&model.server.biases).enumerate() {
            layers.push(model.server.spec.layers[l]);
            masks.push(Array2::ones(w.raw_dim()));
            weights.push(w.clone());
            biases.push(b.clone());
        }
        let input_width = model.clients.iter().map(MlpModel::input_width).sum();
        let spec = MlpSpec { input_width, layers, init: crate::nn::Init::GlorotUniform, seed: 0 };
        (MlpModel { spec, weights, biases }, masks)
    }

    fn extract_blocks(mono: &MlpModel, like: &SplitNnModel) -> SplitNnModel {
        let mut out = like.clone();
        let depth = like.clients[0].n_layers();
        for l in 0..depth {
            let (mut r0, mut c0) = (0, 0);
            for c in out.clients.iter_mut() {
                let (r, k) = c.weights[l].dim();
                c.weights[l] = mono.weights[l].slice(s![r0..r0 + r, c0..c0 + k]).to_owned();
                c.biases[l] = mono.biases[l].slice(s![c0..c0 + k]).to_owned();
                r0 += r;
                c0 += k;
            }
        }
        for l in 0..out.server.n_layers() {
            out.server.weights[l] = mono.weights[depth + l].clone();
            out.server.biases[l] = mono.biases[depth + l].clone();
        }
        out
    }

    fn model_diff(a: &SplitNnModel, b: &SplitNnModel) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, y) in a.clients.iter().chain([&a.server]).zip(b.clients.iter().chain([&b.server])) {
            for (wa, wb) in x.weights.iter().zip(&y.weights) {
                worst = worst.max(max_diff(wa, wb));
            }
            for (ba, bb) in x.biases.iter().zip(&y.biases) {
                worst = worst.max(ba.iter().zip(bb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
            }
        }
        worst
    }

    /// One SGD step on every prefix of up to five batches: the split protocol
    /// and the masked block-diagonal network agree on outputs, loss and every
    /// parameter after each step.
    #[test]
    fn concat_split_equals_block_diagonal_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let (topo, inputs) = random_topology(&mut rng);
            let bs = topo.train.batch_size;
            let n = 5 * bs;
            let (slices, labels) = toy(n, &inputs, rng.random());
            let full_x = ndarray::concatenate(Axis(1), &views(&slices)).unwrap();
            let init = SplitNnModel::init(&topo).unwrap();
            let (mut mono, masks) = block_diagonal(&init);
            for step in 1..=5 {
                let rows = step * bs;
                let prefix: Vec<Array2<f64>> = slices.iter().map(|x| x.slice(s![..rows, ..]).to_owned()).collect();
                let mut topo_s = topo.clone();
                topo_s.train.epochs = 1;
                let split = train_splitnn(&views(&prefix), &labels[..rows], &topo_s, ExecMode::Lockstep).unwrap();

                let xb = full_x.slice(s![rows - bs..rows, ..]);
                let acts = mono.forward(xb).unwrap();
                let before = extract_blocks(&mono, &init);
                let split_out = before
                    .outputs(&views(
                        &prefix.iter().map(|x| x.slice(s![rows - bs.., ..]).to_owned()).collect::<Vec<_>>(),
                    ))
                    .unwrap();
                assert!(max_diff(acts.output(), &split_out) <= 1e-9);
                let (_, upstream) = softmax_cross_entropy(acts.output().view(), &labels[rows - bs..rows]);
                let (mut grads, _): (Gradients, _) = mono.backward(&acts, upstream.view()).unwrap();
                for (g, m) in grads.weights.iter_mut().zip(&masks) {
                    *g *= m;
                }
                mono.sgd_step(&grads, topo.train.learning_rate);
                let diff = model_diff(&extract_blocks(&mono, &init), &split.model);
                assert!(diff <= 1e-9, "step {step}: {diff}");
                for (w, m) in mono.weights.iter().zip(&masks) {
                    assert!(w.iter().zip(m).all(|(&v, &k)| k == 1.0 || v == 0.0));
                }
            }
        }
    }

    /// Perturbing any client parameter changes the server loss as the split
    /// backward pass predicts.
    #[test]
    fn split_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let eps = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let (mut topo, inputs) = random_topology(&mut rng);
            let ops = [MergeOp::Concat, MergeOp::Average, MergeOp::Product, MergeOp::Sum];
            let op = ops[rng.random_range(0..ops.len())];
            if op != MergeOp::Concat {
                let w = topo.clients[0].output_width();
                for c in topo.clients.iter_mut() {
                    c.layers.last_mut().unwrap().width = w;
                }
                topo.server.input_width = w;
                topo.merge = op;
            }
            let mut model = SplitNnModel::init(&topo).unwrap();
            for c in model.clients.iter_mut() {
                for b in c.biases.iter_mut() {
                    b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                }
            }
            let (slices, labels) = toy(4, &inputs, rng.random());
            let v = views(&slices);
            let kink_free = model.clients.iter().zip(&v).all(|(m, x)| {
                let a = m.forward(*x).unwrap();
                a.pre
                    .iter()
                    .zip(&m.spec.layers)
                    .all(|(z, l)| l.activation != Activation::Relu || z.iter().all(|q| q.abs() > 1e-3))
            }) && {
                let cuts: Vec<_> = model.clients.iter().zip(&v).map(|(m, x)| m.outputs(*x).unwrap()).collect();
                let top = model.server.forward(merge(&cuts, model.merge).unwrap().view()).unwrap();
                top.pre
                    .iter()
                    .zip(&model.server.spec.layers)
                    .all(|(z, l)| l.activation != Activation::Relu || z.iter().all(|q| q.abs() > 1e-3))
            };
            if !kink_free {
                continue;
            }
            let (_, client_grads, _) = model.loss_and_gradients(&v, &labels).unwrap();
            let loss = |m: &SplitNnModel| softmax_cross_entropy(m.outputs(&v).unwrap().view(), &labels).0;
            let mut worst: f64 = 0.0;
            for c in 0..model.clients.len() {
                for l in 0..model.clients[c].n_layers() {
                    let cols = model.clients[c].weights[l].ncols();
                    for idx in 0..model.clients[c].weights[l].len() {
                        let (i, j) = (idx / cols, idx % cols);
                        let orig = model.clients[c].weights[l][[i, j]];
                        model.clients[c].weights[l][[i, j]] = orig + eps;
                        let up = loss(&model);
                        model.clients[c].weights[l][[i, j]] = orig - eps;
                        let down = loss(&model);
                        model.clients[c].weights[l][[i, j]] = orig;
                        let fd = (up - down) / (2.0 * eps);
                        let an = client_grads[c].weights[l][[i, j]];
                        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                    }
                }
            }
            assert!(worst <= 1e-4, "{op:?}: {worst}");
            checked += 1;
        }
    }
}
