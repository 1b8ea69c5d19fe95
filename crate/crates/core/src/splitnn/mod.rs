//! Split neural networks: each client runs a bottom network on its own
//! features, the server merges the cut activations and runs the top network
//! against the labels it alone holds.

mod protocol;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::FailureClass;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Activation, Init, LayerSpec, MlpModel, MlpSpec, TrainConfig};

pub use protocol::{train_splitnn, SplitNnOutcome};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeOp {
    #[default]
    Concat,
    Max,
    Min,
    Average,
    Product,
    Sum,
}

impl MergeOp {
    pub fn is_elementwise(self) -> bool {
        self != MergeOp::Concat
    }
}

/// Combines per-client cuts (`batch × width_c`) in client order.
pub fn merge(cuts: &[Array2<f64>], op: MergeOp) -> Result<Array2<f64>> {
    let first = cuts.first().ok_or_else(|| Error::Shape("merge of zero cuts".into()))?;
    if cuts.iter().any(|c| c.nrows() != first.nrows()) {
        return Err(Error::Shape("cuts disagree on batch size".into()));
    }
    if op == MergeOp::Concat {
        let views: Vec<ArrayView2<f64>> = cuts.iter().map(|c| c.view()).collect();
        return Ok(concatenate(Axis(1), &views).expect("row counts checked"));
    }
    if cuts.iter().any(|c| c.dim() != first.dim()) {
        return Err(Error::Shape(format!("{op:?} merge needs equal cut widths")));
    }
    let mut out = first.clone();
    for c in &cuts[1..] {
        ndarray::Zip::from(&mut out).and(c).for_each(|o, &v| {
            *o = match op {
                MergeOp::Max => o.max(v),
                MergeOp::Min => o.min(v),
                MergeOp::Average | MergeOp::Sum => *o + v,
                MergeOp::Product => *o * v,
                MergeOp::Concat => unreachable!(),
            }
        });
    }
    if op == MergeOp::Average {
        out /= cuts.len() as f64;
    }
    Ok(out)
}

/// Splits the gradient of the merged tensor into per-client cut gradients.
/// Max and min route each entry to the first client attaining the extremum.
pub fn merge_backward(upstream: ArrayView2<f64>, op: MergeOp, cuts: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let merged_width = match op {
        MergeOp::Concat => cuts.iter().map(|c| c.ncols()).sum(),
        _ => cuts.first().map_or(0, |c| c.ncols()),
    };
    let rows = cuts.first().map_or(0, |c| c.nrows());
    if cuts.is_empty() || upstream.dim() != (rows, merged_width) {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match merged cut ({rows}, {merged_width})",
            upstream.dim()
        )));
    }
    if op.is_elementwise() && cuts.iter().any(|c| c.dim() != cuts[0].dim()) {
        return Err(Error::Shape(format!("{op:?} merge needs equal cut widths")));
    }
    let k = cuts.len();
    let out = match op {
        MergeOp::Concat => {
            let mut start = 0;
            cuts.iter()
                .map(|c| {
                    let slice = upstream.slice(s![.., start..start + c.ncols()]).to_owned();
                    start += c.ncols();
                    slice
                })
                .collect()
        }
        MergeOp::Sum => vec![upstream.to_owned(); k],
        MergeOp::Average => vec![upstream.mapv(|v| v / k as f64); k],
        MergeOp::Max | MergeOp::Min => {
            let mut grads = vec![Array2::zeros(upstream.raw_dim()); k];
            for ((i, j), &u) in upstream.indexed_iter() {
                let mut best = 0;
                for c in 1..k {
                    let better = if op == MergeOp::Max {
                        cuts[c][[i, j]] > cuts[best][[i, j]]
                    } else {
                        cuts[c][[i, j]] < cuts[best][[i, j]]
                    };
                    if better {
                        best = c;
                    }
                }
                grads[best][[i, j]] = u;
            }
            grads
        }
        MergeOp::Product => (0..k)
            .map(|c| {
                let mut g = upstream.to_owned();
                for (o, other) in cuts.iter().enumerate() {
                    if o != c {
                        g *= other;
                    }
                }
                g
            })
            .collect(),
    };
    Ok(out)
}

/// Bottom networks per client, merge, and top network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitNnTopology {
    pub clients: Vec<MlpSpec>,
    pub merge: MergeOp,
    pub server: MlpSpec,
    pub train: TrainConfig,
}

/// Shape of the per-client bottom networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottomShape {
    pub hidden: usize,
    pub width: usize,
    pub activation: Activation,
    pub output: usize,
}

impl Default for BottomShape {
    fn default() -> Self {
        Self { hidden: 1, width: 32, activation: Activation::Tanh, output: 16 }
    }
}

/// Shape of the server's top network; its output layer has one margin per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopShape {
    pub hidden: usize,
    pub width: usize,
    pub activation: Activation,
}

impl Default for TopShape {
    fn default() -> Self {
        Self { hidden: 1, width: 64, activation: Activation::Tanh }
    }
}

impl SplitNnTopology {
    /// Identical bottom shapes on clients with the given feature counts. All
    /// bottom layers share the bottom activation, including the cut layer.
    pub fn symmetric(
        client_inputs: &[usize],
        bottom: BottomShape,
        top: TopShape,
        merge: MergeOp,
        train: TrainConfig,
        seed: u64,
    ) -> Self {
        let init = if bottom.activation == Activation::Relu { Init::HeNormal } else { Init::GlorotUniform };
        let clients: Vec<MlpSpec> = client_inputs
            .iter()
            .enumerate()
            .map(|(c, &input_width)| {
                let mut layers = vec![LayerSpec { width: bottom.width, activation: bottom.activation }; bottom.hidden];
                layers.push(LayerSpec { width: bottom.output, activation: bottom.activation });
                MlpSpec { input_width, layers, init, seed: derive_seed(seed, c as u64) }
            })
            .collect();
        let merged = if merge == MergeOp::Concat { bottom.output * client_inputs.len() } else { bottom.output };
        let server = MlpSpec::classifier(merged, top.hidden, top.width, top.activation, FailureClass::COUNT)
            .with_seed(derive_seed(seed, client_inputs.len() as u64));
        Self { clients, merge, server, train }
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn merged_width(&self) -> usize {
        match self.merge {
            MergeOp::Concat => self.clients.iter().map(MlpSpec::output_width).sum(),
            _ => self.clients.first().map_or(0, MlpSpec::output_width),
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("split network needs at least one client".into()));
        }
        for spec in self.clients.iter().chain([&self.server]) {
            spec.validate()?;
        }
        self.train.validate()?;
        if self.merge.is_elementwise() {
            let w = self.clients[0].output_width();
            if self.clients.iter().any(|c| c.output_width() != w) {
                return Err(Error::Config(format!("{:?} merge needs equal client output widths", self.merge)));
            }
        }
        if self.server.input_width != self.merged_width() {
            return Err(Error::Config(format!(
                "top network expects {} inputs, merged cut has {}",
                self.server.input_width,
                self.merged_width()
            )));
        }
        if self.server.output_width() != n_classes {
            return Err(Error::Config(format!(
                "top network has {} outputs for {n_classes} classes",
                self.server.output_width()
            )));
        }
        Ok(())
    }
}

/// Trained bottom and top networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitNnModel {
    pub clients: Vec<MlpModel>,
    pub server: MlpModel,
    pub merge: MergeOp,
}

impl SplitNnModel {
    pub fn init(topo: &SplitNnTopology) -> Result<Self> {
        topo.validate(topo.server.output_width())?;
        Ok(Self {
            clients: topo.clients.iter().map(MlpModel::init).collect::<Result<_>>()?,
            server: MlpModel::init(&topo.server)?,
            merge: topo.merge,
        })
    }

    /// Top-network margins for aligned client feature slices.
    pub fn outputs(&self, slices: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
        if slices.len() != self.clients.len() {
            return Err(Error::Shape(format!("{} slices for {} clients", slices.len(), self.clients.len())));
        }
        let cuts = self.clients.iter().zip(slices).map(|(m, x)| m.outputs(*x)).collect::<Result<Vec<_>>>()?;
        self.server.outputs(merge(&cuts, self.merge)?.view())
    }

    /// Mean cross-entropy and every parameter gradient for one batch,
    /// computed without the bus.
    pub fn loss_and_gradients(
        &self,
        slices: &[ArrayView2<f64>],
        labels: &[usize],
    ) -> Result<(f64, Vec<crate::nn::Gradients>, crate::nn::Gradients)> {
        let acts = self.clients.iter().zip(slices).map(|(m, x)| m.forward(*x)).collect::<Result<Vec<_>>>()?;
        let cuts: Vec<Array2<f64>> = acts.iter().map(|a| a.output().clone()).collect();
        let top = self.server.forward(merge(&cuts, self.merge)?.view())?;
        let (loss, upstream) = crate::nn::softmax_cross_entropy(top.output().view(), labels);
        let (server_grads, d_merged) = self.server.backward(&top, upstream.view())?;
        let d_cuts = merge_backward(d_merged.view(), self.merge, &cuts)?;
        let client_grads = self
            .clients
            .iter()
            .zip(&acts)
            .zip(&d_cuts)
            .map(|((m, a), d)| m.backward(a, d.view()).map(|(g, _)| g))
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, client_grads, server_grads))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        for c in m.clients.iter().chain([&m.server]) {
            MlpModel::from_json(&c.to_json())?;
        }
        Ok(m)
    }
}

/// Argmax class per row. An empty batch gives an empty vector.
pub fn predict_splitnn(model: &SplitNnModel, slices: &[ArrayView2<f64>]) -> Result<Vec<usize>> {
    Ok(crate::gbdt::argmax_rows(model.outputs(slices)?.view()))
}
