//! Geometry prompts: a two-layer Riemannian GraphSAGE encoder per geometry.
//!
//! Layer one lifts flat features onto the manifold, layer two stays on it.
//! Each layer maps its input to the origin tangent chart, applies a mean
//! aggregator with separate self and neighbor weights, and maps back with
//! the exponential map. Prompts are the tangent-chart coordinates of the
//! second layer's output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Unary, Var};
use crate::checkpoint::Checkpoint;
use crate::data::train_val_split;
use crate::error::{GeoError, Result};
use crate::graph::RelationalGraph;
use crate::manifold::{constraint_residual, Geometry, ManifoldSpec, POINT_TOL};
use crate::optim::{AdamW, Schedule};
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.unary(Unary::Relu, x),
            Activation::Tanh => tape.unary(Unary::Tanh, x),
            Activation::Identity => x,
        }
    }
}

/// Mean of each node's neighbor rows; isolated nodes keep their own row.
pub fn sage_aggregate(x: &Array2<f64>, graph: &RelationalGraph) -> Result<Array2<f64>> {
    if x.nrows() != graph.n() {
        return Err(GeoError::Dimension {
            expected: graph.n(),
            got: x.nrows(),
        });
    }
    let mut out = Array2::zeros(x.dim());
    for (i, list) in graph.neighbors.iter().enumerate() {
        let mut row = out.row_mut(i);
        if list.is_empty() {
            row.assign(&x.row(i));
            continue;
        }
        for &(j, _) in list {
            row += &x.row(j);
        }
        row /= list.len() as f64;
    }
    Ok(out)
}

/// Weights of one layer, `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct SageLayerParams {
    pub w_self: Array2<f64>,
    pub w_neigh: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl SageLayerParams {
    pub fn validate(&self) -> Result<()> {
        let (o, i) = self.w_self.dim();
        if self.w_neigh.dim() != (o, i) {
            return Err(GeoError::Dimension {
                expected: o * i,
                got: self.w_neigh.len(),
            });
        }
        if self.bias.len() != o {
            return Err(GeoError::Dimension {
                expected: o,
                got: self.bias.len(),
            });
        }
        let finite = self
            .w_self
            .iter()
            .chain(&self.w_neigh)
            .chain(&self.bias)
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeoError::Validation("non-finite layer weight".into()));
        }
        Ok(())
    }
}

/// Fraction of the spherical injectivity radius `pi / sqrt(c)` that a layer's
/// tangent output may reach before `exp_o`. Beyond `pi` the map wraps past
/// the antipode, where `log_o` is discontinuous, and training diverges.
pub const SPHERE_TANGENT_LIMIT: f64 = 0.99;

/// Tape form of one layer: ambient rows on `spec_in` to ambient rows on `spec_out`.
fn layer_on_tape(
    tape: &mut Tape,
    (w_self, w_neigh, bias): (Var, Var, Var),
    activation: Activation,
    x: Var,
    adj: &Arc<Vec<Vec<usize>>>,
    spec_in: ManifoldSpec,
    spec_out: ManifoldSpec,
) -> Var {
    let u = tape.log0(spec_in, x);
    let agg = tape.neighbor_mean(u, adj.clone());
    let a = tape.matmul_t(u, w_self);
    let b = tape.matmul_t(agg, w_neigh);
    let s = tape.add(a, b);
    let pre = tape.add(s, bias);
    let h = activation.apply(tape, pre);
    let h = match spec_out.kind() {
        Geometry::Spherical => {
            let radius = tape.scalar(SPHERE_TANGENT_LIMIT * std::f64::consts::PI / spec_out.sqrt_abs_c());
            tape.clamp_norm(h, radius)
        }
        _ => h,
    };
    tape.exp0(spec_out, h)
}

fn check_rows_on(spec: ManifoldSpec, x: &Array2<f64>) -> Result<()> {
    if spec.kind() == Geometry::Euclidean {
        return Ok(());
    }
    for row in x.rows() {
        let r = constraint_residual(&spec, row.as_slice().expect("standard layout rows"));
        if !(r <= POINT_TOL) {
            return Err(GeoError::OffManifold { residual: r });
        }
    }
    Ok(())
}

/// One Riemannian GraphSAGE layer applied to ambient rows of `x`.
pub fn riemannian_sage_layer(
    params: &SageLayerParams,
    x: &Array2<f64>,
    graph: &RelationalGraph,
    spec_in: ManifoldSpec,
    spec_out: ManifoldSpec,
) -> Result<Array2<f64>> {
    params.validate()?;
    let x = x.as_standard_layout().to_owned();
    check_rows_on(spec_in, &x)?;
    let width = spec_in.ambient_dim(params.w_self.ncols());
    if x.ncols() != width {
        return Err(GeoError::Dimension {
            expected: width,
            got: x.ncols(),
        });
    }
    if x.nrows() != graph.n() {
        return Err(GeoError::Dimension {
            expected: graph.n(),
            got: x.nrows(),
        });
    }
    let mut tape = Tape::new();
    let ws = tape.constant(params.w_self.clone());
    let wn = tape.constant(params.w_neigh.clone());
    let b = tape.constant(params.bias.clone().insert_axis(Axis(0)));
    let xv = tape.constant(x);
    let out = layer_on_tape(
        &mut tape,
        (ws, wn, b),
        params.activation,
        xv,
        &graph.adjacency(),
        spec_in,
        spec_out,
    );
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            input: 1024,
            hidden: 512,
            output: 256,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    w_self: ParamId,
    w_neigh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncoderIds {
    layers: [LayerIds; 2],
    head_w: ParamId,
    head_b: ParamId,
}

impl EncoderIds {
    fn resolve(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| GeoError::Validation(format!("encoder tensor `{name}` missing")))
        };
        let layer = |l: usize| -> Result<LayerIds> {
            Ok(LayerIds {
                w_self: get(&format!("layer{l}.w_self"))?,
                w_neigh: get(&format!("layer{l}.w_neigh"))?,
                bias: get(&format!("layer{l}.bias"))?,
            })
        };
        Ok(Self {
            layers: [layer(1)?, layer(2)?],
            head_w: get("readout.w")?,
            head_b: get("readout.b")?,
        })
    }
}

/// Encoder for one geometry plus its linear regression read-out.
#[derive(Debug, Clone)]
pub struct GeometryEncoder {
    pub spec: ManifoldSpec,
    pub dims: EncoderDims,
    pub activation: Activation,
    pub store: ParamStore,
    ids: EncoderIds,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderMeta {
    spec: ManifoldSpec,
    dims: EncoderDims,
    activation: Activation,
}

impl GeometryEncoder {
    pub fn new(spec: ManifoldSpec, dims: EncoderDims, activation: Activation, seed: u64) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.output == 0 {
            return Err(GeoError::Config(format!("encoder dims must be positive: {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (l, (i, o)) in [(dims.input, dims.hidden), (dims.hidden, dims.output)]
            .into_iter()
            .enumerate()
        {
            store.add(format!("layer{}.w_self", l + 1), glorot_uniform(&mut rng, o, i));
            store.add(format!("layer{}.w_neigh", l + 1), glorot_uniform(&mut rng, o, i));
            store.add(format!("layer{}.bias", l + 1), Array2::zeros((1, o)));
        }
        store.add("readout.w", Array2::zeros((1, dims.output)));
        store.add("readout.b", Array2::zeros((1, 1)));
        let ids = EncoderIds::resolve(&store)?;
        Ok(Self {
            spec,
            dims,
            activation,
            store,
            ids,
        })
    }

    /// Copies out the weights of layer 1 or 2.
    pub fn layer(&self, which: usize) -> SageLayerParams {
        let l = self.ids.layers[which - 1];
        SageLayerParams {
            w_self: self.store.get(l.w_self).clone(),
            w_neigh: self.store.get(l.w_neigh).clone(),
            bias: self.store.get(l.bias).row(0).to_owned(),
            activation: self.activation,
        }
    }

    pub fn set_layer(&mut self, which: usize, p: &SageLayerParams) -> Result<()> {
        p.validate()?;
        let l = self.ids.layers[which - 1];
        if p.w_self.dim() != self.store.get(l.w_self).dim() {
            return Err(GeoError::Dimension {
                expected: self.store.get(l.w_self).len(),
                got: p.w_self.len(),
            });
        }
        self.store.get_mut(l.w_self).assign(&p.w_self);
        self.store.get_mut(l.w_neigh).assign(&p.w_neigh);
        self.store.get_mut(l.bias).row_mut(0).assign(&p.bias);
        self.activation = p.activation;
        Ok(())
    }

    fn check_inputs(&self, x: &Array2<f64>, graph: &RelationalGraph) -> Result<()> {
        if graph.spec != self.spec {
            return Err(GeoError::InvalidSpec(format!(
                "encoder is {} but graph is {}",
                self.spec, graph.spec
            )));
        }
        if x.ncols() != self.dims.input {
            return Err(GeoError::Dimension {
                expected: self.dims.input,
                got: x.ncols(),
            });
        }
        if x.nrows() != graph.n() {
            return Err(GeoError::Dimension {
                expected: graph.n(),
                got: x.nrows(),
            });
        }
        Ok(())
    }

    /// Tangent-chart prompt rows on the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, adj: &Arc<Vec<Vec<usize>>>) -> Var {
        let e = ManifoldSpec::euclidean();
        let ids = |l: LayerIds| (bound[l.w_self], bound[l.w_neigh], bound[l.bias]);
        let z = layer_on_tape(tape, ids(self.ids.layers[0]), self.activation, x, adj, e, self.spec);
        let p = layer_on_tape(
            tape,
            ids(self.ids.layers[1]),
            self.activation,
            z,
            adj,
            self.spec,
            self.spec,
        );
        tape.log0(self.spec, p)
    }

    /// Linear read-out of prompt rows, `n x 1`.
    pub fn readout(&self, tape: &mut Tape, bound: &Bound, prompt: Var) -> Var {
        let y = tape.matmul_t(prompt, bound[self.ids.head_w]);
        tape.add(y, bound[self.ids.head_b])
    }

    /// Geometry prompt `n x output` for the whole graph.
    pub fn encode(&self, x: &Array2<f64>, graph: &RelationalGraph) -> Result<Array2<f64>> {
        self.check_inputs(x, graph)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let p = self.forward(&mut tape, &bound, xv, &graph.adjacency());
        let out = tape.value(p).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Validation(format!(
                "{} prompt has non-finite entries",
                self.spec.kind()
            )));
        }
        Ok(out)
    }

    /// Second-layer output rows in ambient coordinates.
    pub fn encode_ambient(&self, x: &Array2<f64>, graph: &RelationalGraph) -> Result<Array2<f64>> {
        self.check_inputs(x, graph)?;
        let z = riemannian_sage_layer(&self.layer(1), x, graph, ManifoldSpec::euclidean(), self.spec)?;
        riemannian_sage_layer(&self.layer(2), &z, graph, self.spec, self.spec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = EncoderMeta {
            spec: self.spec,
            dims: self.dims,
            activation: self.activation,
        };
        Checkpoint::new(
            "encoder",
            serde_json::to_value(meta).expect("encoder metadata serializes"),
            &self.store,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, "encoder")?;
        let meta: EncoderMeta = serde_json::from_value(ck.meta.clone())?;
        let mut enc = Self::new(meta.spec, meta.dims, meta.activation, 0)?;
        enc.store.load_values(&ck.store()?)?;
        Ok(enc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_period: usize,
    pub decay_factor: f64,
    pub val_fraction: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            weight_decay: 1e-5,
            decay_period: 100,
            decay_factor: 0.5,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
}

/// Per-epoch training and validation mean-squared error.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace(pub Vec<EpochLoss>);

impl LossTrace {
    pub fn last(&self) -> Option<EpochLoss> {
        self.0.last().copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "epoch,loss,val_loss")?;
        for e in &self.0 {
            writeln!(w, "{},{},{}", e.epoch, e.loss, e.val_loss)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn gather(values: &[f64], idx: &[usize]) -> Arc<Vec<f64>> {
    Arc::new(idx.iter().map(|&i| values[i]).collect())
}

fn mean_of(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

fn optimizer(cfg: &Stage1Config) -> AdamW {
    AdamW::new(
        cfg.lr,
        cfg.weight_decay,
        Schedule::StepDecay {
            period: cfg.decay_period,
            factor: cfg.decay_factor,
        },
    )
}

fn check_targets(n: usize, targets: &[f64]) -> Result<()> {
    if targets.len() != n {
        return Err(GeoError::Dimension {
            expected: n,
            got: targets.len(),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(GeoError::Validation("non-finite regression target".into()));
    }
    Ok(())
}

/// Full-graph Stage I training: one optimizer step per epoch on the
/// training nodes, validation loss on held-out nodes from the same pass.
pub fn stage1_train(
    enc: &mut GeometryEncoder,
    graph: &RelationalGraph,
    x: &Array2<f64>,
    targets: &[f64],
    cfg: &Stage1Config,
    split_seed: u64,
) -> Result<LossTrace> {
    enc.check_inputs(x, graph)?;
    check_targets(x.nrows(), targets)?;
    let (train, val) = train_val_split(x.nrows(), cfg.val_fraction, split_seed)?;
    let adj = graph.adjacency();
    let (train_idx, val_idx) = (Arc::new(train.clone()), Arc::new(val.clone()));
    let (y_train, y_val) = (gather(targets, &train), gather(targets, &val));
    enc.store.get_mut(enc.ids.head_b)[[0, 0]] = mean_of(targets, &train);
    let mut opt = optimizer(cfg);
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let bound = enc.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let prompt = enc.forward(&mut tape, &bound, xv, &adj);
        let pred = enc.readout(&mut tape, &bound, prompt);
        let pt = tape.gather_rows(pred, train_idx.clone());
        let loss = tape.mse(pt, y_train.clone());
        let pv = tape.gather_rows(pred, val_idx.clone());
        let val_loss = tape.mse(pv, y_val.clone());
        let (l, vl) = (tape.scalar_value(loss), tape.scalar_value(val_loss));
        if !l.is_finite() {
            return Err(GeoError::Divergence { step: epoch, loss: l });
        }
        trace.0.push(EpochLoss {
            epoch,
            loss: l,
            val_loss: vl,
        });
        let mut grads = tape.backward(loss);
        opt.step(&mut enc.store, &bound, &mut grads);
    }
    Ok(trace)
}

/// Graph-free reference: a linear map on raw features trained with the same
/// optimizer, split and epoch budget. Returns its loss trace.
pub fn linear_baseline(
    x: &Array2<f64>,
    targets: &[f64],
    cfg: &Stage1Config,
    split_seed: u64,
    init_seed: u64,
) -> Result<LossTrace> {
    check_targets(x.nrows(), targets)?;
    let (train, val) = train_val_split(x.nrows(), cfg.val_fraction, split_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut store = ParamStore::new();
    let w = store.add("w", glorot_uniform(&mut rng, 1, x.ncols()));
    let b = store.add("b", Array2::from_elem((1, 1), mean_of(targets, &train)));
    let xt = x.select(Axis(0), &train);
    let xv = x.select(Axis(0), &val);
    let (y_train, y_val) = (gather(targets, &train), gather(targets, &val));
    let mut opt = optimizer(cfg);
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fwd = |tape: &mut Tape, data: &Array2<f64>| {
            let d = tape.constant(data.clone());
            let y = tape.matmul_t(d, bound[w]);
            tape.add(y, bound[b])
        };
        let pt = fwd(&mut tape, &xt);
        let loss = tape.mse(pt, y_train.clone());
        let pv = fwd(&mut tape, &xv);
        let val_loss = tape.mse(pv, y_val.clone());
        let l = tape.scalar_value(loss);
        if !l.is_finite() {
            return Err(GeoError::Divergence { step: epoch, loss: l });
        }
        trace.0.push(EpochLoss {
            epoch,
            loss: l,
            val_loss: tape.scalar_value(val_loss),
        });
        let mut grads = tape.backward(loss);
        opt.step(&mut store, &bound, &mut grads);
    }
    Ok(trace)
}
