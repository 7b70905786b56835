//! Geometry adapter: three expert feed-forward layers mixed by a softmax gate.
//!
//! * Euclidean expert: `W2 gelu(W1 x + b1) + b2`.
//! * Spherical expert: the same map, normalized and scaled to length `kappa`.
//! * Hyperbolic expert: a Poincare-ball layer. The input is rescaled into
//!   the ball, pushed through `W1` with a Mobius matrix-vector product,
//!   Mobius-translated by `exp0(b1)`, read back with `log0`, activated,
//!   mapped by `W2, b2` and sent into the ball with `exp0`.
//!
//! The mixture is dense: `y = sum_i g_i(x) F_i(x)` with
//! `g = softmax(W_g x / tau)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, softplus_inv, Tape, Unary, Var};
use crate::error::{GeoError, Result};
use crate::manifold::Geometry;
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};

/// Fraction of the ball radius that clamped inputs and outputs may reach.
pub const BALL_MARGIN: f64 = 1.0 - 1e-5;
/// Inner norms below this make the spherical direction undefined.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Gate weights below this count an expert as inactive in statistics.
pub const INACTIVE_WEIGHT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertActivation {
    Gelu,
    Identity,
}

/// Plain-value expert parameters: `w1` is `hidden x model`, `w2` is
/// `model x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub kind: Geometry,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Output radius of the spherical expert.
    pub kappa: f64,
    /// Ball curvature of the hyperbolic expert.
    pub c: f64,
    /// Output gain of a Euclidean expert; 1 is the plain FFN.
    pub gain: f64,
    pub activation: ExpertActivation,
}

impl ExpertParams {
    pub fn zeros(kind: Geometry, model: usize, hidden: usize) -> Self {
        Self {
            kind,
            w1: Array2::zeros((hidden, model)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((model, hidden)),
            b2: Array1::zeros(model),
            kappa: 1.0,
            c: -1.0,
            gain: 1.0,
            activation: ExpertActivation::Gelu,
        }
    }

    pub fn random(kind: Geometry, model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: glorot_uniform(rng, hidden, model),
            w2: glorot_uniform(rng, model, hidden),
            b1: Array1::from_shape_fn(hidden, |_| rng.random_range(-0.1..0.1)),
            b2: Array1::from_shape_fn(model, |_| rng.random_range(-0.1..0.1)),
            ..Self::zeros(kind, model, hidden)
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, m) = self.w1.dim();
        if self.w2.dim() != (m, h) || self.b1.len() != h || self.b2.len() != m {
            return Err(GeoError::Validation(format!(
                "{} expert shapes disagree: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                self.kind,
                self.w1.dim(),
                self.b1.len(),
                self.w2.dim(),
                self.b2.len()
            )));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(GeoError::Validation(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.c < 0.0 && self.c.is_finite()) {
            return Err(GeoError::Validation(format!("c must be negative, got {}", self.c)));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(GeoError::Validation(format!(
                "gain must be positive, got {}",
                self.gain
            )));
        }
        Ok(())
    }
}

/// Tape handles for one expert. `scale` is `kappa` for the spherical
/// expert, `|c|` for the hyperbolic one and the output gain for a Euclidean
/// one, always `1 x 1`.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub scale: Option<Var>,
}

fn activate(tape: &mut Tape, act: ExpertActivation, x: Var) -> Var {
    match act {
        ExpertActivation::Gelu => tape.unary(Unary::Gelu, x),
        ExpertActivation::Identity => x,
    }
}

fn ffn(tape: &mut Tape, v: &ExpertVars, act: ExpertActivation, x: Var) -> Var {
    let h = tape.matmul_t(x, v.w1);
    let h = tape.add(h, v.b1);
    let h = activate(tape, act, h);
    let y = tape.matmul_t(h, v.w2);
    tape.add(y, v.b2)
}

/// `tanh(sqrt(K) |v|) / (sqrt(K) |v|) * v` row-wise.
fn ball_exp0(tape: &mut Tape, v: Var, k: Var) -> Var {
    let sq = tape.row_sum_sq(v);
    let q = tape.mul(sq, k);
    let f = tape.unary(Unary::TanhcSq, q);
    tape.mul(v, f)
}

/// `atanh(sqrt(K) |y|) / (sqrt(K) |y|) * y` row-wise.
fn ball_log0(tape: &mut Tape, y: Var, k: Var) -> Var {
    let sq = tape.row_sum_sq(y);
    let q = tape.mul(sq, k);
    let f = tape.unary(Unary::AtanhcSq, q);
    tape.mul(y, f)
}

/// Mobius addition of each row of `u` with the single row `b`.
fn ball_add(tape: &mut Tape, u: Var, b: Var, k: Var) -> Var {
    let ub = tape.matmul_t(u, b);
    let uu = tape.row_sum_sq(u);
    let bb = tape.row_sum_sq(b);
    let kub = tape.mul(ub, k);
    let two_kub = tape.scale(kub, 2.0);
    let kbb = tape.mul(bb, k);
    let a = tape.add(two_kub, kbb);
    let a = tape.affine(a, 1.0, 1.0);
    let kuu = tape.mul(uu, k);
    let bc = tape.affine(kuu, -1.0, 1.0);
    let left = tape.mul(u, a);
    let right = tape.matmul(bc, b);
    let num = tape.add(left, right);
    let k2 = tape.mul(k, k);
    let uubb = tape.mul(uu, bb);
    let cross = tape.mul(uubb, k2);
    let den = tape.add(two_kub, cross);
    let den = tape.affine(den, 1.0, 1.0);
    tape.div(num, den)
}

/// Row-wise expert output on the tape. `x` is `n x model`.
pub fn expert_on_tape(tape: &mut Tape, kind: Geometry, v: &ExpertVars, act: ExpertActivation, x: Var) -> Result<Var> {
    match kind {
        Geometry::Euclidean => {
            let y = ffn(tape, v, act, x);
            Ok(match v.scale {
                Some(g) => tape.mul(y, g),
                None => y,
            })
        }
        Geometry::Spherical => {
            let kappa = v.scale.expect("spherical expert needs kappa");
            let inner = ffn(tape, v, act, x);
            let sq = tape.row_sum_sq(inner);
            let norm = tape.unary(Unary::Sqrt, sq);
            let min = tape.value(norm).iter().copied().fold(f64::INFINITY, f64::min);
            if !(min >= MIN_DIRECTION_NORM) {
                return Err(GeoError::DegenerateDirection { norm: min });
            }
            let unit = tape.div(inner, norm);
            Ok(tape.mul(unit, kappa))
        }
        Geometry::Hyperbolic => {
            let k = v.scale.expect("hyperbolic expert needs |c|");
            let sk = tape.unary(Unary::Sqrt, k);
            let margin = tape.scalar(BALL_MARGIN);
            let radius = tape.div(margin, sk);
            let xc = tape.clamp_norm(x, radius);
            let t = ball_log0(tape, xc, k);
            let t = tape.matmul_t(t, v.w1);
            let m = ball_exp0(tape, t, k);
            let b = ball_exp0(tape, v.b1, k);
            let s = ball_add(tape, m, b, k);
            let h = ball_log0(tape, s, k);
            let h = activate(tape, act, h);
            let o = tape.matmul_t(h, v.w2);
            let o = tape.add(o, v.b2);
            let y = ball_exp0(tape, o, k);
            // tanh saturates to exactly 1 for large arguments
            Ok(tape.clamp_norm(y, radius))
        }
    }
}

fn row_var(tape: &mut Tape, v: &Array1<f64>) -> Var {
    tape.constant(v.clone().insert_axis(Axis(0)))
}

fn expert_constants(tape: &mut Tape, p: &ExpertParams) -> ExpertVars {
    let scale = match p.kind {
        Geometry::Euclidean => (p.gain != 1.0).then(|| tape.scalar(p.gain)),
        Geometry::Spherical => Some(tape.scalar(p.kappa)),
        Geometry::Hyperbolic => Some(tape.scalar(-p.c)),
    };
    ExpertVars {
        w1: tape.constant(p.w1.clone()),
        b1: row_var(tape, &p.b1),
        w2: tape.constant(p.w2.clone()),
        b2: row_var(tape, &p.b2),
        scale,
    }
}

/// Evaluates an expert on the rows of `x`.
pub fn expert_forward_batch(p: &ExpertParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    p.validate()?;
    if x.ncols() != p.model_dim() {
        return Err(GeoError::Dimension {
            expected: p.model_dim(),
            got: x.ncols(),
        });
    }
    let mut tape = Tape::new();
    let vars = expert_constants(&mut tape, p);
    let xv = tape.constant(x.clone());
    let y = expert_on_tape(&mut tape, p.kind, &vars, p.activation, xv)?;
    Ok(tape.value(y).clone())
}

fn single(p: &ExpertParams, kind: Geometry, x: &[f64]) -> Result<Vec<f64>> {
    if p.kind != kind {
        return Err(GeoError::InvalidSpec(format!(
            "expected a {kind} expert, got {}",
            p.kind
        )));
    }
    let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row");
    Ok(expert_forward_batch(p, &x)?.row(0).to_vec())
}

pub fn expert_euclidean(p: &ExpertParams, x: &[f64]) -> Result<Vec<f64>> {
    single(p, Geometry::Euclidean, x)
}

pub fn expert_spherical(p: &ExpertParams, x: &[f64]) -> Result<Vec<f64>> {
    single(p, Geometry::Spherical, x)
}

pub fn expert_hyperbolic(p: &ExpertParams, x: &[f64]) -> Result<Vec<f64>> {
    single(p, Geometry::Hyperbolic, x)
}

/// Gate weights `3 x model` and softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    pub w_g: Array2<f64>,
    pub tau: f64,
}

impl GatingParams {
    pub fn zeros(model: usize) -> Self {
        Self {
            w_g: Array2::zeros((3, model)),
            tau: DEFAULT_TEMPERATURE,
        }
    }
}

fn gate_on_tape(tape: &mut Tape, w_g: Var, tau: f64, x: Var) -> Var {
    let logits = tape.matmul_t(x, w_g);
    let scaled = tape.scale(logits, 1.0 / tau);
    tape.softmax_rows(scaled)
}

/// `softmax(W_g x / tau)`.
pub fn gate(g: &GatingParams, x: &[f64]) -> Result<[f64; 3]> {
    if !(g.tau > 0.0) {
        return Err(GeoError::Validation(format!(
            "temperature must be positive, got {}",
            g.tau
        )));
    }
    if g.w_g.dim() != (3, x.len()) {
        return Err(GeoError::Dimension {
            expected: g.w_g.ncols(),
            got: x.len(),
        });
    }
    let mut tape = Tape::new();
    let w = tape.constant(g.w_g.clone());
    let xv = tape.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row"));
    let out = gate_on_tape(&mut tape, w, g.tau, xv);
    let v = tape.value(out);
    Ok([v[[0, 0]], v[[0, 1]], v[[0, 2]]])
}

/// Experts in the fixed order Euclidean, spherical, hyperbolic (for the
/// three-geometry adapter) plus the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBlock {
    pub experts: [ExpertParams; 3],
    pub gate: GatingParams,
}

impl AdapterBlock {
    pub fn validate(&self) -> Result<()> {
        let m = self.experts[0].model_dim();
        for e in &self.experts {
            e.validate()?;
            if e.model_dim() != m {
                return Err(GeoError::Dimension {
                    expected: m,
                    got: e.model_dim(),
                });
            }
        }
        if self.gate.w_g.dim() != (3, m) {
            return Err(GeoError::Dimension {
                expected: 3 * m,
                got: self.gate.w_g.len(),
            });
        }
        Ok(())
    }
}

/// Mixed output for each row of `x` together with the gate weights.
pub fn adapter_forward_batch(block: &AdapterBlock, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    block.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars: Vec<ExpertVars> = block.experts.iter().map(|e| expert_constants(&mut tape, e)).collect();
    let wg = tape.constant(block.gate.w_g.clone());
    let mut outs = Vec::with_capacity(3);
    for (e, v) in block.experts.iter().zip(&vars) {
        let y = expert_on_tape(&mut tape, e.kind, v, e.activation, xv)
            .map_err(|err| err.context(format!("{} expert", e.kind)))?;
        outs.push(y);
    }
    let g = gate_on_tape(&mut tape, wg, block.gate.tau, xv);
    let y = mix(&mut tape, g, &outs);
    Ok((tape.value(y).clone(), tape.value(g).clone()))
}

fn mix(tape: &mut Tape, g: Var, outs: &[Var]) -> Var {
    let mut acc = None;
    for (i, &o) in outs.iter().enumerate() {
        let gi = tape.slice_cols(g, i, i + 1);
        let term = tape.mul(o, gi);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    acc.expect("three experts")
}

/// Single-vector mixture; appends the gate weights to `trace` if given.
pub fn adapter_forward(block: &AdapterBlock, x: &[f64], trace: Option<&mut GateTrace>) -> Result<Vec<f64>> {
    let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row");
    let (y, g) = adapter_forward_batch(block, &xm)?;
    if let Some(t) = trace {
        t.push_next([g[[0, 0]], g[[0, 1]], g[[0, 2]]]);
    }
    Ok(y.row(0).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub task: String,
    pub token_index: usize,
    /// Weights of the Euclidean, spherical and hyperbolic experts.
    pub weights: [f64; 3],
}

/// Gate weights collected during inference, labelled by task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateTrace {
    pub records: Vec<GateRecord>,
    task: String,
    next_index: BTreeMap<String, usize>,
}

impl GateTrace {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            ..Self::default()
        }
    }

    /// Task label for subsequent [`GateTrace::push_next`] calls.
    pub fn set_task(&mut self, task: impl Into<String>) {
        self.task = task.into();
    }

    pub fn push(&mut self, task: &str, token_index: usize, weights: [f64; 3]) {
        self.records.push(GateRecord {
            task: task.to_string(),
            token_index,
            weights,
        });
    }

    /// Appends under the current task with the next running token index.
    pub fn push_next(&mut self, weights: [f64; 3]) {
        let idx = self.next_index.entry(self.task.clone()).or_insert(0);
        let token_index = *idx;
        *idx += 1;
        let task = self.task.clone();
        self.push(&task, token_index, weights);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks the simplex invariant of every record.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let s: f64 = r.weights.iter().sum();
            if (s - 1.0).abs() > 1e-6 || r.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(GeoError::Validation(format!(
                    "gate record {}#{} is off the simplex: {:?}",
                    r.task, r.token_index, r.weights
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "task,token_index,w_e,w_s,w_h")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.task, r.token_index, r.weights[0], r.weights[1], r.weights[2]
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["task", "token_index", "w_e", "w_s", "w_h"] {
            return Err(GeoError::Parse {
                line: 1,
                offset: 0,
                msg: "gate trace header must be `task,token_index,w_e,w_s,w_h`".into(),
            });
        }
        let mut t = GateTrace::default();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let num = |i: usize| -> Result<f64> {
                rec[i].trim().parse().map_err(|_| GeoError::Parse {
                    line,
                    offset: i,
                    msg: format!("`{}` is not a number", &rec[i]),
                })
            };
            let idx = rec[1].trim().parse().map_err(|_| GeoError::Parse {
                line,
                offset: 1,
                msg: format!("`{}` is not a token index", &rec[1]),
            })?;
            t.push(&rec[0], idx, [num(2)?, num(3)?, num(4)?]);
        }
        t.validate()?;
        Ok(t)
    }
}

/// Mean gate weights per task.
pub fn expert_contributions(trace: &GateTrace) -> Result<BTreeMap<String, [f64; 3]>> {
    if trace.is_empty() {
        return Err(GeoError::EmptyInput("gate trace has no records".into()));
    }
    let mut sums: BTreeMap<String, ([f64; 3], usize)> = BTreeMap::new();
    for r in &trace.records {
        let e = sums.entry(r.task.clone()).or_insert(([0.0; 3], 0));
        for i in 0..3 {
            e.0[i] += r.weights[i];
        }
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(task, (s, n))| (task, [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]))
        .collect())
}

/// Fraction of individual expert weights below [`INACTIVE_WEIGHT`].
pub fn inactive_fraction(trace: &GateTrace) -> f64 {
    let total = 3 * trace.len();
    if total == 0 {
        return 0.0;
    }
    let off = trace
        .records
        .iter()
        .flat_map(|r| r.weights)
        .filter(|&w| w < INACTIVE_WEIGHT)
        .count();
    off as f64 / total as f64
}

#[derive(Debug, Clone, Copy)]
struct ExpertSlot {
    kind: Geometry,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    /// Pre-softplus `kappa`, `|c|` or Euclidean gain.
    rho: Option<ParamId>,
}

/// A trainable adapter whose tensors live in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdapterSlots {
    experts: [ExpertSlot; 3],
    gate: ParamId,
    pub tau: f64,
}

impl AdapterSlots {
    /// Registers tensors named `{prefix}.expert{i}_{tag}.*` and `{prefix}.gate`.
    /// Expert 0 starts from `init_first` when given (the base FFN it replaces).
    /// Every expert except a Euclidean one in slot 0 carries one positive
    /// scalar `rho` (starting at 1), so adapters of any expert mix have the
    /// same parameter count.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        kinds: [Geometry; 3],
        model: usize,
        hidden: usize,
        init_first: Option<&ExpertParams>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut experts = Vec::with_capacity(3);
        for (i, &kind) in kinds.iter().enumerate() {
            let mut p = ExpertParams::random(kind, model, hidden, rng);
            if i == 0 {
                if let Some(init) = init_first {
                    p.w1.assign(&init.w1);
                    p.b1.assign(&init.b1);
                    p.w2.assign(&init.w2);
                    p.b2.assign(&init.b2);
                }
            }
            let name = format!("{prefix}.expert{i}_{}", kind.tag().to_lowercase());
            let rho = match kind {
                Geometry::Euclidean if i == 0 => None,
                _ => Some(store.add(format!("{name}.rho"), Array2::from_elem((1, 1), softplus_inv(1.0)))),
            };
            experts.push(ExpertSlot {
                kind,
                w1: store.add(format!("{name}.w1"), p.w1),
                b1: store.add(format!("{name}.b1"), p.b1.insert_axis(Axis(0))),
                w2: store.add(format!("{name}.w2"), p.w2),
                b2: store.add(format!("{name}.b2"), p.b2.insert_axis(Axis(0))),
                rho,
            });
        }
        let gate = store.add(format!("{prefix}.gate"), Array2::zeros((3, model)));
        Self {
            experts: [experts[0], experts[1], experts[2]],
            gate,
            tau: DEFAULT_TEMPERATURE,
        }
    }

    pub fn kinds(&self) -> [Geometry; 3] {
        [self.experts[0].kind, self.experts[1].kind, self.experts[2].kind]
    }

    /// Mixed output and gate weights for the rows of `x`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut outs = Vec::with_capacity(3);
        for e in &self.experts {
            let scale = e.rho.map(|r| tape.unary(Unary::Softplus, bound[r]));
            let vars = ExpertVars {
                w1: bound[e.w1],
                b1: bound[e.b1],
                w2: bound[e.w2],
                b2: bound[e.b2],
                scale,
            };
            let y = expert_on_tape(tape, e.kind, &vars, ExpertActivation::Gelu, x)
                .map_err(|err| err.context(format!("{} expert", e.kind)))?;
            outs.push(y);
        }
        let g = gate_on_tape(tape, bound[self.gate], self.tau, x);
        Ok((mix(tape, g, &outs), g))
    }

    /// Plain-value copy of the adapter.
    pub fn block(&self, store: &ParamStore) -> AdapterBlock {
        let expert = |s: &ExpertSlot| {
            let rho = s.rho.map(|r| softplus(store.get(r)[[0, 0]]));
            ExpertParams {
                kind: s.kind,
                w1: store.get(s.w1).clone(),
                b1: store.get(s.b1).row(0).to_owned(),
                w2: store.get(s.w2).clone(),
                b2: store.get(s.b2).row(0).to_owned(),
                kappa: if s.kind == Geometry::Spherical {
                    rho.unwrap_or(1.0)
                } else {
                    1.0
                },
                c: if s.kind == Geometry::Hyperbolic {
                    -rho.unwrap_or(1.0)
                } else {
                    -1.0
                },
                gain: if s.kind == Geometry::Euclidean {
                    rho.unwrap_or(1.0)
                } else {
                    1.0
                },
                activation: ExpertActivation::Gelu,
            }
        };
        AdapterBlock {
            experts: [
                expert(&self.experts[0]),
                expert(&self.experts[1]),
                expert(&self.experts[2]),
            ],
            gate: GatingParams {
                w_g: store.get(self.gate).clone(),
                tau: self.tau,
            },
        }
    }
}
