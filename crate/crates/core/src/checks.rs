//! Self-check suite: every kernel invariant the pipeline relies on, run
//! against a swappable set of kernels so a perturbed kernel surfaces as a
//! named failure.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{Activation, EncoderDims, GeometryEncoder};
use crate::error::{GeoError, Result};
use crate::gradcheck::grad_check;
use crate::graph::{knn_graph_with, parse_graph, render_graph, KnnStrategy};
use crate::manifold::{
    constraint_residual, exp_map, geodesic_distance, log_map, mobius_add, origin, poincare_exp0, poincare_log0,
    project_to_tangent, Geometry, ManifoldSpec, Point, Tangent,
};
use crate::moe::{adapter_forward_batch, gate, AdapterBlock, AdapterSlots, ExpertParams, GatingParams};
use crate::params::{glorot_uniform, ParamStore};
use crate::trainer::loss::{combined_loss_on_tape, smooth_l1};
use crate::trainer::metrics::{f1_score, r2_score, F1Report};
use crate::trainer::model::{BackboneConfig, GeoModel};

type DistanceFn = fn(&Point, &Point) -> Result<f64>;
type ExpFn = fn(&Point, &Tangent) -> Result<Point>;
type LogFn = fn(&Point, &Point) -> Result<Tangent>;
type GateFn = fn(&GatingParams, &[f64]) -> Result<[f64; 3]>;
type R2Fn = fn(&[f64], &[f64]) -> Result<f64>;
type F1Fn = fn(&[usize], &[usize], usize) -> Result<F1Report>;
type SmoothL1Fn = fn(f64, f64, f64) -> f64;

/// The kernels under test.
#[derive(Clone, Copy)]
pub struct Kernels {
    pub distance: DistanceFn,
    pub exp_map: ExpFn,
    pub log_map: LogFn,
    pub gate: GateFn,
    pub r2: R2Fn,
    pub f1: F1Fn,
    pub smooth_l1: SmoothL1Fn,
}

/// Names accepted by [`Kernels::with_fault`].
pub const FAULTS: [&str; 6] = ["distance", "exp-map", "gate", "r2", "f1", "smooth-l1"];

fn bad_distance(x: &Point, y: &Point) -> Result<f64> {
    Ok(geodesic_distance(x, y)? * (1.0 + 1e-6))
}

fn bad_exp(p: &Point, v: &Tangent) -> Result<Point> {
    let w: Vec<f64> = v.vec().iter().map(|a| a * 1.01).collect();
    exp_map(p, &Tangent::new(p.clone(), w)?)
}

fn bad_gate(g: &GatingParams, x: &[f64]) -> Result<[f64; 3]> {
    let w = gate(g, x)?;
    Ok([w[0] * 0.98, w[1], w[2]])
}

fn bad_r2(p: &[f64], t: &[f64]) -> Result<f64> {
    let n = t.len() as f64;
    Ok(1.0 - (1.0 - r2_score(p, t)?) * n / (n - 1.0))
}

fn bad_f1(p: &[usize], t: &[usize], c: usize) -> Result<F1Report> {
    let mut r = f1_score(p, t, c)?;
    // micro average in place of macro
    r.macro_f1 = p.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;
    Ok(r)
}

fn bad_smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    smooth_l1(pred, target, beta) * 1.5
}

impl Kernels {
    pub fn reference() -> Self {
        Self {
            distance: geodesic_distance,
            exp_map,
            log_map,
            gate,
            r2: r2_score,
            f1: f1_score,
            smooth_l1,
        }
    }

    /// Reference kernels with one deliberately perturbed.
    pub fn with_fault(name: &str) -> Result<Self> {
        let mut k = Self::reference();
        match name {
            "distance" => k.distance = bad_distance,
            "exp-map" => k.exp_map = bad_exp,
            "gate" => k.gate = bad_gate,
            "r2" => k.r2 = bad_r2,
            "f1" => k.f1 = bad_f1,
            "smooth-l1" => k.smooth_l1 = bad_smooth_l1,
            other => {
                return Err(GeoError::Config(format!(
                    "unknown fault `{other}`; expected one of {}",
                    FAULTS.join(", ")
                )))
            }
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub checks: usize,
    pub passed: usize,
    pub failures: Vec<String>,
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `Ok(detail)` on pass, `Err(reason)` on failure.
type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_point(spec: ManifoldSpec, dim: usize, scale: f64, r: &mut ChaCha8Rng) -> Point {
    let o = origin(spec, dim).expect("origin exists");
    let mut v = vec![0.0; o.coords().len()];
    let start = usize::from(spec.kind() != Geometry::Euclidean);
    for a in &mut v[start..] {
        *a = r.random_range(-scale..scale);
    }
    exp_map(&o, &Tangent::new(o.clone(), v).expect("origin tangent")).expect("exp at origin")
}

fn random_tangent(p: &Point, scale: f64, r: &mut ChaCha8Rng) -> Tangent {
    let w: Vec<f64> = (0..p.coords().len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let t = project_to_tangent(p, &w).expect("projection");
    let n = t.norm();
    let len = r.random_range(0.0..scale);
    let v: Vec<f64> = t.vec().iter().map(|a| a / n.max(1e-12) * len).collect();
    Tangent::new(p.clone(), v).expect("scaled tangent")
}

fn to_err(e: GeoError) -> String {
    e.to_string()
}

fn round_trip(k: &Kernels, spec: ManifoldSpec, samples: usize) -> Outcome {
    let mut r = rng(11);
    let max_len = if spec.kind() == Geometry::Spherical { 2.5 } else { 3.0 };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let p = random_point(spec, 3, 1.0, &mut r);
        let v = random_tangent(&p, max_len, &mut r);
        let x = (k.exp_map)(&p, &v).map_err(to_err)?;
        let back = (k.log_map)(&p, &x).map_err(to_err)?;
        let err = v
            .vec()
            .iter()
            .zip(back.vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    ensure(worst <= 1e-6, || format!("max round-trip error {worst:e} > 1e-6"))?;
    Ok(format!("max error {worst:e} over {samples} samples"))
}

fn closure(k: &Kernels, spec: ManifoldSpec, samples: usize) -> Outcome {
    let mut r = rng(12);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let p = random_point(spec, 3, 1.0, &mut r);
        let v = random_tangent(&p, 3.0, &mut r);
        let x = (k.exp_map)(&p, &v).map_err(to_err)?;
        worst = worst.max(constraint_residual(&spec, x.coords()));
    }
    ensure(worst <= 1e-9, || format!("max constraint residual {worst:e} > 1e-9"))?;
    Ok(format!("max residual {worst:e}"))
}

fn metric_axioms(k: &Kernels, spec: ManifoldSpec, triples: usize) -> Outcome {
    let mut r = rng(13);
    for _ in 0..triples {
        let [a, b, c] = [0, 1, 2].map(|_| random_point(spec, 3, 1.2, &mut r));
        let d = |x: &Point, y: &Point| (k.distance)(x, y).map_err(to_err);
        let (ab, ba, bc, ac, aa) = (d(&a, &b)?, d(&b, &a)?, d(&b, &c)?, d(&a, &c)?, d(&a, &a)?);
        ensure(ab >= 0.0 && aa.abs() <= 1e-7, || {
            format!("positivity or identity violated: d(a,b)={ab}, d(a,a)={aa}")
        })?;
        ensure((ab - ba).abs() <= 1e-9 * (1.0 + ab), || {
            format!("asymmetric: {ab} vs {ba}")
        })?;
        ensure(ac <= ab + bc + 1e-9, || {
            format!("triangle inequality violated: {ac} > {ab} + {bc}")
        })?;
    }
    Ok(format!("{triples} triples"))
}

fn flat_limit(k: &Kernels, kind: Geometry) -> Outcome {
    let c = if kind == Geometry::Hyperbolic { -1e-4 } else { 1e-4 };
    let spec = ManifoldSpec::new(kind, c).map_err(to_err)?;
    let o = origin(spec, 3).map_err(to_err)?;
    let mut r = rng(14);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let u: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let lift = |t: &[f64]| {
            let mut v = vec![0.0];
            v.extend_from_slice(t);
            (k.exp_map)(&o, &Tangent::new(o.clone(), v).map_err(to_err)?).map_err(to_err)
        };
        let d = (k.distance)(&lift(&u)?, &lift(&w)?).map_err(to_err)?;
        let flat = u.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max((d - flat).abs());
    }
    ensure(worst <= 1e-3, || format!("flat-limit deviation {worst:e} > 1e-3"))?;
    Ok(format!("max deviation {worst:e}"))
}

/// Distances on hand-built points against the closed forms.
fn closed_form(k: &Kernels, kind: Geometry) -> Outcome {
    let (spec, x, y, expect) = match kind {
        Geometry::Euclidean => (ManifoldSpec::euclidean(), vec![1.0, 2.0, 2.0], vec![4.0, 6.0, 2.0], 5.0),
        Geometry::Hyperbolic => {
            let spec = ManifoldSpec::hyperbolic(-1.0).map_err(to_err)?;
            let t = 0.75f64;
            // origin and a point at hyperbolic angle t: distance is t
            (spec, vec![1.0, 0.0, 0.0], vec![t.cosh(), t.sinh(), 0.0], t)
        }
        Geometry::Spherical => {
            let spec = ManifoldSpec::spherical(4.0).map_err(to_err)?;
            let (a, b) = (0.3f64, 1.1f64);
            // radius 1/2, angle b - a: distance (b - a) / 2
            (
                spec,
                vec![0.5 * a.cos(), 0.5 * a.sin(), 0.0],
                vec![0.5 * b.cos(), 0.5 * b.sin(), 0.0],
                (b - a) / 2.0,
            )
        }
    };
    let d = (k.distance)(
        &Point::new(spec, x).map_err(to_err)?,
        &Point::new(spec, y).map_err(to_err)?,
    )
    .map_err(to_err)?;
    ensure((d - expect).abs() <= 1e-12, || {
        format!("distance {d} but closed form gives {expect}")
    })?;
    Ok(format!("distance {d}"))
}

fn poincare_round_trip() -> Outcome {
    let mut r = rng(15);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.5)).collect();
        let c = -r.random_range(0.2..2.0);
        let back = poincare_log0(&poincare_exp0(&v, c).map_err(to_err)?, c).map_err(to_err)?;
        worst = v.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst <= 1e-9, || format!("exp0/log0 error {worst:e} > 1e-9"))?;
    Ok(format!("max error {worst:e}"))
}

fn mobius_inverse() -> Outcome {
    let mut r = rng(16);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-0.45..0.45)).collect();
        let neg: Vec<f64> = x.iter().map(|a| -a).collect();
        let z = mobius_add(&x, &neg, -1.0).map_err(to_err)?;
        let n = z.iter().map(|a| a.abs()).fold(0.0, f64::max);
        ensure(n <= 1e-9, || format!("x + (-x) = {z:?}"))?;
        let same = mobius_add(&x, &[0.0; 4], -1.0).map_err(to_err)?;
        ensure(same == x, || "x + 0 != x".to_string())?;
    }
    Ok("1000 points".into())
}

fn knn_equivalence(spec: ManifoldSpec) -> Outcome {
    let mut r = rng(17);
    for trial in 0..5 {
        let n = 50 + 40 * trial;
        let pts: Vec<Point> = (0..n).map(|_| random_point(spec, 3, 1.0, &mut r)).collect();
        let a = knn_graph_with(&pts, spec, 7, KnnStrategy::BruteForce).map_err(to_err)?;
        let b = knn_graph_with(&pts, spec, 7, KnnStrategy::VpTree).map_err(to_err)?;
        ensure(a == b, || {
            format!("vantage-point tree differs from brute force at n={n}")
        })?;
        for (i, row) in a.neighbors.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (geodesic_distance(&pts[i], &pts[j]).unwrap_or(f64::NAN), j))
                .collect();
            all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let want: Vec<usize> = all[..7].iter().map(|p| p.1).collect();
            let got: Vec<usize> = row.iter().map(|p| p.0).collect();
            ensure(want == got, || {
                format!("node {i}: neighbors {got:?}, exhaustive sort gives {want:?}")
            })?;
        }
    }
    Ok("5 point sets".into())
}

fn graph_io() -> Outcome {
    let spec = ManifoldSpec::spherical(1.0).map_err(to_err)?;
    let mut r = rng(18);
    let pts: Vec<Point> = (0..120).map(|_| random_point(spec, 3, 1.0, &mut r)).collect();
    let g = knn_graph_with(&pts, spec, 5, KnnStrategy::Auto).map_err(to_err)?;
    let back = parse_graph(&render_graph(&g)).map_err(to_err)?;
    ensure(back == g, || "graph changed across render/parse".into())?;
    Ok("120 nodes".into())
}

fn random_gate(r: &mut ChaCha8Rng, m: usize) -> GatingParams {
    GatingParams {
        w_g: Array2::from_shape_fn((3, m), |_| r.random_range(-3.0..3.0)),
        tau: r.random_range(0.05..2.0),
    }
}

fn gate_simplex(k: &Kernels) -> Outcome {
    let mut r = rng(19);
    for _ in 0..5000 {
        let g = random_gate(&mut r, 5);
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-4.0..4.0)).collect();
        let w = (k.gate)(&g, &x).map_err(to_err)?;
        let s: f64 = w.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9 && w.iter().all(|&v| v >= 0.0), || {
            format!("weights {w:?} sum to {s}")
        })?;
    }
    Ok("5000 gates".into())
}

fn random_block(r: &mut ChaCha8Rng, m: usize) -> AdapterBlock {
    let kinds = [Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic];
    AdapterBlock {
        experts: kinds.map(|g| ExpertParams::random(g, m, 6, r)),
        gate: random_gate(r, m),
    }
}

fn one_hot_collapse() -> Outcome {
    let mut r = rng(20);
    let m = 4;
    let mut block = random_block(&mut r, m);
    let x = Array2::from_shape_fn((6, m), |_| r.random_range(-1.0..1.0));
    for e in 0..3 {
        // a huge logit on one expert saturates the softmax
        block.gate.w_g = Array2::zeros((3, m));
        block.gate.tau = 1.0;
        let mut biased = x.clone();
        biased.column_mut(0).fill(1.0);
        block.gate.w_g[[e, 0]] = 1e4;
        let (y, g) = adapter_forward_batch(&block, &biased).map_err(to_err)?;
        let single = crate::moe::expert_forward_batch(&block.experts[e], &biased).map_err(to_err)?;
        let err = (&y - &single).iter().map(|v| v.abs()).fold(0.0, f64::max);
        ensure(err <= 1e-9 && g.column(e).iter().all(|&w| w == 1.0), || {
            format!("expert {e}: mixture differs by {err:e}")
        })?;
    }
    Ok("3 experts".into())
}

fn spherical_norm() -> Outcome {
    let mut r = rng(21);
    for _ in 0..200 {
        let mut p = ExpertParams::random(Geometry::Spherical, 5, 7, &mut r);
        p.kappa = r.random_range(0.2..3.0);
        let x = Array2::from_shape_fn((10, 5), |_| r.random_range(-2.0..2.0));
        let y = crate::moe::expert_forward_batch(&p, &x).map_err(to_err)?;
        for row in y.rows() {
            let n = row.dot(&row).sqrt();
            ensure((n - p.kappa).abs() <= 1e-9, || {
                format!("output norm {n} != kappa {}", p.kappa)
            })?;
        }
    }
    Ok("2000 outputs".into())
}

fn hyperbolic_ball() -> Outcome {
    let mut r = rng(22);
    for _ in 0..200 {
        let mut p = ExpertParams::random(Geometry::Hyperbolic, 5, 7, &mut r);
        p.c = -r.random_range(0.2..3.0);
        let x = Array2::from_shape_fn((10, 5), |_| r.random_range(-5.0..5.0));
        let y = crate::moe::expert_forward_batch(&p, &x).map_err(to_err)?;
        for row in y.rows() {
            let n = row.dot(&row).sqrt() * p.c.abs().sqrt();
            ensure(n < 1.0, || format!("scaled output norm {n} is not inside the ball"))?;
        }
    }
    Ok("2000 outputs".into())
}

fn toy_points(spec: ManifoldSpec, n: usize, r: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n).map(|_| random_point(spec, 3, 0.5, r)).collect()
}

fn encoder_gradients(kind: Geometry) -> Outcome {
    let spec = ManifoldSpec::unit(kind);
    let mut r = rng(23);
    let g = knn_graph_with(&toy_points(spec, 10, &mut r), spec, 3, KnnStrategy::BruteForce).map_err(to_err)?;
    let x = Array2::from_shape_fn((10, 4), |_| r.random_range(-1.0..1.0));
    let targets: Arc<Vec<f64>> = Arc::new((0..10).map(|i| (i as f64 * 0.7).sin()).collect());
    let dims = EncoderDims {
        input: 4,
        hidden: 5,
        output: 3,
    };
    let mut enc = GeometryEncoder::new(spec, dims, Activation::Relu, 24).map_err(to_err)?;
    let head = enc.store.find("readout.w").ok_or("no read-out")?;
    enc.store.get_mut(head).assign(&glorot_uniform(&mut r, 1, 3));
    let adj = g.adjacency();
    let rep = grad_check(&enc.store, 1e-5, usize::MAX, |t, b| {
        let xv = t.constant(x.clone());
        let p = enc.forward(t, b, xv, &adj);
        let y = enc.readout(t, b, p);
        t.mse(y, targets.clone())
    });
    ensure(rep.passes(1e-4), || {
        format!("max relative error {:e} at {}", rep.max_rel_err, rep.worst)
    })?;
    Ok(format!(
        "{} entries, max relative error {:e}",
        rep.entries, rep.max_rel_err
    ))
}

fn adapter_gradients() -> Outcome {
    let mut r = rng(25);
    let mut store = ParamStore::new();
    let slots = AdapterSlots::register(
        &mut store,
        "a",
        [Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic],
        4,
        6,
        None,
        &mut r,
    );
    let gate_id = store.find("a.gate").ok_or("no gate tensor")?;
    store.get_mut(gate_id).assign(&glorot_uniform(&mut r, 3, 4));
    let x = Array2::from_shape_fn((5, 4), |_| r.random_range(-0.4..0.4));
    let target = Array2::from_shape_fn((5, 4), |_| r.random_range(-1.0..1.0));
    let rep = grad_check(&store, 1e-5, usize::MAX, |t, b| {
        let xv = t.constant(x.clone());
        let (y, _) = slots.forward(t, b, xv).expect("adapter forward");
        let tv = t.constant(target.clone());
        let d = t.mul(y, tv);
        t.sum(d)
    });
    ensure(rep.passes(1e-4), || {
        format!("max relative error {:e} at {}", rep.max_rel_err, rep.worst)
    })?;
    Ok(format!(
        "{} entries, max relative error {:e}",
        rep.entries, rep.max_rel_err
    ))
}

fn model_gradients() -> Outcome {
    let dims = [4, 4, 4, 6];
    let cfg = BackboneConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        adapter_period: 2,
        ffn_hidden: 8,
        n_classes: 3,
    };
    let mut m = GeoModel::new(cfg, dims, 26).map_err(to_err)?;
    m.install_adapters([Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic], 27)
        .map_err(to_err)?;
    m.unfreeze_all();
    let mut r = rng(28);
    let gates: Vec<_> = m
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".gate"))
        .map(|(id, _)| id)
        .collect();
    for id in gates {
        m.store.get_mut(id).assign(&glorot_uniform(&mut r, 3, 16));
    }
    let ln = m.store.find("block2.ln2.gamma").ok_or("no block2.ln2.gamma")?;
    m.store.get_mut(ln).fill(0.05);
    let x: [Array2<f64>; 4] = std::array::from_fn(|i| {
        let mut a: Array2<f64> = Array2::from_shape_fn((3, dims[i]), |_| r.random_range(-1.0..1.0));
        for mut row in a.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        a
    });
    let y_num = Arc::new(vec![0.3, -1.2, 2.0]);
    let y_cls = Arc::new(vec![2, 0, 1]);
    let rep = grad_check(&m.store, 1e-5, 24, |t, b| {
        let o = m.forward(t, b, &x).expect("model forward");
        combined_loss_on_tape(
            t,
            Some((o.logits, y_cls.clone())),
            Some((o.numeric, y_num.clone())),
            1.0,
            1.0,
        )
    });
    ensure(rep.passes(1e-4), || {
        format!("max relative error {:e} at {}", rep.max_rel_err, rep.worst)
    })?;
    Ok(format!(
        "{} tensors, max relative error {:e}",
        rep.tensors, rep.max_rel_err
    ))
}

fn oracle_r2(p: &[f64], t: &[f64]) -> f64 {
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let mut res = 0.0;
    let mut tot = 0.0;
    for i in 0..t.len() {
        res += (t[i] - p[i]) * (t[i] - p[i]);
        tot += (t[i] - mean) * (t[i] - mean);
    }
    1.0 - res / tot
}

fn oracle_macro_f1(p: &[usize], t: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for i in 0..p.len() {
            if p[i] == c && t[i] == c {
                tp += 1.0;
            } else if p[i] == c {
                fp += 1.0;
            } else if t[i] == c {
                fneg += 1.0;
            }
        }
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fneg);
        }
    }
    total / classes as f64
}

fn r2_oracle(k: &Kernels) -> Outcome {
    let mut r = rng(29);
    for _ in 0..1000 {
        let n = r.random_range(2..40);
        let t: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let (a, b) = ((k.r2)(&p, &t).map_err(to_err)?, oracle_r2(&p, &t));
        ensure((a - b).abs() <= 1e-12 * (1.0 + b.abs()), || {
            format!("r2 {a} vs straight-line {b}")
        })?;
    }
    let hand = (k.r2)(&[0.0, 0.0, 0.0], &[0.0, 1.0, 2.0]).map_err(to_err)?;
    ensure(hand == -1.5, || format!("hand example gives {hand}, expected -1.5"))?;
    Ok("1000 instances".into())
}

fn f1_oracle(k: &Kernels) -> Outcome {
    let mut r = rng(30);
    for _ in 0..1000 {
        let c = r.random_range(2..6);
        let n = r.random_range(1..40);
        let t: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let p: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let (a, b) = ((k.f1)(&p, &t, c).map_err(to_err)?.macro_f1, oracle_macro_f1(&p, &t, c));
        ensure((a - b).abs() <= 1e-12, || format!("macro F1 {a} vs straight-line {b}"))?;
    }
    let hand = (k.f1)(&[1, 1, 1, 1], &[1, 1, 0, 0], 2).map_err(to_err)?.macro_f1;
    ensure(hand == 1.0 / 3.0, || format!("hand example gives {hand}, expected 1/3"))?;
    Ok("1000 instances".into())
}

fn smooth_l1_examples(k: &Kernels) -> Outcome {
    for (p, t, want) in [(1.0, 1.0, 0.0), (0.5, 0.0, 0.125), (3.0, 0.0, 2.5)] {
        let got = (k.smooth_l1)(p, t, 1.0);
        ensure(got == want, || format!("smooth_l1({p}, {t}) = {got}, expected {want}"))?;
    }
    // continuity at the transition
    let (lo, hi) = ((k.smooth_l1)(1.0 - 1e-9, 0.0, 1.0), (k.smooth_l1)(1.0 + 1e-9, 0.0, 1.0));
    ensure((lo - hi).abs() <= 1e-8, || {
        format!("jump at the transition: {lo} vs {hi}")
    })?;
    Ok("3 examples".into())
}

/// Runs every check against `k`. `samples` sets the per-geometry sample
/// count of the statistical manifold checks.
pub fn run_checks(k: &Kernels, samples: usize) -> CheckReport {
    let mut named: Vec<(String, Box<dyn Fn() -> Outcome + '_>)> = Vec::new();
    for g in Geometry::ALL {
        let spec = ManifoldSpec::unit(g);
        named.push((
            format!("manifold.round_trip.{g}"),
            Box::new(move || round_trip(k, spec, samples)),
        ));
        named.push((
            format!("manifold.closure.{g}"),
            Box::new(move || closure(k, spec, samples)),
        ));
        named.push((
            format!("manifold.metric_axioms.{g}"),
            Box::new(move || metric_axioms(k, spec, samples / 10 + 1)),
        ));
        named.push((format!("manifold.closed_form.{g}"), Box::new(move || closed_form(k, g))));
        named.push((format!("graph.knn_oracle.{g}"), Box::new(move || knn_equivalence(spec))));
        named.push((format!("gradients.encoder.{g}"), Box::new(move || encoder_gradients(g))));
    }
    named.push((
        "manifold.flat_limit.hyperbolic".into(),
        Box::new(|| flat_limit(k, Geometry::Hyperbolic)),
    ));
    named.push((
        "manifold.flat_limit.spherical".into(),
        Box::new(|| flat_limit(k, Geometry::Spherical)),
    ));
    named.push(("poincare.round_trip".into(), Box::new(poincare_round_trip)));
    named.push(("poincare.mobius_inverse".into(), Box::new(mobius_inverse)));
    named.push(("graph.io_round_trip".into(), Box::new(graph_io)));
    named.push(("moe.gate_simplex".into(), Box::new(|| gate_simplex(k))));
    named.push(("moe.one_hot_collapse".into(), Box::new(one_hot_collapse)));
    named.push(("moe.spherical_norm".into(), Box::new(spherical_norm)));
    named.push(("moe.hyperbolic_ball".into(), Box::new(hyperbolic_ball)));
    named.push(("gradients.adapter".into(), Box::new(adapter_gradients)));
    named.push(("gradients.model".into(), Box::new(model_gradients)));
    named.push(("metrics.r2_oracle".into(), Box::new(|| r2_oracle(k))));
    named.push(("metrics.f1_oracle".into(), Box::new(|| f1_oracle(k))));
    named.push(("loss.smooth_l1".into(), Box::new(|| smooth_l1_examples(k))));

    let results: Vec<CheckResult> = named
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckResult {
                name,
                passed: false,
                detail,
            },
        })
        .collect();
    let failures: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    CheckReport {
        checks: results.len(),
        passed: results.len() - failures.len(),
        failures,
        results,
    }
}
