//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N ...: PASS|FAIL` line with the measured values.
//!
//! Run with `cargo test -p geowalk-core --test acceptance -- --nocapture`
//! to see the lines.

mod common;

use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use serde_json::Value;

use common::{random_point, rng};
use geowalk::encoder::{Activation, EncoderDims, GeometryEncoder, Stage1Config};
use geowalk::gradcheck::grad_check;
use geowalk::graph::{knn_graph, knn_graph_with, save_graph, synth_catalog, GraphBundle, KnnStrategy, SynthConfig};
use geowalk::manifold::{
    constraint_residual, exp_map, geodesic_distance, log_map, origin, project_to_tangent, Geometry, ManifoldSpec,
    Point, Tangent,
};
use geowalk::moe::{
    adapter_forward, expert_euclidean, expert_hyperbolic, expert_spherical, gate, AdapterBlock, AdapterSlots,
    ExpertParams, GatingParams,
};
use geowalk::params::{glorot_uniform, ParamStore};
use geowalk::pipeline::{assemble_dataset, train_prompt_encoders};
use geowalk::trainer::loss::combined_loss_on_tape;
use geowalk::trainer::metrics::{f1_score, r2_score};
use geowalk::trainer::model::{BackboneConfig, GeoModel};
use geowalk::trainer::train::{
    insertion_sweep, stage2_train, steps_to_threshold, warm_fit, Stage2Report, TrainConfig, EUCLIDEAN_EXPERTS,
    GEOMETRY_EXPERTS,
};

const GEOMETRY_ORDER: [Geometry; 3] = [Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic];

fn report(n: usize, title: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("criterion {n} ({title}): PASS; {detail}"),
        Err(detail) => {
            println!("criterion {n} ({title}): FAIL; {detail}");
            panic!("criterion {n} failed: {detail}");
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    check(elapsed < limit, || format!("{what} took {elapsed:?}, limit {limit:?}"))
}

// ---------------------------------------------------------------------------
// 1. manifold kernels

fn random_tangent(p: &Point, max_norm: f64, r: &mut impl Rng) -> Tangent {
    let w: Vec<f64> = (0..p.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
    let t = project_to_tangent(p, &w).unwrap();
    let norm = t.norm();
    let target = r.random_range(0.0..max_norm);
    let v: Vec<f64> = t.vec().iter().map(|a| a * target / norm).collect();
    Tangent::new(p.clone(), v).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn kernel_suite() -> Result<String, String> {
    let start = Instant::now();
    let mut r = rng(101);
    let specs = [
        ManifoldSpec::euclidean(),
        ManifoldSpec::hyperbolic(-1.0).unwrap(),
        ManifoldSpec::spherical(1.0).unwrap(),
    ];
    let mut worst = [0.0f64; 3];
    for spec in specs {
        let sk = spec.sqrt_abs_c();
        let max_norm = match spec.kind() {
            Geometry::Spherical => std::f64::consts::PI / sk - 0.1,
            _ => 3.0,
        };
        for _ in 0..10_000 {
            let p = random_point(spec, 4, 1.0, &mut r);
            let v = random_tangent(&p, max_norm, &mut r);
            let x = exp_map(&p, &v).map_err(|e| e.to_string())?;
            let back = log_map(&p, &x).map_err(|e| e.to_string())?;
            let rt = max_abs_diff(back.vec(), v.vec());
            let res = constraint_residual(&spec, x.coords());
            check(rt <= 1e-6, || format!("{spec}: round trip error {rt:e}"))?;
            check(res <= 1e-9, || format!("{spec}: closure residual {res:e}"))?;
            worst[0] = worst[0].max(rt);
            worst[1] = worst[1].max(res);
        }
        for _ in 0..1_000 {
            let [x, y, z] = [0, 1, 2].map(|_| random_point(spec, 4, 1.0, &mut r));
            let d = |a: &Point, b: &Point| geodesic_distance(a, b).unwrap();
            let (xy, yx, xz, yz, xx) = (d(&x, &y), d(&y, &x), d(&x, &z), d(&y, &z), d(&x, &x));
            check(xy >= 0.0 && (xy - yx).abs() <= 1e-9, || {
                format!("{spec}: symmetry {xy} vs {yx}")
            })?;
            check(xx <= 1e-9, || format!("{spec}: d(x,x) = {xx:e}"))?;
            check(xz <= xy + yz + 1e-7, || format!("{spec}: triangle {xz} > {xy} + {yz}"))?;
        }
    }
    // flat limit: the same tangent data at the origin, |c| = 1e-4
    let mut flat_worst = 0.0f64;
    for c in [-1e-4, 1e-4] {
        let kind = if c < 0.0 {
            Geometry::Hyperbolic
        } else {
            Geometry::Spherical
        };
        let spec = ManifoldSpec::new(kind, c).unwrap();
        let o = origin(spec, 3).unwrap();
        for _ in 0..1_000 {
            let u: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let lift = |t: &[f64]| {
                let mut v = vec![0.0];
                v.extend_from_slice(t);
                exp_map(&o, &Tangent::new(o.clone(), v).unwrap()).unwrap()
            };
            let curved = geodesic_distance(&lift(&u), &lift(&w)).unwrap();
            let flat = u.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            flat_worst = flat_worst.max((curved - flat).abs());
        }
    }
    check(flat_worst <= 1e-3, || format!("flat-limit disagreement {flat_worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10), "kernel suite")?;
    Ok(format!(
        "round trip {:.1e}, closure {:.1e}, flat limit {:.1e}, {:.2?}",
        worst[0],
        worst[1],
        flat_worst,
        start.elapsed()
    ))
}

#[test]
fn criterion_01_manifold_kernels() {
    report(1, "manifold kernels", kernel_suite());
}

// ---------------------------------------------------------------------------
// 2. closed-form distances

fn closed_forms() -> Result<String, String> {
    let lorentz = |x: &[f64], y: &[f64]| -x[0] * y[0] + x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum::<f64>();
    let hyp = |c: f64, x: &[f64], y: &[f64]| (c * lorentz(x, y)).acosh() / (-c).sqrt();
    let sph = |c: f64, x: &[f64], y: &[f64]| (c * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()).acos() / c.sqrt();
    let (c1, s2) = (1f64.cosh(), 1f64.sinh());
    let r2 = 0.5f64.sqrt();
    let cases: Vec<(ManifoldSpec, Vec<f64>, Vec<f64>, f64)> = vec![
        (ManifoldSpec::euclidean(), vec![0.0, 0.0], vec![3.0, 4.0], 5.0),
        (
            ManifoldSpec::hyperbolic(-1.0).unwrap(),
            vec![1.0, 0.0],
            vec![c1, s2],
            hyp(-1.0, &[1.0, 0.0], &[c1, s2]),
        ),
        (
            ManifoldSpec::hyperbolic(-1.0).unwrap(),
            vec![2f64.cosh(), 2f64.sinh(), 0.0],
            vec![1f64.cosh(), 0.0, 1f64.sinh()],
            hyp(-1.0, &[2f64.cosh(), 2f64.sinh(), 0.0], &[1f64.cosh(), 0.0, 1f64.sinh()]),
        ),
        (
            ManifoldSpec::hyperbolic(-2.0).unwrap(),
            vec![r2, 0.0],
            vec![r2 * 1.5f64.cosh(), r2 * 1.5f64.sinh()],
            hyp(-2.0, &[r2, 0.0], &[r2 * 1.5f64.cosh(), r2 * 1.5f64.sinh()]),
        ),
        (
            ManifoldSpec::spherical(1.0).unwrap(),
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            sph(1.0, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]),
        ),
        (
            ManifoldSpec::spherical(4.0).unwrap(),
            vec![0.5, 0.0, 0.0],
            vec![0.5 * 1.2f64.cos(), 0.5 * 1.2f64.sin(), 0.0],
            sph(4.0, &[0.5, 0.0, 0.0], &[0.5 * 1.2f64.cos(), 0.5 * 1.2f64.sin(), 0.0]),
        ),
    ];
    // the closed forms against their analytic values
    let analytic = [5.0, 1.0, f64::NAN, 1.5 / 2f64.sqrt(), std::f64::consts::FRAC_PI_2, 0.6];
    let mut worst = 0.0f64;
    for ((spec, x, y, want), exact) in cases.iter().zip(analytic) {
        let d = geodesic_distance(
            &Point::new(*spec, x.clone()).unwrap(),
            &Point::new(*spec, y.clone()).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        check((d - want).abs() <= 1e-12, || {
            format!("{spec}: {d} vs closed form {want}")
        })?;
        if exact.is_finite() {
            check((want - exact).abs() <= 1e-12, || {
                format!("{spec}: closed form {want} vs analytic {exact}")
            })?;
        }
        worst = worst.max((d - want).abs());
    }
    Ok(format!("{} hand-built pairs, max deviation {worst:.1e}", cases.len()))
}

#[test]
fn criterion_02_closed_form_distances() {
    report(2, "closed-form distances", closed_forms());
}

// ---------------------------------------------------------------------------
// 3. k-NN against exhaustive search

fn knn_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut graphs = 0;
    for seed in 0..50u64 {
        let mut r = rng(1000 + seed);
        let n = if seed == 0 { 500 } else { 2 + (seed as usize * 97) % 499 };
        let k = 10.min(n - 1);
        for spec in common::specs() {
            let mut pts: Vec<Point> = (0..n).map(|_| random_point(spec, 3, 1.0, &mut r)).collect();
            // exact duplicates force distance ties
            for i in (7..n).step_by(7) {
                pts[i] = pts[i / 2].clone();
            }
            let want: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut all: Vec<(f64, usize)> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| (geodesic_distance(&pts[i], &pts[j]).unwrap(), j))
                        .collect();
                    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    all[..k].iter().map(|p| p.1).collect()
                })
                .collect();
            for (label, g) in [
                ("default", knn_graph(&pts, spec, k)),
                ("vp-tree", knn_graph_with(&pts, spec, k, KnnStrategy::VpTree)),
            ] {
                let g = g.map_err(|e| e.to_string())?;
                for (i, row) in g.neighbors.iter().enumerate() {
                    let got: Vec<usize> = row.iter().map(|p| p.0).collect();
                    check(got == want[i], || {
                        format!("{label} {spec} seed {seed} n {n} node {i}: {got:?} vs {:?}", want[i])
                    })?;
                }
                graphs += 1;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(30), "k-NN comparison")?;
    Ok(format!(
        "{graphs} graphs identical to exhaustive search, {:.2?}",
        start.elapsed()
    ))
}

#[test]
fn criterion_03_knn_oracle() {
    report(3, "k-NN oracle", knn_oracle());
}

// ---------------------------------------------------------------------------
// 4. gate simplex and mixture

fn random_expert(kind: Geometry, m: usize, h: usize, r: &mut impl Rng) -> ExpertParams {
    let mut e = ExpertParams::random(kind, m, h, r);
    e.kappa = r.random_range(0.2..3.0);
    e.c = -r.random_range(0.2..3.0);
    e
}

fn random_block(m: usize, r: &mut impl Rng) -> AdapterBlock {
    AdapterBlock {
        experts: GEOMETRY_ORDER.map(|g| random_expert(g, m, 2 * m, r)),
        gate: GatingParams {
            w_g: glorot_uniform(r, 3, m),
            tau: r.random_range(0.05..2.0),
        },
    }
}

fn single_expert(e: &ExpertParams, x: &[f64]) -> Vec<f64> {
    match e.kind {
        Geometry::Euclidean => expert_euclidean(e, x),
        Geometry::Spherical => expert_spherical(e, x),
        Geometry::Hyperbolic => expert_hyperbolic(e, x),
    }
    .unwrap()
}

fn gating() -> Result<String, String> {
    let mut r = rng(404);
    let m = 6;
    let mut worst_sum = 0.0f64;
    for _ in 0..100_000 {
        let g = GatingParams {
            w_g: Array2::from_shape_fn((3, m), |_| r.random_range(-3.0..3.0)),
            tau: r.random_range(0.01..5.0),
        };
        let x: Vec<f64> = (0..m).map(|_| r.random_range(-5.0..5.0)).collect();
        let w = gate(&g, &x).map_err(|e| e.to_string())?;
        let s: f64 = w.iter().sum();
        check(w.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)), || {
            format!("weights {w:?} leave [0, 1]")
        })?;
        check((s - 1.0).abs() <= 1e-9, || format!("weights sum to {s}"))?;
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    let mut collapse = 0.0f64;
    let mut convex_gap = f64::NEG_INFINITY;
    for _ in 0..500 {
        let mut block = random_block(m, &mut r);
        let x: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
        let outs: Vec<Vec<f64>> = block.experts.iter().map(|e| single_expert(e, &x)).collect();
        let y = adapter_forward(&block, &x, None).map_err(|e| e.to_string())?;
        for j in 0..m {
            let lo = outs.iter().map(|o| o[j]).fold(f64::INFINITY, f64::min);
            let hi = outs.iter().map(|o| o[j]).fold(f64::NEG_INFINITY, f64::max);
            convex_gap = convex_gap.max(lo - y[j]).max(y[j] - hi);
        }
        // logit 1e6 on one expert, 0 on the others
        let xx: f64 = x.iter().map(|v| v * v).sum();
        for (i, out) in outs.iter().enumerate() {
            block.gate.tau = 0.1;
            block.gate.w_g.fill(0.0);
            for j in 0..m {
                block.gate.w_g[[i, j]] = 1e6 * block.gate.tau * x[j] / xx;
            }
            let y = adapter_forward(&block, &x, None).map_err(|e| e.to_string())?;
            collapse = collapse.max(max_abs_diff(&y, out));
        }
    }
    check(collapse <= 1e-9, || {
        format!("one-hot mixture differs from its expert by {collapse:e}")
    })?;
    check(convex_gap <= 1e-12, || {
        format!("mixture leaves the expert envelope by {convex_gap:e}")
    })?;
    Ok(format!(
        "1e5 gates, max |sum - 1| {worst_sum:.1e}; one-hot error {collapse:.1e}; envelope excess {:.1e}",
        convex_gap.max(0.0)
    ))
}

#[test]
fn criterion_04_gate_simplex_and_mixture() {
    report(4, "gate simplex and mixture", gating());
}

// ---------------------------------------------------------------------------
// 5. curved expert ranges

fn expert_ranges() -> Result<String, String> {
    let mut r = rng(505);
    let m = 8;
    let (mut sphere_err, mut ball_max) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let s = random_expert(Geometry::Spherical, m, 12, &mut r);
        let h = random_expert(Geometry::Hyperbolic, m, 12, &mut r);
        let scale = r.random_range(0.01..20.0);
        let x: Vec<f64> = (0..m).map(|_| scale * r.random_range(-1.0..1.0)).collect();
        let ys = expert_spherical(&s, &x).map_err(|e| e.to_string())?;
        let yh = expert_hyperbolic(&h, &x).map_err(|e| e.to_string())?;
        let ns = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nh = yh.iter().map(|v| v * v).sum::<f64>().sqrt() * (-h.c).sqrt();
        check((ns - s.kappa).abs() <= 1e-9, || {
            format!("spherical norm {ns} vs kappa {}", s.kappa)
        })?;
        check(nh < 1.0, || format!("hyperbolic output at scaled norm {nh}"))?;
        sphere_err = sphere_err.max((ns - s.kappa).abs());
        ball_max = ball_max.max(nh);
    }
    Ok(format!(
        "1e4 samples each; | |y| - kappa | <= {sphere_err:.1e}; max sqrt|c| |y| = {ball_max:.12}"
    ))
}

#[test]
fn criterion_05_expert_ranges() {
    report(5, "expert invariants", expert_ranges());
}

// ---------------------------------------------------------------------------
// 6. gradient checks

fn gradients() -> Result<String, String> {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut r = rng(606);
    for kind in [Geometry::Euclidean, Geometry::Hyperbolic, Geometry::Spherical] {
        let spec = ManifoldSpec::unit(kind);
        let pts: Vec<Point> = (0..10).map(|_| random_point(spec, 2, 1.0, &mut r)).collect();
        let g = knn_graph(&pts, spec, 3).map_err(|e| e.to_string())?;
        let x = Array2::from_shape_fn((10, 6), |_| r.random_range(-1.0..1.0));
        let y: Arc<Vec<f64>> = Arc::new((0..10).map(|_| r.random_range(-2.0..2.0)).collect());
        let dims = EncoderDims {
            input: 6,
            hidden: 8,
            output: 5,
        };
        let mut enc = GeometryEncoder::new(spec, dims, Activation::Relu, 607).map_err(|e| e.to_string())?;
        // a zero read-out would hide every upstream gradient
        let head = enc.store.find("readout.w").unwrap();
        enc.store.get_mut(head).assign(&glorot_uniform(&mut r, 1, 5));
        let adj = g.adjacency();
        let rep = grad_check(&enc.store, 1e-5, usize::MAX, |t, b| {
            let xv = t.constant(x.clone());
            let p = enc.forward(t, b, xv, &adj);
            let out = enc.readout(t, b, p);
            t.mse(out, y.clone())
        });
        check(rep.passes(1e-4), || {
            format!("{kind} encoder: {:e} at {}", rep.max_rel_err, rep.worst)
        })?;
        parts.push(format!("{kind} encoder {:.1e}", rep.max_rel_err));
    }

    let mut store = ParamStore::new();
    let slots = AdapterSlots::register(&mut store, "adapter", GEOMETRY_ORDER, 8, 12, None, &mut r);
    let gate_id = store.find("adapter.gate").unwrap();
    store.get_mut(gate_id).assign(&glorot_uniform(&mut r, 3, 8));
    let x = Array2::from_shape_fn((6, 8), |_| r.random_range(-0.3..0.3));
    let target = Array2::from_shape_fn((6, 8), |_| r.random_range(-1.0..1.0));
    let rep = grad_check(&store, 1e-5, usize::MAX, |t, b| {
        let xv = t.constant(x.clone());
        let (y, _) = slots.forward(t, b, xv).unwrap();
        let tv = t.constant(target.clone());
        let prod = t.mul(y, tv);
        t.sum(prod)
    });
    check(rep.passes(1e-4), || {
        format!("adapter: {:e} at {}", rep.max_rel_err, rep.worst)
    })?;
    parts.push(format!("adapter ({} tensors) {:.1e}", rep.tensors, rep.max_rel_err));

    let dims = [5, 5, 5, 6];
    let cfg = BackboneConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        adapter_period: 2,
        ffn_hidden: 8,
        n_classes: 3,
    };
    let mut model = GeoModel::new(cfg, dims, 608).map_err(|e| e.to_string())?;
    model.install_adapters(GEOMETRY_ORDER, 609).map_err(|e| e.to_string())?;
    model.unfreeze_all();
    let gates: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".gate"))
        .map(|(id, _)| id)
        .collect();
    for id in gates {
        model.store.get_mut(id).assign(&glorot_uniform(&mut r, 3, 16));
    }
    // a small LayerNorm gain keeps the hyperbolic expert's input off the
    // ball-clamp boundary, where the map has a kink
    let ln = model.store.find("block2.ln2.gamma").unwrap();
    model.store.get_mut(ln).fill(0.05);
    let inputs: [Array2<f64>; 4] = std::array::from_fn(|i| {
        let mut a: Array2<f64> = Array2::from_shape_fn((3, dims[i]), |_| r.random_range(-1.0..1.0));
        for mut row in a.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        a
    });
    let y_num = Arc::new(vec![0.4, -1.1, 1.7]);
    let y_cls = Arc::new(vec![1, 0, 2]);
    let rep = grad_check(&model.store, 1e-5, usize::MAX, |t, b| {
        let o = model.forward(t, b, &inputs).unwrap();
        combined_loss_on_tape(
            t,
            Some((o.logits, y_cls.clone())),
            Some((o.numeric, y_num.clone())),
            1.0,
            1.0,
        )
    });
    check(rep.passes(1e-4), || {
        format!("model: {:e} at {}", rep.max_rel_err, rep.worst)
    })?;
    parts.push(format!(
        "model ({} tensors, {} entries) {:.1e}",
        rep.tensors, rep.entries, rep.max_rel_err
    ));
    within(start.elapsed(), Duration::from_secs(120), "gradient checks")?;
    Ok(format!("{}; {:.2?}", parts.join(", "), start.elapsed()))
}

#[test]
fn criterion_06_gradient_checks() {
    report(6, "gradient checks", gradients());
}

// ---------------------------------------------------------------------------
// 7. determinism

/// Every byte the pipeline writes, keyed by file name.
fn pipeline_bytes(dir: &Path, seed: u64) -> Vec<(String, Vec<u8>)> {
    let synth = SynthConfig {
        n: 240,
        feature_dim: 16,
        depth: 3,
        ..SynthConfig::default()
    };
    let s = synth_catalog(seed, &synth).unwrap();
    s.catalog.write_csv(&dir.join("catalog.csv")).unwrap();
    s.targets.write_csv(&dir.join("targets.csv")).unwrap();
    let bundle = GraphBundle::build(&s.catalog, 6).unwrap();
    for g in Geometry::ALL {
        save_graph(bundle.get(g), &dir.join(format!("graph_{g}.txt"))).unwrap();
    }
    let dims = EncoderDims {
        input: 16,
        hidden: 12,
        output: 8,
    };
    let st = Stage1Config {
        epochs: 25,
        ..Stage1Config::default()
    };
    let trained = train_prompt_encoders(&bundle, &s.catalog.features, &s.targets.regression, dims, &st, seed).unwrap();
    for (enc, trace) in &trained {
        let g = enc.spec.kind();
        enc.save(&dir.join(format!("encoder_{g}.json"))).unwrap();
        trace.write_csv(&dir.join(format!("stage1_{g}.csv"))).unwrap();
    }
    let encoders: Vec<GeometryEncoder> = trained.into_iter().map(|(e, _)| e).collect();
    let data = assemble_dataset(&encoders, &bundle, &s.catalog.features, &s.targets).unwrap();
    let bb = BackboneConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        adapter_period: 1,
        ffn_hidden: 16,
        n_classes: data.n_classes,
    };
    let tc = TrainConfig {
        epochs: 2,
        warm_fit_epochs: 1,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    };
    let (base, warm) = warm_fit(&data, bb, &tc).unwrap();
    warm.write_csv(&dir.join("warm_metrics.csv")).unwrap();
    let (model, rep) = stage2_train(&base, &data, GEOMETRY_EXPERTS, &tc).unwrap();
    rep.metrics.write_csv(&dir.join("metrics.csv")).unwrap();
    rep.final_eval.gates.write_csv(&dir.join("gates.csv")).unwrap();
    model.checkpoint().save(&dir.join("model.json")).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Result<String, String> {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let first = pipeline_bytes(a.path(), 11);
    let second = pipeline_bytes(b.path(), 11);
    check(first.len() == second.len(), || "different file sets".into())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        check(x == y, || format!("{name} differs between runs"))?;
    }
    // a different seed must change the outputs, or the comparison is vacuous
    let other = pipeline_bytes(c.path(), 12);
    let changed = first.iter().zip(&other).filter(|(x, y)| x.1 != y.1).count();
    check(changed == first.len(), || {
        format!("seed change left {} files unchanged", first.len() - changed)
    })?;
    let bytes: usize = first.iter().map(|f| f.1.len()).sum();
    Ok(format!("{} files, {bytes} bytes identical across runs", first.len()))
}

#[test]
fn criterion_07_determinism() {
    report(7, "determinism", determinism());
}

// ---------------------------------------------------------------------------
// 8 and 9. desk-scale ablation and insertion sweep

const DESK_SEED: u64 = 7;
/// Loss levels for the sweep ordering, on an EMA (alpha 0.1) of the
/// training loss.
const SWEEP_THRESHOLDS: [f64; 6] = [1.0, 0.8, 0.6, 0.5, 0.4, 0.3];
const SWEEP_PERIODS: [usize; 3] = [1, 2, 4];

struct DeskRun {
    geometry: Stage2Report,
    control: Stage2Report,
    /// Mean hyperbolic gate weight on hierarchical and flat validation samples.
    gate_h: (f64, f64),
    sweep: Vec<(usize, Result<Vec<Option<usize>>, String>)>,
    elapsed: Duration,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let synth = SynthConfig {
            n: 2000,
            depth: 3,
            feature_dim: 64,
            ..SynthConfig::default()
        };
        let s = synth_catalog(DESK_SEED, &synth).unwrap();
        let bundle = GraphBundle::build(&s.catalog, 10).unwrap();
        let dims = EncoderDims {
            input: 64,
            hidden: 64,
            output: 32,
        };
        let encoders: Vec<GeometryEncoder> = train_prompt_encoders(
            &bundle,
            &s.catalog.features,
            &s.targets.regression,
            dims,
            &Stage1Config::default(),
            DESK_SEED,
        )
        .unwrap()
        .into_iter()
        .map(|(e, _)| e)
        .collect();
        let data = assemble_dataset(&encoders, &bundle, &s.catalog.features, &s.targets).unwrap();
        let bb = BackboneConfig {
            layers: 4,
            model_dim: 32,
            heads: 4,
            adapter_period: 4,
            ffn_hidden: 64,
            n_classes: data.n_classes,
        };
        let tc = TrainConfig {
            seed: DESK_SEED,
            ..TrainConfig::default()
        };
        let (base, _) = warm_fit(&data, bb, &tc).unwrap();
        let (_, geometry) = stage2_train(&base, &data, GEOMETRY_EXPERTS, &tc).unwrap();
        let (_, control) = stage2_train(&base, &data, EUCLIDEAN_EXPERTS, &tc).unwrap();
        let (_, val) = tc.split(data.len()).unwrap();
        let h = GEOMETRY_EXPERTS
            .iter()
            .position(|&g| g == Geometry::Hyperbolic)
            .unwrap();
        let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
        for (j, &i) in val.iter().enumerate() {
            let slot = usize::from(!s.hierarchical[i]);
            sums[slot] += geometry.final_eval.sample_gates[j][h];
            counts[slot] += 1;
        }
        let sweep = insertion_sweep(&base, &data, &SWEEP_PERIODS, GEOMETRY_EXPERTS, &tc)
            .into_iter()
            .map(|run| {
                let steps = run
                    .result
                    .map(|rep| {
                        SWEEP_THRESHOLDS
                            .iter()
                            .map(|&t| steps_to_threshold(&rep.metrics, t, 0.1))
                            .collect()
                    })
                    .map_err(|e| e.to_string());
                (run.period, steps)
            })
            .collect();
        DeskRun {
            geometry,
            control,
            gate_h: (sums[0] / counts[0] as f64, sums[1] / counts[1] as f64),
            sweep,
            elapsed: start.elapsed(),
        }
    })
}

/// Values from the first reference run, committed alongside the suite.
fn reference() -> Value {
    serde_json::from_str(include_str!("reference/desk_scale.json")).unwrap()
}

fn ablation() -> Result<String, String> {
    let run = desk_run();
    let (geo, ctl) = (run.geometry.final_eval.loss, run.control.final_eval.loss);
    let (hier, flat) = run.gate_h;
    let r = &reference()["ablation"];
    let detail = format!(
        "val loss geometry {geo:.6} vs Euclidean control {ctl:.6} (reference {} vs {}); \
         hyperbolic gate hierarchical {hier:.4} vs flat {flat:.4} (reference {} vs {}); \
         trainable {} vs {}; {:.1?}",
        r["geometry_val_loss"],
        r["control_val_loss"],
        r["gate_h_hierarchical"],
        r["gate_h_flat"],
        run.geometry.trainable_params,
        run.control.trainable_params,
        run.elapsed
    );
    check(run.geometry.trainable_params == run.control.trainable_params, || {
        format!("parameter counts differ; {detail}")
    })?;
    check(geo < ctl, || {
        format!("geometry adapter does not beat the control; {detail}")
    })?;
    check(hier > flat, || {
        format!("hyperbolic gate does not favour hierarchical samples; {detail}")
    })?;
    Ok(detail)
}

#[test]
fn criterion_08_geometry_ablation() {
    report(8, "geometry ablation", ablation());
}

fn sweep_order() -> Result<String, String> {
    let run = desk_run();
    let mut table = Vec::new();
    for (k, steps) in &run.sweep {
        let steps = steps.as_ref().map_err(|e| format!("k={k} failed: {e}"))?;
        table.push(format!("k={k} {steps:?}"));
    }
    let detail = format!("thresholds {SWEEP_THRESHOLDS:?}; steps {}", table.join(", "));
    let steps_for = |k: usize| {
        run.sweep
            .iter()
            .find(|s| s.0 == k)
            .and_then(|s| s.1.clone().ok())
            .unwrap()
    };
    let (dense, sparse) = (steps_for(1), steps_for(4));
    for (i, t) in SWEEP_THRESHOLDS.iter().enumerate() {
        let (d, s) = (dense[i], sparse[i]);
        check(d.is_some(), || format!("k=1 never reaches {t}; {detail}"))?;
        check(s.is_none() || d <= s, || {
            format!("k=1 needs {d:?} steps to reach {t}, k=4 {s:?}; {detail}")
        })?;
    }
    Ok(detail)
}

#[test]
fn criterion_09_insertion_sweep() {
    report(9, "insertion sweep", sweep_order());
}

// ---------------------------------------------------------------------------
// 10. metric oracles

fn oracle_r2(p: &[f64], t: &[f64]) -> f64 {
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let ss_res: f64 = p.iter().zip(t).map(|(a, b)| (b - a).powi(2)).sum();
    let ss_tot: f64 = t.iter().map(|b| (b - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Macro F1 from a confusion matrix; a class absent from both lists
/// scores 0.
fn oracle_macro_f1(p: &[usize], t: &[usize], classes: usize) -> f64 {
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&a, &b) in p.iter().zip(t) {
        cm[b][a] += 1;
    }
    let mut scores = Vec::new();
    for c in 0..classes {
        let tp = cm[c][c] as f64;
        let fp = (0..classes).filter(|&r| r != c).map(|r| cm[r][c]).sum::<usize>() as f64;
        let fn_ = (0..classes).filter(|&q| q != c).map(|q| cm[c][q]).sum::<usize>() as f64;
        let denom = 2.0 * tp + fp + fn_;
        scores.push(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom });
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn metric_oracles() -> Result<String, String> {
    let mut r = rng(1010);
    let (mut r2_dev, mut f1_dev) = (0.0f64, 0.0f64);
    for _ in 0..1_000 {
        let n = r.random_range(2..200);
        let t: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = t.iter().map(|v| v + r.random_range(-2.0..2.0)).collect();
        let got = r2_score(&p, &t).map_err(|e| e.to_string())?;
        r2_dev = r2_dev.max((got - oracle_r2(&p, &t)).abs());
        let classes = r.random_range(2..7);
        let tc: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let pc: Vec<usize> = tc
            .iter()
            .map(|&c| {
                if r.random_bool(0.6) {
                    c
                } else {
                    r.random_range(0..classes)
                }
            })
            .collect();
        let got = f1_score(&pc, &tc, classes).map_err(|e| e.to_string())?.macro_f1;
        f1_dev = f1_dev.max((got - oracle_macro_f1(&pc, &tc, classes)).abs());
    }
    check(r2_dev <= 1e-12, || format!("R2 deviates by {r2_dev:e}"))?;
    check(f1_dev <= 1e-12, || format!("macro F1 deviates by {f1_dev:e}"))?;
    let hand_r2 = r2_score(&[0.0, 0.0, 0.0], &[0.0, 1.0, 2.0]).map_err(|e| e.to_string())?;
    check(hand_r2 == -1.5, || format!("R2 hand example gives {hand_r2}"))?;
    let hand_f1 = f1_score(&[1, 1, 1, 1], &[1, 1, 0, 0], 2).map_err(|e| e.to_string())?;
    check(hand_f1.macro_f1 == 1.0 / 3.0, || {
        format!("macro F1 hand example gives {}", hand_f1.macro_f1)
    })?;
    check(hand_f1.per_class == vec![0.0, 2.0 / 3.0], || {
        format!("per-class F1 {:?}", hand_f1.per_class)
    })?;
    Ok(format!(
        "1e3 instances, max deviation R2 {r2_dev:.1e}, F1 {f1_dev:.1e}; hand examples exact"
    ))
}

#[test]
fn criterion_10_metric_oracles() {
    report(10, "metric oracles", metric_oracles());
}
