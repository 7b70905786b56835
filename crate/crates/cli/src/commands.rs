//! One function per subcommand. Each writes its resolved configuration
//! (`<cmd>.config.toml`) and a JSON summary (`<cmd>.summary.json`) next to
//! its outputs; the summary's `metadata` field is the only place a
//! timestamp appears.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use geowalk::checks::{run_checks, Kernels};
use geowalk::config::RunConfig;
use geowalk::encoder::GeometryEncoder;
use geowalk::graph::{load_graph, save_graph, synth_catalog, Catalog, GraphBundle, Targets};
use geowalk::manifold::Geometry;
use geowalk::moe::{expert_contributions, inactive_fraction, GateTrace};
use geowalk::pipeline::{assemble_dataset, train_prompt_encoders, PROMPT_GEOMETRIES};
use geowalk::trainer::model::Dataset;
use geowalk::trainer::predictions::Predictions;
use geowalk::trainer::train::{
    insertion_sweep, stage2_train, warm_fit, Evaluation, Stage2Report, EUCLIDEAN_EXPERTS, GEOMETRY_EXPERTS,
};
use geowalk::GeoError;

use crate::{Cli, Command, DataArgs, Failure, OutArg};

type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Failure::Usage(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Command::Synth {
            out,
            n,
            clusters,
            depth,
            feature_dim,
        } => {
            let s = &mut cfg.synth;
            s.n = n.unwrap_or(s.n);
            s.n_clusters = clusters.unwrap_or(s.n_clusters);
            s.depth = depth.unwrap_or(s.depth);
            s.feature_dim = feature_dim.unwrap_or(s.feature_dim);
            let cfg = cfg.resolve()?;
            synth(&cfg, &out_dir(&out, &cfg)?)
        }
        Command::BuildGraph { out, catalog, k } => {
            cfg.graph.k = k.unwrap_or(cfg.graph.k);
            let cfg = cfg.resolve()?;
            let out = out_dir(&out, &cfg)?;
            let catalog = catalog.unwrap_or_else(|| out.join("catalog.csv"));
            build_graph(&cfg, &out, &catalog)
        }
        Command::TrainPrompt { out, data, epochs } => {
            cfg.stage1.epochs = epochs.unwrap_or(cfg.stage1.epochs);
            let cfg = cfg.resolve()?;
            let out = out_dir(&out, &cfg)?;
            train_prompt(&cfg, &out, &data)
        }
        Command::TrainAdapter {
            out,
            data,
            prompts,
            epochs,
            experts,
        } => {
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            let kinds = match experts.as_str() {
                "geometry" => GEOMETRY_EXPERTS,
                "euclidean" => EUCLIDEAN_EXPERTS,
                other => {
                    return Err(Failure::Usage(format!(
                        "--experts must be `geometry` or `euclidean`, got `{other}`"
                    )))
                }
            };
            let cfg = cfg.resolve()?;
            let out = out_dir(&out, &cfg)?;
            train_adapter(cfg, &out, &data, prompts.as_deref(), kinds)
        }
        Command::Evaluate {
            out,
            predictions,
            targets,
        } => {
            let cfg = cfg.resolve()?;
            let out = out_dir(&out, &cfg)?;
            let p = predictions.unwrap_or_else(|| out.join("predictions.csv"));
            let t = targets.unwrap_or_else(|| out.join("targets.csv"));
            evaluate(&cfg, &out, &p, &t)
        }
        Command::AnalyzeExperts { out, trace } => {
            let cfg = cfg.resolve()?;
            let out = out_dir(&out, &cfg)?;
            let t = trace.unwrap_or_else(|| out.join("gates.csv"));
            analyze_experts(&cfg, &out, &t)
        }
        Command::Sweep {
            out,
            data,
            prompts,
            periods,
        } => {
            if let Some(p) = periods {
                cfg.sweep.periods = p;
            }
            let cfg = cfg.resolve()?;
            let out = out_dir(&out, &cfg)?;
            sweep(cfg, &out, &data, prompts.as_deref())
        }
        Command::Check {
            inject_fault,
            samples,
            report,
        } => {
            let kernels = match inject_fault {
                Some(name) => Kernels::with_fault(&name).map_err(|e| Failure::Usage(e.to_string()))?,
                None => Kernels::reference(),
            };
            check(&kernels, samples, report.as_deref())
        }
    }
}

fn out_dir(out: &OutArg, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = match (&out.out, cfg.out_dir.is_empty()) {
        (Some(d), _) => d.clone(),
        (None, false) => PathBuf::from(&cfg.out_dir),
        (None, true) => {
            return Err(Failure::Usage(
                "no output directory: pass --out, set GEOWALK_OUT, or set out_dir in the config".into(),
            ))
        }
    };
    fs::create_dir_all(&dir).map_err(GeoError::from)?;
    Ok(dir)
}

/// Fails with a dependency error naming `path` when it does not exist.
fn require(path: &Path) -> Result<&Path, GeoError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(GeoError::Dependency {
            path: path.to_path_buf(),
        })
    }
}

fn finish(cmd: &str, cfg: &RunConfig, out: &Path, results: Value) -> CmdResult {
    fs::write(out.join(format!("{cmd}.config.toml")), cfg.to_toml()).map_err(GeoError::from)?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let summary = json!({
        "command": cmd,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "results": results,
        "metadata": { "timestamp_unix": stamp, "version": env!("CARGO_PKG_VERSION") },
    });
    let text = serde_json::to_string_pretty(&summary).map_err(GeoError::from)?;
    fs::write(out.join(format!("{cmd}.summary.json")), format!("{text}\n")).map_err(GeoError::from)?;
    println!(
        "{}",
        serde_json::to_string(&summary["results"]).map_err(GeoError::from)?
    );
    Ok(())
}

fn graph_file(dir: &Path, g: Geometry) -> PathBuf {
    dir.join(format!("graph_{g}.txt"))
}

fn encoder_file(dir: &Path, g: Geometry) -> PathBuf {
    dir.join(format!("encoder_{g}.json"))
}

fn synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    let s = synth_catalog(cfg.seed, &cfg.synth)?;
    s.catalog.write_csv(&out.join("catalog.csv"))?;
    s.targets.write_csv(&out.join("targets.csv"))?;
    let mut truth = String::from("id,cluster,hierarchical\n");
    for i in 0..s.catalog.len() {
        truth.push_str(&format!(
            "{},{},{}\n",
            s.catalog.ids[i],
            s.cluster[i],
            u8::from(s.hierarchical[i])
        ));
    }
    fs::write(out.join("truth.csv"), truth).map_err(GeoError::from)?;
    let results = json!({
        "objects": s.catalog.len(),
        "clusters": cfg.synth.n_clusters,
        "depth": cfg.synth.depth,
        "feature_dim": cfg.synth.feature_dim,
        "hierarchical_objects": s.hierarchical.iter().filter(|&&h| h).count(),
        "files": ["catalog.csv", "targets.csv", "truth.csv"],
    });
    finish("synth", cfg, out, results)
}

fn build_graph(cfg: &RunConfig, out: &Path, catalog: &Path) -> CmdResult {
    let cat = Catalog::read_csv(require(catalog)?)?;
    let bundle = GraphBundle::build_with(&cat, cfg.graph.k, |g| cfg.graph.spec(g).expect("validated curvature"))?;
    for g in Geometry::ALL {
        save_graph(bundle.get(g), &graph_file(out, g))?;
    }
    let stats = bundle.stats();
    eprintln!("graph statistics: n = {}, k = {}", bundle.n(), cfg.graph.k);
    for s in &stats {
        eprintln!(
            "  {:<10} directed edges {:>8}  unique pairs {:>8}",
            s.geometry, s.directed_edges, s.undirected_edges
        );
    }
    let results = json!({
        "n": bundle.n(),
        "k": cfg.graph.k,
        "graphs": serde_json::to_value(&stats).map_err(GeoError::from)?,
    });
    finish("build-graph", cfg, out, results)
}

fn load_data(out: &Path, data: &DataArgs) -> Result<(Catalog, Targets, GraphBundle), Failure> {
    let catalog = data.catalog.clone().unwrap_or_else(|| out.join("catalog.csv"));
    let targets = data.targets.clone().unwrap_or_else(|| out.join("targets.csv"));
    let graphs = data.graphs.clone().unwrap_or_else(|| out.to_path_buf());
    let cat = Catalog::read_csv(require(&catalog)?)?;
    let tg = Targets::read_csv(require(&targets)?)?;
    tg.check_aligned(&cat)?;
    let mut loaded = Vec::new();
    for g in [Geometry::Euclidean, Geometry::Hyperbolic, Geometry::Spherical] {
        let path = graph_file(&graphs, g);
        let graph = load_graph(require(&path)?).map_err(|e| e.context(path.display().to_string()))?;
        if graph.spec.kind() != g {
            return Err(GeoError::Validation(format!("{} holds a {} graph", path.display(), graph.spec.kind())).into());
        }
        loaded.push(graph);
    }
    let s = loaded.pop().expect("three graphs");
    let h = loaded.pop().expect("three graphs");
    let e = loaded.pop().expect("three graphs");
    let bundle = GraphBundle::new(e, h, s)?;
    if bundle.n() != cat.len() {
        return Err(GeoError::Validation(format!("graphs have {} nodes, catalog {}", bundle.n(), cat.len())).into());
    }
    Ok((cat, tg, bundle))
}

fn train_prompt(cfg: &RunConfig, out: &Path, data: &DataArgs) -> CmdResult {
    let (cat, tg, bundle) = load_data(out, data)?;
    let dims = cfg.encoder.dims(cat.feature_dim());
    let trained = train_prompt_encoders(&bundle, &cat.features, &tg.regression, dims, &cfg.stage1, cfg.seed)?;
    let mut results = serde_json::Map::new();
    for (enc, trace) in &trained {
        let g = enc.spec.kind();
        enc.save(&encoder_file(out, g))?;
        trace.write_csv(&out.join(format!("stage1_{g}.csv")))?;
        let last = trace.last();
        results.insert(
            g.to_string(),
            json!({
                "curvature": enc.spec.curvature(),
                "final_loss": last.map(|l| l.loss),
                "final_val_loss": last.map(|l| l.val_loss),
            }),
        );
    }
    finish("train-prompt", cfg, out, Value::Object(results))
}

fn load_dataset(out: &Path, data: &DataArgs, prompts: Option<&Path>) -> Result<(Targets, Dataset), Failure> {
    let (cat, tg, bundle) = load_data(out, data)?;
    let dir = prompts.unwrap_or(out);
    let mut encoders = Vec::new();
    for g in PROMPT_GEOMETRIES {
        encoders.push(GeometryEncoder::load(require(&encoder_file(dir, g))?)?);
    }
    let ds = assemble_dataset(&encoders, &bundle, &cat.features, &tg)?;
    Ok((tg, ds))
}

fn eval_json(e: &Evaluation) -> Value {
    json!({
        "val_loss": e.loss,
        "r2": e.r2,
        "f1": e.f1.macro_f1,
        "f1_per_class": e.f1.per_class,
        "absent_classes": e.f1.absent,
    })
}

fn report_json(r: &Stage2Report, adapters: &[usize]) -> Value {
    json!({
        "adapter_blocks": adapters,
        "trainable_params": r.trainable_params,
        "frozen_unchanged": r.frozen_digest_before == r.frozen_digest_after,
        "frozen_digest": r.frozen_digest_after,
        "validation": eval_json(&r.final_eval),
    })
}

fn train_adapter(
    mut cfg: RunConfig,
    out: &Path,
    data: &DataArgs,
    prompts: Option<&Path>,
    kinds: [Geometry; 3],
) -> CmdResult {
    let (tg, ds) = load_dataset(out, data, prompts)?;
    cfg.backbone.n_classes = ds.n_classes.max(2);
    let cfg = cfg.resolve()?;
    let (base, warm) = warm_fit(&ds, cfg.backbone.clone(), &cfg.train)?;
    let (model, rep) = stage2_train(&base, &ds, kinds, &cfg.train)?;
    model.checkpoint().save(&out.join("model.json"))?;
    warm.write_csv(&out.join("warm_metrics.csv"))?;
    rep.metrics.write_csv(&out.join("metrics.csv"))?;
    rep.final_eval.gates.write_csv(&out.join("gates.csv"))?;
    let (_, val) = cfg.train.split(ds.len())?;
    let preds = Predictions {
        ids: val.iter().map(|&i| tg.ids[i].clone()).collect(),
        regression: rep.final_eval.numeric.clone(),
        class: rep.final_eval.predicted_class.clone(),
    };
    preds.write_csv(&out.join("predictions.csv"))?;
    let mut results = report_json(&rep, &cfg.backbone.adapter_blocks());
    results["experts"] = json!(kinds.map(|g| g.to_string()));
    results["warm_fit"] = json!({
        "val_loss": warm.last("all", "val_loss"),
        "r2": warm.last("regression", "r2"),
        "f1": warm.last("class", "f1"),
    });
    finish("train-adapter", &cfg, out, results)
}

fn evaluate(cfg: &RunConfig, out: &Path, predictions: &Path, targets: &Path) -> CmdResult {
    let p = Predictions::read_csv(require(predictions)?)?;
    let t = Targets::read_csv(require(targets)?)?;
    let s = p.score(&t)?;
    let results = json!({
        "n": s.n,
        "r2": s.r2,
        "f1": s.f1.macro_f1,
        "f1_per_class": s.f1.per_class,
        "absent_classes": s.f1.absent,
    });
    finish("evaluate", cfg, out, results)
}

fn analyze_experts(cfg: &RunConfig, out: &Path, trace: &Path) -> CmdResult {
    let t = GateTrace::read_csv(require(trace)?)?;
    let per_task = expert_contributions(&t)?;
    let mut csv = String::from("task,w_e,w_s,w_h\n");
    let mut tasks = serde_json::Map::new();
    for (task, w) in &per_task {
        csv.push_str(&format!("{task},{},{},{}\n", w[0], w[1], w[2]));
        tasks.insert(
            task.clone(),
            json!({ "euclidean": w[0], "spherical": w[1], "hyperbolic": w[2] }),
        );
    }
    fs::write(out.join("experts.csv"), csv).map_err(GeoError::from)?;
    let results = json!({
        "records": t.len(),
        "tasks": tasks,
        "inactive_fraction": inactive_fraction(&t),
    });
    finish("analyze-experts", cfg, out, results)
}

fn sweep(mut cfg: RunConfig, out: &Path, data: &DataArgs, prompts: Option<&Path>) -> CmdResult {
    let (_, ds) = load_dataset(out, data, prompts)?;
    cfg.backbone.n_classes = ds.n_classes.max(2);
    let cfg = cfg.resolve()?;
    let (base, _) = warm_fit(&ds, cfg.backbone.clone(), &cfg.train)?;
    let runs = insertion_sweep(&base, &ds, &cfg.sweep.periods, GEOMETRY_EXPERTS, &cfg.train);
    let mut per_k = Vec::new();
    let mut failed = 0;
    for run in &runs {
        match &run.result {
            Ok(rep) => {
                rep.metrics.write_csv(&out.join(format!("sweep_k{}.csv", run.period)))?;
                let mut bb = base.cfg.clone();
                bb.adapter_period = run.period;
                let mut v = report_json(rep, &bb.adapter_blocks());
                v["period"] = json!(run.period);
                v["status"] = json!("ok");
                per_k.push(v);
            }
            Err(e) => {
                failed += 1;
                per_k.push(json!({ "period": run.period, "status": "failed", "error": e.to_string() }));
            }
        }
    }
    finish("sweep", &cfg, out, json!({ "runs": per_k }))?;
    if failed == runs.len() {
        return Err(Failure::Check("every sweep run failed".into()));
    }
    Ok(())
}

fn check(kernels: &Kernels, samples: usize, report_path: Option<&Path>) -> CmdResult {
    let report = run_checks(kernels, samples);
    let text = serde_json::to_string_pretty(&report).map_err(GeoError::from)?;
    println!("{text}");
    if let Some(p) = report_path {
        fs::write(p, format!("{text}\n")).map_err(GeoError::from)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} of {} checks failed: {}",
            report.failures.len(),
            report.checks,
            report.failures.join(", ")
        )))
    }
}
