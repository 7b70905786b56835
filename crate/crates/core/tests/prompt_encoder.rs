use geowalk::encoder::*;
use geowalk::graph::*;
use geowalk::manifold::ManifoldSpec;

#[test]
fn hyperbolic_prompt_beats_graph_free_baseline() {
    let cfg = SynthConfig {
        n: 500,
        n_clusters: 4,
        depth: 3,
        ..SynthConfig::default()
    };
    let s = synth_catalog(7, &cfg).unwrap();
    let bundle = GraphBundle::build(&s.catalog, 10).unwrap();
    let x = &s.catalog.features;
    let y = &s.targets.regression;
    let st = Stage1Config::default();
    let base = linear_baseline(x, y, &st, 1, 2).unwrap();
    let spec = ManifoldSpec::hyperbolic(-1.0).unwrap();
    let mut enc = GeometryEncoder::new(spec, EncoderDims::default(), Activation::Relu, 3).unwrap();
    let trace = stage1_train(&mut enc, &bundle.hyperbolic, x, y, &st, 1).unwrap();
    let (b, e) = (base.last().unwrap().val_loss, trace.last().unwrap().val_loss);
    println!("validation MSE: encoder {e:.4}, linear baseline {b:.4}");
    assert!(e < b);
    // training loss never rises across a 20-epoch window
    for w in trace.0.windows(21) {
        assert!(
            w[20].loss <= w[0].loss,
            "epoch {}: {} -> {}",
            w[0].epoch,
            w[0].loss,
            w[20].loss
        );
    }
    let prompt = enc.encode(x, &bundle.hyperbolic).unwrap();
    assert_eq!(prompt.dim(), (500, 256));
    assert!(prompt.iter().all(|v| v.is_finite()));
}

#[test]
fn spherical_encoder_trains_without_wrapping() {
    // raw feature rows have norm ~50, far beyond the sphere's injectivity radius
    let cfg = SynthConfig {
        n: 400,
        depth: 3,
        ..SynthConfig::default()
    };
    let s = synth_catalog(7, &cfg).unwrap();
    let bundle = GraphBundle::build(&s.catalog, 10).unwrap();
    let dims = EncoderDims {
        input: cfg.feature_dim,
        hidden: 64,
        output: 32,
    };
    let mut enc = GeometryEncoder::new(ManifoldSpec::spherical(1.0).unwrap(), dims, Activation::Relu, 3).unwrap();
    let trace = stage1_train(
        &mut enc,
        &bundle.spherical,
        &s.catalog.features,
        &s.targets.regression,
        &Stage1Config::default(),
        1,
    )
    .unwrap();
    let (first, last) = (trace.0[0].val_loss, trace.last().unwrap().val_loss);
    println!("spherical validation MSE {first:.4} -> {last:.4}");
    assert!(last < 0.25 * first, "stalled: {first} -> {last}");
    for w in trace.0.windows(21) {
        assert!(
            w[20].loss <= w[0].loss,
            "epoch {}: {} -> {}",
            w[0].epoch,
            w[0].loss,
            w[20].loss
        );
    }
    let limit = SPHERE_TANGENT_LIMIT * std::f64::consts::PI;
    let prompt = enc.encode(&s.catalog.features, &bundle.spherical).unwrap();
    assert!(prompt.rows().into_iter().all(|r| r.dot(&r).sqrt() <= limit + 1e-9));
}
