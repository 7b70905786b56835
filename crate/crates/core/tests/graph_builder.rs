mod common;

use common::{brute_knn, random_point, rng, specs};
use geowalk::graph::*;
use geowalk::manifold::{Geometry, ManifoldSpec};
use proptest::prelude::*;

fn assert_matches_oracle(g: &RelationalGraph, oracle: &[Vec<(usize, f64)>]) {
    for (i, (got, want)) in g.neighbors.iter().zip(oracle).enumerate() {
        let a: Vec<usize> = got.iter().map(|p| p.0).collect();
        let b: Vec<usize> = want.iter().map(|p| p.0).collect();
        assert_eq!(a, b, "node {i}");
        for (x, y) in got.iter().zip(want) {
            assert!((x.1 - y.1).abs() <= 1e-12, "node {i}: {} vs {}", x.1, y.1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn knn_equals_brute_force(seed in 0u64..1_000_000, n in 2usize..120, k_frac in 0.0f64..1.0, which in 0usize..3) {
        let spec = specs()[which];
        let mut r = rng(seed);
        let pts: Vec<_> = (0..n).map(|_| random_point(spec, 3, 1.5, &mut r)).collect();
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let coords: Vec<Vec<f64>> = pts.iter().map(|p| p.coords().to_vec()).collect();
        let oracle = brute_knn(&coords, spec.kind(), spec.curvature(), k);
        for strat in [KnnStrategy::BruteForce, KnnStrategy::VpTree] {
            let g = knn_graph_with(&pts, spec, k, strat).unwrap();
            g.validate().unwrap();
            assert_matches_oracle(&g, &oracle);
        }
    }
}

#[test]
fn complete_graph_at_k_n_minus_1() {
    let spec = ManifoldSpec::hyperbolic(-2.0).unwrap();
    let mut r = rng(1);
    let pts: Vec<_> = (0..9).map(|_| random_point(spec, 2, 1.0, &mut r)).collect();
    let g = knn_graph(&pts, spec, 8).unwrap();
    assert_eq!(g.undirected_edge_count(), 9 * 8 / 2);
}

#[test]
fn spherical_embedding_preserves_angular_neighbors() {
    let s = synth_catalog(
        4,
        &SynthConfig {
            n: 300,
            feature_dim: 2,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let spec = ManifoldSpec::spherical(1.0).unwrap();
    let g = knn_graph(&embed_coordinates(&s.catalog, spec).unwrap(), spec, 10).unwrap();
    // angular separation from (ra, dec) via the haversine form
    let rad: Vec<(f64, f64)> = s
        .catalog
        .ra
        .iter()
        .zip(&s.catalog.dec)
        .map(|(a, d)| (a.to_radians(), d.to_radians()))
        .collect();
    let sep = |i: usize, j: usize| {
        let (a1, d1) = rad[i];
        let (a2, d2) = rad[j];
        let h = ((d2 - d1) / 2.0).sin().powi(2) + d1.cos() * d2.cos() * ((a2 - a1) / 2.0).sin().powi(2);
        2.0 * h.sqrt().min(1.0).asin()
    };
    for i in 0..300 {
        let mut row: Vec<(usize, f64)> = (0..300).filter(|&j| j != i).map(|j| (j, sep(i, j))).collect();
        row.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let want: std::collections::BTreeSet<usize> = row[..10].iter().map(|p| p.0).collect();
        let got: std::collections::BTreeSet<usize> = g.neighbors[i].iter().map(|p| p.0).collect();
        assert_eq!(got, want, "node {i}");
    }
}

#[test]
fn bundle_and_determinism() {
    let cfg = SynthConfig {
        n: 50,
        feature_dim: 4,
        ..SynthConfig::default()
    };
    let s = synth_catalog(7, &cfg).unwrap();
    let b = GraphBundle::build(&s.catalog, 5).unwrap();
    for kind in Geometry::ALL {
        assert_eq!(b.get(kind).n(), 50);
        assert!(b.get(kind).neighbors.iter().all(|l| l.len() == 5));
    }
    let again = GraphBundle::build(&synth_catalog(7, &cfg).unwrap().catalog, 5).unwrap();
    for kind in Geometry::ALL {
        assert_eq!(render_graph(b.get(kind)), render_graph(again.get(kind)));
    }
    let stats = b.stats();
    assert_eq!(stats.len(), 3);
    assert!(stats
        .iter()
        .all(|s| s.nodes == 50 && s.k == 5 && s.undirected_edges <= 250));
}

#[test]
fn synth_csv_is_byte_identical_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n: 80,
        feature_dim: 6,
        ..SynthConfig::default()
    };
    let write = |name: &str| {
        let s = synth_catalog(7, &cfg).unwrap();
        let p = dir.path().join(name);
        s.catalog.write_csv(&p).unwrap();
        (s, std::fs::read(&p).unwrap(), p)
    };
    let (s, a, p) = write("a.csv");
    let (_, b, _) = write("b.csv");
    assert_eq!(a, b);
    assert_eq!(Catalog::read_csv(&p).unwrap(), s.catalog);
}
