//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use geowalk::manifold::{Geometry, ManifoldSpec, Point};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Closed-form geodesic distance straight from the ambient inner products.
pub fn oracle_distance(kind: Geometry, c: f64, x: &[f64], y: &[f64]) -> f64 {
    match kind {
        Geometry::Euclidean => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        Geometry::Hyperbolic => {
            let mut ip = -x[0] * y[0];
            for i in 1..x.len() {
                ip += x[i] * y[i];
            }
            (c * ip).max(1.0).acosh() / (-c).sqrt()
        }
        Geometry::Spherical => {
            let ip: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            (c * ip).clamp(-1.0, 1.0).acos() / c.sqrt()
        }
    }
}

/// O(n^2) k-NN with `(distance, index)` ordering.
pub fn brute_knn(points: &[Vec<f64>], kind: Geometry, c: f64, k: usize) -> Vec<Vec<(usize, f64)>> {
    (0..points.len())
        .map(|i| {
            let mut row: Vec<(usize, f64)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| (j, oracle_distance(kind, c, &points[i], &points[j])))
                .collect();
            row.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            row.truncate(k);
            row
        })
        .collect()
}

/// Random point on the manifold built by hand from a spatial part.
pub fn random_point(spec: ManifoldSpec, dim: usize, scale: f64, r: &mut ChaCha8Rng) -> Point {
    let s: Vec<f64> = (0..dim).map(|_| r.random_range(-scale..scale)).collect();
    let c = spec.curvature();
    let coords = match spec.kind() {
        Geometry::Euclidean => s,
        Geometry::Hyperbolic => {
            let sq: f64 = s.iter().map(|v| v * v).sum();
            let mut v = vec![(sq - 1.0 / c).sqrt()];
            v.extend(s);
            v
        }
        Geometry::Spherical => {
            // uniform direction scaled onto the sphere of radius 1/sqrt(c)
            let mut v: Vec<f64> = (0..=dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= n * c.sqrt();
            }
            v
        }
    };
    Point::new(spec, coords).expect("constructed on the manifold")
}

pub fn specs() -> Vec<ManifoldSpec> {
    vec![
        ManifoldSpec::euclidean(),
        ManifoldSpec::hyperbolic(-1.0).unwrap(),
        ManifoldSpec::spherical(1.0).unwrap(),
    ]
}
