//! Synthetic sky catalogs with a known cluster hierarchy.
//!
//! Top-level clusters alternate between two kinds. Even-numbered clusters
//! are trees of sub-clusters `depth` levels deep; objects sit tightly around
//! leaves, carry the sum of their ancestors' signature vectors as features,
//! and have a tree-additive regression target. Odd-numbered clusters are one
//! broad blob whose features and target vary smoothly with sky position.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GeoError, Result};

use super::catalog::{vector_to_celestial, Catalog, Targets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub n_clusters: usize,
    pub depth: usize,
    pub feature_dim: usize,
    /// Children per internal tree node.
    pub branching: usize,
    /// Standard deviation of per-coordinate feature noise.
    pub feature_noise: f64,
    /// Standard deviation of additive target noise.
    pub target_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            n_clusters: 4,
            depth: 3,
            feature_dim: 1024,
            branching: 3,
            feature_noise: 1.0,
            target_noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.n < self.n_clusters {
            return Err(GeoError::Config(format!(
                "need n >= n_clusters >= 1, got n={}, n_clusters={}",
                self.n, self.n_clusters
            )));
        }
        if self.depth == 0 {
            return Err(GeoError::Config("depth must be at least 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(GeoError::Config("feature_dim must be at least 1".into()));
        }
        if self.branching == 0 {
            return Err(GeoError::Config("branching must be at least 1".into()));
        }
        if !(self.feature_noise >= 0.0 && self.target_noise >= 0.0) {
            return Err(GeoError::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCatalog {
    pub catalog: Catalog,
    pub targets: Targets,
    /// Whether each object belongs to a tree-structured cluster.
    pub hierarchical: Vec<bool>,
    /// Top-level cluster of each object.
    pub cluster: Vec<usize>,
}

/// Angular offset between a tree node and its parent, by level below the top.
fn level_radius(level: usize) -> f64 {
    0.12 * 0.4f64.powi(level as i32 - 1)
}

const FLAT_SPREAD: f64 = 0.12;
const MIN_CENTER_SEPARATION: f64 = 0.7;

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Orthonormal tangent basis at a unit vector.
fn tangent_basis(p: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if p[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let dot = a[0] * p[0] + a[1] * p[1] + a[2] * p[2];
    let e1 = normalize([a[0] - dot * p[0], a[1] - dot * p[1], a[2] - dot * p[2]]);
    let e2 = [
        p[1] * e1[2] - p[2] * e1[1],
        p[2] * e1[0] - p[0] * e1[2],
        p[0] * e1[1] - p[1] * e1[0],
    ];
    (e1, e2)
}

/// Moves `p` along the great circle with tangent `u1 e1 + u2 e2`.
fn offset(p: [f64; 3], u1: f64, u2: f64) -> [f64; 3] {
    let (e1, e2) = tangent_basis(p);
    let theta = (u1 * u1 + u2 * u2).sqrt();
    if theta == 0.0 {
        return p;
    }
    let (s, c) = theta.sin_cos();
    let t = |i: usize| (u1 * e1[i] + u2 * e2[i]) / theta;
    normalize([c * p[0] + s * t(0), c * p[1] + s * t(1), c * p[2] + s * t(2)])
}

fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

struct TreeNode {
    center: [f64; 3],
    signature: Vec<f64>,
    value: f64,
    children: Vec<usize>,
}

pub fn synth_catalog(seed: u64, cfg: &SynthConfig) -> Result<SynthCatalog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.feature_dim;
    let sig_scale = 1.0;

    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(cfg.n_clusters);
    for _ in 0..cfg.n_clusters {
        let mut best = None;
        for _ in 0..1000 {
            let g = gaussian_vec(&mut rng, 3);
            let c = normalize([g[0], g[1], g[2]]);
            let sep = centers.iter().map(|&o| angle(o, c)).fold(f64::INFINITY, f64::min);
            if sep >= MIN_CENTER_SEPARATION {
                best = Some(c);
                break;
            }
            if best.is_none() {
                best = Some(c);
            }
        }
        centers.push(best.expect("at least one draw"));
    }

    // one tree per top-level cluster; flat clusters are single-node trees
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut roots = Vec::with_capacity(cfg.n_clusters);
    let mut leaves: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_clusters);
    let mut flat_dirs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(cfg.n_clusters);
    for (ci, &center) in centers.iter().enumerate() {
        let hierarchical = ci % 2 == 0 && cfg.depth > 1;
        let root = nodes.len();
        nodes.push(TreeNode {
            center,
            signature: gaussian_vec(&mut rng, d).into_iter().map(|v| v * sig_scale).collect(),
            value: 2.0 * rng.sample::<f64, _>(StandardNormal),
            children: Vec::new(),
        });
        roots.push(root);
        let mut frontier = vec![root];
        if hierarchical {
            for level in 1..cfg.depth {
                let mut next = Vec::new();
                for &parent in &frontier {
                    for _ in 0..cfg.branching {
                        let r = level_radius(level);
                        let phi = rng.random_range(0.0..std::f64::consts::TAU);
                        let c = offset(nodes[parent].center, r * phi.cos(), r * phi.sin());
                        let w = 0.8f64.powi(level as i32);
                        let id = nodes.len();
                        nodes.push(TreeNode {
                            center: c,
                            signature: gaussian_vec(&mut rng, d)
                                .into_iter()
                                .map(|v| v * w * sig_scale)
                                .collect(),
                            value: 1.5 * 0.6f64.powi(level as i32) * rng.sample::<f64, _>(StandardNormal),
                            children: Vec::new(),
                        });
                        nodes[parent].children.push(id);
                        next.push(id);
                    }
                }
                frontier = next;
            }
        }
        leaves.push(frontier);
        flat_dirs.push((gaussian_vec(&mut rng, d), gaussian_vec(&mut rng, d)));
    }

    let mut parent = vec![usize::MAX; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        for &c in &node.children {
            parent[c] = i;
        }
    }

    let n = cfg.n;
    let mut ids = Vec::with_capacity(n);
    let mut ra = Vec::with_capacity(n);
    let mut dec = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, d));
    let mut regression = Vec::with_capacity(n);
    let mut class = Vec::with_capacity(n);
    let mut hierarchical = Vec::with_capacity(n);
    for i in 0..n {
        let ci = i % cfg.n_clusters;
        let is_tree = ci % 2 == 0 && cfg.depth > 1;
        let mut row = features.row_mut(i);
        let (pos, target) = if is_tree {
            let leaf = leaves[ci][rng.random_range(0..leaves[ci].len())];
            let scatter = 0.5 * level_radius(cfg.depth - 1) * 0.4;
            let u1 = scatter * rng.sample::<f64, _>(StandardNormal);
            let u2 = scatter * rng.sample::<f64, _>(StandardNormal);
            let mut t = 0.0;
            let mut node = leaf;
            loop {
                t += nodes[node].value;
                row.zip_mut_with(&ndarray::aview1(&nodes[node].signature), |a, &b| *a += b);
                if parent[node] == usize::MAX {
                    break;
                }
                node = parent[node];
            }
            (offset(nodes[leaf].center, u1, u2), t)
        } else {
            let root = roots[ci];
            let u1 = FLAT_SPREAD * rng.sample::<f64, _>(StandardNormal);
            let u2 = FLAT_SPREAD * rng.sample::<f64, _>(StandardNormal);
            let (a, b) = (u1 / FLAT_SPREAD, u2 / FLAT_SPREAD);
            let (p1, p2) = &flat_dirs[ci];
            for j in 0..d {
                row[j] += nodes[root].signature[j] + 0.5 * (a * p1[j] + b * p2[j]);
            }
            let t = nodes[root].value + 0.8 * (1.5 * a).sin() + 0.4 * b;
            (offset(nodes[root].center, u1, u2), t)
        };
        for v in row.iter_mut() {
            *v += cfg.feature_noise * rng.sample::<f64, _>(StandardNormal);
        }
        let (r, de) = vector_to_celestial(pos);
        ids.push(format!("obj{i:06}"));
        ra.push(r);
        dec.push(de);
        regression.push(target + cfg.target_noise * rng.sample::<f64, _>(StandardNormal));
        class.push(ci);
        hierarchical.push(is_tree);
    }

    let catalog = Catalog::new(ids.clone(), ra, dec, features)?;
    Ok(SynthCatalog {
        catalog,
        targets: Targets {
            ids,
            regression,
            class: class.clone(),
        },
        hierarchical,
        cluster: class,
    })
}
