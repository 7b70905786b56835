//! Relational graphs over catalog objects, one per geometry.

mod catalog;
mod io;
mod knn;
mod synth;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{GeoError, Result};
use crate::manifold::{Geometry, ManifoldSpec};

pub use catalog::{celestial_to_vector, embed_coordinates, vector_to_celestial, Catalog, Targets};
pub use io::{load_graph, parse_graph, render_graph, save_graph, GRAPH_MAGIC, GRAPH_VERSION};
pub use knn::{knn_graph, knn_graph_with, KnnStrategy, BRUTE_FORCE_LIMIT};
pub use synth::{synth_catalog, SynthCatalog, SynthConfig};

/// Directed k-NN lists: `neighbors[i]` holds `(j, distance)` sorted by
/// `(distance, j)`, never containing `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalGraph {
    pub spec: ManifoldSpec,
    pub k: usize,
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl RelationalGraph {
    pub(crate) fn from_parts(spec: ManifoldSpec, k: usize, neighbors: Vec<Vec<(usize, f64)>>) -> Self {
        Self { spec, k, neighbors }
    }

    /// Builds a graph from explicit lists, checking every invariant.
    pub fn new(spec: ManifoldSpec, k: usize, neighbors: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let g = Self { spec, k, neighbors };
        g.validate()?;
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        for (i, list) in self.neighbors.iter().enumerate() {
            if n > self.k && list.len() != self.k {
                return Err(GeoError::Validation(format!(
                    "node {i} has {} neighbors, expected {}",
                    list.len(),
                    self.k
                )));
            }
            for (pos, &(j, d)) in list.iter().enumerate() {
                if j == i {
                    return Err(GeoError::Validation(format!("self-loop at node {i}")));
                }
                if j >= n {
                    return Err(GeoError::Validation(format!("node {i}: neighbor {j} out of range")));
                }
                if !(d >= 0.0 && d.is_finite()) {
                    return Err(GeoError::Validation(format!("node {i}: bad distance {d}")));
                }
                if pos > 0 && list[pos - 1].1 > d {
                    return Err(GeoError::Validation(format!("node {i}: distances not sorted")));
                }
            }
        }
        Ok(())
    }

    /// Neighbor indices without distances, shared for message passing.
    pub fn adjacency(&self) -> Arc<Vec<Vec<usize>>> {
        Arc::new(
            self.neighbors
                .iter()
                .map(|l| l.iter().map(|&(j, _)| j).collect())
                .collect(),
        )
    }

    pub fn directed_edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Number of distinct `{i, j}` pairs after collapsing mutual edges.
    pub fn undirected_edge_count(&self) -> usize {
        let mut set = BTreeSet::new();
        for (i, l) in self.neighbors.iter().enumerate() {
            for &(j, _) in l {
                set.insert((i.min(j), i.max(j)));
            }
        }
        set.len()
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let mut neighbors = vec![Vec::new(); self.n()];
        for (i, l) in self.neighbors.iter().enumerate() {
            neighbors[perm[i]] = l.iter().map(|&(j, d)| (perm[j], d)).collect();
        }
        Self {
            spec: self.spec,
            k: self.k,
            neighbors,
        }
    }
}

/// The three graphs over one node set.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    pub euclidean: RelationalGraph,
    pub hyperbolic: RelationalGraph,
    pub spherical: RelationalGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphStats {
    pub geometry: String,
    pub nodes: usize,
    pub k: usize,
    pub directed_edges: usize,
    pub undirected_edges: usize,
}

impl GraphBundle {
    pub fn new(euclidean: RelationalGraph, hyperbolic: RelationalGraph, spherical: RelationalGraph) -> Result<Self> {
        let b = Self {
            euclidean,
            hyperbolic,
            spherical,
        };
        for kind in Geometry::ALL {
            let g = b.get(kind);
            if g.spec.kind() != kind {
                return Err(GeoError::Validation(format!(
                    "{kind} slot holds a {} graph",
                    g.spec.kind()
                )));
            }
            if g.n() != b.euclidean.n() {
                return Err(GeoError::Validation(format!(
                    "{kind} graph has {} nodes, euclidean has {}",
                    g.n(),
                    b.euclidean.n()
                )));
            }
        }
        Ok(b)
    }

    /// Embeds the catalog in all three unit-curvature geometries and links
    /// each object to its `k` nearest neighbors.
    pub fn build(catalog: &Catalog, k: usize) -> Result<Self> {
        Self::build_with(catalog, k, |g| ManifoldSpec::unit(g))
    }

    pub fn build_with(catalog: &Catalog, k: usize, spec_for: impl Fn(Geometry) -> ManifoldSpec) -> Result<Self> {
        let mut graphs = Geometry::ALL.into_iter().map(|g| {
            let spec = spec_for(g);
            let pts = embed_coordinates(catalog, spec)?;
            knn_graph(&pts, spec, k).map_err(|e| e.context(format!("{g} graph")))
        });
        let e = graphs.next().expect("three geometries")?;
        let h = graphs.next().expect("three geometries")?;
        let s = graphs.next().expect("three geometries")?;
        Self::new(e, h, s)
    }

    pub fn get(&self, kind: Geometry) -> &RelationalGraph {
        match kind {
            Geometry::Euclidean => &self.euclidean,
            Geometry::Hyperbolic => &self.hyperbolic,
            Geometry::Spherical => &self.spherical,
        }
    }

    pub fn n(&self) -> usize {
        self.euclidean.n()
    }

    pub fn stats(&self) -> Vec<GraphStats> {
        Geometry::ALL
            .into_iter()
            .map(|kind| {
                let g = self.get(kind);
                GraphStats {
                    geometry: kind.name().to_string(),
                    nodes: g.n(),
                    k: g.k,
                    directed_edges: g.directed_edge_count(),
                    undirected_edges: g.undirected_edge_count(),
                }
            })
            .collect()
    }
}
