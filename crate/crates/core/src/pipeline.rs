//! Glue between the stages: per-geometry prompt pretraining and assembly of
//! the multi-modal dataset the host model trains on.

use ndarray::Array2;

use crate::encoder::{stage1_train, Activation, EncoderDims, GeometryEncoder, LossTrace, Stage1Config};
use crate::error::{GeoError, Result};
use crate::graph::{GraphBundle, Targets};
use crate::manifold::Geometry;
use crate::trainer::model::Dataset;

/// Geometry of each prompt modality, in dataset order.
pub const PROMPT_GEOMETRIES: [Geometry; 3] = [Geometry::Euclidean, Geometry::Hyperbolic, Geometry::Spherical];

/// Trains one encoder per geometry on the regression target. Every encoder
/// sees the same node split; initial weights differ per geometry.
pub fn train_prompt_encoders(
    bundle: &GraphBundle,
    features: &Array2<f64>,
    targets: &[f64],
    dims: EncoderDims,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Vec<(GeometryEncoder, LossTrace)>> {
    PROMPT_GEOMETRIES
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let graph = bundle.get(g);
            let mut enc = GeometryEncoder::new(graph.spec, dims, Activation::Relu, seed.wrapping_add(1 + i as u64))?;
            let trace = stage1_train(&mut enc, graph, features, targets, cfg, seed)
                .map_err(|e| e.context(format!("{g} prompt encoder")))?;
            Ok((enc, trace))
        })
        .collect()
}

/// Prompts from each encoder plus raw features, paired with the targets.
pub fn assemble_dataset(
    encoders: &[GeometryEncoder],
    bundle: &GraphBundle,
    features: &Array2<f64>,
    targets: &Targets,
) -> Result<Dataset> {
    if encoders.len() != PROMPT_GEOMETRIES.len() {
        return Err(GeoError::Validation(format!(
            "expected 3 encoders, got {}",
            encoders.len()
        )));
    }
    let prompt = |g: Geometry| -> Result<Array2<f64>> {
        let enc = encoders
            .iter()
            .find(|e| e.spec.kind() == g)
            .ok_or_else(|| GeoError::Validation(format!("no {g} encoder")))?;
        enc.encode(features, bundle.get(g))
    };
    let mods = [
        prompt(PROMPT_GEOMETRIES[0])?,
        prompt(PROMPT_GEOMETRIES[1])?,
        prompt(PROMPT_GEOMETRIES[2])?,
        features.clone(),
    ];
    Dataset::new(
        mods,
        targets.regression.clone(),
        targets.class.clone(),
        targets.n_classes(),
    )
}
