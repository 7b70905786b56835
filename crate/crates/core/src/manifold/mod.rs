//! Constant-curvature manifold kernels.
//!
//! Hyperbolic space uses the Lorentz (hyperboloid) model
//! `{x in R^{d+1} : <x,x>_L = 1/c, x_0 > 0}` with `c < 0`; spherical space is
//! `{x in R^{d+1} : <x,x> = 1/c}` with `c > 0`. Euclidean space is plain
//! `R^d` with `c = 0`. The Poincare-ball origin maps used by the hyperbolic
//! expert live in [`poincare`].

pub mod batch;
pub mod poincare;
pub mod special;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{GeoError, Result};
use special::{asinhc, sinc, sinhc};

pub use poincare::{mobius_add, mobius_matvec, poincare_exp0, poincare_log0};

/// Tolerance for the on-manifold constraint, relative to the squared norm.
pub const POINT_TOL: f64 = 1e-9;
/// Tangency residual accepted by [`exp_map`].
pub const TANGENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Euclidean,
    Hyperbolic,
    Spherical,
}

impl Geometry {
    pub const ALL: [Geometry; 3] = [Geometry::Euclidean, Geometry::Hyperbolic, Geometry::Spherical];

    pub fn name(self) -> &'static str {
        match self {
            Geometry::Euclidean => "euclidean",
            Geometry::Hyperbolic => "hyperbolic",
            Geometry::Spherical => "spherical",
        }
    }

    /// One-letter tag used in file names and reports.
    pub fn tag(self) -> &'static str {
        match self {
            Geometry::Euclidean => "E",
            Geometry::Hyperbolic => "H",
            Geometry::Spherical => "S",
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Geometry {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Geometry::Euclidean),
            "hyperbolic" => Ok(Geometry::Hyperbolic),
            "spherical" => Ok(Geometry::Spherical),
            other => Err(GeoError::InvalidSpec(format!("unknown geometry `{other}`"))),
        }
    }
}

/// A geometry together with its curvature. The sign of the curvature is
/// checked against the kind on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct ManifoldSpec {
    kind: Geometry,
    curvature: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    kind: Geometry,
    curvature: f64,
}

impl TryFrom<RawSpec> for ManifoldSpec {
    type Error = GeoError;
    fn try_from(raw: RawSpec) -> Result<Self> {
        ManifoldSpec::new(raw.kind, raw.curvature)
    }
}

impl From<ManifoldSpec> for RawSpec {
    fn from(s: ManifoldSpec) -> Self {
        RawSpec {
            kind: s.kind,
            curvature: s.curvature,
        }
    }
}

impl ManifoldSpec {
    pub fn new(kind: Geometry, curvature: f64) -> Result<Self> {
        let ok = curvature.is_finite()
            && match kind {
                Geometry::Euclidean => curvature == 0.0,
                Geometry::Hyperbolic => curvature < 0.0,
                Geometry::Spherical => curvature > 0.0,
            };
        if !ok {
            return Err(GeoError::InvalidSpec(format!(
                "{kind} geometry cannot have curvature {curvature}"
            )));
        }
        Ok(Self { kind, curvature })
    }

    pub fn euclidean() -> Self {
        Self {
            kind: Geometry::Euclidean,
            curvature: 0.0,
        }
    }

    pub fn hyperbolic(c: f64) -> Result<Self> {
        Self::new(Geometry::Hyperbolic, c)
    }

    pub fn spherical(c: f64) -> Result<Self> {
        Self::new(Geometry::Spherical, c)
    }

    /// The manifold used throughout the graph side for a geometry: unit
    /// curvature magnitude.
    pub fn unit(kind: Geometry) -> Self {
        let curvature = match kind {
            Geometry::Euclidean => 0.0,
            Geometry::Hyperbolic => -1.0,
            Geometry::Spherical => 1.0,
        };
        Self { kind, curvature }
    }

    pub fn kind(&self) -> Geometry {
        self.kind
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    /// `sqrt(|c|)`.
    pub fn sqrt_abs_c(&self) -> f64 {
        self.curvature.abs().sqrt()
    }

    /// Ambient coordinate count for an intrinsic dimension.
    pub fn ambient_dim(&self, dim: usize) -> usize {
        match self.kind {
            Geometry::Euclidean => dim,
            _ => dim + 1,
        }
    }

    /// Intrinsic dimension for an ambient coordinate count.
    pub fn intrinsic_dim(&self, ambient: usize) -> usize {
        match self.kind {
            Geometry::Euclidean => ambient,
            _ => ambient.saturating_sub(1),
        }
    }

    /// The inner product the manifold is embedded with.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            Geometry::Hyperbolic => lorentz_dot(x, y),
            _ => dot(x, y),
        }
    }
}

impl fmt::Display for ManifoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(c={})", self.kind, self.curvature)
    }
}

/// A point on a manifold, in ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: Vec<f64>,
    spec: ManifoldSpec,
}

impl Point {
    /// Validates the on-manifold constraint (and the upper sheet for the
    /// hyperboloid).
    pub fn new(spec: ManifoldSpec, coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Validation("non-finite point coordinate".into()));
        }
        match spec.kind {
            Geometry::Euclidean => {}
            Geometry::Hyperbolic | Geometry::Spherical => {
                if coords.len() < 2 {
                    return Err(GeoError::Dimension {
                        expected: 2,
                        got: coords.len(),
                    });
                }
                let residual = constraint_residual(&spec, &coords);
                if residual > POINT_TOL {
                    return Err(GeoError::OffManifold { residual });
                }
                if spec.kind == Geometry::Hyperbolic && coords[0] <= 0.0 {
                    return Err(GeoError::Validation("point lies on the lower sheet".into()));
                }
            }
        }
        Ok(Self { coords, spec })
    }

    pub(crate) fn new_unchecked(spec: ManifoldSpec, coords: Vec<f64>) -> Self {
        Self { coords, spec }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn spec(&self) -> ManifoldSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// `|<x,x> - 1/c|` scaled by the size of the coordinates, so that far-out
/// hyperboloid points are judged relative to their magnitude.
pub fn constraint_residual(spec: &ManifoldSpec, coords: &[f64]) -> f64 {
    match spec.kind {
        Geometry::Euclidean => 0.0,
        _ => {
            let target = 1.0 / spec.curvature;
            let scale = 1.0 + coords.iter().map(|v| v * v).sum::<f64>() * spec.curvature.abs();
            (spec.inner(coords, coords) - target).abs() * spec.curvature.abs() / scale
        }
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    base: Point,
    vec: Vec<f64>,
}

impl Tangent {
    pub fn new(base: Point, vec: Vec<f64>) -> Result<Self> {
        check_len(base.dim(), vec.len())?;
        let residual = tangency_residual(&base, &vec);
        if residual > TANGENT_TOL {
            return Err(GeoError::InvalidTangent { residual });
        }
        Ok(Self { base, vec })
    }

    pub fn zero(base: Point) -> Self {
        let vec = vec![0.0; base.dim()];
        Self { base, vec }
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }

    /// Norm under the manifold metric.
    pub fn norm(&self) -> f64 {
        metric_norm(&self.base.spec, &self.vec)
    }
}

fn tangency_residual(base: &Point, vec: &[f64]) -> f64 {
    let spec = base.spec;
    match spec.kind {
        Geometry::Euclidean => 0.0,
        _ => {
            let scale = (1.0 + norm_sq(base.coords()) * spec.curvature.abs()).sqrt() * (1.0 + norm_sq(vec)).sqrt();
            spec.inner(base.coords(), vec).abs() * spec.sqrt_abs_c() / scale
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(GeoError::Dimension { expected, got });
    }
    Ok(())
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    norm_sq(x).sqrt()
}

fn lorentz_dot(x: &[f64], y: &[f64]) -> f64 {
    -x[0] * y[0] + dot(&x[1..], &y[1..])
}

fn metric_norm(spec: &ManifoldSpec, v: &[f64]) -> f64 {
    spec.inner(v, v).max(0.0).sqrt()
}

/// The manifold origin: the zero vector, or `(1/sqrt|c|, 0, ..., 0)` for
/// curved spaces.
pub fn origin(spec: ManifoldSpec, dim: usize) -> Result<Point> {
    if dim == 0 {
        return Err(GeoError::Validation("origin dimension must be at least 1".into()));
    }
    // re-validate in case the manifold was built through a path that skipped it
    let spec = ManifoldSpec::new(spec.kind, spec.curvature)?;
    let mut coords = vec![0.0; spec.ambient_dim(dim)];
    if spec.kind != Geometry::Euclidean {
        coords[0] = 1.0 / spec.sqrt_abs_c();
    }
    Ok(Point::new_unchecked(spec, coords))
}

/// Minkowski inner product `-x_1 y_1 + sum_{j>=2} x_j y_j`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(GeoError::Dimension {
            expected: 2,
            got: x.len(),
        });
    }
    Ok(lorentz_dot(x, y))
}

/// Standard inner product of the spherical embedding.
pub fn sphere_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    Ok(dot(x, y))
}

/// Geodesic step from `p` along `v`.
pub fn exp_map(p: &Point, v: &Tangent) -> Result<Point> {
    if v.base.coords != p.coords || v.base.spec != p.spec {
        return Err(GeoError::Validation(
            "tangent vector is based at a different point".into(),
        ));
    }
    let residual = tangency_residual(p, &v.vec);
    if residual > TANGENT_TOL {
        return Err(GeoError::InvalidTangent { residual });
    }
    Ok(exp_unchecked(p, &v.vec))
}

pub(crate) fn exp_unchecked(p: &Point, v: &[f64]) -> Point {
    let spec = p.spec;
    let coords = match spec.kind {
        Geometry::Euclidean => p.coords.iter().zip(v).map(|(a, b)| a + b).collect(),
        Geometry::Hyperbolic => {
            let theta = spec.sqrt_abs_c() * metric_norm(&spec, v);
            if theta == 0.0 {
                return p.clone();
            }
            let (a, b) = (theta.cosh(), sinhc(theta));
            p.coords.iter().zip(v).map(|(x, t)| a * x + b * t).collect()
        }
        Geometry::Spherical => {
            let theta = spec.sqrt_abs_c() * metric_norm(&spec, v);
            if theta == 0.0 {
                return p.clone();
            }
            let (a, b) = (theta.cos(), sinc(theta));
            p.coords.iter().zip(v).map(|(x, t)| a * x + b * t).collect()
        }
    };
    Point::new_unchecked(spec, coords)
}

/// Inverse of [`exp_map`]: the tangent at `p` pointing at `x` whose metric
/// norm is the geodesic distance.
pub fn log_map(p: &Point, x: &Point) -> Result<Tangent> {
    if p.spec != x.spec {
        return Err(GeoError::Validation("points live on different manifolds".into()));
    }
    check_len(p.dim(), x.dim())?;
    let spec = p.spec;
    let vec = match spec.kind {
        Geometry::Euclidean => x.coords.iter().zip(&p.coords).map(|(a, b)| a - b).collect(),
        Geometry::Hyperbolic => {
            let alpha = spec.curvature * lorentz_dot(&p.coords, &x.coords);
            let w: Vec<f64> = x.coords.iter().zip(&p.coords).map(|(a, b)| a - alpha * b).collect();
            let s = spec.sqrt_abs_c() * metric_norm(&spec, &w);
            let f = asinhc(s);
            w.into_iter().map(|t| f * t).collect()
        }
        Geometry::Spherical => {
            let sk = spec.sqrt_abs_c();
            if geodesic_distance(p, x)? >= std::f64::consts::PI / sk - 1e-9 {
                return Err(GeoError::UndefinedLog);
            }
            let cos = spec.curvature * dot(&p.coords, &x.coords);
            let w: Vec<f64> = x.coords.iter().zip(&p.coords).map(|(a, b)| a - cos * b).collect();
            let sin = sk * norm(&w);
            let theta = sin.atan2(cos);
            // theta / sin, which tends to 1 as the points meet
            let f = if sin < 1e-300 { 1.0 } else { theta / sin };
            w.into_iter().map(|t| f * t).collect()
        }
    };
    Ok(Tangent { base: p.clone(), vec })
}

/// Geodesic distance. Hyperbolic: `arccosh(c <x,y>_L) / sqrt(-c)`;
/// spherical: `arccos(c <x,y>) / sqrt(c)`; Euclidean: straight-line norm.
/// Near the ill-conditioned ends of arccosh/arccos the equivalent chordal
/// form `2 asinh(sqrt|c| |x-y| / 2)` (resp. `2 asin`) is used.
pub fn geodesic_distance(x: &Point, y: &Point) -> Result<f64> {
    if x.spec != y.spec {
        return Err(GeoError::Validation("points live on different manifolds".into()));
    }
    check_len(x.dim(), y.dim())?;
    Ok(distance_unchecked(&x.spec, &x.coords, &y.coords))
}

pub(crate) fn distance_unchecked(spec: &ManifoldSpec, x: &[f64], y: &[f64]) -> f64 {
    match spec.kind {
        Geometry::Euclidean => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        Geometry::Hyperbolic => {
            let sk = spec.sqrt_abs_c();
            let arg = (spec.curvature * lorentz_dot(x, y)).max(1.0);
            if arg > 1.0 + 1e-4 {
                arg.acosh() / sk
            } else {
                let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let chord = lorentz_dot(&diff, &diff).max(0.0).sqrt();
                2.0 * (sk * chord / 2.0).asinh() / sk
            }
        }
        Geometry::Spherical => {
            let sk = spec.sqrt_abs_c();
            let arg = (spec.curvature * dot(x, y)).clamp(-1.0, 1.0);
            if arg.abs() < 0.9 {
                arg.acos() / sk
            } else if arg > 0.0 {
                let chord = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                2.0 * (sk * chord / 2.0).min(1.0).asin() / sk
            } else {
                let chord = x.iter().zip(y).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
                (std::f64::consts::PI - 2.0 * (sk * chord / 2.0).min(1.0).asin()) / sk
            }
        }
    }
}

/// Removes the normal component of `w` at `p`.
pub fn project_to_tangent(p: &Point, w: &[f64]) -> Result<Tangent> {
    check_len(p.dim(), w.len())?;
    let spec = p.spec;
    let vec = match spec.kind {
        Geometry::Euclidean => w.to_vec(),
        _ => {
            let coef = spec.curvature * spec.inner(&p.coords, w);
            w.iter().zip(&p.coords).map(|(a, b)| a - coef * b).collect()
        }
    };
    Ok(Tangent { base: p.clone(), vec })
}
