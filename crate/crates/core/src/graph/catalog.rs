//! Object catalogs: identifiers, sky positions and node features.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{GeoError, Result};
use crate::manifold::{exp_map, origin, project_to_tangent, Geometry, ManifoldSpec, Point};

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub ids: Vec<String>,
    /// Right ascension in degrees, `[0, 360)`.
    pub ra: Vec<f64>,
    /// Declination in degrees, `[-90, 90]`.
    pub dec: Vec<f64>,
    /// `n x d` node features.
    pub features: Array2<f64>,
}

impl Catalog {
    pub fn new(ids: Vec<String>, ra: Vec<f64>, dec: Vec<f64>, features: Array2<f64>) -> Result<Self> {
        let cat = Self { ids, ra, dec, features };
        cat.validate()?;
        Ok(cat)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if n == 0 {
            return Err(GeoError::Validation("catalog is empty".into()));
        }
        if self.ra.len() != n || self.dec.len() != n || self.features.nrows() != n {
            return Err(GeoError::Validation(format!(
                "catalog columns disagree: {} ids, {} ra, {} dec, {} feature rows",
                n,
                self.ra.len(),
                self.dec.len(),
                self.features.nrows()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(GeoError::Validation(format!("duplicate id `{id}`")));
            }
        }
        for (i, (&ra, &dec)) in self.ra.iter().zip(&self.dec).enumerate() {
            check_coords(ra, dec).map_err(|e| e.context(format!("object `{}`", self.ids[i])))?;
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Validation("non-finite feature value".into()));
        }
        Ok(())
    }

    /// Unit direction vector of every object.
    pub fn directions(&self) -> Result<Vec<[f64; 3]>> {
        self.ra
            .iter()
            .zip(&self.dec)
            .map(|(&ra, &dec)| celestial_to_vector(ra, dec))
            .collect()
    }

    /// Writes `id,ra,dec,f0..f{d-1}` with shortest round-trip decimals.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "id,ra,dec")?;
        for j in 0..self.feature_dim() {
            write!(w, ",f{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{},{},{}", self.ids[i], self.ra[i], self.dec[i])?;
            for v in self.features.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "ra" || &headers[2] != "dec" {
            return Err(GeoError::Parse {
                line: 1,
                offset: 0,
                msg: "catalog header must start with `id,ra,dec`".into(),
            });
        }
        for (j, h) in headers.iter().skip(3).enumerate() {
            if h != format!("f{j}") {
                return Err(GeoError::Parse {
                    line: 1,
                    offset: 0,
                    msg: format!("expected feature column `f{j}`, found `{h}`"),
                });
            }
        }
        let d = headers.len() - 3;
        let (mut ids, mut ra, mut dec, mut feats) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            if rec.len() != d + 3 {
                return Err(GeoError::Parse {
                    line,
                    offset: 0,
                    msg: format!("expected {} fields, found {}", d + 3, rec.len()),
                });
            }
            ids.push(rec[0].to_string());
            ra.push(parse_f64(&rec[1], line, 1)?);
            dec.push(parse_f64(&rec[2], line, 2)?);
            for j in 0..d {
                feats.push(parse_f64(&rec[j + 3], line, j + 3)?);
            }
        }
        let n = ids.len();
        let features = Array2::from_shape_vec((n, d), feats).expect("row lengths checked");
        Catalog::new(ids, ra, dec, features)
    }
}

pub(crate) fn parse_f64(s: &str, line: usize, field: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| GeoError::Parse {
        line,
        offset: field,
        msg: format!("field {field}: `{s}` is not a number"),
    })
}

fn check_coords(ra: f64, dec: f64) -> Result<()> {
    if !(0.0..360.0).contains(&ra) {
        return Err(GeoError::Validation(format!("RA {ra} outside [0, 360)")));
    }
    if !(-90.0..=90.0).contains(&dec) {
        return Err(GeoError::Validation(format!("DEC {dec} outside [-90, 90]")));
    }
    Ok(())
}

/// `(cos dec cos ra, cos dec sin ra, sin dec)` for angles in degrees.
pub fn celestial_to_vector(ra: f64, dec: f64) -> Result<[f64; 3]> {
    check_coords(ra, dec)?;
    let (ra, dec) = (ra.to_radians(), dec.to_radians());
    let (sd, cd) = dec.sin_cos();
    let (sr, cr) = ra.sin_cos();
    Ok([cd * cr, cd * sr, sd])
}

/// Inverse of [`celestial_to_vector`] for a nonzero 3-vector.
pub fn vector_to_celestial(v: [f64; 3]) -> (f64, f64) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let dec = (v[2] / n).clamp(-1.0, 1.0).asin().to_degrees();
    let mut ra = v[1].atan2(v[0]).to_degrees();
    if ra < 0.0 {
        ra += 360.0;
    }
    if ra >= 360.0 {
        ra = 0.0;
    }
    (ra, dec)
}

/// Maps every object's direction into the geometry: the unit vector is a
/// tangent at the origin, pushed onto the manifold with the exponential map.
pub fn embed_coordinates(catalog: &Catalog, spec: ManifoldSpec) -> Result<Vec<Point>> {
    let dirs = catalog.directions()?;
    if spec.kind() == Geometry::Euclidean {
        return dirs.into_iter().map(|d| Point::new(spec, d.to_vec())).collect();
    }
    let o = origin(spec, 3)?;
    dirs.into_iter()
        .map(|d| {
            let t = project_to_tangent(&o, &[0.0, d[0], d[1], d[2]])?;
            exp_map(&o, &t)
        })
        .collect()
}

/// `id,regression_target,class_target` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub ids: Vec<String>,
    pub regression: Vec<f64>,
    pub class: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class.iter().max().map_or(0, |m| m + 1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "id,regression_target,class_target")?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{}", self.ids[i], self.regression[i], self.class[i])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "regression_target", "class_target"] {
            return Err(GeoError::Parse {
                line: 1,
                offset: 0,
                msg: "targets header must be `id,regression_target,class_target`".into(),
            });
        }
        let mut t = Targets {
            ids: Vec::new(),
            regression: Vec::new(),
            class: Vec::new(),
        };
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            t.ids.push(rec[0].to_string());
            t.regression.push(parse_f64(&rec[1], line, 1)?);
            t.class.push(rec[2].trim().parse().map_err(|_| GeoError::Parse {
                line,
                offset: 2,
                msg: format!("class `{}` is not a non-negative integer", &rec[2]),
            })?);
        }
        Ok(t)
    }

    /// Checks that the targets line up with a catalog, id for id.
    pub fn check_aligned(&self, catalog: &Catalog) -> Result<()> {
        if self.ids != catalog.ids {
            return Err(GeoError::Validation(
                "target ids do not match catalog ids (same order required)".into(),
            ));
        }
        Ok(())
    }
}
