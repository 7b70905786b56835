//! Per-object predictions on disk and their scoring against targets.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{GeoError, Result};
use crate::graph::Targets;
use crate::trainer::metrics::{f1_score, r2_score, F1Report};

/// `id,regression_pred,class_pred` rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub regression: Vec<f64>,
    pub class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub n: usize,
    pub r2: f64,
    pub f1: F1Report,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "id,regression_pred,class_pred")?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{}", self.ids[i], self.regression[i], self.class[i])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        if rdr.headers()?.iter().collect::<Vec<_>>() != ["id", "regression_pred", "class_pred"] {
            return Err(GeoError::Parse {
                line: 1,
                offset: 0,
                msg: "predictions header must be `id,regression_pred,class_pred`".into(),
            });
        }
        let mut p = Predictions::default();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |offset: usize| GeoError::Parse {
                line: row + 2,
                offset,
                msg: format!("bad field `{}`", &rec[offset]),
            };
            p.ids.push(rec[0].to_string());
            p.regression.push(rec[1].trim().parse().map_err(|_| bad(1))?);
            p.class.push(rec[2].trim().parse().map_err(|_| bad(2))?);
        }
        Ok(p)
    }

    /// Scores every prediction against the target with the same id. The
    /// class count is taken from the full target set.
    pub fn score(&self, targets: &Targets) -> Result<Scores> {
        if self.is_empty() {
            return Err(GeoError::EmptyInput("no predictions".into()));
        }
        let index: HashMap<&str, usize> = targets.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let rows = self
            .ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| GeoError::Validation(format!("no target for `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let reg: Vec<f64> = rows.iter().map(|&i| targets.regression[i]).collect();
        let cls: Vec<usize> = rows.iter().map(|&i| targets.class[i]).collect();
        let n_classes = targets.n_classes().max(self.class.iter().max().map_or(0, |m| m + 1));
        Ok(Scores {
            n: rows.len(),
            r2: r2_score(&self.regression, &reg)?,
            f1: f1_score(&self.class, &cls, n_classes)?,
        })
    }
}
