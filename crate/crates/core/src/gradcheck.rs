//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `tensor[row,col]` of the worst entry.
    pub worst: String,
    pub entries: usize,
    pub tensors: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences with step `h` for every trainable tensor of `store`.
/// At most `max_per_tensor` entries of each tensor are probed, evenly spaced.
pub fn grad_check(
    store: &ParamStore,
    h: f64,
    max_per_tensor: usize,
    f: impl Fn(&mut Tape, &Bound) -> Var,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound);
    let grads = tape.backward(out);

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let o = f(&mut t, &b);
        t.scalar_value(o)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        entries: 0,
        tensors: 0,
    };
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        report.tensors += 1;
        let len = p.value.len();
        let count = len.min(max_per_tensor.max(1));
        let analytic = grads.get(bound[id]);
        for s in 0..count {
            let flat = s * len / count;
            let (r, c) = (flat / p.value.ncols(), flat % p.value.ncols());
            let orig = p.value[[r, c]];
            probe.get_mut(id)[[r, c]] = orig + h;
            let up = eval(&probe);
            probe.get_mut(id)[[r, c]] = orig - h;
            let down = eval(&probe);
            probe.get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[[r, c]]);
            let e = rel_err(a, numeric);
            report.entries += 1;
            if report.worst.is_empty() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{r},{c}] analytic {a:e} numeric {numeric:e}", p.name);
            }
        }
    }
    report
}
