//! Regression and combined objectives.

use std::sync::Arc;

use ndarray::Array2;

use crate::autograd::{Tape, Var};

/// Smooth-L1 (Huber-style) loss: quadratic below `beta`, linear above.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let diff = (pred - target).abs();
    if diff < beta {
        0.5 * diff * diff / beta
    } else {
        diff - 0.5 * beta
    }
}

/// Class cross-entropy plus `lambda` times mean smooth-L1 on the tape.
/// A task without samples contributes nothing; at least one must be present.
pub fn combined_loss_on_tape(
    tape: &mut Tape,
    class: Option<(Var, Arc<Vec<usize>>)>,
    numeric: Option<(Var, Arc<Vec<f64>>)>,
    lambda: f64,
    beta: f64,
) -> Var {
    let ce = class
        .filter(|(_, t)| !t.is_empty())
        .map(|(l, t)| tape.cross_entropy(l, t));
    let reg = numeric
        .filter(|(_, t)| !t.is_empty())
        .map(|(p, t)| tape.smooth_l1(p, t, beta));
    match (ce, reg) {
        (Some(c), Some(r)) => {
            let r = tape.scale(r, lambda);
            tape.add(c, r)
        }
        (Some(c), None) => c,
        (None, Some(r)) => tape.scale(r, lambda),
        (None, None) => panic!("combined loss needs at least one task"),
    }
}

/// Plain-value form of [`combined_loss_on_tape`].
pub fn combined_loss(
    class_logits: &Array2<f64>,
    class_targets: &[usize],
    numeric_preds: &[f64],
    numeric_targets: &[f64],
    lambda: f64,
    beta: f64,
) -> f64 {
    let mut tape = Tape::new();
    let class =
        (!class_targets.is_empty()).then(|| (tape.constant(class_logits.clone()), Arc::new(class_targets.to_vec())));
    let numeric = (!numeric_targets.is_empty()).then(|| {
        let p = Array2::from_shape_vec((numeric_preds.len(), 1), numeric_preds.to_vec()).expect("column");
        (tape.constant(p), Arc::new(numeric_targets.to_vec()))
    });
    let l = combined_loss_on_tape(&mut tape, class, numeric, lambda, beta);
    tape.scalar_value(l)
}
