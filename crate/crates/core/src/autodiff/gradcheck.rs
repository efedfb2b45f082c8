//! Central finite-difference checks against tape gradients.

use super::{NodeId, ParamStore, Tape, Tensor, TensorError};

/// Denominator floor for relative errors, so that gradients that are zero
/// up to rounding do not blow the ratio up.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat entry)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Set when `max_rel_error` exceeds the threshold the check ran with.
    pub flagged: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn check_step(eps: f64) -> Result<(), TensorError> {
    if (1e-7..=1e-3).contains(&eps) {
        Ok(())
    } else {
        Err(TensorError::InvalidStep(eps))
    }
}

struct Accum {
    report: GradCheckReport,
}

impl Accum {
    fn new() -> Self {
        Self {
            report: GradCheckReport {
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                worst: None,
                checked: 0,
                flagged: false,
            },
        }
    }

    fn record(&mut self, input: usize, entry: usize, tape_grad: f64, fd_grad: f64) {
        let rel = relative_error(tape_grad, fd_grad);
        let r = &mut self.report;
        r.checked += 1;
        r.max_abs_error = r.max_abs_error.max((tape_grad - fd_grad).abs());
        if rel > r.max_rel_error || r.worst.is_none() {
            r.max_rel_error = rel.max(r.max_rel_error);
            r.worst = Some((input, entry));
        }
    }

    fn finish(mut self, threshold: f64) -> GradCheckReport {
        self.report.flagged = self.report.max_rel_error > threshold;
        self.report
    }
}

/// Compares the tape gradient of a scalar function of `points` with central
/// differences of step `eps`. Disagreement above `threshold` is flagged in
/// the report rather than returned as an error.
pub fn gradient_check<F>(f: F, points: &[Tensor], eps: f64, threshold: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    check_step(eps)?;
    let eval = |pts: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids = pts
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let ids = points
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut acc = Accum::new();
    let mut work = points.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(points[pi].shape()));
        for k in 0..points[pi].len() {
            let orig = points[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            acc.record(pi, k, analytic.data()[k], (up - down) / (2.0 * eps));
        }
    }
    Ok(acc.finish(threshold))
}

/// Same check over every entry of every parameter in a store.
pub fn gradient_check_params<F>(store: &ParamStore, f: F, eps: f64, threshold: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<NodeId, TensorError>,
{
    check_step(eps)?;
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let grads = tape.backward(out)?.for_params(store);

    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let out = f(s, &mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut acc = Accum::new();
    let mut work = store.clone();
    for id in store.ids() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            acc.record(id.index(), k, grads[id.index()].data()[k], (up - down) / (2.0 * eps));
        }
    }
    Ok(acc.finish(threshold))
}
