//! Central-difference verification of analytic gradients.

use super::{Graph, NnError, NnResult, Param, Tensor, Var};

/// Compare the graph-computed gradient of a scalar-valued function against
/// central differences with step `h`, at `point`.
///
/// Returns the max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
/// The builder must be deterministic, and `point` should sit away from any
/// non-differentiable kink of the function by more than `h`.
pub fn finite_difference_gradcheck<F>(build: F, point: &Tensor, h: f32) -> NnResult<f32>
where
    F: Fn(&mut Graph, Var) -> NnResult<Var>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(NnError::BadConfig {
            op: "finite_difference_gradcheck",
            reason: format!("step h must be positive and finite, got {h}"),
        });
    }
    // Analytic gradient.
    let probe = Param::new("gradcheck_point", point.clone());
    let mut g = Graph::new();
    let x = g.param(&probe);
    let out = build(&mut g, x)?;
    let val = g.scalar(out)?;
    if !val.is_finite() {
        return Err(NnError::NonFinite("gradcheck function value".into()));
    }
    g.backward(out)?;
    let analytic = probe
        .borrow()
        .grad()
        .ok_or_else(|| NnError::MissingGradient("gradcheck_point".into()))?
        .to_vec();

    // Central differences, one coordinate at a time. The perturbed points are
    // f32 (the substrate's precision) but the function is replayed in f64 and
    // the divisor is the exact realized perturbation, so the check is not
    // limited by f32 rounding of the forward value.
    let eval = |data: &[f32]| -> NnResult<f64> {
        let t = Tensor::new(point.shape().to_vec(), data.to_vec()).expect("same shape");
        let mut g = Graph::new();
        let x = g.constant(&t);
        let out = build(&mut g, x)?;
        let v = g.eval_scalar_f64(out)?;
        if !v.is_finite() {
            return Err(NnError::NonFinite("gradcheck function value".into()));
        }
        Ok(v)
    };
    let mut data = point.data().to_vec();
    let mut max_err = 0.0f32;
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let hi = data[i];
        let fp = eval(&data)?;
        data[i] = orig - h;
        let lo = data[i];
        let fm = eval(&data)?;
        data[i] = orig;
        let numeric = ((fp - fm) / (hi as f64 - lo as f64)) as f32;
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
