use super::{DiffError, Graph, Tensor, Var};

const DENOM_FLOOR: f64 = 1e-8;

/// Max over coordinates of `|analytic − central difference| / (|analytic| + 1e-8)`
/// for a scalar-valued graph function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = match g.grad(xv) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.len()],
    };
    compare_with_central_differences(
        &analytic,
        |values| {
            let mut g = Graph::new();
            let t = Tensor::new(x.shape().to_vec(), values.to_vec())?;
            let xv = g.leaf(t, false);
            let out = f(&mut g, xv)?;
            Ok(g.value(out).item())
        },
        x.data(),
        step,
    )
}

/// Core of the check for callers that already hold an analytic gradient and
/// a plain value function (e.g. a whole model evaluated per parameter group).
pub fn compare_with_central_differences<F>(
    analytic: &[f64],
    mut value: F,
    x: &[f64],
    step: f64,
) -> Result<f64, DiffError>
where
    F: FnMut(&[f64]) -> Result<f64, DiffError>,
{
    if analytic.len() != x.len() {
        return Err(DiffError::Invalid(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = value(&probe)?;
        probe[i] = x[i] - step;
        let down = value(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + DENOM_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
