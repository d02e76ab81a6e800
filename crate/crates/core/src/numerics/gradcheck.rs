use super::mlp::Mlp;

/// Relative error with a small absolute floor so that gradients that are both
/// (numerically) zero compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per layer.
    pub per_layer: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Compares `analytic` (flat, laid out like `net.params()`) against central
/// differences of `loss` with step `h = 1e-5`.
pub fn grad_check<F>(net: &Mlp, analytic: &[f64], tolerance: f64, mut loss: F) -> GradCheckReport
where
    F: FnMut(&Mlp) -> f64,
{
    assert_eq!(analytic.len(), net.num_params(), "analytic gradient length");
    let mut probe = net.clone();
    let numeric = central_difference(net.params(), 1e-5, |p| {
        probe.params_mut().copy_from_slice(p);
        loss(&probe)
    });
    let per_layer: Vec<f64> = (0..net.num_layers())
        .map(|l| {
            net.layer_range(l)
                .map(|i| relative_error(analytic[i], numeric[i]))
                .fold(0.0, f64::max)
        })
        .collect();
    let max_relative_error = per_layer.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        per_layer,
        max_relative_error,
        tolerance,
    }
}
