//! Central finite-difference checks of analytic gradients.

use crate::params::ParamSet;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Tensor name and flat offset of the worst entry.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(SCALE_FLOOR)
}

/// Compares `analytic` with central differences of `loss` around `params`,
/// entry by entry, with step `h`.
pub fn check<P, F>(params: &P, analytic: &P, h: f64, loss: F) -> GradCheck
where
    P: ParamSet + Clone,
    F: Fn(&P) -> f64,
{
    let base = params.to_flat();
    let grad = analytic.to_flat();
    assert_eq!(base.len(), grad.len(), "gradient layout differs from parameters");
    let mut names = Vec::with_capacity(base.len());
    params.visit("", &mut |name, _, data| {
        for k in 0..data.len() {
            names.push((name.to_string(), k));
        }
    });
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        n_checked: 0,
    };
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        probe.fill_from_flat(&flat);
        let up = loss(&probe);
        flat[i] = base[i] - h;
        probe.fill_from_flat(&flat);
        let down = loss(&probe);
        flat[i] = base[i];
        let fd = (up - down) / (2.0 * h);
        let err = relative_error(fd, grad[i]);
        if err > result.max_rel_error || result.worst.is_none() {
            result.max_rel_error = err;
            result.worst = Some(names[i].clone());
        }
        result.n_checked += 1;
    }
    result
}
