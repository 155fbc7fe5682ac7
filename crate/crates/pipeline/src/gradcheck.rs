//! Central finite-difference gradient verification.

use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`.
    pub relative_error: f64,
    pub max_abs_error: f64,
    /// Flat index with the largest absolute disagreement, with its tensor name.
    pub worst: Option<(usize, String)>,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.relative_error <= tolerance
    }
}

/// Numeric gradient of `f` at `params` by central differences with step `h`.
pub fn numeric_gradient(params: &ParamSet, h: f64, f: impl Fn(&ParamSet) -> f64) -> Vec<f64> {
    let mut probe = params.clone();
    let base = params.flat();
    let mut out = Vec::with_capacity(base.len());
    for (i, &x) in base.iter().enumerate() {
        let (ti, j) = params.locate(i);
        probe.get_mut(ti).data[j] = x + h;
        let up = f(&probe);
        probe.get_mut(ti).data[j] = x - h;
        let down = f(&probe);
        probe.get_mut(ti).data[j] = x;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Compares an analytic gradient against central differences of `f`.
pub fn check_gradient(params: &ParamSet, analytic: &ParamSet, h: f64, f: impl Fn(&ParamSet) -> f64) -> GradCheck {
    let numeric = numeric_gradient(params, h, f);
    let analytic = analytic.flat();
    let mut diff2 = 0.0;
    let mut worst = (0.0, None);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let d = (a - n).abs();
        diff2 += d * d;
        if d > worst.0 {
            worst = (d, Some(i));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
    GradCheck {
        relative_error: diff2.sqrt() / denom,
        max_abs_error: worst.0,
        worst: worst.1.map(|i| (i, params.get(params.locate(i).0).name.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Tensor;

    #[test]
    fn exact_gradient_of_cubic_passes() {
        let mut p = ParamSet::new(vec![Tensor::zeros("w", 3, 1)]);
        p.get_mut(0).data = vec![0.5, -1.0, 2.0];
        let f = |p: &ParamSet| p.get(0).data.iter().map(|x| x * x * x).sum::<f64>();
        let mut g = p.clone();
        g.get_mut(0).data.iter_mut().for_each(|x| *x = 3.0 * *x * *x);
        assert!(check_gradient(&p, &g, 1e-5, f).passes(1e-8));
    }

    #[test]
    fn wrong_gradient_fails_and_names_tensor() {
        let mut p = ParamSet::new(vec![Tensor::zeros("a", 1, 1), Tensor::zeros("b", 1, 1)]);
        p.get_mut(1).data[0] = 1.0;
        let f = |p: &ParamSet| p.get(1).data[0].powi(2);
        let g = p.zeros_like();
        let r = check_gradient(&p, &g, 1e-5, f);
        assert!(!r.passes(1e-5));
        assert_eq!(r.worst.unwrap().1, "b");
    }
}
