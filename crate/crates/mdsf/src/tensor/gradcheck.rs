//! Central finite-difference oracle for gradient verification.
//!
//! The oracle never touches the reverse-mode path it checks: it re-evaluates
//! the function on fresh graphs at perturbed inputs.

use super::graph::{Graph, Tensor};
use crate::error::{Error, Result};

/// Per-coordinate step: h = 1e-5 · max(1, |x|).
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Relative error between a finite-difference and a reverse-mode gradient
/// entry: |g_fd − g_ad| / max(1e-8, |g_fd| + |g_ad|).
pub fn rel_err(g_fd: f64, g_ad: f64) -> f64 {
    (g_fd - g_ad).abs() / (g_fd.abs() + g_ad.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, shape: &[usize], x: &[f64]) -> Result<f64>
where
    F: Fn(&Graph, &Tensor) -> Result<Tensor>,
{
    let graph = Graph::new();
    let leaf = graph.var(shape, x.to_vec());
    let y = f(&graph, &leaf)?;
    if y.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck target must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck function returned {v}")));
    }
    Ok(v)
}

/// Maximum relative error between the tape gradient of `f` at `x0` and
/// central finite differences, over all coordinates.
pub fn gradcheck<F>(f: F, shape: &[usize], x0: &[f64]) -> Result<f64>
where
    F: Fn(&Graph, &Tensor) -> Result<Tensor>,
{
    // Reverse-mode gradient.
    let graph = Graph::new();
    let leaf = graph.var(shape, x0.to_vec());
    let y = f(&graph, &leaf)?;
    if y.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck target must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    if !y.item().is_finite() {
        return Err(Error::NonFinite("gradcheck function returned NaN".into()));
    }
    y.backward()?;
    let ad = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; x0.len()]);

    let mut max_rel: f64 = 0.0;
    let mut probe = x0.to_vec();
    for i in 0..x0.len() {
        let h = fd_step(x0[i]);
        probe[i] = x0[i] + h;
        let fp = eval_scalar(&f, shape, &probe)?;
        probe[i] = x0[i] - h;
        let fm = eval_scalar(&f, shape, &probe)?;
        probe[i] = x0[i];
        let g_fd = (fp - fm) / (2.0 * h);
        max_rel = max_rel.max(rel_err(g_fd, ad[i]));
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = vec![0.3, -1.2, 2.5];
        let err = gradcheck(|_, t| Ok(t.sum_all()), &[3], &x).unwrap();
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn sigmoid_sum_tight() {
        let x = vec![0.1, -0.4, 1.7, -2.2];
        let err = gradcheck(|_, t| Ok(t.sigmoid().sum_all()), &[4], &x).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn nan_propagates_as_failure() {
        let x = vec![-1.0];
        let res = gradcheck(|_, t| Ok(t.sqrt().sum_all()), &[1], &x);
        assert!(res.is_err());
    }
}
