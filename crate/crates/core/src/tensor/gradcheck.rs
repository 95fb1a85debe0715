//! Central-finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::tape::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Index of the worst coordinate.
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Set when the forward pass crossed a non-differentiable point
    /// (an exact tie inside a max reduction).
    pub nondiff_point: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1.0);
    (a - n).abs() / denom
}

/// Compare the analytic gradient of a scalar-valued tape function against
/// central finite differences with step `h`, at `x`.
pub fn grad_check<F>(f: F, x: &Array<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, TensorId) -> Result<TensorId>,
{
    // analytic pass
    let tape = Tape::new();
    let xid = tape.leaf_grad(x.clone())?;
    let out = f(&tape, xid)?;
    if tape.shape(out) != [1] {
        return Err(Error::shape("grad_check requires a scalar-valued function"));
    }
    let nondiff = tape.nondiff_hit();
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = grads
        .get(xid)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    // numeric pass
    let eval = |pt: &Array<f64>| -> Result<f64> {
        let t = Tape::new();
        let id = t.leaf(pt.clone())?;
        let o = f(&t, id)?;
        let v = t.value(o).scalar_value();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };
    let mut numeric = vec![0.0; x.numel()];
    let mut pt = x.clone();
    for k in 0..x.numel() {
        let orig = pt.data()[k];
        pt.data_mut()[k] = orig + h;
        let fp = eval(&pt)?;
        pt.data_mut()[k] = orig - h;
        let fm = eval(&pt)?;
        pt.data_mut()[k] = orig;
        numeric[k] = (fp - fm) / (2.0 * h);
    }

    let (worst_coord, max_rel_err) = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });

    Ok(GradCheckReport {
        max_rel_err,
        worst_coord,
        analytic,
        numeric,
        nondiff_point: nondiff,
    })
}
