use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric|` over all components.
    pub max_abs_err: f64,
    /// Largest `|analytic - numeric| / max(abs_tol, rel_tol * |numeric|)`.
    /// At most 1 means every component is within tolerance.
    pub worst_ratio: f64,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Compares [`Graph::backward`] against central finite differences of step `h`
/// for a scalar function of `inputs`. Tolerance per component is
/// `max(abs_tol, rel_tol * |numeric|)`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, h: f64, abs_tol: f64, rel_tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_abs_err: 0.0,
        worst_ratio: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("parameter leaf");
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(err);
            report.worst_ratio = report.worst_ratio.max(err / abs_tol.max(rel_tol * numeric.abs()));
        }
    }
    Ok(report)
}
