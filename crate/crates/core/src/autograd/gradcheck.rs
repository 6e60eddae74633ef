//! Central finite-difference checks of [`Graph::backward`].

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// Max over inputs of `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub entries_checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Checks the gradient of a scalar function of several matrix inputs.
///
/// `f` must build the same computation for every call; all inputs are
/// registered as gradient leaves.
pub fn check_gradients<F>(name: &str, inputs: &[Matrix], f: &F, opts: &GradcheckOptions) -> GradReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Matrix]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, &g);
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for e in 0..xs[i].len() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + opts.step;
            let up = eval(&xs);
            xs[i].data_mut()[e] = orig - opts.step;
            let down = eval(&xs);
            xs[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[e];
            diff2 += (a - numeric) * (a - numeric);
            an2 += a * a;
            nu2 += numeric * numeric;
            checked += 1;
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        let rel = if denom > 1e-12 { diff2.sqrt() / denom } else { diff2.sqrt() };
        max_rel = max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    GradReport { name: name.to_string(), max_rel_err: max_rel, tolerance: opts.tolerance, entries_checked: checked }
}
