//! Central finite-difference gradient checks.
//!
//! The analytic side comes from [`Graph::backward`]; the numeric side only
//! ever evaluates forward passes, so the two are independent routes to the
//! same derivative.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tol;

/// Denominator floor for the relative error, so gradients that are zero
/// analytically do not turn finite-difference round-off into huge ratios.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Ulps of `|f|` allowed per side of a central difference before the
/// discrepancy is counted.
pub const ROUNDOFF_ULPS: f64 = 8.0;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, resolution: f64) {
        let excess = ((analytic - numeric).abs() - resolution).max(0.0);
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.max_rel_err = self.max_rel_err.max(excess / denom);
        self.checked += 1;
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Round-off bound of `(f(x+h) - f(x-h)) / 2h` when `f ≈ value`.
///
/// Structurally zero gradients (e.g. a bias feeding a layer norm) would
/// otherwise report ulp-level noise of a large `f` as a relative error of 1.
pub fn fd_resolution(value: f64, h: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * value.abs() / h
}

/// Checks `d f / d inputs` and `d f / d params` for a scalar-valued `f`.
///
/// `f` receives a fresh graph, the parameter store, and leaf nodes for the
/// inputs. At most `max_per_tensor` randomly chosen coordinates of each
/// input and parameter tensor are perturbed.
pub fn check<F, R>(
    inputs: &[Tensor],
    store: &ParamStore,
    f: F,
    max_per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
    R: Rng,
{
    check_in(Graph::new, inputs, store, f, max_per_tensor, rng)
}

/// [`check`] on graphs made by `new_graph`, e.g. seeded training graphs
/// so dropout masks repeat across evaluations.
pub fn check_in<G, F, R>(
    new_graph: G,
    inputs: &[Tensor],
    store: &ParamStore,
    f: F,
    max_per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    G: Fn() -> Graph,
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
    R: Rng,
{
    let h = tol::FD_STEP;
    let eval = |ins: &[Tensor], st: &ParamStore| -> Result<f64> {
        let mut g = new_graph();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, st, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = new_graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let resolution = fd_resolution(g.value(out).item(), h);
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut ins = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(&g, *var);
        let n = ins[k].len();
        for j in sample(rng, n, n.min(max_per_tensor)) {
            let orig = ins[k].data()[j];
            ins[k].data_mut()[j] = orig + h;
            let up = eval(&ins, store)?;
            ins[k].data_mut()[j] = orig - h;
            let down = eval(&ins, store)?;
            ins[k].data_mut()[j] = orig;
            report.record(analytic.data()[j], (up - down) / (2.0 * h), resolution);
        }
    }

    let mut st = store.clone();
    for id in store.ids() {
        let Some(analytic) = grads.param(id) else {
            continue;
        };
        let analytic = analytic.to_vec();
        let n = analytic.len();
        for j in sample(rng, n, n.min(max_per_tensor)) {
            let orig = st.get(id).data()[j];
            st.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(inputs, &st)?;
            st.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(inputs, &st)?;
            st.get_mut(id).data_mut()[j] = orig;
            report.record(analytic[j], (up - down) / (2.0 * h), resolution);
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued output to a scalar by a fixed random weighting,
/// so every output coordinate contributes a distinct gradient.
pub fn weighted_sum<R: Rng>(g: &mut Graph, out: Var, rng: &mut R) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}
