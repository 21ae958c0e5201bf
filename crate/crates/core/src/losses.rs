//! Permutation-invariant BCE, attractor existence loss, and the total
//! training objective.

use crate::assignment;
use crate::attractors::existence_labels;
use crate::error::{Error, Result};
use crate::graph::{bce_prob_term, Graph, Var};
use crate::tensor::Tensor;

/// Largest speaker count solved by enumerating permutations under
/// [`PitSolver::Auto`].
pub const EXHAUSTIVE_MAX_SPEAKERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PitSolver {
    /// Exhaustive for `S ≤ 6`, Hungarian above.
    #[default]
    Auto,
    Exhaustive,
    Hungarian,
}

/// `cost[i][j]` = summed BCE between posterior row `i` and label row `j`.
pub fn pair_costs(y: &Tensor, labels: &Tensor) -> Result<Vec<Vec<f64>>> {
    if y.dims2() != labels.dims2() {
        return Err(Error::dim("pit_bce", y.shape(), labels.shape()));
    }
    let (s, _) = y.dims2();
    Ok((0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    y.row(i)
                        .iter()
                        .zip(labels.row(j))
                        .map(|(&p, &t)| bce_prob_term(p, t))
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Mean BCE of `y` against the best row permutation of `labels`.
///
/// Returns the loss and `perm` with `perm[i]` = label row matched to
/// posterior row `i`. The total cost is a sum of per-pair costs, so the
/// Hungarian solution is the exhaustive optimum.
pub fn pit_bce(y: &Tensor, labels: &Tensor, solver: PitSolver) -> Result<(f64, Vec<usize>)> {
    let cost = pair_costs(y, labels)?;
    let s = cost.len();
    if s == 0 {
        return Ok((0.0, vec![]));
    }
    let use_exhaustive = match solver {
        PitSolver::Auto => s <= EXHAUSTIVE_MAX_SPEAKERS,
        PitSolver::Exhaustive => true,
        PitSolver::Hungarian => false,
    };
    let matching = if use_exhaustive {
        assignment::exhaustive(&cost)
    } else {
        assignment::hungarian(&cost)
    };
    let perm: Vec<usize> = matching.into_iter().map(|j| j.expect("square matching")).collect();
    let t = y.cols().max(1);
    Ok((assignment::matching_cost(&cost, &perm) / (s * t) as f64, perm))
}

/// Differentiable PIT loss on the graph. The permutation search itself is
/// not differentiated.
pub fn pit_bce_graph(g: &mut Graph, y: Var, labels: &Tensor) -> Result<(Var, Vec<usize>)> {
    let (_, perm) = pit_bce(g.value(y), labels, PitSolver::Auto)?;
    let permuted = labels.select_rows(&perm);
    let permuted = permuted.reshape(g.shape(y).to_vec())?;
    Ok((g.bce_prob(y, &permuted)?, perm))
}

/// Mean BCE of existence logits against `(1, …, 1, 0)`.
pub fn existence_bce(g: &mut Graph, logits: Var, speakers: usize) -> Result<Var> {
    if g.value(logits).len() != speakers + 1 {
        return Err(Error::dim("existence_bce", g.shape(logits), &[speakers + 1]));
    }
    g.bce_logits(logits, &existence_labels(speakers))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Existence-loss weight.
    pub alpha: f64,
    /// Weight of the mean intermediate loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// Posteriors (`S×T`, first `S` attractors) and existence logits
/// (`S+1` slots) of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutputs {
    pub posteriors: Var,
    pub existence_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub diarization: f64,
    pub existence: f64,
    /// Per intermediate layer: its PIT loss plus `α`·its existence loss.
    pub intermediate: Vec<f64>,
    pub total: f64,
    pub best_permutation: Vec<usize>,
}

/// `total = diarization + α·existence + β·mean(intermediate)`; every
/// intermediate layer solves its own PIT.
pub fn total_loss(
    g: &mut Graph,
    last: LayerOutputs,
    intermediate: &[LayerOutputs],
    labels: &Tensor,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let speakers = labels.rows();
    let (diar, perm) = pit_bce_graph(g, last.posteriors, labels)?;
    let exist = existence_bce(g, last.existence_logits, speakers)?;
    let weighted_exist = g.scale(exist, weights.alpha);
    let mut total = g.add(diar, weighted_exist)?;

    let mut inter_vals = Vec::with_capacity(intermediate.len());
    if !intermediate.is_empty() {
        let mut terms = Vec::with_capacity(intermediate.len());
        for layer in intermediate {
            let (d, _) = pit_bce_graph(g, layer.posteriors, labels)?;
            let e = existence_bce(g, layer.existence_logits, speakers)?;
            let e = g.scale(e, weights.alpha);
            let l = g.add(d, e)?;
            inter_vals.push(g.value(l).item());
            terms.push(l);
        }
        let stacked = g.concat_rows(&terms)?;
        let mean = g.mean(stacked);
        let scaled = g.scale(mean, weights.beta);
        total = g.add(total, scaled)?;
    }
    let breakdown = LossBreakdown {
        diarization: g.value(diar).item(),
        existence: g.value(exist).item(),
        intermediate: inter_vals,
        total: g.value(total).item(),
        best_permutation: perm,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check;
    use crate::params::ParamStore;
    use crate::tol;

    fn random_case(rng: &mut ChaCha8Rng, s: usize, t: usize) -> (Tensor, Tensor) {
        let y = Tensor::matrix(s, t, (0..s * t).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap();
        let l = Tensor::matrix(s, t, (0..s * t).map(|_| rng.gen_bool(0.5) as u8 as f64).collect()).unwrap();
        (y, l)
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let labels = Tensor::matrix(2, 4, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = labels.map(|v| v.clamp(1e-7, 1.0 - 1e-7));
        let (loss, perm) = pit_bce(&y, &labels, PitSolver::Auto).unwrap();
        assert!(loss < 1e-6);
        assert_eq!(perm, vec![0, 1]);
    }

    #[test]
    fn hungarian_equals_exhaustive_on_3x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (y, l) = random_case(&mut rng, 3, 5);
        let a = pit_bce(&y, &l, PitSolver::Hungarian).unwrap();
        let b = pit_bce(&y, &l, PitSolver::Exhaustive).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pit_is_at_most_identity_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (y, l) = random_case(&mut rng, 3, 7);
            let (pit, _) = pit_bce(&y, &l, PitSolver::Auto).unwrap();
            let ident = pair_costs(&y, &l).unwrap().iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / 21.0;
            assert!(pit <= ident + 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let y = Tensor::zeros(&[2, 3]);
        let l = Tensor::zeros(&[3, 3]);
        assert!(pit_bce(&y, &l, PitSolver::Auto).is_err());
    }

    proptest! {
        #[test]
        fn invariant_under_label_permutation(s in 1usize..6, t in 1usize..12, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, l) = random_case(&mut rng, s, t);
            let mut perm: Vec<usize> = (0..s).collect();
            perm.shuffle(&mut rng);
            let lp = l.select_rows(&perm);
            prop_assert_eq!(pit_bce(&y, &l, PitSolver::Auto).unwrap().0, pit_bce(&y, &lp, PitSolver::Auto).unwrap().0);
        }
    }

    #[test]
    fn existence_loss_limits() {
        let mut g = Graph::new();
        let z = g.input(Tensor::vector(vec![0.0, 0.0]));
        let l = existence_bce(&mut g, z, 1).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let z = g.input(Tensor::vector(vec![50.0, 50.0, -50.0]));
        let l = existence_bce(&mut g, z, 2).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn existence_loss_gradient() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = crate::params::normal(&mut rng, &[4, 1], 2.0);
            let rep = check(&[z], &ParamStore::new(), |g, _, v| existence_bce(g, v[0], 3), 8, &mut rng).unwrap();
            assert!(rep.max_rel_err < tol::GRAD_REL_ERR);
        }
    }

    #[test]
    fn pit_gradient_is_finite_and_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, l) = random_case(&mut rng, 3, 6);
        let mut g = Graph::new();
        let yv = g.input(y);
        let (loss, _) = pit_bce_graph(&mut g, yv, &l).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.get(&g, yv);
        assert!(d.is_finite() && d.sq_norm() > 0.0);
    }

    #[test]
    fn total_loss_by_hand() {
        // S=1, T=2, labels [1, 0]. Final y = [0.8, 0.4], logits [2, -1].
        // Intermediate: y = [0.6, 0.5], logits [0, 0].
        let labels = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let bce = |p: f64, t: f64| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        let sp = |z: f64| (1.0 + z.exp()).ln();
        let diar = (bce(0.8, 1.0) + bce(0.4, 0.0)) / 2.0;
        let exist = (sp(-2.0) + sp(-1.0)) / 2.0;
        let inter = (bce(0.6, 1.0) + bce(0.5, 0.0)) / 2.0 + 0.5 * std::f64::consts::LN_2;
        let want = diar + 0.5 * exist + 2.0 * inter;

        let mut g = Graph::new();
        let y = g.input(Tensor::matrix(1, 2, vec![0.8, 0.4]).unwrap());
        let z = g.input(Tensor::matrix(2, 1, vec![2.0, -1.0]).unwrap());
        let yi = g.input(Tensor::matrix(1, 2, vec![0.6, 0.5]).unwrap());
        let zi = g.input(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let w = LossWeights { alpha: 0.5, beta: 2.0 };
        let last = LayerOutputs { posteriors: y, existence_logits: z };
        let mid = LayerOutputs { posteriors: yi, existence_logits: zi };
        let (_, b) = total_loss(&mut g, last, &[mid], &labels, w).unwrap();
        assert!((b.total - want).abs() < 1e-12, "{} vs {want}", b.total);
        assert_eq!(b.intermediate.len(), 1);

        // baseline (no intermediates) and β = 0
        let (_, b0) = total_loss(&mut g, last, &[], &labels, w).unwrap();
        assert!((b0.total - (diar + 0.5 * exist)).abs() < 1e-12);
        let (_, b1) = total_loss(&mut g, last, &[mid], &labels, LossWeights { alpha: 0.5, beta: 0.0 }).unwrap();
        assert!((b1.total - b0.total).abs() < 1e-15);
    }
}
