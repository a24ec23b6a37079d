//! Sequence supervision: exponentially discounted L1 over iterations, summed
//! over timesteps.
//!
//! Per iteration k (1-based) of timestep i the contribution is
//! `gamma^(N_k - k) * mean_valid(|u - u_gt| + |v - v_gt|)`; the final
//! iteration carries weight 1. A timestep whose ground truth has no valid
//! pixels contributes zero and increments a warning counter.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

pub struct LossTerms {
    /// Scalar loss variable on the tape.
    pub total: VarId,
    /// Mean L1 of the final iteration per timestep (diagnostics).
    pub final_l1_per_timestep: Vec<f64>,
    /// Timesteps skipped because their GT mask was empty.
    pub empty_gt_timesteps: usize,
}

/// Records the sequence loss on the tape. `preds[i][k]` is the full-resolution
/// prediction of iteration k at timestep i.
pub fn sequence_loss_on_tape(
    t: &mut Tape,
    preds: &[Vec<VarId>],
    gts: &[&FlowField],
    gamma: f64,
) -> Result<LossTerms> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} prediction timesteps vs {} ground-truth fields",
            preds.len(),
            gts.len()
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(format!("gamma must be in (0, 1], got {gamma}")));
    }
    let mut total = t.constant(Tensor::scalar(0.0));
    let mut final_l1 = Vec::with_capacity(gts.len());
    let mut empty = 0;
    for (i, (iter_preds, gt)) in preds.iter().zip(gts).enumerate() {
        let n_k = iter_preds.len();
        if n_k == 0 {
            return Err(Error::config(format!("timestep {i} has no predictions")));
        }
        let count = gt.valid_count();
        if count == 0 {
            empty += 1;
            final_l1.push(0.0);
            continue;
        }
        let (h, w) = gt.dims();
        let mask2 = {
            let mut m = Tensor::zeros(&[2, h, w]);
            for (idx, ok) in gt.valid_mask().iter().enumerate() {
                if *ok {
                    m.data_mut()[idx] = 1.0;
                    m.data_mut()[h * w + idx] = 1.0;
                }
            }
            t.constant(m)
        };
        let gt_var = t.constant(gt.tensor().clone());
        let mut last = 0.0;
        for (k, &pred) in iter_preds.iter().enumerate() {
            if t.value(pred).dims3() != (2, h, w) {
                return Err(Error::shape(format!(
                    "timestep {i} iteration {k}: prediction {:?} vs GT [2, {h}, {w}]",
                    t.value(pred).shape()
                )));
            }
            let diff = t.sub(pred, gt_var);
            let a = t.abs(diff);
            let m = t.mul(a, mask2);
            let s = t.sum_all(m);
            let mean = t.scale(s, 1.0 / count as f64);
            last = t.value(mean).item();
            let weight = gamma.powi((n_k - 1 - k) as i32);
            let weighted = t.scale(mean, weight);
            total = t.add(total, weighted);
        }
        final_l1.push(last);
    }
    Ok(LossTerms {
        total,
        final_l1_per_timestep: final_l1,
        empty_gt_timesteps: empty,
    })
}

/// Value-level wrapper over the tape implementation.
pub fn sequence_loss(preds: &[Vec<FlowField>], gts: &[&FlowField], gamma: f64) -> Result<(f64, usize)> {
    let mut t = Tape::new();
    let pred_vars: Vec<Vec<VarId>> = preds
        .iter()
        .map(|iters| {
            iters
                .iter()
                .map(|f| t.constant(f.tensor().clone()))
                .collect()
        })
        .collect();
    let terms = sequence_loss_on_tape(&mut t, &pred_vars, gts, gamma)?;
    Ok((t.value(terms.total).item(), terms.empty_gt_timesteps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> FlowField {
        let mut f = FlowField::zeros(h, w, Resolution::Full);
        for y in 0..h {
            for x in 0..w {
                f.set(y, x, rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                if rng.gen_bool(0.2) {
                    f.set_valid(y, x, false);
                }
            }
        }
        f
    }

    #[test]
    fn exact_predictions_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_field(5, 5, &mut rng);
        let preds = vec![vec![gt.clone(), gt.clone()]];
        let (loss, empty) = sequence_loss(&preds, &[&gt], 0.8).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(empty, 0);
    }

    #[test]
    fn two_iteration_discount_matches_closed_form() {
        // N_i = 1, N_k = 2 with per-iteration mean L1 a then b:
        // loss = 0.8 * a + 1.0 * b
        let gt = FlowField::zeros(4, 4, Resolution::Full);
        let p1 = FlowField::constant(4, 4, 1.5, 0.0, Resolution::Full); // a = 1.5
        let p2 = FlowField::constant(4, 4, 0.25, -0.25, Resolution::Full); // b = 0.5
        let (loss, _) = sequence_loss(&[vec![p1, p2]], &[&gt], 0.8).unwrap();
        assert!((loss - (0.8 * 1.5 + 1.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn matches_triple_loop_oracle_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n_i, n_k, h, w) = (2, 3, 5, 5);
        let gamma = 0.8f64;
        let gts: Vec<FlowField> = (0..n_i).map(|_| random_field(h, w, &mut rng)).collect();
        let preds: Vec<Vec<FlowField>> = (0..n_i)
            .map(|_| {
                (0..n_k)
                    .map(|_| {
                        let mut f = FlowField::zeros(h, w, Resolution::Full);
                        for y in 0..h {
                            for x in 0..w {
                                f.set(y, x, rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                            }
                        }
                        f
                    })
                    .collect()
            })
            .collect();

        // independent scalar triple loop
        let mut expected = 0.0f64;
        for i in 0..n_i {
            let count = gts[i].valid_count();
            for k in 0..n_k {
                let mut sum = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        if gts[i].is_valid(y, x) {
                            sum += (preds[i][k].u(y, x) - gts[i].u(y, x)).abs()
                                + (preds[i][k].v(y, x) - gts[i].v(y, x)).abs();
                        }
                    }
                }
                expected += gamma.powi((n_k - 1 - k) as i32) * sum / count as f64;
            }
        }
        let gt_refs: Vec<&FlowField> = gts.iter().collect();
        let (loss, _) = sequence_loss(&preds, &gt_refs, gamma).unwrap();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn empty_gt_timestep_contributes_zero_and_counts() {
        let mut gt_empty = FlowField::zeros(3, 3, Resolution::Full);
        for y in 0..3 {
            for x in 0..3 {
                gt_empty.set_valid(y, x, false);
            }
        }
        let gt_ok = FlowField::zeros(3, 3, Resolution::Full);
        let p = FlowField::constant(3, 3, 2.0, 0.0, Resolution::Full);
        let (loss, empty) = sequence_loss(
            &[vec![p.clone()], vec![p]],
            &[&gt_empty, &gt_ok],
            0.8,
        )
        .unwrap();
        assert_eq!(empty, 1);
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_monotone_in_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_field(4, 4, &mut rng);
        let preds: Vec<Vec<FlowField>> = vec![(0..4)
            .map(|_| {
                let mut f = FlowField::zeros(4, 4, Resolution::Full);
                for y in 0..4 {
                    for x in 0..4 {
                        f.set(y, x, rng.gen_range(-2.0..2.0), 0.0);
                    }
                }
                f
            })
            .collect()];
        let mut prev = 0.0;
        for (i, gamma) in [0.2, 0.5, 0.8, 1.0].iter().enumerate() {
            let (loss, _) = sequence_loss(&preds, &[&gt], *gamma).unwrap();
            if i > 0 {
                assert!(loss >= prev, "loss not monotone in gamma");
            }
            prev = loss;
        }
    }
}
