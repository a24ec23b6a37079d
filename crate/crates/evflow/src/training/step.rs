//! One optimization step over an event-packet sequence: per-timestep
//! refinement with the warm-start module in the graph, so gradients
//! backpropagate through time when it is enabled.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::model::{pad_to_multiple8, FlowNet};
use crate::training::loss::sequence_loss_on_tape;
use crate::training::{TrainConfig, TrainSample};
use crate::warmstart::warm_start_on_tape;

#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<(String, crate::tensor::Tensor)>,
    pub empty_gt_timesteps: usize,
    /// Mean L1 of the final iteration per timestep.
    pub final_l1_per_timestep: Vec<f64>,
}

struct SequenceForward {
    tape: Tape,
    loss: VarId,
    grid0: VarId,
    empty_gt_timesteps: usize,
    final_l1_per_timestep: Vec<f64>,
}

/// Runs the recurrent forward over all timesteps of a sample and records the
/// sequence loss. Feature encodings of shared grids are computed once and
/// reused, which also wires their gradients to both consuming timesteps.
fn forward_sequence(
    model: &FlowNet,
    sample: &TrainSample,
    cfg: &TrainConfig,
    grad_on_grid0: bool,
    last_timestep_only: bool,
) -> Result<SequenceForward> {
    sample.validate()?;
    let n_i = sample.gts.len();
    let mut t = Tape::new();

    // bind grids once; grid 0 optionally tracks gradients for BPTT probes
    let grid_vars: Vec<VarId> = sample
        .grids
        .iter()
        .enumerate()
        .map(|(i, g)| t.leaf(g.data.clone(), grad_on_grid0 && i == 0))
        .collect();
    let mut padded: Vec<Option<(VarId, (usize, usize))>> = vec![None; sample.grids.len()];
    let mut feats: Vec<Option<VarId>> = vec![None; sample.grids.len()];

    let mut prev_small: Option<VarId> = None;
    let mut prev_full: Option<VarId> = None;
    let mut all_preds: Vec<Vec<VarId>> = Vec::with_capacity(n_i);
    for i in 0..n_i {
        for idx in [i, i + 1] {
            if padded[idx].is_none() {
                let (p, pad) = pad_to_multiple8(&mut t, grid_vars[idx]);
                padded[idx] = Some((p, pad));
                feats[idx] = Some(model.encode_features_on_tape(&mut t, p));
            }
        }
        let (g2p, pad) = padded[i + 1].unwrap();
        let init_small = if cfg.warmstart_in_training && i > 0 {
            if model.cfg.warmstart_full_res {
                // warp the final full-resolution prediction, then fold it
                // down to the internal 1/8 state
                let full = prev_full.expect("previous full prediction");
                let (warped, _) = warm_start_on_tape(&mut t, full, false);
                let (wp, _) = pad_to_multiple8(&mut t, warped);
                let small = t.downsample_mean(wp, 8);
                Some(t.scale(small, 1.0 / 8.0))
            } else {
                let small = prev_small.expect("previous small flow");
                let (warped, _) = warm_start_on_tape(&mut t, small, false);
                Some(warped)
            }
        } else {
            None
        };
        let out = model.forward_from_features(
            &mut t,
            feats[i].unwrap(),
            feats[i + 1].unwrap(),
            g2p,
            init_small,
            cfg.iters,
            pad,
        )?;
        prev_small = Some(out.final_small);
        prev_full = Some(*out.preds_full.last().unwrap());
        all_preds.push(out.preds_full);
    }

    // non-finite diagnostics before the loss: name the first offending
    // timestep and iteration
    for (i, iters) in all_preds.iter().enumerate() {
        for (k, p) in iters.iter().enumerate() {
            if let Some((idx, v)) = t.value(*p).first_non_finite() {
                return Err(Error::numeric(format!(
                    "non-finite prediction at timestep {i}, iteration {k} (flat index {idx}: {v})"
                )));
            }
        }
    }

    let (loss_preds, loss_gts): (Vec<Vec<VarId>>, Vec<&crate::flow::FlowField>) =
        if last_timestep_only {
            (
                vec![all_preds.last().unwrap().clone()],
                vec![sample.gts.last().unwrap()],
            )
        } else {
            (all_preds, sample.gts.iter().collect())
        };
    let terms = sequence_loss_on_tape(&mut t, &loss_preds, &loss_gts, cfg.gamma)?;
    Ok(SequenceForward {
        grid0: grid_vars[0],
        loss: terms.total,
        empty_gt_timesteps: terms.empty_gt_timesteps,
        final_l1_per_timestep: terms.final_l1_per_timestep,
        tape: t,
    })
}

/// Computes the sequence loss and parameter gradients for one sample.
pub fn train_sequence_step(
    model: &FlowNet,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let fwd = forward_sequence(model, sample, cfg, false, false)?;
    let loss = fwd.tape.value(fwd.loss).item();
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {loss}")));
    }
    let grads = fwd.tape.backward(fwd.loss);
    let grads = fwd.tape.param_grads(&grads);
    for (name, g) in &grads {
        if let Some((idx, v)) = g.first_non_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient for {name} at flat index {idx}: {v}"
            )));
        }
    }
    Ok(StepOutput {
        loss,
        grads,
        empty_gt_timesteps: fwd.empty_gt_timesteps,
        final_l1_per_timestep: fwd.final_l1_per_timestep,
    })
}

/// Gradient of the *final* timestep's loss with respect to the *first* input
/// grid. The first grid feeds later timesteps only through the warm-start
/// connection, so this is the cross-timestep Jacobian probe: exactly zero
/// with warm start disabled, generically nonzero with it enabled.
pub fn cross_timestep_gradient(
    model: &FlowNet,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<crate::tensor::Tensor> {
    if sample.gts.len() < 2 {
        return Err(Error::config(
            "cross-timestep probe needs at least two timesteps",
        ));
    }
    let fwd = forward_sequence(model, sample, cfg, true, true)?;
    let grads = fwd.tape.backward(fwd.loss);
    Ok(grads
        .get(fwd.grid0)
        .cloned()
        .unwrap_or_else(|| crate::tensor::Tensor::zeros(sample.grids[0].data.shape())))
}

/// Final-timestep loss value for a (possibly perturbed) sample; the
/// finite-difference counterpart of [`cross_timestep_gradient`].
pub fn last_timestep_loss(
    model: &FlowNet,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<f64> {
    let fwd = forward_sequence(model, sample, cfg, false, true)?;
    Ok(fwd.tape.value(fwd.loss).item())
}

