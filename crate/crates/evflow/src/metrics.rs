//! End-point-error and N-pixel-error metrics, sparse (event-masked) versus
//! dense evaluation, flow-magnitude distribution analysis, and the sequential
//! evaluation protocol with warm-start chaining.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SequenceData};
use crate::error::{Error, Result};
use crate::events::{EventSequence, VoxelGrid};
use crate::flow::FlowField;
use crate::model::FlowNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Dense,
    Sparse,
}

/// Metric summary over one evaluation scope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean end-point error in pixels.
    pub epe: f64,
    /// Percentage of pixels with error strictly above N pixels, N = 1, 2, 3.
    pub npe: [f64; 3],
    pub valid_pixel_count: usize,
    pub mode: EvalMode,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.npe.iter().enumerate() {
            if !(0.0..=100.0).contains(v) {
                return Err(Error::numeric(format!("npe[{}] = {v} out of range", i + 1)));
            }
        }
        if self.npe[0] + 1e-12 < self.npe[1] || self.npe[1] + 1e-12 < self.npe[2] {
            return Err(Error::numeric(format!(
                "npe must be non-increasing in N: {:?}",
                self.npe
            )));
        }
        Ok(())
    }
}

fn masked_errors(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let (h, w) = gt.dims();
    if pred.dims() != (h, w) {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::shape(format!(
                "mask length {} does not match {h}x{w}",
                m.len()
            )));
        }
    }
    let mut errs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let included = gt.is_valid(y, x) && mask.map_or(true, |m| m[y * w + x]);
            if included {
                errs.push(
                    (pred.u(y, x) - gt.u(y, x)).hypot(pred.v(y, x) - gt.v(y, x)),
                );
            }
        }
    }
    Ok(errs)
}

/// Mean end-point error over the ground truth's valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    epe_masked(pred, gt, None)
}

pub fn epe_masked(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    let errs = masked_errors(pred, gt, mask)?;
    if errs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Percentage of evaluated pixels whose error magnitude strictly exceeds N.
pub fn npe(pred: &FlowField, gt: &FlowField, n: f64) -> Result<f64> {
    npe_masked(pred, gt, n, None)
}

pub fn npe_masked(pred: &FlowField, gt: &FlowField, n: f64, mask: Option<&[bool]>) -> Result<f64> {
    let errs = masked_errors(pred, gt, mask)?;
    if errs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let outliers = errs.iter().filter(|e| **e > n).count();
    Ok(100.0 * outliers as f64 / errs.len() as f64)
}

/// Full report (EPE plus 1/2/3-pixel outlier rates) over one field pair.
pub fn metric_report(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&[bool]>,
    mode: EvalMode,
) -> Result<MetricReport> {
    let errs = masked_errors(pred, gt, mask)?;
    if errs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let count = errs.len();
    let sum: f64 = errs.iter().sum();
    let mut outliers = [0usize; 3];
    for e in &errs {
        for n in 0..3 {
            if *e > (n + 1) as f64 {
                outliers[n] += 1;
            }
        }
    }
    Ok(MetricReport {
        epe: sum / count as f64,
        npe: [
            100.0 * outliers[0] as f64 / count as f64,
            100.0 * outliers[1] as f64 / count as f64,
            100.0 * outliers[2] as f64 / count as f64,
        ],
        valid_pixel_count: count,
        mode,
    })
}

/// Restricts a validity mask to pixels that received at least one event.
pub fn sparse_mask(gt_mask: &[bool], events: &EventSequence) -> Result<Vec<bool>> {
    let (h, w) = events.sensor;
    if gt_mask.len() != h * w {
        return Err(Error::shape(format!(
            "mask length {} does not match {h}x{w} sensor",
            gt_mask.len()
        )));
    }
    let mut hit = vec![false; h * w];
    for e in events.events() {
        hit[e.y as usize * w + e.x as usize] = true;
    }
    Ok(gt_mask
        .iter()
        .zip(&hit)
        .map(|(g, h)| *g && *h)
        .collect())
}

/// Percentiles (1..=99) of flow magnitudes over all valid pixels, optionally
/// normalized by image width and expressed in percent.
pub fn magnitude_cdf(gts: &[&FlowField], normalize_by_width: bool) -> Result<Vec<(u8, f64)>> {
    let mut mags = Vec::new();
    for gt in gts {
        let (_, w) = gt.dims();
        let scale = if normalize_by_width {
            100.0 / w as f64
        } else {
            1.0
        };
        mags.extend(gt.valid_magnitudes().into_iter().map(|m| m * scale));
    }
    if mags.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = mags.len();
    Ok((1..=99u8)
        .map(|p| {
            // nearest-rank percentile
            let idx = ((p as f64 / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1;
            (p, mags[idx])
        })
        .collect())
}

// ---------------------------------------------------------------------------
// sequential evaluation protocol
// ---------------------------------------------------------------------------

/// Anything that maps two event representations (and an optional 1/8-res
/// initial flow) to per-iteration predictions plus the final internal flow.
pub trait FlowPredictor {
    fn predict(
        &self,
        grid1: &VoxelGrid,
        grid2: &VoxelGrid,
        init_small: Option<&FlowField>,
        iters: usize,
    ) -> Result<(Vec<FlowField>, FlowField)>;
}

impl FlowPredictor for FlowNet {
    fn predict(
        &self,
        grid1: &VoxelGrid,
        grid2: &VoxelGrid,
        init_small: Option<&FlowField>,
        iters: usize,
    ) -> Result<(Vec<FlowField>, FlowField)> {
        let out = self.estimate_flow_detailed(grid1, grid2, init_small, iters)?;
        Ok((out.predictions, out.final_small))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Warm-start the flow from the previous prediction at inference time.
    pub warmstart: bool,
    /// Refinement iterations per timestep.
    pub iters: usize,
    pub mode: EvalMode,
}

/// Per-sequence evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub samples_evaluated: usize,
    pub samples_skipped: usize,
    pub report: MetricReport,
}

/// Evaluates one sequence under the sequential protocol: the warm-start chain
/// carries the final internal flow across consecutive samples and is never
/// reset within the sequence. Samples without ground truth are predicted (to
/// keep the chain alive) but skipped in the metrics and logged.
pub fn evaluate_sequence(
    predictor: &dyn FlowPredictor,
    seq: &SequenceData,
    protocol: &EvalProtocol,
) -> Result<SequenceReport> {
    let mut prev_small: Option<FlowField> = None;
    let mut total_err = 0.0;
    let mut total_count = 0usize;
    let mut outliers = [0usize; 3];
    let mut evaluated = 0;
    let mut skipped = 0;
    for k in 0..seq.len() {
        let init = match (&prev_small, protocol.warmstart) {
            (Some(prev), true) => Some(crate::warmstart::forward_warp_flow(prev)?),
            _ => None,
        };
        let (preds, final_small) =
            predictor.predict(&seq.grids[k], &seq.grids[k + 1], init.as_ref(), protocol.iters)?;
        prev_small = Some(final_small);
        let Some(gt) = &seq.gts[k] else {
            skipped += 1;
            eprintln!(
                "eval: {}: sample {k} has no ground truth, skipped",
                seq.name
            );
            continue;
        };
        let pred = preds.last().expect("at least one iteration");
        let mask = match protocol.mode {
            EvalMode::Dense => None,
            EvalMode::Sparse => Some(sparse_mask(gt.valid_mask(), &seq.interval_events[k])?),
        };
        let errs = masked_errors(pred, gt, mask.as_deref())?;
        if errs.is_empty() {
            skipped += 1;
            eprintln!(
                "eval: {}: sample {k} has an empty evaluation mask, skipped",
                seq.name
            );
            continue;
        }
        evaluated += 1;
        total_count += errs.len();
        for e in &errs {
            total_err += e;
            for n in 0..3 {
                if *e > (n + 1) as f64 {
                    outliers[n] += 1;
                }
            }
        }
    }
    if total_count == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(SequenceReport {
        name: seq.name.clone(),
        samples_evaluated: evaluated,
        samples_skipped: skipped,
        report: MetricReport {
            epe: total_err / total_count as f64,
            npe: [
                100.0 * outliers[0] as f64 / total_count as f64,
                100.0 * outliers[1] as f64 / total_count as f64,
                100.0 * outliers[2] as f64 / total_count as f64,
            ],
            valid_pixel_count: total_count,
            mode: protocol.mode,
        },
    })
}

/// Whole-split evaluation. The aggregate is the valid-pixel-weighted mean
/// over sequences (not a per-sequence average).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub protocol: EvalProtocol,
    pub sequences: Vec<SequenceReport>,
    pub aggregate: MetricReport,
}

pub fn evaluate_dataset(
    predictor: &dyn FlowPredictor,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<EvalRun> {
    if dataset.sequences.is_empty() {
        return Err(Error::data("dataset has no sequences"));
    }
    let mut sequences = Vec::new();
    let mut err_sum = 0.0;
    let mut count = 0usize;
    let mut outlier_counts = [0.0f64; 3];
    for seq in &dataset.sequences {
        let rep = evaluate_sequence(predictor, seq, protocol)?;
        err_sum += rep.report.epe * rep.report.valid_pixel_count as f64;
        for n in 0..3 {
            outlier_counts[n] +=
                rep.report.npe[n] / 100.0 * rep.report.valid_pixel_count as f64;
        }
        count += rep.report.valid_pixel_count;
        sequences.push(rep);
    }
    Ok(EvalRun {
        protocol: *protocol,
        sequences,
        aggregate: MetricReport {
            epe: err_sum / count as f64,
            npe: [
                100.0 * outlier_counts[0] / count as f64,
                100.0 * outlier_counts[1] / count as f64,
                100.0 * outlier_counts[2] / count as f64,
            ],
            valid_pixel_count: count,
            mode: protocol.mode,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_fields(seed: u64, h: usize, w: usize) -> (FlowField, FlowField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pred = FlowField::zeros(h, w, Resolution::Full);
        let mut gt = FlowField::zeros(h, w, Resolution::Full);
        for y in 0..h {
            for x in 0..w {
                pred.set(y, x, rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
                gt.set(y, x, rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
                if rng.gen_bool(0.3) {
                    gt.set_valid(y, x, false);
                }
            }
        }
        (pred, gt)
    }

    #[test]
    fn epe_zero_for_exact_prediction() {
        let (_, gt) = random_fields(1, 5, 5);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn epe_three_four_five() {
        let gt = FlowField::zeros(6, 6, Resolution::Full);
        let pred = FlowField::constant(6, 6, 3.0, 4.0, Resolution::Full);
        assert!((epe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_double_loop_oracle() {
        let (pred, gt) = random_fields(2, 7, 7);
        // independent scalar loop
        let mut sum = 0.0;
        let mut n = 0;
        let mut over = [0usize; 3];
        for y in 0..7 {
            for x in 0..7 {
                if gt.is_valid(y, x) {
                    let e = ((pred.u(y, x) - gt.u(y, x)).powi(2)
                        + (pred.v(y, x) - gt.v(y, x)).powi(2))
                    .sqrt();
                    sum += e;
                    n += 1;
                    for k in 0..3 {
                        if e > (k + 1) as f64 {
                            over[k] += 1;
                        }
                    }
                }
            }
        }
        let expect_epe = sum / n as f64;
        assert!((epe(&pred, &gt).unwrap() - expect_epe).abs() < 1e-9);
        for k in 0..3 {
            let expect = 100.0 * over[k] as f64 / n as f64;
            assert_eq!(npe(&pred, &gt, (k + 1) as f64).unwrap(), expect);
        }
        let rep = metric_report(&pred, &gt, None, EvalMode::Dense).unwrap();
        rep.validate().unwrap();
        assert!((rep.epe - expect_epe).abs() < 1e-9);
        assert_eq!(rep.valid_pixel_count, n);
    }

    #[test]
    fn npe_boundary_and_counting() {
        let gt = FlowField::zeros(4, 4, Resolution::Full);
        // all errors exactly 0.5 px -> 0% above 1
        let pred = FlowField::constant(4, 4, 0.5, 0.0, Resolution::Full);
        assert_eq!(npe(&pred, &gt, 1.0).unwrap(), 0.0);
        // errors exactly N do not count (strict inequality)
        let pred = FlowField::constant(4, 4, 1.0, 0.0, Resolution::Full);
        assert_eq!(npe(&pred, &gt, 1.0).unwrap(), 0.0);
        // half at 4 px, half at 0, N = 3 -> 50%
        let mut pred = FlowField::zeros(4, 4, Resolution::Full);
        for y in 0..4 {
            for x in 0..4 {
                if (y * 4 + x) % 2 == 0 {
                    pred.set(y, x, 4.0, 0.0);
                }
            }
        }
        assert_eq!(npe(&pred, &gt, 3.0).unwrap(), 50.0);
    }

    #[test]
    fn empty_mask_is_explicit_error() {
        let mut gt = FlowField::zeros(3, 3, Resolution::Full);
        for y in 0..3 {
            for x in 0..3 {
                gt.set_valid(y, x, false);
            }
        }
        assert!(matches!(
            epe(&gt.clone(), &gt),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn sparse_mask_intersection() {
        use crate::events::Event;
        let gt_mask = vec![true; 16];
        let no_events = EventSequence::empty(0, 10, (4, 4));
        assert!(sparse_mask(&gt_mask, &no_events)
            .unwrap()
            .iter()
            .all(|v| !v));

        let everywhere: Vec<Event> = (0..16)
            .map(|i| Event {
                x: (i % 4) as u16,
                y: (i / 4) as u16,
                t: i as i64,
                p: 1,
            })
            .collect();
        let seq = EventSequence::new(everywhere, 0, 20, (4, 4)).unwrap();
        assert_eq!(sparse_mask(&gt_mask, &seq).unwrap(), gt_mask);
    }

    #[test]
    fn sparse_epe_beats_dense_when_events_sit_on_low_error_pixels() {
        use crate::events::Event;
        let gt = FlowField::zeros(4, 4, Resolution::Full);
        let mut pred = FlowField::zeros(4, 4, Resolution::Full);
        // large error everywhere except the first row
        for y in 1..4 {
            for x in 0..4 {
                pred.set(y, x, 6.0, 0.0);
            }
        }
        let events: Vec<Event> = (0..4)
            .map(|x| Event {
                x,
                y: 0,
                t: x as i64,
                p: 1,
            })
            .collect();
        let seq = EventSequence::new(events, 0, 10, (4, 4)).unwrap();
        let mask = sparse_mask(gt.valid_mask(), &seq).unwrap();
        let sparse = epe_masked(&pred, &gt, Some(&mask)).unwrap();
        let dense = epe(&pred, &gt).unwrap();
        assert!(sparse < dense);
        assert_eq!(sparse, 0.0);
    }

    #[test]
    fn mask_shrinking_recomputes_plain_mean() {
        let (pred, gt) = random_fields(3, 6, 6);
        let submask: Vec<bool> = (0..36).map(|i| i % 3 == 0).collect();
        let got = epe_masked(&pred, &gt, Some(&submask)).unwrap();
        // oracle over the intersection
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..6 {
            for x in 0..6 {
                if gt.is_valid(y, x) && submask[y * 6 + x] {
                    sum += (pred.u(y, x) - gt.u(y, x)).hypot(pred.v(y, x) - gt.v(y, x));
                    n += 1;
                }
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn flip_invariance_of_reports() {
        let (pred, gt) = random_fields(4, 5, 8);
        let a = metric_report(&pred, &gt, None, EvalMode::Dense).unwrap();
        let b = metric_report(&pred.hflip(), &gt.hflip(), None, EvalMode::Dense).unwrap();
        assert_eq!(a.epe, b.epe);
        assert_eq!(a.npe, b.npe);
        assert_eq!(a.valid_pixel_count, b.valid_pixel_count);
    }

    #[test]
    fn magnitude_cdf_constant_and_mixture() {
        let all2 = FlowField::constant(4, 4, 2.0, 0.0, Resolution::Full);
        let cdf = magnitude_cdf(&[&all2], false).unwrap();
        assert!(cdf.iter().all(|(_, v)| (*v - 2.0).abs() < 1e-12));

        // mixture: 60% magnitude 1, 40% magnitude 10
        let mut f = FlowField::zeros(10, 10, Resolution::Full);
        for i in 0..100 {
            let (y, x) = (i / 10, i % 10);
            if i < 60 {
                f.set(y, x, 1.0, 0.0);
            } else {
                f.set(y, x, 10.0, 0.0);
            }
        }
        let cdf = magnitude_cdf(&[&f], false).unwrap();
        let p50 = cdf.iter().find(|(p, _)| *p == 50).unwrap().1;
        let p80 = cdf.iter().find(|(p, _)| *p == 80).unwrap().1;
        assert_eq!(p50, 1.0);
        assert_eq!(p80, 10.0);

        // width normalization: values scale by 100/W
        let cdf_norm = magnitude_cdf(&[&f], true).unwrap();
        let p80n = cdf_norm.iter().find(|(p, _)| *p == 80).unwrap().1;
        assert!((p80n - 10.0 * 100.0 / 10.0).abs() < 1e-12);
    }
}
