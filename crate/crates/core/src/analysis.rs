//! Decoding, token error rate, per-layer sensitivity with priority
//! dropping, cross-schedule robustness statistics and parameter accounting.

use serde::Serialize;

use crate::autodiff::Array;
use crate::criteria::{collapse, BLANK};
use crate::engine::{count_schedules, enumerate_schedules, FoldableEncoder, UnfoldSchedule};
use crate::error::{Error, Result};
use crate::io::data::Example;

/// Refuse to evaluate more schedules than this at one depth.
pub const MAX_SCHEDULES: u128 = 10_000;

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_ctc_decode(log_probs: &Array) -> Vec<usize> {
    collapse(&log_probs.argmax_rows())
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance divided by reference length.
pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("error rate needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus token error rate: total edits over total reference tokens.
pub fn evaluate(
    model: &FoldableEncoder,
    schedule: &UnfoldSchedule,
    examples: &[Example],
    keep: Option<&[bool]>,
) -> Result<f64> {
    let mut edits = 0;
    let mut words = 0;
    for ex in examples {
        let lp = model.log_posteriors_with(schedule, &ex.input, keep)?;
        let hyp = greedy_ctc_decode(&lp);
        debug_assert!(!hyp.contains(&BLANK));
        edits += edit_distance(&ex.target, &hyp);
        words += ex.target.len();
    }
    if words == 0 {
        return Err(Error::invalid("evaluation set has no reference tokens"));
    }
    Ok(edits as f64 / words as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityReport {
    /// Error rate with each layer bypassed.
    pub metrics: Vec<f64>,
    /// Layers in the order they should be dropped: lowest metric first,
    /// ties to the lower index.
    pub drop_priority: Vec<usize>,
}

impl SensitivityReport {
    pub fn from_metrics(metrics: Vec<f64>) -> Self {
        let mut drop_priority: Vec<usize> = (0..metrics.len()).collect();
        drop_priority.sort_by(|&a, &b| metrics[a].total_cmp(&metrics[b]).then(a.cmp(&b)));
        Self {
            metrics,
            drop_priority,
        }
    }

    /// Position of each layer in the drop order.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.drop_priority.len()];
        for (rank, &layer) in self.drop_priority.iter().enumerate() {
            ranks[layer] = rank;
        }
        ranks
    }
}

/// Error rate of the seed model with each physical layer bypassed in turn.
pub fn layer_sensitivity(model: &FoldableEncoder, eval: &[Example]) -> Result<SensitivityReport> {
    let n = model.n_physical();
    if n < 2 {
        return Err(Error::invalid("sensitivity needs at least two layers"));
    }
    let seed = model.seed_schedule();
    let metrics = (0..n)
        .map(|skip| {
            let keep: Vec<bool> = (0..n).map(|i| i != skip).collect();
            evaluate(model, &seed, eval, Some(&keep))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport::from_metrics(metrics))
}

/// Removes the `n_p − keep` layers earliest in the drop order; survivors
/// keep their relative order.
pub fn drop_layers(
    model: &FoldableEncoder,
    report: &SensitivityReport,
    keep: usize,
) -> Result<FoldableEncoder> {
    let n = model.n_physical();
    if keep == 0 || keep > n {
        return Err(Error::invalid(format!(
            "keep must lie in 1..={n}, got {keep}"
        )));
    }
    if report.drop_priority.len() != n {
        return Err(Error::invalid(
            "sensitivity report does not match the model",
        ));
    }
    if keep == n {
        return Ok(model.clone());
    }
    let dropped = &report.drop_priority[..n - keep];
    let survivors: Vec<usize> = (0..n).filter(|i| !dropped.contains(i)).collect();
    model.retain_layers(&survivors)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub depth: usize,
    pub schedules: Vec<String>,
    pub metrics: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Metric of the median schedule (lower median for even counts).
    pub median: f64,
    /// Index into `schedules` of the median schedule.
    pub median_index: usize,
}

impl RobustnessReport {
    pub fn from_metrics(depth: usize, schedules: Vec<String>, metrics: Vec<f64>) -> Self {
        let n = metrics.len() as f64;
        let mean = metrics.iter().sum::<f64>() / n;
        let var = metrics.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
        let mut order: Vec<usize> = (0..metrics.len()).collect();
        order.sort_by(|&a, &b| metrics[a].total_cmp(&metrics[b]).then(a.cmp(&b)));
        let median_index = order[(metrics.len() - 1) / 2];
        Self {
            depth,
            schedules,
            median: metrics[median_index],
            metrics,
            mean,
            std: var.sqrt(),
            median_index,
        }
    }
}

/// Evaluates every schedule reaching `depth`, in enumeration order.
pub fn evaluate_across_schedules(
    model: &FoldableEncoder,
    depth: usize,
    eval: &[Example],
) -> Result<RobustnessReport> {
    let count = count_schedules(model.n_physical(), depth, model.mask());
    if count > MAX_SCHEDULES {
        return Err(Error::invalid(format!(
            "{count} schedules at depth {depth} exceeds the limit of {MAX_SCHEDULES}"
        )));
    }
    let schedules = enumerate_schedules(model.n_physical(), depth, model.mask())?;
    let metrics = schedules
        .iter()
        .map(|s| evaluate(model, s, eval, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessReport::from_metrics(
        depth,
        schedules.iter().map(ToString::to_string).collect(),
        metrics,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub depth: usize,
    pub physical_layers: usize,
    pub params: usize,
}

/// Memory footprint of one foldable model at several inference depths.
pub fn parameter_report(model: &FoldableEncoder, depths: &[usize]) -> Result<Vec<ParamRow>> {
    depths
        .iter()
        .map(|&depth| {
            if count_schedules(model.n_physical(), depth, model.mask()) == 0 {
                return Err(Error::DepthUnreachable {
                    physical: model.n_physical(),
                    depth,
                    foldable: model.mask().foldable_count(),
                });
            }
            Ok(ParamRow {
                depth,
                physical_layers: model.n_physical(),
                params: model.param_count(),
            })
        })
        .collect()
}

/// Parameters of an all-physical model of `depth` blocks with the same
/// frontend, head and decoder as `model`.
pub fn untied_param_count(model: &FoldableEncoder, depth: usize) -> usize {
    model.param_count() - model.block_param_count() + depth * model.config().block.param_count()
}
