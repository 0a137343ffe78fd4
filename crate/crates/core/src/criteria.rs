//! Training losses: CTC, label-smoothed cross-entropy, their interpolation,
//! the stop-gradient KL regularizer and the joint multi-depth criterion.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, log_sum_exp, Array, Tape, Var};
use crate::error::{Error, Result};

/// CTC blank label.
pub const BLANK: usize = 0;

/// Label smoothing of the attention branch.
pub const LABEL_SMOOTHING: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCriterion {
    /// Weight of CTC against the attention loss when a decoder is used.
    pub lambda: f64,
    /// Weight of the seed (all-physical) loss.
    pub alpha_p: f64,
    /// Weight of the KL self-distillation term.
    pub alpha_kl: f64,
    #[serde(default)]
    pub use_decoder: bool,
}

impl TrainingCriterion {
    /// Weights used for Conformer-style encoder-decoder runs.
    pub fn conformer() -> Self {
        Self {
            lambda: 0.3,
            alpha_p: 0.25,
            alpha_kl: 0.1,
            use_decoder: true,
        }
    }

    /// Weights used for CTC-only fine-tuning runs.
    pub fn ctc_only() -> Self {
        Self {
            lambda: 1.0,
            alpha_p: 0.7,
            alpha_kl: 0.005,
            use_decoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must lie in [0, 1]".into()));
        }
        if !(self.alpha_p >= 0.0 && self.alpha_kl >= 0.0) {
            return Err(Error::Config(
                "alpha_p and alpha_kl must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Loss of the deepest unfolded system.
    pub loss_f: f64,
    /// Loss of the seed system.
    pub loss_p: f64,
    /// KL regularizer.
    pub loss_reg: f64,
    pub total: f64,
}

/// Per-frame log-probabilities over `V + 1` CTC classes.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputDistribution {
    log_probs: Array,
}

impl OutputDistribution {
    pub fn from_logits(logits: &Array) -> Self {
        Self {
            log_probs: log_softmax_rows(logits),
        }
    }

    pub fn from_log_probs(log_probs: Array) -> Result<Self> {
        for r in 0..log_probs.rows() {
            let mass: f64 = log_probs.row(r).iter().map(|v| v.exp()).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("row {r} sums to {mass}, not 1")));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn log_probs(&self) -> &Array {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }
}

/// Fewest frames that can emit `target` under CTC: one per label plus one
/// blank between each pair of equal neighbours.
pub fn min_ctc_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under frame log-probabilities, and
/// its gradient with respect to those log-probabilities.
pub fn ctc_nll(log_probs: &Array, target: &[usize]) -> Result<(f64, Array)> {
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::OutOfVocabulary {
            index: bad,
            vocab: classes,
        });
    }
    let required = min_ctc_frames(target);
    if t_len < required {
        return Err(Error::TargetTooLong {
            frames: t_len,
            required,
        });
    }

    // Blank-interleaved label: ∅ l1 ∅ l2 … ∅
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| {
        if s.is_multiple_of(2) {
            BLANK
        } else {
            target[s / 2]
        }
    };
    let skip_ok = |s: usize| s >= 2 && label(s) != BLANK && label(s) != label(s - 2);
    let lp = |t: usize, s: usize| log_probs.get2(t, label(s));
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], neg, neg];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip_ok(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, s);
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = [next[s], neg, neg];
            if s + 1 < s_len {
                terms[1] = next[s + 1];
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                terms[2] = next[s + 2];
            }
            beta[t * s_len + s] = log_sum_exp(&terms) + lp(t, s);
        }
    }

    let tail = &alpha[last..];
    let log_p = if s_len > 1 {
        log_sum_exp(&[tail[s_len - 1], tail[s_len - 2]])
    } else {
        tail[0]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc likelihood".into()));
    }

    let mut grad = Array::zeros(log_probs.shape());
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            let occupancy = (a + b - lp(t, s) - log_p).exp();
            grad.data_mut()[t * classes + label(s)] -= occupancy;
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `target` given `T × (V+1)` frame logits.
pub fn ctc_loss(tape: &mut Tape<'_>, logits: Var, target: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    let (loss, grad) = ctc_nll(tape.value(lp), target)?;
    Ok(tape.custom_loss(lp, loss, grad))
}

/// Exact CTC loss by summing over every frame path. Exponential in `T`.
pub fn ctc_brute_force(logits: &Array, target: &[usize]) -> Result<f64> {
    const MAX_FRAMES: usize = 8;
    let (t_len, classes) = (logits.rows(), logits.cols());
    if t_len > MAX_FRAMES {
        return Err(Error::invalid(format!(
            "brute-force CTC limited to {MAX_FRAMES} frames, got {t_len}"
        )));
    }
    let probs = log_softmax_rows(logits).map(f64::exp);
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs.get2(t, k))
                .product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    if total <= 0.0 {
        return Err(Error::TargetTooLong {
            frames: t_len,
            required: min_ctc_frames(target),
        });
    }
    Ok(-total.ln())
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(frames: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in frames {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Mean token cross-entropy with label smoothing over `L × C` logits.
pub fn attention_ce_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let (rows, classes) = (tape.value(logits).rows(), tape.value(logits).cols());
    if targets.len() != rows {
        return Err(Error::Shape {
            op: "attention_ce_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut q = Array::full(&[rows, classes], smoothing / classes as f64);
    for (r, &k) in targets.iter().enumerate() {
        if k >= classes {
            return Err(Error::OutOfVocabulary {
                index: k,
                vocab: classes,
            });
        }
        q.data_mut()[r * classes + k] += 1.0 - smoothing;
    }
    let lp = tape.log_softmax(logits);
    let q = tape.input(q);
    let weighted = tape.mul(lp, q)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// `(1 − λ)·ce + λ·ctc`
pub fn interpolate(ce: f64, ctc: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * ce + lambda * ctc
}

/// Graph form of [`interpolate`].
pub fn interpolated_loss(tape: &mut Tape<'_>, ce: Var, ctc: Var, lambda: f64) -> Result<Var> {
    let a = tape.scale(ce, 1.0 - lambda);
    let b = tape.scale(ctc, lambda);
    tape.add(a, b)
}

/// Frame-averaged `KL(SG(p_teacher) ‖ p_student)` from two logit matrices.
///
/// With `stop_gradient` set no gradient reaches the teacher's logits.
/// Clearing it is only useful for ablations.
pub fn kl_self_distillation(
    tape: &mut Tape<'_>,
    teacher_logits: Var,
    student_logits: Var,
    stop_gradient: bool,
) -> Result<Var> {
    if tape.shape(teacher_logits) != tape.shape(student_logits) {
        return Err(Error::Shape {
            op: "kl_self_distillation",
            lhs: tape.shape(teacher_logits).to_vec(),
            rhs: tape.shape(student_logits).to_vec(),
        });
    }
    let frames = tape.value(teacher_logits).rows() as f64;
    let teacher = if stop_gradient {
        tape.stop_gradient(teacher_logits)
    } else {
        teacher_logits
    };
    let lt = tape.log_softmax(teacher);
    let pt = tape.exp(lt);
    let ls = tape.log_softmax(student_logits);
    let diff = tape.sub(lt, ls)?;
    let terms = tape.mul(pt, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / frames))
}

/// Value-only KL between two frame distributions, averaged over frames.
pub fn kl_divergence(teacher: &OutputDistribution, student: &OutputDistribution) -> Result<f64> {
    let (t, s) = (teacher.log_probs(), student.log_probs());
    if t.shape() != s.shape() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: t.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let total: f64 = t
        .data()
        .iter()
        .zip(s.data())
        .filter(|(lt, _)| lt.is_finite())
        .map(|(lt, ls)| lt.exp() * (lt - ls))
        .sum();
    Ok(total / t.rows() as f64)
}

/// `total = loss_f + α_p·loss_p + α_kl·loss_reg`
pub fn joint_criterion(
    loss_f: f64,
    loss_p: f64,
    loss_reg: f64,
    crit: &TrainingCriterion,
) -> Result<LossBreakdown> {
    crit.validate()?;
    for (name, v) in [
        ("loss_F", loss_f),
        ("loss_P", loss_p),
        ("loss_reg", loss_reg),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LossBreakdown {
        loss_f,
        loss_p,
        loss_reg,
        total: loss_f + crit.alpha_p * loss_p + crit.alpha_kl * loss_reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(t: usize, c: usize) -> Array {
        Array::zeros(&[t, c])
    }

    #[test]
    fn single_frame_single_label() {
        let (loss, _) = ctc_nll(&log_softmax_rows(&uniform(1, 2)), &[1]).unwrap();
        assert_abs_diff_eq!(loss, -(0.5f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn two_frames_three_paths() {
        let (loss, _) = ctc_nll(&log_softmax_rows(&uniform(2, 2)), &[1]).unwrap();
        assert_abs_diff_eq!(loss, -(0.75f64).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(loss, 0.2877, epsilon = 1e-4);
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let logits = Array::from_rows(&[vec![0.3, -0.1, 0.7], vec![1.0, 0.2, -0.4]]).unwrap();
        let lp = log_softmax_rows(&logits);
        let (loss, _) = ctc_nll(&lp, &[]).unwrap();
        assert_abs_diff_eq!(loss, -(lp.get2(0, 0) + lp.get2(1, 0)), epsilon = 1e-14);
        assert_abs_diff_eq!(
            ctc_brute_force(&logits, &[]).unwrap(),
            loss,
            epsilon = 1e-12
        );
    }

    #[test]
    fn too_long_targets_fail() {
        let lp = log_softmax_rows(&uniform(2, 3));
        assert!(matches!(
            ctc_nll(&lp, &[1, 1]),
            Err(Error::TargetTooLong {
                frames: 2,
                required: 3
            })
        ));
        assert!(ctc_nll(&lp, &[1, 2]).is_ok());
        assert!(ctc_brute_force(&uniform(2, 3), &[1, 1]).is_err());
        assert!(ctc_brute_force(&uniform(9, 2), &[1]).is_err());
    }

    #[test]
    fn dynamic_program_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let classes = rng.gen_range(2..=5);
            let t = rng.gen_range(1..=6);
            let l = rng.gen_range(0..=3.min(t));
            let target: Vec<usize> = (0..l).map(|_| rng.gen_range(1..classes)).collect();
            if min_ctc_frames(&target) > t {
                continue;
            }
            let data = (0..t * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let logits = Array::new(vec![t, classes], data).unwrap();
            let (dp, _) = ctc_nll(&log_softmax_rows(&logits), &target).unwrap();
            let bf = ctc_brute_force(&logits, &target).unwrap();
            assert!((dp - bf).abs() < 1e-9, "{dp} vs {bf} for {target:?}");
        }
    }

    #[test]
    fn ctc_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Array::new(vec![4, 3], data).unwrap();
        let err = finite_diff_check(|t, x| ctc_loss(t, x, &[1, 2]), &logits, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[1, 1, 0, 2]), vec![1, 2]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::detached();
        let logits =
            t.input(Array::from_rows(&[vec![800.0, 0.0, 0.0], vec![0.0, 0.0, 800.0]]).unwrap());
        let l = attention_ce_loss(&mut t, logits, &[0, 2], 0.0).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), 0.0, epsilon = 1e-12);

        let mut t = Tape::detached();
        let logits = t.input(Array::zeros(&[3, 5]));
        let l = attention_ce_loss(&mut t, logits, &[0, 1, 4], LABEL_SMOOTHING).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), 5f64.ln(), epsilon = 1e-12);

        let mut t = Tape::detached();
        let logits = t.input(Array::zeros(&[3, 5]));
        assert!(attention_ce_loss(&mut t, logits, &[0, 1], 0.1).is_err());
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Array::new(vec![3, 4], data).unwrap();
        let err = finite_diff_check(
            |t, x| attention_ce_loss(t, x, &[3, 0, 2], LABEL_SMOOTHING),
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn interpolation_examples() {
        assert_abs_diff_eq!(interpolate(1.0, 2.0, 0.3), 1.3, epsilon = 1e-15);
        assert_eq!(interpolate(1.0, 2.0, 1.0), 2.0);
        assert_eq!(interpolate(1.0, 2.0, 0.0), 1.0);
        let mut t = Tape::detached();
        let (ce, ctc) = (t.input(Array::scalar(1.0)), t.input(Array::scalar(2.0)));
        let v = interpolated_loss(&mut t, ce, ctc, 0.3).unwrap();
        assert_abs_diff_eq!(t.value(v).item(), 1.3, epsilon = 1e-15);
    }

    #[test]
    fn kl_examples() {
        let same = OutputDistribution::from_logits(&Array::from_rows(&[vec![0.2, 0.5]]).unwrap());
        assert_abs_diff_eq!(kl_divergence(&same, &same).unwrap(), 0.0);

        let teacher = OutputDistribution::from_log_probs(
            Array::from_rows(&[vec![0.0, f64::NEG_INFINITY]]).unwrap(),
        )
        .unwrap();
        let student = OutputDistribution::from_log_probs(
            Array::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()]]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(
            kl_divergence(&teacher, &student).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let bad = OutputDistribution::from_logits(&Array::zeros(&[2, 2]));
        assert!(kl_divergence(&teacher, &bad).is_err());
    }

    #[test]
    fn kl_teacher_gets_no_gradient() {
        let mut t = Tape::detached();
        let teacher =
            t.input(Array::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.0, 0.3, 0.1]]).unwrap());
        let student =
            t.input(Array::from_rows(&[vec![0.1, 0.4, -0.2], vec![0.7, -0.3, 0.0]]).unwrap());
        let kl = kl_self_distillation(&mut t, teacher, student, true).unwrap();
        assert!(t.value(kl).item() > 0.0);
        let g = t.backward(kl).unwrap();
        assert!(g.wrt(teacher).is_none());
        assert!(g.wrt(student).unwrap().data().iter().any(|v| *v != 0.0));

        let mut t = Tape::detached();
        let teacher =
            t.input(Array::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.0, 0.3, 0.1]]).unwrap());
        let student =
            t.input(Array::from_rows(&[vec![0.1, 0.4, -0.2], vec![0.7, -0.3, 0.0]]).unwrap());
        let kl = kl_self_distillation(&mut t, teacher, student, false).unwrap();
        let g = t.backward(kl).unwrap();
        assert!(g
            .wrt(teacher)
            .unwrap()
            .data()
            .iter()
            .any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn kl_matches_value_form() {
        let a = Array::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.0, 0.3, 0.1]]).unwrap();
        let b = Array::from_rows(&[vec![0.1, 0.4, -0.2], vec![0.7, -0.3, 0.0]]).unwrap();
        let mut t = Tape::detached();
        let (ta, tb) = (t.input(a.clone()), t.input(b.clone()));
        let kl = kl_self_distillation(&mut t, ta, tb, true).unwrap();
        let direct = kl_divergence(
            &OutputDistribution::from_logits(&a),
            &OutputDistribution::from_logits(&b),
        )
        .unwrap();
        assert_abs_diff_eq!(t.value(kl).item(), direct, epsilon = 1e-14);
    }

    #[test]
    fn joint_criterion_examples() {
        let crit = TrainingCriterion {
            lambda: 0.3,
            alpha_p: 0.25,
            alpha_kl: 0.1,
            use_decoder: false,
        };
        let b = joint_criterion(2.0, 3.0, 0.5, &crit).unwrap();
        assert_abs_diff_eq!(b.total, 2.8, epsilon = 1e-12);

        let single = TrainingCriterion {
            alpha_p: 0.0,
            alpha_kl: 0.0,
            ..crit.clone()
        };
        assert_eq!(joint_criterion(2.0, 3.0, 0.5, &single).unwrap().total, 2.0);

        assert!(joint_criterion(1.0, 1.0, 1.0, &TrainingCriterion::ctc_only()).is_ok());
        let negative = TrainingCriterion {
            alpha_p: -0.1,
            ..crit
        };
        assert!(joint_criterion(1.0, 1.0, 1.0, &negative).is_err());
    }

    #[test]
    fn joint_total_is_linear_in_each_weight() {
        let base = TrainingCriterion::conformer();
        let totals: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&a| {
                joint_criterion(
                    2.0,
                    3.0,
                    0.5,
                    &TrainingCriterion {
                        alpha_p: a,
                        ..base.clone()
                    },
                )
                .unwrap()
                .total
            })
            .collect();
        assert_abs_diff_eq!(
            totals[1] - totals[0],
            totals[2] - totals[1],
            epsilon = 1e-12
        );
        let totals: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&a| {
                joint_criterion(
                    2.0,
                    3.0,
                    0.5,
                    &TrainingCriterion {
                        alpha_kl: a,
                        ..base.clone()
                    },
                )
                .unwrap()
                .total
            })
            .collect();
        assert_abs_diff_eq!(
            totals[1] - totals[0],
            totals[2] - totals[1],
            epsilon = 1e-12
        );
    }
}
