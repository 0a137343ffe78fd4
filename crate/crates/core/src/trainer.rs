//! Joint training of the seed and the deepest unfolded system over one
//! shared parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::evaluate;
use crate::autodiff::{Array, ParamStore, Tape, Var};
use crate::blocks::{eos, SOS};
use crate::criteria::{
    attention_ce_loss, ctc_loss, interpolated_loss, joint_criterion, kl_self_distillation,
    LossBreakdown, TrainingCriterion, LABEL_SMOOTHING,
};
use crate::engine::{FoldableEncoder, UnfoldSchedule};
use crate::error::{Error, Result};
use crate::io::data::Example;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerDropMode {
    /// Drop probability grows linearly with logical position.
    #[default]
    Linear,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    /// Defaults to 5% of `steps`. Use 0 when fine-tuning.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    #[serde(default)]
    pub layerdrop_max: f64,
    #[serde(default)]
    pub layerdrop_mode: LayerDropMode,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Block gradients into the teacher branch of the KL term.
    #[serde(default = "yes")]
    pub stop_gradient: bool,
}

fn default_clip() -> f64 {
    5.0
}

fn default_log_interval() -> usize {
    100
}

fn yes() -> bool {
    true
}

impl TrainerConfig {
    pub fn new(steps: usize, batch_size: usize, lr_peak: f64, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            lr_peak,
            warmup_steps: None,
            weight_decay: 0.0,
            layerdrop_max: 0.0,
            layerdrop_mode: LayerDropMode::Linear,
            seed,
            clip_norm: default_clip(),
            log_interval: default_log_interval(),
            stop_gradient: true,
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |clause: &str| Err(Error::Config(clause.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return fail("steps, batch_size and log_interval must be positive");
        }
        if self.warmup() >= self.steps {
            return fail("warmup_steps must be less than steps");
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail("lr_peak must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.layerdrop_max) {
            return fail("layerdrop_max must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then linear decay to zero at `steps`.
pub fn lr_at(step: usize, cfg: &TrainerConfig) -> f64 {
    let warm = cfg.warmup();
    let step = step.min(cfg.steps);
    if step < warm {
        cfg.lr_peak * step as f64 / warm as f64
    } else {
        cfg.lr_peak * (cfg.steps - step) as f64 / (cfg.steps - warm) as f64
    }
}

/// AdamW moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array> = store
            .iter()
            .map(|(_, _, a)| Array::zeros(a.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step. `grads` is indexed like the store.
pub fn adamw_update(
    store: &mut ParamStore,
    grads: &[Array],
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || opt.m.len() != store.len() {
        return Err(Error::invalid(format!(
            "optimizer holds {} tensors, gradients {}, store {}",
            opt.m.len(),
            grads.len(),
            store.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Shape {
                op: "adamw_update",
                lhs: store.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
    }
    opt.step += 1;
    let c1 = 1.0 - BETA1.powi(opt.step as i32);
    let c2 = 1.0 - BETA2.powi(opt.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id).data_mut();
        let (m, v) = (opt.m[i].data_mut(), opt.v[i].data_mut());
        for (j, &g) in grads[i].data().iter().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let step = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            p[j] -= lr * (step + weight_decay * p[j]);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Keep mask over logical positions. Evaluation mode always keeps.
pub fn layerdrop_sample(
    schedule: &UnfoldSchedule,
    cfg: &TrainerConfig,
    rng: &mut impl Rng,
    train: bool,
) -> Vec<bool> {
    let depth = schedule.logical_depth();
    (0..depth)
        .map(|d| {
            if !train || cfg.layerdrop_max == 0.0 {
                return true;
            }
            let p = match cfg.layerdrop_mode {
                LayerDropMode::Linear => cfg.layerdrop_max * (d + 1) as f64 / depth as f64,
                LayerDropMode::Uniform => cfg.layerdrop_max,
            };
            rng.gen::<f64>() >= p
        })
        .collect()
}

/// Graph nodes of one example's joint loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss_f: Var,
    pub loss_p: Option<Var>,
    pub loss_reg: Option<Var>,
    pub total: Var,
    pub logits_f: Var,
    pub logits_p: Option<Var>,
}

/// Whether the seed branch contributes anything to the objective.
pub fn seed_branch_active(crit: &TrainingCriterion) -> bool {
    crit.alpha_p > 0.0 || crit.alpha_kl > 0.0
}

fn system_loss(
    model: &FoldableEncoder,
    tape: &mut Tape<'_>,
    schedule: &UnfoldSchedule,
    ex: &Example,
    keep: &[bool],
    crit: &TrainingCriterion,
) -> Result<(Var, Var)> {
    let out = model.forward_with_schedule(tape, schedule, &ex.input, Some(keep))?;
    let ctc = ctc_loss(tape, out.logits, &ex.target)?;
    if !crit.use_decoder {
        return Ok((ctc, out.logits));
    }
    let mut prefix = vec![SOS];
    prefix.extend(&ex.target);
    let mut next = ex.target.clone();
    next.push(eos(model.config().vocab));
    let dec = model.decode(tape, out.states, &prefix)?;
    let ce = attention_ce_loss(tape, dec, &next, LABEL_SMOOTHING)?;
    Ok((interpolated_loss(tape, ce, ctc, crit.lambda)?, out.logits))
}

/// Builds the joint loss of one example on `tape`.
///
/// The seed branch is skipped when both its weights are zero; the
/// breakdown then reports `loss_p = loss_reg = 0`.
#[allow(clippy::too_many_arguments)]
pub fn example_loss(
    model: &FoldableEncoder,
    tape: &mut Tape<'_>,
    ex: &Example,
    crit: &TrainingCriterion,
    keep_p: &[bool],
    keep_f: &[bool],
    stop_gradient: bool,
) -> Result<LossNodes> {
    let (loss_f, logits_f) = system_loss(model, tape, &model.max_schedule(), ex, keep_f, crit)?;
    if !seed_branch_active(crit) {
        return Ok(LossNodes {
            loss_f,
            loss_p: None,
            loss_reg: None,
            total: loss_f,
            logits_f,
            logits_p: None,
        });
    }
    let (loss_p, logits_p) = system_loss(model, tape, &model.seed_schedule(), ex, keep_p, crit)?;
    let reg = kl_self_distillation(tape, logits_f, logits_p, stop_gradient)?;
    let wp = tape.scale(loss_p, crit.alpha_p);
    let wr = tape.scale(reg, crit.alpha_kl);
    let total = tape.add(loss_f, wp)?;
    let total = tape.add(total, wr)?;
    Ok(LossNodes {
        loss_f,
        loss_p: Some(loss_p),
        loss_reg: Some(reg),
        total,
        logits_f,
        logits_p: Some(logits_p),
    })
}

/// Batch-mean loss breakdown and gradients, indexed like the store.
pub fn compute_gradients(
    model: &FoldableEncoder,
    batch: &[Example],
    crit: &TrainingCriterion,
    cfg: &TrainerConfig,
    rng: &mut impl Rng,
    train: bool,
) -> Result<(LossBreakdown, Vec<Array>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let store = model.store();
    let mut grads: Vec<Array> = store
        .iter()
        .map(|(_, _, a)| Array::zeros(a.shape()))
        .collect();
    let (seed, max) = (model.seed_schedule(), model.max_schedule());
    let mut sums = [0.0; 3];
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let keep_f = layerdrop_sample(&max, cfg, rng, train);
        let keep_p = layerdrop_sample(&seed, cfg, rng, train);
        let mut tape = Tape::new(store);
        let nodes = example_loss(
            model,
            &mut tape,
            ex,
            crit,
            &keep_p,
            &keep_f,
            cfg.stop_gradient,
        )?;
        sums[0] += tape.value(nodes.loss_f).item();
        sums[1] += nodes.loss_p.map_or(0.0, |v| tape.value(v).item());
        sums[2] += nodes.loss_reg.map_or(0.0, |v| tape.value(v).item());
        for (id, g) in tape.backward(nodes.total)?.into_param_map() {
            grads[id.index()].add_scaled(&g, scale);
        }
    }
    let breakdown = joint_criterion(sums[0] * scale, sums[1] * scale, sums[2] * scale, crit)?;
    Ok((breakdown, grads))
}

/// One optimizer update on `batch`. `step` selects the learning rate.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut FoldableEncoder,
    batch: &[Example],
    cfg: &TrainerConfig,
    crit: &TrainingCriterion,
    opt: &mut OptimizerState,
    step: usize,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let (breakdown, mut grads) = compute_gradients(model, batch, crit, cfg, rng, true)?;
    clip_global_norm(&mut grads, cfg.clip_norm);
    adamw_update(
        model.store_mut(),
        &grads,
        opt,
        lr_at(step, cfg),
        cfg.weight_decay,
    )?;
    Ok(breakdown)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_f: f64,
    pub loss_p: f64,
    pub loss_reg: f64,
    pub total: f64,
    pub dev_err_seed: f64,
    pub dev_err_max: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss_F,loss_P,loss_reg,total,dev_err_seed,dev_err_max";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.lr,
            self.loss_f,
            self.loss_p,
            self.loss_reg,
            self.total,
            self.dev_err_seed,
            self.dev_err_max
        )
    }
}

/// Owns a model and its optimizer for the length of a run.
pub struct Trainer {
    pub model: FoldableEncoder,
    pub opt: OptimizerState,
    pub cfg: TrainerConfig,
    pub crit: TrainingCriterion,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(
        model: FoldableEncoder,
        cfg: TrainerConfig,
        crit: TrainingCriterion,
    ) -> Result<Self> {
        Self::resume(model, cfg, crit, 0)
    }

    /// Continues a run at `step` with fresh optimizer moments.
    pub fn resume(
        model: FoldableEncoder,
        cfg: TrainerConfig,
        crit: TrainingCriterion,
        step: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        crit.validate()?;
        if crit.use_decoder && model.decoder().is_none() {
            return Err(Error::Config(
                "use_decoder needs a model with a decoder".into(),
            ));
        }
        if step > cfg.steps {
            return Err(Error::Config(format!(
                "resume step {step} is past the configured {} steps",
                cfg.steps
            )));
        }
        let opt = OptimizerState::new(model.store());
        Ok(Self {
            model,
            opt,
            cfg,
            crit,
            step,
        })
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    /// Samples a batch from `train` and applies one update.
    pub fn step(&mut self, train: &[Example]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let mut rng = self.step_rng();
        let batch: Vec<Example> = (0..self.cfg.batch_size)
            .map(|_| train[rng.gen_range(0..train.len())].clone())
            .collect();
        let out = train_step(
            &mut self.model,
            &batch,
            &self.cfg,
            &self.crit,
            &mut self.opt,
            self.step,
            &mut rng,
        )?;
        self.step += 1;
        Ok(out)
    }

    /// Trains to `cfg.steps`, evaluating on `dev` every log interval and at
    /// the end. `on_log` sees each row with the current model.
    pub fn run(
        &mut self,
        train: &[Example],
        dev: &[Example],
        mut on_log: impl FnMut(&MetricsRow, &FoldableEncoder) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        let mut acc = LossBreakdown::default();
        let mut n = 0usize;
        while self.step < self.cfg.steps {
            let lr = lr_at(self.step, &self.cfg);
            let b = self.step(train)?;
            acc.loss_f += b.loss_f;
            acc.loss_p += b.loss_p;
            acc.loss_reg += b.loss_reg;
            acc.total += b.total;
            n += 1;
            if self.step.is_multiple_of(self.cfg.log_interval) || self.step == self.cfg.steps {
                let k = n as f64;
                let row = MetricsRow {
                    step: self.step,
                    lr,
                    loss_f: acc.loss_f / k,
                    loss_p: acc.loss_p / k,
                    loss_reg: acc.loss_reg / k,
                    total: acc.total / k,
                    dev_err_seed: evaluate(&self.model, &self.model.seed_schedule(), dev, None)?,
                    dev_err_max: evaluate(&self.model, &self.model.max_schedule(), dev, None)?,
                };
                on_log(&row, &self.model)?;
                rows.push(row);
                acc = LossBreakdown::default();
                n = 0;
            }
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(steps: usize, warmup: usize) -> TrainerConfig {
        let mut c = TrainerConfig::new(steps, 1, 1e-3, 0);
        c.warmup_steps = Some(warmup);
        c
    }

    #[test]
    fn lr_schedule_points() {
        let c = cfg(100, 10);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), 1e-3);
        assert_eq!(lr_at(100, &c), 0.0);
        assert!((lr_at(55, &c) - 5e-4).abs() < 1e-18);
        let c = cfg(100, 0);
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(TrainerConfig::new(200, 1, 1e-3, 0).warmup(), 10);
    }

    #[test]
    fn config_clauses() {
        let mut c = cfg(10, 10);
        assert!(c.validate().unwrap_err().to_string().contains("warmup"));
        c.warmup_steps = Some(0);
        c.layerdrop_max = 1.0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("layerdrop_max"));
    }

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Array::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = scalar_store(0.7);
        let mut opt = OptimizerState::new(&s);
        adamw_update(&mut s, &[Array::scalar(0.0)], &mut opt, 0.1, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().2.item(), 0.7);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut s = scalar_store(1.0);
            let mut opt = OptimizerState::new(&s);
            adamw_update(&mut s, &[Array::scalar(g)], &mut opt, 0.01, 0.0).unwrap();
            let moved = s.iter().next().unwrap().2.item() - 1.0;
            let expect = -0.01 * g.abs() / (g.abs() + ADAM_EPS) * g.signum();
            assert!((moved - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_only_shrinks() {
        let mut s = scalar_store(2.0);
        let mut opt = OptimizerState::new(&s);
        adamw_update(&mut s, &[Array::scalar(0.0)], &mut opt, 0.1, 0.5).unwrap();
        assert!((s.iter().next().unwrap().2.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut s = scalar_store(2.0);
        let mut opt = OptimizerState::new(&s);
        let err = adamw_update(&mut s, &[Array::scalar(f64::NAN)], &mut opt, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("x"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Array::vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut g = vec![Array::vector(vec![0.3, 0.4])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn layerdrop_probabilities() {
        let s = UnfoldSchedule::seed(crate::engine::FoldMask::all(12));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = cfg(10, 0);
        assert!(layerdrop_sample(&s, &c, &mut rng, true).iter().all(|&k| k));
        c.layerdrop_max = 0.5;
        assert!(layerdrop_sample(&s, &c, &mut rng, false).iter().all(|&k| k));
        let trials = 20_000;
        let mut drops = [0usize; 12];
        for _ in 0..trials {
            for (d, k) in layerdrop_sample(&s, &c, &mut rng, true)
                .into_iter()
                .enumerate()
            {
                drops[d] += usize::from(!k);
            }
        }
        for (d, &n) in drops.iter().enumerate() {
            let p = 0.5 * (d + 1) as f64 / 12.0;
            assert!((n as f64 / trials as f64 - p).abs() < 0.015, "position {d}");
        }
        c.layerdrop_max = 0.1;
        let last = c.layerdrop_max * 12.0 / 12.0;
        assert!((last - 0.1).abs() < 1e-15);
    }
}
