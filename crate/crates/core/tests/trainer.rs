use std::collections::BTreeSet;

use foldnet::autodiff::{Array, Tape};
use foldnet::blocks::{BlockConfig, BlockKind};
use foldnet::criteria::{ctc_loss, TrainingCriterion};
use foldnet::engine::{FoldMask, FoldableEncoder, InputKind, ModelConfig};
use foldnet::io::data::{generate_dataset, DataConfig, Dataset, Example};
use foldnet::trainer::{compute_gradients, example_loss, Trainer, TrainerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 5;

fn model(n_p: usize, n_f: usize, decoder: bool) -> FoldableEncoder {
    let cfg = ModelConfig {
        block: BlockConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 24,
            conv_kernel: 3,
            block_kind: BlockKind::Conformer,
        },
        n_physical: n_p,
        max_depth: n_f,
        mask: FoldMask::all(n_p),
        vocab: VOCAB,
        input_kind: InputKind::Tokens,
        input_dim: VOCAB + 1,
        use_decoder: decoder,
    };
    FoldableEncoder::new(cfg, 17).unwrap()
}

fn data() -> Dataset {
    let cfg = DataConfig {
        seed: 4,
        train_size: 200,
        dev_size: 20,
        test_size: 4,
        min_len: 3,
        max_len: 6,
        noise_rate: 0.3,
        frames_per_token: 1,
        feature_dim: 0,
        feature_noise: 0.0,
    };
    generate_dataset(&cfg, VOCAB).unwrap()
}

fn crit(alpha_p: f64, alpha_kl: f64) -> TrainingCriterion {
    TrainingCriterion {
        lambda: 1.0,
        alpha_p,
        alpha_kl,
        use_decoder: false,
    }
}

fn eval_grads(
    m: &FoldableEncoder,
    batch: &[Example],
    c: &TrainingCriterion,
    sg: bool,
) -> Vec<Array> {
    let mut tc = TrainerConfig::new(10, batch.len(), 1e-3, 0);
    tc.stop_gradient = sg;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    compute_gradients(m, batch, c, &tc, &mut rng, false)
        .unwrap()
        .1
}

/// Largest elementwise difference relative to the largest gradient entry.
fn rel_diff(a: &[Array], b: &[Array]) -> f64 {
    let pairs = || {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.data().iter().zip(y.data()))
    };
    let diff = pairs().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = pairs()
        .map(|(x, y)| x.abs().max(y.abs()))
        .fold(0.0, f64::max);
    diff / scale
}

/// Gradient of `scale·L` for one system, batch-averaged.
fn single_system_grads(
    m: &FoldableEncoder,
    batch: &[Example],
    seed_system: bool,
    scale: f64,
) -> Vec<Array> {
    let mut out: Vec<Array> = m
        .store()
        .iter()
        .map(|(_, _, a)| Array::zeros(a.shape()))
        .collect();
    let schedule = if seed_system {
        m.seed_schedule()
    } else {
        m.max_schedule()
    };
    for ex in batch {
        let mut tape = Tape::new(m.store());
        let o = m
            .forward_with_schedule(&mut tape, &schedule, &ex.input, None)
            .unwrap();
        let loss = ctc_loss(&mut tape, o.logits, &ex.target).unwrap();
        for (id, g) in tape.backward(loss).unwrap().into_param_map() {
            for (dst, src) in out[id.index()].data_mut().iter_mut().zip(g.data()) {
                *dst += scale * src / batch.len() as f64;
            }
        }
    }
    out
}

#[test]
fn without_kl_gradient_is_sum_of_two_passes() {
    let m = model(2, 4, false);
    let ds = data();
    let batch = &ds.train[..3];
    let joint = eval_grads(&m, batch, &crit(0.7, 0.0), true);
    let f = single_system_grads(&m, batch, false, 1.0);
    let p = single_system_grads(&m, batch, true, 0.7);
    let sum: Vec<Array> = f
        .iter()
        .zip(&p)
        .map(|(a, b)| {
            Array::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
            )
            .unwrap()
        })
        .collect();
    let err = rel_diff(&joint, &sum);
    assert!(err < 1e-9, "relative difference {err}");
}

#[test]
fn degenerate_unfolding_is_scaled_single_model() {
    let m = model(2, 2, false);
    let ds = data();
    let batch = &ds.train[..3];
    let c = crit(0.7, 0.3);
    let tc = TrainerConfig::new(10, 3, 1e-3, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, joint) = compute_gradients(&m, batch, &c, &tc, &mut rng, false).unwrap();
    assert!(loss.loss_reg.abs() < 1e-12);
    assert!((loss.loss_f - loss.loss_p).abs() < 1e-12);
    let single = single_system_grads(&m, batch, true, 1.7);
    assert!(rel_diff(&joint, &single) < 1e-9);
}

#[test]
fn two_hundred_steps_halve_the_loss() {
    let ds = data();
    let mut tc = TrainerConfig::new(200, 8, 5e-3, 1);
    tc.log_interval = 1000;
    let mut t = Trainer::new(model(2, 4, false), tc, crit(0.7, 0.1)).unwrap();
    let totals: Vec<f64> = (0..200).map(|_| t.step(&ds.train).unwrap().total).collect();
    let first = totals[..10].iter().sum::<f64>() / 10.0;
    let last = totals[190..].iter().sum::<f64>() / 10.0;
    assert!(last <= 0.5 * first, "first {first:.3} last {last:.3}");
}

#[test]
fn decoder_training_runs() {
    let ds = data();
    let mut c = TrainingCriterion::conformer();
    c.alpha_kl = 0.1;
    let mut t = Trainer::new(model(2, 3, true), TrainerConfig::new(5, 2, 1e-3, 1), c).unwrap();
    for _ in 0..5 {
        assert!(t.step(&ds.train).unwrap().total.is_finite());
    }
}

#[test]
fn fixed_seed_gives_identical_trajectory() {
    let ds = data();
    let run = || {
        let mut tc = TrainerConfig::new(20, 4, 3e-3, 9);
        tc.layerdrop_max = 0.2;
        let mut t = Trainer::new(model(2, 4, false), tc, crit(0.7, 0.1)).unwrap();
        let losses: Vec<u64> = (0..20)
            .map(|_| t.step(&ds.train).unwrap().total.to_bits())
            .collect();
        (losses, t.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn parameter_set_is_independent_of_unfolding() {
    let ds = data();
    let ex = &ds.train[0];
    let mut seen = Vec::new();
    for n_f in [3, 12] {
        let m = model(3, n_f, false);
        let mut tape = Tape::new(m.store());
        let keep_p = vec![true; 3];
        let keep_f = vec![true; n_f];
        example_loss(&m, &mut tape, ex, &crit(0.7, 0.1), &keep_p, &keep_f, true).unwrap();
        let used: BTreeSet<_> = tape.used_params().into_iter().collect();
        let all: BTreeSet<_> = m.all_param_ids().into_iter().collect();
        assert_eq!(used, all);
        seen.push((m.store().len(), m.param_count()));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn removing_stop_gradient_changes_gradients() {
    let m = model(2, 4, false);
    let ds = data();
    let batch = &ds.train[..2];
    let c = crit(0.7, 0.5);
    let with = eval_grads(&m, batch, &c, true);
    let without = eval_grads(&m, batch, &c, false);
    assert!(rel_diff(&with, &without) > 1e-6);
}

#[test]
fn resume_past_end_is_rejected() {
    let err = Trainer::resume(
        model(2, 4, false),
        TrainerConfig::new(5, 1, 1e-3, 0),
        crit(0.7, 0.1),
        6,
    )
    .err()
    .unwrap();
    assert!(err.to_string().contains("resume"));
}
