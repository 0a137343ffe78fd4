use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{default_schedule, validate_schedule, FoldMask, UnfoldSchedule};
use crate::autodiff::{Array, ParamId, ParamStore, Tape, Var};
use crate::blocks::{
    embed_inputs, project_logits, toy_decoder_forward, BlockConfig, BlockParams, DecoderParams,
    Frontend, Head, Initializer, InputSeq, Lookup, ParamSource,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Tokens,
    Features,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub block: BlockConfig,
    /// Physical layers held in memory.
    pub n_physical: usize,
    /// Deepest logical depth trained for.
    pub max_depth: usize,
    pub mask: FoldMask,
    /// Output labels, excluding the CTC blank.
    pub vocab: usize,
    pub input_kind: InputKind,
    /// Input vocabulary size (tokens) or feature width (features).
    pub input_dim: usize,
    #[serde(default)]
    pub use_decoder: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        let fail = |clause: &str| Err(Error::Config(clause.to_string()));
        if self.n_physical == 0 {
            return fail("n_physical must be positive");
        }
        if self.max_depth < self.n_physical {
            return fail("max_depth must be at least n_physical");
        }
        if self.mask.len() != self.n_physical {
            return fail("mask length must equal n_physical");
        }
        if self.vocab == 0 || self.input_dim == 0 {
            return fail("vocab and input_dim must be positive");
        }
        if default_schedule(self.n_physical, self.max_depth, &self.mask).is_err() {
            return fail("max_depth unreachable under mask");
        }
        Ok(())
    }
}

/// Outputs of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `T × (V+1)` frame logits.
    pub logits: Var,
    /// `T × d_model` states after the last block.
    pub states: Var,
}

/// A seed model of `n_physical` blocks that can run at any supported
/// logical depth. The store is the only parameter memory; schedules never
/// copy it.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldableEncoder {
    config: ModelConfig,
    store: ParamStore,
    frontend: Frontend,
    blocks: Vec<BlockParams>,
    head: Head,
    decoder: Option<DecoderParams>,
}

fn build_parts(
    cfg: &ModelConfig,
    src: &mut impl ParamSource,
) -> Result<(Frontend, Vec<BlockParams>, Head, Option<DecoderParams>)> {
    let d = cfg.block.d_model;
    let frontend = match cfg.input_kind {
        InputKind::Tokens => Frontend::build_tokens(src, cfg.input_dim, d)?,
        InputKind::Features => Frontend::build_features(src, cfg.input_dim, d)?,
    };
    let blocks = (0..cfg.n_physical)
        .map(|i| BlockParams::build(src, &format!("block{i}"), &cfg.block))
        .collect::<Result<Vec<_>>>()?;
    let head = Head::build(src, d, cfg.vocab)?;
    let decoder = if cfg.use_decoder {
        Some(DecoderParams::build(src, &cfg.block, cfg.vocab)?)
    } else {
        None
    };
    Ok((frontend, blocks, head, decoder))
}

/// Copies tensors from another store under new names.
struct CopyFrom<'a, F: Fn(&str) -> String> {
    src: &'a ParamStore,
    dst: &'a mut ParamStore,
    rename: F,
}

impl<F: Fn(&str) -> String> CopyFrom<'_, F> {
    fn copy(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let old = (self.rename)(name);
        let id = Lookup(self.src).weight(&old, shape)?;
        Ok(self.dst.add(name, self.src.get(id).clone()))
    }
}

impl<F: Fn(&str) -> String> ParamSource for CopyFrom<'_, F> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.copy(name, shape)
    }
    fn bias(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.copy(name, shape)
    }
    fn gain(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.copy(name, shape)
    }
}

/// `block{i}.rest` → `(i, "rest")`
fn split_block_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("block")?;
    let dot = rest.find('.')?;
    Some((rest[..dot].parse().ok()?, &rest[dot..]))
}

impl FoldableEncoder {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (frontend, blocks, head, decoder) = build_parts(
            &config,
            &mut Initializer {
                store: &mut store,
                rng: &mut rng,
            },
        )?;
        Ok(Self {
            config,
            store,
            frontend,
            blocks,
            head,
            decoder,
        })
    }

    /// Rebuilds a model around an existing store, checking that it holds
    /// exactly the tensors the config calls for.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (frontend, blocks, head, decoder) = build_parts(&config, &mut Lookup(&store))?;
        let model = Self {
            config,
            store,
            frontend,
            blocks,
            head,
            decoder,
        };
        let expected = model.all_param_ids().len();
        if expected != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "store holds {} tensors, model layout needs {expected}",
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_physical(&self) -> usize {
        self.blocks.len()
    }

    pub fn max_depth(&self) -> usize {
        self.config.max_depth
    }

    pub fn mask(&self) -> &FoldMask {
        &self.config.mask
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn frontend(&self) -> &Frontend {
        &self.frontend
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn decoder(&self) -> Option<&DecoderParams> {
        self.decoder.as_ref()
    }

    /// Every parameter id reachable from the model.
    pub fn all_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.frontend.ids();
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend(self.head.ids());
        if let Some(d) = &self.decoder {
            ids.extend(d.ids());
        }
        ids
    }

    /// Scalar parameters in the encoder blocks only.
    pub fn block_param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(BlockParams::ids)
            .map(|id| self.store.get(id).len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// The all-physical (no unfolding) schedule.
    pub fn seed_schedule(&self) -> UnfoldSchedule {
        UnfoldSchedule::seed(self.config.mask.clone())
    }

    /// The canonical schedule at the maximum depth.
    pub fn max_schedule(&self) -> UnfoldSchedule {
        default_schedule(self.n_physical(), self.config.max_depth, &self.config.mask)
            .expect("max depth validated at construction")
    }

    /// Same parameters, new unfolding limits.
    pub fn with_unfolding(mut self, max_depth: usize, mask: FoldMask) -> Result<Self> {
        self.config.max_depth = max_depth;
        self.config.mask = mask;
        self.config.validate()?;
        Ok(self)
    }

    /// A model built from a subset of physical layers, kept in the given
    /// order and renumbered from zero. Frontend, head and decoder are copied
    /// unchanged; `max_depth` is clamped up to the new layer count.
    pub fn retain_layers(&self, layers: &[usize]) -> Result<Self> {
        if layers.is_empty() || layers.iter().any(|&l| l >= self.n_physical()) {
            return Err(Error::invalid(format!(
                "layer selection {layers:?} invalid for {} physical layers",
                self.n_physical()
            )));
        }
        let mut config = self.config.clone();
        config.n_physical = layers.len();
        config.mask = self.config.mask.select(layers);
        config.max_depth = config.max_depth.max(layers.len());
        if default_schedule(config.n_physical, config.max_depth, &config.mask).is_err() {
            config.max_depth = config.n_physical;
        }
        let mut store = ParamStore::new();
        let (frontend, blocks, head, decoder) = build_parts(
            &config,
            &mut CopyFrom {
                src: &self.store,
                dst: &mut store,
                rename: |name: &str| match split_block_name(name) {
                    Some((i, rest)) => format!("block{}{rest}", layers[i]),
                    None => name.to_string(),
                },
            },
        )?;
        Ok(Self {
            config,
            store,
            frontend,
            blocks,
            head,
            decoder,
        })
    }

    /// An all-physical model with one private copy of layer `i` per
    /// repeat in `schedule`; no weights are shared between the copies.
    pub fn untie(&self, schedule: &UnfoldSchedule) -> Result<Self> {
        validate_schedule(schedule)?;
        let seq = schedule.layer_sequence();
        let mut untied = self.retain_layers(&seq)?;
        let n = seq.len();
        untied.config.max_depth = n;
        untied.config.mask = FoldMask::all(n);
        Ok(untied)
    }

    /// Runs the encoder under `schedule`. Layer `i` runs `repeats[i]`
    /// times back to back. `keep`, when given, has one entry per logical
    /// position; a `false` entry skips that occurrence entirely.
    pub fn forward_with_schedule(
        &self,
        tape: &mut Tape<'_>,
        schedule: &UnfoldSchedule,
        input: &InputSeq,
        keep: Option<&[bool]>,
    ) -> Result<EncoderOutput> {
        validate_schedule(schedule)?;
        if schedule.physical_layers() != self.n_physical() {
            return Err(Error::invalid(format!(
                "schedule covers {} layers, model has {}",
                schedule.physical_layers(),
                self.n_physical()
            )));
        }
        let seq = schedule.layer_sequence();
        if let Some(k) = keep {
            if k.len() != seq.len() {
                return Err(Error::invalid(format!(
                    "keep mask has {} entries for logical depth {}",
                    k.len(),
                    seq.len()
                )));
            }
        }
        let mut h = embed_inputs(tape, &self.frontend, input)?;
        for (pos, &layer) in seq.iter().enumerate() {
            if keep.is_some_and(|k| !k[pos]) {
                continue;
            }
            h = self.blocks[layer].forward(tape, h, &self.config.block)?;
        }
        let logits = project_logits(tape, &self.head, h)?;
        Ok(EncoderOutput { logits, states: h })
    }

    /// Decoder logits for a teacher-forced prefix over encoder states.
    pub fn decode(&self, tape: &mut Tape<'_>, states: Var, prefix: &[usize]) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no decoder"))?;
        toy_decoder_forward(tape, dec, states, prefix, self.config.block.n_heads)
    }

    /// Frame log-posteriors at the given schedule, evaluation mode.
    pub fn log_posteriors(&self, schedule: &UnfoldSchedule, input: &InputSeq) -> Result<Array> {
        self.log_posteriors_with(schedule, input, None)
    }

    pub fn log_posteriors_with(
        &self,
        schedule: &UnfoldSchedule,
        input: &InputSeq,
        keep: Option<&[bool]>,
    ) -> Result<Array> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward_with_schedule(&mut tape, schedule, input, keep)?;
        let lp = tape.log_softmax(out.logits);
        Ok(tape.value(lp).clone())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::blocks::BlockKind;
    use std::collections::BTreeSet;

    pub(crate) fn small_config(n_p: usize, max_depth: usize) -> ModelConfig {
        ModelConfig {
            block: BlockConfig {
                d_model: 8,
                n_heads: 2,
                d_ffn: 12,
                conv_kernel: 3,
                block_kind: BlockKind::Conformer,
            },
            n_physical: n_p,
            max_depth,
            mask: FoldMask::all(n_p),
            vocab: 4,
            input_kind: InputKind::Tokens,
            input_dim: 5,
            use_decoder: false,
        }
    }

    #[test]
    fn config_validation_clauses() {
        let mut c = small_config(3, 6);
        c.max_depth = 2;
        assert!(c.validate().is_err());
        let mut c = small_config(3, 6);
        c.mask = "uu".parse().unwrap();
        assert!(c.validate().is_err());
        let mut c = small_config(3, 6);
        c.mask = "fff".parse().unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_schedule_is_the_plain_forward() {
        let model = FoldableEncoder::new(small_config(3, 6), 1).unwrap();
        let input = InputSeq::Tokens(vec![1, 2, 0, 3]);
        let a = model
            .log_posteriors(&model.seed_schedule(), &input)
            .unwrap();
        let untied = model.untie(&model.seed_schedule()).unwrap();
        let b = untied
            .log_posteriors(&untied.seed_schedule(), &input)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedules_touch_the_same_parameter_set() {
        let model = FoldableEncoder::new(small_config(3, 9), 2).unwrap();
        let input = InputSeq::Tokens(vec![1, 2, 3]);
        let mut seen = Vec::new();
        for depth in 3..=9 {
            let s = default_schedule(3, depth, model.mask()).unwrap();
            let mut tape = Tape::new(model.store());
            model
                .forward_with_schedule(&mut tape, &s, &input, None)
                .unwrap();
            let used: BTreeSet<_> = tape.used_params().into_iter().collect();
            seen.push(used);
        }
        assert!(seen.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(seen[0].len(), model.store().len());
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let model = FoldableEncoder::new(small_config(3, 6), 3).unwrap();
        let bad = UnfoldSchedule::unchecked(vec![3, 1, 1], FoldMask::all(3));
        let mut tape = Tape::new(model.store());
        let err = model
            .forward_with_schedule(&mut tape, &bad, &InputSeq::Tokens(vec![1]), None)
            .unwrap_err();
        assert!(err.to_string().contains("balance rule"), "{err}");
    }

    #[test]
    fn retain_layers_renumbers_and_copies() {
        let model = FoldableEncoder::new(small_config(4, 8), 4).unwrap();
        let small = model.retain_layers(&[1, 3]).unwrap();
        assert_eq!(small.n_physical(), 2);
        let old = model
            .store()
            .get(model.store().find("block3.attn.query.weight").unwrap());
        let new = small
            .store()
            .get(small.store().find("block1.attn.query.weight").unwrap());
        assert_eq!(old, new);
        assert_eq!(small.block_param_count() * 2, model.block_param_count());
        assert_eq!(
            small.param_count() - small.block_param_count(),
            model.param_count() - model.block_param_count()
        );
    }

    #[test]
    fn from_store_roundtrip() {
        let mut c = small_config(2, 4);
        c.use_decoder = true;
        let model = FoldableEncoder::new(c.clone(), 5).unwrap();
        let again = FoldableEncoder::from_store(c, model.store().clone()).unwrap();
        assert_eq!(model, again);
    }
}
