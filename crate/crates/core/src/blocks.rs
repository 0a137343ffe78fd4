//! Encoder blocks, input frontend, CTC output head and a one-block
//! attention decoder.
//!
//! Conformer blocks follow the macaron layout
//! `½FFN → MHSA → Conv → ½FFN → LayerNorm`, all sub-modules pre-normed and
//! residual. Transformer blocks keep only `MHSA → FFN → LayerNorm`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Conformer,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub conv_kernel: usize,
    pub block_kind: BlockKind,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |clause: &str| Err(Error::Config(clause.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return fail("d_model, n_heads and d_ffn must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail("n_heads must divide d_model");
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return fail("conv_kernel must be odd");
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters in one block.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let norm = 2 * d;
        let ffn = norm + d * self.d_ffn + self.d_ffn + self.d_ffn * d + d;
        let mhsa = norm + 4 * (d * d + d);
        let conv = norm + (d * 2 * d + 2 * d) + (self.conv_kernel * d + d) + norm + (d * d + d);
        match self.block_kind {
            BlockKind::Conformer => 2 * ffn + mhsa + conv + norm,
            BlockKind::Transformer => ffn + mhsa + norm,
        }
    }
}

/// Where block parameters come from: fresh initialization or an existing
/// store looked up by name.
pub trait ParamSource {
    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId>;
    fn bias(&mut self, name: &str, shape: &[usize]) -> Result<ParamId>;
    fn gain(&mut self, name: &str, shape: &[usize]) -> Result<ParamId>;
}

/// Xavier-uniform weights, zero biases, unit gains.
pub struct Initializer<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamSource for Initializer<'_, R> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        Ok(self.store.add(name, Array::new(shape.to_vec(), data)?))
    }

    fn bias(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.add(name, Array::zeros(shape)))
    }

    fn gain(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.add(name, Array::full(shape, 1.0)))
    }
}

/// Resolves parameters by name in an already-populated store.
pub struct Lookup<'a>(pub &'a ParamStore);

impl Lookup<'_> {
    fn find(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .0
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if self.0.get(id).shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                self.0.get(id).shape()
            )));
        }
        Ok(id)
    }
}

impl ParamSource for Lookup<'_> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.find(name, shape)
    }
    fn bias(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.find(name, shape)
    }
    fn gain(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.find(name, shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn build(src: &mut impl ParamSource, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: src.gain(&format!("{prefix}.gain"), &[d])?,
            bias: src.bias(&format!("{prefix}.bias"), &[d])?,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn build(src: &mut impl ParamSource, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: src.weight(&format!("{prefix}.weight"), &[d_in, d_out])?,
            bias: src.bias(&format!("{prefix}.bias"), &[d_out])?,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub norm: NormParams,
    pub up: Linear,
    pub down: Linear,
}

impl FfnParams {
    fn build(src: &mut impl ParamSource, prefix: &str, d: usize, d_ffn: usize) -> Result<Self> {
        Ok(Self {
            norm: NormParams::build(src, &format!("{prefix}.norm"), d)?,
            up: Linear::build(src, &format!("{prefix}.up"), d, d_ffn)?,
            down: Linear::build(src, &format!("{prefix}.down"), d_ffn, d)?,
        })
    }

    fn ids(&self) -> Vec<ParamId> {
        [self.norm.ids(), self.up.ids(), self.down.ids()].concat()
    }

    /// `down(swish(up(norm(x))))`, without the residual.
    fn branch(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.norm.apply(tape, x)?;
        let h = self.up.apply(tape, h)?;
        let h = tape.swish(h);
        self.down.apply(tape, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    fn build(src: &mut impl ParamSource, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::build(src, &format!("{prefix}.query"), d, d)?,
            key: Linear::build(src, &format!("{prefix}.key"), d, d)?,
            value: Linear::build(src, &format!("{prefix}.value"), d, d)?,
            output: Linear::build(src, &format!("{prefix}.output"), d, d)?,
        })
    }

    fn ids(&self) -> Vec<ParamId> {
        [
            self.query.ids(),
            self.key.ids(),
            self.value.ids(),
            self.output.ids(),
        ]
        .concat()
    }

    /// Scaled dot-product multi-head attention of `queries` over `memory`.
    pub fn apply(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        memory: Var,
        n_heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.query.apply(tape, queries)?;
        let k = self.key.apply(tape, memory)?;
        let v = self.value.apply(tape, memory)?;
        let d = tape.value(q).cols();
        let (tq, tk) = (tape.value(q).rows(), tape.value(k).rows());
        let dk = d / n_heads;
        let mask: Option<Vec<bool>> =
            causal.then(|| (0..tq * tk).map(|i| i % tk > i / tk).collect());
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
            if let Some(m) = &mask {
                scores = tape.masked_fill(scores, m, MASK_FILL)?;
            }
            let weights = tape.softmax(scores);
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        self.output.apply(tape, merged)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub norm: NormParams,
    pub pointwise_in: Linear,
    pub depthwise_kernel: ParamId,
    pub depthwise_bias: ParamId,
    /// Stands in for the batch normalization of the reference Conformer.
    pub depthwise_norm: NormParams,
    pub pointwise_out: Linear,
}

impl ConvParams {
    fn build(src: &mut impl ParamSource, prefix: &str, d: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            norm: NormParams::build(src, &format!("{prefix}.norm"), d)?,
            pointwise_in: Linear::build(src, &format!("{prefix}.pointwise_in"), d, 2 * d)?,
            depthwise_kernel: src.weight(&format!("{prefix}.depthwise.weight"), &[kernel, d])?,
            depthwise_bias: src.bias(&format!("{prefix}.depthwise.bias"), &[d])?,
            depthwise_norm: NormParams::build(src, &format!("{prefix}.depthwise_norm"), d)?,
            pointwise_out: Linear::build(src, &format!("{prefix}.pointwise_out"), d, d)?,
        })
    }

    fn ids(&self) -> Vec<ParamId> {
        [
            self.norm.ids().to_vec(),
            self.pointwise_in.ids().to_vec(),
            vec![self.depthwise_kernel, self.depthwise_bias],
            self.depthwise_norm.ids().to_vec(),
            self.pointwise_out.ids().to_vec(),
        ]
        .concat()
    }

    fn branch(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        let h = self.norm.apply(tape, x)?;
        let h = self.pointwise_in.apply(tape, h)?;
        let content = tape.slice_cols(h, 0, d)?;
        let gate = tape.slice_cols(h, d, d)?;
        let gate = tape.sigmoid(gate);
        let h = tape.mul(content, gate)?;
        let (kw, kb) = (
            tape.param(self.depthwise_kernel),
            tape.param(self.depthwise_bias),
        );
        let h = tape.depthwise_conv1d(h, kw, kb)?;
        let h = self.depthwise_norm.apply(tape, h)?;
        let h = tape.swish(h);
        self.pointwise_out.apply(tape, h)
    }
}

/// Parameters of one physical encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ffn1: Option<FfnParams>,
    pub attn_norm: NormParams,
    pub attn: AttentionParams,
    pub conv: Option<ConvParams>,
    pub ffn2: FfnParams,
    pub final_norm: NormParams,
}

impl BlockParams {
    pub fn build(src: &mut impl ParamSource, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let conformer = cfg.block_kind == BlockKind::Conformer;
        let ffn1 = if conformer {
            Some(FfnParams::build(
                src,
                &format!("{prefix}.ffn1"),
                d,
                cfg.d_ffn,
            )?)
        } else {
            None
        };
        let attn_norm = NormParams::build(src, &format!("{prefix}.attn_norm"), d)?;
        let attn = AttentionParams::build(src, &format!("{prefix}.attn"), d)?;
        let conv = if conformer {
            Some(ConvParams::build(
                src,
                &format!("{prefix}.conv"),
                d,
                cfg.conv_kernel,
            )?)
        } else {
            None
        };
        let ffn2 = FfnParams::build(src, &format!("{prefix}.ffn2"), d, cfg.d_ffn)?;
        let final_norm = NormParams::build(src, &format!("{prefix}.final_norm"), d)?;
        Ok(Self {
            ffn1,
            attn_norm,
            attn,
            conv,
            ffn2,
            final_norm,
        })
    }

    /// Every parameter of the block, in construction order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(f) = &self.ffn1 {
            ids.extend(f.ids());
        }
        ids.extend(self.attn_norm.ids());
        ids.extend(self.attn.ids());
        if let Some(c) = &self.conv {
            ids.extend(c.ids());
        }
        ids.extend(self.ffn2.ids());
        ids.extend(self.final_norm.ids());
        ids
    }

    /// Applies the block according to its kind.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, cfg: &BlockConfig) -> Result<Var> {
        match cfg.block_kind {
            BlockKind::Conformer => conformer_block_forward(tape, self, x, cfg),
            BlockKind::Transformer => transformer_block_forward(tape, self, x, cfg),
        }
    }
}

fn check_width(tape: &Tape<'_>, x: Var, cfg: &BlockConfig, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != cfg.d_model {
        return Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![cfg.d_model],
        });
    }
    Ok(())
}

pub fn conformer_block_forward(
    tape: &mut Tape<'_>,
    p: &BlockParams,
    x: Var,
    cfg: &BlockConfig,
) -> Result<Var> {
    check_width(tape, x, cfg, "conformer_block")?;
    let (ffn1, conv) = match (&p.ffn1, &p.conv) {
        (Some(f), Some(c)) => (f, c),
        _ => {
            return Err(Error::invalid(
                "conformer block needs ffn1 and conv parameters",
            ))
        }
    };
    let h = ffn1.branch(tape, x)?;
    let h = tape.scale(h, 0.5);
    let x1 = tape.add(x, h)?;

    let n = p.attn_norm.apply(tape, x1)?;
    let h = p.attn.apply(tape, n, n, cfg.n_heads, false)?;
    let x2 = tape.add(x1, h)?;

    let h = conv.branch(tape, x2)?;
    let x3 = tape.add(x2, h)?;

    let h = p.ffn2.branch(tape, x3)?;
    let h = tape.scale(h, 0.5);
    let x4 = tape.add(x3, h)?;

    p.final_norm.apply(tape, x4)
}

pub fn transformer_block_forward(
    tape: &mut Tape<'_>,
    p: &BlockParams,
    x: Var,
    cfg: &BlockConfig,
) -> Result<Var> {
    check_width(tape, x, cfg, "transformer_block")?;
    let n = p.attn_norm.apply(tape, x)?;
    let h = p.attn.apply(tape, n, n, cfg.n_heads, false)?;
    let x1 = tape.add(x, h)?;

    let h = p.ffn2.branch(tape, x1)?;
    let x2 = tape.add(x1, h)?;

    p.final_norm.apply(tape, x2)
}

/// Fixed sinusoidal position table: `sin` on even columns, `cos` on odd.
pub fn position_encoding(len: usize, d: usize) -> Array {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for j in 0..d {
            let freq = 1.0 / 10000f64.powf((j - j % 2) as f64 / d as f64);
            let angle = t as f64 * freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Array::new(vec![len, d], data).expect("len and d are positive")
}

/// One input utterance: token ids or a `T×F` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum InputSeq {
    Tokens(Vec<usize>),
    Features(Array),
}

impl InputSeq {
    pub fn frames(&self) -> usize {
        match self {
            InputSeq::Tokens(t) => t.len(),
            InputSeq::Features(f) => f.rows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Frontend {
    Tokens { table: ParamId },
    Features { proj: Linear },
}

impl Frontend {
    pub fn build_tokens(src: &mut impl ParamSource, vocab: usize, d: usize) -> Result<Self> {
        Ok(Frontend::Tokens {
            table: src.weight("frontend.embedding", &[vocab, d])?,
        })
    }

    pub fn build_features(src: &mut impl ParamSource, dim: usize, d: usize) -> Result<Self> {
        Ok(Frontend::Features {
            proj: Linear::build(src, "frontend.proj", dim, d)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Frontend::Tokens { table } => vec![*table],
            Frontend::Features { proj } => proj.ids().to_vec(),
        }
    }
}

/// Embedding lookup or linear projection, plus sinusoidal positions.
pub fn embed_inputs(tape: &mut Tape<'_>, frontend: &Frontend, input: &InputSeq) -> Result<Var> {
    let h = match (frontend, input) {
        (Frontend::Tokens { table }, InputSeq::Tokens(tokens)) => {
            let t = tape.param(*table);
            tape.embedding(t, tokens)?
        }
        (Frontend::Features { proj }, InputSeq::Features(f)) => {
            let x = tape.input(f.clone());
            proj.apply(tape, x)?
        }
        _ => {
            return Err(Error::invalid(
                "input kind does not match the model frontend",
            ))
        }
    };
    let (len, d) = (tape.value(h).rows(), tape.value(h).cols());
    let pe = tape.input(position_encoding(len, d));
    tape.add(h, pe)
}

/// Frame logits over `V` labels plus the CTC blank at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub proj: Linear,
}

impl Head {
    pub fn build(src: &mut impl ParamSource, d: usize, vocab: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::build(src, "head.proj", d, vocab + 1)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.proj.ids().to_vec()
    }
}

pub fn project_logits(tape: &mut Tape<'_>, head: &Head, h: Var) -> Result<Var> {
    head.proj.apply(tape, h)
}

/// Decoder token ids: start-of-sequence 0, labels `1..=V`, end-of-sequence `V+1`.
pub const SOS: usize = 0;

pub fn eos(vocab: usize) -> usize {
    vocab + 1
}

/// One causally masked decoder block with cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub embedding: ParamId,
    pub self_norm: NormParams,
    pub self_attn: AttentionParams,
    pub cross_norm: NormParams,
    pub cross_attn: AttentionParams,
    pub ffn_norm: NormParams,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
    pub final_norm: NormParams,
    pub out: Linear,
    pub vocab: usize,
}

impl DecoderParams {
    pub fn build(src: &mut impl ParamSource, cfg: &BlockConfig, vocab: usize) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            embedding: src.weight("decoder.embedding", &[vocab + 2, d])?,
            self_norm: NormParams::build(src, "decoder.self_norm", d)?,
            self_attn: AttentionParams::build(src, "decoder.self_attn", d)?,
            cross_norm: NormParams::build(src, "decoder.cross_norm", d)?,
            cross_attn: AttentionParams::build(src, "decoder.cross_attn", d)?,
            ffn_norm: NormParams::build(src, "decoder.ffn_norm", d)?,
            ffn_up: Linear::build(src, "decoder.ffn_up", d, cfg.d_ffn)?,
            ffn_down: Linear::build(src, "decoder.ffn_down", cfg.d_ffn, d)?,
            final_norm: NormParams::build(src, "decoder.final_norm", d)?,
            out: Linear::build(src, "decoder.out", d, vocab + 2)?,
            vocab,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.self_norm.ids());
        ids.extend(self.self_attn.ids());
        ids.extend(self.cross_norm.ids());
        ids.extend(self.cross_attn.ids());
        ids.extend(self.ffn_norm.ids());
        ids.extend(self.ffn_up.ids());
        ids.extend(self.ffn_down.ids());
        ids.extend(self.final_norm.ids());
        ids.extend(self.out.ids());
        ids
    }
}

/// Teacher-forced next-token logits, one row per prefix position, over
/// `V + 2` classes (the start token is never a valid target).
pub fn toy_decoder_forward(
    tape: &mut Tape<'_>,
    p: &DecoderParams,
    enc: Var,
    prefix: &[usize],
    n_heads: usize,
) -> Result<Var> {
    match prefix.first() {
        None => return Err(Error::invalid("decoder prefix is empty")),
        Some(&t) if t != SOS => {
            return Err(Error::invalid(
                "decoder prefix must start with the start token",
            ))
        }
        _ => {}
    }
    let table = tape.param(p.embedding);
    let x = tape.embedding(table, prefix)?;
    let d = tape.value(x).cols();
    let pe = tape.input(position_encoding(prefix.len(), d));
    let x = tape.add(x, pe)?;

    let n = p.self_norm.apply(tape, x)?;
    let h = p.self_attn.apply(tape, n, n, n_heads, true)?;
    let x = tape.add(x, h)?;

    let n = p.cross_norm.apply(tape, x)?;
    let h = p.cross_attn.apply(tape, n, enc, n_heads, false)?;
    let x = tape.add(x, h)?;

    let n = p.ffn_norm.apply(tape, x)?;
    let h = p.ffn_up.apply(tape, n)?;
    let h = tape.gelu(h);
    let h = p.ffn_down.apply(tape, h)?;
    let x = tape.add(x, h)?;

    let x = p.final_norm.apply(tape, x)?;
    p.out.apply(tape, x)
}
