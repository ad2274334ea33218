//! Block-partitioned chain learner.
//!
//! Block `i` maps its input (the raw input vector for the first block, the
//! previous hidden state otherwise) through `h_i = tanh(W_i·in + b_i)` and
//! emits a scalar prediction from its own head, `y_i = v_i·h_i + c_i`. The
//! final prediction is the last head's output.
//!
//! Parameters are stored as `f32`. Forward and backward passes run in `f64`
//! on the widened parameters; updates are rounded back to `f32`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub num_blocks: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            num_blocks: 5,
            input_dim: 8,
            hidden_dim: 16,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn new(num_blocks: usize, input_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            num_blocks,
            input_dim,
            hidden_dim,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::InvalidSpec("num_blocks must be >= 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidSpec("hidden_dim must be >= 1".into()));
        }
        // Segment ids reserve 12 bits for the block index on the wire.
        if self.num_blocks > 0x0fff {
            return Err(Error::InvalidSpec("num_blocks must be < 4096".into()));
        }
        Ok(())
    }

    /// Width of the vector feeding block `i`.
    pub fn block_input_dim(&self, block: usize) -> usize {
        if block == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn encoder_param_count(&self, block: usize) -> usize {
        self.hidden_dim * self.block_input_dim(block) + self.hidden_dim
    }

    pub fn decoder_param_count(&self) -> usize {
        self.hidden_dim + 1
    }

    pub fn block_param_count(&self, block: usize) -> usize {
        self.encoder_param_count(block) + self.decoder_param_count()
    }

    pub fn total_param_count(&self) -> usize {
        (0..self.num_blocks).map(|i| self.block_param_count(i)).sum()
    }

    pub fn segment_param_count(&self, seg: Segment) -> usize {
        match seg.kind {
            SegmentKind::Full => self.block_param_count(seg.block),
            SegmentKind::Encoder => self.encoder_param_count(seg.block),
            SegmentKind::Decoder => self.decoder_param_count(),
        }
    }

    pub fn check_block(&self, block: usize) -> Result<()> {
        if block < self.num_blocks {
            Ok(())
        } else {
            Err(Error::BlockOutOfRange {
                index: block,
                blocks: self.num_blocks,
            })
        }
    }
}

/// Which part of a block a segment covers. The encoder part is `(W, b)`, the
/// decoder part is the head `(v, c)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentKind {
    Full,
    Encoder,
    Decoder,
}

/// A contiguous slice of the parameter set: all of a block, or one of its
/// two parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Segment {
    pub block: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn full(block: usize) -> Self {
        Segment {
            block,
            kind: SegmentKind::Full,
        }
    }

    pub fn encoder(block: usize) -> Self {
        Segment {
            block,
            kind: SegmentKind::Encoder,
        }
    }

    pub fn decoder(block: usize) -> Self {
        Segment {
            block,
            kind: SegmentKind::Decoder,
        }
    }

    /// Wire id: block index in the low 12 bits, part in bits 12..14
    /// (0 = full block, 1 = encoder, 2 = decoder).
    pub fn wire_id(&self) -> u16 {
        let kind = match self.kind {
            SegmentKind::Full => 0u16,
            SegmentKind::Encoder => 1,
            SegmentKind::Decoder => 2,
        };
        (kind << 12) | (self.block as u16 & 0x0fff)
    }

    pub fn from_wire_id(id: u16) -> Result<Self> {
        let block = (id & 0x0fff) as usize;
        let kind = match id >> 12 {
            0 => SegmentKind::Full,
            1 => SegmentKind::Encoder,
            2 => SegmentKind::Decoder,
            _ => return Err(Error::BadBlockId(id)),
        };
        Ok(Segment { block, kind })
    }

    /// The encoder/decoder parts this segment is made of.
    pub fn parts(&self) -> &'static [SegmentKind] {
        match self.kind {
            SegmentKind::Full => &[SegmentKind::Encoder, SegmentKind::Decoder],
            SegmentKind::Encoder => &[SegmentKind::Encoder],
            SegmentKind::Decoder => &[SegmentKind::Decoder],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// `hidden_dim × in_dim`, row-major.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub v: Vec<f32>,
    pub c: f32,
}

impl Block {
    fn zeros(in_dim: usize, hidden: usize) -> Self {
        Block {
            w: vec![0.0; hidden * in_dim],
            b: vec![0.0; hidden],
            v: vec![0.0; hidden],
            c: 0.0,
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len() + self.v.len() + 1
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.w
            .iter_mut()
            .chain(self.b.iter_mut())
            .chain(self.v.iter_mut())
            .chain(std::iter::once(&mut self.c))
    }

    fn params(&self) -> impl Iterator<Item = &f32> {
        self.w
            .iter()
            .chain(self.b.iter())
            .chain(self.v.iter())
            .chain(std::iter::once(&self.c))
    }
}

/// The full parameter set, one [`Block`] per model block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockedWeights {
    spec: ModelSpec,
    blocks: Vec<Block>,
}

impl BlockedWeights {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let blocks = (0..spec.num_blocks)
            .map(|i| Block::zeros(spec.block_input_dim(i), spec.hidden_dim))
            .collect();
        Ok(BlockedWeights { spec, blocks })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> Result<&Block> {
        self.spec.check_block(i)?;
        Ok(&self.blocks[i])
    }

    pub fn block_mut(&mut self, i: usize) -> Result<&mut Block> {
        self.spec.check_block(i)?;
        Ok(&mut self.blocks[i])
    }

    pub fn total_param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    /// Parameters of `seg` in serialization order.
    pub fn segment_params(&self, seg: Segment) -> Result<Vec<f32>> {
        let blk = self.block(seg.block)?;
        let mut out = Vec::with_capacity(self.spec.segment_param_count(seg));
        if matches!(seg.kind, SegmentKind::Full | SegmentKind::Encoder) {
            out.extend_from_slice(&blk.w);
            out.extend_from_slice(&blk.b);
        }
        if matches!(seg.kind, SegmentKind::Full | SegmentKind::Decoder) {
            out.extend_from_slice(&blk.v);
            out.push(blk.c);
        }
        Ok(out)
    }

    /// Overwrites the parameters of `seg`; `values` must be in serialization order.
    pub fn set_segment(&mut self, seg: Segment, values: &[f32]) -> Result<()> {
        let expected = self.spec.segment_param_count(seg);
        self.spec.check_block(seg.block)?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        let blk = &mut self.blocks[seg.block];
        let mut rest = values;
        if matches!(seg.kind, SegmentKind::Full | SegmentKind::Encoder) {
            let (w, tail) = rest.split_at(blk.w.len());
            blk.w.copy_from_slice(w);
            let (b, tail) = tail.split_at(blk.b.len());
            blk.b.copy_from_slice(b);
            rest = tail;
        }
        if matches!(seg.kind, SegmentKind::Full | SegmentKind::Decoder) {
            let (v, tail) = rest.split_at(blk.v.len());
            blk.v.copy_from_slice(v);
            blk.c = tail[0];
        }
        Ok(())
    }

    /// Little-endian `f32` serialization: for each block `W` (row-major), `b`, `v`, `c`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.total_param_count());
        for blk in &self.blocks {
            for p in blk.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(spec: ModelSpec, bytes: &[u8]) -> Result<Self> {
        let mut weights = Self::zeros(spec)?;
        let expected = 4 * weights.total_param_count();
        if bytes.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: bytes.len(),
            });
        }
        let mut chunks = bytes.chunks_exact(4);
        for blk in &mut weights.blocks {
            for (p, chunk) in blk.params_mut().zip(&mut chunks) {
                *p = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        Ok(weights)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and matching NaNs by payload.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.to_bytes() == other.to_bytes()
    }

    pub fn block_bits_eq(&self, other: &Self, i: usize) -> bool {
        let (a, b) = (&self.blocks[i], &other.blocks[i]);
        a.params().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Draws every parameter i.i.d. from `U[-0.5, 0.5]` using a generator seeded
/// with `spec.seed`.
pub fn init_weights(spec: &ModelSpec) -> Result<BlockedWeights> {
    let mut weights = BlockedWeights::zeros(*spec)?;
    let mut rng = rng::rng_from(rng::derive(spec.seed, "init_weights", 0));
    for blk in &mut weights.blocks {
        for p in blk.params_mut() {
            *p = rng.random_range(-0.5f32..=0.5f32);
        }
    }
    Ok(weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

impl ForwardTrace {
    pub fn prediction(&self) -> f64 {
        *self.outputs.last().expect("at least one block")
    }
}

pub fn forward(w: &BlockedWeights, x: &[f64]) -> Result<ForwardTrace> {
    let spec = w.spec();
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            got: x.len(),
        });
    }
    let m = spec.hidden_dim;
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(spec.num_blocks);
    let mut outputs = Vec::with_capacity(spec.num_blocks);
    for (i, blk) in w.blocks.iter().enumerate() {
        let input: &[f64] = if i == 0 { x } else { &hidden[i - 1] };
        let h: Vec<f64> = (0..m)
            .map(|r| {
                let row = &blk.w[r * input.len()..(r + 1) * input.len()];
                let pre = row
                    .iter()
                    .zip(input)
                    .fold(blk.b[r] as f64, |acc, (&wv, &xv)| acc + wv as f64 * xv);
                pre.tanh()
            })
            .collect();
        let y = h
            .iter()
            .zip(&blk.v)
            .fold(blk.c as f64, |acc, (&hv, &vv)| acc + hv * vv as f64);
        hidden.push(h);
        outputs.push(y);
    }
    Ok(ForwardTrace {
        input: x.to_vec(),
        hidden,
        outputs,
    })
}

/// Squared error of every head against `target`.
pub fn loss_per_block(trace: &ForwardTrace, target: f64) -> Result<Vec<f64>> {
    if !target.is_finite() {
        return Err(Error::NonFiniteTarget(target));
    }
    Ok(trace.outputs.iter().map(|y| (y - target).powi(2)).collect())
}

/// Gradient with respect to one block's parameters, laid out like [`Block`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGradient {
    pub block: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
    pub c: f64,
}

impl BlockGradient {
    /// Flattened in serialization order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w.len() + self.b.len() + self.v.len() + 1);
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
        out.extend_from_slice(&self.v);
        out.push(self.c);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|g| g.is_finite())
    }
}

/// Local gradient of block `i` given the gradient reaching its hidden state.
fn block_local_grad(
    blk: &Block,
    block: usize,
    input: &[f64],
    h: &[f64],
    dy: f64,
    mut g_h: Vec<f64>,
) -> (BlockGradient, Vec<f64>) {
    for (g, &vv) in g_h.iter_mut().zip(&blk.v) {
        *g += dy * vv as f64;
    }
    let g_pre: Vec<f64> = g_h.iter().zip(h).map(|(g, hv)| g * (1.0 - hv * hv)).collect();
    let n_in = input.len();
    let mut gw = vec![0.0; g_pre.len() * n_in];
    for (r, &gp) in g_pre.iter().enumerate() {
        for (k, &xv) in input.iter().enumerate() {
            gw[r * n_in + k] = gp * xv;
        }
    }
    let grad = BlockGradient {
        block,
        w: gw,
        b: g_pre.clone(),
        v: h.iter().map(|hv| dy * hv).collect(),
        c: dy,
    };
    (grad, g_pre)
}

/// Gradient of `Σ_i ℓ_i` with respect to every parameter, computed from an
/// existing forward trace.
pub fn grad_full_from_trace(
    w: &BlockedWeights,
    trace: &ForwardTrace,
    target: f64,
) -> Result<Vec<BlockGradient>> {
    if !target.is_finite() {
        return Err(Error::NonFiniteTarget(target));
    }
    let spec = w.spec();
    let m = spec.hidden_dim;
    let mut grads = Vec::with_capacity(spec.num_blocks);
    let mut carry = vec![0.0; m];
    for i in (0..spec.num_blocks).rev() {
        let blk = &w.blocks[i];
        let input: &[f64] = if i == 0 { &trace.input } else { &trace.hidden[i - 1] };
        let dy = 2.0 * (trace.outputs[i] - target);
        let (grad, g_pre) = block_local_grad(blk, i, input, &trace.hidden[i], dy, carry);
        // Backpropagate into the previous hidden state: W_i^T · g_pre.
        carry = vec![0.0; input.len()];
        if i > 0 {
            for (r, &gp) in g_pre.iter().enumerate() {
                let row = &blk.w[r * input.len()..(r + 1) * input.len()];
                for (c, &wv) in carry.iter_mut().zip(row) {
                    *c += gp * wv as f64;
                }
            }
        }
        grads.push(grad);
    }
    grads.reverse();
    Ok(grads)
}

pub fn grad_full(w: &BlockedWeights, x: &[f64], target: f64) -> Result<Vec<BlockGradient>> {
    let trace = forward(w, x)?;
    grad_full_from_trace(w, &trace, target)
}

/// Gradient of `ℓ_i` alone, restricted to block `i`'s own parameters.
/// Contributions of `ℓ_i` to upstream blocks are not computed.
pub fn grad_block_from_trace(
    w: &BlockedWeights,
    trace: &ForwardTrace,
    target: f64,
    block: usize,
) -> Result<BlockGradient> {
    w.spec().check_block(block)?;
    if !target.is_finite() {
        return Err(Error::NonFiniteTarget(target));
    }
    let input: &[f64] = if block == 0 {
        &trace.input
    } else {
        &trace.hidden[block - 1]
    };
    let dy = 2.0 * (trace.outputs[block] - target);
    let zero = vec![0.0; w.spec().hidden_dim];
    let (grad, _) = block_local_grad(&w.blocks[block], block, input, &trace.hidden[block], dy, zero);
    Ok(grad)
}

pub fn grad_block(w: &BlockedWeights, x: &[f64], target: f64, block: usize) -> Result<BlockGradient> {
    w.spec().check_block(block)?;
    let trace = forward(w, x)?;
    grad_block_from_trace(w, &trace, target, block)
}

/// `w[i] - η·g[i]` for every block covered by `grads`; other blocks are copied
/// unchanged.
pub fn sgd_apply(w: &BlockedWeights, grads: &[BlockGradient], eta: f64) -> Result<BlockedWeights> {
    let mut out = w.clone();
    sgd_apply_in_place(&mut out, grads, eta)?;
    Ok(out)
}

pub fn sgd_apply_in_place(w: &mut BlockedWeights, grads: &[BlockGradient], eta: f64) -> Result<()> {
    for g in grads {
        let blk = w.block_mut(g.block)?;
        if g.w.len() != blk.w.len() || g.b.len() != blk.b.len() || g.v.len() != blk.v.len() {
            return Err(Error::DimensionMismatch {
                expected: blk.param_count(),
                got: g.w.len() + g.b.len() + g.v.len() + 1,
            });
        }
        let step = |p: &mut f32, d: f64| *p = (*p as f64 - eta * d) as f32;
        blk.w.iter_mut().zip(&g.w).for_each(|(p, &d)| step(p, d));
        blk.b.iter_mut().zip(&g.b).for_each(|(p, &d)| step(p, d));
        blk.v.iter_mut().zip(&g.v).for_each(|(p, &d)| step(p, d));
        step(&mut blk.c, g.c);
    }
    Ok(())
}
