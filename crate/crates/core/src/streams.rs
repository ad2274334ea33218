//! Synthetic nonstationary streams.
//!
//! A domain is a target function `t(x) = A·sin(a·x + φ)` over inputs drawn
//! i.i.d. from `U[-1, 1]^d`, plus the quality of the supervision available in
//! it. All domains generated from one seed share a common base frequency and
//! phase, perturbed per domain name, so that what is learned in one domain
//! partially transfers to another.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, BlockedWeights};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    /// Default `(noise_std, label_prob)` for the difficulty.
    pub fn supervision_defaults(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (0.5, 0.5),
            Difficulty::Hard => (5.0, 0.1),
        }
    }
}

pub const AMPLITUDE_RANGE: (f64, f64) = (10.0, 50.0);
const FREQ_PERTURBATION: f64 = 0.25;
const PHASE_PERTURBATION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: Arc<str>,
    pub amplitude: f64,
    pub freq: Vec<f64>,
    pub phase: f64,
    /// Std of the dense supervision noise.
    pub noise_std: f64,
    /// Probability that a sparse exact label is available.
    pub label_prob: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn target(&self, x: &[f64]) -> f64 {
        let z: f64 = self.freq.iter().zip(x).map(|(a, xv)| a * xv).sum();
        self.amplitude * (z + self.phase).sin()
    }

    pub fn input_dim(&self) -> usize {
        self.freq.len()
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("domains.{}.{}", self.name, f);
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::config(field("amplitude"), "must be finite and > 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(field("noise_std"), "must be finite and >= 0"));
        }
        if !(self.label_prob > 0.0 && self.label_prob <= 1.0) {
            return Err(Error::config(field("label_prob"), "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn with_supervision(mut self, noise_std: f64, label_prob: f64) -> Self {
        self.noise_std = noise_std;
        self.label_prob = label_prob;
        self
    }
}

/// Builds a domain from its name and the world seed. The target function
/// depends only on `(name, seed, input_dim)`; difficulty only sets the
/// supervision quality.
pub fn make_domain(name: &str, seed: u64, difficulty: Difficulty, input_dim: usize) -> DomainSpec {
    let mut world = rng::rng_from(rng::derive(seed, "world", 0));
    let base_freq: Vec<f64> = (0..input_dim).map(|_| world.random_range(-1.0..1.0)).collect();
    let base_phase = world.random_range(-std::f64::consts::PI..std::f64::consts::PI);

    let mut own = rng::rng_from(rng::derive(seed, "domain", rng::fnv1a(name.as_bytes())));
    let amplitude = own.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1);
    let freq = base_freq
        .iter()
        .map(|b| b + FREQ_PERTURBATION * own.random_range(-1.0..1.0))
        .collect();
    let phase = base_phase + PHASE_PERTURBATION * own.random_range(-1.0..1.0);
    let (noise_std, label_prob) = difficulty.supervision_defaults();
    DomainSpec {
        name: Arc::from(name),
        amplitude,
        freq,
        phase,
        noise_std,
        label_prob,
        seed,
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub x: Vec<f64>,
    pub target: f64,
    pub domain: Arc<DomainSpec>,
}

/// Ordered concatenation of domain segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub segments: Vec<(Arc<DomainSpec>, usize)>,
}

impl SequenceSpec {
    pub fn new(segments: Vec<(Arc<DomainSpec>, usize)>) -> Result<Self> {
        let seq = SequenceSpec { segments };
        if seq.is_empty() {
            return Err(Error::config("sequence", "must contain at least one frame"));
        }
        let dims: Vec<usize> = seq.segments.iter().map(|(d, _)| d.input_dim()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::config("sequence", "domains disagree on input dimension"));
        }
        Ok(seq)
    }

    pub fn single(domain: Arc<DomainSpec>, frames: usize) -> Result<Self> {
        Self::new(vec![(domain, frames)])
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_domain(&self, name: &str) -> bool {
        self.segments.iter().any(|(d, _)| &*d.name == name)
    }
}

/// Deterministic frame iterator over a [`SequenceSpec`].
#[derive(Clone, Debug)]
pub struct FrameStream {
    seq: SequenceSpec,
    seed: u64,
    rng: ChaCha8Rng,
    segment: usize,
    in_segment: usize,
    index: usize,
}

impl FrameStream {
    pub fn new(seq: SequenceSpec, seed: u64) -> Self {
        FrameStream {
            rng: rng::rng_from(rng::derive(seed, "frames", 0)),
            seq,
            seed,
            segment: 0,
            in_segment: 0,
            index: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.seq
    }

    /// Rewinds to the first frame; the replay is identical to the first pass.
    pub fn restart(&mut self) {
        *self = FrameStream::new(self.seq.clone(), self.seed);
    }

    /// Next frame, rewinding at the end of the sequence.
    pub fn next_looping(&mut self) -> Frame {
        match self.next() {
            Some(f) => f,
            None => {
                self.restart();
                self.next().expect("sequence is non-empty")
            }
        }
    }
}

impl Iterator for FrameStream {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        while self.segment < self.seq.segments.len() && self.in_segment >= self.seq.segments[self.segment].1 {
            self.segment += 1;
            self.in_segment = 0;
        }
        let (domain, _) = self.seq.segments.get(self.segment)?;
        let domain = domain.clone();
        let x: Vec<f64> = (0..domain.input_dim()).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let target = domain.target(&x);
        let frame = Frame {
            index: self.index,
            x,
            target,
            domain,
        };
        self.in_segment += 1;
        self.index += 1;
        Some(frame)
    }
}

/// Stand-in for pre-training: `steps` FULL updates with exact labels on the
/// neutral domain.
pub fn warmup_pretrain(
    w0: &BlockedWeights,
    neutral: &DomainSpec,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<BlockedWeights> {
    let mut w = w0.clone();
    if steps == 0 {
        return Ok(w);
    }
    let seq = SequenceSpec::single(Arc::new(neutral.clone()), steps)?;
    for frame in FrameStream::new(seq, rng::derive(seed, "warmup", 0)) {
        let grads = model::grad_full(&w, &frame.x, frame.target)?;
        model::sgd_apply_in_place(&mut w, &grads, eta)?;
    }
    Ok(w)
}
