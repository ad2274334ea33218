//! Single-instance online adaptation: no adaptation, full back-propagation
//! over every head, and modular adaptation of one sampled block per step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::{FrameRecord, MetricParams};
use crate::model::{self, BlockedWeights};
use crate::rng;
use crate::streams::{Frame, FrameStream};

pub const DEFAULT_ETA: f64 = 1e-3;
pub const DEFAULT_DECAY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    None,
    Full,
    Mad,
}

/// Supervision available for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SupervisionMode {
    /// Always present, corrupted by Gaussian noise with the given std.
    DenseNoisy { sigma: f64 },
    /// Exact, but present only with probability `p`.
    SparseExact { p: f64 },
}

/// Which supervision regime a client runs under; the parameters come from the
/// domain of each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionKind {
    Dense,
    Sparse,
}

impl SupervisionKind {
    pub fn for_frame(self, frame: &Frame) -> SupervisionMode {
        match self {
            SupervisionKind::Dense => SupervisionMode::DenseNoisy {
                sigma: frame.domain.noise_std,
            },
            SupervisionKind::Sparse => SupervisionMode::SparseExact {
                p: frame.domain.label_prob,
            },
        }
    }
}

pub fn supervise(t_true: f64, mode: SupervisionMode, rng: &mut ChaCha8Rng) -> Option<f64> {
    match mode {
        SupervisionMode::DenseNoisy { sigma } => {
            if sigma == 0.0 {
                return Some(t_true);
            }
            let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
            Some(t_true + noise.sample(rng))
        }
        SupervisionMode::SparseExact { p } => (p >= 1.0 || rng.random::<f64>() < p).then_some(t_true),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    Uniform,
    CountSoftmax,
}

/// Per-block update counts.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateHistogram {
    counts: Vec<f64>,
    decay: f64,
}

impl UpdateHistogram {
    pub fn new(num_blocks: usize) -> Self {
        Self::from_counts(vec![0.0; num_blocks])
    }

    pub fn from_counts(counts: Vec<f64>) -> Self {
        UpdateHistogram {
            counts,
            decay: DEFAULT_DECAY,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn increment(&mut self, block: usize) {
        self.counts[block] += 1.0;
    }

    pub fn increment_all(&mut self) {
        self.counts.iter_mut().for_each(|c| *c += 1.0);
    }

    /// Max-shifted softmax of the counts.
    pub fn softmax(&self) -> Vec<f64> {
        let max = self.counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.counts.iter().map(|c| (c - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn probabilities(&self, policy: SamplingPolicy) -> Vec<f64> {
        match policy {
            SamplingPolicy::Uniform => vec![1.0 / self.len() as f64; self.len()],
            SamplingPolicy::CountSoftmax => self.softmax(),
        }
    }

    pub fn decay_selected(&mut self, block: usize) -> Result<()> {
        let blocks = self.counts.len();
        let c = self
            .counts
            .get_mut(block)
            .ok_or(Error::BlockOutOfRange { index: block, blocks })?;
        *c *= self.decay;
        Ok(())
    }
}

/// Draws a block index from the policy's distribution over `h`.
pub fn softmax_sample(h: &UpdateHistogram, policy: SamplingPolicy, rng: &mut ChaCha8Rng) -> usize {
    let n = h.len();
    assert!(n > 0, "histogram must cover at least one block");
    if policy == SamplingPolicy::Uniform {
        return rng.random_range(0..n);
    }
    let probs = h.softmax();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    n - 1
}

/// Returns a copy of `h` with entry `j` multiplied by the decay factor.
pub fn decay_selected(h: &UpdateHistogram, j: usize) -> Result<UpdateHistogram> {
    let mut out = h.clone();
    out.decay_selected(j)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Final-head prediction made before the update.
    pub prediction: f64,
    /// Per-head losses against the supervision signal; empty on a miss.
    pub losses: Vec<f64>,
    pub supervised: bool,
    pub updated_blocks: Vec<usize>,
}

/// One online step, in place. The prediction in the report always comes from
/// the weights as they were on entry.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step_in_place(
    w: &mut BlockedWeights,
    h: &mut UpdateHistogram,
    frame: &Frame,
    mode: AdaptMode,
    sup: SupervisionMode,
    eta: f64,
    policy: SamplingPolicy,
    sup_rng: &mut ChaCha8Rng,
    sample_rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let trace = model::forward(w, &frame.x)?;
    let prediction = trace.prediction();
    let mut report = StepReport {
        prediction,
        losses: Vec::new(),
        supervised: false,
        updated_blocks: Vec::new(),
    };
    if mode == AdaptMode::None {
        return Ok(report);
    }
    let Some(label) = supervise(frame.target, sup, sup_rng) else {
        return Ok(report);
    };
    report.supervised = true;
    report.losses = model::loss_per_block(&trace, label)?;
    match mode {
        AdaptMode::None => unreachable!(),
        AdaptMode::Full => {
            let grads = model::grad_full_from_trace(w, &trace, label)?;
            model::sgd_apply_in_place(w, &grads, eta)?;
            h.increment_all();
            report.updated_blocks = (0..w.spec().num_blocks).collect();
        }
        AdaptMode::Mad => {
            let block = softmax_sample(h, policy, sample_rng);
            let grad = model::grad_block_from_trace(w, &trace, label, block)?;
            model::sgd_apply_in_place(w, std::slice::from_ref(&grad), eta)?;
            h.increment(block);
            report.updated_blocks = vec![block];
        }
    }
    Ok(report)
}

/// Value-returning form of [`adapt_step_in_place`].
#[allow(clippy::too_many_arguments)]
pub fn adapt_step(
    w: &BlockedWeights,
    frame: &Frame,
    mode: AdaptMode,
    sup: SupervisionMode,
    eta: f64,
    h: &UpdateHistogram,
    policy: SamplingPolicy,
    sup_rng: &mut ChaCha8Rng,
    sample_rng: &mut ChaCha8Rng,
) -> Result<(BlockedWeights, UpdateHistogram, StepReport)> {
    let mut w2 = w.clone();
    let mut h2 = h.clone();
    let report = adapt_step_in_place(&mut w2, &mut h2, frame, mode, sup, eta, policy, sup_rng, sample_rng)?;
    Ok((w2, h2, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub supervision: SupervisionKind,
    pub eta: f64,
    pub policy: SamplingPolicy,
    /// Seeds the block sampler; supervision draws are seeded from the stream.
    pub sampling_seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::Full,
            supervision: SupervisionKind::Dense,
            eta: DEFAULT_ETA,
            policy: SamplingPolicy::CountSoftmax,
            sampling_seed: 0,
        }
    }
}

pub fn supervision_rng(stream_seed: u64) -> ChaCha8Rng {
    rng::rng_from(rng::derive(stream_seed, "supervision", 0))
}

pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    rng::rng_from(rng::derive(seed, "sampling", 0))
}

/// A model together with its adaptation state, owned by one client loop.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub weights: BlockedWeights,
    pub histogram: UpdateHistogram,
    pub config: AdaptConfig,
    sup_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    updates: u64,
}

impl Adapter {
    pub fn new(weights: BlockedWeights, config: AdaptConfig, stream_seed: u64) -> Result<Self> {
        if (config.eta.is_nan() || config.eta <= 0.0) && config.mode != AdaptMode::None {
            return Err(Error::config("eta", "learning rate must be > 0"));
        }
        Ok(Adapter {
            histogram: UpdateHistogram::new(weights.spec().num_blocks),
            weights,
            config,
            sup_rng: supervision_rng(stream_seed),
            sample_rng: sampling_rng(config.sampling_seed),
            updates: 0,
        })
    }

    /// Number of supervised steps that wrote weights.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn step(&mut self, frame: &Frame) -> Result<StepReport> {
        let sup = self.config.supervision.for_frame(frame);
        let report = adapt_step_in_place(
            &mut self.weights,
            &mut self.histogram,
            frame,
            self.config.mode,
            sup,
            self.config.eta,
            self.config.policy,
            &mut self.sup_rng,
            &mut self.sample_rng,
        )?;
        if report.supervised {
            self.updates += 1;
        }
        Ok(report)
    }

    /// Steps on `frame` and returns its pre-update record.
    pub fn step_recorded(&mut self, frame: &Frame, params: &MetricParams) -> Result<(FrameRecord, StepReport)> {
        let version = self.updates;
        let report = self.step(frame)?;
        let record = FrameRecord::new(
            frame.index,
            frame.domain.name.clone(),
            report.prediction,
            frame.target,
            version,
            params,
        );
        Ok((record, report))
    }
}

/// Runs `steps` frames of online adaptation, recording each frame's error
/// before its update.
pub fn run_sequence(
    w0: &BlockedWeights,
    stream: &mut FrameStream,
    config: AdaptConfig,
    steps: usize,
    params: &MetricParams,
) -> Result<(BlockedWeights, Vec<FrameRecord>)> {
    let mut adapter = Adapter::new(w0.clone(), config, stream.seed())?;
    let mut records = Vec::with_capacity(steps);
    for n in 0..steps {
        let frame = stream.next().ok_or(Error::StreamExhausted(n))?;
        records.push(adapter.step_recorded(&frame, params)?.0);
    }
    Ok((adapter.weights, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelSpec};
    use crate::streams::{make_domain, Difficulty, SequenceSpec};
    use std::sync::Arc;

    fn frames(n: usize) -> FrameStream {
        let d = Arc::new(make_domain("easy", 1, Difficulty::Easy, 8));
        FrameStream::new(SequenceSpec::single(d, n).unwrap(), 3)
    }

    #[test]
    fn supervise_edge_cases() {
        let mut r = rng::rng_from(0);
        for _ in 0..100 {
            assert_eq!(supervise(7.5, SupervisionMode::DenseNoisy { sigma: 0.0 }, &mut r), Some(7.5));
            assert_eq!(supervise(7.5, SupervisionMode::SparseExact { p: 1.0 }, &mut r), Some(7.5));
        }
    }

    #[test]
    fn sparse_presence_rate() {
        let mut r = rng::rng_from(42);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| supervise(1.0, SupervisionMode::SparseExact { p: 0.3 }, &mut r).is_some())
            .count();
        assert!((hits as f64 / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn softmax_closed_forms() {
        let p = UpdateHistogram::new(5).softmax();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let p = UpdateHistogram::from_counts(vec![1.0, 0.0]).softmax();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        // huge counts stay finite
        let p = UpdateHistogram::from_counts(vec![1e6, 1e6 - 1.0]).softmax();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_policy_is_flat() {
        let h = UpdateHistogram::from_counts(vec![100.0, 0.0, 3.0]);
        assert_eq!(h.probabilities(SamplingPolicy::Uniform), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn decay_examples() {
        let h = UpdateHistogram::from_counts(vec![10.0, 4.0]);
        let d = decay_selected(&h, 0).unwrap();
        assert_eq!(d.counts(), &[9.0, 4.0]);
        let z = decay_selected(&UpdateHistogram::new(2), 1).unwrap();
        assert_eq!(z.counts(), &[0.0, 0.0]);
        let twice = decay_selected(&d, 0).unwrap();
        assert_eq!(twice.counts()[0], 10.0 * 0.9 * 0.9);
        assert!(decay_selected(&h, 2).is_err());
    }

    #[test]
    fn none_mode_never_writes() {
        let w0 = init_weights(&ModelSpec::default()).unwrap();
        let cfg = AdaptConfig { mode: AdaptMode::None, ..Default::default() };
        let (w, records) = run_sequence(&w0, &mut frames(200), cfg, 200, &MetricParams::default()).unwrap();
        assert!(w.bits_eq(&w0));
        assert_eq!(records.len(), 200);
    }

    #[test]
    fn full_step_increments_every_count() {
        let w0 = init_weights(&ModelSpec::default()).unwrap();
        let frame = frames(1).next().unwrap();
        let sup = SupervisionMode::DenseNoisy { sigma: 0.5 };
        let (_, h, report) = adapt_step(
            &w0,
            &frame,
            AdaptMode::Full,
            sup,
            1e-3,
            &UpdateHistogram::new(5),
            SamplingPolicy::CountSoftmax,
            &mut rng::rng_from(0),
            &mut rng::rng_from(1),
        )
        .unwrap();
        assert_eq!(h.counts(), &[1.0; 5]);
        assert_eq!(report.updated_blocks.len(), 5);
        assert_eq!(report.losses.len(), 5);
    }

    #[test]
    fn mad_step_changes_exactly_one_block() {
        let w0 = init_weights(&ModelSpec::default()).unwrap();
        let frame = frames(1).next().unwrap();
        let (w1, h, report) = adapt_step(
            &w0,
            &frame,
            AdaptMode::Mad,
            SupervisionMode::DenseNoisy { sigma: 0.0 },
            1e-3,
            &UpdateHistogram::new(5),
            SamplingPolicy::Uniform,
            &mut rng::rng_from(0),
            &mut rng::rng_from(5),
        )
        .unwrap();
        let changed: Vec<usize> = (0..5).filter(|&i| !w1.block_bits_eq(&w0, i)).collect();
        assert_eq!(changed, report.updated_blocks);
        assert_eq!(h.counts().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn sparse_miss_leaves_state_untouched() {
        let w0 = init_weights(&ModelSpec::default()).unwrap();
        let mut s = frames(50);
        let mut sup_rng = rng::rng_from(0);
        let mut sample_rng = rng::rng_from(0);
        let mut misses = 0;
        for frame in &mut s {
            let h0 = UpdateHistogram::new(5);
            let (w1, h1, report) = adapt_step(
                &w0,
                &frame,
                AdaptMode::Full,
                SupervisionMode::SparseExact { p: 0.3 },
                1e-3,
                &h0,
                SamplingPolicy::CountSoftmax,
                &mut sup_rng,
                &mut sample_rng,
            )
            .unwrap();
            if !report.supervised {
                misses += 1;
                assert!(w1.bits_eq(&w0));
                assert_eq!(h1, h0);
            }
        }
        assert!(misses > 0);
    }

    #[test]
    fn first_record_predates_updates() {
        let w0 = init_weights(&ModelSpec::default()).unwrap();
        let params = MetricParams::default();
        let none = AdaptConfig { mode: AdaptMode::None, ..Default::default() };
        let full = AdaptConfig { mode: AdaptMode::Full, ..Default::default() };
        let (_, a) = run_sequence(&w0, &mut frames(10), none, 10, &params).unwrap();
        let (_, b) = run_sequence(&w0, &mut frames(10), full, 10, &params).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[9].prediction, b[9].prediction);
    }

    #[test]
    fn exhausted_stream_is_an_error() {
        let w0 = init_weights(&ModelSpec::default()).unwrap();
        let r = run_sequence(&w0, &mut frames(3), AdaptConfig::default(), 4, &MetricParams::default());
        assert!(matches!(r, Err(Error::StreamExhausted(3))));
    }
}
