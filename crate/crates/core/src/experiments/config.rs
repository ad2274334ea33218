//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! mode = "fed_full"            # none | full | mad | fed_full | fed_mad | fed_dec | fed_last | fed_enc
//! supervision = "sparse"       # dense (noisy) | sparse (exact)
//! update_interval = 10
//!
//! [[domains]]
//! name = "night"
//! difficulty = "hard"
//!
//! [listener]
//! sequence = [{ domain = "night", frames = 2000 }]
//!
//! [active]
//! count = 3
//! pool = ["city", "road"]
//! ```
//!
//! Every other field has a default; see the section structs below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptConfig, AdaptMode, SamplingPolicy, SupervisionKind, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::federation::FedMode;
use crate::metrics::MetricParams;
use crate::model::{init_weights, ModelSpec};
use crate::rng;
use crate::simnet::{ClientStream, Engine, Schedule, SimConfig, SimMode};
use crate::streams::{make_domain, warmup_pretrain, Difficulty, DomainSpec, SequenceSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    Full,
    Mad,
    FedFull,
    FedMad,
    FedDec,
    FedLast,
    FedEnc,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Full => "full",
            Mode::Mad => "mad",
            Mode::FedFull => "fed_full",
            Mode::FedMad => "fed_mad",
            Mode::FedDec => "fed_dec",
            Mode::FedLast => "fed_last",
            Mode::FedEnc => "fed_enc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s))
            .map_err(|_| Error::config("mode", format!("unknown mode `{s}`")))
    }

    pub fn sim_mode(self) -> SimMode {
        match self {
            Mode::None => SimMode::Local(AdaptMode::None),
            Mode::Full => SimMode::Local(AdaptMode::Full),
            Mode::Mad => SimMode::Local(AdaptMode::Mad),
            Mode::FedFull => SimMode::Federated(FedMode::FedFull),
            Mode::FedMad => SimMode::Federated(FedMode::FedMad),
            Mode::FedDec => SimMode::Federated(FedMode::FedDec),
            Mode::FedLast => SimMode::Federated(FedMode::FedLast),
            Mode::FedEnc => SimMode::Federated(FedMode::FedEnc),
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self.sim_mode(), SimMode::Federated(_))
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Initialization seed; derived from the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSpec::default();
        ModelSection {
            num_blocks: d.num_blocks,
            input_dim: d.input_dim,
            hidden_dim: d.hidden_dim,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub d1_abs_threshold: f64,
    pub d1_rel_threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let d = MetricParams::default();
        MetricsSection {
            d1_abs_threshold: d.d1_abs_threshold,
            d1_rel_threshold: d.d1_rel_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub active_period: f64,
    pub listener_period: f64,
    pub start_barrier: bool,
    pub loop_sequences: bool,
    pub latency: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = Schedule::default();
        ScheduleSection {
            active_period: d.active_period,
            listener_period: d.listener_period,
            start_barrier: d.start_barrier,
            loop_sequences: d.loop_sequences,
            latency: d.latency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupSection {
    /// Neutral domain used for pre-training; no warm-up when absent.
    pub domain: Option<String>,
    pub steps: usize,
    /// Defaults to the experiment learning rate.
    pub eta: Option<f64>,
}

impl Default for WarmupSection {
    fn default() -> Self {
        WarmupSection {
            domain: None,
            steps: 5000,
            eta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    #[serde(default = "default_difficulty")]
    pub difficulty: Difficulty,
    pub amplitude: Option<f64>,
    pub noise_std: Option<f64>,
    pub label_prob: Option<f64>,
}

fn default_difficulty() -> Difficulty {
    Difficulty::Easy
}

impl DomainEntry {
    pub fn new(name: &str, difficulty: Difficulty) -> Self {
        DomainEntry {
            name: name.into(),
            difficulty,
            amplitude: None,
            noise_std: None,
            label_prob: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub domain: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ListenerSection {
    pub sequence: Vec<SegmentEntry>,
    /// Passes over the sequence (a looped sequence counts once per pass).
    #[serde(default = "one")]
    pub passes: usize,
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveSection {
    pub count: usize,
    /// Domains active clients draw their sequences from.
    pub pool: Vec<String>,
    /// Domain segments per client sequence.
    pub segments: usize,
    pub frames_per_segment: usize,
    /// Every active client replays the listener's own stream. Disables the
    /// domain-disjointness guard; meant for equivalence checks only.
    pub share_listener_stream: bool,
}

impl Default for ActiveSection {
    fn default() -> Self {
        ActiveSection {
            count: 3,
            pool: Vec::new(),
            segments: 5,
            frames_per_segment: 500,
            share_listener_stream: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub mode: Mode,
    #[serde(default = "default_supervision")]
    pub supervision: SupervisionKind,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_interval")]
    pub update_interval: usize,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingPolicy,
    /// Local adaptation run by FedMAD clients inside their window.
    #[serde(default = "default_local")]
    pub fed_mad_local: AdaptMode,
    #[serde(default = "default_engine")]
    pub engine: Engine,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub warmup: WarmupSection,
    #[serde(default)]
    pub domains: Vec<DomainEntry>,
    pub listener: ListenerSection,
    #[serde(default)]
    pub active: ActiveSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_supervision() -> SupervisionKind {
    SupervisionKind::Dense
}
fn default_eta() -> f64 {
    DEFAULT_ETA
}
fn default_interval() -> usize {
    10
}
fn default_sampling() -> SamplingPolicy {
    SamplingPolicy::CountSoftmax
}
fn default_local() -> AdaptMode {
    AdaptMode::Full
}
fn default_engine() -> Engine {
    Engine::Reference
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].lines().count().max(1);
                    format!("line {line}")
                }
                None => "document".into(),
            };
            Error::config(field, e.message().to_string())
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let seed = m.seed.unwrap_or_else(|| rng::derive(self.seed, "model", 0));
        ModelSpec::new(m.num_blocks, m.input_dim, m.hidden_dim, seed)
            .map_err(|e| Error::config("model", e.to_string()))
    }

    pub fn metric_params(&self) -> MetricParams {
        MetricParams {
            d1_abs_threshold: self.metrics.d1_abs_threshold,
            d1_rel_threshold: self.metrics.d1_rel_threshold,
        }
    }

    pub fn schedule(&self) -> Schedule {
        let s = &self.schedule;
        Schedule {
            active_period: s.active_period,
            listener_period: s.listener_period,
            start_barrier: s.start_barrier,
            loop_sequences: s.loop_sequences,
            latency: s.latency,
        }
    }

    pub fn resolve_domains(&self) -> Result<BTreeMap<String, Arc<DomainSpec>>> {
        let mut out = BTreeMap::new();
        for (i, entry) in self.domains.iter().enumerate() {
            if entry.name.is_empty() {
                return Err(Error::config(format!("domains[{i}].name"), "must not be empty"));
            }
            let mut d = make_domain(&entry.name, self.seed, entry.difficulty, self.model.input_dim);
            if let Some(a) = entry.amplitude {
                d = d.with_amplitude(a);
            }
            let sigma = entry.noise_std.unwrap_or(d.noise_std);
            let p = entry.label_prob.unwrap_or(d.label_prob);
            d = d.with_supervision(sigma, p);
            d.validate()?;
            if out.insert(entry.name.clone(), Arc::new(d)).is_some() {
                return Err(Error::config(format!("domains[{i}].name"), format!("duplicate domain `{}`", entry.name)));
            }
        }
        Ok(out)
    }

    fn listener_sequence(&self, domains: &BTreeMap<String, Arc<DomainSpec>>) -> Result<SequenceSpec> {
        if self.listener.sequence.is_empty() {
            return Err(Error::config("listener.sequence", "must name at least one segment"));
        }
        let mut segs = Vec::new();
        for (i, s) in self.listener.sequence.iter().enumerate() {
            let d = domains
                .get(&s.domain)
                .ok_or_else(|| Error::config(format!("listener.sequence[{i}].domain"), format!("undefined domain `{}`", s.domain)))?;
            if s.frames == 0 {
                return Err(Error::config(format!("listener.sequence[{i}].frames"), "must be >= 1"));
            }
            segs.push((d.clone(), s.frames));
        }
        SequenceSpec::new(segs)
    }

    /// Sequence of active client `k` (1-based): `segments` domains drawn from
    /// the pool with a generator seeded by `(seed, k)`, so adding clients
    /// leaves the existing ones unchanged.
    fn active_sequence(&self, k: u32, pool: &[Arc<DomainSpec>]) -> Result<SequenceSpec> {
        let mut r = rng::rng_from(rng::derive(self.seed, "active_sequence", k as u64));
        let segs = (0..self.active.segments)
            .map(|_| (pool[r.random_range(0..pool.len())].clone(), self.active.frames_per_segment))
            .collect();
        SequenceSpec::new(segs)
    }

    /// Validates everything and assembles the simulation, including warm-up.
    pub fn build(&self) -> Result<SimConfig> {
        let spec = self.model_spec()?;
        let metrics = self.metric_params();
        metrics.validate()?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be finite and > 0"));
        }
        let domains = self.resolve_domains()?;
        let listener_seq = self.listener_sequence(&domains)?;
        if self.listener.passes == 0 {
            return Err(Error::config("listener.passes", "must be >= 1"));
        }
        let listener = ClientStream {
            sequence: listener_seq.clone(),
            seed: self.listener.seed.unwrap_or_else(|| rng::derive(self.seed, "stream", 0)),
        };

        let mut actives = Vec::new();
        if self.mode.is_federated() {
            if self.update_interval == 0 {
                return Err(Error::config("update_interval", "must be >= 1"));
            }
            if self.active.count == 0 {
                return Err(Error::config("active.count", "federated modes need at least one active client"));
            }
            if self.fed_mad_local == AdaptMode::None {
                return Err(Error::config("fed_mad_local", "must be full or mad"));
            }
            if self.active.share_listener_stream {
                actives = (0..self.active.count).map(|_| listener.clone()).collect();
            } else {
                if self.active.pool.is_empty() {
                    return Err(Error::config("active.pool", "must name at least one domain"));
                }
                if self.active.segments == 0 || self.active.frames_per_segment == 0 {
                    return Err(Error::config("active.segments", "segments and frames_per_segment must be >= 1"));
                }
                let mut pool = Vec::new();
                for (i, name) in self.active.pool.iter().enumerate() {
                    let field = format!("active.pool[{i}]");
                    let d = domains
                        .get(name)
                        .ok_or_else(|| Error::config(&field, format!("undefined domain `{name}`")))?;
                    if listener_seq.contains_domain(name) {
                        return Err(Error::config(
                            field,
                            format!("domain `{name}` is also in the listener's sequence; active clients must run on different domains"),
                        ));
                    }
                    pool.push(d.clone());
                }
                for k in 1..=self.active.count as u32 {
                    actives.push(ClientStream {
                        sequence: self.active_sequence(k, &pool)?,
                        seed: rng::derive(self.seed, "stream", k as u64),
                    });
                }
            }
        }

        let mut w0 = init_weights(&spec)?;
        if let Some(name) = &self.warmup.domain {
            let d = domains
                .get(name)
                .ok_or_else(|| Error::config("warmup.domain", format!("undefined domain `{name}`")))?;
            let eta = self.warmup.eta.unwrap_or(self.eta);
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::config("warmup.eta", "must be finite and > 0"));
            }
            w0 = warmup_pretrain(&w0, d, self.warmup.steps, eta, self.seed)?;
        }

        let sim = SimConfig {
            w0,
            mode: self.mode.sim_mode(),
            adapt: AdaptConfig {
                mode: AdaptMode::Full,
                supervision: self.supervision,
                eta: self.eta,
                policy: self.sampling,
                sampling_seed: 0,
            },
            mad_local_mode: self.fed_mad_local,
            update_interval: self.update_interval,
            listener,
            listener_passes: self.listener.passes,
            actives,
            schedule: self.schedule(),
            metrics,
            seed: self.seed,
        };
        sim.validate()?;
        Ok(sim)
    }
}
