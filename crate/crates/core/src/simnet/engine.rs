//! Virtual-time orchestration of active clients, the server and the
//! listening client.
//!
//! Time is an integer number of nanoseconds. Events are totally ordered by
//! `(time, phase, client id, sequence)`: at any instant, message deliveries
//! (phase 0) happen before frames are processed (phase 1), so a frame sees
//! every message delivered at or before its timestamp. An active client
//! processing a frame at `s` finishes adapting at `s + period`, which is when
//! its upload (if the window completed) leaves for the server.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rayon::prelude::*;

use crate::adaptation::{AdaptConfig, AdaptMode, Adapter};
use crate::error::{Error, Result};
use crate::federation::{listener_apply, Client, ClientConfig, FedMode, ServerState};
use crate::metrics::{FrameRecord, MetricParams};
use crate::model::BlockedWeights;
use crate::rng;
use crate::simnet::codec::{self, WireMessage};
use crate::simnet::ledger::TrafficLedger;
use crate::streams::{FrameStream, SequenceSpec};

pub const LISTENER_ID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    /// Virtual seconds per frame for active clients.
    pub active_period: f64,
    pub listener_period: f64,
    /// Hold the listener until every active client has uploaded once.
    pub start_barrier: bool,
    /// Active clients replay their sequence until the listener is done.
    pub loop_sequences: bool,
    /// One-way network delay in seconds.
    pub latency: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            active_period: 0.05,
            listener_period: 0.05,
            start_barrier: true,
            loop_sequences: true,
            latency: 0.0,
        }
    }
}

fn to_ns(seconds: f64) -> u64 {
    (seconds * 1e9).round() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Reference,
    Parallel,
}

/// How the evaluated client gets better: on its own, or from the federation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    Local(AdaptMode),
    Federated(FedMode),
}

#[derive(Clone, Debug)]
pub struct ClientStream {
    pub sequence: SequenceSpec,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub w0: BlockedWeights,
    pub mode: SimMode,
    /// Supervision, learning rate and sampling policy for every adapting client.
    pub adapt: AdaptConfig,
    pub mad_local_mode: AdaptMode,
    pub update_interval: usize,
    pub listener: ClientStream,
    /// Number of passes over the listener's sequence.
    pub listener_passes: usize,
    pub actives: Vec<ClientStream>,
    pub schedule: Schedule,
    pub metrics: MetricParams,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.active_period > 0.0 && s.active_period.is_finite()) {
            return Err(Error::config("schedule.active_period", "must be finite and > 0"));
        }
        if !(s.listener_period > 0.0 && s.listener_period.is_finite()) {
            return Err(Error::config("schedule.listener_period", "must be finite and > 0"));
        }
        if !(s.latency >= 0.0 && s.latency.is_finite()) {
            return Err(Error::config("schedule.latency", "must be finite and >= 0"));
        }
        if self.listener_passes == 0 {
            return Err(Error::config("listener.passes", "must be >= 1"));
        }
        if let SimMode::Federated(_) = self.mode {
            if self.actives.is_empty() {
                return Err(Error::config("active.count", "federated modes need at least one active client"));
            }
            if self.update_interval == 0 {
                return Err(Error::config("update_interval", "must be >= 1"));
            }
            if self.adapt.eta.is_nan() || self.adapt.eta <= 0.0 {
                return Err(Error::config("eta", "must be > 0"));
            }
        }
        Ok(())
    }

    fn listener_frames(&self) -> usize {
        self.listener.sequence.len() * self.listener_passes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationResult {
    /// Evaluated client's records, one per frame in order.
    pub records: Vec<FrameRecord>,
    pub ledger: TrafficLedger,
    pub rounds: u32,
    pub final_weights: BlockedWeights,
    pub server_weights: Option<BlockedWeights>,
    pub listener_start_ns: u64,
    /// First upload delivery time per active client.
    pub first_upload_ns: BTreeMap<u32, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Upload(Vec<u8>),
    Dispatch(Vec<u8>),
    ActiveFrame,
    ListenerFrame,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    phase: u8,
    client: u32,
    seq: u64,
    kind: EventKind,
}

const PHASE_MESSAGE: u8 = 0;
const PHASE_FRAME: u8 = 1;

type Queue = BinaryHeap<Reverse<Event>>;

/// Server, listener and ledger, driven identically by both engines.
struct Hub {
    server: ServerState,
    listener: Client,
    ledger: TrafficLedger,
    records: Vec<FrameRecord>,
    metrics: MetricParams,
    barrier: bool,
    num_active: usize,
    first_upload: BTreeMap<u32, u64>,
    started: Option<u64>,
    total_frames: usize,
    latency_ns: u64,
    listener_period_ns: u64,
}

impl Hub {
    fn new(cfg: &SimConfig) -> Result<Self> {
        let active_ids = 1..=cfg.actives.len() as u32;
        let stream = FrameStream::new(cfg.listener.sequence.clone(), cfg.listener.seed);
        Ok(Hub {
            server: ServerState::new(cfg.w0.clone(), active_ids, [LISTENER_ID], cfg.update_interval),
            listener: Client::listening(LISTENER_ID, cfg.w0.clone(), stream)?,
            ledger: TrafficLedger::new(),
            records: Vec::with_capacity(cfg.listener_frames()),
            metrics: cfg.metrics,
            barrier: cfg.schedule.start_barrier,
            num_active: cfg.actives.len(),
            first_upload: BTreeMap::new(),
            started: None,
            total_frames: cfg.listener_frames(),
            latency_ns: to_ns(cfg.schedule.latency),
            listener_period_ns: to_ns(cfg.schedule.listener_period),
        })
    }

    fn start_listener(&mut self, time: u64, queue: &mut Queue) {
        self.started = Some(time);
        queue.push(Reverse(Event {
            time,
            phase: PHASE_FRAME,
            client: LISTENER_ID,
            seq: 0,
            kind: EventKind::ListenerFrame,
        }));
    }

    fn on_upload(&mut self, time: u64, bytes: &[u8], queue: &mut Queue) -> Result<()> {
        let msg = codec::decode(bytes, self.server.weights().spec())?.into_update()?;
        self.ledger.record_upload(msg.client, msg.round, bytes.len(), time);
        self.first_upload.entry(msg.client).or_insert(time);
        if self.barrier && self.started.is_none() && self.first_upload.len() == self.num_active {
            self.start_listener(time, queue);
        }
        if let Some(outcome) = self.server.ingest(msg)? {
            let wire = WireMessage::from_dispatch(&outcome.dispatch, LISTENER_ID);
            let encoded = codec::encode(&wire);
            self.ledger
                .record_round(outcome.round, time, encoded.len(), 1, outcome.aggregated.len());
            queue.push(Reverse(Event {
                time: time + self.latency_ns,
                phase: PHASE_MESSAGE,
                client: LISTENER_ID,
                seq: outcome.round as u64,
                kind: EventKind::Dispatch(encoded),
            }));
        }
        Ok(())
    }

    fn on_dispatch(&mut self, bytes: &[u8]) -> Result<()> {
        let dispatch = codec::decode(bytes, self.server.weights().spec())?.into_dispatch()?;
        listener_apply(&mut self.listener, &dispatch)
    }

    /// Returns true once the listener has finished its sequence.
    fn on_listener_frame(&mut self, time: u64, index: u64, queue: &mut Queue) -> Result<bool> {
        let mut outcome = self.listener.process_frame(&self.metrics)?;
        outcome.record.index = index as usize;
        self.records.push(outcome.record);
        if self.records.len() >= self.total_frames {
            let end = time + self.listener_period_ns;
            self.ledger.set_virtual_time(end as f64 / 1e9);
            return Ok(true);
        }
        queue.push(Reverse(Event {
            time: time + self.listener_period_ns,
            phase: PHASE_FRAME,
            client: LISTENER_ID,
            seq: index + 1,
            kind: EventKind::ListenerFrame,
        }));
        Ok(false)
    }

    fn handle(&mut self, ev: Event, queue: &mut Queue) -> Result<bool> {
        match ev.kind {
            EventKind::Upload(bytes) => self.on_upload(ev.time, &bytes, queue).map(|_| false),
            EventKind::Dispatch(bytes) => self.on_dispatch(&bytes).map(|_| false),
            EventKind::ListenerFrame => self.on_listener_frame(ev.time, ev.seq, queue),
            EventKind::ActiveFrame => unreachable!("active frames are handled by the engine"),
        }
    }

    fn finish(self, final_weights: Option<BlockedWeights>) -> Result<SimulationResult> {
        let Some(start) = self.started else {
            return Err(Error::Invariant("listener never started".into()));
        };
        if self.records.len() != self.total_frames {
            return Err(Error::Invariant(format!(
                "listener processed {} of {} frames",
                self.records.len(),
                self.total_frames
            )));
        }
        Ok(SimulationResult {
            records: self.records,
            rounds: self.server.round(),
            final_weights: final_weights.unwrap_or_else(|| self.listener.weights().clone()),
            server_weights: Some(self.server.weights().clone()),
            ledger: self.ledger,
            listener_start_ns: start,
            first_upload_ns: self.first_upload,
        })
    }
}

fn build_actives(cfg: &SimConfig, fed_mode: FedMode) -> Result<Vec<Client>> {
    let client_cfg = ClientConfig {
        fed_mode,
        update_interval: cfg.update_interval,
        mad_local_mode: cfg.mad_local_mode,
        adapt: cfg.adapt,
        loop_sequence: cfg.schedule.loop_sequences,
    };
    cfg.actives
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let stream = FrameStream::new(s.sequence.clone(), s.seed);
            Client::active(k as u32 + 1, cfg.w0.clone(), stream, client_cfg, cfg.seed)
        })
        .collect()
}

/// Runs the configured experiment to the end of the listener's sequence.
pub fn run_simulation(cfg: &SimConfig, engine: Engine) -> Result<SimulationResult> {
    cfg.validate()?;
    match cfg.mode {
        SimMode::Local(mode) => run_local(cfg, mode),
        SimMode::Federated(fed) => match engine {
            Engine::Reference => run_reference(cfg, fed),
            Engine::Parallel => run_parallel(cfg, fed),
        },
    }
}

/// Single-instance run: the evaluated client adapts on its own stream and
/// nothing crosses the network.
fn run_local(cfg: &SimConfig, mode: AdaptMode) -> Result<SimulationResult> {
    let adapt = AdaptConfig {
        mode,
        sampling_seed: rng::derive(cfg.seed, "client_sampling", LISTENER_ID as u64),
        ..cfg.adapt
    };
    let mut stream = FrameStream::new(cfg.listener.sequence.clone(), cfg.listener.seed);
    let mut adapter = Adapter::new(cfg.w0.clone(), adapt, stream.seed())?;
    let n = cfg.listener_frames();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let frame = stream.next_looping();
        let (mut record, _) = adapter.step_recorded(&frame, &cfg.metrics)?;
        record.index = i;
        records.push(record);
    }
    let mut ledger = TrafficLedger::new();
    ledger.set_virtual_time(n as f64 * cfg.schedule.listener_period);
    Ok(SimulationResult {
        records,
        ledger,
        rounds: 0,
        final_weights: adapter.weights,
        server_weights: None,
        listener_start_ns: 0,
        first_upload_ns: BTreeMap::new(),
    })
}

fn run_reference(cfg: &SimConfig, fed: FedMode) -> Result<SimulationResult> {
    let mut hub = Hub::new(cfg)?;
    let mut actives = build_actives(cfg, fed)?;
    let period = to_ns(cfg.schedule.active_period);
    let mut queue = Queue::new();
    for c in &actives {
        queue.push(Reverse(Event {
            time: 0,
            phase: PHASE_FRAME,
            client: c.id(),
            seq: 0,
            kind: EventKind::ActiveFrame,
        }));
    }
    if !cfg.schedule.start_barrier {
        hub.start_listener(0, &mut queue);
    }
    while let Some(Reverse(ev)) = queue.pop() {
        if ev.kind != EventKind::ActiveFrame {
            if hub.handle(ev, &mut queue)? {
                break;
            }
            continue;
        }
        let client = &mut actives[ev.client as usize - 1];
        let outcome = match client.process_frame(&cfg.metrics) {
            Ok(o) => o,
            Err(Error::StreamExhausted(_)) => {
                if hub.started.is_none() && client.uploads() == 0 {
                    return Err(Error::Invariant(format!(
                        "active client {} exhausted its sequence before its first upload",
                        client.id()
                    )));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(msg) = outcome.upload {
            let bytes = codec::encode(&WireMessage::from_update(&msg));
            queue.push(Reverse(Event {
                time: ev.time + period + hub.latency_ns,
                phase: PHASE_MESSAGE,
                client: msg.client,
                seq: msg.round as u64,
                kind: EventKind::Upload(bytes),
            }));
        }
        queue.push(Reverse(Event {
            time: ev.time + period,
            phase: PHASE_FRAME,
            client: ev.client,
            seq: ev.seq + 1,
            kind: EventKind::ActiveFrame,
        }));
    }
    hub.finish(None)
}

/// Upload of one active client, timestamped with its delivery time.
struct TimedUpload {
    time: u64,
    client: u32,
    round: u32,
    bytes: Vec<u8>,
}

/// Advances one active client frame by frame while `keep_going` holds for the
/// delivery time of the next frame's potential upload.
fn advance_client(
    client: &mut Client,
    next_frame: &mut u64,
    period: u64,
    latency: u64,
    metrics: &MetricParams,
    mut stop: impl FnMut(u64, bool) -> bool,
) -> Result<Vec<TimedUpload>> {
    let mut out = Vec::new();
    loop {
        let delivery = *next_frame * period + period + latency;
        if stop(delivery, !out.is_empty()) {
            return Ok(out);
        }
        let frame_time = *next_frame * period;
        *next_frame += 1;
        let outcome = match client.process_frame(metrics) {
            Ok(o) => o,
            Err(Error::StreamExhausted(_)) => return Ok(out),
            Err(e) => return Err(e),
        };
        if let Some(msg) = outcome.upload {
            out.push(TimedUpload {
                time: frame_time + period + latency,
                client: msg.client,
                round: msg.round,
                bytes: codec::encode(&WireMessage::from_update(&msg)),
            });
        }
    }
}

/// Active clients never receive anything, so their trajectories are
/// computed concurrently up to the listener's horizon and then merged into
/// the same event order the reference engine uses.
fn run_parallel(cfg: &SimConfig, fed: FedMode) -> Result<SimulationResult> {
    let mut actives = build_actives(cfg, fed)?;
    let period = to_ns(cfg.schedule.active_period);
    let latency = to_ns(cfg.schedule.latency);
    let listener_period = to_ns(cfg.schedule.listener_period);
    let metrics = cfg.metrics;
    let mut cursors = vec![0u64; actives.len()];

    // Stage 1: every client up to its first upload.
    let first: Vec<Vec<TimedUpload>> = actives
        .par_iter_mut()
        .zip(cursors.par_iter_mut())
        .map(|(c, cur)| advance_client(c, cur, period, latency, &metrics, |_, has_upload| has_upload))
        .collect::<Result<_>>()?;

    let start = if cfg.schedule.start_barrier {
        let mut latest = 0;
        for (k, ups) in first.iter().enumerate() {
            let Some(u) = ups.first() else {
                return Err(Error::Invariant(format!(
                    "active client {} exhausted its sequence before its first upload",
                    k + 1
                )));
            };
            latest = latest.max(u.time);
        }
        latest
    } else {
        0
    };
    let end = start + (cfg.listener_frames() as u64 - 1) * listener_period;

    // Stage 2: continue every client until its uploads would arrive too late.
    let rest: Vec<Vec<TimedUpload>> = actives
        .par_iter_mut()
        .zip(cursors.par_iter_mut())
        .map(|(c, cur)| advance_client(c, cur, period, latency, &metrics, |delivery, _| delivery > end))
        .collect::<Result<_>>()?;

    let mut hub = Hub::new(cfg)?;
    let mut queue = Queue::new();
    for u in first.into_iter().chain(rest).flatten() {
        if u.time <= end {
            queue.push(Reverse(Event {
                time: u.time,
                phase: PHASE_MESSAGE,
                client: u.client,
                seq: u.round as u64,
                kind: EventKind::Upload(u.bytes),
            }));
        }
    }
    if !cfg.schedule.start_barrier {
        hub.start_listener(0, &mut queue);
    }
    while let Some(Reverse(ev)) = queue.pop() {
        if hub.handle(ev, &mut queue)? {
            break;
        }
    }
    hub.finish(None)
}
