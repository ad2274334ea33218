//! Federated adaptation: active clients adapt locally and upload (parts of)
//! their weights every `T` supervised steps; the server averages what it
//! receives once every active client has contributed to the round, and
//! dispatches the averaged segments to the listening clients.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::adaptation::{self, AdaptConfig, AdaptMode, Adapter, SamplingPolicy};
use crate::error::{Error, Result};
use crate::metrics::{FrameRecord, MetricParams};
use crate::model::{BlockedWeights, ModelSpec, Segment, SegmentKind};
use crate::rng;
use crate::streams::FrameStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FedMode {
    FedFull,
    FedMad,
    FedDec,
    FedLast,
    FedEnc,
}

impl FedMode {
    pub fn name(self) -> &'static str {
        match self {
            FedMode::FedFull => "fed_full",
            FedMode::FedMad => "fed_mad",
            FedMode::FedDec => "fed_dec",
            FedMode::FedLast => "fed_last",
            FedMode::FedEnc => "fed_enc",
        }
    }

    /// Segments uploaded by every window. `None` for FedMAD, whose single
    /// block is sampled per window.
    pub fn fixed_segments(self, spec: &ModelSpec) -> Option<Vec<Segment>> {
        let b = spec.num_blocks;
        match self {
            FedMode::FedFull => Some((0..b).map(Segment::full).collect()),
            FedMode::FedDec => Some((0..b).map(Segment::decoder).collect()),
            FedMode::FedLast => Some(vec![Segment::decoder(b - 1)]),
            FedMode::FedEnc => Some((0..b).map(Segment::encoder).collect()),
            FedMode::FedMad => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientRole {
    Active,
    Listening,
}

/// Segments with their parameters in serialization order.
pub type SegmentPayload = Vec<(Segment, Vec<f32>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdateMsg {
    pub client: u32,
    /// Index of this upload among the client's uploads; equals the server
    /// round it contributes to.
    pub round: u32,
    pub segments: SegmentPayload,
}

impl WeightUpdateMsg {
    pub fn param_count(&self) -> usize {
        self.segments.iter().map(|(_, p)| p.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DispatchMsg {
    /// Server round produced by the aggregation.
    pub round: u32,
    pub segments: SegmentPayload,
}

fn check_payload(spec: &ModelSpec, segments: &SegmentPayload) -> Result<()> {
    for (seg, values) in segments {
        spec.check_block(seg.block)?;
        let expected = spec.segment_param_count(*seg);
        if values.len() != expected {
            return Err(Error::ParamCountMismatch {
                block_id: seg.wire_id(),
                expected,
                got: values.len(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientConfig {
    pub fed_mode: FedMode,
    pub update_interval: usize,
    /// Local adaptation inside a FedMAD window; the other modes always run FULL.
    pub mad_local_mode: AdaptMode,
    pub adapt: AdaptConfig,
    pub loop_sequence: bool,
}

/// A federated participant with its own model, stream and RNGs.
#[derive(Clone, Debug)]
pub struct Client {
    id: u32,
    role: ClientRole,
    adapter: Adapter,
    stream: FrameStream,
    fed_mode: FedMode,
    update_interval: usize,
    loop_sequence: bool,
    fed_rng: ChaCha8Rng,
    window_steps: usize,
    uploads: u32,
    version: u64,
}

/// Result of one frame processed by a client.
#[derive(Clone, Debug)]
pub struct FrameOutcome {
    pub record: FrameRecord,
    pub upload: Option<WeightUpdateMsg>,
}

impl Client {
    pub fn active(id: u32, w0: BlockedWeights, stream: FrameStream, config: ClientConfig, seed: u64) -> Result<Self> {
        if config.update_interval == 0 {
            return Err(Error::config("update_interval", "must be >= 1"));
        }
        let local_mode = match config.fed_mode {
            FedMode::FedMad => config.mad_local_mode,
            _ => AdaptMode::Full,
        };
        if local_mode == AdaptMode::None {
            return Err(Error::config("fed_mad_local", "active clients must adapt (full or mad)"));
        }
        let adapt = AdaptConfig {
            mode: local_mode,
            sampling_seed: rng::derive(seed, "client_sampling", id as u64),
            ..config.adapt
        };
        Ok(Client {
            id,
            role: ClientRole::Active,
            adapter: Adapter::new(w0, adapt, stream.seed())?,
            stream,
            fed_mode: config.fed_mode,
            update_interval: config.update_interval,
            loop_sequence: config.loop_sequence,
            fed_rng: rng::rng_from(rng::derive(seed, "fed_sampling", id as u64)),
            window_steps: 0,
            uploads: 0,
            version: 0,
        })
    }

    pub fn listening(id: u32, w0: BlockedWeights, stream: FrameStream) -> Result<Self> {
        let adapt = AdaptConfig {
            mode: AdaptMode::None,
            ..AdaptConfig::default()
        };
        Ok(Client {
            id,
            role: ClientRole::Listening,
            adapter: Adapter::new(w0, adapt, stream.seed())?,
            stream,
            fed_mode: FedMode::FedFull,
            update_interval: 0,
            loop_sequence: true,
            fed_rng: rng::rng_from(0),
            window_steps: 0,
            uploads: 0,
            version: 0,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn role(&self) -> ClientRole {
        self.role
    }

    pub fn weights(&self) -> &BlockedWeights {
        &self.adapter.weights
    }

    pub fn histogram(&self) -> &adaptation::UpdateHistogram {
        &self.adapter.histogram
    }

    pub fn uploads(&self) -> u32 {
        self.uploads
    }

    fn require(&self, required: ClientRole) -> Result<()> {
        if self.role == required {
            Ok(())
        } else {
            Err(Error::WrongRole {
                client: self.id,
                role: self.role,
                required,
            })
        }
    }

    /// Evaluates the next frame; active clients also adapt on it and, when
    /// the window of `T` supervised steps completes, produce an upload.
    pub fn process_frame(&mut self, params: &MetricParams) -> Result<FrameOutcome> {
        let frame = if self.loop_sequence {
            self.stream.next_looping()
        } else {
            let seen = self.stream.spec().len();
            self.stream.next().ok_or(Error::StreamExhausted(seen))?
        };
        match self.role {
            ClientRole::Listening => {
                let report = self.adapter.step(&frame)?;
                let record = FrameRecord::new(
                    frame.index,
                    frame.domain.name.clone(),
                    report.prediction,
                    frame.target,
                    self.version,
                    params,
                );
                Ok(FrameOutcome { record, upload: None })
            }
            ClientRole::Active => {
                let (record, report) = self.adapter.step_recorded(&frame, params)?;
                if report.supervised {
                    self.window_steps += 1;
                }
                let upload = if self.window_steps >= self.update_interval {
                    self.window_steps = 0;
                    Some(self.make_upload(self.fed_mode)?)
                } else {
                    None
                };
                Ok(FrameOutcome { record, upload })
            }
        }
    }

    fn make_upload(&mut self, mode: FedMode) -> Result<WeightUpdateMsg> {
        let spec = *self.adapter.weights.spec();
        let segments = match mode.fixed_segments(&spec) {
            Some(segs) => segs,
            None => {
                let j = adaptation::softmax_sample(&self.adapter.histogram, SamplingPolicy::CountSoftmax, &mut self.fed_rng);
                self.adapter.histogram.decay_selected(j)?;
                vec![Segment::full(j)]
            }
        };
        let segments = segments
            .into_iter()
            .map(|s| Ok((s, self.adapter.weights.segment_params(s)?)))
            .collect::<Result<SegmentPayload>>()?;
        let msg = WeightUpdateMsg {
            client: self.id,
            round: self.uploads,
            segments,
        };
        self.uploads += 1;
        Ok(msg)
    }

    /// Runs frames until `t` supervised steps are done, then builds the
    /// upload for `mode`. Any partially completed window is discarded first.
    pub fn run_window(&mut self, t: usize, mode: FedMode) -> Result<WeightUpdateMsg> {
        self.require(ClientRole::Active)?;
        self.window_steps = 0;
        let mut done = 0;
        while done < t {
            let frame = self.stream.next_looping();
            if self.adapter.step(&frame)?.supervised {
                done += 1;
            }
        }
        self.make_upload(mode)
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// FedFULL client update: `T` FULL steps, then every block.
pub fn client_update_full(client: &mut Client, t: usize) -> Result<WeightUpdateMsg> {
    client.run_window(t, FedMode::FedFull)
}

/// FedMAD client update: `T` local steps counted into the histogram, then one
/// block sampled from `softmax(H)`, whose count is decayed.
pub fn client_update_mad(client: &mut Client, t: usize) -> Result<WeightUpdateMsg> {
    client.run_window(t, FedMode::FedMad)
}

pub fn client_update_variant(client: &mut Client, t: usize, mode: FedMode) -> Result<WeightUpdateMsg> {
    if !matches!(mode, FedMode::FedDec | FedMode::FedLast | FedMode::FedEnc) {
        return Err(Error::config("fed_mode", "variant update requires fed_dec, fed_last or fed_enc"));
    }
    client.run_window(t, mode)
}

/// Overwrites the dispatched segments of a listener's weights.
pub fn listener_apply(client: &mut Client, dispatch: &DispatchMsg) -> Result<()> {
    client.require(ClientRole::Listening)?;
    check_payload(client.adapter.weights.spec(), &dispatch.segments)?;
    for (seg, values) in &dispatch.segments {
        client.adapter.weights.set_segment(*seg, values)?;
    }
    client.version = dispatch.round as u64;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    pub aggregated: Vec<Segment>,
    pub contributors: Vec<u32>,
    pub dispatch: DispatchMsg,
}

/// Server side of the protocol.
#[derive(Clone, Debug)]
pub struct ServerState {
    round: u32,
    weights: BlockedWeights,
    active: BTreeSet<u32>,
    listening: BTreeSet<u32>,
    update_interval: usize,
    buffer: BTreeMap<u32, WeightUpdateMsg>,
    /// Updates from clients already ahead of the current round.
    pending: BTreeMap<(u32, u32), WeightUpdateMsg>,
    next_expected: BTreeMap<u32, u32>,
}

impl ServerState {
    pub fn new(w0: BlockedWeights, active: impl IntoIterator<Item = u32>, listening: impl IntoIterator<Item = u32>, update_interval: usize) -> Self {
        let active: BTreeSet<u32> = active.into_iter().collect();
        ServerState {
            round: 0,
            weights: w0,
            next_expected: active.iter().map(|&k| (k, 0)).collect(),
            active,
            listening: listening.into_iter().collect(),
            update_interval,
            buffer: BTreeMap::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn weights(&self) -> &BlockedWeights {
        &self.weights
    }

    pub fn active(&self) -> &BTreeSet<u32> {
        &self.active
    }

    pub fn listening(&self) -> &BTreeSet<u32> {
        &self.listening
    }

    pub fn update_interval(&self) -> usize {
        self.update_interval
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn ingest(&mut self, msg: WeightUpdateMsg) -> Result<Option<RoundOutcome>> {
        let Some(&expected) = self.next_expected.get(&msg.client) else {
            return Err(Error::UnknownClient(msg.client));
        };
        if msg.round < expected {
            return Err(Error::DuplicateUpdate {
                client: msg.client,
                round: msg.round,
            });
        }
        if msg.round > expected {
            return Err(Error::Invariant(format!(
                "client {} skipped to round {} (expected {})",
                msg.client, msg.round, expected
            )));
        }
        check_payload(self.weights.spec(), &msg.segments)?;
        self.next_expected.insert(msg.client, expected + 1);
        if msg.round > self.round {
            self.pending.insert((msg.round, msg.client), msg);
            return Ok(None);
        }
        self.buffer.insert(msg.client, msg);
        if self.buffer.len() < self.active.len() {
            return Ok(None);
        }
        Ok(Some(self.aggregate()?))
    }

    fn aggregate(&mut self) -> Result<RoundOutcome> {
        let spec = *self.weights.spec();
        // (block, part) -> (sum, senders)
        let mut sums: BTreeMap<(usize, SegmentKind), (Vec<f64>, u32)> = BTreeMap::new();
        let buffer = std::mem::take(&mut self.buffer);
        for msg in buffer.values() {
            for (seg, values) in &msg.segments {
                let mut rest: &[f32] = values;
                for &part in seg.parts() {
                    let n = spec.segment_param_count(Segment { block: seg.block, kind: part });
                    let (head, tail) = rest.split_at(n);
                    rest = tail;
                    let entry = sums.entry((seg.block, part)).or_insert_with(|| (vec![0.0; n], 0));
                    entry.0.iter_mut().zip(head).for_each(|(s, &v)| *s += v as f64);
                    entry.1 += 1;
                }
            }
        }
        let mut per_block: BTreeMap<usize, Vec<SegmentKind>> = BTreeMap::new();
        for (&(block, part), (sum, senders)) in &sums {
            let mean: Vec<f32> = sum.iter().map(|s| (s / *senders as f64) as f32).collect();
            self.weights.set_segment(Segment { block, kind: part }, &mean)?;
            per_block.entry(block).or_default().push(part);
        }
        let aggregated: Vec<Segment> = per_block
            .into_iter()
            .map(|(block, parts)| {
                let kind = if parts.len() == 2 { SegmentKind::Full } else { parts[0] };
                Segment { block, kind }
            })
            .collect();
        let segments = aggregated
            .iter()
            .map(|&s| Ok((s, self.weights.segment_params(s)?)))
            .collect::<Result<SegmentPayload>>()?;

        self.round += 1;
        let round = self.round;
        let later = self.pending.split_off(&(round + 1, 0));
        for ((_, client), msg) in std::mem::replace(&mut self.pending, later) {
            self.buffer.insert(client, msg);
        }
        Ok(RoundOutcome {
            round,
            aggregated,
            contributors: buffer.keys().copied().collect(),
            dispatch: DispatchMsg { round, segments },
        })
    }
}

pub fn server_ingest(state: &mut ServerState, msg: WeightUpdateMsg) -> Result<Option<RoundOutcome>> {
    state.ingest(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::SupervisionKind;
    use crate::model::{init_weights, ModelSpec};
    use crate::streams::{make_domain, Difficulty, SequenceSpec};
    use std::sync::Arc;

    fn toy_spec() -> ModelSpec {
        // one parameter per part would need m=0; 1x1 gives 4 params per block
        ModelSpec::new(5, 1, 1, 0).unwrap()
    }

    fn filled(spec: ModelSpec, value: f32) -> BlockedWeights {
        let mut w = BlockedWeights::zeros(spec).unwrap();
        for i in 0..spec.num_blocks {
            let n = spec.block_param_count(i);
            w.set_segment(Segment::full(i), &vec![value; n]).unwrap();
        }
        w
    }

    fn full_msg(client: u32, round: u32, w: &BlockedWeights) -> WeightUpdateMsg {
        let segments = (0..w.spec().num_blocks)
            .map(|i| (Segment::full(i), w.segment_params(Segment::full(i)).unwrap()))
            .collect();
        WeightUpdateMsg { client, round, segments }
    }

    fn active_client(id: u32, mode: FedMode, seed: u64) -> Client {
        let spec = ModelSpec::default();
        let w0 = init_weights(&spec).unwrap();
        let d = Arc::new(make_domain("city", 0, Difficulty::Easy, 8));
        let stream = FrameStream::new(SequenceSpec::single(d, 100).unwrap(), 11);
        let cfg = ClientConfig {
            fed_mode: mode,
            update_interval: 10,
            mad_local_mode: AdaptMode::Full,
            adapt: AdaptConfig {
                supervision: SupervisionKind::Dense,
                ..AdaptConfig::default()
            },
            loop_sequence: true,
        };
        Client::active(id, w0, stream, cfg, seed).unwrap()
    }

    #[test]
    fn three_client_mean() {
        let spec = toy_spec();
        let mut server = ServerState::new(filled(spec, 0.0), [1, 2, 3], [0], 10);
        assert!(server.ingest(full_msg(1, 0, &filled(spec, 1.0))).unwrap().is_none());
        assert!(server.ingest(full_msg(2, 0, &filled(spec, 2.0))).unwrap().is_none());
        let out = server.ingest(full_msg(3, 0, &filled(spec, 3.0))).unwrap().unwrap();
        assert_eq!(out.round, 1);
        assert_eq!(out.aggregated.len(), 5);
        assert!(server.weights().bits_eq(&filled(spec, 2.0)));
        assert_eq!(server.buffered(), 0);
    }

    #[test]
    fn partial_aggregation_over_senders() {
        let spec = toy_spec();
        let base = filled(spec, 0.5);
        let mut server = ServerState::new(base.clone(), [1, 2, 3], [0], 10);
        let block_msg = |client, block: usize, value: f32| WeightUpdateMsg {
            client,
            round: 0,
            segments: vec![(Segment::full(block), vec![value; 4])],
        };
        server.ingest(block_msg(1, 1, 2.0)).unwrap();
        server.ingest(block_msg(2, 1, 4.0)).unwrap();
        let out = server.ingest(block_msg(3, 3, 7.0)).unwrap().unwrap();
        assert_eq!(out.aggregated, vec![Segment::full(1), Segment::full(3)]);
        assert_eq!(out.dispatch.segments[0].1, vec![3.0; 4]);
        assert_eq!(out.dispatch.segments[1].1, vec![7.0; 4]);
        for i in [0, 2, 4] {
            assert!(server.weights().block_bits_eq(&base, i));
        }
    }

    #[test]
    fn rejects_unknown_and_duplicate() {
        let spec = toy_spec();
        let w = filled(spec, 1.0);
        let mut server = ServerState::new(w.clone(), [1, 2], [0], 10);
        assert!(matches!(server.ingest(full_msg(9, 0, &w)), Err(Error::UnknownClient(9))));
        assert!(matches!(server.ingest(full_msg(0, 0, &w)), Err(Error::UnknownClient(0))));
        server.ingest(full_msg(1, 0, &w)).unwrap();
        assert!(matches!(
            server.ingest(full_msg(1, 0, &w)),
            Err(Error::DuplicateUpdate { client: 1, round: 0 })
        ));
    }

    #[test]
    fn early_updates_wait_for_their_round() {
        let spec = toy_spec();
        let mut server = ServerState::new(filled(spec, 0.0), [1, 2], [0], 10);
        server.ingest(full_msg(1, 0, &filled(spec, 1.0))).unwrap();
        // client 1 is a window ahead
        assert!(server.ingest(full_msg(1, 1, &filled(spec, 5.0))).unwrap().is_none());
        let r1 = server.ingest(full_msg(2, 0, &filled(spec, 3.0))).unwrap().unwrap();
        assert_eq!(r1.round, 1);
        assert!(server.weights().bits_eq(&filled(spec, 2.0)));
        assert_eq!(server.buffered(), 1);
        let r2 = server.ingest(full_msg(2, 1, &filled(spec, 7.0))).unwrap().unwrap();
        assert_eq!(r2.round, 2);
        assert!(server.weights().bits_eq(&filled(spec, 6.0)));
    }

    #[test]
    fn wrong_param_count_rejected() {
        let spec = toy_spec();
        let mut server = ServerState::new(filled(spec, 0.0), [1], [0], 10);
        let msg = WeightUpdateMsg {
            client: 1,
            round: 0,
            segments: vec![(Segment::full(0), vec![1.0; 3])],
        };
        assert!(matches!(server.ingest(msg), Err(Error::ParamCountMismatch { .. })));
    }

    #[test]
    fn full_update_carries_every_block() {
        let mut c = active_client(1, FedMode::FedFull, 0);
        let msg = client_update_full(&mut c, 10).unwrap();
        assert_eq!(msg.segments.len(), 5);
        assert_eq!(msg.param_count(), 1317);
        let fresh = init_weights(&ModelSpec::default()).unwrap();
        let mut c0 = active_client(1, FedMode::FedFull, 0);
        let unchanged = client_update_full(&mut c0, 0).unwrap();
        assert_eq!(unchanged, full_msg(1, 0, &fresh));
    }

    #[test]
    fn identical_clients_identical_messages() {
        let mut a = active_client(1, FedMode::FedFull, 0);
        let mut b = active_client(1, FedMode::FedFull, 0);
        assert_eq!(client_update_full(&mut a, 10).unwrap(), client_update_full(&mut b, 10).unwrap());
    }

    #[test]
    fn mad_update_single_block_and_decay() {
        let mut c = active_client(1, FedMode::FedMad, 4);
        let msg = client_update_mad(&mut c, 10).unwrap();
        assert_eq!(msg.segments.len(), 1);
        let j = msg.segments[0].0.block;
        let mut expected = [10.0; 5];
        expected[j] = 9.0;
        assert_eq!(c.histogram().counts(), &expected[..]);

        let mut again = active_client(1, FedMode::FedMad, 4);
        let msg2 = client_update_mad(&mut again, 10).unwrap();
        assert_eq!(msg2, msg);
    }

    #[test]
    fn variant_sizes() {
        let sizes: Vec<usize> = [FedMode::FedLast, FedMode::FedDec, FedMode::FedEnc]
            .into_iter()
            .map(|m| client_update_variant(&mut active_client(1, m, 0), 10, m).unwrap().param_count())
            .collect();
        assert_eq!(sizes, vec![17, 85, 1232]);
        assert!(client_update_variant(&mut active_client(1, FedMode::FedFull, 0), 10, FedMode::FedFull).is_err());
    }

    #[test]
    fn listener_applies_only_dispatched_segments() {
        let spec = ModelSpec::default();
        let w0 = init_weights(&spec).unwrap();
        let d = Arc::new(make_domain("night", 0, Difficulty::Hard, 8));
        let stream = FrameStream::new(SequenceSpec::single(d, 10).unwrap(), 1);
        let mut listener = Client::listening(0, w0.clone(), stream).unwrap();
        let other = init_weights(&ModelSpec { seed: 99, ..spec }).unwrap();
        let seg = Segment::full(2);
        let dispatch = DispatchMsg {
            round: 1,
            segments: vec![(seg, other.segment_params(seg).unwrap())],
        };
        listener_apply(&mut listener, &dispatch).unwrap();
        for i in 0..5 {
            let expected = if i == 2 { &other } else { &w0 };
            assert!(listener.weights().block_bits_eq(expected, i));
        }
        assert_eq!(listener.version(), 1);
        // a second dispatch overwrites the first
        let all = DispatchMsg {
            round: 2,
            segments: (0..5).map(|i| (Segment::full(i), w0.segment_params(Segment::full(i)).unwrap())).collect(),
        };
        listener_apply(&mut listener, &all).unwrap();
        assert!(listener.weights().bits_eq(&w0));

        let mut active = active_client(1, FedMode::FedFull, 0);
        assert!(matches!(listener_apply(&mut active, &all), Err(Error::WrongRole { .. })));
    }
}
