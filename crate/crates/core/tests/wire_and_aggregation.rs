mod common;

use std::sync::Arc;

use proptest::prelude::*;

use fedadapt::adaptation::{AdaptConfig, AdaptMode, SamplingPolicy, SupervisionKind};
use fedadapt::federation::{self, Client, ClientConfig, DispatchMsg, FedMode, ServerState, WeightUpdateMsg};
use fedadapt::model::{init_weights, BlockedWeights, ModelSpec, Segment, SegmentKind};
use fedadapt::simnet::{decode, encode, MsgType, WireBlock, WireMessage};
use fedadapt::streams::{make_domain, Difficulty, FrameStream, SequenceSpec};
use fedadapt::Error;

use common::ulps;

fn segment_strategy(spec: ModelSpec) -> impl Strategy<Value = Segment> {
    (0..spec.num_blocks, 0u8..3).prop_map(|(block, k)| Segment {
        block,
        kind: [SegmentKind::Full, SegmentKind::Encoder, SegmentKind::Decoder][k as usize],
    })
}

fn message_strategy() -> impl Strategy<Value = WireMessage> {
    let spec = ModelSpec::default();
    (
        prop::bool::ANY,
        any::<u32>(),
        any::<u32>(),
        prop::collection::vec((segment_strategy(spec), any::<u32>()), 0..8),
    )
        .prop_map(move |(update, client_id, round, segs)| WireMessage {
            msg_type: if update { MsgType::Update } else { MsgType::Dispatch },
            client_id,
            round,
            blocks: segs
                .into_iter()
                .map(|(s, bits)| WireBlock {
                    block_id: s.wire_id(),
                    // arbitrary bit patterns, NaNs included
                    params: (0..spec.segment_param_count(s) as u32)
                        .map(|i| f32::from_bits(bits.wrapping_mul(2_654_435_761).wrapping_add(i)))
                        .collect(),
                })
                .collect(),
        })
}

fn bits(m: &WireMessage) -> Vec<(u16, Vec<u32>)> {
    m.blocks
        .iter()
        .map(|b| (b.block_id, b.params.iter().map(|p| p.to_bits()).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn codec_roundtrip_is_bit_exact(msg in message_strategy()) {
        let spec = ModelSpec::default();
        let bytes = encode(&msg);
        let expected: usize = 20 + msg.blocks.iter().map(|b| 6 + 4 * b.params.len()).sum::<usize>();
        prop_assert_eq!(bytes.len(), expected);
        let back = decode(&bytes, &spec).unwrap();
        prop_assert_eq!((back.msg_type, back.client_id, back.round), (msg.msg_type, msg.client_id, msg.round));
        prop_assert_eq!(bits(&back), bits(&msg));
    }

    #[test]
    fn decode_never_panics_on_noise(noise in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode(&noise, &ModelSpec::default());
    }

    #[test]
    fn truncation_is_always_detected(msg in message_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&msg);
        let at = cut.index(bytes.len());
        let truncated = matches!(decode(&bytes[..at], &ModelSpec::default()), Err(Error::Truncated { .. }));
        prop_assert!(truncated);
    }

    /// k copies of w plus one of w + d average to w + d/(k+1).
    #[test]
    fn mean_is_linear(k in 1u32..6, seed in any::<u64>(), delta in -1.0f32..1.0) {
        let spec = ModelSpec::new(3, 2, 3, seed).unwrap();
        let w = init_weights(&spec).unwrap();
        let shifted = BlockedWeights::from_bytes(
            spec,
            &w.to_bytes()
                .chunks_exact(4)
                .flat_map(|c| (f32::from_le_bytes([c[0], c[1], c[2], c[3]]) + delta).to_le_bytes())
                .collect::<Vec<u8>>(),
        )
        .unwrap();
        let n = k + 1;
        let mut server = ServerState::new(w.clone(), 1..=n, [0], 1);
        let msg = |client: u32, src: &BlockedWeights| WeightUpdateMsg {
            client,
            round: 0,
            segments: (0..3).map(|i| (Segment::full(i), src.segment_params(Segment::full(i)).unwrap())).collect(),
        };
        for c in 1..=k {
            prop_assert!(server.ingest(msg(c, &w)).unwrap().is_none());
        }
        prop_assert!(server.ingest(msg(n, &shifted)).unwrap().is_some());
        let base = w.to_bytes();
        let moved = shifted.to_bytes();
        for ((a, s), g) in base.chunks_exact(4).zip(moved.chunks_exact(4)).zip(server.weights().to_bytes().chunks_exact(4)) {
            let a = f32::from_le_bytes([a[0], a[1], a[2], a[3]]) as f64;
            let s = f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64;
            let got = f32::from_le_bytes([g[0], g[1], g[2], g[3]]);
            let want = (a + (s - a) / n as f64) as f32;
            prop_assert!(ulps(got, want) <= 1, "{} vs {}", got, want);
        }
    }
}

#[test]
fn barrier_fires_every_third_message() {
    let spec = ModelSpec::default();
    let w = init_weights(&spec).unwrap();
    let mut server = ServerState::new(w.clone(), [1, 2, 3], [0], 10);
    let full = |client: u32, round: u32| WeightUpdateMsg {
        client,
        round,
        segments: (0..5).map(|i| (Segment::full(i), w.segment_params(Segment::full(i)).unwrap())).collect(),
    };
    let mut fired = Vec::new();
    for n in 0..30u32 {
        let out = server.ingest(full(n % 3 + 1, n / 3)).unwrap();
        fired.push(out.is_some());
    }
    for (i, f) in fired.iter().enumerate() {
        assert_eq!(*f, i % 3 == 2);
    }
    assert_eq!(server.round(), 10);
    // identical senders: the aggregate is the shared weights
    assert!(server.weights().bits_eq(&w));
}

#[test]
fn server_rejects_unknown_and_repeated() {
    let spec = ModelSpec::new(2, 1, 1, 0).unwrap();
    let w = BlockedWeights::zeros(spec).unwrap();
    let mut server = ServerState::new(w, [1, 2], [0], 1);
    let m = |client| WeightUpdateMsg {
        client,
        round: 0,
        segments: vec![(Segment::full(0), vec![1.0; 4])],
    };
    assert!(matches!(server.ingest(m(9)), Err(Error::UnknownClient(9))));
    server.ingest(m(1)).unwrap();
    assert!(matches!(server.ingest(m(1)), Err(Error::DuplicateUpdate { client: 1, round: 0 })));
}

fn active(id: u32, mode: FedMode, seed: u64) -> Client {
    let spec = ModelSpec::default();
    let d = Arc::new(make_domain("road", 3, Difficulty::Easy, 8));
    let stream = FrameStream::new(SequenceSpec::single(d, 100).unwrap(), seed);
    let cfg = ClientConfig {
        fed_mode: mode,
        update_interval: 10,
        mad_local_mode: AdaptMode::Full,
        adapt: AdaptConfig {
            mode: AdaptMode::Full,
            supervision: SupervisionKind::Dense,
            eta: 1e-3,
            policy: SamplingPolicy::CountSoftmax,
            sampling_seed: 0,
        },
        loop_sequence: true,
    };
    Client::active(id, init_weights(&spec).unwrap(), stream, cfg, seed).unwrap()
}

#[test]
fn upload_cardinalities() {
    let mut full = active(1, FedMode::FedFull, 1);
    let mut mad = active(2, FedMode::FedMad, 1);
    for _ in 0..20 {
        let f = federation::client_update_full(&mut full, 10).unwrap();
        assert_eq!(f.segments.len(), 5);
        assert_eq!(f.param_count(), 1317);
        let m = federation::client_update_mad(&mut mad, 10).unwrap();
        assert_eq!(m.segments.len(), 1);
        assert_eq!(m.segments[0].0.kind, SegmentKind::Full);
    }
    for (mode, floats) in [(FedMode::FedDec, 85), (FedMode::FedLast, 17), (FedMode::FedEnc, 1232)] {
        let mut c = active(3, mode, 2);
        assert_eq!(federation::client_update_variant(&mut c, 10, mode).unwrap().param_count(), floats);
    }
}

#[test]
fn zero_window_uploads_initial_weights() {
    let mut c = active(1, FedMode::FedFull, 5);
    let w0 = c.weights().clone();
    let msg = federation::client_update_full(&mut c, 0).unwrap();
    for (seg, values) in &msg.segments {
        assert_eq!(values, &w0.segment_params(*seg).unwrap());
    }
}

#[test]
fn mad_sampling_is_reproducible() {
    let picks = |seed| {
        let mut c = active(4, FedMode::FedMad, seed);
        (0..30)
            .map(|_| federation::client_update_mad(&mut c, 10).unwrap().segments[0].0.block)
            .collect::<Vec<_>>()
    };
    assert_eq!(picks(8), picks(8));
}

#[test]
fn listener_last_writer_wins() {
    let spec = ModelSpec::default();
    let d = Arc::new(make_domain("night", 1, Difficulty::Hard, 8));
    let stream = FrameStream::new(SequenceSpec::single(d, 10).unwrap(), 1);
    let w0 = init_weights(&spec).unwrap();
    let mut l = Client::listening(0, w0.clone(), stream).unwrap();
    let a = init_weights(&ModelSpec { seed: 1, ..spec }).unwrap();
    let b = init_weights(&ModelSpec { seed: 2, ..spec }).unwrap();
    let dispatch = |round, w: &BlockedWeights, blocks: &[usize]| DispatchMsg {
        round,
        segments: blocks
            .iter()
            .map(|&i| (Segment::full(i), w.segment_params(Segment::full(i)).unwrap()))
            .collect(),
    };
    federation::listener_apply(&mut l, &dispatch(1, &a, &[0, 1, 2, 3, 4])).unwrap();
    assert_eq!(l.weights().to_bytes(), a.to_bytes());
    federation::listener_apply(&mut l, &dispatch(2, &b, &[1])).unwrap();
    for i in 0..5 {
        let src = if i == 1 { &b } else { &a };
        assert!(l.weights().block_bits_eq(src, i));
    }
}

#[test]
fn dispatch_wire_type_and_length() {
    let spec = ModelSpec::default();
    let w = init_weights(&spec).unwrap();
    let d = DispatchMsg {
        round: 4,
        segments: vec![(Segment::full(3), w.segment_params(Segment::full(3)).unwrap())],
    };
    let wire = WireMessage::from_dispatch(&d, 0);
    let bytes = encode(&wire);
    assert_eq!(bytes.len(), 26 + 4 * 289);
    let back = decode(&bytes, &spec).unwrap().into_dispatch().unwrap();
    assert_eq!(back, d);
}
