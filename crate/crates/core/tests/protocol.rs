use proptest::collection::vec;
use proptest::prelude::*;
use serde_json::json;

use pilotfarm_core::model::{FunctionCall, Payload, TaskDescription, TaskKind, TaskResult, TaskState, Timestamps, Value};
use pilotfarm_core::protocol::{
    decode, encode, read_message, write_message, Body, Credit, DecodeError, FrameDecoder, Message, ProtocolError, Register, RegisterAck,
    ResultBulk, TaskBulk,
};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![0.0..1e4f64, 1.6e9..1.8e9f64, proptest::num::f64::NORMAL, proptest::num::f64::SUBNORMAL, Just(0.0)]
}

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        finite().prop_map(Value::from),
        ".{0,12}".prop_map(Value::String),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            vec(inner.clone(), 0..4).prop_map(Value::Array),
            vec((".{0,6}", inner), 0..4).prop_map(|kv| Value::Object(kv.into_iter().collect())),
        ]
    })
}

fn task() -> impl Strategy<Value = TaskDescription> {
    let function = (".{1,10}", json_value()).prop_map(|(name, args)| Payload::Function(FunctionCall { function_name: name, args }));
    let executable = vec(".{0,10}", 1..4)
        .prop_map(|argv| Payload::Executable(pilotfarm_core::model::ExecSpec { argv, env: Default::default(), capture_output: false }));
    (".{1,16}", prop_oneof![function, executable], 1u32..64, 0u32..4, proptest::option::of(finite()), proptest::option::of(finite()))
        .prop_map(|(uid, payload, cores, gpus, timeout_s, duration_s)| TaskDescription {
            uid,
            payload,
            cores,
            gpus,
            timeout_s,
            duration_s,
            tags: Default::default(),
        })
}

fn result() -> impl Strategy<Value = TaskResult> {
    let state = prop_oneof![Just(TaskState::Done), Just(TaskState::Failed), Just(TaskState::Canceled)];
    (".{1,16}", state, proptest::option::of(any::<i32>()), proptest::option::of(json_value()), vec(finite(), 5), ".{0,8}").prop_map(
        |(uid, state, exit_code, value, mut ts, worker_id)| {
            ts.sort_by(f64::total_cmp);
            TaskResult {
                uid,
                state,
                exit_code,
                value,
                error_text: (state == TaskState::Failed).then(|| "boom".into()),
                timestamps: Timestamps { submit: ts[0], schedule: ts[1], dispatch: ts[2], start: ts[3], end: ts[4] },
                worker_id,
                node_id: "n0".into(),
                kind: if exit_code.is_some() { TaskKind::Executable } else { TaskKind::Function },
            }
        },
    )
}

fn message() -> impl Strategy<Value = Message> {
    let body = prop_oneof![
        (".{0,8}", ".{0,8}", any::<u32>(), any::<u32>()).prop_map(|(worker_id, node_id, cores, gpus)| Body::Register(Register {
            worker_id,
            node_id,
            cores,
            gpus
        })),
        ".{0,8}".prop_map(|coordinator_id| Body::RegisterAck(RegisterAck { coordinator_id })),
        vec(task(), 1..5).prop_map(|tasks| Body::TaskBulk(TaskBulk { tasks })),
        vec(result(), 1..5).prop_map(|results| Body::ResultBulk(ResultBulk { results })),
        Just(Body::Heartbeat),
        (any::<u32>(), any::<u32>()).prop_map(|(cores, gpus)| Body::Credit(Credit { cores, gpus })),
        Just(Body::Drain),
        Just(Body::Shutdown),
    ];
    (".{0,8}", any::<u64>(), body).prop_map(|(sender, seq, body)| Message::new(sender, seq, body))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn every_message_round_trips(m in message()) {
        let frame = encode(&m).unwrap();
        let (back, rest) = decode(&frame).unwrap();
        prop_assert!(rest.is_empty());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn arbitrary_chunking_yields_the_same_sequence(msgs in vec(message(), 1..12), cuts in vec(1usize..64, 1..200)) {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode(m).unwrap()).collect();
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        let (mut pos, mut i) = (0, 0);
        while pos < stream.len() {
            let len = cuts[i % cuts.len()].min(stream.len() - pos);
            dec.push(&stream[pos..pos + len]);
            pos += len;
            i += 1;
            while let Some(m) = dec.next_message().unwrap() {
                got.push(m);
            }
        }
        prop_assert_eq!(dec.buffered(), 0);
        prop_assert_eq!(got, msgs);
    }

    #[test]
    fn a_proper_prefix_never_decodes(m in message(), frac in 0.0..1.0f64) {
        let frame = encode(&m).unwrap();
        let cut = ((frame.len() as f64) * frac) as usize;
        prop_assert_eq!(decode(&frame[..cut]).unwrap_err(), DecodeError::NeedMoreBytes);
    }

    #[test]
    fn blocking_reads_match_writes(msgs in vec(message(), 0..8)) {
        let mut wire = Vec::new();
        for m in &msgs {
            write_message(&mut wire, m).unwrap();
        }
        let mut r = wire.as_slice();
        let mut got = Vec::new();
        while let Some(m) = read_message(&mut r).unwrap() {
            got.push(m);
        }
        prop_assert_eq!(got, msgs);
    }
}

#[test]
fn documented_credit_frame() {
    let m = Message::new("w0", 7, Body::Credit(Credit { cores: 2, gpus: 0 }));
    let frame = encode(&m).unwrap();
    let body = br#"{"sender_id":"w0","seq":7,"type":"CREDIT","payload":{"cores":2,"gpus":0}}"#;
    assert_eq!(&frame[..4], &[0x00, 0x00, 0x00, 0x49]);
    assert_eq!(&frame[4..], body);
}

#[test]
fn documented_task_bulk_frame() {
    let t = TaskDescription::function("t0", "dock", json!({ "duration": 1.5 }));
    let m = Message::new("c0", 3, Body::TaskBulk(TaskBulk { tasks: vec![t] }));
    let frame = encode(&m).unwrap();
    let body = concat!(
        r#"{"sender_id":"c0","seq":3,"type":"TASK_BULK","payload":{"tasks":[{"uid":"t0","kind":"FUNCTION","#,
        r#""payload":{"function_name":"dock","args":{"duration":1.5}},"cores":1,"gpus":0}]}}"#
    );
    assert_eq!(u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize, body.len());
    assert_eq!(std::str::from_utf8(&frame[4..]).unwrap(), body);
}

#[test]
fn corrupt_frames_are_errors_not_messages() {
    let mut dec = FrameDecoder::new();
    dec.push(&[0xff, 0xff, 0xff, 0xff]);
    assert!(matches!(dec.next_message(), Err(ProtocolError::LengthOverflow(_))));

    let mut bad = 4u32.to_be_bytes().to_vec();
    bad.extend_from_slice(&[0xc3, 0x28, b'{', b'}']);
    assert_eq!(decode(&bad).unwrap_err(), DecodeError::Protocol(ProtocolError::NotUtf8));

    let body = br#"{"sender_id":"c0","seq":1,"type":"TASK_BULK","payload":{"tasks":[]}}"#;
    let mut empty = (body.len() as u32).to_be_bytes().to_vec();
    empty.extend_from_slice(body);
    assert!(matches!(decode(&empty), Err(DecodeError::Protocol(ProtocolError::Malformed(_)))));

    let body = br#"{"sender_id":"c0","seq":1,"type":"TELEPORT"}"#;
    let mut unknown = (body.len() as u32).to_be_bytes().to_vec();
    unknown.extend_from_slice(body);
    assert!(matches!(decode(&unknown), Err(DecodeError::Protocol(ProtocolError::Malformed(_)))));
}
