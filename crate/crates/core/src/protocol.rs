//! Framed messages between coordinators, workers and the agent.
//!
//! A frame is a 4-byte big-endian length followed by exactly that many bytes
//! of UTF-8 JSON holding one [`Message`] on a single line. The layout is
//! documented with hex examples in `docs/protocol.md`.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TaskDescription, TaskResult};

/// Largest body accepted by the decoder.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Body {
    Register(Register),
    RegisterAck(RegisterAck),
    TaskBulk(TaskBulk),
    ResultBulk(ResultBulk),
    Heartbeat,
    Credit(Credit),
    Drain,
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Register,
    RegisterAck,
    TaskBulk,
    ResultBulk,
    Heartbeat,
    Credit,
    Drain,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub worker_id: String,
    pub node_id: String,
    pub cores: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub coordinator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBulk {
    pub tasks: Vec<TaskDescription>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBulk {
    pub results: Vec<TaskResult>,
}

/// Additional capacity granted by a worker: the coordinator may send tasks
/// whose summed demand stays within the granted cores and GPUs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credit {
    pub cores: u32,
    pub gpus: u32,
}

impl Message {
    pub fn new(sender_id: impl Into<String>, seq: u64, body: Body) -> Self {
        Message { sender_id: sender_id.into(), seq, body }
    }

    pub fn message_type(&self) -> MessageType {
        match self.body {
            Body::Register(_) => MessageType::Register,
            Body::RegisterAck(_) => MessageType::RegisterAck,
            Body::TaskBulk(_) => MessageType::TaskBulk,
            Body::ResultBulk(_) => MessageType::ResultBulk,
            Body::Heartbeat => MessageType::Heartbeat,
            Body::Credit(_) => MessageType::Credit,
            Body::Drain => MessageType::Drain,
            Body::Shutdown => MessageType::Shutdown,
        }
    }

    fn check_payload(&self) -> Result<(), String> {
        match &self.body {
            Body::TaskBulk(b) if b.tasks.is_empty() => Err("TASK_BULK must carry at least one task".into()),
            Body::ResultBulk(b) if b.results.is_empty() => Err("RESULT_BULK must carry at least one result".into()),
            _ => Ok(()),
        }
    }

    /// Checks the bulk-size bound a coordinator configured.
    pub fn check_bulk_size(&self, bulk_size: usize) -> Result<(), String> {
        match &self.body {
            Body::TaskBulk(b) if b.tasks.len() > bulk_size => {
                Err(format!("TASK_BULK carries {} tasks, bulk size is {bulk_size}", b.tasks.len()))
            }
            _ => self.check_payload(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("payload rejected: {0}")]
    Payload(String),
    #[error("unserializable message: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("body of {0} bytes exceeds frame limit")]
    TooLarge(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("frame length {0} exceeds limit of {MAX_FRAME_LEN} bytes")]
    LengthOverflow(usize),
    #[error("frame body is not valid UTF-8")]
    NotUtf8,
    #[error("malformed frame body: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("incomplete frame")]
    NeedMoreBytes,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Serializes one message into a complete frame.
pub fn encode(m: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    encode_into(m, &mut out)?;
    Ok(out)
}

/// Appends one frame to `out`. On error `out` is left unchanged.
pub fn encode_into(m: &Message, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    m.check_payload().map_err(EncodeError::Payload)?;
    let start = out.len();
    out.extend_from_slice(&[0; HEADER_LEN]);
    if let Err(e) = serde_json::to_writer(&mut *out, m) {
        out.truncate(start);
        return Err(e.into());
    }
    let len = out.len() - start - HEADER_LEN;
    if len > MAX_FRAME_LEN {
        out.truncate(start);
        return Err(EncodeError::TooLarge(len));
    }
    out[start..start + HEADER_LEN].copy_from_slice(&(len as u32).to_be_bytes());
    Ok(())
}

/// Length announced by a frame header, if the header is complete.
fn frame_len(b: &[u8]) -> Result<Option<usize>, ProtocolError> {
    if b.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::LengthOverflow(len));
    }
    Ok(Some(len))
}

fn parse_body(body: &[u8]) -> Result<Message, ProtocolError> {
    let text = std::str::from_utf8(body).map_err(|_| ProtocolError::NotUtf8)?;
    let m: Message = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    m.check_payload().map_err(ProtocolError::Malformed)?;
    Ok(m)
}

/// Decodes the first frame in `b`, returning the message and the bytes after
/// it. A partial frame yields [`DecodeError::NeedMoreBytes`].
pub fn decode(b: &[u8]) -> Result<(Message, &[u8]), DecodeError> {
    let len = frame_len(b)?.ok_or(DecodeError::NeedMoreBytes)?;
    let end = HEADER_LEN + len;
    if b.len() < end {
        return Err(DecodeError::NeedMoreBytes);
    }
    let m = parse_body(&b[HEADER_LEN..end])?;
    Ok((m, &b[end..]))
}

/// Incremental decoder for one connection. Feed arbitrary chunks, pull whole
/// messages.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    pos: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: &[u8]) {
        if self.pos > 0 && self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        }
        self.buf.extend_from_slice(chunk);
    }

    /// Bytes received but not yet consumed by a complete frame.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        match decode(&self.buf[self.pos..]) {
            Ok((m, rest)) => {
                self.pos = self.buf.len() - rest.len();
                if self.pos > 4096 && self.pos * 2 > self.buf.len() {
                    self.buf.drain(..self.pos);
                    self.pos = 0;
                }
                Ok(Some(m))
            }
            Err(DecodeError::NeedMoreBytes) => Ok(None),
            Err(DecodeError::Protocol(e)) => Err(e),
        }
    }
}

/// Blocking read of one frame. Returns `Ok(None)` on a clean end of stream
/// between frames.
pub fn read_message<R: Read>(r: &mut R) -> io::Result<Option<Message>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = frame_len(&header).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?.unwrap_or_default();
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    parse_body(&body).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn write_message<W: Write>(w: &mut W, m: &Message) -> io::Result<()> {
    let frame = encode(m).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&frame)?;
    w.flush()
}

/// Numbers outgoing messages for one sender on one connection.
#[derive(Debug, Clone)]
pub struct Outbox {
    sender_id: String,
    next_seq: u64,
}

impl Outbox {
    pub fn new(sender_id: impl Into<String>) -> Self {
        Outbox { sender_id: sender_id.into(), next_seq: 1 }
    }

    pub fn sender_id(&self) -> &str {
        &self.sender_id
    }

    pub fn message(&mut self, body: Body) -> Message {
        let seq = self.next_seq;
        self.next_seq += 1;
        Message::new(self.sender_id.clone(), seq, body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqCheck {
    InOrder,
    /// Sequence number differs from the previous one plus one.
    Gap {
        expected: u64,
        got: u64,
    },
}

/// Receiver-side sequence tracking. Each sender's first message is expected
/// to carry seq 1.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: HashMap<String, u64>,
}

impl SeqTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, m: &Message) -> SeqCheck {
        let last = self.last.entry(m.sender_id.clone()).or_insert(0);
        let expected = *last + 1;
        *last = m.seq;
        if m.seq == expected {
            SeqCheck::InOrder
        } else {
            SeqCheck::Gap { expected, got: m.seq }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TaskKind, TaskState, Timestamps, Value};

    fn heartbeat() -> Message {
        Message::new("w1", 1, Body::Heartbeat)
    }

    fn bulk(n: usize) -> Message {
        let tasks = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    TaskDescription::function(format!("t{i}"), "noop", Value::Null)
                } else {
                    TaskDescription::executable(format!("t{i}"), ["/bin/true"])
                }
            })
            .collect();
        Message::new("c0", 7, Body::TaskBulk(TaskBulk { tasks }))
    }

    #[test]
    fn header_is_body_length() {
        let frame = encode(&heartbeat()).unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        assert_eq!(&frame[4..], br#"{"sender_id":"w1","seq":1,"type":"HEARTBEAT"}"#);
    }

    #[test]
    fn bulk_of_128_is_one_frame() {
        let m = bulk(128);
        let frame = encode(&m).unwrap();
        let (back, rest) = decode(&frame).unwrap();
        assert!(rest.is_empty());
        let Body::TaskBulk(b) = &back.body else { panic!("wrong type") };
        assert_eq!(b.tasks.len(), 128);
        for (i, t) in b.tasks.iter().enumerate() {
            assert_eq!(t.uid, format!("t{i}"));
            let kind = if i % 2 == 0 { TaskKind::Function } else { TaskKind::Executable };
            assert_eq!(t.kind(), kind);
        }
        assert_eq!(back, m);
    }

    #[test]
    fn empty_bulk_is_rejected() {
        assert!(matches!(encode(&bulk(0)), Err(EncodeError::Payload(_))));
    }

    #[test]
    fn two_frames_decode_in_order() {
        let mut stream = encode(&heartbeat()).unwrap();
        stream.extend(encode(&bulk(3)).unwrap());
        let (a, rest) = decode(&stream).unwrap();
        let (b, rest) = decode(rest).unwrap();
        assert_eq!(a, heartbeat());
        assert_eq!(b, bulk(3));
        assert!(rest.is_empty());
    }

    #[test]
    fn partial_header_needs_more() {
        let frame = encode(&heartbeat()).unwrap();
        assert_eq!(decode(&frame[..3]).unwrap_err(), DecodeError::NeedMoreBytes);
        assert_eq!(decode(&frame[..frame.len() - 1]).unwrap_err(), DecodeError::NeedMoreBytes);
    }

    #[test]
    fn non_utf8_body_is_protocol_error() {
        let mut frame = 2u32.to_be_bytes().to_vec();
        frame.extend([0xff, 0xfe]);
        assert_eq!(decode(&frame).unwrap_err(), DecodeError::Protocol(ProtocolError::NotUtf8));
    }

    #[test]
    fn oversized_length_is_protocol_error() {
        let frame = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert!(matches!(decode(&frame).unwrap_err(), DecodeError::Protocol(ProtocolError::LengthOverflow(_))));
    }

    #[test]
    fn malformed_json_is_protocol_error() {
        let body = br#"{"sender_id":"w1","seq":1,"type":"NOPE"}"#;
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend(body);
        assert!(matches!(decode(&frame).unwrap_err(), DecodeError::Protocol(ProtocolError::Malformed(_))));
    }

    #[test]
    fn decoder_handles_byte_at_a_time() {
        let mut stream = Vec::new();
        for i in 0..5 {
            encode_into(&Message::new("w", i + 1, Body::Credit(Credit { cores: i as u32, gpus: 0 })), &mut stream).unwrap();
        }
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        for b in stream {
            dec.push(&[b]);
            while let Some(m) = dec.next_message().unwrap() {
                got.push(m.seq);
            }
        }
        assert_eq!(got, vec![1, 2, 3, 4, 5]);
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn result_bulk_round_trips() {
        let r = TaskResult {
            uid: "t1".into(),
            state: TaskState::Failed,
            exit_code: Some(3),
            value: None,
            error_text: Some("exit status 3\nsecond line".into()),
            timestamps: Timestamps { submit: 0.1, schedule: 0.2, dispatch: 0.3, start: 1.0 / 3.0, end: 2.5 },
            worker_id: "w1".into(),
            node_id: "p0.n0".into(),
            kind: TaskKind::Executable,
        };
        let m = Message::new("w1", 2, Body::ResultBulk(ResultBulk { results: vec![r] }));
        let frame = encode(&m).unwrap();
        assert!(!frame[4..].contains(&b'\n'));
        assert_eq!(decode(&frame).unwrap().0, m);
    }

    #[test]
    fn read_write_over_io() {
        let mut buf = Vec::new();
        write_message(&mut buf, &heartbeat()).unwrap();
        write_message(&mut buf, &bulk(2)).unwrap();
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_message(&mut cur).unwrap(), Some(heartbeat()));
        assert_eq!(read_message(&mut cur).unwrap(), Some(bulk(2)));
        assert_eq!(read_message(&mut cur).unwrap(), None);
    }

    #[test]
    fn seq_gaps_are_flagged() {
        let mut tr = SeqTracker::new();
        let mut out = Outbox::new("w1");
        assert_eq!(tr.observe(&out.message(Body::Heartbeat)), SeqCheck::InOrder);
        assert_eq!(tr.observe(&out.message(Body::Heartbeat)), SeqCheck::InOrder);
        let _lost = out.message(Body::Heartbeat);
        assert_eq!(tr.observe(&out.message(Body::Heartbeat)), SeqCheck::Gap { expected: 3, got: 4 });
    }

    #[test]
    fn bulk_size_bound() {
        assert!(bulk(129).check_bulk_size(128).is_err());
        assert!(bulk(128).check_bulk_size(128).is_ok());
    }
}
