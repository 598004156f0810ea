//! Binary message codec shared by the farm server and its clients.
//!
//! ## Frame layout
//!
//! ```text
//! [length: 4 bytes BE][version: 1 byte][tag: 1 byte][payload: length bytes]
//! ```
//!
//! `length` counts payload bytes only. All integers are big-endian.
//!
//! | Tag  | Message        | Payload |
//! |------|----------------|---------|
//! | 0x01 | ClientHello    | `[4B requested_slots]` |
//! | 0x02 | HelloAck       | `[8B client_id][8B lease_ms][4B chunk_max]` |
//! | 0x03 | ChunkRequest   | `[8B client_id][4B max_tasks]` |
//! | 0x04 | TaskChunk      | `[8B chunk_id][4B count]([4B len][bytes])*` |
//! | 0x05 | Drained        | (empty) |
//! | 0x06 | ResultChunk    | `[8B chunk_id][4B count]([4B len][bytes])*` |
//! | 0x07 | ResultAck      | `[8B chunk_id]` |
//! | 0x08 | Heartbeat      | `[8B client_id][8B seq]` |
//! | 0x09 | HeartbeatAck   | `[8B seq]` |
//! | 0x0A | ShutdownNotice | `[1B reason]` (0 = server stopping, 1 = rejected) |
//!
//! Task and result payloads are opaque blobs at this layer.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const PROTOCOL_VERSION: u8 = 1;

/// Bytes before the payload: length (4), version (1), tag (1).
pub const HEADER_SIZE: usize = 6;

/// Largest accepted payload (16 MiB).
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

pub const TAG_CLIENT_HELLO: u8 = 0x01;
pub const TAG_HELLO_ACK: u8 = 0x02;
pub const TAG_CHUNK_REQUEST: u8 = 0x03;
pub const TAG_TASK_CHUNK: u8 = 0x04;
pub const TAG_DRAINED: u8 = 0x05;
pub const TAG_RESULT_CHUNK: u8 = 0x06;
pub const TAG_RESULT_ACK: u8 = 0x07;
pub const TAG_HEARTBEAT: u8 = 0x08;
pub const TAG_HEARTBEAT_ACK: u8 = 0x09;
pub const TAG_SHUTDOWN_NOTICE: u8 = 0x0A;

/// Opaque task blob; the workload defines its contents.
pub type TaskPayload = Vec<u8>;
/// Opaque result blob; the workload defines its contents.
pub type ResultPayload = Vec<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShutdownReason {
    ServerStopping,
    Rejected,
}

impl ShutdownReason {
    fn to_byte(self) -> u8 {
        match self {
            ShutdownReason::ServerStopping => 0,
            ShutdownReason::Rejected => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ShutdownReason::ServerStopping),
            1 => Some(ShutdownReason::Rejected),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    ClientHello {
        requested_slots: u32,
    },
    HelloAck {
        client_id: u64,
        lease_ms: u64,
        chunk_max: u32,
    },
    ChunkRequest {
        client_id: u64,
        max_tasks: u32,
    },
    TaskChunk {
        chunk_id: u64,
        tasks: Vec<TaskPayload>,
    },
    Drained,
    ResultChunk {
        chunk_id: u64,
        results: Vec<ResultPayload>,
    },
    ResultAck {
        chunk_id: u64,
    },
    Heartbeat {
        client_id: u64,
        seq: u64,
    },
    HeartbeatAck {
        seq: u64,
    },
    ShutdownNotice {
        reason: ShutdownReason,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::ClientHello { .. } => TAG_CLIENT_HELLO,
            Message::HelloAck { .. } => TAG_HELLO_ACK,
            Message::ChunkRequest { .. } => TAG_CHUNK_REQUEST,
            Message::TaskChunk { .. } => TAG_TASK_CHUNK,
            Message::Drained => TAG_DRAINED,
            Message::ResultChunk { .. } => TAG_RESULT_CHUNK,
            Message::ResultAck { .. } => TAG_RESULT_ACK,
            Message::Heartbeat { .. } => TAG_HEARTBEAT,
            Message::HeartbeatAck { .. } => TAG_HEARTBEAT_ACK,
            Message::ShutdownNotice { .. } => TAG_SHUTDOWN_NOTICE,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD} byte frame limit")]
    OversizePayload(usize),
    #[error("list of {0} entries does not fit a u32 count")]
    CountOverflow(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    /// More bytes are needed; not a protocol violation.
    #[error("incomplete frame")]
    Incomplete,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("frame announces {0} payload bytes, over the limit")]
    OversizePayload(usize),
    #[error("malformed payload: {0}")]
    MalformedPayload(&'static str),
}

/// Encodes `msg` into one complete frame.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut payload = Vec::new();
    match msg {
        Message::ClientHello { requested_slots } => put_u32(&mut payload, *requested_slots),
        Message::HelloAck {
            client_id,
            lease_ms,
            chunk_max,
        } => {
            put_u64(&mut payload, *client_id);
            put_u64(&mut payload, *lease_ms);
            put_u32(&mut payload, *chunk_max);
        }
        Message::ChunkRequest { client_id, max_tasks } => {
            put_u64(&mut payload, *client_id);
            put_u32(&mut payload, *max_tasks);
        }
        Message::TaskChunk { chunk_id, tasks } => {
            put_u64(&mut payload, *chunk_id);
            put_blobs(&mut payload, tasks)?;
        }
        Message::Drained => {}
        Message::ResultChunk { chunk_id, results } => {
            put_u64(&mut payload, *chunk_id);
            put_blobs(&mut payload, results)?;
        }
        Message::ResultAck { chunk_id } => put_u64(&mut payload, *chunk_id),
        Message::Heartbeat { client_id, seq } => {
            put_u64(&mut payload, *client_id);
            put_u64(&mut payload, *seq);
        }
        Message::HeartbeatAck { seq } => put_u64(&mut payload, *seq),
        Message::ShutdownNotice { reason } => payload.push(reason.to_byte()),
    }
    if payload.len() > MAX_PAYLOAD {
        return Err(EncodeError::OversizePayload(payload.len()));
    }
    let mut frame = Vec::with_capacity(HEADER_SIZE + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.push(PROTOCOL_VERSION);
    frame.push(msg.tag());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Decodes the first frame in `bytes`, returning the message and the number
/// of bytes it occupied. Trailing bytes are left alone.
pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Incomplete);
    }
    let length = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if length > MAX_PAYLOAD {
        return Err(DecodeError::OversizePayload(length));
    }
    let Some(&version) = bytes.get(4) else {
        return Err(DecodeError::Incomplete);
    };
    if version != PROTOCOL_VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let Some(&tag) = bytes.get(5) else {
        return Err(DecodeError::Incomplete);
    };
    if !(TAG_CLIENT_HELLO..=TAG_SHUTDOWN_NOTICE).contains(&tag) {
        return Err(DecodeError::UnknownTag(tag));
    }
    let total = HEADER_SIZE + length;
    if bytes.len() < total {
        return Err(DecodeError::Incomplete);
    }
    let msg = decode_payload(tag, &bytes[HEADER_SIZE..total])?;
    Ok((msg, total))
}

fn decode_payload(tag: u8, payload: &[u8]) -> Result<Message, DecodeError> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let msg = match tag {
        TAG_CLIENT_HELLO => Message::ClientHello {
            requested_slots: cur.u32()?,
        },
        TAG_HELLO_ACK => Message::HelloAck {
            client_id: cur.u64()?,
            lease_ms: cur.u64()?,
            chunk_max: cur.u32()?,
        },
        TAG_CHUNK_REQUEST => Message::ChunkRequest {
            client_id: cur.u64()?,
            max_tasks: cur.u32()?,
        },
        TAG_TASK_CHUNK => Message::TaskChunk {
            chunk_id: cur.u64()?,
            tasks: cur.blobs()?,
        },
        TAG_DRAINED => Message::Drained,
        TAG_RESULT_CHUNK => Message::ResultChunk {
            chunk_id: cur.u64()?,
            results: cur.blobs()?,
        },
        TAG_RESULT_ACK => Message::ResultAck { chunk_id: cur.u64()? },
        TAG_HEARTBEAT => Message::Heartbeat {
            client_id: cur.u64()?,
            seq: cur.u64()?,
        },
        TAG_HEARTBEAT_ACK => Message::HeartbeatAck { seq: cur.u64()? },
        TAG_SHUTDOWN_NOTICE => Message::ShutdownNotice {
            reason: ShutdownReason::from_byte(cur.u8()?)
                .ok_or(DecodeError::MalformedPayload("unknown shutdown reason"))?,
        },
        other => return Err(DecodeError::UnknownTag(other)),
    };
    if cur.pos != payload.len() {
        return Err(DecodeError::MalformedPayload("trailing bytes in payload"));
    }
    Ok(msg)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_blobs(out: &mut Vec<u8>, blobs: &[Vec<u8>]) -> Result<(), EncodeError> {
    let count = u32::try_from(blobs.len()).map_err(|_| EncodeError::CountOverflow(blobs.len()))?;
    put_u32(out, count);
    for blob in blobs {
        let len = u32::try_from(blob.len()).map_err(|_| EncodeError::OversizePayload(blob.len()))?;
        put_u32(out, len);
        out.extend_from_slice(blob);
    }
    Ok(())
}

/// Bounds-checked reader over a complete payload. Running out of bytes here
/// is a malformed payload, since the frame length already said it was whole.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or(DecodeError::MalformedPayload("field runs past end of payload"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blobs(&mut self) -> Result<Vec<Vec<u8>>, DecodeError> {
        let count = self.u32()? as usize;
        // each blob needs at least its 4-byte length
        if count > (self.buf.len() - self.pos) / 4 {
            return Err(DecodeError::MalformedPayload("blob count exceeds payload"));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.u32()? as usize;
            out.push(self.take(len)?.to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Reads exactly one frame from a blocking stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, StreamError> {
    let mut header = [0u8; HEADER_SIZE];
    if let Err(e) = r.read_exact(&mut header) {
        return Err(match e.kind() {
            io::ErrorKind::UnexpectedEof => StreamError::Closed,
            _ => StreamError::Io(e),
        });
    }
    let length = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if length > MAX_PAYLOAD {
        return Err(DecodeError::OversizePayload(length).into());
    }
    if header[4] != PROTOCOL_VERSION {
        return Err(DecodeError::BadVersion(header[4]).into());
    }
    let mut frame = Vec::with_capacity(HEADER_SIZE + length);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_SIZE + length, 0);
    r.read_exact(&mut frame[HEADER_SIZE..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StreamError::Closed,
        _ => StreamError::Io(e),
    })?;
    let (msg, _) = decode_message(&frame)?;
    Ok(msg)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), StreamError> {
    let frame = encode_message(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heartbeat_layout() {
        let frame = encode_message(&Message::Heartbeat { client_id: 7, seq: 3 }).unwrap();
        assert_eq!(&frame[..4], &16u32.to_be_bytes());
        assert_eq!(frame[4], PROTOCOL_VERSION);
        assert_eq!(frame[5], TAG_HEARTBEAT);
        assert_eq!(&frame[6..14], &7u64.to_be_bytes());
        assert_eq!(&frame[14..22], &3u64.to_be_bytes());
        assert_eq!(frame.len(), 22);
    }

    #[test]
    fn drained_is_empty() {
        let frame = encode_message(&Message::Drained).unwrap();
        assert_eq!(frame, vec![0, 0, 0, 0, PROTOCOL_VERSION, TAG_DRAINED]);
    }

    #[test]
    fn empty_input_is_incomplete() {
        assert_eq!(decode_message(&[]), Err(DecodeError::Incomplete));
    }

    #[test]
    fn reserved_tag_rejected() {
        let frame = [0, 0, 0, 0, PROTOCOL_VERSION, 0xFF];
        assert_eq!(decode_message(&frame), Err(DecodeError::UnknownTag(0xFF)));
        let frame = [0, 0, 0, 0, PROTOCOL_VERSION, 0x00];
        assert_eq!(decode_message(&frame), Err(DecodeError::UnknownTag(0x00)));
    }

    #[test]
    fn version_checked_before_payload() {
        // payload is garbage and short, but the version is what gets reported
        let frame = [0, 0, 0, 9, 2, TAG_HEARTBEAT, 1];
        assert_eq!(decode_message(&frame), Err(DecodeError::BadVersion(2)));
    }

    #[test]
    fn trailing_bytes_untouched() {
        let msg = Message::Heartbeat { client_id: 1, seq: 99 };
        let mut buf = encode_message(&msg).unwrap();
        let frame_len = buf.len();
        buf.extend_from_slice(&[0xAA, 0xBB, 0xCC]);
        let (decoded, consumed) = decode_message(&buf).unwrap();
        assert_eq!(decoded, msg);
        assert_eq!(consumed, frame_len);
        assert_eq!(&buf[consumed..], &[0xAA, 0xBB, 0xCC]);
    }

    #[test]
    fn length_field_mismatch_is_malformed() {
        // Heartbeat with one byte too many
        let mut frame = encode_message(&Message::Heartbeat { client_id: 1, seq: 2 }).unwrap();
        frame.push(0);
        frame[3] += 1;
        assert!(matches!(decode_message(&frame), Err(DecodeError::MalformedPayload(_))));
        // ResultAck with a short payload
        let frame = [0, 0, 0, 4, PROTOCOL_VERSION, TAG_RESULT_ACK, 0, 0, 0, 1];
        assert!(matches!(decode_message(&frame), Err(DecodeError::MalformedPayload(_))));
    }

    #[test]
    fn blob_count_bomb_is_malformed() {
        let mut payload = 5u64.to_be_bytes().to_vec();
        payload.extend_from_slice(&u32::MAX.to_be_bytes());
        let mut frame = (payload.len() as u32).to_be_bytes().to_vec();
        frame.push(PROTOCOL_VERSION);
        frame.push(TAG_TASK_CHUNK);
        frame.extend_from_slice(&payload);
        assert!(matches!(decode_message(&frame), Err(DecodeError::MalformedPayload(_))));
    }

    #[test]
    fn oversize_rejected_both_ways() {
        let big = Message::TaskChunk {
            chunk_id: 1,
            tasks: vec![vec![0u8; MAX_PAYLOAD]],
        };
        assert!(matches!(encode_message(&big), Err(EncodeError::OversizePayload(_))));
        let header = [0x02, 0, 0, 0, PROTOCOL_VERSION, TAG_TASK_CHUNK];
        assert!(matches!(decode_message(&header), Err(DecodeError::OversizePayload(_))));
    }

    #[test]
    fn stream_helpers() {
        let msgs = vec![
            Message::ClientHello { requested_slots: 4 },
            Message::ShutdownNotice {
                reason: ShutdownReason::Rejected,
            },
        ];
        let mut wire = Vec::new();
        for m in &msgs {
            write_message(&mut wire, m).unwrap();
        }
        let mut r = io::Cursor::new(wire);
        assert_eq!(read_message(&mut r).unwrap(), msgs[0]);
        assert_eq!(read_message(&mut r).unwrap(), msgs[1]);
        assert!(matches!(read_message(&mut r), Err(StreamError::Closed)));
    }
}
