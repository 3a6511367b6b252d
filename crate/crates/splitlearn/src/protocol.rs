//! Binary framing for all client↔server traffic.
//!
//! Wire layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SPL1"
//! 4       1     frame type
//! 5       4     client_id u32
//! 9       4     epoch u32
//! 13      4     batch_id u32
//! 17      8     payload_len u64
//! 25      n     payload
//! 25+n    4     CRC-32 of payload
//! ```
//!
//! The same bytes travel over TCP and the in-process channel. See
//! `docs/protocol.md` for payload formats per frame type.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::crc::crc32;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPL1";
pub const HEADER_LEN: usize = 25;
/// Decoders refuse to allocate more than this for one payload.
pub const MAX_PAYLOAD: u64 = 256 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    TrainRequest = 1,
    FeatureBatch = 2,
    GradientBatch = 3,
    WeightUpload = 4,
    WeightBroadcast = 5,
    EpochDone = 6,
    AvgCommit = 7,
    EvalRequest = 8,
    LogitsBatch = 9,
    Error = 10,
}

impl FrameType {
    pub const ALL: [FrameType; 10] = [
        FrameType::TrainRequest,
        FrameType::FeatureBatch,
        FrameType::GradientBatch,
        FrameType::WeightUpload,
        FrameType::WeightBroadcast,
        FrameType::EpochDone,
        FrameType::AvgCommit,
        FrameType::EvalRequest,
        FrameType::LogitsBatch,
        FrameType::Error,
    ];

    fn from_u8(v: u8) -> Option<FrameType> {
        FrameType::ALL.into_iter().find(|&t| t as u8 == v)
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("payload CRC mismatch")]
    CrcMismatch,
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte cap")]
    PayloadTooLarge(u64),
    #[error("trailing bytes after frame")]
    TrailingBytes,
    #[error("malformed {0} payload")]
    BadPayload(&'static str),
    #[error("peer closed the stream")]
    Closed,
    #[error("read timed out")]
    Timeout,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One wire message. The payload is raw bytes; typed helpers below encode and
/// decode the per-type formats.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub client_id: u32,
    pub epoch: u32,
    pub batch_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, client_id: u32, epoch: u32, batch_id: u32) -> Frame {
        Frame {
            frame_type,
            client_id,
            epoch,
            batch_id,
            payload: Vec::new(),
        }
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Frame {
        self.payload = payload;
        self
    }
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&frame.client_id.to_le_bytes());
    out.extend_from_slice(&frame.epoch.to_le_bytes());
    out.extend_from_slice(&frame.batch_id.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    out.extend_from_slice(&crc32(&frame.payload).to_le_bytes());
    out
}

/// Decode exactly one frame occupying the whole buffer.
pub fn decode(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated);
    }
    let (header, rest) = bytes.split_at(HEADER_LEN);
    if &header[0..4] != MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let frame_type = FrameType::from_u8(header[4]).ok_or(ProtocolError::UnknownType(header[4]))?;
    let client_id = u32::from_le_bytes(header[5..9].try_into().unwrap());
    let epoch = u32::from_le_bytes(header[9..13].try_into().unwrap());
    let batch_id = u32::from_le_bytes(header[13..17].try_into().unwrap());
    let payload_len = u64::from_le_bytes(header[17..25].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    let payload_len = payload_len as usize;
    if rest.len() < payload_len + 4 {
        return Err(ProtocolError::Truncated);
    }
    if rest.len() > payload_len + 4 {
        return Err(ProtocolError::TrailingBytes);
    }
    let (payload, crc_bytes) = rest.split_at(payload_len);
    let crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc != crc32(payload) {
        return Err(ProtocolError::CrcMismatch);
    }
    Ok(Frame {
        frame_type,
        client_id,
        epoch,
        batch_id,
        payload: payload.to_vec(),
    })
}

fn read_full(reader: &mut impl Read, buf: &mut [u8]) -> Result<(), ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(if filled == 0 {
                    ProtocolError::Closed
                } else {
                    ProtocolError::Truncated
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut =>
            {
                return Err(ProtocolError::Timeout)
            }
            Err(e) => return Err(ProtocolError::Io(e)),
        }
    }
    Ok(())
}

/// Blocking read of exactly one frame; partial reads are reassembled.
/// EOF before the first header byte reports [`ProtocolError::Closed`]; EOF
/// anywhere inside a frame reports truncation.
pub fn read_frame(reader: &mut impl Read) -> Result<Frame, ProtocolError> {
    let mut header = [0u8; HEADER_LEN];
    read_full(reader, &mut header)?;
    if &header[0..4] != MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let frame_type = FrameType::from_u8(header[4]).ok_or(ProtocolError::UnknownType(header[4]))?;
    let payload_len = u64::from_le_bytes(header[17..25].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    let mut payload = vec![0u8; payload_len as usize];
    match read_full(reader, &mut payload) {
        Ok(()) => {}
        Err(ProtocolError::Closed) => return Err(ProtocolError::Truncated),
        Err(e) => return Err(e),
    }
    let mut crc_bytes = [0u8; 4];
    match read_full(reader, &mut crc_bytes) {
        Ok(()) => {}
        Err(ProtocolError::Closed) => return Err(ProtocolError::Truncated),
        Err(e) => return Err(e),
    }
    if u32::from_le_bytes(crc_bytes) != crc32(&payload) {
        return Err(ProtocolError::CrcMismatch);
    }
    Ok(Frame {
        frame_type,
        client_id: u32::from_le_bytes(header[5..9].try_into().unwrap()),
        epoch: u32::from_le_bytes(header[9..13].try_into().unwrap()),
        batch_id: u32::from_le_bytes(header[13..17].try_into().unwrap()),
        payload,
    })
}

pub fn write_frame(writer: &mut impl Write, frame: &Frame) -> io::Result<()> {
    writer.write_all(&encode(frame))?;
    writer.flush()
}

/// Tensor block payload: rank u8, extents u32 LE each, f32 LE data.
pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + 4 * tensor.shape().len() + 4 * tensor.numel());
    out.push(tensor.shape().len() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, ProtocolError> {
    let bad = || ProtocolError::BadPayload("tensor block");
    if bytes.is_empty() {
        return Err(bad());
    }
    let rank = bytes[0] as usize;
    let mut offset = 1;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(offset..offset + 4).ok_or_else(bad)?;
        shape.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        offset += 4;
    }
    let numel: usize = shape.iter().product();
    let payload = bytes.get(offset..).ok_or_else(bad)?;
    if payload.len() != numel * 4 {
        return Err(bad());
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|_| bad())
}

/// TRAIN_REQUEST payload: split depth, sharing flag, epoch count, and the
/// client's initial extractor checksum (all clients must match in sharing
/// mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainRequest {
    pub depth: u8,
    pub share: bool,
    pub epochs: u32,
    pub extractor_checksum: u32,
}

impl TrainRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10);
        out.push(self.depth);
        out.push(self.share as u8);
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&self.extractor_checksum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<TrainRequest, ProtocolError> {
        if bytes.len() != 10 {
            return Err(ProtocolError::BadPayload("train request"));
        }
        Ok(TrainRequest {
            depth: bytes[0],
            share: bytes[1] != 0,
            epochs: u32::from_le_bytes(bytes[2..6].try_into().unwrap()),
            extractor_checksum: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
        })
    }
}

/// ERROR payload: numeric code plus a human-readable message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorInfo {
    pub code: u16,
    pub message: String,
}

pub mod error_code {
    pub const SHAPE_MISMATCH: u16 = 1;
    pub const UNKNOWN_SESSION: u16 = 2;
    pub const MISSING_CACHE: u16 = 3;
    pub const REPLAYED_BATCH: u16 = 4;
    pub const CONFIG_MISMATCH: u16 = 5;
    pub const PROTOCOL: u16 = 6;
    pub const INTERNAL: u16 = 7;
}

impl ErrorInfo {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.message.len());
        out.extend_from_slice(&self.code.to_le_bytes());
        out.extend_from_slice(self.message.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<ErrorInfo, ProtocolError> {
        if bytes.len() < 2 {
            return Err(ProtocolError::BadPayload("error info"));
        }
        Ok(ErrorInfo {
            code: u16::from_le_bytes(bytes[0..2].try_into().unwrap()),
            message: String::from_utf8_lossy(&bytes[2..]).into_owned(),
        })
    }
}

/// EPOCH_DONE payload: the client's mean train loss for the epoch.
pub fn encode_loss(loss: f32) -> Vec<u8> {
    loss.to_le_bytes().to_vec()
}

pub fn decode_loss(bytes: &[u8]) -> Option<f32> {
    match bytes.len() {
        4 => Some(f32::from_le_bytes(bytes.try_into().unwrap())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_25_bytes_and_empty_frame_is_29() {
        // 4 magic + 1 type + 4 client + 4 epoch + 4 batch + 8 len = 25,
        // plus the 4-byte payload CRC trailer.
        assert_eq!(HEADER_LEN, 4 + 1 + 4 + 4 + 4 + 8);
        let frame = Frame::new(FrameType::EpochDone, 3, 7, 0);
        let bytes = encode(&frame);
        assert_eq!(bytes.len(), 29);
        assert_eq!(&bytes[0..4], b"SPL1");
        assert_eq!(bytes[4], FrameType::EpochDone as u8);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 0);
    }

    #[test]
    fn feature_batch_round_trips() {
        let tensor = Tensor::from_fn(&[2, 16, 14, 14], |i| (i as f32).sin());
        let frame = Frame::new(FrameType::FeatureBatch, 1, 0, 5)
            .with_payload(encode_tensor(&tensor));
        let decoded = decode(&encode(&frame)).unwrap();
        assert_eq!(decoded, frame);
        assert_eq!(decode_tensor(&decoded.payload).unwrap(), tensor);
    }

    #[test]
    fn flipping_any_payload_byte_is_detected() {
        let tensor = Tensor::from_fn(&[3, 3], |i| i as f32 + 0.5);
        let frame =
            Frame::new(FrameType::GradientBatch, 0, 1, 2).with_payload(encode_tensor(&tensor));
        let clean = encode(&frame);
        for i in HEADER_LEN..clean.len() - 4 {
            let mut corrupted = clean.clone();
            corrupted[i] ^= 0x01;
            assert!(
                matches!(decode(&corrupted), Err(ProtocolError::CrcMismatch)),
                "byte {i} not detected"
            );
        }
    }

    #[test]
    fn distinct_errors_for_each_failure() {
        let frame = Frame::new(FrameType::EpochDone, 0, 0, 0);
        let good = encode(&frame);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(ProtocolError::BadMagic)));

        let mut bad_type = good.clone();
        bad_type[4] = 200;
        assert!(matches!(decode(&bad_type), Err(ProtocolError::UnknownType(200))));

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(ProtocolError::Truncated)
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode(&trailing), Err(ProtocolError::TrailingBytes)));

        let mut huge = good;
        huge[17..25].copy_from_slice(&(MAX_PAYLOAD + 1).to_le_bytes());
        assert!(matches!(
            decode(&huge),
            Err(ProtocolError::PayloadTooLarge(_))
        ));
    }

    #[test]
    fn stream_reader_reassembles_and_orders_frames() {
        let a = Frame::new(FrameType::EpochDone, 1, 0, 0).with_payload(encode_loss(0.25));
        let b = Frame::new(FrameType::AvgCommit, 1, 0, 0);
        let mut bytes = encode(&a);
        bytes.extend_from_slice(&encode(&b));
        let mut cursor = std::io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cursor).unwrap(), a);
        assert_eq!(read_frame(&mut cursor).unwrap(), b);
        assert!(matches!(
            read_frame(&mut cursor),
            Err(ProtocolError::Closed)
        ));
    }

    #[test]
    fn eof_mid_frame_is_truncation() {
        let frame = Frame::new(FrameType::EpochDone, 1, 0, 0).with_payload(vec![1, 2, 3]);
        let bytes = encode(&frame);
        let mut cursor = std::io::Cursor::new(&bytes[..bytes.len() - 2]);
        assert!(matches!(
            read_frame(&mut cursor),
            Err(ProtocolError::Truncated)
        ));
    }

    #[test]
    fn train_request_round_trips() {
        let req = TrainRequest {
            depth: 2,
            share: true,
            epochs: 20,
            extractor_checksum: 0xDEADBEEF,
        };
        assert_eq!(TrainRequest::decode(&req.encode()).unwrap(), req);
    }

    #[test]
    fn sixteen_mebibyte_frame_round_trips() {
        let payload = vec![0xA5u8; 16 * 1024 * 1024];
        let frame = Frame::new(FrameType::WeightUpload, 2, 9, 0).with_payload(payload);
        let decoded = decode(&encode(&frame)).unwrap();
        assert_eq!(decoded, frame);
    }
}
