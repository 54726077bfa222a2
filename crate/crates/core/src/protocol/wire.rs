//! Byte-exact wire format.
//!
//! Every message is a 24-byte little-endian header followed by the payload
//! as 32-bit floats:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `0x4642_4E31`                |
//! | 4      | 2    | kind                               |
//! | 6      | 2    | flags                              |
//! | 8      | 4    | round                              |
//! | 12     | 4    | sender (`u32::MAX` is the server)  |
//! | 16     | 4    | receiver                           |
//! | 20     | 4    | payload length in values           |

use serde::{Deserialize, Serialize};

use crate::error::ProtocolError;
use crate::nn::ParamVector;

pub const HEADER_BYTES: usize = 24;
pub const VALUE_BYTES: usize = 4;
pub const MAGIC: u32 = 0x4642_4E31;
pub const SERVER_ID: u32 = u32::MAX;

pub const FLAG_TRAIN: u16 = 1;
pub const FLAG_VALIDATE: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u16)]
pub enum MessageKind {
    Init = 1,
    TrainRequest = 2,
    WeightUpload = 3,
    WeightBroadcast = 4,
    ValRequest = 5,
    ValResult = 6,
}

impl MessageKind {
    fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => Self::Init,
            2 => Self::TrainRequest,
            3 => Self::WeightUpload,
            4 => Self::WeightBroadcast,
            5 => Self::ValRequest,
            6 => Self::ValResult,
            _ => return None,
        })
    }
}

/// Encoded size of a message carrying `n_values` payload values.
pub const fn wire_size(n_values: usize) -> usize {
    HEADER_BYTES + VALUE_BYTES * n_values
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub flags: u16,
    pub round: u32,
    pub sender: u32,
    pub receiver: u32,
    pub values: Vec<f64>,
}

impl Message {
    pub fn header_only(kind: MessageKind, round: u32, sender: u32, receiver: u32) -> Self {
        Self {
            kind,
            flags: 0,
            round,
            sender,
            receiver,
            values: Vec::new(),
        }
    }

    pub fn wire_len(&self) -> usize {
        wire_size(self.values.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.kind as u16).to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < HEADER_BYTES {
            return Err(ProtocolError::Wire(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let magic = u32_at(0);
        if magic != MAGIC {
            return Err(ProtocolError::Wire(format!("bad magic {magic:#010x}")));
        }
        let kind = MessageKind::from_u16(u16_at(4))
            .ok_or_else(|| ProtocolError::Wire(format!("unknown message kind {}", u16_at(4))))?;
        let n = u32_at(20) as usize;
        if bytes.len() != wire_size(n) {
            return Err(ProtocolError::Wire(format!(
                "header announces {n} values ({} bytes), got {} bytes",
                wire_size(n),
                bytes.len()
            )));
        }
        let values = bytes[HEADER_BYTES..]
            .chunks_exact(VALUE_BYTES)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self {
            kind,
            flags: u16_at(6),
            round: u32_at(8),
            sender: u32_at(12),
            receiver: u32_at(16),
            values,
        })
    }
}

/// Encodes parameters as a server broadcast.
pub fn serialize_params(params: &ParamVector, round: u32, sender: u32, receiver: u32) -> Vec<u8> {
    Message {
        kind: MessageKind::WeightBroadcast,
        flags: 0,
        round,
        sender,
        receiver,
        values: params.values().to_vec(),
    }
    .encode()
}

/// Decodes a weight-carrying message into the layout of `like`.
pub fn deserialize_params(bytes: &[u8], like: &ParamVector) -> Result<ParamVector, ProtocolError> {
    let msg = Message::decode(bytes)?;
    if !matches!(msg.kind, MessageKind::WeightBroadcast | MessageKind::WeightUpload) {
        return Err(ProtocolError::Wire(format!("{:?} does not carry weights", msg.kind)));
    }
    if msg.values.len() != like.len() {
        return Err(ProtocolError::Wire(format!(
            "payload has {} values, layout needs {}",
            msg.values.len(),
            like.len()
        )));
    }
    Ok(like.with_values(msg.values)?)
}

/// Rounds every value through 32-bit precision, as a wire round trip does.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}
