//! Binary framing for weight uploads and dispatches.
//!
//! ```text
//! header (20 bytes, little-endian)
//!   magic        u32   0x46454453
//!   version      u16   1
//!   msg_type     u8    1 = update, 2 = dispatch
//!   reserved     u8
//!   client_id    u32
//!   round        u32
//!   block_count  u16
//!   reserved     u16
//! per block (6 + 4·param_count bytes)
//!   block_id     u16   segment id, see `Segment::wire_id`
//!   param_count  u32
//!   params       param_count × f32
//! ```

use crate::error::{Error, Result};
use crate::federation::{DispatchMsg, SegmentPayload, WeightUpdateMsg};
use crate::model::{ModelSpec, Segment};

pub const MAGIC: u32 = 0x4645_4453;
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
pub const BLOCK_HEADER_LEN: usize = 6;

#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgType {
    Update = 1,
    Dispatch = 2,
}

impl TryFrom<u8> for MsgType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(MsgType::Update),
            2 => Ok(MsgType::Dispatch),
            other => Err(Error::UnknownMsgType(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireBlock {
    pub block_id: u16,
    pub params: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub client_id: u32,
    pub round: u32,
    pub blocks: Vec<WireBlock>,
}

impl WireMessage {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .blocks
                .iter()
                .map(|b| BLOCK_HEADER_LEN + 4 * b.params.len())
                .sum::<usize>()
    }

    pub fn from_update(msg: &WeightUpdateMsg) -> Self {
        WireMessage {
            msg_type: MsgType::Update,
            client_id: msg.client,
            round: msg.round,
            blocks: to_wire_blocks(&msg.segments),
        }
    }

    pub fn from_dispatch(msg: &DispatchMsg, listener: u32) -> Self {
        WireMessage {
            msg_type: MsgType::Dispatch,
            client_id: listener,
            round: msg.round,
            blocks: to_wire_blocks(&msg.segments),
        }
    }

    fn segments(self) -> Result<SegmentPayload> {
        self.blocks
            .into_iter()
            .map(|b| Ok((Segment::from_wire_id(b.block_id)?, b.params)))
            .collect()
    }

    pub fn into_update(self) -> Result<WeightUpdateMsg> {
        if self.msg_type != MsgType::Update {
            return Err(Error::UnknownMsgType(self.msg_type as u8));
        }
        let (client, round) = (self.client_id, self.round);
        Ok(WeightUpdateMsg {
            client,
            round,
            segments: self.segments()?,
        })
    }

    pub fn into_dispatch(self) -> Result<DispatchMsg> {
        if self.msg_type != MsgType::Dispatch {
            return Err(Error::UnknownMsgType(self.msg_type as u8));
        }
        let round = self.round;
        Ok(DispatchMsg {
            round,
            segments: self.segments()?,
        })
    }
}

fn to_wire_blocks(segments: &SegmentPayload) -> Vec<WireBlock> {
    segments
        .iter()
        .map(|(seg, params)| WireBlock {
            block_id: seg.wire_id(),
            params: params.clone(),
        })
        .collect()
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(msg.msg_type as u8);
    out.push(0);
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&(msg.blocks.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for block in &msg.blocks {
        out.extend_from_slice(&block.block_id.to_le_bytes());
        out.extend_from_slice(&(block.params.len() as u32).to_le_bytes());
        for p in &block.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                needed: end,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes one frame and checks every block's parameter count against `spec`.
pub fn decode(bytes: &[u8], spec: &ModelSpec) -> Result<WireMessage> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let msg_type = MsgType::try_from(r.u8()?)?;
    let _reserved = r.u8()?;
    let client_id = r.u32()?;
    let round = r.u32()?;
    let block_count = r.u16()?;
    let _reserved = r.u16()?;
    let mut blocks = Vec::with_capacity(block_count as usize);
    for _ in 0..block_count {
        let block_id = r.u16()?;
        let param_count = r.u32()? as usize;
        let seg = Segment::from_wire_id(block_id)?;
        if seg.block >= spec.num_blocks {
            return Err(Error::BadBlockId(block_id));
        }
        let expected = spec.segment_param_count(seg);
        if param_count != expected {
            return Err(Error::ParamCountMismatch {
                block_id,
                expected,
                got: param_count,
            });
        }
        let raw = r.take(4 * param_count)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(WireBlock { block_id, params });
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(WireMessage {
        msg_type,
        client_id,
        round,
        blocks,
    })
}
