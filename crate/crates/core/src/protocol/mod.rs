//! Wire format for the stage, local-controller and global-controller links.
//!
//! ```text
//! frame   := len:u32le payload[len]
//! payload := msg_type:u8 correlation:u64le body
//! string  := n:u16le utf8[n]
//! blob    := n:u32le bytes[n]
//! ```
//!
//! | type | message           | body                                                        |
//! |------|-------------------|-------------------------------------------------------------|
//! | 1    | `REGISTER_STAGE`  | stage_id:u64 job_id:str pid:u32 hostname:str user_id:str    |
//! | 2    | `REGISTER_ACK`    | stage_id:u64 (0 = rejected)                                 |
//! | 3    | `COLLECT_REQ`     | empty                                                       |
//! | 4    | `COLLECT_RESP`    | n:u32, n × {job_id:str channel_id:u32 ops:u64 bytes:u64 window_ns:u64} |
//! | 5    | `RULE`            | stage_id:u64 channel_id:u32 kind:u8, then kind 0: granularity:u8 value:str rate:f64, kind 1: rate:f64 |
//! | 6    | `RULE_ACK`        | status:u8                                                   |
//! | 7    | `SET_POLICY`      | policy:blob                                                 |
//! | 8    | `POLICY_ACK`      | status:u8                                                   |
//! | 9    | `DEREGISTER_STAGE`| stage_id:u64                                                |
//! | 10   | `DEREGISTER_ACK`  | status:u8                                                   |
//!
//! Odd types are requests, even types are their responses; a response echoes
//! the request's correlation id. Rates are IEEE-754 doubles.

pub mod transport;

use thiserror::Error;

use crate::request::Granularity;
use crate::stage::StageInfo;

/// Frames above this payload size are refused as corrupt.
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;
pub const HEADER_LEN: usize = 4 + 1 + 8;

pub mod msg_type {
    pub const REGISTER_STAGE: u8 = 1;
    pub const REGISTER_ACK: u8 = 2;
    pub const COLLECT_REQ: u8 = 3;
    pub const COLLECT_RESP: u8 = 4;
    pub const RULE: u8 = 5;
    pub const RULE_ACK: u8 = 6;
    pub const SET_POLICY: u8 = 7;
    pub const POLICY_ACK: u8 = 8;
    pub const DEREGISTER_STAGE: u8 = 9;
    pub const DEREGISTER_ACK: u8 = 10;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    UnknownStage = 1,
    UnknownChannel = 2,
    InvalidRule = 3,
    InvalidPolicy = 4,
    Failed = 5,
}

impl Status {
    pub const ALL: [Status; 6] =
        [Status::Ok, Status::UnknownStage, Status::UnknownChannel, Status::InvalidRule, Status::InvalidPolicy, Status::Failed];

    pub fn from_code(code: u8) -> Option<Status> {
        Status::ALL.get(code as usize).copied()
    }

    pub fn is_ok(self) -> bool {
        self == Status::Ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatEntry {
    pub job_id: String,
    pub channel_id: u32,
    pub ops: u64,
    pub bytes: u64,
    pub window_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleAction {
    CreateChannel { granularity: Granularity, value: String, rate: f64 },
    SetRate { rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub stage_id: u64,
    pub channel_id: u32,
    pub action: RuleAction,
}

impl Rule {
    pub fn rate(&self) -> f64 {
        match self.action {
            RuleAction::CreateChannel { rate, .. } | RuleAction::SetRate { rate } => rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    RegisterStage(StageInfo),
    RegisterAck { stage_id: u64 },
    CollectReq,
    CollectResp(Vec<StatEntry>),
    Rule(Rule),
    RuleAck(Status),
    SetPolicy(Vec<u8>),
    PolicyAck(Status),
    DeregisterStage { stage_id: u64 },
    DeregisterAck(Status),
}

impl Body {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Body::RegisterStage(_) => REGISTER_STAGE,
            Body::RegisterAck { .. } => REGISTER_ACK,
            Body::CollectReq => COLLECT_REQ,
            Body::CollectResp(_) => COLLECT_RESP,
            Body::Rule(_) => RULE,
            Body::RuleAck(_) => RULE_ACK,
            Body::SetPolicy(_) => SET_POLICY,
            Body::PolicyAck(_) => POLICY_ACK,
            Body::DeregisterStage { .. } => DEREGISTER_STAGE,
            Body::DeregisterAck(_) => DEREGISTER_ACK,
        }
    }

    pub fn is_request(&self) -> bool {
        self.msg_type() % 2 == 1
    }

    /// The response type a request expects.
    pub fn response_type(&self) -> Option<u8> {
        self.is_request().then(|| self.msg_type() + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub correlation: u64,
    pub body: Body,
}

impl Message {
    pub fn new(correlation: u64, body: Body) -> Self {
        Message { correlation, body }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// The buffer does not yet hold a whole frame; `needed` more bytes are required.
    #[error("incomplete frame: {needed} more bytes needed")]
    Incomplete { needed: usize },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("frame length {0} out of bounds")]
    BadLength(u32),
    #[error("malformed {msg_type} body: {reason}")]
    Malformed { msg_type: u8, reason: &'static str },
}

impl DecodeError {
    /// Everything except an incomplete frame is fatal for the connection.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, DecodeError::Incomplete { .. })
    }
}

struct Writer<'a>(&'a mut Vec<u8>);

impl Writer<'_> {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        let bytes = s.as_bytes();
        let n = bytes.len().min(u16::MAX as usize);
        self.u16(n as u16);
        self.0.extend_from_slice(&bytes[..n]);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    msg_type: u8,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: &'static str) -> DecodeError {
        DecodeError::Malformed { msg_type: self.msg_type, reason }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(self.malformed("body shorter than its fields"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.malformed("invalid utf-8"))
    }
    fn status(&mut self) -> Result<Status, DecodeError> {
        let code = self.u8()?;
        Status::from_code(code).ok_or_else(|| self.malformed("unknown status code"))
    }
}

/// Append the framed encoding of `msg` to `out`.
///
/// Strings longer than 65535 bytes are truncated; callers keep identifiers short.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&[0; 4]);
    let mut w = Writer(out);
    w.u8(msg.body.msg_type());
    w.u64(msg.correlation);
    match &msg.body {
        Body::RegisterStage(info) => {
            w.u64(info.stage_id);
            w.str(&info.job_id);
            w.u32(info.pid);
            w.str(&info.hostname);
            w.str(&info.user_id);
        }
        Body::RegisterAck { stage_id } | Body::DeregisterStage { stage_id } => w.u64(*stage_id),
        Body::CollectReq => {}
        Body::CollectResp(entries) => {
            w.u32(entries.len() as u32);
            for e in entries {
                w.str(&e.job_id);
                w.u32(e.channel_id);
                w.u64(e.ops);
                w.u64(e.bytes);
                w.u64(e.window_ns);
            }
        }
        Body::Rule(rule) => {
            w.u64(rule.stage_id);
            w.u32(rule.channel_id);
            match &rule.action {
                RuleAction::CreateChannel { granularity, value, rate } => {
                    w.u8(0);
                    w.u8(granularity.code());
                    w.str(value);
                    w.f64(*rate);
                }
                RuleAction::SetRate { rate } => {
                    w.u8(1);
                    w.f64(*rate);
                }
            }
        }
        Body::RuleAck(s) | Body::PolicyAck(s) | Body::DeregisterAck(s) => w.u8(*s as u8),
        Body::SetPolicy(blob) => {
            w.u32(blob.len() as u32);
            out.extend_from_slice(blob);
        }
    }
    let len = (out.len() - start - 4) as u32;
    out[start..start + 4].copy_from_slice(&len.to_le_bytes());
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(msg, &mut out);
    out
}

/// Decode one frame from the front of `buf`, returning the message and the
/// number of bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize), DecodeError> {
    if buf.len() < 4 {
        return Err(DecodeError::Incomplete { needed: 4 - buf.len() });
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap());
    if len > MAX_FRAME_LEN || (len as usize) < HEADER_LEN - 4 {
        return Err(DecodeError::BadLength(len));
    }
    let total = 4 + len as usize;
    if buf.len() < total {
        return Err(DecodeError::Incomplete { needed: total - buf.len() });
    }
    let msg_type = buf[4];
    let correlation = u64::from_le_bytes(buf[5..13].try_into().unwrap());
    let mut r = Reader { buf: &buf[HEADER_LEN..total], msg_type };
    use msg_type::*;
    let body = match msg_type {
        REGISTER_STAGE => Body::RegisterStage(StageInfo {
            stage_id: r.u64()?,
            job_id: r.str()?,
            pid: r.u32()?,
            hostname: r.str()?,
            user_id: r.str()?,
        }),
        REGISTER_ACK => Body::RegisterAck { stage_id: r.u64()? },
        COLLECT_REQ => Body::CollectReq,
        COLLECT_RESP => {
            let n = r.u32()? as usize;
            // Each entry is at least 30 bytes; refuse counts the body cannot hold.
            if n > r.buf.len() / 30 {
                return Err(r.malformed("entry count exceeds body"));
            }
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                entries.push(StatEntry {
                    job_id: r.str()?,
                    channel_id: r.u32()?,
                    ops: r.u64()?,
                    bytes: r.u64()?,
                    window_ns: r.u64()?,
                });
            }
            Body::CollectResp(entries)
        }
        RULE => {
            let stage_id = r.u64()?;
            let channel_id = r.u32()?;
            let action = match r.u8()? {
                0 => {
                    let code = r.u8()?;
                    let granularity = Granularity::from_code(code).ok_or_else(|| r.malformed("unknown granularity"))?;
                    RuleAction::CreateChannel { granularity, value: r.str()?, rate: r.f64()? }
                }
                1 => RuleAction::SetRate { rate: r.f64()? },
                _ => return Err(r.malformed("unknown rule kind")),
            };
            Body::Rule(Rule { stage_id, channel_id, action })
        }
        RULE_ACK => Body::RuleAck(r.status()?),
        SET_POLICY => {
            let n = r.u32()? as usize;
            Body::SetPolicy(r.take(n)?.to_vec())
        }
        POLICY_ACK => Body::PolicyAck(r.status()?),
        DEREGISTER_STAGE => Body::DeregisterStage { stage_id: r.u64()? },
        DEREGISTER_ACK => Body::DeregisterAck(r.status()?),
        other => return Err(DecodeError::UnknownType(other)),
    };
    if !r.buf.is_empty() {
        return Err(r.malformed("trailing bytes"));
    }
    Ok((Message { correlation, body }, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collect_req_frame_layout() {
        let bytes = encode(&Message::new(7, Body::CollectReq));
        assert_eq!(bytes, [9, 0, 0, 0, 3, 7, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(decode(&bytes).unwrap(), (Message::new(7, Body::CollectReq), 13));
    }

    #[test]
    fn set_rate_rule_layout() {
        let msg = Message::new(1, Body::Rule(Rule { stage_id: 2, channel_id: 3, action: RuleAction::SetRate { rate: 1.5 } }));
        let bytes = encode(&msg);
        let mut expected = vec![30, 0, 0, 0, 5, 1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0, 1];
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn short_frame_needs_more() {
        let mut frame = 10u32.to_le_bytes().to_vec();
        frame.extend_from_slice(&[3, 0, 0, 0]);
        assert_eq!(decode(&frame), Err(DecodeError::Incomplete { needed: 6 }));
        assert_eq!(decode(&[1, 0]), Err(DecodeError::Incomplete { needed: 2 }));
    }

    #[test]
    fn unknown_type_is_fatal() {
        let mut bytes = encode(&Message::new(1, Body::CollectReq));
        bytes[4] = 0xFF;
        let err = decode(&bytes).unwrap_err();
        assert_eq!(err, DecodeError::UnknownType(0xFF));
        assert!(err.is_fatal());
    }

    #[test]
    fn corrupt_lengths_rejected() {
        assert_eq!(decode(&u32::MAX.to_le_bytes()), Err(DecodeError::BadLength(u32::MAX)));
        assert_eq!(decode(&[2, 0, 0, 0, 3, 0]), Err(DecodeError::BadLength(2)));
        let mut bytes = encode(&Message::new(1, Body::RegisterAck { stage_id: 4 }));
        bytes.push(0);
        bytes[0] += 1;
        assert!(matches!(decode(&bytes), Err(DecodeError::Malformed { reason: "trailing bytes", .. })));
    }

    #[test]
    fn bad_fields_rejected() {
        let mut bytes = encode(&Message::new(1, Body::RuleAck(Status::Ok)));
        bytes[13] = 99;
        assert!(matches!(decode(&bytes), Err(DecodeError::Malformed { reason: "unknown status code", .. })));

        let info = StageInfo::new("j");
        let mut bytes = encode(&Message::new(1, Body::RegisterStage(info)));
        // job_id is the single byte after stage_id and its u16 length.
        bytes[HEADER_LEN + 10] = 0xFF;
        assert!(matches!(decode(&bytes), Err(DecodeError::Malformed { reason: "invalid utf-8", .. })));
    }

    #[test]
    fn request_response_pairing() {
        assert_eq!(Body::CollectReq.response_type(), Some(msg_type::COLLECT_RESP));
        assert_eq!(Body::DeregisterStage { stage_id: 1 }.response_type(), Some(msg_type::DEREGISTER_ACK));
        assert_eq!(Body::RuleAck(Status::Ok).response_type(), None);
    }
}
