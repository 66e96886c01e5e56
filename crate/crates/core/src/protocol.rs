//! Wire protocol between workers and the parameter server.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! magic "DML1" (4) | kind u8 (1) | sender_id u32 (4) | step u64 (8)
//! | rows u32 (4) | cols u32 (4) | payload_len u64 (8) | payload
//! ```
//!
//! Header is 33 bytes; the payload is `rows * cols` f32 values (empty for
//! control kinds). One frame carries a whole k x d matrix; no chunking.

use std::io::{Read, Write};
use std::net::TcpStream;

use crossbeam_channel::{Receiver, Sender};

use crate::error::{Error, Result};
use crate::metric::{GradientDelta, MetricFactor};

pub const MAGIC: &[u8; 4] = b"DML1";
pub const HEADER_LEN: usize = 33;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    GradientPush = 1,
    ParamBroadcast = 2,
    Hello = 3,
    Shutdown = 4,
    Ack = 5,
}

impl MessageKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(MessageKind::GradientPush),
            2 => Ok(MessageKind::ParamBroadcast),
            3 => Ok(MessageKind::Hello),
            4 => Ok(MessageKind::Shutdown),
            5 => Ok(MessageKind::Ack),
            other => Err(Error::UnknownKind(other)),
        }
    }
}

/// The wire unit exchanged between worker and server.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender_id: u32,
    pub step: u64,
    pub rows: u32,
    pub cols: u32,
    pub payload: Vec<f32>,
}

impl Message {
    pub fn control(kind: MessageKind, sender_id: u32, step: u64) -> Self {
        Message {
            kind,
            sender_id,
            step,
            rows: 0,
            cols: 0,
            payload: Vec::new(),
        }
    }

    pub fn gradient_push(sender_id: u32, step: u64, delta: &GradientDelta) -> Self {
        Message {
            kind: MessageKind::GradientPush,
            sender_id,
            step,
            rows: delta.k as u32,
            cols: delta.d as u32,
            payload: delta.values.clone(),
        }
    }

    pub fn param_broadcast(sender_id: u32, step: u64, factor: &MetricFactor) -> Self {
        Message {
            kind: MessageKind::ParamBroadcast,
            sender_id,
            step,
            rows: factor.k as u32,
            cols: factor.d as u32,
            payload: factor.values.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.payload.len() != self.rows as usize * self.cols as usize {
            return Err(Error::Protocol(format!(
                "payload length {} does not match {}x{}",
                self.payload.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    msg.validate()?;
    let payload_len = msg.payload.len() * 4;
    let mut buf = Vec::with_capacity(HEADER_LEN + payload_len);
    buf.extend_from_slice(MAGIC);
    buf.push(msg.kind as u8);
    buf.extend_from_slice(&msg.sender_id.to_le_bytes());
    buf.extend_from_slice(&msg.step.to_le_bytes());
    buf.extend_from_slice(&msg.rows.to_le_bytes());
    buf.extend_from_slice(&msg.cols.to_le_bytes());
    buf.extend_from_slice(&(payload_len as u64).to_le_bytes());
    for v in &msg.payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Total frame length, readable from a complete header alone.
pub fn frame_len(header: &[u8]) -> Result<usize> {
    if header.len() < HEADER_LEN {
        return Err(Error::Incomplete {
            needed: HEADER_LEN - header.len(),
        });
    }
    if &header[0..4] != MAGIC {
        return Err(Error::Protocol(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            &header[0..4]
        )));
    }
    let payload_len = u64::from_le_bytes(header[25..33].try_into().unwrap()) as usize;
    Ok(HEADER_LEN + payload_len)
}

/// Decodes one complete frame. Truncated input yields [`Error::Incomplete`]
/// (retry with more bytes), corrupt input yields [`Error::Protocol`] or
/// [`Error::UnknownKind`].
pub fn decode(bytes: &[u8]) -> Result<Message> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(Error::Incomplete {
            needed: total - bytes.len(),
        });
    }
    let kind = MessageKind::from_byte(bytes[4])?;
    let sender_id = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let step = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
    let rows = u32::from_le_bytes(bytes[17..21].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[21..25].try_into().unwrap());
    let payload_len = total - HEADER_LEN;
    if payload_len % 4 != 0 || payload_len / 4 != rows as usize * cols as usize {
        return Err(Error::Protocol(format!(
            "payload of {payload_len} bytes does not match shape {rows}x{cols}"
        )));
    }
    let payload = bytes[HEADER_LEN..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Message {
        kind,
        sender_id,
        step,
        rows,
        cols,
        payload,
    })
}

/// Streaming reassembly buffer: feed arbitrary byte chunks, pop complete
/// messages.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pops the next complete message, or `Ok(None)` if more bytes are
    /// needed.
    pub fn pop(&mut self) -> Result<Option<Message>> {
        match decode(&self.buf) {
            Ok(msg) => {
                let total = frame_len(&self.buf)?;
                self.buf.drain(..total);
                Ok(Some(msg))
            }
            Err(Error::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Sending half of a transport endpoint.
pub trait MsgSender: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
}

/// Receiving half of a transport endpoint. `recv` blocks;
/// [`Error::Disconnected`] signals the peer is gone.
pub trait MsgReceiver: Send {
    fn recv(&mut self) -> Result<Message>;
}

/// One end of an ordered, reliable, framed connection. The two halves may be
/// used concurrently by one sending and one receiving activity.
pub struct Endpoint {
    pub sender: Box<dyn MsgSender>,
    pub receiver: Box<dyn MsgReceiver>,
}

impl Endpoint {
    pub fn split(self) -> (Box<dyn MsgSender>, Box<dyn MsgReceiver>) {
        (self.sender, self.receiver)
    }
}

struct LoopbackSender {
    tx: Sender<Vec<u8>>,
}

impl MsgSender for LoopbackSender {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let bytes = encode(msg)?;
        self.tx.send(bytes).map_err(|_| Error::Disconnected)
    }
}

struct LoopbackReceiver {
    rx: Receiver<Vec<u8>>,
}

impl MsgReceiver for LoopbackReceiver {
    fn recv(&mut self) -> Result<Message> {
        let bytes = self.rx.recv().map_err(|_| Error::Disconnected)?;
        decode(&bytes)
    }
}

/// In-process connection carrying encoded frames over bounded channels, so
/// tests exercise the wire format and backpressure without sockets. A full
/// channel blocks the sender.
pub fn loopback_pair(capacity: usize) -> (Endpoint, Endpoint) {
    let (a_tx, b_rx) = crossbeam_channel::bounded(capacity);
    let (b_tx, a_rx) = crossbeam_channel::bounded(capacity);
    let a = Endpoint {
        sender: Box::new(LoopbackSender { tx: a_tx }),
        receiver: Box::new(LoopbackReceiver { rx: a_rx }),
    };
    let b = Endpoint {
        sender: Box::new(LoopbackSender { tx: b_tx }),
        receiver: Box::new(LoopbackReceiver { rx: b_rx }),
    };
    (a, b)
}

struct TcpSender {
    stream: TcpStream,
}

impl MsgSender for TcpSender {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let bytes = encode(msg)?;
        self.stream.write_all(&bytes)?;
        Ok(())
    }
}

struct TcpReceiver {
    stream: TcpStream,
}

impl MsgReceiver for TcpReceiver {
    fn recv(&mut self) -> Result<Message> {
        let mut header = [0u8; HEADER_LEN];
        read_exact_or_disconnect(&mut self.stream, &mut header)?;
        let total = frame_len(&header)?;
        let mut frame = vec![0u8; total];
        frame[..HEADER_LEN].copy_from_slice(&header);
        read_exact_or_disconnect(&mut self.stream, &mut frame[HEADER_LEN..])?;
        decode(&frame)
    }
}

fn read_exact_or_disconnect(stream: &mut TcpStream, buf: &mut [u8]) -> Result<()> {
    match stream.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Disconnected),
        Err(e) => Err(e.into()),
    }
}

/// Wraps a connected TCP stream as an endpoint.
pub fn tcp_endpoint(stream: TcpStream) -> Result<Endpoint> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    Ok(Endpoint {
        sender: Box::new(TcpSender { stream }),
        receiver: Box::new(TcpReceiver { stream: reader }),
    })
}
