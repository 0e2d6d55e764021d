//! Framing over byte streams (TCP in practice).

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use thiserror::Error;

use super::{decode_body, encode, Envelope, Message, MsgType, ProtocolError, MAX_PAYLOAD};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("expected {expected:?} for correlation id {correlation_id}, got {got:?}")]
    UnexpectedReply { expected: MsgType, got: MsgType, correlation_id: u64 },
    #[error("reply correlation id {got} does not match request {sent}")]
    CorrelationMismatch { sent: u64, got: u64 },
    #[error("peer returned an error: {0}")]
    Remote(String),
}

impl FrameError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, FrameError::Io(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
    }
}

/// Writes one frame and returns the number of bytes written.
pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<usize, FrameError> {
    let bytes = encode(env)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads one frame. A clean end of stream before the first byte is `Closed`;
/// the length is checked before the body is allocated.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(Envelope, usize), FrameError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(ProtocolError::Truncated { needed: 4, available: got }.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(len).into());
    }
    let mut body = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        match r.read(&mut body[filled..]) {
            Ok(0) => return Err(ProtocolError::Truncated { needed: 4 + len, available: 4 + filled }.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok((decode_body(&body)?, 4 + len))
}

/// A client-side connection doing one request/response exchange at a time.
#[derive(Debug)]
pub struct Connection {
    stream: TcpStream,
    next_id: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl Connection {
    pub fn connect(addr: &str, timeout: Option<Duration>) -> Result<Self, FrameError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(timeout)?;
        Ok(Self::from_stream(stream))
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        Self { stream, next_id: 1, bytes_sent: 0, bytes_received: 0 }
    }

    pub fn stream(&self) -> &TcpStream {
        &self.stream
    }

    pub fn send(&mut self, env: &Envelope) -> Result<(), FrameError> {
        self.bytes_sent += write_frame(&mut self.stream, env)? as u64;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Envelope, FrameError> {
        let (env, n) = read_frame(&mut self.stream)?;
        self.bytes_received += n as u64;
        Ok(env)
    }

    /// Sends `message` with a fresh correlation id and waits for its reply.
    /// An `Error` reply is surfaced as [`FrameError::Remote`].
    pub fn request(&mut self, message: Message) -> Result<Envelope, FrameError> {
        let id = self.next_id;
        self.next_id += 1;
        let expected = message.msg_type().response_type();
        self.send(&Envelope::new(id, message))?;
        let reply = self.recv()?;
        if reply.correlation_id != id {
            return Err(FrameError::CorrelationMismatch { sent: id, got: reply.correlation_id });
        }
        if let Message::Error(e) = &reply.message {
            return Err(FrameError::Remote(format!("{:?}: {}", e.code, e.message)));
        }
        match expected {
            Some(t) if t != reply.msg_type() => {
                Err(FrameError::UnexpectedReply { expected: t, got: reply.msg_type(), correlation_id: id })
            }
            _ => Ok(reply),
        }
    }
}
