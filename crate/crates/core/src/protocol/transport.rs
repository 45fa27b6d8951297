use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

/// Largest accepted frame; a 1 MiB chunk is about 1.4 MiB once base64 and
/// JSON framing are added.
pub const MAX_FRAME_BYTES: usize = 8 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("connection closed")]
    Closed,
    #[error("transport I/O: {0}")]
    Io(String),
}

/// An ordered, reliable channel of discrete text frames.
pub trait FrameTransport: Send {
    fn send_frame(&mut self, frame: &str) -> Result<(), TransportError>;
    /// Blocks for the next frame; `None` waits indefinitely.
    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<String, TransportError>;
}

impl<T: FrameTransport + ?Sized> FrameTransport for Box<T> {
    fn send_frame(&mut self, frame: &str) -> Result<(), TransportError> {
        (**self).send_frame(frame)
    }

    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<String, TransportError> {
        (**self).recv_frame(timeout)
    }
}

/// Newline-delimited frames over a TCP stream.
pub struct TcpTransport {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        TcpTransport {
            stream,
            buf: Vec::new(),
        }
    }

    pub fn connect(addr: impl std::net::ToSocketAddrs, timeout: Duration) -> Result<Self, TransportError> {
        let mut last = None;
        let addrs = addr.to_socket_addrs().map_err(|e| TransportError::Io(e.to_string()))?;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => return Ok(Self::new(s)),
                Err(e) => last = Some(e),
            }
        }
        Err(TransportError::Io(
            last.map_or_else(|| "no address to connect to".into(), |e| e.to_string()),
        ))
    }

    fn take_frame(&mut self) -> Option<String> {
        let pos = self.buf.iter().position(|&b| b == b'\n')?;
        let mut line: Vec<u8> = self.buf.drain(..=pos).collect();
        line.pop();
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        Some(String::from_utf8_lossy(&line).into_owned())
    }
}

impl FrameTransport for TcpTransport {
    fn send_frame(&mut self, frame: &str) -> Result<(), TransportError> {
        debug_assert!(!frame.contains('\n'));
        let mut bytes = Vec::with_capacity(frame.len() + 1);
        bytes.extend_from_slice(frame.as_bytes());
        bytes.push(b'\n');
        self.stream.write_all(&bytes).map_err(|e| match e.kind() {
            ErrorKind::BrokenPipe | ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted => TransportError::Closed,
            _ => TransportError::Io(e.to_string()),
        })
    }

    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<String, TransportError> {
        let until = timeout.map(|t| Instant::now() + t);
        let mut chunk = [0u8; 64 * 1024];
        loop {
            if let Some(frame) = self.take_frame() {
                return Ok(frame);
            }
            if self.buf.len() > MAX_FRAME_BYTES {
                return Err(TransportError::Io(format!("frame exceeds {MAX_FRAME_BYTES} bytes")));
            }
            let wait = match until {
                Some(u) => {
                    let left = u.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(TransportError::Timeout);
                    }
                    Some(left)
                }
                None => None,
            };
            self.stream
                .set_read_timeout(wait)
                .map_err(|e| TransportError::Io(e.to_string()))?;
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(TransportError::Closed),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) if matches!(e.kind(), ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted) => {
                    return Err(TransportError::Closed)
                }
                Err(e) => return Err(TransportError::Io(e.to_string())),
            }
        }
    }
}

/// In-process transport end backed by channels.
pub struct ChannelTransport {
    tx: Sender<String>,
    rx: Receiver<String>,
}

/// Two connected ends.
pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelTransport { tx: a_tx, rx: a_rx },
        ChannelTransport { tx: b_tx, rx: b_rx },
    )
}

impl FrameTransport for ChannelTransport {
    fn send_frame(&mut self, frame: &str) -> Result<(), TransportError> {
        self.tx.send(frame.to_string()).map_err(|_| TransportError::Closed)
    }

    fn recv_frame(&mut self, timeout: Option<Duration>) -> Result<String, TransportError> {
        match timeout {
            None => self.rx.recv().map_err(|_| TransportError::Closed),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::Closed,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn tcp_pair() -> (TcpTransport, TcpTransport) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        let client = TcpTransport::connect(addr, Duration::from_secs(2)).unwrap();
        let (server, _) = l.accept().unwrap();
        (client, TcpTransport::new(server))
    }

    #[test]
    fn tcp_frames_round_trip() {
        let (mut a, mut b) = tcp_pair();
        a.send_frame("one").unwrap();
        a.send_frame(&"x".repeat(300_000)).unwrap();
        assert_eq!(b.recv_frame(Some(Duration::from_secs(2))).unwrap(), "one");
        assert_eq!(b.recv_frame(Some(Duration::from_secs(2))).unwrap().len(), 300_000);
    }

    #[test]
    fn tcp_timeout_keeps_partial_frame() {
        let (a, mut b) = tcp_pair();
        let mut raw = a.stream.try_clone().unwrap();
        raw.write_all(b"par").unwrap();
        assert!(matches!(b.recv_frame(Some(Duration::from_millis(50))), Err(TransportError::Timeout)));
        raw.write_all(b"tial\n").unwrap();
        assert_eq!(b.recv_frame(Some(Duration::from_secs(2))).unwrap(), "partial");
        drop(raw);
        drop(a);
        assert!(matches!(b.recv_frame(Some(Duration::from_secs(2))), Err(TransportError::Closed)));
    }

    #[test]
    fn channel_close_is_observed() {
        let (mut a, mut b) = channel_pair();
        a.send_frame("f").unwrap();
        drop(a);
        assert_eq!(b.recv_frame(None).unwrap(), "f");
        assert!(matches!(b.recv_frame(None), Err(TransportError::Closed)));
        assert!(matches!(b.send_frame("g"), Err(TransportError::Closed)));
    }
}
