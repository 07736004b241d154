//! Byte-stream transports behind one interface: TCP or an in-process pipe.

use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::wire::{read_frame, write_frame, MsgType, WireError, WireFrame};

/// Message authentication slot. The channel is assumed to be authenticated
/// out of band, so the only implementation shipped is [`NoAuth`].
pub trait Authenticator: Send + Sync + fmt::Debug {
    /// Tag bytes appended after each frame.
    fn tag_len(&self) -> usize;
    fn sign(&self, frame: &WireFrame) -> Vec<u8>;
    fn verify(&self, frame: &WireFrame, tag: &[u8]) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoAuth;

impl Authenticator for NoAuth {
    fn tag_len(&self) -> usize {
        0
    }

    fn sign(&self, _frame: &WireFrame) -> Vec<u8> {
        Vec::new()
    }

    fn verify(&self, _frame: &WireFrame, _tag: &[u8]) -> bool {
        true
    }
}

/// Tears down both directions of a link; unblocks a pending read.
#[derive(Clone)]
pub struct Closer(Arc<dyn Fn() + Send + Sync>);

impl Closer {
    pub fn close(&self) {
        (self.0)()
    }
}

impl fmt::Debug for Closer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Closer")
    }
}

/// A connected, not yet split, endpoint.
pub struct Link {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    closer: Closer,
    auth: Arc<dyn Authenticator>,
    peer: String,
}

impl fmt::Debug for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Link").field("peer", &self.peer).finish()
    }
}

impl Link {
    pub fn tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_default();
        let reader = stream.try_clone()?;
        let closer_stream = stream.try_clone()?;
        Ok(Link {
            reader: Box::new(reader),
            writer: Box::new(stream),
            closer: Closer(Arc::new(move || {
                let _ = closer_stream.shutdown(std::net::Shutdown::Both);
            })),
            auth: Arc::new(NoAuth),
            peer,
        })
    }

    /// Accepts one connection.
    pub fn listen<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Self::accept(&listener)
    }

    pub fn accept(listener: &TcpListener) -> io::Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::tcp(stream)
    }

    /// Connects, retrying until `patience` has elapsed so that the peer may
    /// start listening after us.
    pub fn connect<A: ToSocketAddrs>(addr: A, patience: Duration) -> io::Result<Self> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + patience;
        loop {
            let mut last = None;
            for a in &addrs {
                match TcpStream::connect(a) {
                    Ok(s) => return Self::tcp(s),
                    Err(e) => last = Some(e),
                }
            }
            if Instant::now() >= deadline {
                return Err(
                    last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))
                );
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    /// Two endpoints connected by in-process pipes.
    pub fn memory_pair() -> (Link, Link) {
        let (a_tx, b_rx) = unbounded();
        let (b_tx, a_rx) = unbounded();
        (
            Self::memory_end(a_tx, a_rx, "memory:b"),
            Self::memory_end(b_tx, b_rx, "memory:a"),
        )
    }

    fn memory_end(tx: Sender<Vec<u8>>, rx: Receiver<Vec<u8>>, peer: &str) -> Link {
        let closed = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&closed);
        Link {
            reader: Box::new(PipeReader {
                rx,
                chunk: Vec::new(),
                pos: 0,
                closed: Arc::clone(&closed),
            }),
            writer: Box::new(PipeWriter { tx, closed }),
            closer: Closer(Arc::new(move || flag.store(true, Ordering::SeqCst))),
            auth: Arc::new(NoAuth),
            peer: peer.to_string(),
        }
    }

    pub fn with_auth(mut self, auth: Arc<dyn Authenticator>) -> Self {
        self.auth = auth;
        self
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn closer(&self) -> Closer {
        self.closer.clone()
    }

    pub fn split(self) -> (LinkReader, LinkWriter, Closer) {
        (
            LinkReader {
                inner: BufReader::with_capacity(1 << 16, self.reader),
                last_seq: None,
                auth: Arc::clone(&self.auth),
            },
            LinkWriter {
                inner: BufWriter::with_capacity(1 << 16, self.writer),
                next_seq: 0,
                auth: self.auth,
            },
            self.closer,
        )
    }
}

/// Receiving half; enforces strictly increasing frame sequence numbers.
pub struct LinkReader {
    inner: BufReader<Box<dyn Read + Send>>,
    last_seq: Option<u64>,
    auth: Arc<dyn Authenticator>,
}

impl LinkReader {
    pub fn recv(&mut self) -> Result<Option<WireFrame>, WireError> {
        let Some(frame) = read_frame(&mut self.inner)? else {
            return Ok(None);
        };
        if let Some(last) = self.last_seq {
            if frame.frame_seq <= last {
                return Err(WireError::Sequence {
                    last,
                    got: frame.frame_seq,
                });
            }
        }
        self.last_seq = Some(frame.frame_seq);
        let mut tag = vec![0u8; self.auth.tag_len()];
        self.inner.read_exact(&mut tag)?;
        if !self.auth.verify(&frame, &tag) {
            return Err(WireError::Auth(frame.frame_seq));
        }
        Ok(Some(frame))
    }
}

/// Sending half; numbers frames from zero.
pub struct LinkWriter {
    inner: BufWriter<Box<dyn Write + Send>>,
    next_seq: u64,
    auth: Arc<dyn Authenticator>,
}

impl LinkWriter {
    /// Writes and flushes one frame; returns its sequence number.
    pub fn send(&mut self, msg_type: MsgType, payload: Vec<u8>) -> Result<u64, WireError> {
        let frame = WireFrame::new(msg_type, self.next_seq, payload);
        write_frame(&mut self.inner, &frame)?;
        self.inner.write_all(&self.auth.sign(&frame))?;
        self.inner.flush()?;
        self.next_seq += 1;
        Ok(frame.frame_seq)
    }
}

struct PipeWriter {
    tx: Sender<Vec<u8>>,
    closed: Arc<AtomicBool>,
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

struct PipeReader {
    rx: Receiver<Vec<u8>>,
    chunk: Vec<u8>,
    pos: usize,
    closed: Arc<AtomicBool>,
}

impl Read for PipeReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.chunk.len() {
            if self.closed.load(Ordering::SeqCst) {
                return Ok(0);
            }
            match self.rx.recv_timeout(Duration::from_millis(50)) {
                Ok(c) => {
                    self.chunk = c;
                    self.pos = 0;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
            }
        }
        let n = buf.len().min(self.chunk.len() - self.pos);
        buf[..n].copy_from_slice(&self.chunk[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}
