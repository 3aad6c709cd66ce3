//! Frame sinks: where an emitter writes projections.

use std::io::{self, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::SyncSender;

use crate::distributor::encode_frame;
use crate::error::{Error, Result};
use crate::geometry::ProjectionFrame;

pub trait FrameSink {
    /// Human-readable destination, used in error messages.
    fn endpoint(&self) -> String;

    fn send_frame(&mut self, frame: &ProjectionFrame) -> io::Result<()>;

    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// In-process queue sink.
pub struct ChannelSink {
    tx: Option<SyncSender<ProjectionFrame>>,
}

impl ChannelSink {
    pub fn new(tx: SyncSender<ProjectionFrame>) -> Self {
        ChannelSink { tx: Some(tx) }
    }
}

impl FrameSink for ChannelSink {
    fn endpoint(&self) -> String {
        "in-process queue".to_string()
    }

    fn send_frame(&mut self, frame: &ProjectionFrame) -> io::Result<()> {
        let tx = self
            .tx
            .as_ref()
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "sink already finished"))?;
        tx.send(frame.clone())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "receiver dropped"))
    }

    fn finish(&mut self) -> io::Result<()> {
        self.tx = None;
        Ok(())
    }
}

/// Writes encoded frame records to any byte stream.
#[derive(Debug)]
pub struct WriterSink<W> {
    name: String,
    inner: W,
}

impl<W: Write> WriterSink<W> {
    pub fn new(name: impl Into<String>, inner: W) -> Self {
        WriterSink {
            name: name.into(),
            inner,
        }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> FrameSink for WriterSink<W> {
    fn endpoint(&self) -> String {
        self.name.clone()
    }

    fn send_frame(&mut self, frame: &ProjectionFrame) -> io::Result<()> {
        self.inner.write_all(&encode_frame(frame))
    }

    fn finish(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub type TcpFrameSink = WriterSink<TcpStream>;

/// Connects to a frame consumer listening on `endpoint`.
pub fn connect_tcp(endpoint: &str) -> Result<TcpFrameSink> {
    let connect = || -> io::Result<TcpStream> {
        let mut last = io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing");
        for addr in endpoint.to_socket_addrs()? {
            match TcpStream::connect(addr) {
                Ok(s) => return Ok(s),
                Err(e) => last = e,
            }
        }
        Err(last)
    };
    let stream = connect().map_err(|source| Error::Connection {
        endpoint: endpoint.to_string(),
        last_seq: None,
        source,
    })?;
    stream.set_nodelay(true)?;
    Ok(WriterSink::new(endpoint, stream))
}
