//! Frame wire format, row partitioning and frame routing.
//!
//! Frame record (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "STRF"
//!      4     2  version (1)
//!      6     2  header_len (56)
//!      8     8  seq
//!     16     4  rotation_index
//!     20     8  angle, radians (f64)
//!     28     4  row_start
//!     32     4  row_count
//!     36     4  columns
//!     40     8  timestamp_ns
//!     48     8  payload_len, bytes
//!     56     …  payload, row_count × columns f32, row-major
//! ```
//!
//! A record is self-delimiting through `header_len` and `payload_len`, so a
//! byte stream is simply a concatenation of records.

use std::io::{self, Read};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::geometry::ProjectionFrame;

pub const FRAME_MAGIC: [u8; 4] = *b"STRF";
pub const FRAME_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 56;
/// Upper bound on a single payload accepted from the wire.
pub const MAX_PAYLOAD_BYTES: u64 = 1 << 30;
pub const DEFAULT_QUEUE_DEPTH: usize = 64;

pub fn encode_frame(frame: &ProjectionFrame) -> Vec<u8> {
    let payload_len = frame.payload.len() * 4;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload_len);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&(FRAME_HEADER_LEN as u16).to_le_bytes());
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.rotation_index.to_le_bytes());
    out.extend_from_slice(&frame.angle.to_le_bytes());
    out.extend_from_slice(&frame.row_start.to_le_bytes());
    out.extend_from_slice(&(frame.row_count() as u32).to_le_bytes());
    out.extend_from_slice(&(frame.columns() as u32).to_le_bytes());
    out.extend_from_slice(&frame.timestamp_ns.to_le_bytes());
    out.extend_from_slice(&(payload_len as u64).to_le_bytes());
    for v in frame.payload.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().expect("2 bytes"))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy)]
struct FrameHeader {
    seq: u64,
    rotation_index: u32,
    angle: f64,
    row_start: u32,
    row_count: u32,
    columns: u32,
    timestamp_ns: u64,
    payload_len: u64,
}

/// Validates the 8-byte preamble. `base` is the stream offset of `b[0]`.
fn check_preamble(b: &[u8], base: u64) -> Result<()> {
    if b[0..4] != FRAME_MAGIC {
        return Err(Error::protocol(base, format!("bad frame magic {:02x?}", &b[0..4])));
    }
    let version = u16_at(b, 4);
    if version != FRAME_VERSION {
        return Err(Error::protocol(base + 4, format!("unsupported frame version {version}")));
    }
    let header_len = u16_at(b, 6);
    if header_len as usize != FRAME_HEADER_LEN {
        return Err(Error::protocol(base + 6, format!("header_len {header_len}, expected {FRAME_HEADER_LEN}")));
    }
    Ok(())
}

fn parse_header(b: &[u8], base: u64) -> Result<FrameHeader> {
    check_preamble(b, base)?;
    let header = FrameHeader {
        seq: u64_at(b, 8),
        rotation_index: u32_at(b, 16),
        angle: f64::from_le_bytes(b[20..28].try_into().expect("8 bytes")),
        row_start: u32_at(b, 28),
        row_count: u32_at(b, 32),
        columns: u32_at(b, 36),
        timestamp_ns: u64_at(b, 40),
        payload_len: u64_at(b, 48),
    };
    if !header.angle.is_finite() {
        return Err(Error::protocol(base + 20, "angle is not finite"));
    }
    if header.row_count == 0 {
        return Err(Error::protocol(base + 32, "row_count is zero"));
    }
    if header.columns == 0 {
        return Err(Error::protocol(base + 36, "columns is zero"));
    }
    if header.row_start.checked_add(header.row_count).is_none() {
        return Err(Error::protocol(base + 28, "row range overflows"));
    }
    let expected = header.row_count as u64 * header.columns as u64 * 4;
    if header.payload_len != expected {
        return Err(Error::protocol(
            base + 48,
            format!("payload_len {} does not match {}x{} f32", header.payload_len, header.row_count, header.columns),
        ));
    }
    if header.payload_len > MAX_PAYLOAD_BYTES {
        return Err(Error::protocol(base + 48, "payload exceeds size limit"));
    }
    Ok(header)
}

fn build_frame(h: FrameHeader, payload: &[u8]) -> ProjectionFrame {
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ProjectionFrame {
        seq: h.seq,
        rotation_index: h.rotation_index,
        angle: h.angle,
        row_start: h.row_start,
        timestamp_ns: h.timestamp_ns,
        payload: Array2::from_shape_vec((h.row_count as usize, h.columns as usize), values)
            .expect("payload length checked"),
    }
}

/// Decodes exactly one record occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<ProjectionFrame> {
    if bytes.len() < FRAME_HEADER_LEN {
        if bytes.len() >= 8 {
            check_preamble(bytes, 0)?;
        }
        return Err(Error::Truncated {
            position: 0,
            expected: FRAME_HEADER_LEN as u64,
            got: bytes.len() as u64,
        });
    }
    let header = parse_header(&bytes[..FRAME_HEADER_LEN], 0)?;
    let total = FRAME_HEADER_LEN as u64 + header.payload_len;
    let got = bytes.len() as u64;
    if got < total {
        return Err(Error::Truncated {
            position: FRAME_HEADER_LEN as u64,
            expected: header.payload_len,
            got: got - FRAME_HEADER_LEN as u64,
        });
    }
    if got > total {
        return Err(Error::protocol(total, format!("{} trailing bytes after frame", got - total)));
    }
    Ok(build_frame(header, &bytes[FRAME_HEADER_LEN..]))
}

/// Reads as many bytes as available into `buf`, returning the count.
fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Pulls consecutive frame records off a byte stream.
pub struct FrameReader<R> {
    inner: R,
    position: u64,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, position: 0 }
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Next frame, or `None` on a clean end of stream at a record boundary.
    pub fn read_frame(&mut self) -> Result<Option<ProjectionFrame>> {
        let start = self.position;
        let mut header = [0u8; FRAME_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut header[..8])?;
        if got == 0 {
            return Ok(None);
        }
        self.position += got as u64;
        if got < 8 {
            return Err(Error::Truncated {
                position: start,
                expected: FRAME_HEADER_LEN as u64,
                got: got as u64,
            });
        }
        check_preamble(&header, start)?;
        let got = read_full(&mut self.inner, &mut header[8..])?;
        self.position += got as u64;
        if got < FRAME_HEADER_LEN - 8 {
            return Err(Error::Truncated {
                position: start,
                expected: FRAME_HEADER_LEN as u64,
                got: 8 + got as u64,
            });
        }
        let h = parse_header(&header, start)?;
        let mut payload = vec![0u8; h.payload_len as usize];
        let got = read_full(&mut self.inner, &mut payload)?;
        self.position += got as u64;
        if got < payload.len() {
            return Err(Error::Truncated {
                position: start + FRAME_HEADER_LEN as u64,
                expected: h.payload_len,
                got: got as u64,
            });
        }
        Ok(Some(build_frame(h, &payload)))
    }
}

impl<R: Read> Iterator for FrameReader<R> {
    type Item = Result<ProjectionFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_frame().transpose()
    }
}

/// A contiguous block of detector rows owned by one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowPartition {
    pub worker_id: usize,
    pub row_start: usize,
    pub row_count: usize,
}

impl RowPartition {
    pub fn row_end(&self) -> usize {
        self.row_start + self.row_count
    }

    pub fn contains(&self, row: usize) -> bool {
        (self.row_start..self.row_end()).contains(&row)
    }
}

/// Balanced contiguous blocks; the first `rows mod workers` workers take one
/// extra row.
pub fn partition_rows(detector_rows: usize, workers: usize) -> Result<Vec<RowPartition>> {
    if workers == 0 {
        return Err(Error::invalid("at least one worker is required"));
    }
    if detector_rows < workers {
        return Err(Error::invalid(format!(
            "{detector_rows} detector rows cannot feed {workers} workers"
        )));
    }
    let base = detector_rows / workers;
    let extra = detector_rows % workers;
    let mut start = 0;
    Ok((0..workers)
        .map(|worker_id| {
            let row_count = base + usize::from(worker_id < extra);
            let p = RowPartition {
                worker_id,
                row_start: start,
                row_count,
            };
            start += row_count;
            p
        })
        .collect())
}

/// Splits a full-height frame into one sub-frame per partition. Payload values
/// are copied untouched.
pub fn route_frame(frame: &ProjectionFrame, partitions: &[RowPartition]) -> Result<Vec<(usize, ProjectionFrame)>> {
    let detector_rows = partitions.last().map(RowPartition::row_end).unwrap_or(0);
    if frame.row_start != 0 || frame.row_count() != detector_rows {
        return Err(Error::protocol(
            0,
            format!(
                "frame {} carries rows [{}, {}), expected the full detector [0, {detector_rows})",
                frame.seq,
                frame.row_start,
                frame.row_end()
            ),
        ));
    }
    Ok(partitions
        .iter()
        .map(|p| {
            let payload = frame
                .payload
                .slice(s![p.row_start..p.row_end(), ..])
                .to_owned();
            (
                p.worker_id,
                ProjectionFrame {
                    seq: frame.seq,
                    rotation_index: frame.rotation_index,
                    angle: frame.angle,
                    row_start: p.row_start as u32,
                    timestamp_ns: frame.timestamp_ns,
                    payload,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub frames: u64,
    pub last_seq: Option<u64>,
}

/// Routes full frames into bounded per-worker queues. Sending blocks when a
/// worker's queue is full; frames are never dropped.
pub struct Distributor {
    partitions: Vec<RowPartition>,
    senders: Vec<SyncSender<ProjectionFrame>>,
    report: IngestReport,
}

impl Distributor {
    pub fn new(
        detector_rows: usize,
        workers: usize,
        queue_depth: usize,
    ) -> Result<(Self, Vec<Receiver<ProjectionFrame>>)> {
        let partitions = partition_rows(detector_rows, workers)?;
        let (senders, receivers) = (0..workers)
            .map(|_| sync_channel(queue_depth.max(1)))
            .unzip();
        Ok((
            Distributor {
                partitions,
                senders,
                report: IngestReport::default(),
            },
            receivers,
        ))
    }

    pub fn partitions(&self) -> &[RowPartition] {
        &self.partitions
    }

    pub fn report(&self) -> IngestReport {
        self.report
    }

    pub fn dispatch(&mut self, frame: &ProjectionFrame) -> Result<()> {
        if let Some(last) = self.report.last_seq {
            if frame.seq <= last {
                return Err(Error::protocol(
                    0,
                    format!("sequence went backwards: {} after {last}", frame.seq),
                ));
            }
        }
        for (worker, sub) in route_frame(frame, &self.partitions)? {
            self.senders[worker]
                .send(sub)
                .map_err(|_| Error::Pipeline(format!("worker {worker} queue closed")))?;
        }
        self.report.frames += 1;
        self.report.last_seq = Some(frame.seq);
        Ok(())
    }

    /// Dispatches every frame from `source` until it ends or fails.
    pub fn ingest<I>(&mut self, source: I) -> Result<IngestReport>
    where
        I: IntoIterator<Item = Result<ProjectionFrame>>,
    {
        for frame in source {
            self.dispatch(&frame?)?;
        }
        Ok(self.report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seq: u64, rows: usize, cols: usize) -> ProjectionFrame {
        ProjectionFrame {
            seq,
            rotation_index: 3,
            angle: 0.25,
            row_start: 0,
            timestamp_ns: 99,
            payload: Array2::from_shape_fn((rows, cols), |(r, c)| (r * cols + c) as f32 * 0.5 - 1.0),
        }
    }

    #[test]
    fn partition_examples() {
        let p = partition_rows(1024, 2).unwrap();
        assert_eq!((p[0].row_start, p[0].row_count), (0, 512));
        assert_eq!((p[1].row_start, p[1].row_count), (512, 512));
        let p = partition_rows(7, 1).unwrap();
        assert_eq!((p[0].row_start, p[0].row_count), (0, 7));
        let p = partition_rows(5, 2).unwrap();
        assert_eq!((p[0].row_start, p[0].row_end()), (0, 3));
        assert_eq!((p[1].row_start, p[1].row_end()), (3, 5));
        assert!(partition_rows(2, 3).is_err());
        assert!(partition_rows(2, 0).is_err());
    }

    #[test]
    fn route_single_worker_is_identity() {
        let f = frame(0, 4, 3);
        let out = route_frame(&f, &partition_rows(4, 1).unwrap()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, f);
    }

    #[test]
    fn route_four_workers_reassembles() {
        let f = frame(5, 8, 6);
        let out = route_frame(&f, &partition_rows(8, 4).unwrap()).unwrap();
        assert_eq!(out.len(), 4);
        let mut rows = Vec::new();
        for (w, sub) in &out {
            assert_eq!(sub.row_count(), 2);
            assert_eq!(sub.row_start as usize, 2 * w);
            assert_eq!((sub.seq, sub.angle, sub.rotation_index), (f.seq, f.angle, f.rotation_index));
            rows.extend(sub.payload.iter().map(|v| v.to_bits()));
        }
        let orig: Vec<u32> = f.payload.iter().map(|v| v.to_bits()).collect();
        assert_eq!(rows, orig);
    }

    #[test]
    fn route_rejects_partial_frames() {
        let f = frame(0, 3, 2);
        assert!(matches!(route_frame(&f, &partition_rows(4, 2).unwrap()), Err(Error::Protocol { .. })));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_frame(&frame(0x0102, 2, 3));
        assert_eq!(&bytes[0..4], b"STRF");
        assert_eq!(u16_at(&bytes, 4), 1);
        assert_eq!(u16_at(&bytes, 6), 56);
        assert_eq!(u64_at(&bytes, 8), 0x0102);
        assert_eq!(u32_at(&bytes, 32), 2);
        assert_eq!(u32_at(&bytes, 36), 3);
        assert_eq!(u64_at(&bytes, 48), 24);
        assert_eq!(bytes.len(), 56 + 24);
    }

    #[test]
    fn corrupted_magic_reports_position() {
        let mut bytes = encode_frame(&frame(1, 2, 2));
        bytes[1] ^= 0xff;
        match decode_frame(&bytes) {
            Err(Error::Protocol { position, .. }) => assert_eq!(position, 0),
            other => panic!("{other:?}"),
        }
        // In a stream, the position is the record's offset.
        let mut stream = encode_frame(&frame(1, 2, 2));
        let second_at = stream.len() as u64;
        stream.extend(bytes);
        let mut reader = FrameReader::new(stream.as_slice());
        assert!(reader.read_frame().unwrap().is_some());
        match reader.read_frame() {
            Err(Error::Protocol { position, .. }) => assert_eq!(position, second_at),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_detected() {
        let mut bytes = encode_frame(&frame(1, 2, 2));
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_frame(&bytes), Err(Error::Truncated { .. })));
        let mut reader = FrameReader::new(bytes.as_slice());
        assert!(matches!(reader.read_frame(), Err(Error::Truncated { .. })));
    }

    #[test]
    fn reader_stops_cleanly_at_boundary() {
        let mut stream = Vec::new();
        for seq in 0..3 {
            stream.extend(encode_frame(&frame(seq, 1, 4)));
        }
        let frames: Vec<_> = FrameReader::new(stream.as_slice()).collect::<Result<_>>().unwrap();
        assert_eq!(frames.iter().map(|f| f.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn distributor_preserves_order_and_rejects_regressions() {
        let (mut d, rx) = Distributor::new(4, 2, 8).unwrap();
        for seq in [1, 2, 5] {
            d.dispatch(&frame(seq, 4, 2)).unwrap();
        }
        assert!(d.dispatch(&frame(5, 4, 2)).is_err());
        drop(d);
        for r in rx {
            let seqs: Vec<u64> = r.iter().map(|f| f.seq).collect();
            assert_eq!(seqs, vec![1, 2, 5]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn frame_roundtrip_bit_exact(
                seq in any::<u64>(), rot in any::<u32>(), angle in -10.0f64..10.0,
                row_start in 0u32..1000, rows in 1usize..6, cols in 1usize..9,
                ts in any::<u64>(), seed in any::<u32>(),
            ) {
                let payload = Array2::from_shape_fn((rows, cols), |(r, c)| {
                    f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add((r * 31 + c) as u32) & 0x7f7f_ffff)
                });
                let f = ProjectionFrame { seq, rotation_index: rot, angle, row_start, timestamp_ns: ts, payload };
                let bytes = encode_frame(&f);
                let g = decode_frame(&bytes).unwrap();
                prop_assert_eq!(encode_frame(&g), bytes);
            }

            #[test]
            fn partition_covers_rows(rows in 1usize..500, workers in 1usize..16) {
                prop_assume!(rows >= workers);
                let parts = partition_rows(rows, workers).unwrap();
                let mut next = 0;
                for (w, p) in parts.iter().enumerate() {
                    prop_assert_eq!(p.worker_id, w);
                    prop_assert_eq!(p.row_start, next);
                    next = p.row_end();
                }
                prop_assert_eq!(next, rows);
                let max = parts.iter().map(|p| p.row_count).max().unwrap();
                let min = parts.iter().map(|p| p.row_count).min().unwrap();
                prop_assert!(max - min <= 1);
            }

            #[test]
            fn route_merge_is_lossless(rows in 1usize..20, workers in 1usize..8, cols in 1usize..5) {
                prop_assume!(rows >= workers);
                let f = frame(0, rows, cols);
                let parts = partition_rows(rows, workers).unwrap();
                let merged: Vec<u32> = route_frame(&f, &parts).unwrap()
                    .iter().flat_map(|(_, s)| s.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
                prop_assert_eq!(merged, f.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
