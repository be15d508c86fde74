//! Binary RF container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header  "GULM" | version u8 | dtype u8 | 2 reserved bytes
//!         | channels u32 | samples u32 | sample_rate f64
//! frame   frame_id u64 | channels * samples values (channel-major)
//! ```
//!
//! `dtype` 1 is 32-bit float, the only one written.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::RFFrame;

pub const MAGIC: &[u8; 4] = b"GULM";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfHeader {
    pub num_channels: u32,
    pub num_samples: u32,
    pub sample_rate: f64,
}

impl RfHeader {
    fn validate(&self) -> Result<()> {
        if self.num_channels == 0 || self.num_samples == 0 {
            return Err(Error::Validation(format!(
                "RF header declares {} channels x {} samples",
                self.num_channels, self.num_samples
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Validation(format!("RF header sample rate {}", self.sample_rate)));
        }
        Ok(())
    }

    fn frame_values(&self) -> usize {
        self.num_channels as usize * self.num_samples as usize
    }
}

pub struct RfWriter<W: Write> {
    inner: W,
    header: RfHeader,
}

impl<W: Write> RfWriter<W> {
    pub fn new(mut inner: W, header: RfHeader) -> Result<Self> {
        header.validate()?;
        let mut buf = Vec::with_capacity(HEADER_LEN);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&[VERSION, DTYPE_F32, 0, 0]);
        buf.extend_from_slice(&header.num_channels.to_le_bytes());
        buf.extend_from_slice(&header.num_samples.to_le_bytes());
        buf.extend_from_slice(&header.sample_rate.to_le_bytes());
        inner.write_all(&buf).map_err(stream_error)?;
        Ok(Self { inner, header })
    }

    /// Samples are stored as 32-bit floats.
    pub fn write_frame(&mut self, frame: &RFFrame) -> Result<()> {
        if frame.num_channels() != self.header.num_channels as usize
            || frame.num_samples() != self.header.num_samples as usize
        {
            return Err(Error::Validation(format!(
                "frame {} is {} x {}, container holds {} x {}",
                frame.frame_id,
                frame.num_channels(),
                frame.num_samples(),
                self.header.num_channels,
                self.header.num_samples
            )));
        }
        let mut buf = Vec::with_capacity(8 + 4 * frame.samples().len());
        buf.extend_from_slice(&frame.frame_id.to_le_bytes());
        for &v in frame.samples() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Validation(format!("frame {}: sample {v} overflows f32", frame.frame_id)));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
        self.inner.write_all(&buf).map_err(stream_error)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(stream_error)?;
        Ok(self.inner)
    }
}

fn stream_error(e: std::io::Error) -> Error {
    Error::CorruptStream(e.to_string())
}

/// Fills `buf`; `Ok(false)` on a clean end of stream before any byte.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(stream_error(e)),
        }
    }
    match filled {
        0 => Ok(false),
        n if n == buf.len() => Ok(true),
        n => Err(Error::CorruptStream(format!("truncated record: {n} of {} bytes", buf.len()))),
    }
}

pub struct RfReader<R: Read> {
    inner: R,
    header: RfHeader,
}

impl<R: Read> RfReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut buf = [0u8; HEADER_LEN];
        if !read_exact_or_eof(&mut inner, &mut buf[..4])? {
            return Err(Error::Format("empty RF stream".into()));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &buf[..4])));
        }
        if !read_exact_or_eof(&mut inner, &mut buf[4..])? {
            return Err(Error::CorruptStream("header cut short".into()));
        }
        if buf[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", buf[4])));
        }
        if buf[5] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported sample type {}", buf[5])));
        }
        let header = RfHeader {
            num_channels: u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")),
            num_samples: u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")),
            sample_rate: f64::from_le_bytes(buf[16..24].try_into().expect("8 bytes")),
        };
        header.validate()?;
        Ok(Self { inner, header })
    }

    pub fn header(&self) -> RfHeader {
        self.header
    }

    pub fn next_frame(&mut self) -> Result<Option<RFFrame>> {
        let mut id = [0u8; 8];
        if !read_exact_or_eof(&mut self.inner, &mut id)? {
            return Ok(None);
        }
        let frame_id = u64::from_le_bytes(id);
        let mut raw = vec![0u8; 4 * self.header.frame_values()];
        if !read_exact_or_eof(&mut self.inner, &mut raw)? {
            return Err(Error::CorruptStream(format!("frame {frame_id} has no samples")));
        }
        let samples = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        RFFrame::from_samples(
            frame_id,
            self.header.num_channels as usize,
            self.header.num_samples as usize,
            samples,
        )
        .map(Some)
        .map_err(|e| Error::CorruptStream(format!("frame {frame_id}: {e}")))
    }
}

impl<R: Read> Iterator for RfReader<R> {
    type Item = Result<RFFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

pub fn write_rf(path: &Path, header: RfHeader, frames: &[RFFrame]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = RfWriter::new(BufWriter::new(file), header)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()?;
    Ok(())
}

pub fn open_rf(path: &Path) -> Result<RfReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    RfReader::new(BufReader::new(file))
}

pub fn read_rf(path: &Path) -> Result<(RfHeader, Vec<RFFrame>)> {
    let reader = open_rf(path)?;
    let header = reader.header();
    let frames = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}
