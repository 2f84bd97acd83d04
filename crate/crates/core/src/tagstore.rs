//! Binary time-tag files.
//!
//! Layout (little-endian throughout):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 8    | magic `QFCTAG\0\x01`               |
//! | 8      | 8    | timestamp resolution, ps (u64)     |
//! | 16     | 1    | channel count (u8)                 |
//! | 17     | 47   | reserved, zero                     |
//! | 64     | 16·n | records                            |
//!
//! Each record is `timestamp: u64`, `channel: u8`, `flags: u8`, then six zero
//! bytes. Records are globally sorted by timestamp. Fixed-size records allow
//! readers to split a file by byte range.
//!
//! Vendor TDC formats are not parsed here; converting one means producing an
//! iterator of [`TimeTag`] and handing it to [`TagWriter`].

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"QFCTAG\0\x01";
pub const HEADER_LEN: usize = 64;
pub const RECORD_LEN: usize = 16;

/// Flag bit marking a simulated dark or background count.
pub const FLAG_BACKGROUND: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeTag {
    pub timestamp: u64,
    pub channel: u8,
    pub flags: u8,
}

impl TimeTag {
    pub fn new(timestamp: u64, channel: u8) -> Self {
        Self {
            timestamp,
            channel,
            flags: 0,
        }
    }

    fn encode(&self) -> [u8; RECORD_LEN] {
        let mut rec = [0u8; RECORD_LEN];
        rec[..8].copy_from_slice(&self.timestamp.to_le_bytes());
        rec[8] = self.channel;
        rec[9] = self.flags;
        rec
    }

    fn decode(rec: &[u8; RECORD_LEN]) -> Self {
        let mut ts = [0u8; 8];
        ts.copy_from_slice(&rec[..8]);
        Self {
            timestamp: u64::from_le_bytes(ts),
            channel: rec[8],
            flags: rec[9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TagFileHeader {
    pub resolution_ps: u64,
    pub channel_count: u8,
}

impl TagFileHeader {
    pub fn new(channel_count: u8) -> Self {
        Self {
            resolution_ps: 1,
            channel_count,
        }
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..8].copy_from_slice(&MAGIC);
        h[8..16].copy_from_slice(&self.resolution_ps.to_le_bytes());
        h[16] = self.channel_count;
        h
    }

    fn decode(h: &[u8; HEADER_LEN]) -> Result<Self> {
        if h[..8] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &h[..8])));
        }
        let mut res = [0u8; 8];
        res.copy_from_slice(&h[8..16]);
        Ok(Self {
            resolution_ps: u64::from_le_bytes(res),
            channel_count: h[16],
        })
    }
}

/// Streaming writer enforcing global timestamp order.
pub struct TagWriter<W: Write> {
    out: W,
    written: usize,
    last: Option<u64>,
}

impl TagWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: TagFileHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufWriter::with_capacity(1 << 16, file), header)
    }
}

impl<W: Write> TagWriter<W> {
    pub fn new(mut out: W, header: TagFileHeader) -> Result<Self> {
        out.write_all(&header.encode())?;
        Ok(Self {
            out,
            written: 0,
            last: None,
        })
    }

    pub fn push(&mut self, tag: TimeTag) -> Result<()> {
        if let Some(prev) = self.last {
            if tag.timestamp < prev {
                return Err(Error::Unsorted {
                    index: self.written,
                    timestamp: tag.timestamp,
                    previous: prev,
                });
            }
        }
        self.out.write_all(&tag.encode())?;
        self.last = Some(tag.timestamp);
        self.written += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Writes a whole tag stream to `path`; returns the number of records.
pub fn write_stream(
    path: &Path,
    header: TagFileHeader,
    tags: impl IntoIterator<Item = TimeTag>,
) -> Result<usize> {
    let mut w = TagWriter::create(path, header)?;
    for t in tags {
        w.push(t)?;
    }
    let n = w.count();
    w.finish()?;
    Ok(n)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Yield only this channel.
    pub channel: Option<u8>,
    /// Check per-channel timestamp monotonicity while reading.
    pub validate: bool,
}

/// Lazy record iterator over a tag file.
pub struct TagReader<R: Read> {
    input: R,
    header: TagFileHeader,
    options: ReadOptions,
    offset: u64,
    remaining: Option<u64>,
    last: [Option<u64>; 256],
    index: usize,
    done: bool,
}

impl TagReader<BufReader<File>> {
    pub fn open(path: &Path, options: ReadOptions) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::with_capacity(1 << 16, file), options)
    }

    /// Reader over records `[first, first + count)`, for chunked parallel scans.
    pub fn open_range(path: &Path, first: u64, count: u64, options: ReadOptions) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut h = [0u8; HEADER_LEN];
        read_header_bytes(&mut file, &mut h)?;
        let header = TagFileHeader::decode(&h)?;
        let offset = HEADER_LEN as u64 + first * RECORD_LEN as u64;
        file.seek(SeekFrom::Start(offset))?;
        Ok(Self {
            input: BufReader::with_capacity(1 << 16, file),
            header,
            options,
            offset,
            remaining: Some(count),
            last: [None; 256],
            index: first as usize,
            done: false,
        })
    }
}

fn read_header_bytes(input: &mut impl Read, h: &mut [u8; HEADER_LEN]) -> Result<()> {
    let mut got = 0;
    while got < HEADER_LEN {
        match input.read(&mut h[got..])? {
            0 => {
                return Err(Error::Format(format!(
                    "file shorter than the {HEADER_LEN}-byte header ({got} bytes)"
                )))
            }
            n => got += n,
        }
    }
    Ok(())
}

impl<R: Read> TagReader<R> {
    pub fn new(mut input: R, options: ReadOptions) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        read_header_bytes(&mut input, &mut h)?;
        Ok(Self {
            input,
            header: TagFileHeader::decode(&h)?,
            options,
            offset: HEADER_LEN as u64,
            remaining: None,
            last: [None; 256],
            index: 0,
            done: false,
        })
    }

    pub fn header(&self) -> TagFileHeader {
        self.header
    }

    fn next_record(&mut self) -> Result<Option<TimeTag>> {
        if self.remaining == Some(0) {
            return Ok(None);
        }
        let mut rec = [0u8; RECORD_LEN];
        let mut got = 0;
        while got < RECORD_LEN {
            match self.input.read(&mut rec[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => {
                    return Err(Error::Corruption {
                        offset: self.offset,
                        reason: format!("truncated record ({got} of {RECORD_LEN} bytes)"),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let tag = TimeTag::decode(&rec);
        if self.options.validate {
            let slot = &mut self.last[tag.channel as usize];
            if let Some(prev) = *slot {
                if tag.timestamp < prev {
                    return Err(Error::Unsorted {
                        index: self.index,
                        timestamp: tag.timestamp,
                        previous: prev,
                    });
                }
            }
            *slot = Some(tag.timestamp);
        }
        self.offset += RECORD_LEN as u64;
        self.index += 1;
        if let Some(r) = self.remaining.as_mut() {
            *r -= 1;
        }
        Ok(Some(tag))
    }
}

impl<R: Read> Iterator for TagReader<R> {
    type Item = Result<TimeTag>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            match self.next_record() {
                Ok(Some(tag)) => {
                    if self.options.channel.is_some_and(|c| c != tag.channel) {
                        continue;
                    }
                    return Some(Ok(tag));
                }
                Ok(None) => {
                    self.done = true;
                    return None;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Opens `path` and returns its header with a lazy tag iterator.
pub fn read_stream(path: &Path, options: ReadOptions) -> Result<TagReader<BufReader<File>>> {
    TagReader::open(path, options)
}

/// Number of complete records in a tag file, from its length.
pub fn record_count(path: &Path) -> Result<u64> {
    let len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if len < HEADER_LEN as u64 {
        return Err(Error::Format(format!("file shorter than the {HEADER_LEN}-byte header")));
    }
    let body = len - HEADER_LEN as u64;
    if !body.is_multiple_of(RECORD_LEN as u64) {
        return Err(Error::Corruption {
            offset: len - body % RECORD_LEN as u64,
            reason: "trailing partial record".into(),
        });
    }
    Ok(body / RECORD_LEN as u64)
}

/// `<file>.meta.json` next to a tag file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}
