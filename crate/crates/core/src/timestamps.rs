//! Detector channels and the PTS1 timestamp file format.
//!
//! PTS1 layout, all little-endian:
//!
//! | offset | size | content                          |
//! |--------|------|----------------------------------|
//! | 0      | 4    | magic `PTS1`                     |
//! | 4      | 4    | u32 version, always 1            |
//! | 8      | 8    | u64 event count N                |
//! | 16     | 8·N  | u64 timestamps in ps, increasing |
//!
//! The format carries no acquisition duration; a channel read back from disk
//! takes its last timestamp as the duration unless told otherwise.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const PTS_MAGIC: &[u8; 4] = b"PTS1";
pub const PTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TimestampError {
    #[error("timestamps not strictly increasing at index {index} ({prev} ps then {next} ps)")]
    Unsorted { index: usize, prev: u64, next: u64 },
    #[error("timestamp {value} ps lies beyond the channel duration {duration} ps")]
    OutOfRange { value: u64, duration: u64 },
    #[error("not a PTS1 file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported PTS version {0}")]
    BadVersion(u32),
    #[error("PTS file truncated: header promises {expected} events, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Sorted, unique detection timestamps for one detector, in integer ps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampChannel {
    timestamps: Vec<u64>,
    duration_ps: u64,
    label: String,
}

impl TimestampChannel {
    pub fn new(timestamps: Vec<u64>, duration_ps: u64, label: impl Into<String>) -> Result<Self, TimestampError> {
        check_strictly_increasing(&timestamps)?;
        if let Some(&last) = timestamps.last() {
            if last > duration_ps {
                return Err(TimestampError::OutOfRange { value: last, duration: duration_ps });
            }
        }
        Ok(TimestampChannel { timestamps, duration_ps, label: label.into() })
    }

    /// Sorts and drops duplicate timestamps before building the channel.
    pub fn from_unsorted(
        mut timestamps: Vec<u64>,
        duration_ps: u64,
        label: impl Into<String>,
    ) -> Result<Self, TimestampError> {
        timestamps.sort_unstable();
        timestamps.dedup();
        TimestampChannel::new(timestamps, duration_ps, label)
    }

    pub(crate) fn from_sorted_unchecked(timestamps: Vec<u64>, duration_ps: u64, label: impl Into<String>) -> Self {
        debug_assert!(check_strictly_increasing(&timestamps).is_ok());
        TimestampChannel { timestamps, duration_ps, label: label.into() }
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn into_timestamps(self) -> Vec<u64> {
        self.timestamps
    }

    pub fn duration_ps(&self) -> u64 {
        self.duration_ps
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Mean count rate in counts/s over the channel duration.
    pub fn rate_cps(&self) -> f64 {
        if self.duration_ps == 0 {
            return 0.0;
        }
        self.timestamps.len() as f64 / (self.duration_ps as f64 * 1e-12)
    }

    pub fn write_pts(&self, path: impl AsRef<Path>) -> Result<(), TimestampError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_pts(&mut w, &self.timestamps)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a PTS1 file; `duration_ps` defaults to the last timestamp.
    pub fn read_pts(path: impl AsRef<Path>, duration_ps: Option<u64>) -> Result<Self, TimestampError> {
        let path = path.as_ref();
        let ts = read_pts(&mut BufReader::new(File::open(path)?))?;
        let duration = duration_ps.unwrap_or_else(|| ts.last().copied().unwrap_or(0));
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("channel").to_string();
        TimestampChannel::new(ts, duration, label)
    }
}

fn check_strictly_increasing(ts: &[u64]) -> Result<(), TimestampError> {
    match ts.windows(2).position(|w| w[1] <= w[0]) {
        Some(i) => Err(TimestampError::Unsorted { index: i + 1, prev: ts[i], next: ts[i + 1] }),
        None => Ok(()),
    }
}

pub fn write_pts<W: Write>(w: &mut W, timestamps: &[u64]) -> Result<(), TimestampError> {
    check_strictly_increasing(timestamps)?;
    w.write_all(PTS_MAGIC)?;
    w.write_all(&PTS_VERSION.to_le_bytes())?;
    w.write_all(&(timestamps.len() as u64).to_le_bytes())?;
    for t in timestamps {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pts<R: Read>(r: &mut R) -> Result<Vec<u64>, TimestampError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PTS_MAGIC {
        return Err(TimestampError::BadMagic(magic));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != PTS_VERSION {
        return Err(TimestampError::BadVersion(version));
    }
    let mut quad = [0u8; 8];
    r.read_exact(&mut quad)?;
    let n = u64::from_le_bytes(quad);
    // Grow as data arrives so a corrupt count cannot force a huge allocation.
    let mut out = Vec::with_capacity(n.min(1 << 20) as usize);
    for found in 0..n {
        match r.read_exact(&mut quad) {
            Ok(()) => out.push(u64::from_le_bytes(quad)),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(TimestampError::Truncated { expected: n, found });
            }
            Err(e) => return Err(e.into()),
        }
    }
    check_strictly_increasing(&out)?;
    Ok(out)
}
