//! Readout path: event words, the buffered link, the gated counter and the
//! time-tag file.

mod counter;
mod file;
mod link;
mod word;

use thiserror::Error;

pub use counter::{count_gated, CounterBank, CounterConfig, PeriodicHits};
pub use file::{read_timetag_file, write_timetag_file, TimetagFile, TimetagHeader, HEADER_LEN};
pub use link::{stream, LinkConfig, ReadoutBuffer, StreamOutcome};
pub use word::{pack, tag_rollovers, unpack, unwrap_coarse, EventWord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReadoutError {
    #[error("{field} value {value} does not fit in {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },
    #[error("reserved bits set in word 0x{0:016x}")]
    ReservedBits(u64),
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported version {found} at offset {offset}")]
    VersionMismatch { offset: u64, found: u16 },
    #[error("truncated file: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: u64, needed: u64, len: u64 },
    #[error("invalid event word at offset {offset}: {reason}")]
    BadWord { offset: u64, reason: String },
    #[error("inconsistent header at offset {offset}: {reason}")]
    BadHeader { offset: u64, reason: String },
    #[error("invalid readout parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ReadoutError {
    fn from(e: std::io::Error) -> Self {
        ReadoutError::Io(e.to_string())
    }
}
