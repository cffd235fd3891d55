//! Time-tag file format (`QTT1`), little-endian throughout.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `QTT1`                            |
//! | 4      | 2    | version (1)                             |
//! | 6      | 2    | flags (bit 0: calibration present)      |
//! | 8      | 8    | clock period, ps (f64)                  |
//! | 16     | 2    | n_taps                                  |
//! | 18     | 2    | n_channels                              |
//! | 20     | 8    | calibration offset (0 = absent)         |
//! | 28     | 8    | record count                            |
//! | 36     | 28   | reserved, zero                          |
//! | 64     | 8·n  | event words                             |
//! | cal    | 8·c·t| per channel, `n_taps` bin widths (f64)  |

use std::io::{Read, Write};

use super::{unpack, EventWord, ReadoutError};

pub const MAGIC: &[u8; 4] = b"QTT1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
const FLAG_CALIBRATION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TimetagHeader {
    pub version: u16,
    pub flags: u16,
    pub clock_period: f64,
    pub n_taps: u16,
    pub n_channels: u16,
    pub calibration_offset: u64,
    pub record_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimetagFile {
    pub header: TimetagHeader,
    pub words: Vec<EventWord>,
    /// `n_channels` rows of `n_taps` bin widths, when present.
    pub calibration: Option<Vec<Vec<f64>>>,
}

impl TimetagFile {
    pub fn new(
        clock_period: f64,
        n_taps: u16,
        n_channels: u16,
        words: Vec<EventWord>,
        calibration: Option<Vec<Vec<f64>>>,
    ) -> Result<Self, ReadoutError> {
        if let Some(cal) = &calibration {
            let ok = cal.len() == n_channels as usize && cal.iter().all(|r| r.len() == n_taps as usize);
            if !ok {
                return Err(ReadoutError::InvalidParameter(format!(
                    "calibration must be {n_channels} x {n_taps}"
                )));
            }
        }
        let count = words.len() as u64;
        let header = TimetagHeader {
            version: VERSION,
            flags: if calibration.is_some() { FLAG_CALIBRATION } else { 0 },
            clock_period,
            n_taps,
            n_channels,
            calibration_offset: if calibration.is_some() { HEADER_LEN as u64 + 8 * count } else { 0 },
            record_count: count,
        };
        Ok(Self { header, words, calibration })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let cal_len = self.calibration.as_ref().map_or(0, |c| c.iter().map(Vec::len).sum::<usize>());
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.words.len() + 8 * cal_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.flags.to_le_bytes());
        out.extend_from_slice(&h.clock_period.to_le_bytes());
        out.extend_from_slice(&h.n_taps.to_le_bytes());
        out.extend_from_slice(&h.n_channels.to_le_bytes());
        out.extend_from_slice(&h.calibration_offset.to_le_bytes());
        out.extend_from_slice(&h.record_count.to_le_bytes());
        out.resize(HEADER_LEN, 0);
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(cal) = &self.calibration {
            for x in cal.iter().flatten() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReadoutError> {
        let len = bytes.len() as u64;
        if bytes.len() < 4 || &bytes[0..4] != MAGIC {
            return Err(ReadoutError::BadMagic { offset: 0 });
        }
        if bytes.len() < HEADER_LEN {
            return Err(ReadoutError::Truncated { offset: len, needed: HEADER_LEN as u64, len });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(ReadoutError::VersionMismatch { offset: 4, found: version });
        }
        let header = TimetagHeader {
            version,
            flags: u16_at(6),
            clock_period: f64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            n_taps: u16_at(16),
            n_channels: u16_at(18),
            calibration_offset: u64_at(20),
            record_count: u64_at(28),
        };
        if let Some(i) = bytes[36..HEADER_LEN].iter().position(|&b| b != 0) {
            return Err(ReadoutError::BadHeader { offset: 36 + i as u64, reason: "reserved byte set".into() });
        }
        if header.flags & !FLAG_CALIBRATION != 0 {
            return Err(ReadoutError::BadHeader { offset: 6, reason: format!("unknown flags 0x{:04x}", header.flags) });
        }
        let body_end = (HEADER_LEN as u64).saturating_add(header.record_count.saturating_mul(8));
        if body_end > len {
            let complete = (len - HEADER_LEN as u64) / 8;
            return Err(ReadoutError::Truncated {
                offset: HEADER_LEN as u64 + complete * 8,
                needed: body_end - (HEADER_LEN as u64 + complete * 8),
                len,
            });
        }
        let mut words = Vec::with_capacity(header.record_count as usize);
        for (k, chunk) in bytes[HEADER_LEN..body_end as usize].chunks_exact(8).enumerate() {
            let w = EventWord::from_le_bytes(chunk.try_into().unwrap());
            if let Err(e) = unpack(w) {
                return Err(ReadoutError::BadWord {
                    offset: (HEADER_LEN + 8 * k) as u64,
                    reason: e.to_string(),
                });
            }
            words.push(w);
        }
        let has_cal = header.flags & FLAG_CALIBRATION != 0;
        let calibration = if has_cal {
            if header.calibration_offset != body_end {
                return Err(ReadoutError::BadHeader {
                    offset: 20,
                    reason: format!("calibration offset {} != end of records {body_end}", header.calibration_offset),
                });
            }
            let (c, t) = (header.n_channels as usize, header.n_taps as usize);
            let cal_end = body_end + 8 * (c * t) as u64;
            if cal_end > len {
                return Err(ReadoutError::Truncated { offset: len, needed: cal_end - len, len });
            }
            let vals: Vec<f64> = bytes[body_end as usize..cal_end as usize]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let rows = if t == 0 { vec![Vec::new(); c] } else { vals.chunks(t).map(<[f64]>::to_vec).collect() };
            if cal_end < len {
                return Err(ReadoutError::BadHeader { offset: cal_end, reason: "trailing bytes".into() });
            }
            Some(rows)
        } else {
            if header.calibration_offset != 0 {
                return Err(ReadoutError::BadHeader { offset: 20, reason: "calibration offset set without flag".into() });
            }
            if body_end < len {
                return Err(ReadoutError::BadHeader { offset: body_end, reason: "trailing bytes".into() });
            }
            None
        };
        Ok(Self { header, words, calibration })
    }
}

pub fn write_timetag_file<W: Write>(file: &TimetagFile, mut w: W) -> Result<(), ReadoutError> {
    w.write_all(&file.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_timetag_file<R: Read>(mut r: R) -> Result<TimetagFile, ReadoutError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    TimetagFile::from_bytes(&bytes)
}
