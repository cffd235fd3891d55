use crate::tdc::{ChannelId, TdcRecord};

use super::ReadoutError;

const FINE_SHIFT: u32 = 0;
const FINE_BITS: u32 = 9;
const COARSE_SHIFT: u32 = 9;
const COARSE_BITS: u32 = 40;
const CHANNEL_SHIFT: u32 = 49;
const CHANNEL_BITS: u32 = 5;
const ROLLOVER_BIT: u32 = 54;
const RESERVED_MASK: u64 = !0u64 << 55;

const fn mask(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

/// One digitized event on the wire.
///
/// | bits    | field                      |
/// |---------|----------------------------|
/// | 0..9    | fine code                  |
/// | 9..49   | coarse count               |
/// | 49..54  | channel                    |
/// | 54      | rollover (epoch parity)    |
/// | 55..64  | reserved, zero             |
///
/// Serialized little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventWord(pub u64);

impl EventWord {
    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(b: [u8; 8]) -> Self {
        EventWord(u64::from_le_bytes(b))
    }
}

pub fn pack(record: &TdcRecord, rollover: bool) -> Result<EventWord, ReadoutError> {
    let check = |field, value: u64, bits| {
        if value > mask(bits) {
            Err(ReadoutError::FieldOverflow { field, value, bits })
        } else {
            Ok(value)
        }
    };
    let fine = check("fine", record.fine as u64, FINE_BITS)?;
    let coarse = check("coarse", record.coarse, COARSE_BITS)?;
    let channel = check("channel", record.channel.0 as u64, CHANNEL_BITS)?;
    Ok(EventWord(
        fine << FINE_SHIFT
            | coarse << COARSE_SHIFT
            | channel << CHANNEL_SHIFT
            | (rollover as u64) << ROLLOVER_BIT,
    ))
}

pub fn unpack(word: EventWord) -> Result<(TdcRecord, bool), ReadoutError> {
    let w = word.0;
    if w & RESERVED_MASK != 0 {
        return Err(ReadoutError::ReservedBits(w));
    }
    Ok((
        TdcRecord {
            channel: ChannelId((w >> CHANNEL_SHIFT & mask(CHANNEL_BITS)) as u8),
            coarse: w >> COARSE_SHIFT & mask(COARSE_BITS),
            fine: (w >> FINE_SHIFT & mask(FINE_BITS)) as u16,
        },
        w >> ROLLOVER_BIT & 1 == 1,
    ))
}

/// Rollover flags for a time-ordered stream.
///
/// `full_coarse[i]` is the unwrapped edge index of record `i`; the flag is
/// the parity of its counter epoch (`full_coarse >> coarse_bits`).
pub fn tag_rollovers(full_coarse: &[u64], coarse_bits: u32) -> Vec<bool> {
    full_coarse.iter().map(|&c| (c >> coarse_bits) & 1 == 1).collect()
}

/// Recovers unwrapped coarse counts from a time-ordered word stream.
///
/// The epoch advances whenever the rollover flag toggles between consecutive
/// words, which is exact as long as no two wraps (about 6.9e3 s apart at
/// 40 bits) fall between consecutive words.
pub fn unwrap_coarse(records: &[(TdcRecord, bool)], coarse_bits: u32) -> Vec<u64> {
    let mut epoch = 0u64;
    let mut parity = false;
    records
        .iter()
        .map(|(r, flag)| {
            if *flag != parity {
                epoch += 1;
                parity = *flag;
            }
            (epoch << coarse_bits) | r.coarse
        })
        .collect()
}
