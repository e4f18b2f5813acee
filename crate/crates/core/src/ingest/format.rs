//! WFDB sample encodings.
//!
//! Format 212 packs two 12-bit two's complement samples into three bytes:
//! the first sample's low byte, a byte whose low nibble holds the first
//! sample's high 4 bits and whose high nibble holds the second sample's,
//! then the second sample's low byte. Multi-channel records interleave
//! samples frame by frame before packing.

use super::ChannelInfo;
use crate::{Error, Result};

fn sign_extend_12(v: u16) -> i32 {
    let v = (v & 0x0FFF) as i32;
    if v & 0x0800 != 0 {
        v - 0x1000
    } else {
        v
    }
}

/// Decodes `n_values` raw 12-bit values.
pub fn decode_format212_adu(bytes: &[u8], n_values: usize) -> Result<Vec<i32>> {
    let needed = (n_values * 3).div_ceil(2);
    if bytes.len() < needed {
        // first incomplete group
        let offset = (bytes.len() / 3) * 3;
        return Err(Error::Truncated {
            offset,
            needed,
            available: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(n_values);
    for chunk in bytes[..needed].chunks(3) {
        let b0 = chunk[0] as u16;
        let b1 = chunk.get(1).copied().unwrap_or(0) as u16;
        out.push(sign_extend_12(b0 | ((b1 & 0x0F) << 8)));
        if out.len() == n_values {
            break;
        }
        let b2 = chunk[2] as u16;
        out.push(sign_extend_12(b2 | ((b1 & 0xF0) << 4)));
        if out.len() == n_values {
            break;
        }
    }
    Ok(out)
}

/// Result of packing samples into format 212.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed212 {
    pub bytes: Vec<u8>,
    /// An odd sample count was completed with a zero half-pair.
    pub padded: bool,
}

pub fn encode_format212(adu: &[i32]) -> Result<Packed212> {
    if let Some(&bad) = adu.iter().find(|&&v| !(-2048..=2047).contains(&v)) {
        return Err(Error::SampleRange {
            value: bad,
            min: -2048,
            max: 2047,
        });
    }
    let mut bytes = Vec::with_capacity(adu.len().div_ceil(2) * 3);
    for pair in adu.chunks(2) {
        let a = (pair[0] & 0x0FFF) as u16;
        let b = (pair.get(1).copied().unwrap_or(0) & 0x0FFF) as u16;
        bytes.push((a & 0xFF) as u8);
        bytes.push((((a >> 8) & 0x0F) | ((b >> 8) << 4)) as u8);
        bytes.push((b & 0xFF) as u8);
    }
    Ok(Packed212 {
        bytes,
        padded: adu.len() % 2 == 1,
    })
}

fn deinterleave(values: &[i32], channels: &[ChannelInfo], n_samples: usize) -> Vec<Vec<f64>> {
    let n_ch = channels.len();
    (0..n_ch)
        .map(|c| {
            (0..n_samples)
                .map(|t| channels[c].to_mv(values[t * n_ch + c]))
                .collect()
        })
        .collect()
}

/// Decodes an interleaved format 212 file into per-channel mV samples.
pub fn decode_format212(bytes: &[u8], n_samples: usize, channels: &[ChannelInfo]) -> Result<Vec<Vec<f64>>> {
    let values = decode_format212_adu(bytes, n_samples * channels.len())?;
    Ok(deinterleave(&values, channels, n_samples))
}

pub fn decode_format16_adu(bytes: &[u8], n_values: usize) -> Result<Vec<i32>> {
    let needed = n_values * 2;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            offset: bytes.len() & !1,
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[..needed]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
        .collect())
}

pub fn decode_format16(bytes: &[u8], n_samples: usize, channels: &[ChannelInfo]) -> Result<Vec<Vec<f64>>> {
    let values = decode_format16_adu(bytes, n_samples * channels.len())?;
    Ok(deinterleave(&values, channels, n_samples))
}

pub fn encode_format16(adu: &[i32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(adu.len() * 2);
    for &v in adu {
        let s = i16::try_from(v).map_err(|_| Error::SampleRange {
            value: v,
            min: i16::MIN as i32,
            max: i16::MAX as i32,
        })?;
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}
