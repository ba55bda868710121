//! G.711 A-law companding and 8 kHz PCM transcoding.
//!
//! Routing 16-bit PCM through A-law and back imposes the quantization of a
//! telephone channel on wideband audio, which matches it to CTS-style data.

mod wav;

pub use wav::{read_raw_pcm16, read_wav, write_raw_pcm16, write_wav};

use crate::error::{Error, Result};

pub const TELEPHONE_RATE_HZ: u32 = 8000;

/// Even-bit inversion applied to every A-law code.
const AMI_MASK: u8 = 0x55;

/// Upper bounds of the eight segments on the 13-bit magnitude scale.
const SEG_END: [i32; 8] = [0x1F, 0x3F, 0x7F, 0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcmBuffer {
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ALawBuffer {
    pub bytes: Vec<u8>,
    pub sample_rate_hz: u32,
}

/// Compresses a 16-bit sample to an A-law code.
pub fn alaw_encode(sample: i16) -> u8 {
    // 13-bit scale; negatives use the one's-complement magnitude
    let v = (sample as i32) >> 3;
    let (mag, mask) = if v >= 0 { (v, AMI_MASK | 0x80) } else { (-v - 1, AMI_MASK) };
    let seg = SEG_END.iter().position(|&end| mag <= end).unwrap_or(8) as i32;
    if seg >= 8 {
        return 0x7F ^ mask;
    }
    let shift = if seg < 2 { 1 } else { seg };
    (((seg << 4) | ((mag >> shift) & 0x0F)) as u8) ^ mask
}

/// Expands an A-law code to the centre of its quantization interval.
pub fn alaw_decode(code: u8) -> i16 {
    let a = code ^ AMI_MASK;
    let mut t = ((a & 0x0F) as i32) << 4;
    let seg = ((a & 0x70) >> 4) as i32;
    match seg {
        0 => t += 8,
        1 => t += 0x108,
        _ => {
            t += 0x108;
            t <<= seg - 1;
        }
    }
    (if a & 0x80 != 0 { t } else { -t }) as i16
}

/// Quantization step (16-bit units) of the segment `sample` falls in.
pub fn segment_step(sample: i16) -> i32 {
    let seg = ((alaw_encode(sample) ^ AMI_MASK) & 0x70) >> 4;
    if seg == 0 {
        16
    } else {
        16 << (seg - 1)
    }
}

fn check_rate(rate: u32) -> Result<()> {
    if rate != TELEPHONE_RATE_HZ {
        return Err(Error::InvalidArgument(format!(
            "A-law transcoding expects {TELEPHONE_RATE_HZ} Hz audio, got {rate} Hz (resample first)"
        )));
    }
    Ok(())
}

pub fn encode_buffer(pcm: &PcmBuffer) -> ALawBuffer {
    ALawBuffer {
        bytes: pcm.samples.iter().map(|&s| alaw_encode(s)).collect(),
        sample_rate_hz: pcm.sample_rate_hz,
    }
}

pub fn decode_buffer(alaw: &ALawBuffer) -> PcmBuffer {
    PcmBuffer {
        samples: alaw.bytes.iter().map(|&c| alaw_decode(c)).collect(),
        sample_rate_hz: alaw.sample_rate_hz,
    }
}

/// PCM → A-law → PCM at 8 kHz.
pub fn transcode_alaw(buffer: &PcmBuffer) -> Result<PcmBuffer> {
    check_rate(buffer.sample_rate_hz)?;
    Ok(decode_buffer(&encode_buffer(buffer)))
}
