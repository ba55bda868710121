//! Minimal mono 16-bit PCM RIFF/WAVE and headerless raw I/O.

use std::fs;
use std::path::Path;

use super::PcmBuffer;
use crate::error::{Error, Result};

fn bad(reason: impl Into<String>) -> Error {
    Error::format("wav file", 0, reason)
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn parse_wav(bytes: &[u8]) -> Result<PcmBuffer> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated chunk"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let (format, channels, bits) = (le_u16(&body[0..2]), le_u16(&body[2..4]), le_u16(&body[14..16]));
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(bad(format!(
                        "only mono 16-bit PCM is supported (format {format}, {channels} channels, {bits} bits)"
                    )));
                }
                rate = Some(le_u32(&body[4..8]));
            }
            b"data" => {
                let rate = rate.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                if size % 2 != 0 {
                    return Err(bad("odd data length"));
                }
                let samples = body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
                return Ok(PcmBuffer {
                    samples,
                    sample_rate_hz: rate,
                });
            }
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    Err(bad("no data chunk"))
}

pub fn wav_bytes(pcm: &PcmBuffer) -> Vec<u8> {
    let data_len = (pcm.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&pcm.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(pcm.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &pcm.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<PcmBuffer> {
    let path = path.as_ref();
    parse_wav(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_wav(pcm: &PcmBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, wav_bytes(pcm)).map_err(|e| Error::io(path, e))
}

/// Headerless little-endian 16-bit samples at the given rate.
pub fn read_raw_pcm16(path: impl AsRef<Path>, sample_rate_hz: u32) -> Result<PcmBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 2 != 0 {
        return Err(bad("raw PCM file has odd length"));
    }
    Ok(PcmBuffer {
        samples: bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
        sample_rate_hz,
    })
}

pub fn write_raw_pcm16(pcm: &PcmBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = pcm.samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip() {
        let pcm = PcmBuffer {
            samples: vec![0, 1, -1, i16::MAX, i16::MIN],
            sample_rate_hz: 8000,
        };
        let bytes = wav_bytes(&pcm);
        assert_eq!(bytes.len(), 44 + 10);
        assert_eq!(parse_wav(&bytes).unwrap(), pcm);
    }

    #[test]
    fn skips_unknown_chunks() {
        let pcm = PcmBuffer {
            samples: vec![5, -5],
            sample_rate_hz: 8000,
        };
        let mut bytes = wav_bytes(&pcm);
        // insert an odd-sized LIST chunk before fmt
        let extra = [b"LIST".as_slice(), &3u32.to_le_bytes(), b"abc\0"].concat();
        bytes.splice(12..12, extra);
        let len = (bytes.len() - 8) as u32;
        bytes[4..8].copy_from_slice(&len.to_le_bytes());
        assert_eq!(parse_wav(&bytes).unwrap(), pcm);
    }

    #[test]
    fn rejects_stereo() {
        let mut bytes = wav_bytes(&PcmBuffer {
            samples: vec![0, 0],
            sample_rate_hz: 8000,
        });
        bytes[22] = 2;
        assert!(parse_wav(&bytes).is_err());
    }
}
