//! Minimal 16-bit PCM mono WAV reading and writing.
//!
//! Only the subset the corpus needs: one `fmt ` chunk describing PCM16
//! mono, one `data` chunk. The reader walks the chunk list, skips what it
//! does not know, and reports malformed input with the byte offset where
//! parsing stopped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const QUANT: f64 = 32767.0;

/// Write samples as PCM16 mono. Values are clamped to `[-1, 1]` before
/// quantization.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + samples.len() * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for v in samples {
        let q = (v.clamp(-1.0, 1.0) * QUANT).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn need(&self, at: usize, len: usize, what: &str) -> Result<&'a [u8]> {
        if at + len > self.bytes.len() {
            return Err(Error::MalformedFile {
                path: self.path.to_path_buf(),
                offset: at as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        Ok(&self.bytes[at..at + len])
    }

    fn tag(&self, at: usize, want: &[u8; 4], what: &str) -> Result<()> {
        let got = self.need(at, 4, what)?;
        if got != want {
            return Err(Error::MalformedFile {
                path: self.path.to_path_buf(),
                offset: at as u64,
                msg: format!(
                    "expected {:?} tag, found {:?}",
                    String::from_utf8_lossy(want),
                    String::from_utf8_lossy(got)
                ),
            });
        }
        Ok(())
    }

    fn u32_at(&self, at: usize, what: &str) -> Result<u32> {
        let b = self.need(at, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16_at(&self, at: usize, what: &str) -> Result<u16> {
        let b = self.need(at, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn fail(&self, at: usize, msg: String) -> Error {
        Error::MalformedFile {
            path: self.path.to_path_buf(),
            offset: at as u64,
            msg,
        }
    }
}

/// Read a PCM16 mono file back into float samples plus its sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = Cursor {
        bytes: &bytes,
        path,
    };
    c.tag(0, b"RIFF", "RIFF header")?;
    c.tag(8, b"WAVE", "WAVE header")?;

    let mut at = 12usize;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    loop {
        let id = c.need(at, 4, "chunk id")?;
        let size = c.u32_at(at + 4, "chunk size")? as usize;
        let body = at + 8;
        match id {
            b"fmt " => {
                let audio_format = c.u16_at(body, "audio format")?;
                let channels = c.u16_at(body + 2, "channel count")?;
                let sample_rate = c.u32_at(body + 4, "sample rate")?;
                let bits = c.u16_at(body + 14, "bits per sample")?;
                format = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                let Some((audio_format, channels, sample_rate, bits)) = format else {
                    return Err(c.fail(at, "data chunk before fmt chunk".into()));
                };
                if (audio_format, channels, bits) != (1, 1, 16) {
                    return Err(c.fail(
                        at,
                        format!(
                            "unsupported format: pcm={audio_format} channels={channels} bits={bits}"
                        ),
                    ));
                }
                let raw = c.need(body, size, "sample data")?;
                if size % 2 != 0 {
                    return Err(c.fail(body, format!("odd data size {size}")));
                }
                let samples = raw
                    .chunks_exact(2)
                    .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / QUANT)
                    .collect();
                return Ok((samples, sample_rate));
            }
            _ => {}
        }
        // Chunks are word-aligned.
        at = body + size + (size % 2);
        if at >= bytes.len() {
            return Err(c.fail(at as usize, "no data chunk found".into()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("ser-wav-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_within_quantization() {
        let path = tmp("roundtrip.wav");
        let samples: Vec<f64> = (0..500).map(|i| (i as f64 * 0.13).sin() * 0.85).collect();
        write_wav(&path, &samples, 4000).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 4000);
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn truncated_file_reports_path_and_offset() {
        let path = tmp("truncated.wav");
        let samples = vec![0.1; 100];
        write_wav(&path, &samples, 4000).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(60);
        std::fs::write(&path, bytes).unwrap();
        match read_wav(&path) {
            Err(Error::MalformedFile { path: p, msg, .. }) => {
                assert!(p.ends_with("truncated.wav"));
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected malformed-file error, got {other:?}"),
        }
    }

    #[test]
    fn garbage_header_rejected() {
        let path = tmp("garbage.wav");
        std::fs::write(&path, b"this is not audio at all").unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let path = tmp("extra-chunk.wav");
        let samples = vec![0.5, -0.5, 0.25];
        write_wav(&path, &samples, 4000).unwrap();
        // Splice a LIST chunk between fmt and data.
        let bytes = std::fs::read(&path).unwrap();
        let mut spliced = bytes[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&4u32.to_le_bytes());
        spliced.extend_from_slice(b"info");
        spliced.extend_from_slice(&bytes[36..]);
        let new_riff_len = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&new_riff_len.to_le_bytes());
        std::fs::write(&path, spliced).unwrap();
        let (back, _) = read_wav(&path).unwrap();
        assert_eq!(back.len(), 3);
    }

    #[test]
    fn clipping_values_clamp_instead_of_wrapping() {
        let path = tmp("clamp.wav");
        write_wav(&path, &[1.5, -1.5], 4000).unwrap();
        let (back, _) = read_wav(&path).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-9);
        assert!((back[1] + 1.0).abs() < 1e-9);
    }
}
