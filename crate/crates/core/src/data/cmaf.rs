//! The CMAF feature-file format.
//!
//! All integers and floats are little-endian with no alignment padding:
//!
//! ```text
//! magic        4 bytes  "CMAF"
//! version      u32      1
//! count        u32      number of utterances
//! per utterance:
//!   id_len     u32
//!   id         id_len bytes of UTF-8
//!   session    u8       1..=5
//!   label      u8       0 angry, 1 happy, 2 neutral, 3 sad
//!   audio_n    u32      frame count, > 0
//!   audio_dim  u32      1024
//!   audio      audio_n * 1024 f32, row-major
//!   text_n     u32      token count, > 0
//!   text_dim   u32      768
//!   text       text_n * 768 f32, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{EmotionLabel, FeatureSequence, Modality, UtteranceSample, AUDIO_DIM, TEXT_DIM};

pub const MAGIC: &[u8; 4] = b"CMAF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CmafError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"CMAF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {field} of utterance {utterance}")]
    Truncated {
        utterance: String,
        field: &'static str,
    },
    #[error("utterance {id}: {modality:?} dim is {found}, expected {expected}")]
    DimMismatch {
        id: String,
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error("utterance {id}: label {value} out of range 0..=3")]
    LabelOutOfRange { id: String, value: u8 },
    #[error("utterance {id}: session {value} out of range 1..=5")]
    SessionOutOfRange { id: String, value: u8 },
    #[error("utterance {id}: {modality:?} sequence has no frames")]
    EmptySequence { id: String, modality: Modality },
    #[error("utterance {id}: {modality:?} features contain a non-finite value")]
    NonFiniteValue { id: String, modality: Modality },
    #[error("utterance #{index}: id is not valid UTF-8")]
    InvalidId { index: usize },
    #[error("utterance {id}: frame data length does not match the declared shape")]
    ShapeMismatch { id: String },
    #[error("{0} unexpected bytes after the last utterance")]
    TrailingBytes(usize),
}

fn validate(sample: &UtteranceSample) -> Result<(), CmafError> {
    let id = &sample.id;
    if !(1..=5).contains(&sample.session) {
        return Err(CmafError::SessionOutOfRange {
            id: id.clone(),
            value: sample.session,
        });
    }
    for (seq, modality, dim) in [
        (&sample.audio, Modality::Audio, AUDIO_DIM),
        (&sample.text, Modality::Text, TEXT_DIM),
    ] {
        if seq.dim != dim {
            return Err(CmafError::DimMismatch {
                id: id.clone(),
                modality,
                expected: dim,
                found: seq.dim,
            });
        }
        if seq.frames == 0 {
            return Err(CmafError::EmptySequence {
                id: id.clone(),
                modality,
            });
        }
        if seq.data.len() != seq.frames * seq.dim {
            return Err(CmafError::ShapeMismatch { id: id.clone() });
        }
        if seq.data.iter().any(|v| !v.is_finite()) {
            return Err(CmafError::NonFiniteValue {
                id: id.clone(),
                modality,
            });
        }
    }
    Ok(())
}

pub fn encode(samples: &[UtteranceSample]) -> Result<Vec<u8>, CmafError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        validate(s)?;
        out.extend_from_slice(&(s.id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.id.as_bytes());
        out.push(s.session);
        out.push(s.label.index() as u8);
        for seq in [&s.audio, &s.text] {
            out.extend_from_slice(&(seq.frames as u32).to_le_bytes());
            out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
            out.reserve(seq.data.len() * 4);
            for v in &seq.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, utterance: &str, field: &'static str) -> Result<&'a [u8], CmafError> {
        if self.buf.len() - self.pos < n {
            return Err(CmafError::Truncated {
                utterance: utterance.to_string(),
                field,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, utterance: &str, field: &'static str) -> Result<u32, CmafError> {
        let b = self.take(4, utterance, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, utterance: &str, field: &'static str) -> Result<u8, CmafError> {
        Ok(self.take(1, utterance, field)?[0])
    }

    fn sequence(
        &mut self,
        id: &str,
        modality: Modality,
        expected_dim: usize,
    ) -> Result<FeatureSequence, CmafError> {
        let (frames_field, dim_field, data_field) = match modality {
            Modality::Audio => ("audio frame count", "audio dim", "audio features"),
            Modality::Text => ("text frame count", "text dim", "text features"),
        };
        let frames = self.u32(id, frames_field)? as usize;
        let dim = self.u32(id, dim_field)? as usize;
        if dim != expected_dim {
            return Err(CmafError::DimMismatch {
                id: id.to_string(),
                modality,
                expected: expected_dim,
                found: dim,
            });
        }
        if frames == 0 {
            return Err(CmafError::EmptySequence {
                id: id.to_string(),
                modality,
            });
        }
        let bytes_len = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CmafError::Truncated {
                utterance: id.to_string(),
                field: data_field,
            })?;
        let bytes = self.take(bytes_len, id, data_field)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CmafError::NonFiniteValue {
                id: id.to_string(),
                modality,
            });
        }
        Ok(FeatureSequence::new(modality, frames, dim, data))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<UtteranceSample>, CmafError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = "<header>";
    let magic = r.take(4, header, "magic")?;
    if magic != MAGIC {
        return Err(CmafError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32(header, "version")?;
    if version != VERSION {
        return Err(CmafError::UnsupportedVersion(version));
    }
    let count = r.u32(header, "utterance count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let placeholder = format!("#{index}");
        let id_len = r.u32(&placeholder, "id length")? as usize;
        let id_bytes = r.take(id_len, &placeholder, "id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| CmafError::InvalidId { index })?
            .to_string();
        let session = r.u8(&id, "session")?;
        let label_raw = r.u8(&id, "label")?;
        let audio = r.sequence(&id, Modality::Audio, AUDIO_DIM)?;
        let text = r.sequence(&id, Modality::Text, TEXT_DIM)?;
        if !(1..=5).contains(&session) {
            return Err(CmafError::SessionOutOfRange { id, value: session });
        }
        let label = EmotionLabel::from_index(label_raw as usize)
            .ok_or_else(|| CmafError::LabelOutOfRange {
                id: id.clone(),
                value: label_raw,
            })?;
        samples.push(UtteranceSample {
            id,
            session,
            audio,
            text,
            label,
        });
    }
    if r.pos != bytes.len() {
        return Err(CmafError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(samples)
}

pub fn write_feature_file(samples: &[UtteranceSample], path: impl AsRef<Path>) -> Result<(), CmafError> {
    let path = path.as_ref();
    let bytes = encode(samples)?;
    let io = |source| CmafError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

/// Reads and fully validates a CMAF file.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Vec<UtteranceSample>, CmafError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CmafError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
