//! `CTCP` posterior files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Label, PosteriorMatrix, Utterance};
use crate::container::{self, read_file, write_file};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CTCP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    label: String,
    frames: usize,
    /// Byte offset relative to the start of the float payload.
    offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(rename = "T")]
    vocab_size: usize,
    blank_index: usize,
    utterances: Vec<IndexEntry>,
}

pub(crate) fn encode(utterances: &[Utterance]) -> Result<Vec<u8>> {
    let first = utterances
        .first()
        .ok_or_else(|| Error::invalid("refusing to write an empty posterior file"))?;
    let classes = first.posteriors.classes();
    let mut index = Vec::with_capacity(utterances.len());
    let mut payload = Vec::new();
    for u in utterances {
        if u.posteriors.classes() != classes {
            return Err(Error::Shape {
                op: "write_posteriors",
                left: vec![classes],
                right: vec![u.posteriors.classes()],
            });
        }
        index.push(IndexEntry {
            id: u.id.clone(),
            label: u.label.as_str().to_string(),
            frames: u.posteriors.frames(),
            offset: (payload.len() * 8) as u64,
            reference: u.reference.clone(),
        });
        payload.extend_from_slice(u.posteriors.values());
    }
    container::encode(
        MAGIC,
        &Header {
            version: VERSION,
            vocab_size: classes - 1,
            blank_index: classes - 1,
            utterances: index,
        },
        &payload,
    )
}

pub(crate) fn decode(bytes: &[u8], path: &Path, expected_vocab: Option<usize>) -> Result<Vec<Utterance>> {
    let d: container::Decoded<Header> = container::decode(MAGIC, bytes, path)?;
    let h = d.header;
    if h.version != VERSION {
        return Err(Error::format(path, 12, format!("unsupported version {}", h.version)));
    }
    if h.blank_index != h.vocab_size {
        return Err(Error::format(path, 12, "blank must be the last class"));
    }
    if let Some(t) = expected_vocab {
        if t != h.vocab_size {
            return Err(Error::data(format!(
                "{}: dimension mismatch: file has T={} but the vocabulary has T={t}",
                path.display(),
                h.vocab_size
            )));
        }
    }
    let classes = h.vocab_size + 1;
    let mut out = Vec::with_capacity(h.utterances.len());
    for e in h.utterances {
        let n = e.frames * classes;
        let start = (e.offset / 8) as usize;
        if e.offset % 8 != 0 || start + n > d.payload.len() {
            return Err(Error::format(
                path,
                d.payload_offset + (d.payload.len() * 8) as u64,
                format!(
                    "truncated: utterance {} needs {} floats at offset {}",
                    e.id, n, e.offset
                ),
            ));
        }
        let label: Label = e.label.parse()?;
        let posteriors = PosteriorMatrix::new(e.frames, classes, d.payload[start..start + n].to_vec())
            .map_err(|err| Error::data(format!("{}: utterance {}: {err}", path.display(), e.id)))?;
        out.push(Utterance {
            id: e.id,
            label,
            posteriors,
            reference: e.reference,
        });
    }
    Ok(out)
}

pub fn write_posteriors(utterances: &[Utterance], path: &Path) -> Result<()> {
    write_file(path, &encode(utterances)?)
}

/// Reads a posterior file; with `expected_vocab` the file's `T` must match.
pub fn read_posteriors(path: &Path, expected_vocab: Option<usize>) -> Result<Vec<Utterance>> {
    decode(&read_file(path)?, path, expected_vocab)
}
