//! `.icltrace` container.
//!
//! Layout: one UTF-8 JSON header line terminated by `\n`, then the raw
//! little-endian `f32` arrays back to back. Each directory entry's
//! `byte_offset` is relative to the first byte after the header line.
//!
//! Array names: `hidden.L<layer>.P<position>`, `attention.L<layer>.Q<query>`
//! and `final_logits`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptureResult, ModelHandle, TokenSequence};
use crate::error::{Error, Result};

pub const EXTENSION: &str = "icltrace";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub token_ids: Vec<u32>,
    pub surface: String,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub handle: ModelHandle,
    pub tokens: TokenSequence,
    pub capture: CaptureResult,
}

fn named_arrays(capture: &CaptureResult) -> Vec<(String, &[f32])> {
    let mut arrays: Vec<(String, &[f32])> = Vec::new();
    for (&(layer, pos), v) in &capture.hidden {
        arrays.push((format!("hidden.L{layer}.P{pos}"), v));
    }
    for (&(layer, pos), v) in &capture.attention_rows {
        arrays.push((format!("attention.L{layer}.Q{pos}"), v));
    }
    arrays.push(("final_logits".into(), &capture.final_logits));
    arrays
}

pub fn header_for(capture: &CaptureResult, handle: &ModelHandle, tokens: &TokenSequence) -> TraceHeader {
    let mut offset = 0u64;
    let arrays = named_arrays(capture)
        .into_iter()
        .map(|(name, data)| {
            let byte_length = (data.len() * 4) as u64;
            let entry = ArrayEntry {
                name,
                shape: vec![data.len()],
                byte_offset: offset,
                byte_length,
            };
            offset += byte_length;
            entry
        })
        .collect();
    TraceHeader {
        format: EXTENSION.into(),
        version: FORMAT_VERSION,
        model_id: handle.model_id.clone(),
        num_layers: handle.num_layers,
        hidden_dim: handle.hidden_dim,
        vocab_size: handle.vocab_size,
        token_ids: tokens.token_ids.clone(),
        surface: tokens.surface.clone(),
        arrays,
    }
}

pub fn write_trace<W: Write>(
    mut out: W,
    capture: &CaptureResult,
    handle: &ModelHandle,
    tokens: &TokenSequence,
) -> Result<()> {
    let header = header_for(capture, handle, tokens);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, data) in named_arrays(capture) {
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_trace(
    capture: &CaptureResult,
    handle: &ModelHandle,
    tokens: &TokenSequence,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(std::io::BufWriter::new(file), capture, handle, tokens)
}

fn parse_key(rest: &str, second: char) -> Option<(usize, usize)> {
    let (l, p) = rest.strip_prefix('L')?.split_once(['.'])?;
    Some((l.parse().ok()?, p.strip_prefix(second)?.parse().ok()?))
}

pub fn read_trace<R: Read>(input: R) -> Result<Trace> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::TraceFormat("missing header terminator".into()));
    }
    let header: TraceHeader = serde_json::from_str(line.trim_end_matches('\n'))?;
    if header.format != EXTENSION {
        return Err(Error::TraceFormat(format!("unexpected format tag {:?}", header.format)));
    }
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;

    let mut capture = CaptureResult {
        num_layers: header.num_layers,
        seq_len: header.token_ids.len(),
        ..CaptureResult::default()
    };
    for entry in &header.arrays {
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_length as usize;
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::TraceFormat(format!("{} extends past end of file", entry.name)))?;
        let expected: usize = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::TraceFormat(format!("{}: length does not match shape", entry.name)));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let bad = || Error::TraceFormat(format!("unrecognized array name {:?}", entry.name));
        if entry.name == "final_logits" {
            capture.final_logits = values;
        } else if let Some(rest) = entry.name.strip_prefix("hidden.") {
            capture.hidden.insert(parse_key(rest, 'P').ok_or_else(bad)?, values);
        } else if let Some(rest) = entry.name.strip_prefix("attention.") {
            capture.attention_rows.insert(parse_key(rest, 'Q').ok_or_else(bad)?, values);
        } else {
            return Err(bad());
        }
    }
    Ok(Trace {
        handle: ModelHandle {
            model_id: header.model_id,
            num_layers: header.num_layers,
            hidden_dim: header.hidden_dim,
            vocab_size: header.vocab_size,
        },
        tokens: TokenSequence {
            token_ids: header.token_ids,
            surface: header.surface,
        },
        capture,
    })
}

pub fn import_trace(path: &Path) -> Result<Trace> {
    read_trace(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_capture() -> (CaptureResult, ModelHandle, TokenSequence) {
        let mut capture = CaptureResult {
            num_layers: 3,
            seq_len: 4,
            final_logits: vec![0.5, -1.25, f32::MIN_POSITIVE, 3.0e-39],
            ..Default::default()
        };
        for layer in 1..=3 {
            for pos in [1usize, 3] {
                capture
                    .hidden
                    .insert((layer, pos), vec![layer as f32, pos as f32 * 0.1, -0.0]);
            }
        }
        capture.attention_rows.insert((2, 3), vec![0.1, 0.2, 0.3, 0.4]);
        let handle = ModelHandle {
            model_id: "toy".into(),
            num_layers: 3,
            hidden_dim: 3,
            vocab_size: 4,
        };
        let tokens = TokenSequence {
            token_ids: vec![0, 3, 2, 1],
            surface: "abcd".into(),
        };
        (capture, handle, tokens)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (capture, handle, tokens) = toy_capture();
        let mut buf = Vec::new();
        write_trace(&mut buf, &capture, &handle, &tokens).unwrap();
        let trace = read_trace(buf.as_slice()).unwrap();
        assert_eq!(trace.handle, handle);
        assert_eq!(trace.tokens, tokens);
        for (k, v) in &capture.hidden {
            let got = &trace.capture.hidden[k];
            assert!(v.iter().zip(got).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(trace.capture, capture);
    }

    #[test]
    fn header_counts_hidden_arrays() {
        let (capture, handle, tokens) = toy_capture();
        let header = header_for(&capture, &handle, &tokens);
        let hidden = header.arrays.iter().filter(|a| a.name.starts_with("hidden.")).count();
        assert_eq!(hidden, 6);
        assert_eq!(header.token_ids, tokens.token_ids);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let (capture, handle, tokens) = toy_capture();
        let mut buf = Vec::new();
        write_trace(&mut buf, &capture, &handle, &tokens).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_trace(buf.as_slice()), Err(Error::TraceFormat(_))));
    }
}
