//! Feature file formats.
//!
//! Three per-sample streams are referenced from a manifest:
//!
//! * keypoints — binary `[T x 137 x 2]` of little-endian f32 behind an 8-byte
//!   header (4-byte magic `KPT1` + u32 frame count). A plain-text CSV
//!   alternative (one frame per line, 274 comma-separated floats) is accepted
//!   for interoperability; readers sniff the magic.
//! * visual  — binary `[T x W]` of little-endian f32 behind a 12-byte header
//!   (magic `VIS1` + u32 frame count + u32 width).
//! * text    — whitespace-separated plain text, first word `tokens` (integer
//!   ids) or `embedding` (floats, a precomputed fixed-width text vector).

use crate::error::{Error, Result};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Total keypoints per frame: 25 body + 70 face + 42 hands.
pub const KEYPOINT_COUNT: usize = 137;
/// Floats per keypoint frame (x, y per keypoint).
pub const KEYPOINT_FRAME_FLOATS: usize = KEYPOINT_COUNT * 2;

const KEYPOINT_MAGIC: &[u8; 4] = b"KPT1";
const VISUAL_MAGIC: &[u8; 4] = b"VIS1";

fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::parse("float payload length not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write normalized keypoints (`frames.len()` must be `T * 274`).
pub fn write_keypoints_binary(path: &Path, frames: &[f32]) -> Result<()> {
    if frames.len() % KEYPOINT_FRAME_FLOATS != 0 {
        return Err(Error::validation(format!(
            "keypoint payload of {} floats is not a whole number of {}-float frames",
            frames.len(),
            KEYPOINT_FRAME_FLOATS
        )));
    }
    let t = (frames.len() / KEYPOINT_FRAME_FLOATS) as u32;
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(KEYPOINT_MAGIC)?;
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&f32s_to_bytes(frames))?;
    w.flush()?;
    Ok(())
}

/// CSV alternative: one frame per line, 274 comma-separated floats.
pub fn write_keypoints_csv(path: &Path, frames: &[f32]) -> Result<()> {
    if frames.len() % KEYPOINT_FRAME_FLOATS != 0 {
        return Err(Error::validation("keypoint payload is not whole frames".to_string()));
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for frame in frames.chunks_exact(KEYPOINT_FRAME_FLOATS) {
        let line: Vec<String> = frame.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a keypoint stream (binary or CSV, sniffed). Returns `(frame_count, data)`.
pub fn read_keypoints(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 8 && &bytes[0..4] == KEYPOINT_MAGIC {
        let t = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let data = bytes_to_f32s(&bytes[8..])?;
        if data.len() != t * KEYPOINT_FRAME_FLOATS {
            return Err(Error::parse(format!(
                "keypoint file {} declares {t} frames but holds {} floats",
                path.display(),
                data.len()
            )));
        }
        return Ok((t, data));
    }
    // CSV fallback.
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::parse(format!("{} is neither KPT1 binary nor text", path.display())))?;
    let mut data = Vec::new();
    let mut t = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::parse(format!(
                    "{} line {}: '{}' is not a float",
                    path.display(),
                    lineno + 1,
                    field.trim()
                ))
            })?;
            data.push(v);
            count += 1;
        }
        if count != KEYPOINT_FRAME_FLOATS {
            return Err(Error::parse(format!(
                "{} line {}: expected {} values, found {count}",
                path.display(),
                lineno + 1,
                KEYPOINT_FRAME_FLOATS
            )));
        }
        t += 1;
    }
    Ok((t, data))
}

/// Frame count of a keypoint file without loading the full payload
/// (binary reads the header; CSV counts lines).
pub fn peek_keypoint_frames(path: &Path) -> Result<usize> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 8];
    let n = file.read(&mut header)?;
    if n >= 8 && &header[0..4] == KEYPOINT_MAGIC {
        return Ok(u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize);
    }
    drop(file);
    let text = fs::read_to_string(path)
        .map_err(|_| Error::parse(format!("{} is neither KPT1 binary nor text", path.display())))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
}

/// Write a visual embedding stream `[T x W]`.
pub fn write_visual_binary(path: &Path, t: usize, width: usize, data: &[f32]) -> Result<()> {
    if data.len() != t * width {
        return Err(Error::validation(format!(
            "visual payload mismatch: {}x{} declared, {} floats given",
            t,
            width,
            data.len()
        )));
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(VISUAL_MAGIC)?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&f32s_to_bytes(data))?;
    w.flush()?;
    Ok(())
}

/// Read a visual stream. Returns `(frame_count, width, data)`.
pub fn read_visual(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != VISUAL_MAGIC {
        return Err(Error::parse(format!("{} is not a VIS1 file", path.display())));
    }
    let t = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let w = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let data = bytes_to_f32s(&bytes[12..])?;
    if data.len() != t * w {
        return Err(Error::parse(format!(
            "visual file {} declares {t}x{w} but holds {} floats",
            path.display(),
            data.len()
        )));
    }
    Ok((t, w, data))
}

/// Header-only read of `(frame_count, width)`.
pub fn peek_visual_dims(path: &Path) -> Result<(usize, usize)> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| Error::parse(format!("{} is not a VIS1 file", path.display())))?;
    if &header[0..4] != VISUAL_MAGIC {
        return Err(Error::parse(format!("{} is not a VIS1 file", path.display())));
    }
    let t = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
    let w = u32::from_le_bytes([header[8], header[9], header[10], header[11]]) as usize;
    Ok((t, w))
}

/// Text-modality input: either token ids for the text encoder or a
/// precomputed embedding vector ingested as-is.
#[derive(Debug, Clone, PartialEq)]
pub enum TextFeature {
    Tokens(Vec<usize>),
    Embedding(Vec<f64>),
}

pub fn write_text_tokens(path: &Path, tokens: &[usize]) -> Result<()> {
    let body: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    fs::write(path, format!("tokens {}\n", body.join(" ")))?;
    Ok(())
}

pub fn write_text_embedding(path: &Path, values: &[f64]) -> Result<()> {
    let body: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    fs::write(path, format!("embedding {}\n", body.join(" ")))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<TextFeature> {
    let text = fs::read_to_string(path)?;
    let mut parts = text.split_whitespace();
    let tag = parts
        .next()
        .ok_or_else(|| Error::parse(format!("{} is empty", path.display())))?;
    match tag {
        "tokens" => {
            let tokens: std::result::Result<Vec<usize>, _> =
                parts.map(|p| p.parse::<usize>()).collect();
            Ok(TextFeature::Tokens(tokens.map_err(|_| {
                Error::parse(format!("{}: non-integer token id", path.display()))
            })?))
        }
        "embedding" => {
            let values: std::result::Result<Vec<f64>, _> =
                parts.map(|p| p.parse::<f64>()).collect();
            Ok(TextFeature::Embedding(values.map_err(|_| {
                Error::parse(format!("{}: non-float embedding value", path.display()))
            })?))
        }
        other => Err(Error::parse(format!(
            "{}: unknown text feature tag '{other}' (expected 'tokens' or 'embedding')",
            path.display()
        ))),
    }
}
