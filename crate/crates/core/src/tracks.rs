//! Six-track numeric encoding of mature RNAs and the masking augmentation.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::TranscriptRecord;
use crate::error::{Error, Result};

pub const N_TRACKS: usize = 6;
pub const SPLICE_TRACK: usize = 4;
pub const CODON_TRACK: usize = 5;

/// 6 × `width` matrix, row-major. Rows: A, C, G, T, splice site, codon start.
///
/// `length` is the number of columns holding sequence; columns past it are
/// zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackMatrix {
    data: Vec<f32>,
    width: usize,
    length: usize,
}

impl TrackMatrix {
    pub fn zeros(width: usize) -> Self {
        Self {
            data: vec![0.0; N_TRACKS * width],
            width,
            length: width,
        }
    }

    /// Builds a matrix from row-major data; `data.len()` must be `6 * width`.
    pub fn from_rows(data: Vec<f32>, width: usize, length: usize) -> Result<Self> {
        if data.len() != N_TRACKS * width || length > width {
            return Err(Error::shape(format!(
                "track data of {} values for width {width}, length {length}",
                data.len()
            )));
        }
        Ok(Self { data, width, length })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn column_sum(&self, col: usize) -> f32 {
        (0..N_TRACKS).map(|r| self.get(r, col)).sum()
    }

    pub fn column_is_zero(&self, col: usize) -> bool {
        (0..N_TRACKS).all(|r| self.get(r, col) == 0.0)
    }
}

/// Masking augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rate: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { rate: 0.15, seed: 0 }
    }
}

fn base_row(b: u8) -> Option<usize> {
    match b {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

pub fn encode_six_track(rec: &TranscriptRecord) -> Result<TrackMatrix> {
    let seq = rec.sequence.as_bytes();
    let len = seq.len();
    let mut m = TrackMatrix::zeros(len);
    for (col, &b) in seq.iter().enumerate() {
        match b.to_ascii_uppercase() {
            b'N' => {}
            c => {
                let row = base_row(c).ok_or_else(|| {
                    Error::Validation(format!(
                        "transcript {}: invalid base `{}`",
                        rec.transcript_id, b as char
                    ))
                })?;
                m.set(row, col, 1.0);
            }
        }
    }
    let mut prev = 0;
    for &j in &rec.junctions {
        if j == 0 || j >= len || j <= prev {
            return Err(Error::Validation(format!(
                "transcript {}: junction {j} out of order or range",
                rec.transcript_id
            )));
        }
        prev = j;
        m.set(SPLICE_TRACK, j, 1.0);
    }
    if let Some((start, end)) = rec.cds {
        if start >= end || end > len || (end - start) % 3 != 0 {
            return Err(Error::Validation(format!(
                "transcript {}: invalid CDS ({start},{end})",
                rec.transcript_id
            )));
        }
        for col in (start..end).step_by(3) {
            m.set(CODON_TRACK, col, 1.0);
        }
    }
    Ok(m)
}

/// Zeroes all six tracks at `round(rate * length)` distinct columns drawn
/// uniformly from the sequence region.
pub fn apply_mask<R: Rng + ?Sized>(m: &TrackMatrix, spec: &MaskSpec, rng: &mut R) -> TrackMatrix {
    let mut out = m.clone();
    let rate = spec.rate.clamp(0.0, 1.0);
    let k = ((rate * m.length as f64).round() as usize).min(m.length);
    if k == 0 {
        return out;
    }
    for col in index::sample(rng, m.length, k) {
        for r in 0..N_TRACKS {
            out.set(r, col, 0.0);
        }
    }
    out
}

/// Right-pads with zero columns or keeps the 5'-most `target` columns.
pub fn pad_or_crop(m: &TrackMatrix, target: usize) -> TrackMatrix {
    if target == m.width {
        return m.clone();
    }
    let keep = m.width.min(target);
    let mut data = vec![0.0; N_TRACKS * target];
    for r in 0..N_TRACKS {
        data[r * target..r * target + keep].copy_from_slice(&m.row(r)[..keep]);
    }
    TrackMatrix {
        data,
        width: target,
        length: m.length.min(target),
    }
}
