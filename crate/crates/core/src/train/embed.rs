use std::io::Write;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::homology::HomologySet;
use crate::dataset::TrackStore;
use crate::model::{embed, embed_and_project, ModelParams};
use crate::tracks::{pad_or_crop, TrackMatrix, N_TRACKS};

fn stack(chunk: &[&TrackMatrix], length: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(chunk.len() * N_TRACKS * length);
    for m in chunk {
        data.extend_from_slice(pad_or_crop(m, length).data());
    }
    Tensor::new(&[chunk.len(), N_TRACKS, length], data)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}

/// Eval-mode mean-pooled embeddings, one row per matrix, in input order.
/// Inputs are padded or cropped to `length`.
pub fn embed_tracks(
    params: &ModelParams<f32>,
    tracks: &[&TrackMatrix],
    length: usize,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(tracks.len());
    for chunk in tracks.chunks(batch_size.max(1)) {
        out.extend(rows(&embed(params, stack(chunk, length)?)?));
    }
    Ok(out)
}

/// Eval-mode embeddings and normalized projections.
pub fn embed_and_project_tracks(
    params: &ModelParams<f32>,
    tracks: &[&TrackMatrix],
    length: usize,
    batch_size: usize,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let (mut hs, mut zs) = (Vec::new(), Vec::new());
    for chunk in tracks.chunks(batch_size.max(1)) {
        let (h, z) = embed_and_project(params, stack(chunk, length)?)?;
        hs.extend(rows(&h));
        zs.extend(rows(&z));
    }
    Ok((hs, zs))
}

/// Embedding table as TSV: `transcript_id` then one column per channel.
pub fn write_embeddings<W: Write>(mut w: W, ids: &[String], rows: &[Vec<f32>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    write!(w, "transcript_id")?;
    for j in 0..dim {
        write!(w, "\th{j}")?;
    }
    writeln!(w)?;
    for (id, row) in ids.iter().zip(rows) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_embeddings<R: std::io::BufRead>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut ids = Vec::new();
    let mut out = Vec::new();
    let mut width = None;
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if idx == 0 && line.starts_with("transcript_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|_| Error::parse(idx + 1, format!("bad number `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
            return Err(Error::parse(idx + 1, "inconsistent embedding width"));
        }
        ids.push(id);
        out.push(row);
    }
    Ok((ids, out))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSummary {
    /// Mean over pairs of distinct transcripts in the same set.
    pub within: f64,
    /// Mean over pairs of transcripts from different sets.
    pub between: f64,
}

impl CosineSummary {
    pub fn gap(&self) -> f64 {
        self.within - self.between
    }
}

/// Mean cosine similarity of vectors within versus between groups.
pub fn cosine_summary(vectors: &[Vec<f32>], group: &[usize]) -> Result<CosineSummary> {
    let (mut w_sum, mut w_n, mut b_sum, mut b_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j]);
            if group[i] == group[j] {
                w_sum += c;
                w_n += 1;
            } else {
                b_sum += c;
                b_n += 1;
            }
        }
    }
    if w_n == 0 || b_n == 0 {
        return Err(Error::Validation("need within-group and between-group pairs".into()));
    }
    Ok(CosineSummary {
        within: w_sum / w_n as f64,
        between: b_sum / b_n as f64,
    })
}

/// Within- versus between-set cosine of eval-mode projections, over every
/// transcript of every set (unmasked).
pub fn set_cosines(
    params: &ModelParams<f32>,
    sets: &[HomologySet],
    tracks: &TrackStore,
    length: usize,
) -> Result<CosineSummary> {
    let mut mats = Vec::new();
    let mut group = Vec::new();
    for s in sets {
        for id in &s.transcript_ids {
            mats.push(
                tracks
                    .get(id)
                    .ok_or_else(|| Error::Validation(format!("no track matrix for transcript {id}")))?,
            );
            group.push(s.set_id);
        }
    }
    let (_, z) = embed_and_project_tracks(params, &mats, length, 64)?;
    cosine_summary(&z, &group)
}
