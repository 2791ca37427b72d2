//! Synthetic homology sets with a planted motif, for end-to-end checks.
//!
//! One motif is shared by the whole corpus. Each set plants 1 to
//! `max_copies` copies of it at random non-overlapping positions of a random
//! background; the set's isoforms keep the motif copies in place and permute
//! the background bases around them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::annotation::TranscriptRecord;
use crate::dataset::TrackStore;
use crate::error::{Error, Result};
use crate::homology::{compute_weights, HomologySet, WeightTable};
use crate::tracks::encode_six_track;

const BASES: [u8; 4] = *b"ACGT";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_sets: usize,
    pub length: usize,
    pub motif_len: usize,
    pub min_isoforms: usize,
    pub max_isoforms: usize,
    pub max_copies: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_sets: 64,
            length: 256,
            motif_len: 12,
            min_isoforms: 2,
            max_isoforms: 4,
            max_copies: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub motif: Vec<u8>,
    pub sets: Vec<HomologySet>,
    pub records: Vec<TranscriptRecord>,
    /// Planted copies per set, indexed like `sets`.
    pub copies: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn tracks(&self) -> Result<TrackStore> {
        self.records
            .iter()
            .map(|r| Ok((r.transcript_id.clone(), encode_six_track(r)?)))
            .collect()
    }

    pub fn weights(&self) -> Result<WeightTable> {
        compute_weights(&self.sets, 1.0)
    }
}

pub fn random_motif<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<u8> {
    (0..len).map(|_| BASES[rng.gen_range(0..4)]).collect()
}

/// `k` non-overlapping start positions for a motif of length `m` in a
/// sequence of length `len`.
fn motif_starts<R: Rng + ?Sized>(k: usize, m: usize, len: usize, rng: &mut R) -> Vec<usize> {
    // place k blocks into len - k*m free slots: choose k gap boundaries
    let free = len - k * m;
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    cuts.iter().enumerate().map(|(i, &c)| c + i * m).collect()
}

pub fn generate<R: Rng + ?Sized>(cfg: &SyntheticConfig, motif: &[u8], prefix: &str, rng: &mut R) -> Result<SyntheticCorpus> {
    if motif.len() != cfg.motif_len
        || cfg.max_copies == 0
        || cfg.max_copies * cfg.motif_len > cfg.length
        || cfg.min_isoforms == 0
        || cfg.min_isoforms > cfg.max_isoforms
    {
        return Err(Error::Config("inconsistent synthetic corpus settings".into()));
    }
    let mut sets = Vec::with_capacity(cfg.n_sets);
    let mut records = Vec::new();
    let mut copies = Vec::with_capacity(cfg.n_sets);
    for s in 0..cfg.n_sets {
        let k = rng.gen_range(1..=cfg.max_copies);
        let starts = motif_starts(k, cfg.motif_len, cfg.length, rng);
        let mut in_motif = vec![false; cfg.length];
        for &st in &starts {
            in_motif[st..st + cfg.motif_len].iter_mut().for_each(|v| *v = true);
        }
        let background: Vec<u8> = (0..cfg.length - k * cfg.motif_len)
            .map(|_| BASES[rng.gen_range(0..4)])
            .collect();
        let n_iso = rng.gen_range(cfg.min_isoforms..=cfg.max_isoforms);
        let gene_id = format!("{prefix}gene{s}");
        let mut transcript_ids = Vec::with_capacity(n_iso);
        for iso in 0..n_iso {
            let mut bg = background.clone();
            if iso > 0 {
                bg.shuffle(rng);
            }
            let mut bg_iter = bg.into_iter();
            let mut seq = Vec::with_capacity(cfg.length);
            let mut pos = 0;
            while pos < cfg.length {
                if let Some(&st) = starts.iter().find(|&&st| st == pos) {
                    seq.extend_from_slice(motif);
                    pos = st + cfg.motif_len;
                } else {
                    seq.push(bg_iter.next().expect("background covers the gaps"));
                    pos += 1;
                }
            }
            let transcript_id = format!("{gene_id}.{iso}");
            transcript_ids.push(transcript_id.clone());
            records.push(TranscriptRecord {
                transcript_id,
                gene_id: gene_id.clone(),
                species: "synthetic".into(),
                sequence: String::from_utf8(seq).expect("ASCII bases"),
                junctions: Vec::new(),
                cds: None,
            });
        }
        debug_assert!(in_motif.iter().filter(|&&v| v).count() == k * cfg.motif_len);
        sets.push(HomologySet {
            set_id: s,
            gene_ids: vec![gene_id],
            transcript_ids,
        });
        copies.push(k);
    }
    Ok(SyntheticCorpus {
        motif: motif.to_vec(),
        sets,
        records,
        copies,
    })
}

/// Non-overlapping occurrences of `motif` in `seq`, scanning left to right.
pub fn count_occurrences(seq: &[u8], motif: &[u8]) -> usize {
    let mut n = 0;
    let mut i = 0;
    while i + motif.len() <= seq.len() {
        if &seq[i..i + motif.len()] == motif {
            n += 1;
            i += motif.len();
        } else {
            i += 1;
        }
    }
    n
}
