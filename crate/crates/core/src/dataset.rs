//! On-disk dataset files.
//!
//! Track file layout (all integers little-endian):
//!
//! ```text
//! magic "TRK6" | u32 version
//! repeated:
//!   u32 len | transcript_id bytes
//!   u32 len | gene_id bytes
//!   u32 L
//!   6 * L bytes, row-major, each 0 or 1
//! ```

use std::collections::HashMap;
use std::io::{BufRead, ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::annotation::TranscriptRecord;
use crate::error::{Error, Result};
use crate::homology::{HomologySet, WeightTable};
use crate::tracks::{TrackMatrix, N_TRACKS};

pub const TRACK_MAGIC: &[u8; 4] = b"TRK6";
pub const TRACK_VERSION: u32 = 1;

/// Transcript id -> encoded (unpadded) track matrix.
pub type TrackStore = HashMap<String, TrackMatrix>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub transcript_id: String,
    pub gene_id: String,
    pub tracks: TrackMatrix,
}

pub struct TrackWriter<W: Write> {
    inner: W,
}

impl<W: Write> TrackWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        inner.write_all(TRACK_MAGIC)?;
        inner.write_all(&TRACK_VERSION.to_le_bytes())?;
        Ok(Self { inner })
    }

    fn write_str(&mut self, s: &str) -> Result<()> {
        let len = u32::try_from(s.len()).map_err(|_| Error::Format("id too long".into()))?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn write(&mut self, transcript_id: &str, gene_id: &str, m: &TrackMatrix) -> Result<()> {
        if m.length() != m.width() {
            return Err(Error::Format(format!(
                "transcript {transcript_id}: padded matrices are not persisted"
            )));
        }
        self.write_str(transcript_id)?;
        self.write_str(gene_id)?;
        let len = u32::try_from(m.width()).map_err(|_| Error::Format("sequence too long".into()))?;
        self.inner.write_all(&len.to_le_bytes())?;
        let mut bytes = Vec::with_capacity(m.data().len());
        for &v in m.data() {
            bytes.push(match v {
                0.0 => 0u8,
                1.0 => 1u8,
                other => {
                    return Err(Error::Format(format!(
                        "transcript {transcript_id}: non-binary track value {other}"
                    )))
                }
            });
        }
        self.inner.write_all(&bytes)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    match r.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format("truncated track record".into()),
        _ => e.into(),
    })?;
    Ok(buf)
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)?.ok_or_else(|| Error::Format("truncated track record".into()))?;
    String::from_utf8(read_exact_or_truncated(r, len as usize)?)
        .map_err(|_| Error::Format("id is not UTF-8".into()))
}

pub fn read_tracks<R: Read>(mut r: R) -> Result<Vec<TrackRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("missing track file header".into()))?;
    if &magic != TRACK_MAGIC {
        return Err(Error::Format("not a track file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?.ok_or_else(|| Error::Format("missing version".into()))?;
    if version != TRACK_VERSION {
        return Err(Error::Format(format!("unsupported track file version {version}")));
    }
    let mut out = Vec::new();
    loop {
        // A clean EOF is only allowed at a record boundary.
        let Some(len) = read_u32(&mut r)? else { break };
        let transcript_id = String::from_utf8(read_exact_or_truncated(&mut r, len as usize)?)
            .map_err(|_| Error::Format("id is not UTF-8".into()))?;
        let gene_id = read_string(&mut r)?;
        let width = read_u32(&mut r)?.ok_or_else(|| Error::Format("truncated track record".into()))? as usize;
        let bytes = read_exact_or_truncated(&mut r, N_TRACKS * width)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::Format(format!("transcript {transcript_id}: non-binary track byte")));
        }
        let data = bytes.into_iter().map(f32::from).collect();
        out.push(TrackRecord {
            transcript_id,
            gene_id,
            tracks: TrackMatrix::from_rows(data, width, width)?,
        });
    }
    Ok(out)
}

pub fn track_store(records: Vec<TrackRecord>) -> Result<TrackStore> {
    let mut store = TrackStore::with_capacity(records.len());
    for r in records {
        if store.insert(r.transcript_id.clone(), r.tracks).is_some() {
            return Err(Error::Validation(format!("duplicate transcript {}", r.transcript_id)));
        }
    }
    Ok(store)
}

pub fn write_records_jsonl<W: Write>(mut w: W, records: &[TranscriptRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(r: R) -> Result<Vec<TranscriptRecord>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, e.to_string()))?);
    }
    Ok(out)
}

/// One line of the set dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetDumpRow {
    pub set_id: usize,
    pub gene_ids: Vec<String>,
    pub transcript_ids: Vec<String>,
    pub t: usize,
    pub w: f64,
}

pub fn write_sets_jsonl<W: Write>(mut w: W, sets: &[HomologySet], weights: &WeightTable) -> Result<()> {
    for s in sets {
        let row = SetDumpRow {
            set_id: s.set_id,
            gene_ids: s.gene_ids.clone(),
            transcript_ids: s.transcript_ids.clone(),
            t: s.t(),
            w: weights
                .get(s.set_id)
                .ok_or_else(|| Error::Validation(format!("no weight for set {}", s.set_id)))?,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a set dump back into sets and a weight table.
///
/// The weight constant is not stored per row; `c` is carried through from
/// the caller's configuration.
pub fn read_sets_jsonl<R: BufRead>(r: R, c: f64) -> Result<(Vec<HomologySet>, WeightTable)> {
    let mut sets = Vec::new();
    let mut weights = WeightTable {
        weights: Default::default(),
        c,
        total_transcripts: 0,
    };
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SetDumpRow =
            serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        if row.t != row.transcript_ids.len() {
            return Err(Error::parse(idx + 1, "t does not match transcript count"));
        }
        weights.total_transcripts += row.t;
        weights.weights.insert(row.set_id, row.w);
        sets.push(HomologySet {
            set_id: row.set_id,
            gene_ids: row.gene_ids,
            transcript_ids: row.transcript_ids,
        });
    }
    Ok((sets, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks::encode_six_track;

    fn rec(id: &str, seq: &str) -> TranscriptRecord {
        TranscriptRecord {
            transcript_id: id.into(),
            gene_id: "g".into(),
            species: "s".into(),
            sequence: seq.into(),
            junctions: vec![2],
            cds: Some((1, 4)),
        }
    }

    #[test]
    fn track_file_round_trip() {
        let recs = [rec("t1", "ACGTN"), rec("t2", "GGGGGGG")];
        let mut w = TrackWriter::new(Vec::new()).unwrap();
        for r in &recs {
            w.write(&r.transcript_id, &r.gene_id, &encode_six_track(r).unwrap()).unwrap();
        }
        let bytes = w.finish().unwrap();
        assert_eq!(&bytes[..4], TRACK_MAGIC);
        // header + 2 * (4+2 + 4+1 + 4) + 6 * (5 + 7)
        assert_eq!(bytes.len(), 8 + 2 * 15 + 6 * 12);
        let back = read_tracks(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].tracks, encode_six_track(&recs[0]).unwrap());
        assert_eq!(back[1].transcript_id, "t2");
    }

    #[test]
    fn truncated_track_file() {
        let mut w = TrackWriter::new(Vec::new()).unwrap();
        w.write("t", "g", &encode_six_track(&rec("t", "ACGT")).unwrap()).unwrap();
        let bytes = w.finish().unwrap();
        assert!(read_tracks(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_tracks(&b"NOPE\x01\0\0\0"[..]).is_err());
    }

    #[test]
    fn records_jsonl_shape() {
        let mut buf = Vec::new();
        write_records_jsonl(&mut buf, &[rec("t1", "ACG")]).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line.trim(),
            r#"{"transcript_id":"t1","gene_id":"g","species":"s","sequence":"ACG","junctions":[2],"cds":[1,4]}"#
        );
        assert_eq!(read_records_jsonl(buf.as_slice()).unwrap()[0], rec("t1", "ACG"));
    }
}
