//! Genome annotation ingest.
//!
//! Parses GTF 2.2 annotations and FASTA genomes, and stitches exons into
//! mature RNA transcripts. Genomic coordinates are 1-based inclusive, mature
//! RNA coordinates are 0-based (CDS spans are half-open).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strand {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Strand {
    pub fn flip(self) -> Self {
        match self {
            Strand::Plus => Strand::Minus,
            Strand::Minus => Strand::Plus,
        }
    }
}

impl fmt::Display for Strand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strand::Plus => f.write_str("+"),
            Strand::Minus => f.write_str("-"),
        }
    }
}

/// One annotated transcript before assembly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptAnnotation {
    pub transcript_id: String,
    pub contig: String,
    pub strand: Strand,
    /// Genomic exon intervals, 1-based inclusive, sorted by start.
    pub exons: Vec<(u64, u64)>,
    /// Genomic extent of the CDS features (min start, max end), if any.
    pub cds_genomic: Option<(u64, u64)>,
}

impl TranscriptAnnotation {
    pub fn mature_len(&self) -> usize {
        self.exons.iter().map(|&(s, e)| (e - s + 1) as usize).sum()
    }

    /// Checks exon ordering, interval sanity and non-overlap.
    pub fn validate(&self) -> Result<()> {
        if self.exons.is_empty() {
            return Err(Error::Validation(format!(
                "transcript {} has no exons",
                self.transcript_id
            )));
        }
        for &(s, e) in &self.exons {
            if s == 0 || s > e {
                return Err(Error::Validation(format!(
                    "transcript {}: invalid exon ({s},{e})",
                    self.transcript_id
                )));
            }
        }
        for pair in self.exons.windows(2) {
            if pair[1].0 <= pair[0].1 {
                return Err(Error::Validation(format!(
                    "transcript {}: overlapping exons ({},{}) and ({},{})",
                    self.transcript_id, pair[0].0, pair[0].1, pair[1].0, pair[1].1
                )));
            }
        }
        Ok(())
    }

    /// Offset of a genomic position from the 5'-most genomic exon base,
    /// counting exonic bases only. `None` if the position is intronic.
    fn plus_offset(&self, pos: u64) -> Option<usize> {
        let mut acc = 0usize;
        for &(s, e) in &self.exons {
            if pos >= s && pos <= e {
                return Some(acc + (pos - s) as usize);
            }
            acc += (e - s + 1) as usize;
        }
        None
    }

    /// Mature-RNA position of a genomic position.
    pub fn to_mature(&self, pos: u64) -> Option<usize> {
        let off = self.plus_offset(pos)?;
        Some(match self.strand {
            Strand::Plus => off,
            Strand::Minus => self.mature_len() - 1 - off,
        })
    }

    /// 0-based positions of the first nucleotide of every exon but the first,
    /// in mature coordinates.
    pub fn junctions(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self.exons.iter().map(|&(s, e)| (e - s + 1) as usize).collect();
        if self.strand == Strand::Minus {
            lens.reverse();
        }
        let mut acc = 0;
        let mut out = Vec::with_capacity(lens.len().saturating_sub(1));
        for len in &lens[..lens.len() - 1] {
            acc += len;
            out.push(acc);
        }
        out
    }

    /// CDS span mapped into mature coordinates as a half-open interval.
    pub fn mature_cds(&self) -> Result<Option<(usize, usize)>> {
        let Some((gs, ge)) = self.cds_genomic else {
            return Ok(None);
        };
        let (a, b) = match (self.to_mature(gs), self.to_mature(ge)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Validation(format!(
                    "transcript {}: CDS ({gs},{ge}) ends outside the exons",
                    self.transcript_id
                )))
            }
        };
        let (lo, hi) = (a.min(b), a.max(b));
        let len = hi - lo + 1;
        if len % 3 != 0 {
            return Err(Error::Validation(format!(
                "transcript {}: CDS length {len} is not a multiple of 3",
                self.transcript_id
            )));
        }
        Ok(Some((lo, hi + 1)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneAnnotation {
    pub gene_id: String,
    pub species: String,
    pub transcripts: Vec<TranscriptAnnotation>,
}

/// An assembled mature RNA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub transcript_id: String,
    pub gene_id: String,
    pub species: String,
    pub sequence: String,
    pub junctions: Vec<usize>,
    pub cds: Option<(usize, usize)>,
}

impl TranscriptRecord {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

#[derive(Default)]
struct TxBuilder {
    contig: String,
    strand: Option<Strand>,
    exons: Vec<(u64, u64)>,
    cds: Option<(u64, u64)>,
    first_line: usize,
}

fn parse_attributes(raw: &str) -> HashMap<&str, &str> {
    let mut out = HashMap::new();
    for field in raw.split(';') {
        let field = field.trim();
        if field.is_empty() {
            continue;
        }
        let (key, value) = match field.split_once(char::is_whitespace) {
            Some((k, v)) => (k, v.trim()),
            None => continue,
        };
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.entry(key).or_insert(value);
    }
    out
}

/// Parses GTF 2.2 text into genes, keeping `exon` and `CDS` features.
///
/// Output is sorted by gene id and transcript id regardless of input order.
pub fn parse_gtf<R: BufRead>(reader: R, species: &str) -> Result<Vec<GeneAnnotation>> {
    // gene_id -> transcript_id -> builder
    let mut genes: BTreeMap<String, BTreeMap<String, TxBuilder>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(Error::parse(
                lineno,
                format!("expected 9 tab-separated columns, found {}", cols.len()),
            ));
        }
        let feature = cols[2];
        if feature != "exon" && feature != "CDS" {
            continue;
        }
        let start: u64 = cols[3]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad start `{}`", cols[3])))?;
        let end: u64 = cols[4]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad end `{}`", cols[4])))?;
        if start == 0 || start > end {
            return Err(Error::Validation(format!(
                "line {lineno}: {feature} with start {start} > end {end}"
            )));
        }
        let strand = match cols[6] {
            "+" => Strand::Plus,
            "-" => Strand::Minus,
            other => return Err(Error::parse(lineno, format!("bad strand `{other}`"))),
        };
        let attrs = parse_attributes(cols[8]);
        let gene_id = attrs
            .get("gene_id")
            .ok_or_else(|| Error::parse(lineno, "missing gene_id attribute"))?;
        let transcript_id = attrs
            .get("transcript_id")
            .ok_or_else(|| Error::parse(lineno, "missing transcript_id attribute"))?;

        let tx = genes
            .entry(gene_id.to_string())
            .or_default()
            .entry(transcript_id.to_string())
            .or_insert_with(|| TxBuilder {
                contig: cols[0].to_string(),
                first_line: lineno,
                ..Default::default()
            });
        if tx.contig != cols[0] || tx.strand.is_some_and(|s| s != strand) {
            return Err(Error::Validation(format!(
                "line {lineno}: transcript {transcript_id} spans several contigs or strands"
            )));
        }
        tx.strand = Some(strand);
        tx.first_line = tx.first_line.min(lineno);
        if feature == "exon" {
            tx.exons.push((start, end));
        } else {
            tx.cds = Some(match tx.cds {
                Some((s, e)) => (s.min(start), e.max(end)),
                None => (start, end),
            });
        }
    }

    let mut out = Vec::with_capacity(genes.len());
    for (gene_id, txs) in genes {
        let mut transcripts = Vec::with_capacity(txs.len());
        for (transcript_id, mut b) in txs {
            if b.exons.is_empty() {
                // CDS-only transcripts carry no exon structure to assemble.
                continue;
            }
            b.exons.sort_unstable();
            let ta = TranscriptAnnotation {
                transcript_id,
                contig: b.contig,
                strand: b.strand.expect("strand set with first feature"),
                exons: b.exons,
                cds_genomic: b.cds,
            };
            ta.validate()?;
            transcripts.push(ta);
        }
        if !transcripts.is_empty() {
            out.push(GeneAnnotation {
                gene_id,
                species: species.to_string(),
                transcripts,
            });
        }
    }
    Ok(out)
}

/// In-memory genome with random access by contig.
#[derive(Debug, Default, Clone)]
pub struct GenomeStore {
    contigs: HashMap<String, Vec<u8>>,
}

fn normalize_base(b: u8) -> Option<u8> {
    match b.to_ascii_uppercase() {
        c @ (b'A' | b'C' | b'G' | b'T' | b'N') => Some(c),
        // IUPAC ambiguity codes carry no single base.
        b'R' | b'Y' | b'K' | b'M' | b'S' | b'W' | b'B' | b'D' | b'H' | b'V' => Some(b'N'),
        _ => None,
    }
}

pub fn load_fasta<R: BufRead>(reader: R) -> Result<GenomeStore> {
    let mut store = GenomeStore::default();
    let mut current: Option<(String, Vec<u8>)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end();
        if let Some(header) = line.strip_prefix('>') {
            if let Some((name, seq)) = current.take() {
                store.insert(name, seq, lineno)?;
            }
            let name = header.split_whitespace().next().unwrap_or("");
            if name.is_empty() {
                return Err(Error::parse(lineno, "empty FASTA header"));
            }
            current = Some((name.to_string(), Vec::new()));
        } else if !line.is_empty() {
            let Some((_, seq)) = current.as_mut() else {
                return Err(Error::parse(lineno, "sequence before first header"));
            };
            for &b in line.as_bytes() {
                let base = normalize_base(b).ok_or_else(|| {
                    Error::parse(lineno, format!("invalid base `{}`", b as char))
                })?;
                seq.push(base);
            }
        }
    }
    if let Some((name, seq)) = current.take() {
        store.insert(name, seq, usize::MAX)?;
    }
    Ok(store)
}

impl GenomeStore {
    fn insert(&mut self, name: String, seq: Vec<u8>, lineno: usize) -> Result<()> {
        if self.contigs.contains_key(&name) {
            return Err(Error::Validation(format!(
                "duplicate contig `{name}` (before line {lineno})"
            )));
        }
        self.contigs.insert(name, seq);
        Ok(())
    }

    /// Merges another genome into this one; contig names must not collide.
    pub fn extend(&mut self, other: GenomeStore) -> Result<()> {
        for (name, seq) in other.contigs {
            self.insert(name, seq, 0)?;
        }
        Ok(())
    }

    pub fn contig_len(&self, contig: &str) -> Option<usize> {
        self.contigs.get(contig).map(Vec::len)
    }

    pub fn contains(&self, contig: &str) -> bool {
        self.contigs.contains_key(contig)
    }

    /// Subsequence for a 1-based inclusive interval.
    pub fn fetch(&self, contig: &str, start: u64, end: u64) -> Result<&[u8]> {
        let seq = self
            .contigs
            .get(contig)
            .ok_or_else(|| Error::UnknownContig(contig.to_string()))?;
        if start == 0 || start > end || end as usize > seq.len() {
            return Err(Error::OutOfRange {
                contig: contig.to_string(),
                start,
                end,
                len: seq.len(),
            });
        }
        Ok(&seq[start as usize - 1..end as usize])
    }
}

pub fn reverse_complement(seq: &[u8]) -> Vec<u8> {
    seq.iter()
        .rev()
        .map(|&b| match b {
            b'A' => b'T',
            b'T' => b'A',
            b'C' => b'G',
            b'G' => b'C',
            _ => b'N',
        })
        .collect()
}

/// Stitches the exons of `ta` into its mature RNA.
pub fn assemble_transcript(
    ta: &TranscriptAnnotation,
    gene_id: &str,
    species: &str,
    genome: &GenomeStore,
) -> Result<TranscriptRecord> {
    ta.validate()?;
    let mut seq = Vec::with_capacity(ta.mature_len());
    for &(s, e) in &ta.exons {
        seq.extend_from_slice(genome.fetch(&ta.contig, s, e)?);
    }
    if ta.strand == Strand::Minus {
        seq = reverse_complement(&seq);
    }
    let cds = ta.mature_cds()?;
    Ok(TranscriptRecord {
        transcript_id: ta.transcript_id.clone(),
        gene_id: gene_id.to_string(),
        species: species.to_string(),
        sequence: String::from_utf8(seq).expect("genome store holds ASCII bases"),
        junctions: ta.junctions(),
        cds,
    })
}

/// Assembles every transcript of every gene, in canonical order.
pub fn assemble_all(genes: &[GeneAnnotation], genome: &GenomeStore) -> Result<Vec<TranscriptRecord>> {
    let mut out = Vec::new();
    for gene in genes {
        for ta in &gene.transcripts {
            out.push(assemble_transcript(ta, &gene.gene_id, &gene.species, genome)?);
        }
    }
    Ok(out)
}

/// Dataset summary in the column layout of the descriptive statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_species: usize,
    pub n_genes: usize,
    pub n_transcripts: usize,
    pub mean_transcripts_per_gene: f64,
    /// Percent of genes with at least two transcripts.
    pub pct_genes_multi: f64,
    /// Percent of genes with more than two transcripts.
    pub pct_genes_gt2: f64,
}

pub fn dataset_stats(genes: &[GeneAnnotation]) -> Result<StatsReport> {
    if genes.is_empty() {
        return Err(Error::Validation(
            "no genes: mean transcripts per gene is undefined".into(),
        ));
    }
    let species: BTreeSet<&str> = genes.iter().map(|g| g.species.as_str()).collect();
    let n_genes = genes.len();
    let n_transcripts: usize = genes.iter().map(|g| g.transcripts.len()).sum();
    let multi = genes.iter().filter(|g| g.transcripts.len() >= 2).count();
    let gt2 = genes.iter().filter(|g| g.transcripts.len() > 2).count();
    Ok(StatsReport {
        n_species: species.len(),
        n_genes,
        n_transcripts,
        mean_transcripts_per_gene: n_transcripts as f64 / n_genes as f64,
        pct_genes_multi: 100.0 * multi as f64 / n_genes as f64,
        pct_genes_gt2: 100.0 * gt2 as f64 / n_genes as f64,
    })
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl StatsReport {
    pub const TSV_HEADER: &'static str =
        "n_species\tn_genes\tn_transcripts\tmean_transcripts_per_gene\tpct_genes_gt2\tpct_genes_multi";

    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.2}\t{:.1}\t{:.1}",
            self.n_species,
            self.n_genes,
            self.n_transcripts,
            self.mean_transcripts_per_gene,
            self.pct_genes_gt2,
            self.pct_genes_multi
        )
    }

    /// Header plus one row, newline-terminated.
    pub fn to_tsv(&self) -> String {
        format!("{}\n{}\n", Self::TSV_HEADER, self.to_tsv_row())
    }

    /// Human-readable row: thousands separators, one-decimal mean, whole
    /// percent of genes with more than two transcripts.
    pub fn render_table_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.1}\t{:.0}%",
            self.n_species,
            thousands(self.n_genes),
            thousands(self.n_transcripts),
            self.mean_transcripts_per_gene,
            self.pct_genes_gt2
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gtf(lines: &[&str]) -> String {
        lines.join("\n")
    }

    #[test]
    fn single_exon_line() {
        let text = "chr1\tTEST\texon\t1\t3\t.\t+\t.\tgene_id \"g1\"; transcript_id \"t1\";";
        let genes = parse_gtf(text.as_bytes(), "9606").unwrap();
        assert_eq!(genes.len(), 1);
        assert_eq!(genes[0].gene_id, "g1");
        assert_eq!(genes[0].transcripts.len(), 1);
        assert_eq!(genes[0].transcripts[0].transcript_id, "t1");
        assert_eq!(genes[0].transcripts[0].exons, vec![(1, 3)]);
    }

    #[test]
    fn empty_and_comments() {
        assert!(parse_gtf("".as_bytes(), "x").unwrap().is_empty());
        assert!(parse_gtf("#!genome-build test\n# nothing\n".as_bytes(), "x")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn wrong_column_count_names_line() {
        let text = gtf(&[
            "# header",
            "chr1\tTEST\texon\t1\t3\t.\t+\tgene_id \"g1\"; transcript_id \"t1\";",
        ]);
        match parse_gtf(text.as_bytes(), "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unquoted_attributes_and_unknown_features() {
        let text = gtf(&[
            "chr1\tX\tgene\t1\t100\t.\t+\t.\tgene_id g1;",
            "chr1\tX\texon\t10\t20\t.\t+\t.\tgene_id g1; transcript_id t1; gene_name FOO;",
            "chr1\tX\tstart_codon\t10\t12\t.\t+\t.\tgene_id g1; transcript_id t1;",
        ]);
        let genes = parse_gtf(text.as_bytes(), "x").unwrap();
        assert_eq!(genes[0].transcripts[0].exons, vec![(10, 20)]);
        assert_eq!(genes[0].transcripts[0].cds_genomic, None);
    }

    #[test]
    fn inverted_exon_is_validation_error() {
        let text = "chr1\tX\texon\t5\t3\t.\t+\t.\tgene_id \"g\"; transcript_id \"t\";";
        assert!(matches!(
            parse_gtf(text.as_bytes(), "x"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn overlapping_exons_rejected() {
        let text = gtf(&[
            "chr1\tX\texon\t1\t10\t.\t+\t.\tgene_id \"g\"; transcript_id \"t\";",
            "chr1\tX\texon\t8\t20\t.\t+\t.\tgene_id \"g\"; transcript_id \"t\";",
        ]);
        assert!(matches!(
            parse_gtf(text.as_bytes(), "x"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn fasta_fetch() {
        let g = load_fasta(">c1 description\nAC\ngt\n".as_bytes()).unwrap();
        assert_eq!(g.fetch("c1", 2, 3).unwrap(), b"CG");
        assert_eq!(g.fetch("c1", 1, 4).unwrap(), b"ACGT");
        assert!(matches!(g.fetch("c2", 1, 1), Err(Error::UnknownContig(_))));
        assert!(matches!(g.fetch("c1", 3, 5), Err(Error::OutOfRange { .. })));
        assert_eq!(g.contig_len("c1"), Some(4));
    }

    #[test]
    fn fasta_duplicate_contig() {
        assert!(load_fasta(">a\nA\n>a\nC\n".as_bytes()).is_err());
    }

    #[test]
    fn fasta_bad_base() {
        assert!(matches!(
            load_fasta(">a\nAC*T\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    fn ta(strand: Strand, exons: &[(u64, u64)], cds: Option<(u64, u64)>) -> TranscriptAnnotation {
        TranscriptAnnotation {
            transcript_id: "t".into(),
            contig: "c1".into(),
            strand,
            exons: exons.to_vec(),
            cds_genomic: cds,
        }
    }

    #[test]
    fn assemble_plus_two_exons() {
        let g = load_fasta(">c1\nAAACCCGGGTTT\n".as_bytes()).unwrap();
        let rec = assemble_transcript(&ta(Strand::Plus, &[(1, 3), (7, 9)], None), "g", "s", &g).unwrap();
        assert_eq!(rec.sequence, "AAAGGG");
        assert_eq!(rec.junctions, vec![3]);
    }

    #[test]
    fn assemble_minus_single_exon() {
        let g = load_fasta(">c1\nATGC\n".as_bytes()).unwrap();
        let rec = assemble_transcript(&ta(Strand::Minus, &[(1, 4)], None), "g", "s", &g).unwrap();
        assert_eq!(rec.sequence, "GCAT");
        assert!(rec.junctions.is_empty());
    }

    #[test]
    fn assemble_single_exon_identity() {
        let g = load_fasta(">c1\nACGTACGTAC\n".as_bytes()).unwrap();
        let rec = assemble_transcript(&ta(Strand::Plus, &[(3, 8)], None), "g", "s", &g).unwrap();
        assert_eq!(rec.sequence.as_bytes(), g.fetch("c1", 3, 8).unwrap());
        assert!(rec.junctions.is_empty());
    }

    #[test]
    fn minus_strand_junctions_and_cds() {
        // exons (1,3) (7,12) on minus: mature = rc(c1[7..12]) + rc(c1[1..3])
        let g = load_fasta(">c1\nAAACCCGGGTTT\n".as_bytes()).unwrap();
        let t = ta(Strand::Minus, &[(1, 3), (7, 12)], Some((2, 10)));
        let rec = assemble_transcript(&t, "g", "s", &g).unwrap();
        assert_eq!(rec.sequence, "AAACCCTTT");
        assert_eq!(rec.junctions, vec![6]);
        // genomic 10 -> mature 2, genomic 2 -> mature 7
        assert_eq!(rec.cds, Some((2, 8)));
    }

    #[test]
    fn exon_outside_contig() {
        let g = load_fasta(">c1\nACGT\n".as_bytes()).unwrap();
        assert!(matches!(
            assemble_transcript(&ta(Strand::Plus, &[(2, 9)], None), "g", "s", &g),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn cds_not_multiple_of_three() {
        let g = load_fasta(">c1\nACGTACGT\n".as_bytes()).unwrap();
        assert!(matches!(
            assemble_transcript(&ta(Strand::Plus, &[(1, 8)], Some((1, 4))), "g", "s", &g),
            Err(Error::Validation(_))
        ));
    }

    fn gene(id: &str, species: &str, n: usize) -> GeneAnnotation {
        GeneAnnotation {
            gene_id: id.into(),
            species: species.into(),
            transcripts: (0..n)
                .map(|i| TranscriptAnnotation {
                    transcript_id: format!("{id}.{i}"),
                    contig: "c".into(),
                    strand: Strand::Plus,
                    exons: vec![(1, 1)],
                    cds_genomic: None,
                })
                .collect(),
        }
    }

    #[test]
    fn stats_hand_counts() {
        let genes = vec![gene("a", "h", 3), gene("b", "h", 1), gene("c", "h", 2)];
        let s = dataset_stats(&genes).unwrap();
        assert_eq!((s.n_species, s.n_genes, s.n_transcripts), (1, 3, 6));
        assert_eq!(s.mean_transcripts_per_gene, 2.0);
        assert!((s.pct_genes_multi - 200.0 / 3.0).abs() < 1e-12);
        assert!((s.pct_genes_gt2 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.to_tsv_row(), "1\t3\t6\t2.00\t33.3\t66.7");
    }

    #[test]
    fn stats_single_isoform_genes() {
        let genes = vec![gene("a", "h", 1), gene("b", "m", 1)];
        let s = dataset_stats(&genes).unwrap();
        assert_eq!(s.mean_transcripts_per_gene, 1.0);
        assert_eq!(s.pct_genes_multi, 0.0);
        assert_eq!(s.n_species, 2);
    }

    #[test]
    fn stats_empty_is_error() {
        assert!(dataset_stats(&[]).is_err());
    }

    #[test]
    fn table_row_rendering() {
        let s = StatsReport {
            n_species: 10,
            n_genes: 228_800,
            n_transcripts: 926_628,
            mean_transcripts_per_gene: 926_628.0 / 228_800.0,
            pct_genes_multi: 40.0,
            pct_genes_gt2: 29.0,
        };
        assert_eq!(s.render_table_row(), "10\t228,800\t926,628\t4.0\t29%");
    }
}
