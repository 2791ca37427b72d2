//! Homology sets: pooled transcripts of splicing isoforms across homologous
//! genes, their difficulty weights, and positive-pair batch sampling.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use petgraph::unionfind::UnionFind;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::GeneAnnotation;
use crate::dataset::TrackStore;
use crate::error::{Error, Result};
use crate::tracks::{apply_mask, pad_or_crop, MaskSpec, TrackMatrix, N_TRACKS};

/// A gene as named in the homology table: (taxon, gene id).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HomologyMember {
    pub taxon: String,
    pub gene_id: String,
}

/// Homology group id -> member genes, in file order.
pub type HomologyMap = BTreeMap<String, Vec<HomologyMember>>;

/// (species, annotation gene id) -> homology-table gene id.
pub type GeneXref = HashMap<(String, String), String>;

/// Parses a homologene.data table (HID, TaxID, GeneID, symbol, protein GI,
/// protein accession).
pub fn parse_homologene<R: BufRead>(reader: R) -> Result<HomologyMap> {
    let mut map = HomologyMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                idx + 1,
                format!("expected 6 tab-separated columns, found {}", cols.len()),
            ));
        }
        map.entry(cols[0].to_string()).or_default().push(HomologyMember {
            taxon: cols[1].to_string(),
            gene_id: cols[2].to_string(),
        });
    }
    Ok(map)
}

/// Parses the gene cross-reference TSV: species, annotation gene id,
/// homology-table gene id.
pub fn parse_gene_xref<R: BufRead>(reader: R) -> Result<GeneXref> {
    let mut xref = GeneXref::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                idx + 1,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        xref.insert((cols[0].to_string(), cols[1].to_string()), cols[2].to_string());
    }
    Ok(xref)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomologySet {
    pub set_id: usize,
    pub gene_ids: Vec<String>,
    pub transcript_ids: Vec<String>,
}

impl HomologySet {
    /// Number of pooled transcripts.
    pub fn t(&self) -> usize {
        self.transcript_ids.len()
    }
}

/// Merges genes into sets: connected components of the "shares a homology
/// group" relation. Genes without a group become singletons.
pub fn build_sets(
    genes: &[GeneAnnotation],
    homology: &HomologyMap,
    xref: Option<&GeneXref>,
) -> Vec<HomologySet> {
    let mut key_to_gene: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, g) in genes.iter().enumerate() {
        let hid = xref
            .and_then(|x| x.get(&(g.species.clone(), g.gene_id.clone())))
            .map(String::as_str)
            .unwrap_or(g.gene_id.as_str());
        key_to_gene.entry((g.species.as_str(), hid)).or_default().push(i);
    }

    let mut uf = UnionFind::<usize>::new(genes.len());
    for members in homology.values() {
        let mut first: Option<usize> = None;
        for m in members {
            let Some(idxs) = key_to_gene.get(&(m.taxon.as_str(), m.gene_id.as_str())) else {
                continue;
            };
            for &gi in idxs {
                match first {
                    None => first = Some(gi),
                    Some(f) => {
                        uf.union(f, gi);
                    }
                }
            }
        }
    }

    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..genes.len() {
        components.entry(uf.find(i)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = components.into_values().collect();
    for g in &mut groups {
        g.sort_by(|&a, &b| {
            (&genes[a].gene_id, &genes[a].species).cmp(&(&genes[b].gene_id, &genes[b].species))
        });
    }
    groups.sort_by(|a, b| {
        let ka = (&genes[a[0]].gene_id, &genes[a[0]].species);
        let kb = (&genes[b[0]].gene_id, &genes[b[0]].species);
        ka.cmp(&kb)
    });

    groups
        .into_iter()
        .enumerate()
        .map(|(set_id, members)| {
            let gene_ids = members.iter().map(|&i| genes[i].gene_id.clone()).collect();
            let mut transcript_ids: Vec<String> = members
                .iter()
                .flat_map(|&i| genes[i].transcripts.iter().map(|t| t.transcript_id.clone()))
                .collect();
            transcript_ids.sort();
            HomologySet {
                set_id,
                gene_ids,
                transcript_ids,
            }
        })
        .collect()
}

/// Per-set positive-term weights, `w_i = ln(t_i + c) * T / sum_k ln(t_k + c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub weights: BTreeMap<usize, f64>,
    pub c: f64,
    pub total_transcripts: usize,
}

impl WeightTable {
    pub fn get(&self, set_id: usize) -> Option<f64> {
        self.weights.get(&set_id).copied()
    }
}

pub fn compute_weights(sets: &[HomologySet], c: f64) -> Result<WeightTable> {
    if sets.is_empty() {
        return Err(Error::Validation("no homology sets to weight".into()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Config(format!("weight constant c must be positive, got {c}")));
    }
    let logs: Vec<f64> = sets.iter().map(|s| (s.t() as f64 + c).ln()).collect();
    if let Some((i, _)) = logs.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
        return Err(Error::Numeric(format!(
            "set {}: ln(t + c) is not positive (t = {}, c = {c})",
            sets[i].set_id,
            sets[i].t()
        )));
    }
    let total: usize = sets.iter().map(HomologySet::t).sum();
    let denom: f64 = logs.iter().sum();
    let scale = total as f64 / denom;
    let weights = sets
        .iter()
        .zip(&logs)
        .map(|(s, l)| (s.set_id, l * scale))
        .collect();
    Ok(WeightTable {
        weights,
        c,
        total_transcripts: total,
    })
}

/// Two independent uniform draws, with replacement, from the pooled
/// transcripts of `set`.
pub fn sample_pair<'a, R: Rng + ?Sized>(set: &'a HomologySet, rng: &mut R) -> Result<(&'a str, &'a str)> {
    let t = set.t();
    if t == 0 {
        return Err(Error::Validation(format!("set {} is empty", set.set_id)));
    }
    let a = rng.gen_range(0..t);
    let b = rng.gen_range(0..t);
    Ok((&set.transcript_ids[a], &set.transcript_ids[b]))
}

/// Shapes and augmentation used when turning sets into model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    /// Fixed column count after padding/cropping.
    pub length: usize,
    pub mask_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub view1: Vec<TrackMatrix>,
    pub view2: Vec<TrackMatrix>,
    pub weights: Vec<f64>,
    pub set_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.set_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set_ids.is_empty()
    }

    /// Row-major `[2N, 6, L]` input: all first views, then all second views.
    pub fn stacked_input(&self) -> (Vec<f32>, [usize; 3]) {
        let width = self.view1.first().map_or(0, TrackMatrix::width);
        let mut data = Vec::with_capacity(2 * self.len() * N_TRACKS * width);
        for m in self.view1.iter().chain(&self.view2) {
            data.extend_from_slice(m.data());
        }
        (data, [2 * self.len(), N_TRACKS, width])
    }
}

fn view<R: Rng + ?Sized>(
    tracks: &TrackStore,
    id: &str,
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<TrackMatrix> {
    let m = tracks
        .get(id)
        .ok_or_else(|| Error::Validation(format!("no track matrix for transcript {id}")))?;
    let spec = MaskSpec {
        rate: cfg.mask_rate,
        seed: 0,
    };
    Ok(apply_mask(&pad_or_crop(m, cfg.length), &spec, rng))
}

/// Builds a batch from the given sets, in order.
pub fn batch_for_sets<R: Rng + ?Sized>(
    sets: &[&HomologySet],
    weights: &WeightTable,
    tracks: &TrackStore,
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<Batch> {
    let mut batch = Batch {
        view1: Vec::with_capacity(sets.len()),
        view2: Vec::with_capacity(sets.len()),
        weights: Vec::with_capacity(sets.len()),
        set_ids: Vec::with_capacity(sets.len()),
    };
    for set in sets {
        if batch.set_ids.contains(&set.set_id) {
            return Err(Error::Validation(format!(
                "set {} appears twice in one batch",
                set.set_id
            )));
        }
        let (a, b) = sample_pair(set, rng)?;
        batch.view1.push(view(tracks, a, cfg, rng)?);
        batch.view2.push(view(tracks, b, cfg, rng)?);
        batch.weights.push(
            weights
                .get(set.set_id)
                .ok_or_else(|| Error::Validation(format!("no weight for set {}", set.set_id)))?,
        );
        batch.set_ids.push(set.set_id);
    }
    Ok(batch)
}

/// Draws `n` distinct sets and builds their batch.
pub fn make_batch<R: Rng + ?Sized>(
    sets: &[HomologySet],
    n: usize,
    weights: &WeightTable,
    tracks: &TrackStore,
    cfg: &BatchConfig,
    rng: &mut R,
) -> Result<Batch> {
    if n > sets.len() {
        return Err(Error::Validation(format!(
            "batch of {n} requested from {} sets",
            sets.len()
        )));
    }
    let chosen: Vec<&HomologySet> = index::sample(rng, sets.len(), n)
        .into_iter()
        .map(|i| &sets[i])
        .collect();
    batch_for_sets(&chosen, weights, tracks, cfg, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::annotation::{Strand, TranscriptAnnotation};

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

    fn set(id: usize, t: usize) -> HomologySet {
        HomologySet {
            set_id: id,
            gene_ids: vec![format!("g{id}")],
            transcript_ids: (0..t).map(|i| format!("s{id}.{i}")).collect(),
        }
    }

    #[test]
    fn homologene_grouping() {
        let text = "3\t9606\t34\tACADM\t4557231\tNP_000007.1\n3\t10090\t11364\tAcadm\t6680618\tNP_031408.1\n";
        let map = parse_homologene(text.as_bytes()).unwrap();
        assert_eq!(
            map["3"],
            vec![
                HomologyMember { taxon: "9606".into(), gene_id: "34".into() },
                HomologyMember { taxon: "10090".into(), gene_id: "11364".into() },
            ]
        );
        assert!(parse_homologene("".as_bytes()).unwrap().is_empty());
        assert!(matches!(
            parse_homologene("3\t9606\t34\tACADM\t4557231\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn singleton_and_pooled_sets() {
        let genes = vec![gene("34", "9606", 3), gene("11364", "10090", 2), gene("99", "9606", 4)];
        let map = parse_homologene(
            "3\t9606\t34\tA\t1\tNP_1\n3\t10090\t11364\tA\t2\tNP_2\n".as_bytes(),
        )
        .unwrap();
        let sets = build_sets(&genes, &map, None);
        assert_eq!(sets.len(), 2);
        let pooled = sets.iter().find(|s| s.gene_ids.len() == 2).unwrap();
        assert_eq!(pooled.t(), 5);
        let single = sets.iter().find(|s| s.gene_ids == vec!["99".to_string()]).unwrap();
        assert_eq!(single.t(), 4);
    }

    #[test]
    fn disjoint_groups_stay_apart() {
        let genes = vec![gene("a", "1", 1), gene("b", "2", 2), gene("c", "1", 1), gene("d", "2", 3)];
        let map = parse_homologene("1\t1\ta\tx\tx\tx\n1\t2\tb\tx\tx\tx\n2\t1\tc\tx\tx\tx\n2\t2\td\tx\tx\tx\n".as_bytes()).unwrap();
        let sets = build_sets(&genes, &map, None);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].gene_ids, vec!["a", "b"]);
        assert_eq!(sets[1].gene_ids, vec!["c", "d"]);
        assert_eq!(sets[0].t() + sets[1].t(), 7);
    }

    #[test]
    fn transitive_merge_through_shared_gene() {
        let genes = vec![gene("a", "1", 1), gene("b", "1", 1), gene("c", "1", 1)];
        let map = parse_homologene("1\t1\ta\tx\tx\tx\n1\t1\tb\tx\tx\tx\n2\t1\tb\tx\tx\tx\n2\t1\tc\tx\tx\tx\n".as_bytes()).unwrap();
        let sets = build_sets(&genes, &map, None);
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].t(), 3);
    }

    #[test]
    fn xref_resolves_annotation_ids() {
        let genes = vec![gene("ENSG1", "9606", 1), gene("ENSMUSG1", "10090", 1)];
        let map = parse_homologene("3\t9606\t34\tA\t1\tNP_1\n3\t10090\t11364\tA\t2\tNP_2\n".as_bytes()).unwrap();
        let xref = parse_gene_xref("9606\tENSG1\t34\n10090\tENSMUSG1\t11364\n".as_bytes()).unwrap();
        assert_eq!(build_sets(&genes, &map, Some(&xref)).len(), 1);
        assert_eq!(build_sets(&genes, &map, None).len(), 2);
    }

    #[test]
    fn weights_hand_example() {
        let w = compute_weights(&[set(0, 3), set(1, 1)], 1.0).unwrap();
        assert!((w.get(0).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!((w.get(1).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(w.total_transcripts, 4);
    }

    #[test]
    fn weights_reject_bad_constant() {
        assert!(compute_weights(&[set(0, 1)], 0.0).is_err());
        assert!(compute_weights(&[set(0, 1)], -0.5).is_err());
        assert!(compute_weights(&[], 1.0).is_err());
    }

    #[test]
    fn pair_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = set(0, 1);
        let (a, b) = sample_pair(&one, &mut rng).unwrap();
        assert_eq!(a, b);
        let two = set(1, 2);
        let p1 = sample_pair(&two, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let p2 = sample_pair(&two, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(p1, p2);
        assert!(sample_pair(&set(2, 0), &mut rng).is_err());
    }

    #[test]
    fn pair_marginals_uniform() {
        let three = set(0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            let (a, _) = sample_pair(&three, &mut rng).unwrap();
            counts[three.transcript_ids.iter().position(|t| t == a).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 30_000.0;
            assert!((0.323..=0.343).contains(&f), "frequency {f}");
        }
    }
}
