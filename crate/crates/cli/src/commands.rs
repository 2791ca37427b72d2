use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use isoclr::annotation::{assemble_transcript, dataset_stats, load_fasta, parse_gtf, GeneAnnotation, GenomeStore};
use isoclr::checkpoint::{blob_path, Checkpoint};
use isoclr::dataset::{read_sets_jsonl, read_tracks, track_store, write_records_jsonl, write_sets_jsonl, TrackWriter};
use isoclr::homology::{build_sets, compute_weights, parse_gene_xref, parse_homologene, HomologyMap};
use isoclr::loss::LossConfig;
use isoclr::model::{init_params, ModelConfig, ModelParams, Preset};
use isoclr::tracks::{encode_six_track, TrackMatrix};
use isoclr::train::embed::{embed_tracks, read_embeddings, write_embeddings};
use isoclr::train::finetune::predict;
use isoclr::train::probe::{
    linear_probe, mse, multilabel_probe, pearson, split_indices, write_probe_report, zscore_by, LogisticConfig,
    ProbeReport,
};
use isoclr::train::{finetune as run_finetune, train_contrastive, write_trace, FinetuneConfig, TrainConfig};

use crate::config::{species_path, Settings};
use crate::error::{CliError, Context};
use crate::run::{open_text, Run};

const DEFAULT_C: f64 = 1.0;

fn species_inputs(specs: &[String], key: &str) -> Result<Vec<(String, PathBuf)>, CliError> {
    if specs.is_empty() {
        return Err(CliError::Config(format!("missing required setting `{key}`")));
    }
    specs
        .iter()
        .map(|s| {
            let (species, path) = species_path(s);
            if species.is_empty() {
                return Err(CliError::Config(format!("cannot infer a species from `{s}`")));
            }
            Ok((species, path))
        })
        .collect()
}

/// Parses every GTF, sorted by (species, gene id) so flag order does not
/// matter.
fn load_genes(s: &Settings) -> Result<(Vec<GeneAnnotation>, Vec<PathBuf>), CliError> {
    let mut genes = Vec::new();
    let mut paths = Vec::new();
    for (species, path) in species_inputs(&s.gtf, "gtf")? {
        genes.extend(parse_gtf(open_text(&path)?, &species).at(path.display())?);
        paths.push(path);
    }
    genes.sort_by(|a, b| (&a.species, &a.gene_id).cmp(&(&b.species, &b.gene_id)));
    Ok((genes, paths))
}

fn load_genomes(s: &Settings) -> Result<(BTreeMap<String, GenomeStore>, Vec<PathBuf>), CliError> {
    let mut genomes: BTreeMap<String, GenomeStore> = BTreeMap::new();
    let mut paths = Vec::new();
    for (species, path) in species_inputs(&s.fasta, "fasta")? {
        let store = load_fasta(open_text(&path)?).at(path.display())?;
        genomes.entry(species).or_default().extend(store).at(path.display())?;
        paths.push(path);
    }
    Ok((genomes, paths))
}

pub fn build_dataset(s: &Settings, seed: u64) -> Result<PathBuf, CliError> {
    let (mut genes, mut inputs) = load_genes(s)?;
    let (genomes, fasta_paths) = load_genomes(s)?;
    inputs.extend(fasta_paths);
    let homology = match &s.homology {
        Some(p) => {
            inputs.push(p.clone());
            parse_homologene(open_text(p)?).at(p.display())?
        }
        None => HomologyMap::new(),
    };
    let xref = match &s.xref {
        Some(p) => {
            inputs.push(p.clone());
            Some(parse_gene_xref(open_text(p)?).at(p.display())?)
        }
        None => None,
    };
    let mut run = Run::start("build-dataset", s, seed, &inputs)?;

    let drop_invalid = s.drop_invalid_cds.unwrap_or(false);
    let mut records = Vec::new();
    let mut dropped = 0usize;
    for gene in &mut genes {
        let genome = genomes
            .get(&gene.species)
            .ok_or_else(|| CliError::Config(format!("no FASTA given for species `{}`", gene.species)))?;
        for ta in &mut gene.transcripts {
            if drop_invalid && ta.cds_genomic.is_some() && ta.mature_cds().is_err() {
                ta.cds_genomic = None;
                dropped += 1;
            }
            let ctx = format!("transcript {} ({})", ta.transcript_id, gene.species);
            records.push(assemble_transcript(ta, &gene.gene_id, &gene.species, genome).at(ctx)?);
        }
    }
    if dropped > 0 {
        eprintln!("dropped {dropped} invalid CDS annotation(s)");
    }

    let mut buf = Vec::new();
    write_records_jsonl(&mut buf, &records)?;
    run.write_output("records.jsonl", &buf)?;

    let mut writer = TrackWriter::new(Vec::new())?;
    for r in &records {
        writer.write(&r.transcript_id, &r.gene_id, &encode_six_track(r).at(&r.transcript_id)?)?;
    }
    run.write_output("tracks.bin", &writer.finish()?)?;

    let sets = build_sets(&genes, &homology, xref.as_ref());
    let weights = compute_weights(&sets, s.c.unwrap_or(DEFAULT_C))?;
    let mut buf = Vec::new();
    write_sets_jsonl(&mut buf, &sets, &weights)?;
    run.write_output("sets.jsonl", &buf)?;

    let stats = dataset_stats(&genes)?;
    run.write_output("stats.tsv", stats.to_tsv().as_bytes())?;
    run.finish()
}

pub fn stats(s: &Settings, seed: u64) -> Result<PathBuf, CliError> {
    let (genes, inputs) = load_genes(s)?;
    let mut run = Run::start("stats", s, seed, &inputs)?;
    let tsv = dataset_stats(&genes)?.to_tsv();
    run.write_output("stats.tsv", tsv.as_bytes())?;
    print!("{tsv}");
    run.finish()
}

fn dataset_file(s: &Settings, name: &str) -> Result<PathBuf, CliError> {
    Ok(Settings::require(&s.dataset, "dataset")?.join(name))
}

fn load_track_store(path: &Path) -> Result<(Vec<String>, HashMap<String, TrackMatrix>), CliError> {
    let records = read_tracks(open_text(path)?).at(path.display())?;
    let ids = records.iter().map(|r| r.transcript_id.clone()).collect();
    Ok((ids, track_store(records).at(path.display())?))
}

fn load_checkpoint(path: &Path, preset: Option<Preset>) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(path).at(path.display())?;
    if let Some(p) = preset {
        if ckpt.params.config.encoder != ModelConfig::preset(p).encoder {
            return Err(CliError::Config(format!(
                "checkpoint {} does not hold a preset {p:?} encoder",
                path.display()
            )));
        }
    }
    Ok(ckpt)
}

fn checkpoint_inputs(path: &Path) -> [PathBuf; 2] {
    [path.to_path_buf(), blob_path(path)]
}

pub fn train(s: &Settings, seed: u64) -> Result<PathBuf, CliError> {
    let tracks_path = dataset_file(s, "tracks.bin")?;
    let sets_path = dataset_file(s, "sets.jsonl")?;
    let mut run = Run::start("train", s, seed, &[tracks_path.clone(), sets_path.clone()])?;
    let (_, tracks) = load_track_store(&tracks_path)?;
    let (sets, weights) = read_sets_jsonl(open_text(&sets_path)?, s.c.unwrap_or(DEFAULT_C)).at(sets_path.display())?;

    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        preset: s.preset.unwrap_or(defaults.preset),
        model: None,
        batch_size: s.batch.unwrap_or(defaults.batch_size),
        epochs: s.epochs.unwrap_or(defaults.epochs),
        steps: s.steps,
        weight_decay: s.weight_decay.unwrap_or(defaults.weight_decay),
        warmup_steps: s.warmup.unwrap_or(defaults.warmup_steps),
        max_lr: s.lr.unwrap_or(defaults.max_lr),
        seed,
        length: s.length.unwrap_or(defaults.length),
        mask_rate: s.mask_rate.unwrap_or(defaults.mask_rate),
        loss: LossConfig {
            temperature: s.temperature.unwrap_or(defaults.loss.temperature),
            ..defaults.loss
        },
    };
    let total = cfg.total_steps(sets.len());
    let outcome = train_contrastive(&sets, &weights, &tracks, &cfg, |row| {
        if (row.step + 1) % 50 == 0 || row.step + 1 == total {
            eprintln!("step {}/{total} loss {:.4}", row.step + 1, row.total);
        }
    })?;

    let ckpt = run.path("checkpoint.json");
    outcome.checkpoint.save(&ckpt)?;
    run.record_output(&ckpt)?;
    run.record_output(&blob_path(&ckpt))?;
    let mut buf = Vec::new();
    write_trace(&mut buf, &outcome.trace)?;
    run.write_output("trace.csv", &buf)?;
    run.finish()
}

pub fn embed(s: &Settings, seed: u64) -> Result<PathBuf, CliError> {
    let ckpt_path = Settings::require(&s.checkpoint, "checkpoint")?.clone();
    let tracks_path = dataset_file(s, "tracks.bin")?;
    let mut inputs = checkpoint_inputs(&ckpt_path).to_vec();
    inputs.push(tracks_path.clone());
    let mut run = Run::start("embed", s, seed, &inputs)?;
    let ckpt = load_checkpoint(&ckpt_path, s.preset)?;
    let (ids, store) = load_track_store(&tracks_path)?;
    let mats: Vec<&TrackMatrix> = ids.iter().map(|id| &store[id]).collect();
    let rows = embed_tracks(&ckpt.params, &mats, s.length.unwrap_or(256), s.batch.unwrap_or(32))?;
    let mut buf = Vec::new();
    write_embeddings(&mut buf, &ids, &rows)?;
    run.write_output("embeddings.tsv", &buf)?;
    run.finish()
}

/// `transcript_id` followed by one or more value columns. A first line
/// whose values do not parse as numbers is taken as a header.
fn read_labels(path: &Path) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        let values: Result<Vec<f64>, _> = cols.map(|c| c.trim().parse::<f64>()).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if idx == 0 => continue,
            Err(_) => {
                return Err(CliError::At {
                    context: path.display().to_string(),
                    source: isoclr::Error::Parse {
                        line: idx + 1,
                        msg: "label is not a number".into(),
                    },
                })
            }
        };
        let w = *width.get_or_insert(values.len());
        if values.is_empty() || values.len() != w {
            return Err(CliError::At {
                context: path.display().to_string(),
                source: isoclr::Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {w} label column(s), found {}", values.len()),
                },
            });
        }
        out.push((id, values));
    }
    Ok(out)
}

/// Label rows whose transcript appears in `known`, in label-file order.
fn join_labels<'a>(
    labels: &'a [(String, Vec<f64>)],
    known: &HashMap<&str, usize>,
) -> Result<Vec<(usize, &'a [f64])>, CliError> {
    let joined: Vec<(usize, &[f64])> = labels
        .iter()
        .filter_map(|(id, v)| known.get(id.as_str()).map(|&i| (i, v.as_slice())))
        .collect();
    if joined.len() < labels.len() {
        eprintln!("{} label row(s) have no matching transcript", labels.len() - joined.len());
    }
    if joined.len() < 3 {
        return Err(CliError::Core(isoclr::Error::Validation(format!(
            "only {} labelled transcript(s) after joining; need at least 3",
            joined.len()
        ))));
    }
    Ok(joined)
}

pub fn probe(s: &Settings, seed: u64) -> Result<PathBuf, CliError> {
    let emb_path = Settings::require(&s.embeddings, "embeddings")?.clone();
    let labels_path = Settings::require(&s.labels, "labels")?.clone();
    let mut run = Run::start("probe", s, seed, &[emb_path.clone(), labels_path.clone()])?;
    let (ids, rows) = read_embeddings(open_text(&emb_path)?).at(emb_path.display())?;
    let labels = read_labels(&labels_path)?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let joined = join_labels(&labels, &index)?;
    let x: Vec<Vec<f64>> = joined.iter().map(|(i, _)| rows[*i].clone()).collect();

    if s.multilabel.unwrap_or(false) {
        let y = joined
            .iter()
            .map(|(_, v)| {
                v.iter()
                    .map(|&b| match b {
                        0.0 => Ok(false),
                        1.0 => Ok(true),
                        _ => Err(CliError::Core(isoclr::Error::Validation(format!(
                            "multilabel value {b} is not 0 or 1"
                        )))),
                    })
                    .collect::<Result<Vec<bool>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report = multilabel_probe(&x, &y, seed, &LogisticConfig::default())?;
        let tsv = report.to_tsv();
        run.write_output("multilabel.tsv", tsv.as_bytes())?;
        print!("{tsv}");
    } else {
        if joined[0].1.len() != 1 {
            return Err(CliError::Core(isoclr::Error::Validation(format!(
                "regression labels need exactly one value column, found {} (use --multilabel)",
                joined[0].1.len()
            ))));
        }
        let y: Vec<f64> = joined.iter().map(|(_, v)| v[0]).collect();
        let report = linear_probe(&x, &y, seed)?;
        let task = s.task.as_deref().unwrap_or("task");
        let mut buf = Vec::new();
        write_probe_report(&mut buf, &[(task, &report)])?;
        run.write_output("probe.tsv", &buf)?;
        print!("{}", String::from_utf8_lossy(&buf));
    }
    run.finish()
}

pub fn finetune(s: &Settings, seed: u64) -> Result<PathBuf, CliError> {
    let tracks_path = dataset_file(s, "tracks.bin")?;
    let labels_path = Settings::require(&s.labels, "labels")?.clone();
    let mut inputs = vec![tracks_path.clone(), labels_path.clone()];
    if let Some(c) = &s.checkpoint {
        inputs.extend(checkpoint_inputs(c));
    }
    let mut run = Run::start("finetune", s, seed, &inputs)?;

    let pretrained: ModelParams<f32> = match &s.checkpoint {
        Some(c) => load_checkpoint(c, s.preset)?.params,
        // no checkpoint: a supervised model from random initialization
        None => init_params(&ModelConfig::preset(s.preset.unwrap_or(Preset::S)), seed)?,
    };
    let (ids, store) = load_track_store(&tracks_path)?;
    let labels = read_labels(&labels_path)?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let joined = join_labels(&labels, &index)?;
    if joined[0].1.len() != 1 {
        return Err(CliError::Core(isoclr::Error::Validation(
            "fine-tuning needs exactly one label column".into(),
        )));
    }
    let mats: Vec<&TrackMatrix> = joined.iter().map(|(i, _)| &store[&ids[*i]]).collect();
    let raw: Vec<f64> = joined.iter().map(|(_, v)| v[0]).collect();

    let split = split_indices(mats.len(), seed);
    let y = zscore_by(&raw, &split.train)?;
    let defaults = FinetuneConfig::default();
    let cfg = FinetuneConfig {
        epochs: s.epochs.unwrap_or(defaults.epochs),
        batch_size: s.batch.unwrap_or(defaults.batch_size),
        lr: s.lr.unwrap_or(defaults.lr),
        lr_decay: defaults.lr_decay,
        head_weight_decay: s.weight_decay.unwrap_or(defaults.head_weight_decay),
        seed,
        length: s.length.unwrap_or(defaults.length),
        preset: s.preset,
    };
    let pick = |idx: &[usize]| -> (Vec<&TrackMatrix>, Vec<f64>) {
        (idx.iter().map(|&i| mats[i]).collect(), idx.iter().map(|&i| y[i]).collect())
    };
    let (train_x, train_y) = pick(&split.train);
    let outcome = run_finetune(&pretrained, &train_x, &train_y, &cfg)?;
    for (e, m) in outcome.epoch_mse.iter().enumerate() {
        eprintln!("epoch {} train mse {m:.4}", e + 1);
    }

    let evaluate = |idx: &[usize]| -> Result<(f64, f64), CliError> {
        let (xs, ys) = pick(idx);
        let pred = predict(&outcome.params, &xs, cfg.length, cfg.batch_size)?;
        Ok((mse(&pred, &ys), pearson(&pred, &ys)?))
    };
    let (test_mse, test_r) = evaluate(&split.test)?;
    let val = if split.val.len() >= 2 { Some(evaluate(&split.val)?) } else { None };
    let report = ProbeReport {
        n_train: split.train.len(),
        n_val: split.val.len(),
        n_test: split.test.len(),
        mse: test_mse,
        pearson_r: test_r,
        val_mse: val.map(|v| v.0),
        val_r: val.map(|v| v.1),
    };
    let task = s.task.as_deref().unwrap_or("task");
    let mut buf = Vec::new();
    write_probe_report(&mut buf, &[(task, &report)])?;
    run.write_output("finetune.tsv", &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));

    let ckpt = run.path("finetuned.json");
    Checkpoint {
        params: outcome.params,
        seed,
        step: cfg.epochs,
        optimizer: None,
    }
    .save(&ckpt)?;
    run.record_output(&ckpt)?;
    run.record_output(&blob_path(&ckpt))?;
    run.finish()
}
