//! Settings shared by every subcommand. Each flag has a config-file key of
//! the same name (dashes become underscores); a flag given on the command
//! line wins over the file.

use std::path::{Path, PathBuf};

use clap::Args;
use isoclr::model::Preset;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Annotation input as `species=path` (GTF, optionally .gz). Repeatable.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gtf: Vec<String>,

    /// Genome input as `species=path` (FASTA, optionally .gz). Repeatable.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fasta: Vec<String>,

    /// homologene.data-style table.
    #[arg(long)]
    pub homology: Option<PathBuf>,

    /// Cross-reference from (species, annotation gene id) to homology gene id.
    #[arg(long)]
    pub xref: Option<PathBuf>,

    /// Constant in the set weight law.
    #[arg(long)]
    pub c: Option<f64>,

    /// Keep transcripts whose CDS does not map to a whole number of codons,
    /// discarding only the CDS.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub drop_invalid_cds: Option<bool>,

    /// Output directory of a `build-dataset` run.
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    /// Checkpoint manifest (`.json`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Embedding table written by `embed`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,

    /// Labels TSV: `transcript_id` then one target column, or several 0/1
    /// columns with `--multilabel`.
    #[arg(long)]
    pub labels: Option<PathBuf>,

    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub multilabel: Option<bool>,

    /// Task name written in probe and fine-tune reports.
    #[arg(long)]
    pub task: Option<String>,

    /// Root under which run directories are created.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Exact run directory, bypassing the config-hash name.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub preset: Option<Preset>,

    #[arg(long)]
    pub steps: Option<u64>,

    #[arg(long)]
    pub epochs: Option<u64>,

    #[arg(long)]
    pub batch: Option<usize>,

    /// Columns per transcript after padding or cropping.
    #[arg(long)]
    pub length: Option<usize>,

    #[arg(long)]
    pub mask_rate: Option<f64>,

    #[arg(long)]
    pub temperature: Option<f64>,

    #[arg(long)]
    pub warmup: Option<u64>,

    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub weight_decay: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),*) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// `self` with every value present in `flags` replaced by the flag.
    pub fn overlaid(mut self, flags: &Settings) -> Self {
        if !flags.gtf.is_empty() {
            self.gtf = flags.gtf.clone();
        }
        if !flags.fasta.is_empty() {
            self.fasta = flags.fasta.clone();
        }
        overlay!(self, flags;
            homology, xref, c, drop_invalid_cds, dataset, checkpoint, embeddings, labels,
            multilabel, task, out, run_dir, seed, preset, steps, epochs, batch, length,
            mask_rate, temperature, warmup, lr, weight_decay);
        self
    }

    /// Seed precedence: flag or config value, then `ISOCLR_SEED`, then 0.
    pub fn resolve_seed(&mut self) -> Result<u64, CliError> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        let seed = match std::env::var("ISOCLR_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("ISOCLR_SEED `{v}` is not an unsigned integer")))?,
            Err(_) => 0,
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("missing required setting `{key}`")))
    }
}

/// Splits `species=path`; a bare path uses its file stem as the species.
pub fn species_path(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((s, p)) if !s.is_empty() => (s.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(spec);
            let stem = p
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.split('.').next().unwrap_or(n).to_string())
                .unwrap_or_default();
            (stem, p)
        }
    }
}
