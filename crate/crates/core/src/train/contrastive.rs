use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::schedule::ScheduleConfig;
use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::Checkpoint;
use crate::dataset::TrackStore;
use crate::error::{Error, Result};
use crate::homology::{batch_for_sets, BatchConfig, HomologySet, WeightTable};
use crate::loss::{dcl_loss_graph, LossConfig};
use crate::model::{bind, encode, init_params, project, ModelConfig, ModelParams, Mode, ParamKind, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    /// Overrides the preset's architecture when set.
    pub model: Option<ModelConfig>,
    pub batch_size: usize,
    /// Passes over the sets; ignored when `steps` is set.
    pub epochs: u64,
    pub steps: Option<u64>,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub seed: u64,
    pub length: usize,
    pub mask_rate: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::S,
            model: None,
            batch_size: 32,
            epochs: 1,
            steps: None,
            weight_decay: 1e-6,
            warmup_steps: 10,
            max_lr: 0.01,
            seed: 0,
            length: 256,
            mask_rate: 0.15,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| ModelConfig::preset(self.preset))
    }

    /// Steps the run will take for `n_sets` homology sets.
    pub fn total_steps(&self, n_sets: usize) -> u64 {
        self.steps
            .unwrap_or(self.epochs * (n_sets / self.batch_size.max(1)) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub positive_term: f64,
    pub negative_term: f64,
}

pub const TRACE_HEADER: &str = "step,lr,total,positive_term,negative_term";

/// Writes the loss trace as CSV. Floats use the shortest representation
/// that round-trips.
pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.lr, r.total, r.positive_term, r.negative_term)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

const SHUFFLE_DOMAIN: u64 = 0x5348_5546;
const BATCH_DOMAIN: u64 = 0x4241_5443;

/// Independent stream `index` of a generator keyed on `(seed, domain)`.
pub(crate) fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.rotate_left(17));
    rng.set_stream(index);
    rng
}

/// Contrastive pre-training. Each epoch shuffles the sets and cuts them into
/// full batches; the incomplete tail of an epoch is dropped. Batch contents
/// depend only on `(seed, step)`.
pub fn train_contrastive(
    sets: &[HomologySet],
    weights: &WeightTable,
    tracks: &TrackStore,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    if sets.is_empty() {
        return Err(Error::Validation("no homology sets to train on".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config(format!("batch size {} must be at least 2", cfg.batch_size)));
    }
    if sets.len() < cfg.batch_size {
        return Err(Error::Validation(format!(
            "{} homology sets cannot fill a batch of {}",
            sets.len(),
            cfg.batch_size
        )));
    }
    cfg.loss.validate()?;
    let model_cfg = cfg.model_config();
    if cfg.length == 0 || cfg.length % model_cfg.encoder.length_multiple() != 0 {
        return Err(Error::Config(format!(
            "length {} must be a positive multiple of {}",
            cfg.length,
            model_cfg.encoder.length_multiple()
        )));
    }
    let mut params = init_params::<f32>(&model_cfg, cfg.seed)?;
    let mut opt = AdamW::<f32>::new(
        params
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.shape()),
    );
    let total = cfg.total_steps(sets.len());
    let mut trace = Vec::with_capacity(total as usize);
    if total > 0 {
        let sched = ScheduleConfig::clamped(cfg.warmup_steps, cfg.max_lr, total)?;
        let bcfg = BatchConfig {
            length: cfg.length,
            mask_rate: cfg.mask_rate,
        };
        let per_epoch = sets.len() / cfg.batch_size;
        let mut order: Vec<usize> = Vec::new();
        for step in 0..total {
            let epoch = step / per_epoch as u64;
            let slot = (step % per_epoch as u64) as usize;
            if slot == 0 {
                order = (0..sets.len()).collect();
                order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_DOMAIN, epoch));
            }
            let chosen: Vec<&HomologySet> = order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &sets[i])
                .collect();
            let mut rng = stream_rng(cfg.seed, BATCH_DOMAIN, step);
            let batch = batch_for_sets(&chosen, weights, tracks, &bcfg, &mut rng)?;
            let lr = sched.lr_at(step)?;
            let row = contrastive_step(&mut params, &mut opt, &batch.stacked_input(), &batch.weights, cfg, lr, &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                    other => other,
                })?;
            let row = TraceRow { step, ..row };
            on_step(&row);
            trace.push(row);
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            seed: cfg.seed,
            step: total,
            optimizer: Some(opt),
        },
        trace,
    })
}

fn contrastive_step(
    params: &mut ModelParams<f32>,
    opt: &mut AdamW<f32>,
    input: &(Vec<f32>, [usize; 3]),
    weights: &[f64],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TraceRow> {
    let mut g = Graph::<f32>::new();
    let bound = bind(&mut g, params, |_| true);
    let x = g.input(Tensor::new(&input.1, input.0.clone())?);
    let enc = encode(&mut g, params, &bound, x, Mode::Train, rng)?;
    let z = project(&mut g, params, &bound, enc.h)?;
    let loss = dcl_loss_graph(&mut g, z, weights, &cfg.loss)?;
    let breakdown = loss.breakdown(&g);
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", breakdown.total)));
    }
    let mut grads = g.backward(loss.total)?;

    let weight_idx: Vec<usize> = params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Weight)
        .map(|(i, _)| i)
        .collect();
    let grad_tensors: Vec<Tensor<f32>> = weight_idx
        .iter()
        .map(|&i| {
            let v = bound.var(i).expect("weights are bound");
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(params.entries()[i].tensor.shape()))
        })
        .collect();
    let wd = vec![cfg.weight_decay; weight_idx.len()];
    {
        let entries = params.entries_mut();
        let mut targets: Vec<&mut Tensor<f32>> = entries
            .iter_mut()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| &mut e.tensor)
            .collect();
        let grad_refs: Vec<&Tensor<f32>> = grad_tensors.iter().collect();
        opt.step(&mut targets, &grad_refs, lr, &wd)?;
    }
    params.update_running_stats(&enc.bn_stats)?;
    Ok(TraceRow {
        step: 0,
        lr,
        total: breakdown.total,
        positive_term: breakdown.positive_term,
        negative_term: breakdown.negative_term,
    })
}
