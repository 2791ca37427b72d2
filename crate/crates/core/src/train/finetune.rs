use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::contrastive::stream_rng;
use super::optim::AdamW;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{attach_regression_head, bind, encode, regress, ModelParams, Mode, ParamGroup, ParamKind, Preset};
use crate::tracks::{pad_or_crop, TrackMatrix, N_TRACKS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Applied to the head only; pretrained weights are not decayed.
    pub head_weight_decay: f64,
    pub seed: u64,
    pub length: usize,
    /// When set, the checkpoint's encoder must match this preset.
    pub preset: Option<Preset>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.01,
            lr_decay: 0.95,
            head_weight_decay: 1e-5,
            seed: 0,
            length: 256,
            preset: None,
        }
    }
}

impl FinetuneConfig {
    /// Learning rate for 1-based `epoch`.
    pub fn lr_for_epoch(&self, epoch: u64) -> f64 {
        self.lr * self.lr_decay.powi(epoch.saturating_sub(1) as i32)
    }
}

pub struct FinetuneOutcome {
    pub params: ModelParams<f32>,
    /// Mean training MSE of each epoch's mini-batches.
    pub epoch_mse: Vec<f64>,
}

const FT_DOMAIN: u64 = 0x4654_554e;

fn stack(tracks: &[&TrackMatrix], idx: &[usize], length: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(idx.len() * N_TRACKS * length);
    for &i in idx {
        data.extend_from_slice(pad_or_crop(tracks[i], length).data());
    }
    Tensor::new(&[idx.len(), N_TRACKS, length], data)
}

/// Supervised fine-tuning with a fresh regression head on MSE.
pub fn finetune(
    pretrained: &ModelParams<f32>,
    tracks: &[&TrackMatrix],
    targets: &[f64],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if tracks.len() != targets.len() || tracks.is_empty() {
        return Err(Error::Validation(format!(
            "{} inputs for {} targets",
            tracks.len(),
            targets.len()
        )));
    }
    if let Some(p) = cfg.preset {
        if pretrained.config.encoder.channels != p.channels() {
            return Err(Error::Config(format!(
                "checkpoint has {} channels but preset {p:?} expects {}",
                pretrained.config.encoder.channels,
                p.channels()
            )));
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut params = pretrained.clone();
    attach_regression_head(&mut params, cfg.seed);
    let mut opt = AdamW::<f32>::new(
        params
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.shape()),
    );
    let wd: Vec<f64> = params
        .entries()
        .iter()
        .filter(|e| e.kind == ParamKind::Weight)
        .map(|e| if e.group == ParamGroup::Head { cfg.head_weight_decay } else { 0.0 })
        .collect();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs as usize);
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        order.shuffle(&mut stream_rng(cfg.seed, FT_DOMAIN, epoch));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut rng = stream_rng(cfg.seed, FT_DOMAIN ^ 1, step);
            step += 1;
            let mut g = Graph::<f32>::new();
            let bound = bind(&mut g, &params, |_| true);
            let x = g.input(stack(tracks, chunk, cfg.length)?);
            let enc = encode(&mut g, &params, &bound, x, Mode::Train, &mut rng)?;
            let pred = regress(&mut g, &params, &bound, enc.h)?;
            let y: Vec<f32> = chunk.iter().map(|&i| targets[i] as f32).collect();
            let yv = g.input(Tensor::new(&[chunk.len(), 1], y)?);
            let diff = g.sub(pred, yv)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean(sq);
            let value = g.value(loss).item().expect("scalar") as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: loss is {value}")));
            }
            sum += value * chunk.len() as f64;
            count += chunk.len();
            let mut grads = g.backward(loss)?;
            let grad_tensors: Vec<Tensor<f32>> = params
                .entries()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.kind == ParamKind::Weight)
                .map(|(i, e)| {
                    bound
                        .var(i)
                        .and_then(|v| grads.take(v))
                        .unwrap_or_else(|| Tensor::zeros(e.tensor.shape()))
                })
                .collect();
            {
                let mut targets_mut: Vec<&mut Tensor<f32>> = params
                    .entries_mut()
                    .iter_mut()
                    .filter(|e| e.kind == ParamKind::Weight)
                    .map(|e| &mut e.tensor)
                    .collect();
                let refs: Vec<&Tensor<f32>> = grad_tensors.iter().collect();
                opt.step(&mut targets_mut, &refs, lr, &wd)?;
            }
            params.update_running_stats(&enc.bn_stats)?;
        }
        epoch_mse.push(sum / count as f64);
    }
    Ok(FinetuneOutcome { params, epoch_mse })
}

/// Eval-mode predictions of a fine-tuned model.
pub fn predict(params: &ModelParams<f32>, tracks: &[&TrackMatrix], length: usize, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tracks.len());
    let idx: Vec<usize> = (0..tracks.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, params, |_| false);
        let x = g.input(stack(tracks, chunk, length)?);
        let mut rng = stream_rng(0, 0, 0);
        let enc = encode(&mut g, params, &bound, x, Mode::Eval, &mut rng)?;
        let pred = regress(&mut g, params, &bound, enc.h)?;
        out.extend(g.value(pred).data().iter().map(|&v| v as f64));
    }
    Ok(out)
}
