//! Dilated residual convolutional encoder, projection head and regression head.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::tracks::N_TRACKS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    S,
    M,
    L,
}

impl Preset {
    pub fn channels(self) -> usize {
        match self {
            Preset::S => 64,
            Preset::M => 128,
            Preset::L => 256,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Preset::S),
            "M" | "m" => Ok(Preset::M),
            "L" | "l" => Ok(Preset::L),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected S, M or L)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub input_tracks: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl EncoderConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            n_blocks: 8,
            channels: p.channels(),
            kernel_size: 5,
            dropout: 0.1,
            input_tracks: N_TRACKS,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << block
    }

    /// Input lengths must be a multiple of this.
    pub fn length_multiple(&self) -> usize {
        1 << self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.n_blocks == 0 || self.n_blocks > 24 || self.channels == 0 || self.input_tracks == 0 {
            return Err(Error::Config("encoder needs at least one block and channel".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("invalid batch-norm momentum or eps".into()));
        }
        Ok(())
    }

    /// Input positions `[lo, hi]` that can influence unit `pos` of the final
    /// block output for an input of length `len`.
    pub fn receptive_field(&self, pos: usize, len: usize) -> (usize, usize) {
        let reach = 2 * (self.kernel_size / 2);
        let (mut lo, mut hi) = (pos as i64, pos as i64);
        for block in (0..self.n_blocks).rev() {
            let d = self.dilation(block) as i64;
            lo = 2 * lo - reach as i64 * d;
            hi = 2 * hi + 1 + reach as i64 * d;
        }
        (lo.max(0) as usize, hi.min(len as i64 - 1) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 2048,
            out_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            encoder: EncoderConfig::preset(p),
            projector: ProjectorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.projector.layers == 0 || self.projector.hidden == 0 || self.projector.out_dim == 0 {
            return Err(Error::Config("projector needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Running statistics, updated outside the optimizer.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Pretrained,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn from_entries(config: ModelConfig, entries: Vec<ParamEntry<T>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate parameter {}", e.name)));
            }
        }
        Ok(Self { config, entries, index })
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    kind: e.kind,
                    group: e.group,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, kind: ParamKind, group: ParamGroup) {
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, tensor, kind, group });
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|e| !e.name.starts_with(prefix));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    /// Folds training-mode batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`, using the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(String, BnStats)]) -> Result<()> {
        let m = self.config.encoder.bn_momentum;
        for (prefix, s) in stats {
            let unbias = s.count as f64 / (s.count as f64 - 1.0);
            let mean_idx = self
                .position(&format!("{prefix}.running_mean"))
                .ok_or_else(|| Error::Validation(format!("missing {prefix}.running_mean")))?;
            let var_idx = self
                .position(&format!("{prefix}.running_var"))
                .ok_or_else(|| Error::Validation(format!("missing {prefix}.running_var")))?;
            for (r, &b) in self.entries[mean_idx].tensor.data_mut().iter_mut().zip(&s.mean) {
                *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
            }
            for (r, &b) in self.entries[var_idx].tensor.data_mut().iter_mut().zip(&s.var) {
                *r = T::from_f64((1.0 - m) * r.as_f64() + m * b * unbias);
            }
        }
        Ok(())
    }
}

fn uniform_tensor<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()).expect("shape")
}

fn push_bn<T: Real>(p: &mut ModelParams<T>, prefix: &str, c: usize) {
    use ParamKind::*;
    let g = ParamGroup::Pretrained;
    p.push(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()), Weight, g);
    p.push(format!("{prefix}.beta"), Tensor::zeros(&[c]), Weight, g);
    p.push(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), Buffer, g);
    p.push(format!("{prefix}.running_var"), Tensor::full(&[c], T::one()), Buffer, g);
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, batch norm
/// with gamma 1 and beta 0. Deterministic in `seed`.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = &config.encoder;
    let mut p = ModelParams::from_entries(config.clone(), Vec::new())?;
    let (k, c) = (enc.kernel_size, enc.channels);
    let g = ParamGroup::Pretrained;
    for b in 0..enc.n_blocks {
        let c_in = if b == 0 { enc.input_tracks } else { c };
        p.push(
            format!("blocks.{b}.conv1.weight"),
            uniform_tensor(&[c, c_in, k], c_in * k, &mut rng),
            ParamKind::Weight,
            g,
        );
        push_bn(&mut p, &format!("blocks.{b}.bn1"), c);
        p.push(
            format!("blocks.{b}.conv2.weight"),
            uniform_tensor(&[c, c, k], c * k, &mut rng),
            ParamKind::Weight,
            g,
        );
        push_bn(&mut p, &format!("blocks.{b}.bn2"), c);
        if c_in != c {
            p.push(
                format!("blocks.{b}.skip.weight"),
                uniform_tensor(&[c, c_in, 1], c_in, &mut rng),
                ParamKind::Weight,
                g,
            );
        }
    }
    let proj = &config.projector;
    let mut d_in = c;
    for j in 0..proj.layers {
        let d_out = if j + 1 == proj.layers { proj.out_dim } else { proj.hidden };
        p.push(
            format!("proj.{j}.weight"),
            uniform_tensor(&[d_out, d_in], d_in, &mut rng),
            ParamKind::Weight,
            g,
        );
        p.push(format!("proj.{j}.bias"), Tensor::zeros(&[d_out]), ParamKind::Weight, g);
        d_in = d_out;
    }
    Ok(p)
}

/// Replaces the projector with a fresh 3-layer regression head
/// `C -> C -> C -> 1`: two randomly initialized layers and a zero-initialized
/// output layer, all tagged [`ParamGroup::Head`].
pub fn attach_regression_head<T: Real>(params: &mut ModelParams<T>, seed: u64) {
    params.remove_prefix("proj.");
    params.remove_prefix("head.");
    let c = params.config.encoder.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = ParamGroup::Head;
    for j in 0..2 {
        params.push(format!("head.{j}.weight"), uniform_tensor(&[c, c], c, &mut rng), ParamKind::Weight, h);
        params.push(format!("head.{j}.bias"), Tensor::zeros(&[c]), ParamKind::Weight, h);
    }
    params.push("head.2.weight".into(), Tensor::zeros(&[1, c]), ParamKind::Weight, h);
    params.push("head.2.bias".into(), Tensor::zeros(&[1]), ParamKind::Weight, h);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph handles for the weight entries of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Handle of the entry at `idx`, if it was bound.
    pub fn var(&self, idx: usize) -> Option<Var> {
        self.vars.get(idx).copied().flatten()
    }
}

/// Adds every weight entry to `g`. Entries for which `trainable` is false
/// become constants.
pub fn bind<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    trainable: impl Fn(&ParamEntry<T>) -> bool,
) -> Bound {
    let vars = params
        .entries
        .iter()
        .map(|e| match e.kind {
            ParamKind::Buffer => None,
            ParamKind::Weight if trainable(e) => Some(g.param(e.tensor.clone())),
            ParamKind::Weight => Some(g.input(e.tensor.clone())),
        })
        .collect();
    Bound { vars }
}

fn var_of<T: Real>(params: &ModelParams<T>, bound: &Bound, name: &str) -> Result<Var> {
    params
        .position(name)
        .and_then(|i| bound.var(i))
        .ok_or_else(|| Error::Validation(format!("parameter {name} is not bound")))
}

pub struct EncodeOutput {
    /// Mean-pooled embedding, `[n, channels]`.
    pub h: Var,
    /// Output of the last block before pooling, `[n, channels, len / 2^blocks]`.
    pub features: Var,
    /// Batch statistics per batch-norm prefix (training mode only).
    pub bn_stats: Vec<(String, BnStats)>,
}

/// Runs the residual blocks on `x` (`[n, tracks, len]`) and mean-pools.
pub fn encode<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    x: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<EncodeOutput> {
    let enc = &params.config.encoder;
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != enc.input_tracks {
        return Err(Error::shape(format!(
            "encoder input must be [n, {}, len], got {shape:?}",
            enc.input_tracks
        )));
    }
    if shape[2] == 0 || shape[2] % enc.length_multiple() != 0 {
        return Err(Error::shape(format!(
            "input length {} is not a multiple of {}",
            shape[2],
            enc.length_multiple()
        )));
    }
    let mut bn_stats = Vec::new();
    let mut bn = |g: &mut Graph<T>, input: Var, prefix: String| -> Result<Var> {
        let gamma = var_of(params, bound, &format!("{prefix}.gamma"))?;
        let beta = var_of(params, bound, &format!("{prefix}.beta"))?;
        match mode {
            Mode::Train => {
                let (out, stats) = g.batchnorm_train(input, gamma, beta, enc.bn_eps)?;
                bn_stats.push((prefix, stats));
                Ok(out)
            }
            Mode::Eval => {
                let rm = params.get(&format!("{prefix}.running_mean"))?;
                let rv = params.get(&format!("{prefix}.running_var"))?;
                g.batchnorm_eval(input, gamma, beta, rm.data(), rv.data(), enc.bn_eps)
            }
        }
    };
    let mut cur = x;
    for b in 0..enc.n_blocks {
        let d = enc.dilation(b);
        let w1 = var_of(params, bound, &format!("blocks.{b}.conv1.weight"))?;
        let w2 = var_of(params, bound, &format!("blocks.{b}.conv2.weight"))?;
        let mut y = g.conv1d(cur, w1, d)?;
        y = bn(g, y, format!("blocks.{b}.bn1"))?;
        y = g.relu(y);
        y = g.conv1d(y, w2, d)?;
        y = bn(g, y, format!("blocks.{b}.bn2"))?;
        let skip_name = format!("blocks.{b}.skip.weight");
        let skip = if params.has(&skip_name) {
            let ws = var_of(params, bound, &skip_name)?;
            g.conv1d(cur, ws, 1)?
        } else {
            cur
        };
        y = g.add(y, skip)?;
        y = g.relu(y);
        y = g.dropout(y, enc.dropout, mode == Mode::Train, rng)?;
        cur = g.maxpool1d(y)?;
    }
    let h = g.mean_over_length(cur)?;
    Ok(EncodeOutput {
        h,
        features: cur,
        bn_stats,
    })
}

fn mlp<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    prefix: &str,
    layers: usize,
    mut x: Var,
) -> Result<Var> {
    for j in 0..layers {
        let w = var_of(params, bound, &format!("{prefix}.{j}.weight"))?;
        let b = var_of(params, bound, &format!("{prefix}.{j}.bias"))?;
        x = g.linear(x, w, Some(b))?;
        if j + 1 < layers {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Projector MLP followed by row-wise l2 normalization.
pub fn project<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, bound: &Bound, h: Var) -> Result<Var> {
    let u = mlp(g, params, bound, "proj", params.config.projector.layers, h)?;
    g.l2_normalize(u)
}

/// Regression head output, `[n, 1]`.
pub fn regress<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, bound: &Bound, h: Var) -> Result<Var> {
    mlp(g, params, bound, "head", 3, h)
}

/// Eval-mode embeddings `[n, channels]` for a `[n, tracks, len]` input.
pub fn embed<T: Real>(params: &ModelParams<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, |_| false);
    let xv = g.input(x);
    // eval mode draws nothing from the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = encode(&mut g, params, &bound, xv, Mode::Eval, &mut rng)?;
    Ok(g.value(out.h).clone())
}

/// Eval-mode normalized projections for a `[n, tracks, len]` input.
pub fn embed_and_project<T: Real>(params: &ModelParams<T>, x: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, |_| false);
    let xv = g.input(x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = encode(&mut g, params, &bound, xv, Mode::Eval, &mut rng)?;
    let z = project(&mut g, params, &bound, out.h)?;
    Ok((g.value(out.h).clone(), g.value(z).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                n_blocks: 2,
                channels: 4,
                kernel_size: 3,
                dropout: 0.0,
                input_tracks: 6,
                bn_momentum: 0.1,
                bn_eps: 1e-5,
            },
            projector: ProjectorConfig {
                layers: 3,
                hidden: 8,
                out_dim: 5,
            },
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = tiny();
        let a = init_params::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, init_params::<f32>(&cfg, 3).unwrap());
        assert_ne!(a, init_params::<f32>(&cfg, 4).unwrap());
        for e in a.entries() {
            let name = e.name.as_str();
            if name.ends_with("gamma") || name.ends_with("running_var") {
                assert!(e.tensor.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with("beta") || name.ends_with("bias") || name.ends_with("running_mean") {
                assert!(e.tensor.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let s = e.tensor.shape();
                let fan_in: usize = s[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                assert!(e.tensor.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn preset_parameter_counts_increase() {
        let counts: Vec<usize> = [Preset::S, Preset::M, Preset::L]
            .iter()
            .map(|&p| init_params::<f32>(&ModelConfig::preset(p), 0).unwrap().param_count())
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
        // projector alone: 64*2048 + 2048 + 2048*2048 + 2048 + 2048*128 + 128
        let s = init_params::<f32>(&ModelConfig::preset(Preset::S), 0).unwrap();
        let proj: usize = s
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("proj."))
            .map(|e| e.tensor.len())
            .sum();
        assert_eq!(proj, 64 * 2048 + 2048 + 2048 * 2048 + 2048 + 2048 * 128 + 128);
    }

    #[test]
    fn projector_shapes() {
        let p = init_params::<f32>(&ModelConfig::preset(Preset::M), 0).unwrap();
        assert_eq!(p.get("proj.0.weight").unwrap().shape(), &[2048, 128]);
        assert_eq!(p.get("proj.1.weight").unwrap().shape(), &[2048, 2048]);
        assert_eq!(p.get("proj.2.weight").unwrap().shape(), &[128, 2048]);
        assert!(p.has("blocks.0.skip.weight"));
        assert!(!p.has("blocks.1.skip.weight"));
    }

    #[test]
    fn rejects_indivisible_length() {
        let p = init_params::<f64>(&tiny(), 0).unwrap();
        assert!(embed(&p, Tensor::zeros(&[1, 6, 10])).is_err());
        assert!(embed(&p, Tensor::zeros(&[1, 6, 12])).is_ok());
    }

    #[test]
    fn receptive_field_grows() {
        let enc = EncoderConfig::preset(Preset::S);
        let (lo, hi) = enc.receptive_field(0, 256);
        assert_eq!((lo, hi), (0, 255));
        let cfg = tiny().encoder;
        // level 2 unit 3: units [12, 15] widened by 2*1 then by 2*2 at level 1
        let (lo, hi) = cfg.receptive_field(3, 64);
        assert!(hi - lo + 1 > 4);
    }

    #[test]
    fn attach_head_zero_output() {
        let mut p = init_params::<f64>(&tiny(), 1).unwrap();
        attach_regression_head(&mut p, 2);
        assert!(!p.has("proj.0.weight"));
        assert_eq!(p.get("head.0.weight").unwrap().shape(), &[4, 4]);
        assert!(p.get("head.2.weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("head."))
            .all(|e| e.group == ParamGroup::Head));
    }
}
