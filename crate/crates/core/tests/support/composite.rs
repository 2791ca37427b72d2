//! Encode → project → loss gradient check on a tiny model.

use isoclr::autodiff::{rel_err, Graph, Real, Tensor};
use isoclr::loss::{dcl_loss_graph, LossConfig};
use isoclr::model::{bind, encode, init_params, project, EncoderConfig, ModelConfig, ModelParams, Mode, ParamKind, ProjectorConfig};
use isoclr::tracks::N_TRACKS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_blocks: 2,
            channels: 3,
            kernel_size: 3,
            dropout: 0.0,
            input_tracks: N_TRACKS,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        },
        projector: ProjectorConfig {
            layers: 3,
            hidden: 5,
            out_dim: 4,
        },
    }
}

/// Training-mode encode → project → loss value.
fn loss_value<T: Real>(params: &ModelParams<T>, x: &Tensor<T>, w: &[f64]) -> f64 {
    let mut g = Graph::<T>::new();
    let bound = bind(&mut g, params, |_| false);
    let xv = g.input(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = encode(&mut g, params, &bound, xv, Mode::Train, &mut rng).unwrap();
    let z = project(&mut g, params, &bound, enc.h).unwrap();
    let loss = dcl_loss_graph(&mut g, z, w, &LossConfig::default()).unwrap();
    g.value(loss.total).item().unwrap().as_f64()
}

/// Max relative error of analytic parameter gradients in precision `T`
/// against 64-bit central differences.
pub fn composite_check<T: Real>(seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params64 = init_params::<f64>(&tiny(), seed).unwrap();
    // nonzero biases keep every projector row away from the origin
    for e in params64.entries_mut() {
        if e.name.ends_with(".bias") {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let n = 3;
    let len = 8;
    let x64 = Tensor::new(
        &[2 * n, N_TRACKS, len],
        (0..2 * n * N_TRACKS * len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();

    let params: ModelParams<T> = params64.cast();
    let mut g = Graph::<T>::new();
    let bound = bind(&mut g, &params, |_| true);
    let xv = g.input(x64.cast());
    let enc = encode(&mut g, &params, &bound, xv, Mode::Train, &mut rng).unwrap();
    let z = project(&mut g, &params, &bound, enc.h).unwrap();
    let loss = dcl_loss_graph(&mut g, z, &w, &LossConfig::default()).unwrap();
    let grads = g.backward(loss.total).unwrap();

    let mut worst: f64 = 0.0;
    for (i, e) in params64.entries().iter().enumerate() {
        if e.kind != ParamKind::Weight {
            continue;
        }
        let analytic = grads.get(bound.var(i).unwrap()).unwrap().to_f64_vec();
        let mut numeric = Vec::with_capacity(e.tensor.len());
        for j in 0..e.tensor.len() {
            let mut p = params64.clone();
            let base = e.tensor.data()[j];
            p.entries_mut()[i].tensor.data_mut()[j] = base + h;
            let plus = loss_value(&p, &x64, &w);
            p.entries_mut()[i].tensor.data_mut()[j] = base - h;
            let minus = loss_value(&p, &x64, &w);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let err = rel_err(&analytic, &numeric);
        worst = worst.max(err);
    }
    worst
}

