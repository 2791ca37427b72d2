use isoclr::autodiff::Tensor;
use isoclr::model::{init_params, EncoderConfig, ModelConfig, Preset, ProjectorConfig};
use isoclr::synthetic::{generate, random_motif, SyntheticConfig, SyntheticCorpus};
use isoclr::train::finetune::{finetune, predict, FinetuneConfig};
use isoclr::train::optim::AdamW;
use isoclr::train::schedule::ScheduleConfig;
use isoclr::train::{train_contrastive, TrainConfig};
use isoclr::tracks::TrackMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_blocks: 3,
            channels: 8,
            kernel_size: 3,
            ..EncoderConfig::preset(Preset::S)
        },
        projector: ProjectorConfig {
            layers: 3,
            hidden: 32,
            out_dim: 16,
        },
    }
}

fn corpus(n_sets: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SyntheticConfig {
        n_sets,
        length: 64,
        motif_len: 6,
        ..Default::default()
    };
    let motif = random_motif(6, &mut rng);
    generate(&cfg, &motif, "", &mut rng).unwrap()
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        model: Some(small_model()),
        batch_size: 4,
        steps: Some(steps),
        length: 64,
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn adamw_without_decay_is_adam_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 50;
    let mut p = Tensor::<f64>::new(&[n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut opt = AdamW::<f64>::new([p.shape()]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut q = p.data().to_vec();
    let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
    for t in 1..=25 {
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lr = 0.01 * t as f64 / 25.0;
        opt.step(&mut [&mut p], &[&Tensor::new(&[n], g.clone()).unwrap()], lr, &[0.0])
            .unwrap();
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1.powi(t));
            let v_hat = v[i] / (1.0 - b2.powi(t));
            q[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        for i in 0..n {
            assert_eq!(p.data()[i].to_bits(), q[i].to_bits(), "step {t} element {i}");
        }
    }
}

#[test]
fn adamw_single_step_hand_value() {
    // m̂ = g, v̂ = g²: p' = p(1 - lr·wd) - lr·g/(|g| + eps)
    let mut p = Tensor::<f64>::new(&[1], vec![0.5]).unwrap();
    let mut opt = AdamW::<f64>::new([p.shape()]);
    opt.step(&mut [&mut p], &[&Tensor::new(&[1], vec![0.2]).unwrap()], 0.01, &[0.1])
        .unwrap();
    let want = 0.5 * (1.0 - 0.001) - 0.01 * 0.2 / (0.2 + 1e-8);
    assert!((p.data()[0] - want).abs() < 1e-9);
    assert!((p.data()[0] - 0.4895).abs() < 1e-9);
}

#[test]
fn schedule_peak() {
    for total in [11, 100, 500, 10_000] {
        let s = ScheduleConfig::new(10, 0.01, total).unwrap();
        assert_eq!(s.lr_at(10).unwrap(), 0.01);
    }
}

#[test]
fn training_is_deterministic() {
    let c = corpus(12, 2);
    let tracks = c.tracks().unwrap();
    let weights = c.weights().unwrap();
    let run = || train_contrastive(&c.sets, &weights, &tracks, &train_cfg(6), |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.trace.len(), 6);
    for (x, y) in a.trace.iter().zip(&b.trace) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.positive_term.to_bits(), y.positive_term.to_bits());
        assert_eq!(x.negative_term.to_bits(), y.negative_term.to_bits());
    }
    for (x, y) in a.checkpoint.params.entries().iter().zip(b.checkpoint.params.entries()) {
        assert_eq!(x.tensor, y.tensor, "{}", x.name);
    }
    assert!(a.trace.iter().all(|r| r.total.is_finite()));
    // 12 sets at batch 4: epochs of 3 steps, lr follows the schedule
    assert_eq!(a.trace[0].lr, 0.0);
}

#[test]
fn zero_steps_keeps_initialisation() {
    let c = corpus(8, 3);
    let cfg = train_cfg(0);
    let out = train_contrastive(&c.sets, &c.weights().unwrap(), &c.tracks().unwrap(), &cfg, |_| {}).unwrap();
    assert!(out.trace.is_empty());
    let init = init_params::<f32>(&small_model(), cfg.seed).unwrap();
    assert_eq!(out.checkpoint.params.entries(), init.entries());
    assert_eq!(out.checkpoint.step, 0);
}

#[test]
fn training_rejects_bad_inputs() {
    let c = corpus(3, 4);
    let (t, w) = (c.tracks().unwrap(), c.weights().unwrap());
    assert!(train_contrastive(&c.sets, &w, &t, &train_cfg(1), |_| {}).is_err());
    assert!(train_contrastive(&[], &w, &t, &train_cfg(1), |_| {}).is_err());
}

fn gc_fraction(m: &TrackMatrix) -> f64 {
    let len = m.length();
    (0..len).map(|c| (m.get(1, c) + m.get(2, c)) as f64).sum::<f64>() / len as f64
}

#[test]
fn zero_initialised_head_predicts_zero() {
    let c = corpus(16, 5);
    let tracks = c.tracks().unwrap();
    let mats: Vec<&TrackMatrix> = c.records.iter().map(|r| &tracks[&r.transcript_id]).collect();
    let y: Vec<f64> = mats.iter().map(|m| gc_fraction(m) * 4.0 - 2.0).collect();
    let pre = init_params::<f32>(&small_model(), 1).unwrap();
    let cfg = FinetuneConfig {
        epochs: 0,
        length: 64,
        ..Default::default()
    };
    let out = finetune(&pre, &mats, &y, &cfg).unwrap();
    let pred = predict(&out.params, &mats, 64, 8).unwrap();
    assert!(pred.iter().all(|&p| p == 0.0));
    let mse: f64 = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
    let mean_sq: f64 = y.iter().map(|t| t * t).sum::<f64>() / y.len() as f64;
    assert_eq!(mse, mean_sq);
    assert!((cfg.lr_for_epoch(2) - 0.01 * 0.95).abs() < 1e-15);
}

#[test]
fn finetune_memorises_32_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = corpus(32, 6);
    let tracks = c.tracks().unwrap();
    let mats: Vec<&TrackMatrix> = c
        .sets
        .iter()
        .map(|s| &tracks[&s.transcript_ids[0]])
        .collect();
    let y: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut model = small_model();
    model.encoder.dropout = 0.0;
    let pre = init_params::<f32>(&model, 2).unwrap();
    let cfg = FinetuneConfig {
        epochs: 200,
        batch_size: 32,
        length: 64,
        ..Default::default()
    };
    let out = finetune(&pre, &mats, &y, &cfg).unwrap();
    let last = *out.epoch_mse.last().unwrap();
    assert!(last < 0.01, "final train MSE {last}");
    let first = out.epoch_mse[0];
    let mean_sq: f64 = y.iter().map(|t| t * t).sum::<f64>() / y.len() as f64;
    // one full batch: the first epoch's loss is taken before any update
    assert!((first - mean_sq).abs() < 1e-6, "{first} vs {mean_sq}");
}
