//! Direct-summation reference for the contrastive loss.

use isoclr::autodiff::Tensor;
use isoclr::loss::LossConfig;
use rand::Rng;

pub fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-anchor loss written out term by term.
pub fn oracle(z1: &[Vec<f64>], z2: &[Vec<f64>], w: &[f64], cfg: &LossConfig) -> f64 {
    let n = z1.len();
    let tau = cfg.temperature;
    let views = [z1, z2];
    let anchor_views: &[usize] = if cfg.symmetric { &[0, 1] } else { &[0] };
    let mut total = 0.0;
    let mut count = 0;
    for &v in anchor_views {
        for i in 0..n {
            let anchor = &views[v][i];
            let mut sum = 0.0;
            for (l, zl) in views.iter().enumerate() {
                for (k, zk) in zl.iter().enumerate() {
                    let is_self = k == i && l == v;
                    let is_partner = k == i && l != v;
                    if is_self || (is_partner && !cfg.self_view_negative) {
                        continue;
                    }
                    sum += (dot(anchor, zk) / tau).exp();
                }
            }
            let partner = &views[1 - v][i];
            total += sum.ln() - w[i] * dot(anchor, partner) / tau;
            count += 1;
        }
    }
    total / count as f64
}

