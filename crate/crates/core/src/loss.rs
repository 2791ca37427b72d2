//! Weighted decoupled contrastive loss over normalized projections.
//!
//! For anchor view `z_i^1` the per-sample loss is
//!
//! ```text
//! L_i = log Σ_{k≠i, l∈{1,2}} exp(<z_i^1, z_k^l> / τ) − w_i <z_i^1, z_i^2> / τ
//! ```
//!
//! The positive pair never appears among the negatives. With symmetrization
//! the same form is evaluated for anchors `z_i^2` and all anchors are averaged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_gradients, FdReference, GradCheckReport, Graph, GraphFn, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// Average over both views as anchors instead of view 1 only.
    pub symmetric: bool,
    /// Count the anchor's own other view among its negatives.
    pub self_view_negative: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            symmetric: true,
            self_view_negative: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub positive_term: f64,
    pub negative_term: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub positive: Var,
    pub negative: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().expect("scalar").as_f64();
        LossBreakdown {
            total: v(self.total),
            positive_term: v(self.positive),
            negative_term: v(self.negative),
        }
    }
}

/// Builds the loss on `z` = `[2n, d]`, rows `0..n` holding view 1 and rows
/// `n..2n` view 2 of the same samples, with per-sample weights `w`.
pub fn dcl_loss_graph<T: Real>(g: &mut Graph<T>, z: Var, w: &[f64], cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    let rows = g.shape(z).first().copied().unwrap_or(0);
    let n = w.len();
    if g.shape(z).len() != 2 || rows != 2 * n {
        return Err(Error::shape(format!(
            "loss expects [{}, d] projections, got {:?}",
            2 * n,
            g.shape(z)
        )));
    }
    if n < 2 {
        return Err(Error::Validation(format!("loss needs at least 2 samples, got {n}")));
    }
    let m = 2 * n;
    let anchors = if cfg.symmetric { m } else { n };
    let partner = |a: usize| if a < n { a + n } else { a - n };

    let sim = g.matmul_t(z, z)?;
    let logits = g.scale(sim, T::from_f64(1.0 / cfg.temperature));

    let mut mask = vec![true; m * m];
    for a in 0..m {
        mask[a * m + a] = false;
        if !cfg.self_view_negative {
            mask[a * m + partner(a)] = false;
        }
    }
    let lse = g.logsumexp_rows(logits, Some(mask))?;
    let neg_coeffs = (0..m)
        .map(|a| if a < anchors { T::from_f64(1.0 / anchors as f64) } else { T::zero() })
        .collect();
    let negative = g.weighted_sum(lse, neg_coeffs)?;

    let mut pos_coeffs = vec![T::zero(); m * m];
    for a in 0..anchors {
        pos_coeffs[a * m + partner(a)] = T::from_f64(w[a % n] / anchors as f64);
    }
    let positive = g.weighted_sum(logits, pos_coeffs)?;
    let total = g.sub(negative, positive)?;
    Ok(LossVars {
        total,
        positive,
        negative,
    })
}

fn check_unit_rows(z: &Tensor<f64>, what: &str) -> Result<()> {
    let d = *z.shape().last().unwrap_or(&0);
    if z.shape().len() != 2 || d == 0 {
        return Err(Error::shape(format!("{what}: expected [n, d], got {:?}", z.shape())));
    }
    for (i, row) in z.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Validation(format!("{what} row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Loss value for unit-norm projections `z1`, `z2` (`[n, d]` each).
pub fn dcl_loss(z1: &Tensor<f64>, z2: &Tensor<f64>, w: &[f64], cfg: &LossConfig) -> Result<LossBreakdown> {
    if z1.shape() != z2.shape() {
        return Err(Error::shape(format!("views differ in shape: {:?} vs {:?}", z1.shape(), z2.shape())));
    }
    check_unit_rows(z1, "z1")?;
    check_unit_rows(z2, "z2")?;
    if z1.shape()[0] != w.len() {
        return Err(Error::shape(format!("{} weights for {} samples", w.len(), z1.shape()[0])));
    }
    let mut g = Graph::<f64>::new();
    let a = g.input(z1.clone());
    let b = g.input(z2.clone());
    let z = g.concat_rows(a, b)?;
    Ok(dcl_loss_graph(&mut g, z, w, cfg)?.breakdown(&g))
}

struct NormalizedLoss {
    w: Vec<f64>,
    cfg: LossConfig,
}

impl GraphFn for NormalizedLoss {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let z = g.l2_normalize(inputs[0])?;
        Ok(dcl_loss_graph(g, z, &self.w, &self.cfg)?.total)
    }
}

/// Checks the loss gradient with respect to random pre-normalization
/// projector outputs (`n = 4`, `d = 3`, 64-bit, step `1e-6`).
pub fn dcl_grad_check<R: Rng + ?Sized>(cfg: &LossConfig, rng: &mut R) -> Result<GradCheckReport> {
    let (n, d) = (4, 3);
    let u: Vec<f64> = (0..2 * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    let f = NormalizedLoss { w, cfg: *cfg };
    check_gradients::<f64, _>(&f, &[Tensor::new(&[2 * n, d], u)?], 1e-6, FdReference::Native)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn orthogonal_pair() {
        let z = t(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = dcl_loss(&z, &z, &[1.0, 1.0], &LossConfig::default()).unwrap();
        assert!((l.total - (2f64.ln() - 10.0)).abs() < 1e-9, "{}", l.total);
        assert!((l.total - (l.negative_term - l.positive_term)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_negative_term() {
        let z = t(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = dcl_loss(&z, &z, &[0.0, 0.0], &LossConfig::default()).unwrap();
        assert_eq!(l.positive_term, 0.0);
        assert_eq!(l.total, l.negative_term);
    }

    #[test]
    fn identical_projections() {
        let z = t(&[[1.0, 0.0], [1.0, 0.0]]);
        let l = dcl_loss(&z, &z, &[1.0, 1.0], &LossConfig::default()).unwrap();
        assert!((l.total - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn input_validation() {
        let one = t(&[[1.0, 0.0]]);
        assert!(dcl_loss(&one, &one, &[1.0], &LossConfig::default()).is_err());
        let bad = t(&[[1.0, 0.0], [0.5, 0.5]]);
        assert!(dcl_loss(&bad, &bad, &[1.0, 1.0], &LossConfig::default()).is_err());
        let z = t(&[[1.0, 0.0], [0.0, 1.0]]);
        let cfg = LossConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(dcl_loss(&z, &z, &[1.0, 1.0], &cfg).is_err());
    }

    #[test]
    fn grad_check_harness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            LossConfig::default(),
            LossConfig {
                symmetric: false,
                ..Default::default()
            },
            LossConfig {
                self_view_negative: true,
                ..Default::default()
            },
        ] {
            let r = dcl_grad_check(&cfg, &mut rng).unwrap();
            assert!(r.max_rel_err < 1e-6, "{cfg:?}: {:e}", r.max_rel_err);
        }
    }
}
