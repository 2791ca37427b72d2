//! Gradient-check cases for every differentiable operator.

use isoclr::autodiff::{Graph, GraphFn, Real, Tensor, Var};
use isoclr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Conv(usize),
    MaxPool,
    BnTrain,
    BnEval,
    Linear,
    Relu,
    MeanLength,
    L2,
    Lse,
    MatMulT,
    DotRows,
    Dot,
    Mul,
    Sub,
    Concat,
    DropoutMask,
}

/// Applies `op` to the inputs and contracts the result with fixed random
/// coefficients so every output element contributes to the gradient.
pub struct Case {
    pub op: Op,
    pub coeffs: Vec<f64>,
    pub extra: Vec<f64>,
}

pub fn c<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

impl GraphFn for Case {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let out = match self.op {
            Op::Conv(d) => g.conv1d(x[0], x[1], d)?,
            Op::MaxPool => g.maxpool1d(x[0])?,
            Op::BnTrain => g.batchnorm_train(x[0], x[1], x[2], 1e-5)?.0,
            Op::BnEval => {
                let ch = g.shape(x[1])[0];
                let (rm, rv) = self.extra.split_at(ch);
                g.batchnorm_eval(x[0], x[1], x[2], &c::<T>(rm), &c::<T>(rv), 1e-5)?
            }
            Op::Linear => g.linear(x[0], x[1], Some(x[2]))?,
            Op::Relu => g.relu(x[0]),
            Op::MeanLength => g.mean_over_length(x[0])?,
            Op::L2 => g.l2_normalize(x[0])?,
            Op::Lse => {
                let mask = self.extra.iter().map(|&v| v > 0.3).collect();
                g.logsumexp_rows(x[0], Some(mask))?
            }
            Op::MatMulT => g.matmul_t(x[0], x[1])?,
            Op::DotRows => g.dot_rows(x[0], x[1])?,
            Op::Dot => return g.dot(x[0], x[1]),
            Op::Mul => g.mul(x[0], x[1])?,
            Op::Sub => g.sub(x[0], x[1])?,
            Op::Concat => g.concat_rows(x[0], x[1])?,
            Op::DropoutMask => g.mul_const(x[0], c::<T>(&self.extra))?,
        };
        g.weighted_sum(out, c::<T>(&self.coeffs))
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Input shapes and output size for one op at shape variant `v`.
pub fn setup(op: Op, v: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, usize, Vec<f64>) {
    let (n, ch, len) = [(1, 2, 8), (2, 3, 6), (3, 1, 10)][v];
    match op {
        Op::Conv(_) => {
            let k = [3, 5, 1][v];
            let c_out = [2, 1, 3][v];
            (
                vec![rand_tensor(rng, &[n, ch, len]), rand_tensor(rng, &[c_out, ch, k])],
                n * c_out * len,
                vec![],
            )
        }
        Op::MaxPool => (vec![rand_tensor(rng, &[n, ch, len])], n * ch * (len / 2), vec![]),
        Op::BnTrain | Op::BnEval => {
            let x = rand_tensor(rng, &[n, ch, len]);
            let gamma = Tensor::new(&[ch], rand_vec(rng, ch, 0.5, 1.5)).unwrap();
            let beta = rand_tensor(rng, &[ch]);
            let mut extra = rand_vec(rng, ch, -0.5, 0.5);
            extra.extend(rand_vec(rng, ch, 0.5, 2.0));
            (vec![x, gamma, beta], n * ch * len, extra)
        }
        Op::Linear => {
            let d_out = [4, 1, 2][v];
            (
                vec![
                    rand_tensor(rng, &[n, len]),
                    rand_tensor(rng, &[d_out, len]),
                    rand_tensor(rng, &[d_out]),
                ],
                n * d_out,
                vec![],
            )
        }
        Op::Relu | Op::DropoutMask => {
            let extra = (0..n * ch * len)
                .map(|_| if rng.gen::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 })
                .collect();
            (vec![rand_tensor(rng, &[n, ch, len])], n * ch * len, extra)
        }
        Op::MeanLength => (vec![rand_tensor(rng, &[n, ch, len])], n * ch, vec![]),
        Op::L2 => (vec![rand_tensor(rng, &[n + 1, len])], (n + 1) * len, vec![]),
        Op::Lse => {
            // keep column 0 so every row has at least one entry
            let mut mask = rand_vec(rng, (n + 1) * len, 0.0, 1.0);
            for r in 0..n + 1 {
                mask[r * len] = 1.0;
            }
            (vec![rand_tensor(rng, &[n + 1, len])], n + 1, mask)
        }
        Op::MatMulT => (
            vec![rand_tensor(rng, &[n, len]), rand_tensor(rng, &[ch, len])],
            n * ch,
            vec![],
        ),
        Op::DotRows => (
            vec![rand_tensor(rng, &[n + 1, len]), rand_tensor(rng, &[n + 1, len])],
            n + 1,
            vec![],
        ),
        Op::Dot => (
            vec![rand_tensor(rng, &[ch, len]), rand_tensor(rng, &[ch, len])],
            0,
            vec![],
        ),
        Op::Mul | Op::Sub => (
            vec![rand_tensor(rng, &[n, ch, len]), rand_tensor(rng, &[n, ch, len])],
            n * ch * len,
            vec![],
        ),
        Op::Concat => (
            vec![rand_tensor(rng, &[n, len]), rand_tensor(rng, &[ch, len])],
            (n + ch) * len,
            vec![],
        ),
    }
}

pub const OPS: [Op; 17] = [
    Op::Conv(1),
    Op::Conv(2),
    Op::MaxPool,
    Op::BnTrain,
    Op::BnEval,
    Op::Linear,
    Op::Relu,
    Op::MeanLength,
    Op::L2,
    Op::Lse,
    Op::MatMulT,
    Op::DotRows,
    Op::Dot,
    Op::Mul,
    Op::Sub,
    Op::Concat,
    Op::DropoutMask,
];

/// Worst relative error over every op, shape variant and seed, as
/// `(op, variant, seed, err)`.
pub fn sweep(check: impl Fn(&Case, &[Tensor<f64>]) -> f64) -> Vec<(Op, usize, u64, f64)> {
    let mut out = Vec::new();
    for op in OPS {
        for v in 0..3 {
            for seed in SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + v as u64);
                let (inputs, n_out, extra) = setup(op, v, &mut rng);
                let coeffs = rand_vec(&mut rng, n_out, -1.0, 1.0);
                let case = Case { op, coeffs, extra };
                out.push((op, v, seed, check(&case, &inputs)));
            }
        }
    }
    out
}
