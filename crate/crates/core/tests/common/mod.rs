#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracer_core::em::TracerParams;
use tracer_core::Dataset;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(c: &[f64], x: &[f64]) -> f64 {
    c.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// `(1/N) sum_i w_i [softplus(eta_i) - y_i eta_i] + lambda sum_j f_j |b_j|`
/// with `eta_i = offset_i + x_i' b`.
pub fn lasso_objective(rows: &[Vec<f64>], y: &[f64], w: &[f64], off: &[f64], lambda: f64, f: &[f64], b: &[f64]) -> f64 {
    let n = rows.len() as f64;
    let loss: f64 = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let eta = off[i] + dot(r, b);
            w[i] * (softplus(eta) - y[i] * eta)
        })
        .sum();
    loss / n + lambda * f.iter().zip(b).map(|(f, b)| f * b.abs()).sum::<f64>()
}

/// Minimizes a function of two variables by exhaustive grids, each pass
/// centred on the previous best point with a ten times finer spacing.
pub fn grid_minimize_2d(f: impl Fn(f64, f64) -> f64, radius: f64, final_step: f64) -> (f64, f64) {
    let (mut cx, mut cy) = (0.0, 0.0);
    let mut half = radius;
    let mut step = radius / 50.0;
    loop {
        let k = (half / step).round() as i64;
        let mut best = (f64::INFINITY, cx, cy);
        for i in -k..=k {
            for j in -k..=k {
                let (x, y) = (cx + i as f64 * step, cy + j as f64 * step);
                let v = f(x, y);
                if v < best.0 {
                    best = (v, x, y);
                }
            }
        }
        cx = best.1;
        cy = best.2;
        if step <= final_step {
            return (cx, cy);
        }
        half = 3.0 * step;
        step /= 10.0;
    }
}

/// Pairwise AUC: each (positive, negative) pair scores 1 when ordered
/// correctly and 1/2 when tied.
pub fn brute_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1.0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0.0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                twice_wins += 2;
            } else if si == sj {
                twice_wins += 1;
            }
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

/// A random logistic problem with an intercept in column 0.
pub struct Problem {
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub off: Vec<f64>,
}

pub fn random_problem(seed: u64, n: usize, p: usize, weighted: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta: Vec<f64> = (0..p).map(|j| if j % 3 == 0 { rng.gen_range(-1.5..1.5) } else { 0.0 }).collect();
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut off = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r = vec![1.0];
        r.extend((1..p).map(|_| rng.gen_range(-2.0..2.0)));
        let o = if weighted { rng.gen_range(-0.5..0.5) } else { 0.0 };
        let eta = o + dot(&r, &beta);
        y.push((rng.gen::<f64>() < sigmoid(eta)) as u8 as f64);
        w.push(if weighted { rng.gen_range(0.0..2.0) } else { 1.0 });
        off.push(o);
        rows.push(r);
    }
    Problem { rows, y, w, off }
}

/// Multivariate normal log-density through an explicit inverse and
/// determinant.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let inv = sigma.clone().try_inverse().expect("invertible covariance");
    let quad = (diff.transpose() * inv * &diff)[(0, 0)];
    let det = sigma.determinant();
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
}

fn bernoulli_loglik(y: f64, eta: f64) -> f64 {
    y * eta - softplus(eta)
}

/// Penalized observed-data log-likelihood of a fitted model on the EM
/// sample `rows` (historical records first when anchored), recomputed from
/// the parameter values alone.
pub fn observed_loglik(params: &TracerParams, rows: &Dataset, lambda2: f64, standardize: bool) -> f64 {
    let eta1 = params.eta1();
    let mut total = 0.0;
    let mut current_rows: Vec<Vec<f64>> = Vec::new();
    for i in 0..rows.len() {
        let w = rows.w_row(i);
        let a = rows.a_row(i);
        let mut x = vec![1.0];
        x.extend(&a);
        x.extend(&w);
        let y = rows.y()[i] as f64;
        let repr = match &params.reducer {
            Some(r) if r.active => vec![r.coefficients[0] + dot(&r.coefficients[1..], &a)],
            _ => a.clone(),
        };
        let mut wd = vec![1.0];
        wd.extend(&w);
        let mean = |b: &DMatrix<f64>| -> Vec<f64> { (0..b.ncols()).map(|k| dot(&wd, b.column(k).as_slice())).collect() };
        let f0 = mvn_logpdf(&repr, &mean(params.cond0.beta()), params.cond0.sigma());
        let l0 = bernoulli_loglik(y, dot(&params.eta0, &x)) + f0;
        if rows.time()[i] < params.transition_time {
            total += l0;
            continue;
        }
        let f1 = mvn_logpdf(&repr, &mean(params.cond1.beta()), params.cond1.sigma());
        let pi = sigmoid(dot(&params.gamma, &wd));
        let l1 = bernoulli_loglik(y, dot(&eta1, &x)) + f1 + pi.ln();
        let l0 = l0 + (1.0 - pi).ln();
        let m = l0.max(l1);
        total += m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        current_rows.push(x);
    }
    let n = current_rows.len() as f64;
    let p = params.delta.len();
    let factors: Vec<f64> = (0..p)
        .map(|j| {
            if j == 0 || !standardize {
                return 1.0;
            }
            let mean = current_rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = current_rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let pen: f64 = factors.iter().zip(&params.delta).map(|(f, d)| f * d.abs()).sum();
    total - n * lambda2 * pen
}
