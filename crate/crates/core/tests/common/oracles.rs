//! Independent brute-force implementations used as test oracles.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use region_embed::ingest::TripRecord;

/// Double-loop cosine over plain vectors; zero vectors give 0.
pub fn brute_cosine(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            let mut ni = 0.0;
            let mut nj = 0.0;
            for k in 0..rows[i].len() {
                dot += rows[i][k] * rows[j][k];
                ni += rows[i][k] * rows[i][k];
                nj += rows[j][k] * rows[j][k];
            }
            out[i][j] = if ni == 0.0 || nj == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                dot / (ni.sqrt() * nj.sqrt())
            };
        }
    }
    out
}

pub fn brute_ac(counts: &[Vec<u64>], alpha: f64) -> Vec<Vec<f64>> {
    let n = counts.len();
    let mut p_o = vec![vec![0.0; n]; n];
    let mut p_d = vec![vec![0.0; n]; n];
    for i in 0..n {
        let inflow: u64 = (0..n).map(|o| counts[o][i]).sum();
        let outflow: u64 = counts[i].iter().sum();
        for j in 0..n {
            if inflow > 0 {
                p_o[i][j] = counts[j][i] as f64 / inflow as f64;
            }
            if outflow > 0 {
                p_d[i][j] = counts[i][j] as f64 / outflow as f64;
            }
        }
    }
    let a = brute_cosine(&p_o);
    let b = brute_cosine(&p_d);
    (0..n)
        .map(|i| (0..n).map(|j| alpha * a[i][j] + (1.0 - alpha) * b[i][j]).collect())
        .collect()
}

pub fn random_trips(n: usize, m: usize, rng: &mut ChaCha8Rng) -> (Vec<TripRecord>, Vec<Vec<u64>>) {
    let mut counts = vec![vec![0u64; n]; n];
    let trips = (0..m)
        .map(|_| {
            let t = TripRecord {
                origin: rng.random_range(0..n),
                destination: rng.random_range(0..n),
                count: rng.random_range(1..4),
            };
            counts[t.origin][t.destination] += t.count;
            t
        })
        .collect();
    (trips, counts)
}

pub fn randn(n: usize, p: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng))
}

/// OLS with intercept via the normal equations and Gauss-Jordan elimination.
pub fn ols(x: &Array2<f64>, y: &[f64]) -> (Vec<f64>, f64) {
    let (n, p) = x.dim();
    let q = p + 1;
    let row = |i: usize| {
        let mut r = vec![1.0];
        r.extend(x.row(i).iter());
        r
    };
    let mut a = vec![vec![0.0; q + 1]; q];
    for i in 0..n {
        let r = row(i);
        for u in 0..q {
            for v in 0..q {
                a[u][v] += r[u] * r[v];
            }
            a[u][q] += r[u] * y[i];
        }
    }
    for c in 0..q {
        let piv = (c..q).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..q {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=q {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    let sol: Vec<f64> = (0..q).map(|i| a[i][q] / a[i][i]).collect();
    (sol[1..].to_vec(), sol[0])
}
