//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tribe_gnn::datagen::{generate, grow_tribe, GenConfig};
use tribe_gnn::graph::{Tribe, TribeStyleGraph};

pub const BENCH_SMALL: &str = include_str!("../../../../configs/bench-small.json");
pub const TRAIN_JSON: &str = include_str!("../../../../configs/train.json");

pub fn bench_small() -> GenConfig {
    GenConfig::from_json(BENCH_SMALL).expect("bench-small config parses")
}

pub fn bench_small_graph() -> TribeStyleGraph {
    generate(&bench_small()).expect("bench-small generates")
}

/// A random connected tribe with `2..=max_n` nodes and random growth settings.
pub fn random_tribe(rng: &mut ChaCha8Rng, max_n: usize) -> Tribe {
    let n = rng.gen_range(2..=max_n);
    let star = rng.gen::<f64>();
    let depth = rng.gen::<f64>();
    let ind = rng.gen::<f64>() * 0.8;
    grow_tribe(0, n, star, depth, ind, rng).expect("grown tribes are valid")
}

/// Symmetric 0/1 adjacency of the undirected view, built from the raw edge list.
pub fn dense_undirected(t: &Tribe) -> DMatrix<f64> {
    let n = t.len();
    let mut a = DMatrix::zeros(n, n);
    for &(s, d) in t.edges() {
        a[(s, d)] = 1.0;
        a[(d, s)] = 1.0;
    }
    a
}

/// All-pairs hop distances by Floyd-Warshall; `usize::MAX` marks unreachable pairs.
pub fn floyd_warshall(t: &Tribe) -> Vec<Vec<usize>> {
    let n = t.len();
    let inf = usize::MAX;
    let mut d = vec![vec![inf; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = 0;
    }
    for &(s, e) in t.edges() {
        d[s][e] = 1;
        d[e][s] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            if d[i][k] == inf {
                continue;
            }
            for j in 0..n {
                if d[k][j] != inf && d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Unit eigenvector of the largest eigenvalue of the undirected adjacency,
/// sign chosen so the largest-magnitude entry is positive.
pub fn dense_principal_eigenvector(t: &Tribe) -> Vec<f64> {
    let eig = dense_undirected(t).symmetric_eigen();
    let top = (0..eig.eigenvalues.len()).fold(0, |b, i| if eig.eigenvalues[i] > eig.eigenvalues[b] { i } else { b });
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// `(in, out)` degrees as column and row sums of the directed adjacency matrix.
pub fn dense_degrees(t: &Tribe) -> Vec<(usize, usize)> {
    let n = t.len();
    let mut a = vec![vec![0usize; n]; n];
    for &(s, d) in t.edges() {
        a[s][d] += 1;
    }
    (0..n).map(|v| ((0..n).map(|u| a[u][v]).sum(), a[v].iter().sum())).collect()
}

/// InfoNCE by explicit loops over anchors and candidates.
pub fn infonce_double_loop(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let q: Vec<Vec<f64>> = q.iter().map(unit).collect();
    let k: Vec<Vec<f64>> = k.iter().map(unit).collect();
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n {
        let sims: Vec<f64> = (0..n).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
        let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        total += lse - sims[i];
    }
    total / n as f64
}

pub fn bce_oracle(p: &[f64], y: &[bool], eps: f64) -> f64 {
    let mut s = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        s += if yi { pi.max(eps).ln() } else { (1.0 - pi).max(eps).ln() };
    }
    -s / p.len() as f64
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc_pairwise(scores: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !y[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if y[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Dense global propagation `sigma(D^-1 (A + I) H W)` layer by layer.
pub fn ggrl_dense(n: usize, edges: &[(usize, usize)], h0: &DMatrix<f64>, ws: &[DMatrix<f64>], linear: bool) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::identity(n, n);
    for &(u, v) in edges {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    for i in 0..n {
        let d: f64 = a.row(i).sum();
        for j in 0..n {
            a[(i, j)] /= d;
        }
    }
    let mut h = h0.clone();
    for w in ws {
        h = &a * &h * w;
        if !linear {
            h.apply(|x| *x = x.max(0.0));
        }
    }
    h
}

/// One-sided Welch test of `mean(a) > mean(b)`; returns `(t, p)`.
pub fn welch_greater(a: &[f64], b: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma) / a.len() as f64, var(b, mb) / b.len() as f64);
    let t = (ma - mb) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (t, 1.0 - dist.cdf(t))
}
