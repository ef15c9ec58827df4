//! Brute-force reference implementations and random instance generators.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

use num_rational::BigRational;
use num_traits::{FromPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nonnegative map of `n` values with a random shape: flat noise, peaked
/// softmax, or sparse.
pub fn random_map(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    match r.random_range(0..3) {
        0 => (0..n).map(|_| r.random::<f64>()).collect(),
        1 => {
            let logits: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
        _ => (0..n)
            .map(|_| {
                if r.random_bool(0.3) {
                    r.random::<f64>()
                } else {
                    r.random::<f64>() * 1e-3
                }
            })
            .collect(),
    }
}

/// Row-stochastic `n x n` matrix.
pub fn stochastic_rows(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 1e-3).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn brute_pairwise(agg_i: &[f64], cross_i: &[f64], agg_j: &[f64], cross_j: &[f64]) -> f64 {
    let mut total = 0.0;
    for p in 0..agg_i.len() {
        total += if agg_i[p] < cross_j[p] { agg_i[p] } else { cross_j[p] };
    }
    for p in 0..agg_j.len() {
        total += if cross_i[p] < agg_j[p] { cross_i[p] } else { agg_j[p] };
    }
    total
}

pub fn brute_self_cross(aggs: &[Vec<f64>], crosses: &[Vec<f64>]) -> f64 {
    let n = aggs.len();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                sum += brute_pairwise(&aggs[i], &crosses[i], &aggs[j], &crosses[j]);
                pairs += 1;
            }
        }
    }
    sum / pairs as f64
}

/// `sum_m c_m S[m] / sum_m c_m` over masked patches `m`.
pub fn brute_aggregate(cross: &[f64], self_rows: &[Vec<f64>], mask: &[bool]) -> Vec<f64> {
    let p = cross.len();
    let mut numerator = vec![0.0; p];
    let mut weight = 0.0;
    for m in 0..p {
        if mask[m] {
            weight += cross[m];
            for q in 0..p {
                numerator[q] += cross[m] * self_rows[m][q];
            }
        }
    }
    numerator.iter().map(|v| v / weight).collect()
}

/// One captured layer: per head, a `[token][patch]` cross matrix and a
/// `[patch][patch]` self matrix.
pub struct RawLayer {
    pub layer: u32,
    pub heads: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

/// `1/|L| sum_l 1/|H_l| sum_h A[l][h]` for cross and self attention.
pub fn brute_average(layers: &[RawLayer], keep: &[u32]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let chosen: Vec<&RawLayer> = layers.iter().filter(|l| keep.contains(&l.layer)).collect();
    let (tokens, patches) = (chosen[0].heads[0].0.len(), chosen[0].heads[0].1.len());
    let mut cross = vec![vec![0.0; patches]; tokens];
    let mut selfm = vec![vec![0.0; patches]; patches];
    for l in &chosen {
        let h = l.heads.len() as f64;
        let n = chosen.len() as f64;
        for (c, s) in &l.heads {
            for k in 0..tokens {
                for p in 0..patches {
                    cross[k][p] += c[k][p] / (h * n);
                }
            }
            for a in 0..patches {
                for b in 0..patches {
                    selfm[a][b] += s[a][b] / (h * n);
                }
            }
        }
    }
    (cross, selfm)
}

/// Direct `exp(q.k / sqrt(d)) / sum` without max subtraction.
/// `per_key` normalizes over queries for each key.
pub fn brute_attention(q: &[Vec<f64>], k: &[Vec<f64>], per_key: bool) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    let mut e = vec![vec![0.0; k.len()]; q.len()];
    for i in 0..q.len() {
        for j in 0..k.len() {
            let mut dot = 0.0;
            for c in 0..q[i].len() {
                dot += q[i][c] * k[j][c];
            }
            e[i][j] = (dot / d.sqrt()).exp();
        }
    }
    let mut out = e.clone();
    for i in 0..q.len() {
        for j in 0..k.len() {
            let total: f64 = if per_key {
                (0..q.len()).map(|a| e[a][j]).sum()
            } else {
                e[i].iter().sum()
            };
            out[i][j] = e[i][j] / total;
        }
    }
    out
}

/// Exhaustive Otsu in exact rational arithmetic.
///
/// The histogram spans `[min, max]` with `bins` equal bins, bin `t` holding
/// values in `(e_{t-1}, e_t]`, `e_t = min + (t + 1)(max - min)/bins`. Every
/// split `t` is scored by `w0 w1 (mu0 - mu1)^2` over integer bin levels;
/// the first maximal `t` is returned with the mask `v > e_t`.
pub fn otsu_rational(values: &[f64], bins: usize) -> Option<(usize, Vec<bool>)> {
    let q = |v: f64| BigRational::from_float(v).unwrap();
    let int = |n: usize| BigRational::from_usize(n).unwrap();
    let lo = q(values.iter().cloned().fold(f64::INFINITY, f64::min));
    let hi = q(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let range = &hi - &lo;
    if range.is_zero() {
        return None;
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        // v <= e_t  <=>  t >= ceil((v - lo) bins / range) - 1
        let x = ((q(v) - &lo) * int(bins) / &range).ceil();
        let t = x.to_integer().to_string().parse::<i64>().unwrap() - 1;
        counts[t.clamp(0, bins as i64 - 1) as usize] += 1;
    }
    let total = int(values.len());
    let mut level_sum = BigRational::zero();
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            level_sum += int(l * c);
        }
    }
    let mut best: Option<(usize, BigRational)> = None;
    let (mut n0, mut s0) = (0usize, BigRational::zero());
    for t in 0..bins - 1 {
        if counts[t] > 0 {
            n0 += counts[t];
            s0 += int(t * counts[t]);
        }
        let n1 = values.len() - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let mu0 = &s0 / int(n0);
        let mu1 = (&level_sum - &s0) / int(n1);
        let w0 = int(n0) / &total;
        let w1 = int(n1) / &total;
        let diff = mu0 - mu1;
        let var = w0 * w1 * &diff * &diff;
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((t, var));
        }
    }
    let (t, _) = best?;
    let edge = &lo + &range * int(t + 1) / int(bins);
    Some((t, values.iter().map(|&v| q(v) > edge).collect()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
