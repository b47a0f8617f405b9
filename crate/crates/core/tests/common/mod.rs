//! Independent oracles for the integration and acceptance suites.
//!
//! Nothing here calls into the geometry, protocol or evaluation code paths
//! it is used to check: inputs are copied out into plain nested vectors and
//! every quantity is recomputed with straight-line loops.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repgeo::repstore::{LayerStack, SampleGeometryInput};

/// `[question][layer][coord]`
pub type Reps = Vec<Vec<Vec<f64>>>;

pub struct PlainSample {
    pub clean: Reps,
    pub blanked: Reps,
    /// `[question][variant][layer][coord]`
    pub variants: Vec<Reps>,
}

fn rows(stack: &LayerStack) -> Vec<Vec<f64>> {
    stack.rows().map(|r| r.to_vec()).collect()
}

pub fn to_plain(sample: &SampleGeometryInput) -> PlainSample {
    PlainSample {
        clean: sample.clean().iter().map(rows).collect(),
        blanked: sample.blanked().iter().map(rows).collect(),
        variants: sample
            .variants()
            .iter()
            .map(|g| g.iter().map(rows).collect())
            .collect(),
    }
}

/// Straight-line per-layer (RSM, DC, RSI), written directly from the
/// algorithm's loop structure.
pub fn oracle_profile(s: &PlainSample, eps: f64) -> Vec<(f64, f64, f64)> {
    let q = s.clean.len();
    let k = q - 1;
    let layers = s.clean[0].len();
    let d = s.clean[0][0].len();
    let m_count = s.variants[0].len();
    let mut out = Vec::new();
    for l in 0..layers {
        // (1) shift magnitude
        let mut delta = vec![vec![0.0; d]; q];
        let mut mag = vec![0.0; q];
        for i in 0..q {
            let mut ss = 0.0;
            for j in 0..d {
                delta[i][j] = s.clean[i][l][j] - s.blanked[i][l][j];
                ss += delta[i][j] * delta[i][j];
            }
            mag[i] = ss.sqrt();
        }
        let mut mu_s = 0.0;
        for i in 1..=k {
            mu_s += mag[i];
        }
        mu_s /= k as f64;
        let mut var_s = 0.0;
        for i in 1..=k {
            var_s += (mag[i] - mu_s) * (mag[i] - mu_s);
        }
        let sigma_s = (var_s / (k as f64 - 1.0)).sqrt();
        let rsm = (mag[0] - mu_s) / (sigma_s + eps);

        // (2) directional collapse
        let mut sbar = vec![0.0; d];
        for i in 1..=k {
            for j in 0..d {
                sbar[j] += delta[i][j];
            }
        }
        for v in sbar.iter_mut() {
            *v /= k as f64;
        }
        let mut num = 0.0;
        let mut n0 = 0.0;
        let mut ns = 0.0;
        for j in 0..d {
            num += delta[0][j] * sbar[j];
            n0 += delta[0][j] * delta[0][j];
            ns += sbar[j] * sbar[j];
        }
        let dc = num / ((n0.sqrt() + eps) * (ns.sqrt() + eps));

        // (3) stability index
        let mut r = vec![0.0; q];
        for i in 0..q {
            let mut centroid = vec![0.0; d];
            for m in 0..m_count {
                for j in 0..d {
                    centroid[j] += s.variants[i][m][l][j];
                }
            }
            for c in centroid.iter_mut() {
                *c /= m_count as f64;
            }
            let mut total = 0.0;
            for m in 0..m_count {
                let mut ss = 0.0;
                for j in 0..d {
                    let diff = s.variants[i][m][l][j] - centroid[j];
                    ss += diff * diff;
                }
                total += ss.sqrt();
            }
            r[i] = total / m_count as f64;
        }
        let mut mu_r = 0.0;
        for i in 1..=k {
            mu_r += r[i];
        }
        mu_r /= k as f64;
        let mut var_r = 0.0;
        for i in 1..=k {
            var_r += (r[i] - mu_r) * (r[i] - mu_r);
        }
        let sigma_r = (var_r / (k as f64 - 1.0)).sqrt();
        let rsi = (r[0] - mu_r) / (sigma_r + eps);
        out.push((rsm, dc, rsi));
    }
    out
}

fn random_stack(rng: &mut ChaCha8Rng, layers: usize, dim: usize, scale: f64) -> LayerStack {
    let rows: Vec<Vec<f64>> = (0..layers)
        .map(|_| {
            (0..dim)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    LayerStack::from_rows(&rows).unwrap()
}

/// Random sample with `L <= 4`, `d <= 8`, `2 <= K <= 5`, `2 <= M <= 4`.
pub fn random_instance(seed: u64) -> SampleGeometryInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(1..=4);
    let dim = rng.random_range(1..=8);
    let k = rng.random_range(2..=5);
    let m = rng.random_range(2..=4);
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    let clean = (0..=k)
        .map(|_| random_stack(&mut rng, layers, dim, scale))
        .collect();
    let blanked = (0..=k)
        .map(|_| random_stack(&mut rng, layers, dim, scale))
        .collect();
    let variants = (0..=k)
        .map(|_| {
            (0..m)
                .map(|_| random_stack(&mut rng, layers, dim, scale))
                .collect()
        })
        .collect();
    SampleGeometryInput::new(format!("rand-{seed}"), clean, blanked, variants).unwrap()
}

/// All-pairs AUC with ties counted as one half.
pub fn brute_force_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut twice_wins = 0u64;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                twice_wins += 2;
            } else if m == n {
                twice_wins += 1;
            }
        }
    }
    (twice_wins as f64 / 2.0) / (members.len() * nonmembers.len()) as f64
}

/// Scans every candidate threshold (observed scores and +inf), keeping the
/// best TPR among those with FPR within the target.
pub fn threshold_scan_tpr(members: &[f64], nonmembers: &[f64], target: f64) -> f64 {
    let mut candidates: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    candidates.push(f64::INFINITY);
    let mut best = 0.0f64;
    for &t in &candidates {
        let fp = nonmembers.iter().filter(|&&s| s > t).count();
        let tp = members.iter().filter(|&&s| s > t).count();
        if fp as f64 / nonmembers.len() as f64 <= target {
            best = best.max(tp as f64 / members.len() as f64);
        }
    }
    best
}

/// Random score sets with deliberate ties (scores drawn from a small grid
/// half the time).
pub fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nm = rng.random_range(1..=25);
    let nn = rng.random_range(1..=25);
    let grid = rng.random_bool(0.5);
    let mut draw = |shift: f64| {
        if grid {
            rng.random_range(0..6) as f64 + shift.round()
        } else {
            rng.random_range(-1.0..1.0) + shift
        }
    };
    let members = (0..nm).map(|_| draw(0.3)).collect();
    let nonmembers = (0..nn).map(|_| draw(0.0)).collect();
    (members, nonmembers)
}

pub fn median_oracle(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn sample_std_oracle(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
