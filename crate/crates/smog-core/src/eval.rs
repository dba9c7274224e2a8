//! Evaluation heads: linear probe on frozen features, weighted kNN, and
//! label entropy of the learned groups.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::rng::{derive, Stream};

/// Linear-probe training settings (full-batch softmax regression).
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl ProbeConfig {
    pub fn desk_default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.5,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub loss_curve: Vec<f64>,
}

fn softmax_rows(logits: &mut [f64], n: usize, c: usize) {
    for r in 0..n {
        let row = &mut logits[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn check_split(n: usize, d: usize, x: &[f64], y: &[u16], classes: usize) -> Result<()> {
    if n == 0 || x.len() != n * d || y.len() != n {
        return Err(CoreError::Config(alloc::format!(
            "feature table {}x{d} does not match {} labels",
            x.len() / d.max(1),
            y.len()
        )));
    }
    if y.iter().any(|&l| l as usize >= classes) {
        return Err(CoreError::Config("label outside class range".into()));
    }
    Ok(())
}

/// Fit a multinomial logistic regression on the train split and report
/// test-split accuracy. Convex objective and zero init keep this fully
/// deterministic.
pub fn linear_probe(
    train_x: &[f64],
    train_y: &[u16],
    test_x: &[f64],
    test_y: &[u16],
    d: usize,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let n = train_y.len();
    let m = test_y.len();
    check_split(n, d, train_x, train_y, classes)?;
    check_split(m, d, test_x, test_y, classes)?;
    let mut seen = vec![false; classes];
    for &l in train_y {
        seen[l as usize] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(CoreError::Config(
            "probe train split contains fewer than 2 classes".into(),
        ));
    }

    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut probs = vec![0.0f64; n * classes];
    for _ in 0..cfg.epochs {
        for r in 0..n {
            for k in 0..classes {
                let mut acc = b[k];
                for j in 0..d {
                    acc += w[k * d + j] * train_x[r * d + j];
                }
                probs[r * classes + k] = acc;
            }
        }
        softmax_rows(&mut probs, n, classes);
        let mut loss = 0.0;
        for r in 0..n {
            loss -= libm::log(probs[r * classes + train_y[r] as usize].max(1e-300));
        }
        loss_curve.push(loss / n as f64);
        // gradient of mean CE: (p - onehot)ᵀ x / n
        for r in 0..n {
            probs[r * classes + train_y[r] as usize] -= 1.0;
        }
        for k in 0..classes {
            let mut gb = 0.0;
            for r in 0..n {
                gb += probs[r * classes + k];
            }
            b[k] -= cfg.lr * gb / n as f64;
            for j in 0..d {
                let mut g = 0.0;
                for r in 0..n {
                    g += probs[r * classes + k] * train_x[r * d + j];
                }
                w[k * d + j] -= cfg.lr * (g / n as f64 + cfg.weight_decay * w[k * d + j]);
            }
        }
    }

    let mut correct = 0usize;
    let mut class_hits = vec![0usize; classes];
    let mut class_total = vec![0usize; classes];
    for r in 0..m {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..classes {
            let mut acc = b[k];
            for j in 0..d {
                acc += w[k * d + j] * test_x[r * d + j];
            }
            if acc > best_v {
                best_v = acc;
                best = k;
            }
        }
        let y = test_y[r] as usize;
        class_total[y] += 1;
        if best == y {
            correct += 1;
            class_hits[y] += 1;
        }
    }
    let per_class = (0..classes)
        .map(|k| {
            if class_total[k] == 0 {
                0.0
            } else {
                class_hits[k] as f64 / class_total[k] as f64
            }
        })
        .collect();
    Ok(ProbeResult {
        top1: correct as f64 / m as f64,
        per_class,
        loss_curve,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Weighted k-nearest-neighbour accuracy: each of the k most cosine-similar
/// train points votes for its label with weight exp(sim / 0.1).
pub fn knn_eval(
    train_x: &[f64],
    train_y: &[u16],
    test_x: &[f64],
    test_y: &[u16],
    d: usize,
    classes: usize,
    k: usize,
) -> Result<f64> {
    let n = train_y.len();
    let m = test_y.len();
    check_split(n, d, train_x, train_y, classes)?;
    check_split(m, d, test_x, test_y, classes)?;
    if k == 0 {
        return Err(CoreError::Config("knn needs k >= 1".into()));
    }
    let k = k.min(n);
    let mut correct = 0usize;
    for r in 0..m {
        let q = &test_x[r * d..(r + 1) * d];
        let mut sims: Vec<(f64, u16)> = (0..n)
            .map(|t| (cosine(q, &train_x[t * d..(t + 1) * d]), train_y[t]))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut votes = vec![0.0f64; classes];
        for &(sim, label) in sims.iter().take(k) {
            votes[label as usize] += libm::exp(sim / 0.1);
        }
        let best = votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if best == test_y[r] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / m as f64)
}

/// Label entropy of the group assignment.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    /// Natural-log label entropy per group; `None` for empty groups.
    pub per_group: Vec<Option<f64>>,
    /// Size-weighted mean entropy over non-empty groups.
    pub mean_entropy: f64,
    /// Same statistic under uniform random assignment of the same points.
    pub random_baseline: f64,
}

fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * libm::log(p);
        }
    }
    h
}

fn weighted_mean_entropy(assignments: &[usize], labels: &[u16], l: usize, classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut tables = vec![vec![0usize; classes]; l];
    for (&g, &y) in assignments.iter().zip(labels) {
        tables[g][y as usize] += 1;
    }
    let mut acc = 0.0;
    let n = assignments.len() as f64;
    let per_group: Vec<Option<f64>> = tables
        .iter()
        .map(|t| {
            let size: usize = t.iter().sum();
            if size == 0 {
                None
            } else {
                let h = entropy(t);
                acc += size as f64 / n * h;
                Some(h)
            }
        })
        .collect();
    (per_group, acc)
}

/// How well the groups align with (held-out) class labels, compared against
/// uniformly random groups of the same points.
pub fn group_entropy(
    assignments: &[usize],
    labels: &[u16],
    l: usize,
    classes: usize,
    seed: u64,
) -> Result<EntropyReport> {
    if assignments.len() != labels.len() || assignments.is_empty() {
        return Err(CoreError::Config("assignment/label length mismatch".into()));
    }
    if assignments.iter().any(|&g| g >= l) {
        return Err(CoreError::Config("assignment outside group range".into()));
    }
    if labels.iter().any(|&y| y as usize >= classes) {
        return Err(CoreError::Config("label outside class range".into()));
    }
    let (per_group, mean_entropy) = weighted_mean_entropy(assignments, labels, l, classes);
    // baseline: average over shuffled assignments (same group sizes)
    const TRIALS: usize = 8;
    let mut baseline = 0.0;
    let mut shuffled = assignments.to_vec();
    for t in 0..TRIALS {
        let mut rng = derive(seed, Stream::Baseline, &[t as u64]);
        shuffled.shuffle(&mut rng);
        baseline += weighted_mean_entropy(&shuffled, labels, l, classes).1;
    }
    Ok(EntropyReport {
        per_group,
        mean_entropy,
        random_baseline: baseline / TRIALS as f64,
    })
}
