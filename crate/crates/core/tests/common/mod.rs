#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use osscl::corpus::Label;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, b: usize, e: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let v = randn(rng, e);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn labels(rng: &mut ChaCha8Rng, b: usize, classes: u32) -> Vec<u32> {
    (0..b).map(|_| rng.random_range(0..classes)).collect()
}

pub fn tensor(rows: &[Vec<f64>], dtype: DType) -> Tensor {
    let (b, e) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (b, e), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

/// Largest per-variable relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the
/// autograd gradient and central differences of `f`, over up to `per_var`
/// randomly chosen entries of each variable. Variables must be f64.
pub fn gradcheck(f: &dyn Fn() -> Tensor, vars: &[(String, Var)], per_var: usize, seed: u64) -> f64 {
    const H: f64 = 1e-6;
    let mut rng = rng(seed);
    let grads = f().backward().unwrap();
    let mut worst = 0.0f64;
    for (name, var) in vars {
        let analytic = flat(grads.get(var).unwrap_or_else(|| panic!("no gradient for {name}")));
        let base = flat(var.as_tensor());
        let idx: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..base.len())).collect()
        };
        let set = |v: &[f64]| {
            var.set(&Tensor::from_vec(v.to_vec(), var.dims(), &Device::Cpu).unwrap()).unwrap();
        };
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for &k in &idx {
            let mut v = base.clone();
            v[k] = base[k] + H;
            set(&v);
            let up = scalar(&f());
            v[k] = base[k] - H;
            set(&v);
            let down = scalar(&f());
            num.push((up - down) / (2.0 * H));
            ana.push(analytic[k]);
        }
        set(&base);
        let diff = num.iter().zip(&ana).map(|(n, a)| (n - a).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|x| x * x).sum::<f64>().sqrt().max(ana.iter().map(|x| x * x).sum::<f64>().sqrt());
        let err = if scale < 1e-9 { diff } else { diff / scale };
        assert!(err.is_finite(), "{name}: non-finite gradient error");
        worst = worst.max(err);
    }
    worst
}

/// Brute-force contrastive loss over explicit rows, anchor sum divided by B.
pub fn supcon_oracle(z: &[Vec<f64>], y: &[u32], tau: f64) -> f64 {
    let b = z.len();
    let mut total = 0.0;
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&j| j != i && y[j] == y[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..b {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for &p in &positives {
            inner += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total -= inner / positives.len() as f64;
    }
    total / b as f64
}

/// Scalar ArcFace logits with the margin at `margin_at` (if any).
pub fn arcface_oracle(emb: &[Vec<f64>], weights: &[Vec<f64>], s: f64, m: f64, margin_at: Option<&[u32]>) -> Vec<Vec<f64>> {
    let norm = |v: &[f64]| dot(v, v).sqrt();
    emb.iter()
        .enumerate()
        .map(|(i, e)| {
            weights
                .iter()
                .enumerate()
                .map(|(c, w)| {
                    let cos = dot(e, w) / (norm(e) * norm(w));
                    let is_target = margin_at.is_some_and(|l| l[i] as usize == c);
                    if !is_target {
                        s * cos
                    } else if cos > (std::f64::consts::PI - m).cos() {
                        s * (cos.acos() + m).cos()
                    } else {
                        s * (cos - m * m.sin())
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean over rows of `logsumexp(row) − row[target]`.
pub fn ce_oracle(logits: &[Vec<f64>], targets: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    total / logits.len() as f64
}

/// Pairwise Mann–Whitney count.
pub fn auc_pairs(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li == Label::Anomaly && *lj == Label::Normal {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

/// Empirical ROC vertices, one per distinct threshold, from (0, 0) to (1, 1).
pub fn roc(scores: &[f64], labels: &[Label]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|l| **l == Label::Anomaly).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == Label::Anomaly).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == Label::Normal).count() as f64;
        pts.push((fp / neg, tp / pos));
    }
    pts
}

/// Trapezoidal area under the ROC for FPR in [0, p].
pub fn roc_area(pts: &[(f64, f64)], p: f64) -> f64 {
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= p {
            break;
        }
        let (xe, ye) = if x1 > p { (p, y0 + (y1 - y0) * (p - x0) / (x1 - x0)) } else { (x1, y1) };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area
}
