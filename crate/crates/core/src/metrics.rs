//! Generative quality scores, rank-sum checkpoint selection and LOWESS.

use autograd::nn::{Conv2d, Init, Linear};
use autograd::{AdamConfig, Graph, ParamStore, Var};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cut::images_to_tensor;
use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::reward::GoalReport;

pub const NUM_CLASSES: usize = 4;

/// Coarse pose class of a rendered frame: line hidden, partially visible,
/// visible but not triangulated, triangulated.
pub fn pose_bucket(report: &GoalReport) -> usize {
    if report.n_mask == 0 {
        0
    } else if !report.goal1 {
        1
    } else if !report.goal2 {
        2
    } else {
        3
    }
}

/// Small convolutional classifier over gray frames exposing its
/// penultimate activations as a feature vector.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    convs: Vec<Conv2d>,
    fc: Linear,
    out: Linear,
    pub store: ParamStore,
    pub image_size: usize,
    pub feature_dim: usize,
}

const SLOPE: f64 = 0.2;

impl FeatureNet {
    pub fn new<R: Rng + ?Sized>(image_size: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        if image_size < 8 || image_size % 8 != 0 {
            return Err(Error::Config(format!("feature net needs a multiple of 8, got {image_size}")));
        }
        if feature_dim < 2 {
            return Err(Error::Config("feature dimension must be at least 2".into()));
        }
        let mut store = ParamStore::new();
        let widths = [(1, 4), (4, 8), (8, 8)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| Conv2d::new(&mut store, &format!("feat.conv{}", i + 1), ci, co, 4, 2, 1, Init::FanIn, rng))
            .collect::<autograd::Result<Vec<_>>>()?;
        let side = image_size / 8;
        let fc = Linear::new(&mut store, "feat.fc", 8 * side * side, feature_dim, Init::FanIn, rng)?;
        let out = Linear::new(&mut store, "feat.out", feature_dim, NUM_CLASSES, Init::FanIn, rng)?;
        Ok(Self {
            convs,
            fc,
            out,
            store,
            image_size,
            feature_dim,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, &self.store, h)?;
            h = g.leaky_relu(h, SLOPE);
        }
        let n = g.shape(h)[0];
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat])?;
        let f = self.fc.forward(g, &self.store, h)?;
        let f = g.leaky_relu(f, SLOPE);
        let logits = self.out.forward(g, &self.store, f)?;
        Ok((f, logits))
    }

    /// Class probabilities and features for each image.
    pub fn infer(&self, imgs: &[ImageBuffer]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut probs = Vec::with_capacity(imgs.len());
        let mut feats = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(32) {
            let mut g = Graph::new();
            let x = g.input(images_to_tensor(chunk)?);
            let (f, logits) = self.forward(&mut g, x)?;
            for row in g.value(logits).data().chunks(NUM_CLASSES) {
                probs.push(softmax(row));
            }
            for row in g.value(f).data().chunks(self.feature_dim) {
                feats.push(row.to_vec());
            }
        }
        Ok((probs, feats))
    }

    /// Cross-entropy training on labeled frames; returns the final epoch's mean loss.
    pub fn train<R: Rng + ?Sized>(&mut self, imgs: &[ImageBuffer], labels: &[usize], epochs: usize, rng: &mut R) -> Result<f64> {
        if imgs.len() != labels.len() || imgs.is_empty() {
            return Err(Error::Contract("feature net needs one label per image".into()));
        }
        let adam = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut order: Vec<usize> = (0..imgs.len()).collect();
        let mut last = f64::NAN;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(16) {
                let batch: Vec<ImageBuffer> = chunk.iter().map(|&i| imgs[i].clone()).collect();
                let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::new();
                let x = g.input(images_to_tensor(&batch)?);
                let (_, logits) = self.forward(&mut g, x)?;
                let loss = g.cross_entropy_rows(logits, &targets)?;
                total += g.scalar(loss);
                batches += 1;
                let grads = g.backward(loss)?;
                self.store.accumulate(&g, &grads);
                self.store.adam_step(&adam)?;
            }
            last = total / batches as f64;
            if !last.is_finite() {
                return Err(Error::TrainingDiverged("feature net loss is not finite".into()));
            }
        }
        Ok(last)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// `exp(E_x KL(p(y|x) || p(y)))` per split; mean and population standard
/// deviation over the splits. Splits are contiguous.
pub fn inception_score(conditionals: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = conditionals.len();
    if n == 0 || splits == 0 {
        return Err(Error::Contract("inception score needs images and at least one split".into()));
    }
    if n < splits {
        return Err(Error::Contract(format!("{n} images for {splits} splits")));
    }
    let c = conditionals[0].len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &conditionals[s * n / splits..(s + 1) * n / splits];
        let mut marginal = vec![0.0; c];
        for p in part {
            if p.len() != c {
                return Err(Error::Shape("conditionals have different class counts".into()));
            }
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mean_kl = part.iter().map(|p| kl(p, &marginal)).sum::<f64>() / part.len() as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Set when `1e-6 I` was added because there were too few samples for a
    /// full-rank covariance.
    pub diagonal_loading: bool,
}

impl GaussianStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let f = mu.len();
        if sigma.nrows() != f || sigma.ncols() != f {
            return Err(Error::Shape(format!("covariance {}x{} for mean of length {f}", sigma.nrows(), sigma.ncols())));
        }
        if (&sigma - sigma.transpose()).abs().max() > 1e-9 {
            return Err(Error::Contract("covariance is not symmetric".into()));
        }
        Ok(Self {
            mu,
            sigma,
            diagonal_loading: false,
        })
    }

    /// Sample mean and `1/(n-1)` covariance of feature rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Contract("at least two samples are needed for a covariance".into()));
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("feature rows have different lengths".into()));
        }
        let x = DMatrix::from_fn(n, f, |i, j| rows[i][j]);
        let mu = DVector::from_fn(f, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        let loading = n < f + 1;
        if loading {
            sigma += DMatrix::identity(f, f) * 1e-6;
        }
        Ok(Self {
            mu,
            sigma,
            diagonal_loading: loading,
        })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::Contract(format!("feature dimensions {} and {} differ", a.mu.len(), b.mu.len())));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let ra = sym_sqrt(&a.sigma);
    let inner = &ra * &b.sigma * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub epoch: usize,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedCheckpoint {
    pub score: CheckpointScore,
    pub is_rank: usize,
    pub fid_rank: usize,
    pub rank_sum: usize,
}

/// 1-based ranks where tied values share the smallest rank.
fn min_ranks(values: &[f64], better: impl Fn(f64, f64) -> bool) -> Vec<usize> {
    values
        .iter()
        .map(|&v| 1 + values.iter().filter(|&&o| better(o, v)).count())
        .collect()
}

/// Ranks every checkpoint by IS (higher is better) and FID (lower is
/// better) and orders by rank sum, then lower FID, then earlier epoch.
/// Returns the whole ordering; the first `top_n` are the selection.
pub fn rank_checkpoints(scores: &[CheckpointScore]) -> Result<Vec<RankedCheckpoint>> {
    if scores.is_empty() {
        return Err(Error::Contract("no checkpoints to rank".into()));
    }
    if scores.iter().any(|s| s.is_mean.is_nan() || s.fid.is_nan()) {
        return Err(Error::Contract("checkpoint scores contain NaN".into()));
    }
    let is: Vec<f64> = scores.iter().map(|s| s.is_mean).collect();
    let fid: Vec<f64> = scores.iter().map(|s| s.fid).collect();
    let is_rank = min_ranks(&is, |o, v| o > v);
    let fid_rank = min_ranks(&fid, |o, v| o < v);
    let mut ranked: Vec<RankedCheckpoint> = scores
        .iter()
        .enumerate()
        .map(|(i, &score)| RankedCheckpoint {
            score,
            is_rank: is_rank[i],
            fid_rank: fid_rank[i],
            rank_sum: is_rank[i] + fid_rank[i],
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.rank_sum
            .cmp(&b.rank_sum)
            .then(a.score.fid.total_cmp(&b.score.fid))
            .then(a.score.epoch.cmp(&b.score.epoch))
    });
    Ok(ranked)
}

pub fn rank_sum_select(scores: &[CheckpointScore], top_n: usize) -> Result<Vec<RankedCheckpoint>> {
    let mut ranked = rank_checkpoints(scores)?;
    ranked.truncate(top_n);
    Ok(ranked)
}

fn tricube(u: f64) -> f64 {
    let t = 1.0 - u.abs().powi(3);
    if t <= 0.0 {
        0.0
    } else {
        t * t * t
    }
}

/// Weighted linear fit evaluated at `x0`; falls back to the weighted mean
/// when the weighted abscissae have no spread.
pub fn weighted_linear_at(xs: &[f64], ys: &[f64], w: &[f64], x0: f64) -> f64 {
    let sw: f64 = w.iter().sum();
    let xm = xs.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ym = ys.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((x, y), w) in xs.iter().zip(ys).zip(w) {
        sxx += w * (x - xm) * (x - xm);
        sxy += w * (x - xm) * (y - ym);
    }
    let spread = xs.iter().map(|x| (x - xm).abs()).fold(0.0, f64::max);
    if sxx <= 1e-24 * sw * spread * spread || sxx == 0.0 {
        return ym;
    }
    ym + sxy / sxx * (x0 - xm)
}

/// Single-pass LOWESS: at each point a tricube-weighted linear fit over the
/// `ceil(frac * n)` nearest neighbors.
pub fn lowess(xs: &[f64], ys: &[f64], frac: f64) -> Result<Vec<f64>> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::Contract("lowess needs at least two points".into()));
    }
    if ys.len() != n {
        return Err(Error::Shape(format!("{n} abscissae and {} ordinates", ys.len())));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Contract(format!("frac {frac} outside (0, 1]")));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract("lowess abscissae must be strictly increasing".into()));
    }
    let r = ((frac * n as f64).ceil() as usize).clamp(1, n);
    let mut out = Vec::with_capacity(n);
    let mut lo = 0usize;
    for i in 0..n {
        let x0 = xs[i];
        while lo + r < n && x0 - xs[lo] > xs[lo + r] - x0 {
            lo += 1;
        }
        let hi = lo + r;
        let d_max = (x0 - xs[lo]).max(xs[hi - 1] - x0);
        if d_max == 0.0 {
            out.push(ys[i]);
            continue;
        }
        let w: Vec<f64> = xs[lo..hi].iter().map(|x| tricube((x - x0) / d_max)).collect();
        out.push(weighted_linear_at(&xs[lo..hi], &ys[lo..hi], &w, x0));
    }
    Ok(out)
}

/// Value of a LOWESS curve at `x`, linearly interpolated between samples.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    for i in 1..xs.len() {
        if x <= xs[i] {
            let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            return ys[i - 1] + t * (ys[i] - ys[i - 1]);
        }
    }
    *ys.last().unwrap()
}

/// IS of translated images and FID against real target features.
pub fn score_images(net: &FeatureNet, generated: &[ImageBuffer], real: &GaussianStats, splits: usize) -> Result<(f64, f64, f64)> {
    let (probs, feats) = net.infer(generated)?;
    let (is_mean, is_std) = inception_score(&probs, splits)?;
    let fid = frechet_distance(&GaussianStats::from_features(&feats)?, real)?;
    Ok((is_mean, is_std, fid))
}

/// Features of real images as a Gaussian.
pub fn feature_stats(net: &FeatureNet, imgs: &[ImageBuffer]) -> Result<GaussianStats> {
    GaussianStats::from_features(&net.infer(imgs)?.1)
}
