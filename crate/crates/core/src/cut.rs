//! Contrastive unpaired translation: generator, patch discriminator,
//! projection head, the least-squares adversarial and patch contrastive
//! losses, and the alternating training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use autograd::nn::{Conv2d, ConvTranspose2d, Init, Linear};
use autograd::{AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{io_err, Error, Result};
use crate::raster::ImageBuffer;

/// Number of feature taps the generator exposes.
pub const MAX_TAPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutConfig {
    pub lambda_gan: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub tau: f64,
    /// Patches per tap; each query sees the other `n_patches - 1` as negatives.
    pub n_patches: usize,
    pub num_taps: usize,
    /// Projection dimension.
    pub k: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub epochs: usize,
    pub save_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Base channel width of the generator.
    pub ngf: usize,
    /// Base channel width of the discriminator.
    pub ndf: usize,
    pub image_size: usize,
    pub norm_eps: f64,
}

impl Default for CutConfig {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_x: 1.0,
            lambda_y: 1.0,
            tau: 0.07,
            n_patches: 32,
            num_taps: 5,
            k: 32,
            a: 0.0,
            b: 1.0,
            c: 1.0,
            epochs: 400,
            save_every: 10,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            ngf: 8,
            ndf: 8,
            image_size: 64,
            norm_eps: 1e-5,
        }
    }
}

impl CutConfig {
    /// 40 epochs, a checkpoint per epoch and narrow networks for single-core runs.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            save_every: 1,
            ngf: 4,
            ndf: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.n_patches < 2 {
            return bad("n_patches must be at least 2 so every query has a negative");
        }
        if self.num_taps < 1 || self.num_taps > MAX_TAPS {
            return bad("num_taps must be between 1 and 5");
        }
        if self.k < 1 || self.ngf < 1 || self.ndf < 1 {
            return bad("k, ngf and ndf must be positive");
        }
        if self.epochs < 1 || self.save_every < 1 || self.batch_size < 1 {
            return bad("epochs, save_every and batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad("image_size must be a positive multiple of 8");
        }
        if [self.lambda_gan, self.lambda_x, self.lambda_y].iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

const SLOPE: f64 = 0.2;

fn init() -> Init {
    Init::Normal(0.02)
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(store, &format!("{name}.c1"), ch, ch, 3, 1, 1, init(), rng)?,
            c2: Conv2d::new(store, &format!("{name}.c2"), ch, ch, 3, 1, 1, init(), rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let h = self.c1.forward(g, store, x)?;
        let h = g.instance_norm(h, eps)?;
        let h = g.leaky_relu(h, SLOPE);
        let h = self.c2.forward(g, store, h)?;
        let h = g.instance_norm(h, eps)?;
        Ok(g.add(x, h)?)
    }
}

/// Encoder of three stride-2 convolutions and two residual blocks; decoder
/// of one residual block, three transposed convolutions and a `tanh` output.
#[derive(Debug, Clone)]
pub struct Generator {
    down: Vec<Conv2d>,
    enc_res: Vec<ResBlock>,
    dec_res: ResBlock,
    up: Vec<ConvTranspose2d>,
    out: Conv2d,
    widths: [usize; 3],
    eps: f64,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &CutConfig, rng: &mut R) -> Result<Self> {
        let widths = [cfg.ngf, 2 * cfg.ngf, 2 * cfg.ngf];
        let ins = [1, widths[0], widths[1]];
        let down = (0..3)
            .map(|i| Conv2d::new(store, &format!("gen.down{}", i + 1), ins[i], widths[i], 3, 2, 1, init(), rng))
            .collect::<autograd::Result<Vec<_>>>()?;
        let enc_res = (0..2)
            .map(|i| ResBlock::new(store, &format!("gen.res{}", i + 1), widths[2], rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_res = ResBlock::new(store, "gen.res3", widths[2], rng)?;
        let up_io = [(widths[2], widths[1]), (widths[1], widths[0]), (widths[0], widths[0])];
        let up = up_io
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| ConvTranspose2d::new(store, &format!("gen.up{}", i + 1), ci, co, 4, 2, 1, init(), rng))
            .collect::<autograd::Result<Vec<_>>>()?;
        let out = Conv2d::new(store, "gen.out", widths[0], 1, 3, 1, 1, init(), rng)?;
        Ok(Self {
            down,
            enc_res,
            dec_res,
            up,
            out,
            widths,
            eps: cfg.norm_eps,
        })
    }

    /// Channel count at each tap: the raw input, the three downsampling
    /// stages and the first residual block.
    pub fn tap_channels(&self) -> [usize; MAX_TAPS] {
        [1, self.widths[0], self.widths[1], self.widths[2], self.widths[2]]
    }

    /// Encoder features at the first `num_taps` taps. Stops as soon as the
    /// last requested tap is computed.
    pub fn encode_taps(&self, g: &mut Graph, store: &ParamStore, x: Var, num_taps: usize) -> Result<Vec<Var>> {
        let mut taps = vec![x];
        let mut h = x;
        for conv in &self.down {
            if taps.len() >= num_taps {
                return Ok(taps);
            }
            h = conv.forward(g, store, h)?;
            h = g.instance_norm(h, self.eps)?;
            h = g.leaky_relu(h, SLOPE);
            taps.push(h);
        }
        if taps.len() < num_taps {
            taps.push(self.enc_res[0].forward(g, store, h, self.eps)?);
        }
        Ok(taps)
    }

    /// Full encoder pass returning all taps and the encoder output.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Vec<Var>, Var)> {
        let taps = self.encode_taps(g, store, x, MAX_TAPS)?;
        let h = self.enc_res[1].forward(g, store, taps[MAX_TAPS - 1], self.eps)?;
        Ok((taps, h))
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let mut h = self.dec_res.forward(g, store, h, self.eps)?;
        for conv in &self.up {
            h = conv.forward(g, store, h)?;
            h = g.instance_norm(h, self.eps)?;
            h = g.leaky_relu(h, SLOPE);
        }
        let h = self.out.forward(g, store, h)?;
        Ok(g.tanh(h))
    }

    /// `G_dec(G_enc(x))` together with the encoder taps of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let (taps, h) = self.encode(g, store, x)?;
        Ok((self.decode(g, store, h)?, taps))
    }
}

/// Patch classifier producing a score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    eps: f64,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &CutConfig, rng: &mut R) -> Result<Self> {
        let w = cfg.ndf;
        Ok(Self {
            c1: Conv2d::new(store, "disc.c1", 1, w, 4, 2, 1, init(), rng)?,
            c2: Conv2d::new(store, "disc.c2", w, 2 * w, 4, 2, 1, init(), rng)?,
            c3: Conv2d::new(store, "disc.c3", 2 * w, 1, 3, 1, 1, init(), rng)?,
            eps: cfg.norm_eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, store, x)?;
        let h = g.leaky_relu(h, SLOPE);
        let h = self.c2.forward(g, store, h)?;
        let h = g.instance_norm(h, self.eps)?;
        let h = g.leaky_relu(h, SLOPE);
        self.c3.forward(g, store, h).map_err(Error::from)
    }
}

/// One two-layer perceptron per tap, followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    mlps: Vec<(Linear, Linear)>,
    pub k: usize,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_channels: &[usize], k: usize, rng: &mut R) -> Result<Self> {
        let mlps = in_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                Ok((
                    Linear::new(store, &format!("head.{l}.fc1"), c, k, Init::FanIn, rng)?,
                    Linear::new(store, &format!("head.{l}.fc2"), k, k, Init::FanIn, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mlps, k })
    }

    pub fn num_taps(&self) -> usize {
        self.mlps.len()
    }

    /// Maps `[s, c]` features of tap `l` to `[s, k]` unit vectors.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, l: usize, feats: Var) -> Result<Var> {
        let (fc1, fc2) = self
            .mlps
            .get(l)
            .ok_or_else(|| Error::Contract(format!("projection head has no tap {l}")))?;
        let h = fc1.forward(g, store, feats)?;
        let h = g.relu(h);
        let h = fc2.forward(g, store, h)?;
        Ok(g.l2_normalize_rows(h)?)
    }
}

/// Generator and projection head share one parameter store (they are
/// updated together); the discriminator has its own.
#[derive(Debug, Clone)]
pub struct CutModel {
    pub cfg: CutConfig,
    pub gen: Generator,
    pub head: ProjectionHead,
    pub disc: Discriminator,
    pub gh_store: ParamStore,
    pub d_store: ParamStore,
}

impl CutModel {
    pub fn new<R: Rng + ?Sized>(cfg: &CutConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut gh_store = ParamStore::new();
        let gen = Generator::new(&mut gh_store, cfg, rng)?;
        let head = ProjectionHead::new(&mut gh_store, &gen.tap_channels()[..cfg.num_taps], cfg.k, rng)?;
        let mut d_store = ParamStore::new();
        let disc = Discriminator::new(&mut d_store, cfg, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            gen,
            head,
            disc,
            gh_store,
            d_store,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_stores(&[&self.gh_store, &self.d_store])
    }

    /// Builds the architecture for `cfg` and loads generator and head weights.
    pub fn from_checkpoint(cfg: &CutConfig, ck: &Checkpoint) -> Result<Self> {
        let mut rng = crate::rngs::stream(0, "restore");
        let mut m = Self::new(cfg, &mut rng)?;
        ck.restore_into(&mut m.gh_store)?;
        if ck.get("disc.c1.weight").is_some() {
            ck.restore_into(&mut m.d_store)?;
        }
        Ok(m)
    }

    pub fn translate(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(std::slice::from_ref(img))?);
        let (y, _) = self.gen.forward(&mut g, &self.gh_store, x)?;
        ImageBuffer::from_signed(img.width, img.height, g.value(y).data())
    }
}

/// Stacks gray images into `[n, 1, h, w]` scaled to `[-1, 1]`.
pub fn images_to_tensor(imgs: &[ImageBuffer]) -> Result<Tensor> {
    let first = imgs.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(imgs.len() * w * h);
    for img in imgs {
        if img.channels != 1 || img.width != w || img.height != h {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} with {w}x{h}x1",
                img.width, img.height, img.channels
            )));
        }
        data.extend(img.to_signed());
    }
    Ok(Tensor::new(&[imgs.len(), 1, h, w], data)?)
}

fn check_batch(g: &Graph, v: Var) -> Result<()> {
    if g.shape(v).first().copied().unwrap_or(0) == 0 || g.value(v).is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

fn half_mse_to(g: &mut Graph, scores: Var, target: f64) -> Result<Var> {
    let r = g.add_scalar(scores, -target);
    let sq = g.square(r);
    let m = g.mean(sq)?;
    Ok(g.mul_scalar(m, 0.5))
}

/// `1/2 E[(D(y) - b)^2] + 1/2 E[(D(G(x)) - a)^2]`. Callers pass fake scores
/// computed from a detached generator output.
pub fn lsgan_d_loss(g: &mut Graph, real_scores: Var, fake_scores: Var, cfg: &CutConfig) -> Result<Var> {
    check_batch(g, real_scores)?;
    check_batch(g, fake_scores)?;
    let real = half_mse_to(g, real_scores, cfg.b)?;
    let fake = half_mse_to(g, fake_scores, cfg.a)?;
    Ok(g.add(real, fake)?)
}

/// `1/2 E[(D(G(x)) - c)^2]`.
pub fn lsgan_g_loss(g: &mut Graph, fake_scores: Var, cfg: &CutConfig) -> Result<Var> {
    check_batch(g, fake_scores)?;
    half_mse_to(g, fake_scores, cfg.c)
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Contrastive loss of one query against its positive and `negs.len()`
/// negatives at temperature `tau`.
pub fn nce_loss(v: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    if negs.is_empty() {
        return Err(Error::Contract("nce_loss needs at least one negative".into()));
    }
    check_unit(v, "query")?;
    check_unit(pos, "positive")?;
    for n in negs {
        if n.len() != v.len() {
            return Err(Error::Shape(format!("negative of length {} for query of length {}", n.len(), v.len())));
        }
        check_unit(n, "negative")?;
    }
    if pos.len() != v.len() {
        return Err(Error::Shape("positive and query lengths differ".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let l_pos = dot(v, pos) / tau;
    let logits: Vec<f64> = std::iter::once(l_pos)
        .chain(negs.iter().map(|n| dot(v, n) / tau))
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(lse - l_pos)
}

/// Mean contrastive loss where row `s` of `queries` must pick row `s` of
/// `keys` among all rows of `keys`.
pub fn nce_rows(g: &mut Graph, queries: Var, keys: Var, tau: f64) -> Result<Var> {
    let kt = g.transpose(keys)?;
    let logits = g.matmul(queries, kt)?;
    let logits = g.mul_scalar(logits, 1.0 / tau);
    let s = g.shape(queries)[0];
    let targets: Vec<usize> = (0..s).collect();
    Ok(g.cross_entropy_rows(logits, &targets)?)
}

/// Draws `s` distinct flat locations per tap map.
pub fn draw_locations<R: Rng + ?Sized>(g: &Graph, taps: &[Var], s: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    taps.iter()
        .map(|&t| {
            let sh = g.shape(t);
            let plane = sh[2] * sh[3];
            if s > plane {
                return Err(Error::Contract(format!(
                    "{s} patches requested from a {}x{} feature map",
                    sh[2], sh[3]
                )));
            }
            Ok(rand::seq::index::sample(rng, plane, s).into_vec())
        })
        .collect()
}

/// Projected, normalized features of sample `batch` at the given locations,
/// one `[s, k]` block per tap.
pub fn patch_features(
    head: &ProjectionHead,
    store: &ParamStore,
    g: &mut Graph,
    taps: &[Var],
    batch: usize,
    locations: &[Vec<usize>],
) -> Result<Vec<Var>> {
    taps.iter()
        .zip(locations)
        .enumerate()
        .map(|(l, (&t, locs))| {
            let cols = g.gather_columns(t, batch, locs)?;
            head.forward(g, store, l, cols)
        })
        .collect()
}

/// Samples locations on each tap and returns the projected features with
/// the locations, so a paired image can reuse the same positions.
pub fn sample_patch_features<R: Rng + ?Sized>(
    model: &CutModel,
    g: &mut Graph,
    image: Var,
    s: usize,
    rng: &mut R,
) -> Result<Vec<(Var, Vec<usize>)>> {
    let taps = model.gen.encode_taps(g, &model.gh_store, image, model.cfg.num_taps)?;
    let locs = draw_locations(g, &taps, s, rng)?;
    let feats = patch_features(&model.head, &model.gh_store, g, &taps, 0, &locs)?;
    Ok(feats.into_iter().zip(locs).collect())
}

/// PatchNCE between a source image (given by its encoder taps) and an output
/// image: queries from the output, positives and negatives from the source.
pub fn patchnce_loss<R: Rng + ?Sized>(
    model: &CutModel,
    g: &mut Graph,
    src_taps: &[Var],
    out: Var,
    rng: &mut R,
) -> Result<Var> {
    let cfg = &model.cfg;
    let l = cfg.num_taps;
    if src_taps.len() < l {
        return Err(Error::Contract(format!("{} source taps for {l} heads", src_taps.len())));
    }
    let src_taps = &src_taps[..l];
    let out_taps = model.gen.encode_taps(g, &model.gh_store, out, l)?;
    let n = g.shape(out)[0];
    if g.shape(src_taps[0]) != g.shape(out) {
        return Err(Error::Shape(format!(
            "source {:?} and output {:?} differ",
            g.shape(src_taps[0]),
            g.shape(out)
        )));
    }
    let locs = draw_locations(g, src_taps, cfg.n_patches, rng)?;
    let mut terms = Vec::with_capacity(n * l);
    for b in 0..n {
        let keys = patch_features(&model.head, &model.gh_store, g, src_taps, b, &locs)?;
        let queries = patch_features(&model.head, &model.gh_store, g, &out_taps, b, &locs)?;
        for (q, k) in queries.into_iter().zip(keys) {
            terms.push(nce_rows(g, q, k, cfg.tau)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.mul_scalar(total, 1.0 / terms.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GLossParts {
    pub gan: f64,
    pub nce_x: f64,
    pub nce_y: f64,
}

pub struct GLoss {
    pub total: Var,
    pub parts: GLossParts,
    /// `G(x)`, reusable by the caller.
    pub fake: Var,
}

/// `lambda_gan * L_GAN + lambda_x * PatchNCE(x, G(x)) + lambda_y * PatchNCE(y, G(y))`.
pub fn cut_total_g_loss<R: Rng + ?Sized>(model: &CutModel, g: &mut Graph, x: Var, y: Var, rng: &mut R) -> Result<GLoss> {
    let (fake, x_taps) = model.gen.forward(g, &model.gh_store, x)?;
    let (idt, y_taps) = model.gen.forward(g, &model.gh_store, y)?;
    g_loss_from(model, g, fake, &x_taps, idt, &y_taps, rng)
}

fn g_loss_from<R: Rng + ?Sized>(
    model: &CutModel,
    g: &mut Graph,
    fake: Var,
    x_taps: &[Var],
    idt: Var,
    y_taps: &[Var],
    rng: &mut R,
) -> Result<GLoss> {
    let cfg = &model.cfg;
    let scores = model.disc.forward(g, &model.d_store, fake)?;
    let gan = lsgan_g_loss(g, scores, cfg)?;
    let nce_x = patchnce_loss(model, g, x_taps, fake, rng)?;
    let nce_y = patchnce_loss(model, g, y_taps, idt, rng)?;
    let parts = GLossParts {
        gan: g.scalar(gan),
        nce_x: g.scalar(nce_x),
        nce_y: g.scalar(nce_y),
    };
    let wg = g.mul_scalar(gan, cfg.lambda_gan);
    let wx = g.mul_scalar(nce_x, cfg.lambda_x);
    let wy = g.mul_scalar(nce_y, cfg.lambda_y);
    let t = g.add(wg, wx)?;
    let total = g.add(t, wy)?;
    Ok(GLoss { total, parts, fake })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_gan: f64,
    pub nce_x: f64,
    pub nce_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorRun {
    /// `(epoch, path)` of every saved checkpoint.
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub losses: Vec<EpochLosses>,
}

/// One discriminator update followed by one generator+head update.
pub fn train_step<R: Rng + ?Sized>(model: &mut CutModel, x: &Tensor, y: &Tensor, rng: &mut R) -> Result<(f64, GLossParts)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let yv = g.input(y.clone());
    let (fake, x_taps) = model.gen.forward(&mut g, &model.gh_store, xv)?;
    let (idt, y_taps) = model.gen.forward(&mut g, &model.gh_store, yv)?;

    let fake_d = g.detach(fake);
    let real_scores = model.disc.forward(&mut g, &model.d_store, yv)?;
    let fake_scores = model.disc.forward(&mut g, &model.d_store, fake_d)?;
    let d_loss = lsgan_d_loss(&mut g, real_scores, fake_scores, &model.cfg)?;
    let d_val = g.scalar(d_loss);
    let grads = g.backward(d_loss)?;
    model.d_store.accumulate(&g, &grads);
    model.d_store.adam_step(&model.cfg.adam())?;

    let gl = g_loss_from(model, &mut g, fake, &x_taps, idt, &y_taps, rng)?;
    let grads = g.backward(gl.total)?;
    model.gh_store.accumulate(&g, &grads);
    model.gh_store.adam_step(&model.cfg.adam())?;
    Ok((d_val, gl.parts))
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.cutb")
}

/// Trains on in-memory gray images, saving a checkpoint every
/// `save_every` epochs and the per-epoch loss log under `out_dir`.
pub fn train_translator<R: Rng + ?Sized>(
    source: &[ImageBuffer],
    target: &[ImageBuffer],
    cfg: &CutConfig,
    rng: &mut R,
    out_dir: &Path,
) -> Result<TranslatorRun> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract("each domain needs at least one image".into()));
    }
    let all = source.iter().chain(target);
    for img in all {
        if img.channels != 1 || img.width != cfg.image_size || img.height != cfg.image_size {
            return Err(Error::Shape(format!(
                "dataset image {}x{}x{} does not match {}x{} gray",
                img.width, img.height, img.channels, cfg.image_size, cfg.image_size
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut model = CutModel::new(cfg, rng)?;
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut run = TranslatorRun {
        checkpoints: Vec::new(),
        losses: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<ImageBuffer> = chunk.iter().map(|&i| source[i].clone()).collect();
            let ys: Vec<ImageBuffer> = (0..chunk.len())
                .map(|_| target[rng.random_range(0..target.len())].clone())
                .collect();
            let (d, parts) = train_step(&mut model, &images_to_tensor(&xs)?, &images_to_tensor(&ys)?, rng)?;
            let vals = [d, parts.gan, parts.nce_x, parts.nce_y];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite translator loss at epoch {epoch}, step {steps}: {vals:?}"
                )));
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            steps += 1;
        }
        let n = steps as f64;
        run.losses.push(EpochLosses {
            epoch,
            d_loss: sums[0] / n,
            g_gan: sums[1] / n,
            nce_x: sums[2] / n,
            nce_y: sums[3] / n,
        });
        if epoch % cfg.save_every == 0 {
            let path = out_dir.join(checkpoint_name(epoch));
            model.checkpoint().save(&path)?;
            run.checkpoints.push((epoch, path));
        }
    }
    write_loss_csv(&out_dir.join("loss.csv"), &run.losses)?;
    Ok(run)
}

pub fn write_loss_csv(path: &Path, losses: &[EpochLosses]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    let mut body = String::from("epoch,d_loss,g_gan,nce_x,nce_y\n");
    for l in losses {
        body.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.d_loss, l.g_gan, l.nce_x, l.nce_y));
    }
    f.write_all(body.as_bytes()).map_err(io_err(path))
}

/// Loads every `.pgm` in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    paths.sort();
    paths.iter().map(ImageBuffer::load).collect()
}
