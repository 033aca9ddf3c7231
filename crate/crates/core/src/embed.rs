//! Patch embeddings of translated frames as policy observations.

use std::io::Write;

use autograd::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cut::{draw_locations, images_to_tensor, patch_features, CutModel};
use crate::error::{Error, Result};
use crate::raster::ImageBuffer;
use crate::rngs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationPolicy {
    /// One location set, drawn once from the seed, for every frame.
    FixedGlobal,
    /// A fresh location set per episode.
    PerEpisode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub l: usize,
    pub s: usize,
    pub k: usize,
    pub policy: LocationPolicy,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            l: 5,
            s: 32,
            k: 32,
            policy: LocationPolicy::FixedGlobal,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn len(&self) -> usize {
        self.l * self.s * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, model: &CutModel) -> Result<()> {
        if self.l == 0 || self.s == 0 || self.k == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        if self.l > model.head.num_taps() {
            return Err(Error::Config(format!(
                "embedding asks for {} taps, the encoder exposes {}",
                self.l,
                model.head.num_taps()
            )));
        }
        if self.k != model.head.k {
            return Err(Error::Config(format!(
                "embedding k = {} but the projection head outputs {}",
                self.k, model.head.k
            )));
        }
        Ok(())
    }
}

/// `L x S x k` unit vectors, row-major with `l` outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBlock {
    pub dims: (usize, usize, usize),
    pub values: Vec<f64>,
    pub tap_layers: Vec<usize>,
    pub locations: Vec<Vec<usize>>,
}

impl EmbeddingBlock {
    pub fn vector(&self, l: usize, s: usize) -> &[f64] {
        let (_, ss, k) = self.dims;
        let i = (l * ss + s) * k;
        &self.values[i..i + k]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Inverse of [`Self::flatten`].
    pub fn reshape(flat: &[f64], l: usize, s: usize, k: usize, locations: Vec<Vec<usize>>) -> Result<Self> {
        if flat.len() != l * s * k {
            return Err(Error::Shape(format!("{} values for a {l}x{s}x{k} block", flat.len())));
        }
        Ok(Self {
            dims: (l, s, k),
            values: flat.to_vec(),
            tap_layers: (0..l).collect(),
            locations,
        })
    }

    /// Rows of `episode,step,l,s,k,value`.
    pub fn write_csv<W: Write>(&self, out: &mut W, episode: usize, step: usize) -> std::io::Result<()> {
        let (l, s, k) = self.dims;
        for li in 0..l {
            for si in 0..s {
                for (ki, v) in self.vector(li, si).iter().enumerate().take(k) {
                    writeln!(out, "{episode},{step},{li},{si},{ki},{v}")?;
                }
            }
        }
        Ok(())
    }
}

pub fn flatten(block: &EmbeddingBlock) -> Vec<f64> {
    block.flatten()
}

/// Draws one location set per tap for frames of `size x size` pixels.
pub fn draw_tap_locations<R: Rng + ?Sized>(model: &CutModel, size: usize, cfg: &EmbedConfig, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    cfg.check(model)?;
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, size, size]));
    let taps = model.gen.encode_taps(&mut g, &model.gh_store, x, cfg.l)?;
    draw_locations(&g, &taps, cfg.s, rng)
}

/// Location set used by [`LocationPolicy::FixedGlobal`].
pub fn global_locations(model: &CutModel, size: usize, cfg: &EmbedConfig) -> Result<Vec<Vec<usize>>> {
    draw_tap_locations(model, size, cfg, &mut rngs::stream(cfg.seed, "patches"))
}

/// Embeds an already translated frame `y_hat` at freshly drawn locations.
pub fn extract_embedding<R: Rng + ?Sized>(model: &CutModel, y_hat: &ImageBuffer, cfg: &EmbedConfig, rng: &mut R) -> Result<EmbeddingBlock> {
    let locs = draw_tap_locations(model, y_hat.width, cfg, rng)?;
    extract_embedding_at(model, y_hat, cfg, &locs)
}

pub fn extract_embedding_at(model: &CutModel, y_hat: &ImageBuffer, cfg: &EmbedConfig, locations: &[Vec<usize>]) -> Result<EmbeddingBlock> {
    if y_hat.width != y_hat.height {
        return Err(Error::Shape(format!("frame {}x{} is not square", y_hat.width, y_hat.height)));
    }
    embed_tensor(model, images_to_tensor(std::slice::from_ref(y_hat))?, cfg, locations, false)
}

/// Translates a gray source frame and embeds the generator output without
/// quantizing it back to 8 bits.
pub fn embed_source_frame(model: &CutModel, frame: &ImageBuffer, cfg: &EmbedConfig, locations: &[Vec<usize>]) -> Result<EmbeddingBlock> {
    embed_tensor(model, images_to_tensor(std::slice::from_ref(frame))?, cfg, locations, true)
}

fn embed_tensor(model: &CutModel, x: Tensor, cfg: &EmbedConfig, locations: &[Vec<usize>], translate: bool) -> Result<EmbeddingBlock> {
    cfg.check(model)?;
    if locations.len() != cfg.l || locations.iter().any(|l| l.len() != cfg.s) {
        return Err(Error::Shape(format!("location sets do not match {} taps x {} patches", cfg.l, cfg.s)));
    }
    let mut g = Graph::new();
    let mut x = g.input(x);
    if translate {
        x = model.gen.forward(&mut g, &model.gh_store, x)?.0;
    }
    let taps = model.gen.encode_taps(&mut g, &model.gh_store, x, cfg.l)?;
    let feats = patch_features(&model.head, &model.gh_store, &mut g, &taps, 0, locations)?;
    let mut values = Vec::with_capacity(cfg.len());
    for f in feats {
        values.extend_from_slice(g.value(f).data());
    }
    Ok(EmbeddingBlock {
        dims: (cfg.l, cfg.s, cfg.k),
        values,
        tap_layers: (0..cfg.l).collect(),
        locations: locations.to_vec(),
    })
}
