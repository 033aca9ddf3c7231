//! Source and target image sets for translator training.
//!
//! Every frame comes from a randomly posed sheet: a jittered rest state
//! followed by up to `max_pulls` scripted grasp-and-pull actions. Source
//! frames are plain gray renders; target frames are stylized renders of a
//! disjoint set of poses.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{io_err, Error, Result};
use crate::geom::Vec3;
use crate::metrics::pose_bucket;
use crate::policy::perturb;
use crate::raster::{render, stylize, to_gray, Camera, ImageBuffer, StyleParams};
use crate::reward::{evaluate_reward, RewardConfig};
use crate::rngs;
use crate::sim::{apply_action, init_tissue, Action, SimConfig, TissueState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count_source: usize,
    pub count_target: usize,
    pub image_size: usize,
    pub max_pulls: usize,
    /// Probability that a scripted pull heads for the far side of the hinge.
    pub flip_probability: f64,
    pub yaw_jitter: f64,
    pub shift_jitter: f64,
    pub style: StyleParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count_source: 500,
            count_target: 150,
            image_size: 64,
            max_pulls: 2,
            flip_probability: 0.5,
            yaw_jitter: 10.0,
            shift_jitter: 0.005,
            style: StyleParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn desk() -> Self {
        Self {
            count_source: 200,
            count_target: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count_source == 0 || self.count_target == 0 {
            return Err(Error::Config("both domains need at least one image".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} below 16", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_probability)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: Vec<ImageBuffer>,
    pub target: Vec<ImageBuffer>,
    pub source_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
}

fn clamp_box(v: Vec3, lo: Vec3, hi: Vec3) -> Vec3 {
    Vec3::new(v.x.clamp(lo.x, hi.x), v.y.clamp(lo.y, hi.y), v.z.clamp(lo.z, hi.z))
}

/// A scripted pull: grasp near a random free particle, drag either over the
/// hinge or to a random workspace point.
pub fn scripted_action<R: Rng + ?Sized>(state: &TissueState, sim: &SimConfig, flip_probability: f64, rng: &mut R) -> Action {
    let (lo, hi) = (sim.workspace_min, sim.workspace_max);
    let free: Vec<usize> = (0..state.len()).filter(|&k| state.inv_mass[k] > 0.0).collect();
    let k = free[rng.random_range(0..free.len())];
    let jitter = Vec3::new(
        rng.random_range(-0.003..=0.003),
        0.0,
        rng.random_range(-0.003..=0.003),
    );
    let p = clamp_box(state.positions[k] + jitter, lo, hi);
    let d = if rng.random_bool(flip_probability) {
        sim.origin
            + Vec3::new(
                rng.random_range(-0.03..=0.03),
                rng.random_range(0.0..=0.03),
                rng.random_range(-0.14..=-0.08),
            )
    } else {
        Vec3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            rng.random_range(lo.z..=hi.z),
        )
    };
    Action { p, d: clamp_box(d, lo, hi) }
}

/// A jittered sheet after `0..=max_pulls` scripted pulls.
pub fn random_state<R: Rng + ?Sized>(sim: &SimConfig, cfg: &DatasetConfig, rng: &mut R) -> Result<TissueState> {
    let mut s = init_tissue(sim)?;
    let yaw = rng.random_range(-1.0..=1.0) * cfg.yaw_jitter.to_radians();
    let shift = Vec3::new(
        rng.random_range(-1.0..=1.0) * cfg.shift_jitter,
        0.0,
        rng.random_range(-1.0..=1.0) * cfg.shift_jitter,
    );
    perturb(&mut s, sim.origin, yaw, shift);
    for _ in 0..rng.random_range(0..=cfg.max_pulls) {
        let a = scripted_action(&s, sim, cfg.flip_probability, rng);
        match apply_action(&s, a, sim) {
            Ok(next) => s = next,
            Err(Error::Diverged(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(s)
}

/// Renders `count_source + count_target` distinct poses drawn from the
/// `sim` stream; the first block becomes the source domain, the rest are
/// stylized with seeds from the `stylize` stream.
pub fn generate(sim: &SimConfig, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let cam = Camera::overhead(sim, cfg.image_size);
    cam.validate()?;
    let reward = RewardConfig::for_frame(cfg.image_size, cfg.image_size);
    let mut rng = rngs::stream(seed, "sim");
    let mut ds = Dataset {
        source: Vec::with_capacity(cfg.count_source),
        target: Vec::with_capacity(cfg.count_target),
        source_labels: Vec::with_capacity(cfg.count_source),
        target_labels: Vec::with_capacity(cfg.count_target),
    };
    for i in 0..cfg.count_source + cfg.count_target {
        let s = random_state(sim, cfg, &mut rng)?;
        let frame = render(&s, &cam)?;
        let label = pose_bucket(&evaluate_reward(&frame, s.line_endpoints(), s.gripper_triangle(), &reward)?);
        let gray = to_gray(&frame)?;
        if i < cfg.count_source {
            ds.source.push(gray);
            ds.source_labels.push(label);
        } else {
            let style = StyleParams {
                seed: rngs::derive_seed(seed, "stylize", i as u64),
                ..cfg.style
            };
            ds.target.push(stylize(&gray, &style)?);
            ds.target_labels.push(label);
        }
    }
    Ok(ds)
}

/// Refuses to write into a directory holding anything but manifests unless
/// `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .any(|e| !e.file_name().to_string_lossy().starts_with("manifest_"));
        if non_empty && !force {
            return Err(Error::Contract(format!("{} is not empty (use --force)", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `source/NNNNNN.pgm`, `target/NNNNNN.pgm` and `labels.csv`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut labels = String::from("domain,file,label\n");
    for (domain, imgs, labs) in [("source", &ds.source, &ds.source_labels), ("target", &ds.target, &ds.target_labels)] {
        let sub = dir.join(domain);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for (i, (img, l)) in imgs.iter().zip(labs.iter()).enumerate() {
            let name = format!("{i:06}.pgm");
            write_atomic(&sub.join(&name), &img.encode_pnm())?;
            labels.push_str(&format!("{domain},{name},{l}\n"));
        }
    }
    write_atomic(&dir.join("labels.csv"), labels.as_bytes())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("labels.csv")).map_err(io_err(dir.join("labels.csv")))?;
    let mut ds = Dataset {
        source: Vec::new(),
        target: Vec::new(),
        source_labels: Vec::new(),
        target_labels: Vec::new(),
    };
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("labels.csv line {}: {line:?}", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let label: usize = f[2].parse().map_err(|_| bad())?;
        let img = ImageBuffer::load(dir.join(f[0]).join(f[1]))?;
        match f[0] {
            "source" => {
                ds.source.push(img);
                ds.source_labels.push(label);
            }
            "target" => {
                ds.target.push(img);
                ds.target_labels.push(label);
            }
            _ => return Err(bad()),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let sim = SimConfig::desk();
        let cfg = DatasetConfig {
            count_source: 4,
            count_target: 3,
            image_size: 32,
            ..DatasetConfig::default()
        };
        let a = generate(&sim, &cfg, 5).unwrap();
        let b = generate(&sim, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source.len(), 4);
        assert_eq!(a.target.len(), 3);
        assert!(a.source.iter().chain(&a.target).all(|i| i.channels == 1 && i.width == 32));
    }
}
