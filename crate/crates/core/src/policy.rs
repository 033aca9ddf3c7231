//! Grasp-and-pull policies trained with a clipped-surrogate policy gradient
//! under three observation configurations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use autograd::nn::{Conv2d, Init, Linear};
use autograd::{AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::cut::images_to_tensor;
use crate::cut::CutModel;
use crate::embed::{draw_tap_locations, embed_source_frame, global_locations, EmbedConfig, LocationPolicy};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::metrics::{interpolate, lowess};
use crate::raster::{render, to_gray, Camera, ImageBuffer};
use crate::reward::{evaluate_reward, RewardConfig};
use crate::rngs;
use crate::sim::{apply_action, init_tissue, Action, SimConfig, TissueState};

pub const ACTION_DIM: usize = 6;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HIDDEN: usize = 32;
const SQUASH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Translated,
    Embedded,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::Translated, Variant::Embedded];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Translated => "translated",
            Variant::Embedded => "embedded",
        }
    }

    pub fn needs_translator(self) -> bool {
        self != Variant::Original
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original" => Ok(Variant::Original),
            "translated" => Ok(Variant::Translated),
            "embedded" => Ok(Variant::Embedded),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Observation configuration: which variant and the artifacts it needs.
#[derive(Debug, Clone)]
pub struct InputConfig {
    pub variant: Variant,
    pub translator: Option<Arc<CutModel>>,
    pub embed: Option<EmbedConfig>,
}

impl InputConfig {
    pub fn original() -> Self {
        Self {
            variant: Variant::Original,
            translator: None,
            embed: None,
        }
    }

    pub fn translated(model: Arc<CutModel>) -> Self {
        Self {
            variant: Variant::Translated,
            translator: Some(model),
            embed: None,
        }
    }

    pub fn embedded(model: Arc<CutModel>, embed: EmbedConfig) -> Self {
        Self {
            variant: Variant::Embedded,
            translator: Some(model),
            embed: Some(embed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.needs_translator() && self.translator.is_none() {
            return Err(Error::Config(format!("variant {} needs a translator checkpoint", self.variant)));
        }
        if self.variant == Variant::Embedded {
            let Some(e) = &self.embed else {
                return Err(Error::Config("embedded variant needs an embedding config".into()));
            };
            e.check(self.translator.as_ref().unwrap())?;
        }
        Ok(())
    }
}

/// Turns rendered frames into flat observation vectors.
#[derive(Debug, Clone)]
pub struct Observer {
    pub input: InputConfig,
    pub size: usize,
    locations: Option<Vec<Vec<usize>>>,
}

impl Observer {
    pub fn new(input: InputConfig, size: usize) -> Result<Self> {
        input.validate()?;
        let locations = match (&input.translator, &input.embed) {
            (Some(m), Some(e)) if input.variant == Variant::Embedded => Some(global_locations(m, size, e)?),
            _ => None,
        };
        Ok(Self { input, size, locations })
    }

    pub fn variant(&self) -> Variant {
        self.input.variant
    }

    pub fn obs_len(&self) -> usize {
        match (self.input.variant, &self.input.embed) {
            (Variant::Embedded, Some(e)) => e.len(),
            _ => self.size * self.size,
        }
    }

    /// Fresh location set for one episode, when the embedding asks for it.
    pub fn episode_locations<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Option<Vec<Vec<usize>>>> {
        match (&self.input.translator, &self.input.embed) {
            (Some(m), Some(e)) if self.input.variant == Variant::Embedded && e.policy == LocationPolicy::PerEpisode => {
                Ok(Some(draw_tap_locations(m, self.size, e, rng)?))
            }
            _ => Ok(None),
        }
    }

    /// Observation of a rendered color frame.
    pub fn observe_frame(&self, frame: &ImageBuffer, locations: Option<&[Vec<usize>]>) -> Result<Vec<f64>> {
        if frame.width != self.size || frame.height != self.size {
            return Err(Error::Shape(format!(
                "frame {}x{} does not match observer size {}",
                frame.width, frame.height, self.size
            )));
        }
        let gray = to_gray(frame)?;
        match self.input.variant {
            Variant::Original => Ok(gray.to_unit()),
            Variant::Translated => {
                let model = self.input.translator.as_ref().unwrap();
                let mut g = Graph::new();
                let x = g.input(images_to_tensor(std::slice::from_ref(&gray))?);
                let (y, _) = model.gen.forward(&mut g, &model.gh_store, x)?;
                Ok(g.value(y).data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
            }
            Variant::Embedded => {
                let model = self.input.translator.as_ref().unwrap();
                let cfg = self.input.embed.as_ref().unwrap();
                let locs = locations.or(self.locations.as_deref()).unwrap();
                Ok(embed_source_frame(model, &gray, cfg, locs)?.flatten())
            }
        }
    }
}

/// Renders `state` through `cam` and encodes it for the policy.
pub fn make_observation(state: &TissueState, cam: &Camera, observer: &Observer) -> Result<Vec<f64>> {
    observer.observe_frame(&render(state, cam)?, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub batch_size: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub total_steps_image: usize,
    pub total_steps_embedded: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub runs_per_condition: usize,
    pub checkpoints_per_run: usize,
    pub test_episodes: usize,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub horizon: usize,
    pub init_log_std: f64,
    /// Initial sheet yaw is uniform in `[-yaw_jitter, yaw_jitter]` degrees.
    pub yaw_jitter: f64,
    /// Initial sheet shift along x and z is uniform in `[-shift_jitter, shift_jitter]` m.
    pub shift_jitter: f64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 3e-4,
            entropy_coef: 0.0,
            epochs: 128,
            total_steps_image: 12_800,
            total_steps_embedded: 128_000,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            runs_per_condition: 10,
            checkpoints_per_run: 10,
            test_episodes: 10,
            num_envs: 10,
            rollout_steps: 128,
            horizon: 5,
            init_log_std: -0.5,
            yaw_jitter: 10.0,
            shift_jitter: 0.005,
        }
    }
}

impl TrainCfg {
    /// Fewer optimization passes per update for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            epochs: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("total_steps_image", self.total_steps_image),
            ("total_steps_embedded", self.total_steps_embedded),
            ("runs_per_condition", self.runs_per_condition),
            ("checkpoints_per_run", self.checkpoints_per_run),
            ("test_episodes", self.test_episodes),
            ("num_envs", self.num_envs),
            ("rollout_steps", self.rollout_steps),
            ("horizon", self.horizon),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::Config(format!("entropy_coef {} must be >= 0", self.entropy_coef)));
        }
        if !(self.clip >= 0.0) || !(self.value_coef >= 0.0) {
            return Err(Error::Config("clip and value_coef must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in [0, 1]".into()));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return Err(Error::Config(format!("init_log_std {} outside [-5, 2]", self.init_log_std)));
        }
        if !(self.yaw_jitter >= 0.0) || !(self.shift_jitter >= 0.0) {
            return Err(Error::Config("jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, variant: Variant) -> usize {
        match variant {
            Variant::Embedded => self.total_steps_embedded,
            _ => self.total_steps_image,
        }
    }

    pub fn scaled_steps(&self, variant: Variant, scale: f64) -> usize {
        ((self.total_steps(variant) as f64 * scale).round() as usize).max(1)
    }

    pub fn scaled_runs(&self, scale: f64) -> usize {
        ((self.runs_per_condition as f64 * scale).round() as usize).max(1)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Trunk {
    Conv { c1: Conv2d, c2: Conv2d, fc: Linear, side: usize },
    Dense { fc: Linear },
}

/// Shared trunk, Gaussian action head with a state-independent log-std,
/// and a value head reading the trunk features through a stop-gradient.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub store: ParamStore,
    pub obs_len: usize,
    trunk: Trunk,
    mean: Linear,
    value: Linear,
    log_std: ParamId,
    low: [f64; ACTION_DIM],
    high: [f64; ACTION_DIM],
}

pub struct PolicyOutput {
    pub mean: Var,
    pub log_std: Var,
    pub value: Var,
}

/// One sampled decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ActStep {
    /// Pre-squash Gaussian sample.
    pub u: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub value: f64,
}

fn bounds_of(sim: &SimConfig) -> ([f64; ACTION_DIM], [f64; ACTION_DIM]) {
    let (lo, hi) = (sim.workspace_min, sim.workspace_max);
    ([lo.x, lo.y, lo.z, lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z, hi.x, hi.y, hi.z])
}

impl PolicyNet {
    /// Image variants pass `image_side`; the embedded variant passes `None`.
    pub fn new<R: Rng + ?Sized>(obs_len: usize, image_side: Option<usize>, sim: &SimConfig, init_log_std: f64, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let trunk = match image_side {
            Some(side) => {
                if side * side != obs_len || side < 16 || side % 8 != 0 {
                    return Err(Error::Config(format!("image side {side} does not fit observation length {obs_len}")));
                }
                let c1 = Conv2d::new(&mut store, "pi.conv1", 1, 8, 8, 4, 2, Init::FanIn, rng)?;
                let c2 = Conv2d::new(&mut store, "pi.conv2", 8, 16, 4, 2, 1, Init::FanIn, rng)?;
                let flat = 16 * (side / 8) * (side / 8);
                let fc = Linear::new(&mut store, "pi.fc", flat, HIDDEN, Init::FanIn, rng)?;
                Trunk::Conv { c1, c2, fc, side }
            }
            None => Trunk::Dense {
                fc: Linear::new(&mut store, "pi.fc", obs_len, HIDDEN, Init::FanIn, rng)?,
            },
        };
        let mean = Linear::new(&mut store, "pi.mean", HIDDEN, ACTION_DIM, Init::Normal(0.01), rng)?;
        let value = Linear::new(&mut store, "pi.value", HIDDEN, 1, Init::FanIn, rng)?;
        let log_std = store.add("pi.log_std", Tensor::full(&[ACTION_DIM], init_log_std))?;
        let (low, high) = bounds_of(sim);
        Ok(Self {
            store,
            obs_len,
            trunk,
            mean,
            value,
            log_std,
            low,
            high,
        })
    }

    pub fn for_observer<R: Rng + ?Sized>(observer: &Observer, sim: &SimConfig, init_log_std: f64, rng: &mut R) -> Result<Self> {
        let side = (observer.variant() != Variant::Embedded).then_some(observer.size);
        Self::new(observer.obs_len(), side, sim, init_log_std, rng)
    }

    /// Forward pass over `obs` of shape `[n, obs_len]`.
    pub fn forward(&self, g: &mut Graph, obs: Var) -> Result<PolicyOutput> {
        let n = g.shape(obs)[0];
        let h = match &self.trunk {
            Trunk::Conv { c1, c2, fc, side } => {
                let x = g.reshape(obs, &[n, 1, *side, *side])?;
                let x = c1.forward(g, &self.store, x)?;
                let x = g.relu(x);
                let x = c2.forward(g, &self.store, x)?;
                let x = g.relu(x);
                let flat = g.shape(x)[1..].iter().product();
                let x = g.reshape(x, &[n, flat])?;
                fc.forward(g, &self.store, x)?
            }
            Trunk::Dense { fc } => fc.forward(g, &self.store, obs)?,
        };
        let h = g.tanh(h);
        let mean = self.mean.forward(g, &self.store, h)?;
        let hd = g.detach(h);
        let value = self.value.forward(g, &self.store, hd)?;
        let value = g.reshape(value, &[n])?;
        let ls = g.param(&self.store, self.log_std);
        let log_std = g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        Ok(PolicyOutput { mean, log_std, value })
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.store.get(self.log_std).data().iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    /// Maps a pre-squash sample into the workspace box.
    pub fn to_workspace(&self, u: &[f64; ACTION_DIM]) -> Action {
        let mut a = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let t = (u[i].tanh() + 1.0) / 2.0;
            a[i] = (self.low[i] + t * (self.high[i] - self.low[i])).clamp(self.low[i], self.high[i]);
        }
        Action::from_slice(&a)
    }

    /// Samples an action, or takes the mean when `rng` is `None`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: Option<&mut R>) -> Result<ActStep> {
        if obs.len() != self.obs_len {
            return Err(Error::Shape(format!("observation length {} != {}", obs.len(), self.obs_len)));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, self.obs_len], obs.to_vec())?);
        let out = self.forward(&mut g, x)?;
        let mean = g.value(out.mean).data().to_vec();
        let log_std = g.value(out.log_std).data().to_vec();
        let mut u = [0.0; ACTION_DIM];
        match rng {
            Some(rng) => {
                for i in 0..ACTION_DIM {
                    let e: f64 = rng.sample(StandardNormal);
                    u[i] = mean[i] + log_std[i].exp() * e;
                }
            }
            None => u.copy_from_slice(&mean),
        }
        let lp = log_prob(&mut g, out.mean, out.log_std, &[u])?;
        Ok(ActStep {
            u,
            log_prob: g.value(lp).data()[0],
            value: g.value(out.value).data()[0],
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_stores(&[&self.store])
    }
}

/// Log-density of pre-squash samples `u` under the diagonal Gaussian,
/// including the tanh change-of-variables term. Returns shape `[n]`.
pub fn log_prob(g: &mut Graph, mean: Var, log_std: Var, u: &[[f64; ACTION_DIM]]) -> Result<Var> {
    let n = u.len();
    let flat: Vec<f64> = u.iter().flatten().copied().collect();
    let uv = g.input(Tensor::new(&[n, ACTION_DIM], flat)?);
    let diff = g.sub(uv, mean)?;
    let nls = g.neg(log_std);
    let inv_std = g.exp(nls);
    let z = g.mul_row(diff, inv_std)?;
    let z2 = g.square(z);
    let half = g.mul_scalar(z2, 0.5);
    let per = g.add_row(half, log_std)?;
    let nlp = g.sum_last(per)?;
    let lp = g.neg(nlp);
    let consts: Vec<f64> = u
        .iter()
        .map(|row| {
            let squash: f64 = row.iter().map(|&v| (1.0 - v.tanh().powi(2) + SQUASH_EPS).ln()).sum();
            -0.5 * ACTION_DIM as f64 * LN_2PI - squash
        })
        .collect();
    let c = g.input(Tensor::new(&[n], consts)?);
    Ok(g.add(lp, c)?)
}

/// Differential entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(g: &mut Graph, log_std: Var) -> Var {
    let s = g.sum(log_std);
    g.add_scalar(s, 0.5 * ACTION_DIM as f64 * (1.0 + LN_2PI))
}

pub struct Transition {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub goal1: bool,
    pub goal2: bool,
}

/// An episodic task driven by pre-squash policy samples.
pub trait Environment {
    fn obs_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    /// Executes the action; a divergent simulation reports [`Error::Diverged`].
    fn step(&mut self, action: Action) -> Result<Transition>;
}

/// The triangulation task: a jittered resting sheet, one grasp-and-pull per
/// step, reward read from the rendered frame.
pub struct TaskEnv<'a> {
    pub sim: SimConfig,
    pub reward: RewardConfig,
    pub cam: Camera,
    pub observer: &'a Observer,
    pub horizon: usize,
    pub yaw_jitter: f64,
    pub shift_jitter: f64,
    pub state: TissueState,
    rest: TissueState,
    locations: Option<Vec<Vec<usize>>>,
}

impl<'a> TaskEnv<'a> {
    pub fn new(sim: &SimConfig, observer: &'a Observer, cfg: &TrainCfg) -> Result<Self> {
        let cam = Camera::overhead(sim, observer.size);
        cam.validate()?;
        let reward = RewardConfig::for_frame(observer.size, observer.size);
        let rest = init_tissue(sim)?;
        Ok(Self {
            sim: sim.clone(),
            reward,
            cam,
            observer,
            horizon: cfg.horizon,
            yaw_jitter: cfg.yaw_jitter,
            shift_jitter: cfg.shift_jitter,
            state: rest.clone(),
            rest,
            locations: None,
        })
    }

    fn observe(&self, frame: &ImageBuffer) -> Result<Vec<f64>> {
        self.observer.observe_frame(frame, self.locations.as_deref())
    }
}

/// Rotates the sheet about the vertical axis through `pivot` and shifts it.
pub fn perturb(state: &mut TissueState, pivot: Vec3, yaw: f64, shift: Vec3) {
    let (s, c) = yaw.sin_cos();
    let tf = |p: Vec3| {
        let r = p - pivot;
        pivot + Vec3::new(c * r.x + s * r.z, r.y, -s * r.x + c * r.z) + shift
    };
    for p in &mut state.positions {
        *p = tf(*p);
    }
    for gr in &mut state.grippers {
        gr.position = tf(gr.position);
    }
}

impl Environment for TaskEnv<'_> {
    fn obs_len(&self) -> usize {
        self.observer.obs_len()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let mut rng = rngs::Rng::seed_from_u64(seed);
        let yaw = rng.random_range(-1.0..=1.0) * self.yaw_jitter.to_radians();
        let dx = rng.random_range(-1.0..=1.0) * self.shift_jitter;
        let dz = rng.random_range(-1.0..=1.0) * self.shift_jitter;
        let mut s = self.rest.clone();
        perturb(&mut s, self.sim.origin, yaw, Vec3::new(dx, 0.0, dz));
        self.state = s;
        self.locations = self.observer.episode_locations(&mut rng)?;
        let frame = render(&self.state, &self.cam)?;
        self.observe(&frame)
    }

    fn step(&mut self, action: Action) -> Result<Transition> {
        self.state = apply_action(&self.state, action, &self.sim)?;
        let frame = render(&self.state, &self.cam)?;
        let report = evaluate_reward(&frame, self.state.line_endpoints(), self.state.gripper_triangle(), &self.reward)?;
        Ok(Transition {
            obs: self.observe(&frame)?,
            reward: report.reward,
            goal1: report.goal1,
            goal2: report.goal2,
        })
    }
}

/// Per-environment bookkeeping across rollout collections.
struct Slot {
    seeds: rngs::Rng,
    obs: Option<Vec<f64>>,
    t: usize,
    ret: f64,
}

/// Several environment instances stepped in a fixed round-robin order.
pub struct VecEnv<E> {
    pub envs: Vec<E>,
    slots: Vec<Slot>,
}

impl<E: Environment> VecEnv<E> {
    pub fn new(envs: Vec<E>, seed: u64) -> Self {
        let slots = (0..envs.len())
            .map(|i| Slot {
                seeds: rngs::Rng::seed_from_u64(rngs::derive_seed(seed, "sim", i as u64)),
                obs: None,
                t: 0,
                ret: 0.0,
            })
            .collect();
        Self { envs, slots }
    }
}

/// Transitions of one environment, in time order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Value estimate of the observation after the last step, 0 if it ended an episode.
    pub bootstrap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub segments: Vec<Segment>,
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    pub diverged: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }

    /// GAE advantages and returns, computed segment by segment.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let mut adv = vec![0.0; self.len()];
        for seg in &self.segments {
            let mut next_value = seg.bootstrap;
            let mut gae = 0.0;
            for i in (seg.start..seg.start + seg.len).rev() {
                let live = if self.dones[i] { 0.0 } else { 1.0 };
                let delta = self.rewards[i] + gamma * next_value * live - self.values[i];
                gae = delta + gamma * lambda * live * gae;
                adv[i] = gae;
                next_value = self.values[i];
            }
        }
        let ret = adv.iter().zip(&self.values).map(|(a, v)| a + v).collect();
        (adv, ret)
    }
}

#[derive(Default)]
struct Track {
    obs: Vec<Vec<f64>>,
    actions: Vec<[f64; ACTION_DIM]>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
}

/// Collects exactly `n_steps` transitions. Episodes end on reward 1, at the
/// horizon, or when the simulation diverges; an episode cut off by the end
/// of the buffer is bootstrapped from the value of its last observation.
pub fn collect_rollouts<E: Environment, R: Rng + ?Sized>(
    venv: &mut VecEnv<E>,
    policy: &PolicyNet,
    n_steps: usize,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    let n_env = venv.envs.len();
    if n_env == 0 {
        return Err(Error::Config("no environments".into()));
    }
    let mut tracks: Vec<Track> = (0..n_env).map(|_| Track::default()).collect();
    let mut buf = RolloutBuffer::default();
    for k in 0..n_steps {
        let e = k % n_env;
        let env = &mut venv.envs[e];
        let slot = &mut venv.slots[e];
        let obs = match slot.obs.take() {
            Some(o) => o,
            None => {
                slot.t = 0;
                slot.ret = 0.0;
                env.reset(slot.seeds.random())?
            }
        };
        let step = policy.act(&obs, Some(&mut *rng))?;
        let (reward, next, diverged) = match env.step(policy.to_workspace(&step.u)) {
            Ok(tr) => (tr.reward, Some(tr.obs), false),
            Err(Error::Diverged(_)) => (0.0, None, true),
            Err(e) => return Err(e),
        };
        slot.t += 1;
        slot.ret += reward;
        let done = diverged || reward >= 1.0 || slot.t >= env.horizon();
        if diverged {
            buf.diverged += 1;
        }
        if done {
            buf.episode_returns.push(slot.ret);
            buf.episode_lengths.push(slot.t);
        } else {
            slot.obs = next;
        }
        let tr = &mut tracks[e];
        tr.obs.push(obs);
        tr.actions.push(step.u);
        tr.log_probs.push(step.log_prob);
        tr.rewards.push(reward);
        tr.values.push(step.value);
        tr.dones.push(done);
    }
    for (e, tr) in tracks.into_iter().enumerate() {
        let bootstrap = match &venv.slots[e].obs {
            Some(o) if !tr.rewards.is_empty() => policy.act::<R>(o, None)?.value,
            _ => 0.0,
        };
        buf.segments.push(Segment {
            start: buf.rewards.len(),
            len: tr.rewards.len(),
            bootstrap,
        });
        buf.obs.extend(tr.obs);
        buf.actions.extend(tr.actions);
        buf.log_probs.extend(tr.log_probs);
        buf.rewards.extend(tr.rewards);
        buf.values.extend(tr.values);
        buf.dones.extend(tr.dones);
    }
    Ok(buf)
}

/// Inputs of one optimization step.
pub struct Minibatch {
    pub obs: Tensor,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn gather(buf: &RolloutBuffer, idx: &[usize], adv: &[f64], ret: &[f64]) -> Result<Self> {
        let d = buf.obs.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            flat.extend_from_slice(&buf.obs[i]);
        }
        Ok(Self {
            obs: Tensor::new(&[idx.len(), d], flat)?,
            actions: idx.iter().map(|&i| buf.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| adv[i]).collect(),
            returns: idx.iter().map(|&i| ret[i]).collect(),
        })
    }
}

pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub new_log_probs: Var,
}

/// Clipped surrogate plus weighted value loss, minus the entropy bonus when
/// its coefficient is nonzero.
pub fn ppo_loss(g: &mut Graph, policy: &PolicyNet, mb: &Minibatch, cfg: &TrainCfg) -> Result<PpoLoss> {
    let n = mb.actions.len();
    let obs = g.input(mb.obs.clone());
    let out = policy.forward(g, obs)?;
    let lp = log_prob(g, out.mean, out.log_std, &mb.actions)?;
    let old = g.input(Tensor::new(&[n], mb.old_log_probs.clone())?);
    let adv = g.input(Tensor::new(&[n], mb.advantages.clone())?);
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let m = g.mean(surr)?;
    let pg = g.neg(m);
    let ret = g.input(Tensor::new(&[n], mb.returns.clone())?);
    let err = g.sub(out.value, ret)?;
    let sq = g.square(err);
    let vl = g.mean(sq)?;
    let weighted = g.mul_scalar(vl, cfg.value_coef);
    let mut total = g.add(pg, weighted)?;
    let entropy = gaussian_entropy(g, out.log_std);
    if cfg.entropy_coef != 0.0 {
        let bonus = g.mul_scalar(entropy, -cfg.entropy_coef);
        total = g.add(total, bonus)?;
    }
    Ok(PpoLoss {
        total,
        policy: pg,
        value: vl,
        entropy,
        new_log_probs: lp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

/// Subtracts the mean and divides by the standard deviation.
pub fn normalize(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    for x in v {
        *x = (*x - mean) / sd;
    }
}

/// `cfg.epochs` passes of shuffled minibatches over the buffer. Returns
/// statistics averaged over every minibatch.
pub fn ppo_update<R: Rng + ?Sized>(policy: &mut PolicyNet, buf: &RolloutBuffer, cfg: &TrainCfg, rng: &mut R) -> Result<PpoStats> {
    if buf.is_empty() {
        return Err(Error::Contract("empty rollout buffer".into()));
    }
    let (mut adv, ret) = buf.advantages(cfg.gamma, cfg.gae_lambda);
    normalize(&mut adv);
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut acc = PpoStats::default();
    let mut count = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mb = Minibatch::gather(buf, chunk, &adv, &ret)?;
            let mut g = Graph::new();
            let l = ppo_loss(&mut g, policy, &mb, cfg)?;
            let total = g.scalar(l.total);
            if !total.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "policy loss {total} (policy {}, value {})",
                    g.scalar(l.policy),
                    g.scalar(l.value)
                )));
            }
            let new_lp = g.value(l.new_log_probs).data();
            let kl = new_lp.iter().zip(&mb.old_log_probs).map(|(n, o)| o - n).sum::<f64>() / chunk.len() as f64;
            acc.loss += total;
            acc.policy_loss += g.scalar(l.policy);
            acc.value_loss += g.scalar(l.value);
            acc.entropy += g.scalar(l.entropy);
            acc.approx_kl += kl;
            count += 1;
            let grads = g.backward(l.total)?;
            policy.store.accumulate(&g, &grads);
            policy.store.adam_step(&adam)?;
        }
    }
    let c = count as f64;
    Ok(PpoStats {
        loss: acc.loss / c,
        policy_loss: acc.policy_loss / c,
        value_loss: acc.value_loss / c,
        entropy: acc.entropy / c,
        approx_kl: acc.approx_kl / c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub goal1: Vec<bool>,
    pub goal2: Vec<bool>,
    pub success: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    /// Mean steps over successful episodes; the horizon when none succeeded.
    pub mean_steps: f64,
    pub no_success: bool,
    pub mean_reward: f64,
    pub episodes: Vec<EpisodeRecord>,
}

/// Runs one deterministic (mean-action) episode per seed.
pub fn evaluate<E: Environment>(policy: &PolicyNet, env: &mut E, seeds: &[u64]) -> Result<EvalResult> {
    let mut episodes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut obs = env.reset(seed)?;
        let mut rec = EpisodeRecord {
            seed,
            actions: Vec::new(),
            rewards: Vec::new(),
            goal1: Vec::new(),
            goal2: Vec::new(),
            success: false,
            diverged: false,
        };
        for _ in 0..env.horizon() {
            let step = policy.act::<rngs::Rng>(&obs, None)?;
            let action = policy.to_workspace(&step.u);
            rec.actions.push(action.to_array());
            match env.step(action) {
                Ok(tr) => {
                    rec.rewards.push(tr.reward);
                    rec.goal1.push(tr.goal1);
                    rec.goal2.push(tr.goal2);
                    obs = tr.obs;
                    if tr.reward >= 1.0 {
                        rec.success = true;
                        break;
                    }
                }
                Err(Error::Diverged(_)) => {
                    rec.rewards.push(0.0);
                    rec.goal1.push(false);
                    rec.goal2.push(false);
                    rec.diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        episodes.push(rec);
    }
    let n = episodes.len().max(1) as f64;
    let wins: Vec<&EpisodeRecord> = episodes.iter().filter(|e| e.success).collect();
    let steps: usize = episodes.iter().map(|e| e.rewards.len()).sum();
    let total_reward: f64 = episodes.iter().flat_map(|e| &e.rewards).sum();
    Ok(EvalResult {
        success_rate: wins.len() as f64 / n,
        mean_steps: if wins.is_empty() {
            env.horizon() as f64
        } else {
            wins.iter().map(|e| e.rewards.len() as f64).sum::<f64>() / wins.len() as f64
        },
        no_success: wins.is_empty(),
        mean_reward: if steps == 0 { 0.0 } else { total_reward / steps as f64 },
        episodes,
    })
}

/// Fixed episode seeds shared by every evaluation under one master seed.
pub fn eval_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rngs::derive_seed(master_seed, "eval", i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub variant: Variant,
    pub run: usize,
    pub seed: u64,
    pub total_steps: usize,
    pub updates: usize,
    /// Update indices (1-based) after which a checkpoint is saved and evaluated.
    pub checkpoint_updates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub runs: Vec<PlannedRun>,
}

impl ExperimentPlan {
    pub fn evaluated_models(&self) -> usize {
        self.runs.iter().map(|r| r.checkpoint_updates.len()).sum()
    }
}

/// Enumerates runs and checkpoints without training anything.
pub fn plan_experiment(cfg: &TrainCfg, variants: &[Variant], scale: f64, master_seed: u64) -> Result<ExperimentPlan> {
    cfg.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("scale {scale} must be positive")));
    }
    let mut runs = Vec::new();
    for &variant in variants {
        let total_steps = cfg.scaled_steps(variant, scale);
        let updates = total_steps.div_ceil(cfg.rollout_steps);
        if updates < cfg.checkpoints_per_run {
            return Err(Error::Config(format!(
                "{total_steps} steps give {updates} updates, fewer than {} checkpoints",
                cfg.checkpoints_per_run
            )));
        }
        let c = cfg.checkpoints_per_run;
        let checkpoint_updates: Vec<usize> = (1..=c).map(|i| (i * updates).div_ceil(c)).collect();
        for run in 0..cfg.scaled_runs(scale) {
            runs.push(PlannedRun {
                variant,
                run,
                seed: rngs::derive_seed(master_seed, &format!("policy/{}", variant.name()), run as u64),
                total_steps,
                updates,
                checkpoint_updates: checkpoint_updates.clone(),
            });
        }
    }
    Ok(ExperimentPlan { runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub update_idx: usize,
    pub steps: usize,
    pub loss: f64,
    pub mean_reward: f64,
    /// Training time since the start of the run; excluded from reports.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub checkpoint_idx: usize,
    pub update_idx: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub no_success: bool,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub run: usize,
    pub seed: u64,
    pub total_steps: usize,
    pub diverged_steps: usize,
    pub log: Vec<UpdateRow>,
    pub checkpoints: Vec<CheckpointEval>,
    pub best_success: f64,
    pub best_steps: f64,
}

impl RunReport {
    pub fn training_seconds(&self) -> f64 {
        self.log.last().map_or(0.0, |r| r.wall_seconds)
    }

    /// LOWESS over the log entries within the first `window` seconds of
    /// training, read off at time `t`.
    pub fn smoothed_loss_at(&self, window: f64, t: f64, frac: f64) -> Result<f64> {
        let inside = self.log.iter().filter(|r| r.wall_seconds <= window).count();
        let rows = &self.log[..inside.max(2).min(self.log.len())];
        match rows {
            [] => return Err(Error::Contract("run has no training log".into())),
            [only] => return Ok(only.loss),
            _ => {}
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.wall_seconds).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.loss).collect();
        let smooth = lowess(&xs, &ys, frac)?;
        Ok(interpolate(&xs, &smooth, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_best_success: f64,
    pub median_best_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub scale: f64,
    pub evaluated_models: usize,
    pub runs: Vec<RunReport>,
    pub summary: Vec<VariantSummary>,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Trains and evaluates one planned run.
pub fn train_run(plan: &PlannedRun, cfg: &TrainCfg, sim: &SimConfig, observer: &Observer, master_seed: u64, out_dir: Option<&Path>) -> Result<RunReport> {
    let mut policy_rng = rngs::stream(plan.seed, "policy");
    let mut policy = PolicyNet::for_observer(observer, sim, cfg.init_log_std, &mut policy_rng)?;
    let envs = (0..cfg.num_envs)
        .map(|_| TaskEnv::new(sim, observer, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut venv = VecEnv::new(envs, plan.seed);
    let mut eval_env = TaskEnv::new(sim, observer, cfg)?;
    let seeds = eval_seeds(master_seed, cfg.test_episodes);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }

    let mut log = Vec::with_capacity(plan.updates);
    let mut checkpoints = Vec::new();
    let mut episodes_csv = String::from("checkpoint_idx,episode,seed,step,reward,goal1,goal2,success,diverged\n");
    let mut steps = 0usize;
    let mut train_time = 0.0;
    let mut diverged = 0usize;
    for update in 1..=plan.updates {
        let t0 = Instant::now();
        let n = cfg.rollout_steps.min(plan.total_steps - steps);
        let buf = collect_rollouts(&mut venv, &policy, n, &mut policy_rng)?;
        let stats = ppo_update(&mut policy, &buf, cfg, &mut policy_rng)?;
        train_time += t0.elapsed().as_secs_f64();
        steps += n;
        diverged += buf.diverged;
        log.push(UpdateRow {
            update_idx: update,
            steps,
            loss: stats.loss,
            mean_reward: buf.mean_reward(),
            wall_seconds: train_time,
        });
        if let Some(ci) = plan.checkpoint_updates.iter().position(|&u| u == update) {
            let res = evaluate(&policy, &mut eval_env, &seeds)?;
            for (e, ep) in res.episodes.iter().enumerate() {
                for (s, r) in ep.rewards.iter().enumerate() {
                    episodes_csv.push_str(&format!(
                        "{ci},{e},{},{},{r},{},{},{},{}\n",
                        ep.seed,
                        s + 1,
                        ep.goal1[s] as u8,
                        ep.goal2[s] as u8,
                        ep.success as u8,
                        ep.diverged as u8
                    ));
                }
            }
            if let Some(dir) = out_dir {
                policy.checkpoint().save(dir.join(format!("policy_{ci:02}.cutb")))?;
            }
            checkpoints.push(CheckpointEval {
                checkpoint_idx: ci,
                update_idx: update,
                success_rate: res.success_rate,
                mean_steps: res.mean_steps,
                no_success: res.no_success,
                mean_reward: res.mean_reward,
            });
        }
    }
    let best = checkpoints
        .iter()
        .fold(None::<&CheckpointEval>, |acc, c| match acc {
            Some(b) if (b.success_rate, -b.mean_steps) >= (c.success_rate, -c.mean_steps) => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| Error::Config("run produced no checkpoints".into()))?;
    let report = RunReport {
        variant: observer.variant(),
        run: plan.run,
        seed: plan.seed,
        total_steps: plan.total_steps,
        diverged_steps: diverged,
        best_success: best.success_rate,
        best_steps: best.mean_steps,
        log,
        checkpoints,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("train_log.csv"), train_log_csv(&report).as_bytes())?;
        write_atomic(&dir.join("eval.csv"), eval_csv(&report).as_bytes())?;
        write_atomic(&dir.join("episodes.csv"), episodes_csv.as_bytes())?;
    }
    Ok(report)
}

pub fn train_log_csv(r: &RunReport) -> String {
    let mut s = String::from("wall_seconds,update_idx,loss,mean_reward\n");
    for row in &r.log {
        s.push_str(&format!("{},{},{},{}\n", row.wall_seconds, row.update_idx, row.loss, row.mean_reward));
    }
    s
}

pub fn eval_csv(r: &RunReport) -> String {
    let mut s = String::from("checkpoint_idx,success_rate,mean_steps\n");
    for c in &r.checkpoints {
        s.push_str(&format!("{},{},{}\n", c.checkpoint_idx, c.success_rate, c.mean_steps));
    }
    s
}

/// Reads a `train_log.csv` back into update rows.
pub fn read_train_log(path: &Path) -> Result<Vec<UpdateRow>> {
    let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{}: malformed line {}", path.display(), i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(UpdateRow {
            wall_seconds: f[0].parse().map_err(|_| bad())?,
            update_idx: f[1].parse().map_err(|_| bad())?,
            steps: 0,
            loss: f[2].parse().map_err(|_| bad())?,
            mean_reward: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

pub fn run_dir(root: &Path, variant: Variant, run: usize) -> PathBuf {
    root.join(variant.name()).join(format!("run{run:02}"))
}

/// Trains `runs_per_condition` (scaled) runs for every input configuration
/// and evaluates every checkpoint. All artifacts are checked before any
/// training starts.
pub fn run_experiment(
    cfg: &TrainCfg,
    sim: &SimConfig,
    inputs: &[InputConfig],
    image_size: usize,
    scale: f64,
    master_seed: u64,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    let observers = inputs
        .iter()
        .map(|i| Observer::new(i.clone(), image_size))
        .collect::<Result<Vec<_>>>()?;
    let variants: Vec<Variant> = inputs.iter().map(|i| i.variant).collect();
    let plan = plan_experiment(cfg, &variants, scale, master_seed)?;
    let mut runs = Vec::with_capacity(plan.runs.len());
    for p in &plan.runs {
        let observer = observers.iter().find(|o| o.variant() == p.variant).unwrap();
        let dir = out_dir.map(|d| run_dir(d, p.variant, p.run));
        runs.push(train_run(p, cfg, sim, observer, master_seed, dir.as_deref())?);
    }
    let summary = variants
        .iter()
        .map(|&v| {
            let mine: Vec<&RunReport> = runs.iter().filter(|r| r.variant == v).collect();
            VariantSummary {
                variant: v,
                median_best_success: median(&mine.iter().map(|r| r.best_success).collect::<Vec<_>>()),
                median_best_steps: median(&mine.iter().map(|r| r.best_steps).collect::<Vec<_>>()),
            }
        })
        .collect();
    let report = ExperimentReport {
        master_seed,
        scale,
        evaluated_models: plan.evaluated_models(),
        runs,
        summary,
    };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
    }
    Ok(report)
}
