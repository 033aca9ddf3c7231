use std::sync::Arc;

use autograd::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trilearn::cut::{CutConfig, CutModel};
use trilearn::embed::EmbedConfig;
use trilearn::policy::*;
use trilearn::raster::Camera;
use trilearn::sim::{init_tissue, Action, SimConfig};
use trilearn::{Error, Result};

const OBS: usize = 8;

/// Cheap stand-in task: the observation is a seeded point, reward grows as
/// the grasp point approaches it.
struct Toy {
    target: [f64; 3],
    t: usize,
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Toy {
    fn new(sim: &SimConfig) -> Self {
        let (lo, hi) = (sim.workspace_min.to_array(), sim.workspace_max.to_array());
        Self { target: lo, t: 0, lo, hi }
    }

    fn obs(&self) -> Vec<f64> {
        let mut o = vec![0.0; OBS];
        for i in 0..3 {
            o[i] = (self.target[i] - self.lo[i]) / (self.hi[i] - self.lo[i]);
        }
        o[3] = self.t as f64 / 5.0;
        o
    }
}

impl Environment for Toy {
    fn obs_len(&self) -> usize {
        OBS
    }

    fn horizon(&self) -> usize {
        5
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        self.target = std::array::from_fn(|i| r.random_range(self.lo[i]..=self.hi[i]));
        self.t = 0;
        Ok(self.obs())
    }

    fn step(&mut self, a: Action) -> Result<Transition> {
        self.t += 1;
        let p = a.p.to_array();
        let d: f64 = (0..3).map(|i| ((p[i] - self.target[i]) / (self.hi[i] - self.lo[i])).powi(2)).sum::<f64>().sqrt();
        let reward = if d < 0.15 {
            1.0
        } else if d < 0.4 {
            0.5
        } else {
            0.0
        };
        Ok(Transition {
            obs: self.obs(),
            reward,
            goal1: reward > 0.0,
            goal2: reward >= 1.0,
        })
    }
}

fn toy_setup(seed: u64) -> (SimConfig, PolicyNet, VecEnv<Toy>) {
    let sim = SimConfig::desk();
    let policy = PolicyNet::new(OBS, None, &sim, -0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let venv = VecEnv::new((0..3).map(|_| Toy::new(&sim)).collect(), seed);
    (sim, policy, venv)
}

fn small_cfg() -> TrainCfg {
    TrainCfg {
        epochs: 3,
        batch_size: 8,
        ..TrainCfg::default()
    }
}

/// Mean KL between the action distributions of two policies over `obs`.
fn mean_kl(a: &PolicyNet, b: &PolicyNet, obs: &[Vec<f64>]) -> f64 {
    let (la, lb) = (a.log_std(), b.log_std());
    let mut total = 0.0;
    for o in obs {
        let ma = a.act::<ChaCha8Rng>(o, None).unwrap().u;
        let mb = b.act::<ChaCha8Rng>(o, None).unwrap().u;
        for i in 0..ACTION_DIM {
            let (va, vb) = ((2.0 * la[i]).exp(), (2.0 * lb[i]).exp());
            total += lb[i] - la[i] + (va + (ma[i] - mb[i]).powi(2)) / (2.0 * vb) - 0.5;
        }
    }
    total / obs.len() as f64
}

#[test]
fn rollout_buffer_has_exactly_n_steps_and_is_deterministic() {
    let (_, policy, mut venv) = toy_setup(1);
    let a = collect_rollouts(&mut venv, &policy, 37, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.len(), 37);
    assert_eq!(a.obs.len(), 37);
    assert_eq!(a.segments.iter().map(|s| s.len).sum::<usize>(), 37);
    let (_, policy, mut venv) = toy_setup(1);
    let b = collect_rollouts(&mut venv, &policy, 37, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.rewards.iter().all(|r| [0.0, 0.5, 1.0].contains(r)));
    assert!(a.episode_returns.iter().all(|&r| r <= 5.0));
}

#[test]
fn zero_advantages_leave_the_action_distribution_unchanged() {
    let (_, policy, mut venv) = toy_setup(2);
    let mut buf = collect_rollouts(&mut venv, &policy, 40, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    // one-step episodes whose value already equals the reward
    buf.dones.iter_mut().for_each(|d| *d = true);
    buf.values = buf.rewards.clone();
    let (adv, _) = buf.advantages(0.99, 0.95);
    assert!(adv.iter().all(|&a| a == 0.0));

    let mut trained = policy.clone();
    ppo_update(&mut trained, &buf, &small_cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let kl = mean_kl(&policy, &trained, &buf.obs);
    assert!(kl.abs() < 1e-10, "KL {kl}");
    // the value head still learned
    let v0 = policy.act::<ChaCha8Rng>(&buf.obs[0], None).unwrap().value;
    let v1 = trained.act::<ChaCha8Rng>(&buf.obs[0], None).unwrap().value;
    assert_ne!(v0, v1);
}

#[test]
fn entropy_coefficient_zero_excludes_the_term() {
    let (_, policy, mut venv) = toy_setup(5);
    let buf = collect_rollouts(&mut venv, &policy, 30, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let run = |coef: f64| {
        let mut p = policy.clone();
        let cfg = TrainCfg {
            entropy_coef: coef,
            ..small_cfg()
        };
        ppo_update(&mut p, &buf, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        p.store.fingerprint()
    };
    assert_eq!(run(0.0), run(0.0));
    assert_ne!(run(0.0), run(1e-9));
}

#[test]
fn first_pass_ratio_is_one_and_clip_zero_gives_vanilla_gradient() {
    let (_, policy, mut venv) = toy_setup(8);
    let buf = collect_rollouts(&mut venv, &policy, 24, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (mut adv, ret) = buf.advantages(0.99, 0.95);
    normalize(&mut adv);
    let idx: Vec<usize> = (0..buf.len()).collect();
    let mb = Minibatch::gather(&buf, &idx, &adv, &ret).unwrap();
    let cfg = TrainCfg {
        clip: 0.0,
        value_coef: 0.0,
        ..TrainCfg::default()
    };

    let mut g = Graph::new();
    let l = ppo_loss(&mut g, &policy, &mb, &cfg).unwrap();
    // batched log-probs reproduce the per-step ones exactly
    assert_eq!(g.value(l.new_log_probs).data(), &mb.old_log_probs[..]);
    let grads = g.backward(l.total).unwrap();
    let mut a = policy.clone();
    a.store.zero_grad();
    a.store.accumulate(&g, &grads);

    let mut g = Graph::new();
    let x = g.input(mb.obs.clone());
    let out = policy.forward(&mut g, x).unwrap();
    let lp = log_prob(&mut g, out.mean, out.log_std, &mb.actions).unwrap();
    let av = g.input(autograd::Tensor::new(&[mb.advantages.len()], mb.advantages.clone()).unwrap());
    let w = g.mul(lp, av).unwrap();
    let m = g.mean(w).unwrap();
    let vanilla = g.neg(m);
    let grads = g.backward(vanilla).unwrap();
    let mut b = policy.clone();
    b.store.zero_grad();
    b.store.accumulate(&g, &grads);

    for id in a.store.ids() {
        for (x, y) in a.store.grad(id).iter().zip(b.store.grad(id)) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}: {x} vs {y}", a.store.name(id));
        }
    }
}

#[test]
fn evaluate_is_a_pure_function_of_parameters_and_seeds() {
    let (sim, policy, _) = toy_setup(11);
    let seeds = eval_seeds(3, 10);
    let mut env = Toy::new(&sim);
    let a = evaluate(&policy, &mut env, &seeds).unwrap();
    evaluate(&policy, &mut env, &eval_seeds(4, 3)).unwrap();
    let b = evaluate(&policy, &mut Toy::new(&sim), &seeds).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes.len(), 10);
    assert!(a.episodes.iter().all(|e| e.rewards.len() <= 5));
}

struct Never;

impl Environment for Never {
    fn obs_len(&self) -> usize {
        OBS
    }
    fn horizon(&self) -> usize {
        4
    }
    fn reset(&mut self, _: u64) -> Result<Vec<f64>> {
        Ok(vec![0.0; OBS])
    }
    fn step(&mut self, _: Action) -> Result<Transition> {
        Ok(Transition {
            obs: vec![0.0; OBS],
            reward: 0.5,
            goal1: true,
            goal2: false,
        })
    }
}

#[test]
fn never_succeeding_policy_reports_the_horizon() {
    let (_, policy, _) = toy_setup(12);
    let r = evaluate(&policy, &mut Never, &[1, 2, 3]).unwrap();
    assert_eq!(r.success_rate, 0.0);
    assert!(r.no_success);
    assert_eq!(r.mean_steps, 4.0);
    assert_eq!(r.mean_reward, 0.5);
}

struct Exploding;

impl Environment for Exploding {
    fn obs_len(&self) -> usize {
        OBS
    }
    fn horizon(&self) -> usize {
        5
    }
    fn reset(&mut self, _: u64) -> Result<Vec<f64>> {
        Ok(vec![0.0; OBS])
    }
    fn step(&mut self, _: Action) -> Result<Transition> {
        Err(Error::Diverged("test".into()))
    }
}

#[test]
fn divergence_aborts_the_episode_and_collection_continues() {
    let (_, policy, _) = toy_setup(13);
    let mut venv = VecEnv::new(vec![Exploding, Exploding], 0);
    let buf = collect_rollouts(&mut venv, &policy, 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(buf.len(), 6);
    assert_eq!(buf.diverged, 6);
    assert!(buf.episode_lengths.iter().all(|&l| l == 1));
}

#[test]
fn protocol_counts() {
    let cfg = TrainCfg::default();
    assert_eq!(plan_experiment(&cfg, &Variant::ALL, 1.0, 0).unwrap().evaluated_models(), 300);
    assert_eq!(plan_experiment(&cfg, &Variant::ALL, 0.1, 0).unwrap().evaluated_models(), 30);
    let plan = plan_experiment(&cfg, &[Variant::Original, Variant::Embedded], 0.1, 0).unwrap();
    assert_eq!(plan.runs.iter().map(|r| r.total_steps).collect::<Vec<_>>(), vec![1280, 12800]);
}

fn observers(size: usize) -> Vec<Observer> {
    let model = Arc::new(CutModel::new(&CutConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
    vec![
        Observer::new(InputConfig::original(), size).unwrap(),
        Observer::new(InputConfig::translated(model.clone()), size).unwrap(),
        Observer::new(InputConfig::embedded(model, EmbedConfig::default()), size).unwrap(),
    ]
}

#[test]
fn observation_lengths_and_bounds() {
    let sim = SimConfig::desk();
    let cam = Camera::overhead(&sim, 64);
    let state = init_tissue(&sim).unwrap();
    let obs: Vec<Vec<f64>> = observers(64).iter().map(|o| make_observation(&state, &cam, o).unwrap()).collect();
    assert_eq!(obs[0].len(), 4096);
    assert_eq!(obs[1].len(), obs[0].len());
    assert_eq!(obs[2].len(), 5120);
    assert!(obs[0].iter().chain(&obs[1]).all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    assert!(obs[2].iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
}

#[test]
fn image_variants_need_a_translator() {
    let input = InputConfig {
        variant: Variant::Translated,
        translator: None,
        embed: None,
    };
    assert!(matches!(Observer::new(input, 64), Err(Error::Config(_))));
}

#[test]
fn task_rollouts_are_reproducible() {
    let sim = SimConfig::desk();
    let cfg = TrainCfg {
        num_envs: 2,
        ..TrainCfg::default()
    };
    let obs = Observer::new(InputConfig::original(), 32).unwrap();
    let run = || {
        let policy = PolicyNet::for_observer(&obs, &sim, -0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let envs = (0..cfg.num_envs).map(|_| TaskEnv::new(&sim, &obs, &cfg).unwrap()).collect();
        let mut venv = VecEnv::new(envs, 21);
        collect_rollouts(&mut venv, &policy, 6, &mut ChaCha8Rng::seed_from_u64(22)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.obs.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn train_run_persists_ten_episodes_per_checkpoint() {
    let sim = SimConfig::desk();
    let cfg = TrainCfg {
        num_envs: 2,
        rollout_steps: 8,
        epochs: 1,
        batch_size: 8,
        checkpoints_per_run: 2,
        total_steps_image: 16,
        ..TrainCfg::default()
    };
    let obs = Observer::new(InputConfig::original(), 32).unwrap();
    let plan = plan_experiment(&cfg, &[Variant::Original], 1.0, 1).unwrap();
    assert_eq!(plan.runs[0].total_steps, 16);
    let dir = tempfile::tempdir().unwrap();
    let rep = train_run(&plan.runs[0], &cfg, &sim, &obs, 1, Some(dir.path())).unwrap();
    assert_eq!(rep.checkpoints.len(), 2);
    assert_eq!(rep.log.len(), 2);
    for f in ["train_log.csv", "eval.csv", "episodes.csv", "policy_00.cutb", "policy_01.cutb"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let episodes = std::fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
    for ci in 0..2 {
        let eps: std::collections::BTreeSet<&str> = episodes
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{ci},")))
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(eps.len(), 10);
    }
    let rows = read_train_log(&dir.path().join("train_log.csv")).unwrap();
    assert_eq!(rows.len(), 2);
}
