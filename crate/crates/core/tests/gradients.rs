//! Central finite-difference checks of the model-level losses and heads.
//! Layer primitives are covered in the autograd crate.

use std::time::Instant;

use autograd::gradcheck::rel_error;
use autograd::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trilearn::cut::{images_to_tensor, lsgan_d_loss, lsgan_g_loss, nce_rows, patchnce_loss, CutConfig, CutModel};
use trilearn::policy::{log_prob, ppo_loss, Minibatch, PolicyNet, TrainCfg, ACTION_DIM};
use trilearn::raster::ImageBuffer;
use trilearn::sim::SimConfig;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_cut() -> CutConfig {
    CutConfig {
        image_size: 16,
        ngf: 2,
        ndf: 2,
        k: 4,
        n_patches: 4,
        ..CutConfig::default()
    }
}

fn noise_image(seed: u64, side: usize) -> ImageBuffer {
    let mut r = rng(seed);
    let data = (0..side * side).map(|_| r.random_range(0..=255u8)).collect();
    ImageBuffer::from_data(side, side, 1, data).unwrap()
}

/// Richardson-extrapolated central difference. The step shrinks while
/// successive estimates disagree, which happens when an activation kink lies
/// within the step.
fn converged_difference(central: &mut impl FnMut(f64) -> f64) -> f64 {
    let mut r = 0.0;
    for h in [H, H / 10.0, H / 100.0] {
        let (c1, c2) = (central(h), central(h / 2.0));
        r = (4.0 * c2 - c1) / 3.0;
        if (c1 - c2).abs() <= 1e-5 * c1.abs().max(c2.abs()) + 1e-8 {
            break;
        }
    }
    r
}

/// Finite differences on a store owned by `obj`, optionally limited to the
/// named parameters.
fn owned_check<T, F>(obj: &mut T, store_of: fn(&mut T) -> &mut ParamStore, names: Option<&[&str]>, what: &str, mut f: F)
where
    F: FnMut(&mut Graph, &T) -> Var,
{
    let mut g = Graph::new();
    let loss = f(&mut g, obj);
    let grads = g.backward(loss).unwrap();
    let store = store_of(obj);
    store.zero_grad();
    store.accumulate(&g, &grads);
    let ids: Vec<_> = match names {
        Some(ns) => ns.iter().map(|n| store.id(n).unwrap()).collect(),
        None => store.ids().collect(),
    };
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).to_vec()).collect();
    store.zero_grad();
    let mut checked = 0;
    for (id, analytic) in ids.into_iter().zip(analytic) {
        let n = analytic.len();
        let stride = if names.is_some() { 1 } else { n.div_ceil(24).max(1) };
        for j in (0..n).step_by(stride) {
            let orig = store_of(obj).get(id).data()[j];
            let mut eval = |v: f64, obj: &mut T| {
                store_of(obj).get_mut(id).data_mut()[j] = v;
                let mut g = Graph::new();
                let l = f(&mut g, obj);
                g.scalar(l)
            };
            let mut central = |h: f64| (eval(orig + h, obj) - eval(orig - h, obj)) / (2.0 * h);
            let numeric = converged_difference(&mut central);
            let e = rel_error(analytic[j], numeric, 1e-5);
            store_of(obj).get_mut(id).data_mut()[j] = orig;
            assert!(e < TOL, "{what}: {}[{j}] analytic {} numeric {numeric}", store_of(obj).name(id), analytic[j]);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn gradient_suite() {
    let t0 = Instant::now();
    let mut configs = 0;
    let cfg = tiny_cut();

    for seed in 0..3 {
        // discriminator loss on real and fake batches
        let mut model = CutModel::new(&cfg, &mut rng(seed)).unwrap();
        let real = images_to_tensor(&[noise_image(seed + 10, 16), noise_image(seed + 11, 16)]).unwrap();
        let fake = images_to_tensor(&[noise_image(seed + 20, 16), noise_image(seed + 21, 16)]).unwrap();
        owned_check(&mut model, |m| &mut m.d_store, None, "lsgan_d", |g, m| {
            let r = g.input(real.clone());
            let f = g.input(fake.clone());
            let rs = m.disc.forward(g, &m.d_store, r).unwrap();
            let fs = m.disc.forward(g, &m.d_store, f).unwrap();
            lsgan_d_loss(g, rs, fs, &cfg).unwrap()
        });
        configs += 1;

        // generator adversarial loss through a frozen discriminator
        let x = images_to_tensor(&[noise_image(seed + 30, 16)]).unwrap();
        owned_check(&mut model, |m| &mut m.gh_store, None, "lsgan_g", |g, m| {
            let xv = g.input(x.clone());
            let (y, _) = m.gen.forward(g, &m.gh_store, xv).unwrap();
            let s = m.disc.forward(g, &m.d_store, y).unwrap();
            lsgan_g_loss(g, s, &cfg).unwrap()
        });
        configs += 1;

        // PatchNCE between a source image and its translation
        owned_check(&mut model, |m| &mut m.gh_store, None, "patchnce", |g, m| {
            let xv = g.input(x.clone());
            let (y, taps) = m.gen.forward(g, &m.gh_store, xv).unwrap();
            patchnce_loss(m, g, &taps, y, &mut rng(seed + 40)).unwrap()
        });
        configs += 1;

        // contrastive rows on free unit vectors
        let mut store = ParamStore::new();
        let mut r = rng(seed + 50);
        store.add("q", Tensor::randn(&[5, 3], 1.0, &mut r)).unwrap();
        store.add("k", Tensor::randn(&[5, 3], 1.0, &mut r)).unwrap();
        owned_check(&mut store, |s| s, None, "nce_rows", |g, store| {
            let q = g.param_named(store, "q").unwrap();
            let k = g.param_named(store, "k").unwrap();
            let q = g.l2_normalize_rows(q).unwrap();
            let k = g.l2_normalize_rows(k).unwrap();
            nce_rows(g, q, k, 0.3).unwrap()
        });
        configs += 1;
    }

    let sim = SimConfig::desk();
    for (seed, side) in [(0u64, None), (1, None), (2, Some(16)), (3, Some(16)), (4, None)] {
        let obs_len = side.map_or(12, |s: usize| s * s);
        let mut r = rng(100 + seed);
        let mut policy = PolicyNet::new(obs_len, side, &sim, r.random_range(-1.0..0.5), &mut r).unwrap();
        let n = 5;
        let obs = Tensor::new(&[n, obs_len], (0..n * obs_len).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let u: Vec<[f64; ACTION_DIM]> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.5..1.5))).collect();

        // action head: log-density of fixed samples
        owned_check(&mut policy, |p| &mut p.store, None, "log_prob", |g, p| {
            let x = g.input(obs.clone());
            let out = p.forward(g, x).unwrap();
            let lp = log_prob(g, out.mean, out.log_std, &u).unwrap();
            g.sum(lp)
        });
        configs += 1;

        // clipped surrogate with ratios away from the clip edges, plus entropy
        let mut g = Graph::new();
        let x = g.input(obs.clone());
        let out = policy.forward(&mut g, x).unwrap();
        let lp0 = log_prob(&mut g, out.mean, out.log_std, &u).unwrap();
        let shifts = [0.5, -0.05, 0.05, -0.5, 0.1];
        let mb = Minibatch {
            obs: obs.clone(),
            actions: u.clone(),
            old_log_probs: g.value(lp0).data().iter().zip(shifts).map(|(l, s)| l - s).collect(),
            advantages: (0..n).map(|_| r.random_range(-2.0..2.0)).collect(),
            returns: (0..n).map(|_| r.random_range(0.0..2.0)).collect(),
        };
        let tc = TrainCfg {
            value_coef: 0.0,
            entropy_coef: 0.01,
            ..TrainCfg::default()
        };
        owned_check(&mut policy, |p| &mut p.store, None, "ppo surrogate", |g, p| ppo_loss(g, p, &mb, &tc).unwrap().total);
        configs += 1;

        // value head against returns; the trunk is behind a stop-gradient
        let tc = TrainCfg::default();
        owned_check(&mut policy, |p| &mut p.store, Some(&["pi.value.weight", "pi.value.bias"]), "value loss", |g, p| {
            ppo_loss(g, p, &mb, &tc).unwrap().value
        });
        configs += 1;
    }

    assert!(configs >= 20, "{configs} configurations");
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient suite took {secs:.1} s");
}
