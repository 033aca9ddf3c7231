//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//!     cargo test --release -p trilearn-core --test acceptance

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use autograd::gradcheck::rel_error;
use autograd::{Graph, ParamStore, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trilearn::cut::{images_to_tensor, lsgan_d_loss, lsgan_g_loss, nce_loss, nce_rows, patchnce_loss, CutConfig, CutModel};
use trilearn::embed::{extract_embedding, EmbedConfig};
use trilearn::manifest::RunManifest;
use trilearn::metrics::{frechet_distance, inception_score, lowess, GaussianStats};
use trilearn::pipeline::{run_pipeline, PipelineConfig};
use trilearn::policy::{log_prob, median, plan_experiment, ppo_loss, Minibatch, PolicyNet, TrainCfg, Variant, ACTION_DIM};
use trilearn::raster::{render, to_gray, Camera, ImageBuffer};
use trilearn::reward::{evaluate_reward, inside_triangle, RewardConfig};
use trilearn::sim::{apply_action, init_tissue, project_distance, step, Action, SimConfig, TissueState};
use trilearn::Vec3;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 -------------------------------------------------------------------------

fn barycentric(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> [f64; 3] {
    let (v0, v1, v2) = (b - a, c - a, p - a);
    let (d00, d01, d11) = (v0.dot(v0), v0.dot(v1), v1.dot(v1));
    let (d20, d21) = (v2.dot(v0), v2.dot(v1));
    let den = d00 * d11 - d01 * d01;
    let v = (d11 * d20 - d01 * d21) / den;
    let w = (d00 * d21 - d01 * d20) / den;
    [1.0 - v - w, v, w]
}

fn geometry_oracle() -> Outcome {
    let mut r = rng(1);
    let v = |r: &mut ChaCha8Rng| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let mut cases = Vec::with_capacity(10_000);
    while cases.len() < 10_000 {
        let (a, b, c) = (v(&mut r), v(&mut r), v(&mut r));
        if (b - a).cross(c - a).norm() < 1e-3 {
            continue;
        }
        let (s, t) = (r.random_range(-0.5..1.5), r.random_range(-0.5..1.5));
        let q = a + (b - a) * s + (c - a) * t;
        let lam = barycentric(q, a, b, c);
        if lam.iter().any(|l| l.abs() <= 1e-9) {
            continue;
        }
        cases.push((q, a, b, c, lam.iter().all(|&l| l > 0.0)));
    }
    let t0 = Instant::now();
    let mut wrong = 0;
    for &(q, a, b, c, expect) in &cases {
        if inside_triangle(q, a, b, c).map_err(|e| e.to_string())? != expect {
            wrong += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(wrong == 0 && secs < 1.0, format!("{wrong} disagreements over 10000 instances in {secs:.3} s"))
}

// 2 -------------------------------------------------------------------------

fn reward_truth_table() -> Outcome {
    let cfg = RewardConfig::for_frame(32, 32);
    let frame = |n: usize| {
        let mut img = ImageBuffer::filled(32, 32, [140, 150, 160]);
        for k in 0..n {
            img.pixel_mut(k % 32, k / 32).copy_from_slice(&[20, 20, 220]);
        }
        img
    };
    let tri = (Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.1, 0.1, 0.0), Vec3::new(0.05, 0.1, 0.1));
    let ends = (Vec3::new(0.04, 0.1, 0.03), Vec3::new(0.06, 0.1, 0.03));
    let off_plane = (ends.0 + Vec3::new(0.0, 0.02, 0.0), ends.1 + Vec3::new(0.0, 0.02, 0.0));
    let outside = (Vec3::new(0.3, 0.1, 0.3), ends.1);
    let cases = [
        (0, ends, 0.0),
        (cfg.eps1 - 1, ends, 0.0),
        (0, outside, 0.0),
        (cfg.eps1, outside, 0.5),
        (200, off_plane, 0.5),
        (cfg.eps1, ends, 1.0),
        (200, ends, 1.0),
    ];
    let mut seen = Vec::new();
    for (n, e, want) in cases {
        let got = evaluate_reward(&frame(n), e, tri, &cfg).map_err(|e| e.to_string())?.reward;
        if got != want {
            return Err(format!("mask {n}, endpoints {e:?}: reward {got}, expected {want}"));
        }
        seen.push(got);
    }
    Ok(format!("{} fixtures reproduce rewards {:?}", cases.len(), seen))
}

// 3 -------------------------------------------------------------------------

fn loss_analytics() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [1usize, 7, 63] {
        let dim = n + 2;
        let basis = |i: usize| (0..dim).map(|j| (i == j) as u8 as f64).collect::<Vec<f64>>();
        let negs: Vec<Vec<f64>> = (2..dim).map(basis).collect();
        let l = nce_loss(&basis(0), &basis(1), &negs, 0.07).map_err(|e| e.to_string())?;
        worst = worst.max((l - ((n + 1) as f64).ln()).abs());
    }
    let mut d_worst: f64 = 0.0;
    for (a, b, c) in [(0.0, 1.0, 1.0), (-1.0, 1.0, 0.0), (0.25, 2.0, 2.0)] {
        let cfg = CutConfig { a, b, c, ..CutConfig::default() };
        let mut g = Graph::new();
        let real = g.input(Tensor::full(&[4, 1, 3, 3], b));
        let fake = g.input(Tensor::full(&[4, 1, 3, 3], a));
        let perfect = lsgan_d_loss(&mut g, real, fake, &cfg).map_err(|e| e.to_string())?;
        d_worst = d_worst.max(g.scalar(perfect).abs());
        let mid = g.input(Tensor::full(&[4, 1, 3, 3], (a + b) / 2.0));
        let confused = lsgan_d_loss(&mut g, mid, mid, &cfg).map_err(|e| e.to_string())?;
        d_worst = d_worst.max((g.scalar(confused) - (b - a).powi(2) / 4.0).abs());
    }
    check(
        worst <= 1e-12 && d_worst <= 1e-12,
        format!("nce max deviation {worst:.2e}, lsgan max deviation {d_worst:.2e}"),
    )
}

// 4 -------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;

/// Richardson-extrapolated central difference; the step shrinks while
/// successive estimates disagree.
fn converged_difference(central: &mut impl FnMut(f64) -> f64) -> f64 {
    let mut r = 0.0;
    for h in [GRAD_H, GRAD_H / 10.0, GRAD_H / 100.0] {
        let (c1, c2) = (central(h), central(h / 2.0));
        r = (4.0 * c2 - c1) / 3.0;
        if (c1 - c2).abs() <= 1e-5 * c1.abs().max(c2.abs()) + 1e-8 {
            break;
        }
    }
    r
}

/// Largest relative error between reverse-mode and finite-difference
/// gradients over a strided subset of the store owned by `obj`.
fn grad_error<T>(obj: &mut T, store_of: fn(&mut T) -> &mut ParamStore, f: impl FnMut(&mut Graph, &T) -> Var) -> f64 {
    grad_error_on(obj, store_of, None, f)
}

/// [`grad_error`] restricted to the named parameters when `names` is set.
fn grad_error_on<T>(
    obj: &mut T,
    store_of: fn(&mut T) -> &mut ParamStore,
    names: Option<&[&str]>,
    mut f: impl FnMut(&mut Graph, &T) -> Var,
) -> f64 {
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
    let mut worst: f64 = 0.0;
    for (id, analytic) in ids.into_iter().zip(analytic) {
        let stride = analytic.len().div_ceil(24).max(1);
        for j in (0..analytic.len()).step_by(stride) {
            let orig = store_of(obj).get(id).data()[j];
            let mut eval = |v: f64, obj: &mut T| {
                store_of(obj).get_mut(id).data_mut()[j] = v;
                let mut g = Graph::new();
                let l = f(&mut g, obj);
                g.scalar(l)
            };
            let mut central = |h: f64| (eval(orig + h, obj) - eval(orig - h, obj)) / (2.0 * h);
            let numeric = converged_difference(&mut central);
            store_of(obj).get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_error(analytic[j], numeric, 1e-5));
        }
    }
    worst
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.input(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabc)));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn noise_image(seed: u64, side: usize) -> ImageBuffer {
    let mut r = rng(seed);
    let data = (0..side * side).map(|_| r.random_range(0..=255u8)).collect();
    ImageBuffer::from_data(side, side, 1, data).unwrap()
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut errs: Vec<(String, f64)> = Vec::new();

    // activations, elementwise arithmetic and reductions
    for seed in 0..4u64 {
        let mut r = rng(seed);
        let (n, d) = (r.random_range(2..6), r.random_range(2..6));
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::randn(&[n, d], 1.0, &mut r)).unwrap();
        let b = s.add("b", Tensor::randn(&[n, d], 1.0, &mut r)).unwrap();
        let row = s.add("row", Tensor::randn(&[d], 1.0, &mut r)).unwrap();
        let e = grad_error(&mut s, |s| s, |g, s| {
            let (a, b, row) = (g.param(s, a), g.param(s, b), g.param(s, row));
            let sum = g.add(a, b).unwrap();
            let diff = g.sub(a, b).unwrap();
            let prod = g.mul(sum, diff).unwrap();
            let lr = g.leaky_relu(prod, 0.2);
            let rl = g.relu(lr);
            let th = g.tanh(lr);
            let ex = g.exp(th);
            let sq = g.square(rl);
            let sq = g.add_scalar(sq, 1.5);
            let lg = g.log(sq);
            let mixed = g.mul_row(ex, row).unwrap();
            let m = g.minimum(mixed, lg).unwrap();
            let c = g.clamp(m, -0.8, 2.5);
            weighted_sum(g, c, seed)
        });
        errs.push((format!("activations/{seed}"), e));
    }

    // linear layers, row normalization and cross-entropy
    for seed in 0..4u64 {
        let mut r = rng(100 + seed);
        let (m, k, n) = (r.random_range(2..5), r.random_range(2..6), r.random_range(2..5));
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::randn(&[m, k], 1.0, &mut r)).unwrap();
        let w = s.add("w", Tensor::randn(&[k, n], 1.0, &mut r)).unwrap();
        let bias = s.add("bias", Tensor::randn(&[n], 1.0, &mut r)).unwrap();
        let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
        let e = grad_error(&mut s, |s| s, |g, s| {
            let (a, w, bias) = (g.param(s, a), g.param(s, w), g.param(s, bias));
            let y = g.matmul(a, w).unwrap();
            let y = g.add_row(y, bias).unwrap();
            let ce = g.cross_entropy_rows(y, &targets).unwrap();
            let q = g.l2_normalize_rows(y).unwrap();
            let extra = weighted_sum(g, q, seed);
            g.add(ce, extra).unwrap()
        });
        errs.push((format!("linear/{seed}"), e));
    }

    // convolution, transposed convolution and instance norm
    for seed in 0..4u64 {
        let mut r = rng(200 + seed);
        let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let k = [1usize, 3, 4][r.random_range(0..3)];
        let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
        let h = r.random_range(k.max(4)..9);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&[n, c, h, h], 1.0, &mut r)).unwrap();
        let w = s.add("w", Tensor::randn(&[o, c, k, k], 0.5, &mut r)).unwrap();
        let b = s.add("b", Tensor::randn(&[o], 0.5, &mut r)).unwrap();
        let wt = s.add("wt", Tensor::randn(&[o, 2, 4, 4], 0.5, &mut r)).unwrap();
        let e = grad_error(&mut s, |s| s, |g, s| {
            let (x, w, b, wt) = (g.param(s, x), g.param(s, w), g.param(s, b), g.param(s, wt));
            let y = g.conv2d(x, w, Some(b), stride, pad).unwrap();
            let y = g.instance_norm(y, 1e-5).unwrap();
            let y = g.leaky_relu(y, 0.2);
            let up = g.conv_transpose2d(y, wt, None, 2, 1).unwrap();
            let up = g.tanh(up);
            weighted_sum(g, up, seed)
        });
        errs.push((format!("conv/{seed}"), e));
    }

    // the three translator loss families
    let cfg = CutConfig {
        image_size: 16,
        ngf: 2,
        ndf: 2,
        k: 4,
        n_patches: 4,
        ..CutConfig::default()
    };
    for seed in 0..2u64 {
        let mut model = CutModel::new(&cfg, &mut rng(seed)).unwrap();
        let real = images_to_tensor(&[noise_image(seed + 10, 16), noise_image(seed + 11, 16)]).unwrap();
        let fake = images_to_tensor(&[noise_image(seed + 20, 16), noise_image(seed + 21, 16)]).unwrap();
        let x = images_to_tensor(&[noise_image(seed + 30, 16)]).unwrap();
        let e = grad_error(&mut model, |m| &mut m.d_store, |g, m| {
            let (r, f) = (g.input(real.clone()), g.input(fake.clone()));
            let rs = m.disc.forward(g, &m.d_store, r).unwrap();
            let fs = m.disc.forward(g, &m.d_store, f).unwrap();
            lsgan_d_loss(g, rs, fs, &cfg).unwrap()
        });
        errs.push((format!("lsgan_d/{seed}"), e));
        let e = grad_error(&mut model, |m| &mut m.gh_store, |g, m| {
            let xv = g.input(x.clone());
            let (y, _) = m.gen.forward(g, &m.gh_store, xv).unwrap();
            let s = m.disc.forward(g, &m.d_store, y).unwrap();
            lsgan_g_loss(g, s, &cfg).unwrap()
        });
        errs.push((format!("lsgan_g/{seed}"), e));
        let e = grad_error(&mut model, |m| &mut m.gh_store, |g, m| {
            let xv = g.input(x.clone());
            let (y, taps) = m.gen.forward(g, &m.gh_store, xv).unwrap();
            patchnce_loss(m, g, &taps, y, &mut rng(seed + 40)).unwrap()
        });
        errs.push((format!("patchnce/{seed}"), e));
        let mut s = ParamStore::new();
        let mut r = rng(seed + 50);
        s.add("q", Tensor::randn(&[5, 3], 1.0, &mut r)).unwrap();
        s.add("k", Tensor::randn(&[5, 3], 1.0, &mut r)).unwrap();
        let e = grad_error(&mut s, |s| s, |g, s| {
            let q = g.param_named(s, "q").unwrap();
            let k = g.param_named(s, "k").unwrap();
            let q = g.l2_normalize_rows(q).unwrap();
            let k = g.l2_normalize_rows(k).unwrap();
            nce_rows(g, q, k, 0.3).unwrap()
        });
        errs.push((format!("nce/{seed}"), e));
    }

    // policy heads: action log-density and the PPO objective
    let sim = SimConfig::desk();
    for (seed, side) in [(0u64, None), (1, Some(16)), (2, None), (3, Some(16))] {
        let obs_len = side.map_or(12, |s: usize| s * s);
        let mut r = rng(100 + seed);
        let mut policy = PolicyNet::new(obs_len, side, &sim, r.random_range(-1.0..0.5), &mut r).unwrap();
        let n = 5;
        let obs = Tensor::new(&[n, obs_len], (0..n * obs_len).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let u: Vec<[f64; ACTION_DIM]> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.5..1.5))).collect();
        let e = grad_error(&mut policy, |p| &mut p.store, |g, p| {
            let x = g.input(obs.clone());
            let out = p.forward(g, x).unwrap();
            let lp = log_prob(g, out.mean, out.log_std, &u).unwrap();
            g.sum(lp)
        });
        errs.push((format!("action_head/{seed}"), e));
        // the value head reads the trunk through a stop-gradient
        let e = grad_error_on(&mut policy, |p| &mut p.store, Some(&["pi.value.weight", "pi.value.bias"]), |g, p| {
            let x = g.input(obs.clone());
            let out = p.forward(g, x).unwrap();
            weighted_sum(g, out.value, seed)
        });
        errs.push((format!("value_head/{seed}"), e));

        let mut g = Graph::new();
        let x = g.input(obs.clone());
        let out = policy.forward(&mut g, x).unwrap();
        let lp0 = log_prob(&mut g, out.mean, out.log_std, &u).unwrap();
        let mb = Minibatch {
            obs: obs.clone(),
            actions: u.clone(),
            old_log_probs: g.value(lp0).data().iter().zip([0.5, -0.05, 0.05, -0.5, 0.1]).map(|(l, s)| l - s).collect(),
            advantages: (0..n).map(|_| r.random_range(-2.0..2.0)).collect(),
            returns: (0..n).map(|_| r.random_range(0.0..2.0)).collect(),
        };
        // value term off: its trunk gradient is stopped on purpose
        let tc = TrainCfg {
            value_coef: 0.0,
            entropy_coef: 0.01,
            ..TrainCfg::default()
        };
        let e = grad_error(&mut policy, |p| &mut p.store, |g, p| ppo_loss(g, p, &mb, &tc).unwrap().total);
        errs.push((format!("ppo/{seed}"), e));
    }

    let secs = t0.elapsed().as_secs_f64();
    let (name, worst) = errs.iter().fold((String::new(), 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.clone(), *e) } else { acc });
    check(
        errs.len() >= 20 && worst < GRAD_TOL && secs < 60.0,
        format!("{} configurations, max rel error {worst:.2e} ({name}), {secs:.1} s", errs.len()),
    )
}

// 5 -------------------------------------------------------------------------

fn embedding_contract() -> Outcome {
    let cfg = EmbedConfig::default();
    if (cfg.l, cfg.s, cfg.k) != (5, 32, 32) {
        return Err(format!("defaults L={} S={} k={}", cfg.l, cfg.s, cfg.k));
    }
    let model = CutModel::new(&CutConfig::desk(), &mut rng(1)).map_err(|e| e.to_string())?;
    let (gh, d) = (model.gh_store.fingerprint(), model.d_store.fingerprint());
    let sim = SimConfig::desk();
    let state = init_tissue(&sim).map_err(|e| e.to_string())?;
    let frame = to_gray(&render(&state, &Camera::overhead(&sim, 64)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let img = model.translate(&frame).map_err(|e| e.to_string())?;
    let block = extract_embedding(&model, &img, &cfg, &mut rng(2)).map_err(|e| e.to_string())?;
    let len = block.flatten().len();
    let mut worst: f64 = 0.0;
    for l in 0..cfg.l {
        for s in 0..cfg.s {
            let n = block.vector(l, s).iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max((n - 1.0).abs());
        }
    }
    let untouched = model.gh_store.fingerprint() == gh && model.d_store.fingerprint() == d;
    check(
        len == 5120 && worst <= 1e-6 && untouched,
        format!("length {len}, max |norm - 1| {worst:.2e}, parameters unchanged: {untouched}"),
    )
}

// 6 -------------------------------------------------------------------------

fn metric_closed_forms() -> Outcome {
    let mut r = rng(17);
    let scalar = |mu: f64, sd: f64| GaussianStats::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, sd * sd)).unwrap();
    let mut fid_worst: f64 = 0.0;
    for _ in 0..100 {
        let (m1, m2) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let (s1, s2) = (r.random_range(0.01..3.0), r.random_range(0.01..3.0));
        let d = frechet_distance(&scalar(m1, s1), &scalar(m2, s2)).map_err(|e| e.to_string())?;
        fid_worst = fid_worst.max((d - ((m1 - m2).powi(2) + (s1 - s2).powi(2))).abs());
    }
    let c = 4;
    let rows: Vec<Vec<f64>> = (0..400).map(|i| (0..c).map(|j| (i % c == j) as u8 as f64).collect()).collect();
    let is_dev = (inception_score(&rows, 1).map_err(|e| e.to_string())?.0 - c as f64).abs();
    let mut lw_worst: f64 = 0.0;
    for _ in 0..10 {
        let (a, b) = (r.random_range(-10.0..10.0), r.random_range(-3.0..3.0));
        let mut xs: Vec<f64> = (0..50).map(|_| r.random_range(0.0..400.0)).collect();
        xs.sort_by(f64::total_cmp);
        let ys: Vec<f64> = xs.iter().map(|x| a + b * x).collect();
        for frac in [0.1, 2.0 / 3.0, 1.0] {
            let fit = lowess(&xs, &ys, frac).map_err(|e| e.to_string())?;
            for (f, y) in fit.iter().zip(&ys) {
                lw_worst = lw_worst.max((f - y).abs());
            }
        }
    }
    check(
        fid_worst <= 1e-8 && is_dev <= 1e-9 && lw_worst <= 1e-9,
        format!("frechet {fid_worst:.2e}, inception score {is_dev:.2e}, lowess {lw_worst:.2e}"),
    )
}

// 7 -------------------------------------------------------------------------

fn protocol_shape() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainCfg::default();
    let mut counts = Vec::new();
    for scale in [1.0, 0.1] {
        let plan = plan_experiment(&cfg, &Variant::ALL, scale, 0).map_err(|e| e.to_string())?;
        let sub = dir.path().join(format!("scale_{scale}"));
        let mut m = RunManifest::new("train-policy", vec![], "", 0);
        m.planned_models = Some(plan.evaluated_models());
        let path = m.write(&sub).map_err(|e| e.to_string())?;
        let back: RunManifest = serde_json::from_slice(&std::fs::read(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        counts.push(back.planned_models.unwrap_or(0));
    }
    check(counts == [300, 30], format!("manifest counts {} at scale 1, {} at scale 0.1", counts[0], counts[1]))
}

// 8 -------------------------------------------------------------------------

fn desk_trend() -> Outcome {
    let t0 = Instant::now();
    let cfg = PipelineConfig::desk();
    let mut loss = (Vec::new(), Vec::new());
    let mut best = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = run_pipeline(&cfg, seed, dir.path()).map_err(|e| format!("seed {seed}: {e}"))?;
        let get = |v: Variant| out.loss_at_half.iter().find(|(x, _)| *x == v).map(|x| x.1).unwrap_or(f64::NAN);
        let succ = |v: Variant| out.report.summary.iter().find(|s| s.variant == v).map(|s| s.median_best_success).unwrap_or(f64::NAN);
        loss.0.push(get(Variant::Original));
        loss.1.push(get(Variant::Embedded));
        best.0.push(succ(Variant::Original));
        best.1.push(succ(Variant::Embedded));
        println!(
            "  seed {seed}: loss@50% original {:.4} embedded {:.4}; best success original {:.2} embedded {:.2}",
            loss.0[seed as usize], loss.1[seed as usize], best.0[seed as usize], best.1[seed as usize]
        );
    }
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let (lo, le) = (median(&loss.0), median(&loss.1));
    let (so, se) = (median(&best.0), median(&best.1));
    check(
        le < lo && se >= so && minutes < 30.0,
        format!("median loss@50% embedded {le:.4} vs original {lo:.4}; median best success embedded {se:.2} vs original {so:.2}; {minutes:.1} min"),
    )
}

// 9 -------------------------------------------------------------------------

fn settle(mut s: TissueState, cfg: &SimConfig) -> TissueState {
    for _ in 0..3000 {
        s = step(&s, cfg).unwrap();
        if s.kinetic_energy() < 1e-9 {
            break;
        }
    }
    s
}

fn simulation_invariants() -> Outcome {
    let cfg = SimConfig::default();
    if (cfg.stiffness, cfg.solver_iters) != (1.0, 20) {
        return Err("defaults are not stiffness 1 / 20 iterations".into());
    }

    let s0 = init_tissue(&cfg).map_err(|e| e.to_string())?;
    let pinned: Vec<usize> = (0..s0.len()).filter(|&k| s0.inv_mass[k] == 0.0).collect();
    let mut s = s0.clone();
    let mut moved = 0;
    for _ in 0..1000 {
        s = step(&s, &cfg).map_err(|e| e.to_string())?;
        moved += pinned.iter().filter(|&&k| s.positions[k].to_array().map(f64::to_bits) != s0.positions[k].to_array().map(f64::to_bits)).count();
    }

    // resting sheet, then grasps anywhere on the sheet pulled to random
    // targets in the workspace
    let o = cfg.origin;
    let mut strains = vec![settle(s0.clone(), &cfg).max_strain()];
    let mut r = rng(9);
    let (lo, hi) = (cfg.workspace_min, cfg.workspace_max);
    while strains.len() < 21 {
        let p = o + Vec3::new(r.random_range(-0.04..0.04), 0.0, r.random_range(-0.05..0.05));
        let d = Vec3::new(r.random_range(lo.x..hi.x), r.random_range(lo.y..hi.y), r.random_range(lo.z..hi.z));
        let s = apply_action(&s0, Action { p, d }, &cfg).map_err(|e| e.to_string())?;
        if s.noop_pull {
            continue;
        }
        strains.push(settle(s, &cfg).max_strain());
    }
    let over = strains.iter().filter(|&&e| e > 0.02).count();
    let worst = strains.iter().cloned().fold(0.0, f64::max);

    let run = |seed: u64| -> Vec<u64> {
        let mut r = rng(seed);
        let mut s = s0.clone();
        let mut bits = Vec::new();
        for _ in 0..3 {
            let p = o + Vec3::new(r.random_range(-0.04..0.04), 0.0, r.random_range(-0.05..0.05));
            let d = Vec3::new(r.random_range(lo.x..hi.x), r.random_range(lo.y..hi.y), r.random_range(lo.z..hi.z));
            s = apply_action(&s, Action { p, d }, &cfg).unwrap();
            bits.extend(s.positions.iter().flat_map(|v| v.to_array().map(f64::to_bits)));
        }
        bits
    };
    let reproducible = run(5) == run(5);

    check(
        moved == 0 && over == 0 && reproducible,
        format!(
            "pinned moves {moved}; settled strain over 2% in {over} of {} states (max {:.2}%); reproducible {reproducible}",
            strains.len(),
            worst * 100.0
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn projection_oracle() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut v = || Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let (p1, p2) = (v(), v());
        let w1: f64 = if r.random_bool(0.1) { 0.0 } else { r.random_range(0.1..10.0) };
        let w2: f64 = r.random_range(0.1..10.0);
        let rest = r.random_range(0.01..2.0);
        let k = r.random_range(0.05..=1.0);
        let (a, b) = project_distance(p1, p2, w1, w2, rest, k);
        let d = p1 - p2;
        let len = d.norm();
        let n = d * (1.0 / len);
        let c = k * (len - rest);
        let ea = p1 - n * (w1 / (w1 + w2) * c);
        let eb = p2 + n * (w2 / (w1 + w2) * c);
        worst = worst.max((a - ea).norm()).max((b - eb).norm());
    }
    check(worst <= 1e-12, format!("max deviation {worst:.2e} over 1000 configurations"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("geometry oracle", geometry_oracle),
        ("reward truth table", reward_truth_table),
        ("loss analytics", loss_analytics),
        ("gradient suite", gradient_suite),
        ("embedding contract", embedding_contract),
        ("metric closed forms", metric_closed_forms),
        ("protocol shape", protocol_shape),
        ("desk-scale trend", desk_trend),
        ("simulation invariants", simulation_invariants),
        ("projection oracle", projection_oracle),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(d) => println!("PASS criterion {n} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
