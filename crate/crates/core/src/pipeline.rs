//! End-to-end stages shared by the command line and long-running tests:
//! dataset, translator, checkpoint selection and policy experiment.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::cut::{train_translator, CutConfig, CutModel};
use crate::dataset::{generate, write_dataset, Dataset, DatasetConfig};
use crate::embed::EmbedConfig;
use crate::error::{Error, Result};
use crate::metrics::{feature_stats, rank_checkpoints, score_images, CheckpointScore, FeatureNet, RankedCheckpoint};
use crate::policy::{run_experiment, ExperimentReport, InputConfig, TrainCfg, Variant};
use crate::raster::ImageBuffer;
use crate::rngs;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub feature_dim: usize,
    pub feature_epochs: usize,
    pub is_splits: usize,
    pub top_n: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            feature_epochs: 10,
            is_splits: 4,
            top_n: 5,
        }
    }
}

/// Classifier standing in for a pretrained feature extractor, fit to the
/// pose buckets of both domains.
pub fn train_feature_net(ds: &Dataset, image_size: usize, cfg: &SelectConfig, seed: u64) -> Result<FeatureNet> {
    let mut rng = rngs::stream(seed, "features");
    let mut net = FeatureNet::new(image_size, cfg.feature_dim, &mut rng)?;
    let imgs: Vec<ImageBuffer> = ds.source.iter().chain(&ds.target).cloned().collect();
    let labels: Vec<usize> = ds.source_labels.iter().chain(&ds.target_labels).copied().collect();
    net.train(&imgs, &labels, cfg.feature_epochs, &mut rng)?;
    Ok(net)
}

/// IS of each checkpoint's translations of the source set, FID against
/// the target set.
pub fn score_checkpoints(
    checkpoints: &[(usize, PathBuf)],
    cut: &CutConfig,
    ds: &Dataset,
    net: &FeatureNet,
    cfg: &SelectConfig,
) -> Result<Vec<CheckpointScore>> {
    let real = feature_stats(net, &ds.target)?;
    let mut out = Vec::with_capacity(checkpoints.len());
    for (epoch, path) in checkpoints {
        let model = CutModel::from_checkpoint(cut, &Checkpoint::load(path)?)?;
        let fake = ds.source.iter().map(|x| model.translate(x)).collect::<Result<Vec<_>>>()?;
        let (is_mean, is_std, fid) = score_images(net, &fake, &real, cfg.is_splits)?;
        out.push(CheckpointScore {
            epoch: *epoch,
            is_mean,
            is_std,
            fid,
        });
    }
    Ok(out)
}

/// `epoch,is_mean,is_std,fid,rank_sum,selected`, one row per checkpoint in
/// epoch order.
pub fn scores_csv(ranked: &[RankedCheckpoint], top_n: usize) -> String {
    let mut rows: Vec<(usize, &RankedCheckpoint)> = ranked.iter().enumerate().collect();
    rows.sort_by_key(|(_, r)| r.score.epoch);
    let mut s = String::from("epoch,is_mean,is_std,fid,rank_sum,selected\n");
    for (pos, r) in rows {
        let c = &r.score;
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.epoch,
            c.is_mean,
            c.is_std,
            c.fid,
            r.rank_sum,
            (pos < top_n) as u8
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    pub dataset: DatasetConfig,
    pub cut: CutConfig,
    pub select: SelectConfig,
    pub train: TrainCfg,
    pub embed: EmbedConfig,
    pub variants: Vec<Variant>,
    pub scale: f64,
    pub lowess_frac: f64,
}

impl Default for PipelineConfig {
    /// Full protocol: 500/150 frames, 400 translator epochs, all three
    /// variants, 10 runs each.
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            dataset: DatasetConfig::default(),
            cut: CutConfig::default(),
            select: SelectConfig::default(),
            train: TrainCfg::default(),
            embed: EmbedConfig::default(),
            variants: Variant::ALL.to_vec(),
            scale: 1.0,
            lowess_frac: 2.0 / 3.0,
        }
    }
}

impl PipelineConfig {
    /// 64x64 frames, 200/100 images, 40 translator epochs, Original and
    /// Embedded policies at a tenth of the full step budget.
    pub fn desk() -> Self {
        Self {
            sim: SimConfig::desk(),
            dataset: DatasetConfig::desk(),
            cut: CutConfig::desk(),
            select: SelectConfig::default(),
            train: TrainCfg::desk(),
            embed: EmbedConfig::default(),
            variants: vec![Variant::Original, Variant::Embedded],
            scale: 0.1,
            lowess_frac: 2.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub seed: u64,
    pub selected_epoch: usize,
    pub scores: Vec<RankedCheckpoint>,
    pub report: ExperimentReport,
    /// Per variant: median over runs of the smoothed loss halfway through
    /// the shortest run's training time, all runs on one time axis.
    pub loss_at_half: Vec<(Variant, f64)>,
}

/// Runs every stage under `out_dir` from one master seed.
pub fn run_pipeline(cfg: &PipelineConfig, seed: u64, out_dir: &Path) -> Result<PipelineOutcome> {
    let ds = generate(&cfg.sim, &cfg.dataset, seed)?;
    write_dataset(&ds, &out_dir.join("data"))?;

    let mut cut_rng = rngs::stream(seed, "translator");
    let run = train_translator(&ds.source, &ds.target, &cfg.cut, &mut cut_rng, &out_dir.join("translator"))?;
    let net = train_feature_net(&ds, cfg.dataset.image_size, &cfg.select, seed)?;
    let scores = score_checkpoints(&run.checkpoints, &cfg.cut, &ds, &net, &cfg.select)?;
    let ranked = rank_checkpoints(&scores)?;
    write_atomic(&out_dir.join("scores.csv"), scores_csv(&ranked, cfg.select.top_n).as_bytes())?;
    let best = ranked[0].score.epoch;
    let path = &run.checkpoints.iter().find(|(e, _)| *e == best).unwrap().1;
    let model = Arc::new(CutModel::from_checkpoint(&cfg.cut, &Checkpoint::load(path)?)?);

    let embed = EmbedConfig { seed, ..cfg.embed };
    let inputs: Vec<InputConfig> = cfg
        .variants
        .iter()
        .map(|v| match v {
            Variant::Original => InputConfig::original(),
            Variant::Translated => InputConfig::translated(model.clone()),
            Variant::Embedded => InputConfig::embedded(model.clone(), embed),
        })
        .collect();
    let report = run_experiment(
        &cfg.train,
        &cfg.sim,
        &inputs,
        cfg.dataset.image_size,
        cfg.scale,
        seed,
        Some(&out_dir.join("policy")),
    )?;
    let window = report.runs.iter().map(|r| r.training_seconds()).fold(f64::INFINITY, f64::min);
    let mut loss_at_half = Vec::new();
    for &v in &cfg.variants {
        let vals = report
            .runs
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.smoothed_loss_at(window, window / 2.0, cfg.lowess_frac))
            .collect::<Result<Vec<_>>>()?;
        loss_at_half.push((v, crate::policy::median(&vals)));
    }
    if loss_at_half.iter().any(|(_, l)| !l.is_finite()) {
        return Err(Error::TrainingDiverged("smoothed policy loss is not finite".into()));
    }
    Ok(PipelineOutcome {
        seed,
        selected_epoch: best,
        scores: ranked,
        report,
        loss_at_half,
    })
}

/// Training log of one run, read back from disk.
pub struct RunLog {
    pub variant: Variant,
    pub run: usize,
    pub rows: Vec<crate::policy::UpdateRow>,
}

fn smoothed(rows: &[crate::policy::UpdateRow], y: impl Fn(&crate::policy::UpdateRow) -> f64, frac: f64) -> Result<Vec<f64>> {
    let ys: Vec<f64> = rows.iter().map(y).collect();
    if rows.len() < 2 {
        return Ok(ys);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.wall_seconds).collect();
    crate::metrics::lowess(&xs, &ys, frac)
}

/// Curve and aggregate tables: `fig7_loss.csv`, `fig8_reward.csv`,
/// `fig9_success.csv`, `fig10_steps.csv`. Curves are cut at the shortest
/// run's training time and smoothed per run.
pub fn figure_tables(report: &ExperimentReport, logs: &[RunLog], frac: f64) -> Result<Vec<(&'static str, String)>> {
    let window = logs
        .iter()
        .filter_map(|l| l.rows.last().map(|r| r.wall_seconds))
        .fold(f64::INFINITY, f64::min);
    let mut loss = String::from("variant,run,wall_seconds,loss,loss_lowess\n");
    let mut reward = String::from("variant,run,wall_seconds,mean_reward,reward_lowess\n");
    for l in logs {
        let inside = l.rows.iter().filter(|r| r.wall_seconds <= window).count();
        let rows = &l.rows[..inside.max(2).min(l.rows.len())];
        let ls = smoothed(rows, |r| r.loss, frac)?;
        let rs = smoothed(rows, |r| r.mean_reward, frac)?;
        for (i, r) in rows.iter().enumerate() {
            loss.push_str(&format!("{},{},{},{},{}\n", l.variant, l.run, r.wall_seconds, r.loss, ls[i]));
            reward.push_str(&format!("{},{},{},{},{}\n", l.variant, l.run, r.wall_seconds, r.mean_reward, rs[i]));
        }
    }
    let mut success = String::from("variant,runs,median_best_success,mean_best_success,min_best_success,max_best_success\n");
    let mut steps = String::from("variant,runs,median_best_steps,mean_best_steps,runs_without_success\n");
    let mut variants: Vec<Variant> = report.runs.iter().map(|r| r.variant).collect();
    variants.dedup();
    for v in variants {
        let runs: Vec<&crate::policy::RunReport> = report.runs.iter().filter(|r| r.variant == v).collect();
        let n = runs.len() as f64;
        let s: Vec<f64> = runs.iter().map(|r| r.best_success).collect();
        let st: Vec<f64> = runs.iter().map(|r| r.best_steps).collect();
        success.push_str(&format!(
            "{v},{},{},{},{},{}\n",
            runs.len(),
            crate::policy::median(&s),
            s.iter().sum::<f64>() / n,
            s.iter().cloned().fold(f64::INFINITY, f64::min),
            s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        ));
        steps.push_str(&format!(
            "{v},{},{},{},{}\n",
            runs.len(),
            crate::policy::median(&st),
            st.iter().sum::<f64>() / n,
            s.iter().filter(|&&x| x == 0.0).count()
        ));
    }
    Ok(vec![
        ("fig7_loss.csv", loss),
        ("fig8_reward.csv", reward),
        ("fig9_success.csv", success),
        ("fig10_steps.csv", steps),
    ])
}
