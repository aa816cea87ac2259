//! Command implementations behind the `goalsar` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{self, Manifest};
use crate::config::RunConfig;
use crate::data::SceneSet;
use crate::dataset::{gen_synthetic_set, split_dataset};
use crate::error::{Error, Result};
use crate::eval::{ablate_goal_noise, evaluate, goal_fde_distribution, EvalReport};
use crate::fusion::FusionMode;
use crate::model::{Forecaster, ModelKind, Predictor};
use crate::plot;
use crate::raster::RasterConfig;
use crate::sampling::sample_goals_at;
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "goalsar", about = "Goal-conditioned trajectory forecasting lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["sar", "goal_sar", "rnn", "lstm"])]
    pub model: Option<String>,
    #[arg(long, global = true, value_parser = ["early", "late", "skip"])]
    pub fusion: Option<String>,
    /// Samples per trajectory for eval and sample-goals.
    #[arg(long, global = true)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    GenSynthetic,
    Train,
    Eval,
    Ablate,
    SampleGoals,
}

impl Cli {
    /// The configuration file with command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.model {
            cfg.model = ModelKind::parse(m)?;
        }
        if let Some(f) = &self.fusion {
            cfg.fusion = FusionMode::parse(f)?;
        }
        if let Some(k) = self.k {
            cfg.eval_k = k;
            cfg.sample_k = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::GenSynthetic => cmd_gen_synthetic(&cfg),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Eval => cmd_eval(&cfg).map(|_| ()),
        Command::Ablate => cmd_ablate(&cfg),
        Command::SampleGoals => cmd_sample_goals(&cfg),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write(&dir.join("config.txt"), &cfg.to_text())
}

/// Scenes plus windows, from `data.dir` or generated from the synthetic
/// settings.
pub fn load_data(cfg: &RunConfig) -> Result<SceneSet> {
    let mut set = match &cfg.data_dir {
        Some(dir) => SceneSet::load_dir(dir, &cfg.schema, cfg.stride)?,
        None => {
            let syn = crate::dataset::SyntheticConfig {
                seed: cfg.seed,
                ..cfg.synthetic.clone()
            };
            SceneSet::synthetic(&syn, cfg.synthetic_scenes, cfg.stride)?
        }
    };
    set.unit = cfg.unit.clone();
    Ok(set)
}

pub struct Splits {
    pub train: SceneSet,
    pub val: SceneSet,
    pub test: SceneSet,
}

pub fn split(cfg: &RunConfig, set: &SceneSet) -> Result<Splits> {
    let s = split_dataset(&set.scene_ids(), &cfg.split.spec(), cfg.seed)?;
    Ok(Splits {
        train: set.subset(&s.train),
        val: set.subset(&s.val),
        test: set.subset(&s.test),
    })
}

fn raster_for(cfg: &RunConfig, set: &SceneSet) -> Result<RasterConfig> {
    let scene = set
        .scenes
        .first()
        .ok_or_else(|| Error::Empty("no scenes loaded".into()))?;
    Ok(cfg.raster(scene.raster.width(), scene.raster.height()))
}

pub fn build_model(cfg: &RunConfig, raster: RasterConfig) -> Result<Forecaster> {
    cfg.model
        .build(cfg.sar.clone(), cfg.fusion, cfg.unet.clone(), raster, cfg.seed)
}

fn manifest(cfg: &RunConfig, raster: &RasterConfig, model: &Forecaster) -> Manifest {
    let params = model.sar.store().num_scalars() + model.goal.as_ref().map_or(0, |g| g.unet.store().num_scalars());
    Manifest::new(checkpoint::model_keys(cfg, raster), params)
}

/// Writes scene rasters, metadata and annotations for the synthetic
/// settings into `out`.
pub fn cmd_gen_synthetic(cfg: &RunConfig) -> Result<()> {
    let syn = crate::dataset::SyntheticConfig {
        seed: cfg.seed,
        ..cfg.synthetic.clone()
    };
    let parts = gen_synthetic_set(&syn, &syn.scene_id, cfg.synthetic_scenes)?;
    SceneSet::save_raw(&parts, &cfg.out)?;
    echo_config(cfg, &cfg.out)?;
    log::info!("wrote {} scene(s) to {}", parts.len(), cfg.out.display());
    Ok(())
}

/// Trains on the train split, keeping the best validation epoch, and
/// writes the checkpoint, loss curve and resolved configuration.
pub fn cmd_train(cfg: &RunConfig) -> Result<Forecaster> {
    let set = load_data(cfg)?;
    let parts = split(cfg, &set)?;
    let raster = raster_for(cfg, &set)?;
    let mut model = build_model(cfg, raster)?;
    let mut tc = cfg.training()?;
    tc.dump_dir = Some(cfg.out.clone());
    log::info!(
        "training {} on {} windows ({} validation)",
        cfg.model.name(),
        parts.train.len(),
        parts.val.len()
    );
    let report = train(&mut model, &parts.train, &tc, Some(&parts.val))?;
    checkpoint::save(&cfg.checkpoint_dir(), &model, &manifest(cfg, &raster, &model))?;
    write(&cfg.out.join("loss.csv"), &report.curve_csv())?;
    let total: Vec<(f64, f64)> = report.curve.iter().map(|e| (e.epoch as f64, e.total)).collect();
    plot::save_png(&plot::curves(&[(plot::PREDICTED, total)], 480, 320), &cfg.out.join("loss.png"))?;
    echo_config(cfg, &cfg.out)?;
    Ok(model)
}

/// Loads the configured checkpoint, failing with the differing keys when
/// it was trained under another model configuration.
pub fn load_checkpoint(cfg: &RunConfig, set: &SceneSet) -> Result<Forecaster> {
    let raster = raster_for(cfg, set)?;
    let fresh = build_model(cfg, raster)?;
    checkpoint::load(&cfg.checkpoint_dir(), &manifest(cfg, &raster, &fresh), || Ok(fresh))
}

fn eval_plots(cfg: &RunConfig, model: &Forecaster, test: &SceneSet, dir: &Path) -> Result<usize> {
    let n = cfg.eval_plots.min(test.len());
    for i in 0..n {
        let s = &test.samples[i];
        let scene = test.scene_of(s);
        let seed = cfg.seed.wrapping_add(i as u64);
        let preds = model.predict(&s.window, scene, cfg.eval_k, seed)?;
        let goals = match &model.goal {
            Some(gm) => gm.sample(&s.window, scene, cfg.eval_k, seed)?,
            None => Vec::new(),
        };
        let img = plot::overlay(scene, &s.window, &preds, &goals, 4);
        plot::save_png(&img, &dir.join(format!("overlay_{i:04}.png")))?;
    }
    Ok(n)
}

/// Min-K evaluation of the checkpoint on the test split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let set = load_data(cfg)?;
    let parts = split(cfg, &set)?;
    let model = load_checkpoint(cfg, &set)?;
    let report = evaluate(&model, &parts.test, cfg.eval_k, cfg.seed)?;
    let dir = cfg.out.join("eval");
    let mut kv = report.to_key_values();
    let _ = writeln!(kv, "model = {}", cfg.model.name());
    write(&dir.join("report.txt"), &kv)?;
    write(&dir.join("per_trajectory.csv"), &report.to_csv())?;
    eval_plots(cfg, &model, &parts.test, &dir.join("plots"))?;
    echo_config(cfg, &dir)?;
    log::info!(
        "min{} ADE {:.4} FDE {:.4} over {} trajectories",
        report.k,
        report.mean_ade,
        report.mean_fde,
        report.count()
    );
    Ok(report)
}

fn variant_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("variant,ade,fde\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{name},{},{}", r.mean_ade, r.mean_fde);
    }
    s
}

/// Trains one variant per `(name, kind, fusion)` on the train split with
/// `ablate.epochs` epochs and evaluates each on the test split.
pub fn train_variants(cfg: &RunConfig, variants: &[(String, ModelKind, FusionMode)]) -> Result<Vec<(String, EvalReport)>> {
    let set = load_data(cfg)?;
    let parts = split(cfg, &set)?;
    let raster = raster_for(cfg, &set)?;
    let mut tc = cfg.training()?;
    tc.epochs = cfg.ablate_epochs;
    let mut rows = Vec::new();
    for (name, kind, fusion) in variants {
        let mut model = kind.build(cfg.sar.clone(), *fusion, cfg.unet.clone(), raster, cfg.seed)?;
        train(&mut model, &parts.train, &tc, Some(&parts.val))?;
        let r = evaluate(&model, &parts.test, cfg.eval_k, cfg.seed)?;
        log::info!("{name}: ADE {:.4} FDE {:.4}", r.mean_ade, r.mean_fde);
        rows.push((name.clone(), r));
    }
    Ok(rows)
}

/// `ablate.mode`: `goal-noise`, `goal-fde`, `fusion` or `backbone`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.out.join("ablate");
    match cfg.ablate_mode.as_str() {
        "goal-noise" => {
            let set = load_data(cfg)?;
            let parts = split(cfg, &set)?;
            let model = load_checkpoint(cfg, &set)?;
            let curve = ablate_goal_noise(&model, &parts.test, &cfg.ablate_sigmas, cfg.seed)?;
            write(&dir.join("goal_noise.csv"), &curve.to_csv())?;
            let ade = curve.points.iter().map(|p| (p.sigma, p.ade_mean)).collect();
            let fde = curve.points.iter().map(|p| (p.sigma, p.fde_mean)).collect();
            let img = plot::curves(&[(plot::OBSERVED, ade), (plot::PREDICTED, fde)], 480, 320);
            plot::save_png(&img, &dir.join("goal_noise.png"))?;
        }
        "goal-fde" => {
            let set = load_data(cfg)?;
            let parts = split(cfg, &set)?;
            let model = load_checkpoint(cfg, &set)?;
            let gm = model
                .goal
                .as_ref()
                .ok_or_else(|| Error::Config("goal-fde ablation needs a goal-conditioned model".into()))?;
            let h = goal_fde_distribution(gm, &parts.test, cfg.eval_k, cfg.seed, 1.0)?;
            write(&dir.join("goal_fde.csv"), &h.to_csv())?;
            plot::save_png(&plot::histogram(&h.counts, 480, 320), &dir.join("goal_fde.png"))?;
        }
        "fusion" => {
            let kind = if cfg.model.goal_conditioned() { cfg.model } else { ModelKind::GoalSar };
            let variants: Vec<_> = FusionMode::ALL.iter().map(|&f| (f.name().to_string(), kind, f)).collect();
            let rows = train_variants(cfg, &variants)?;
            write(&dir.join("fusion.csv"), &variant_table(&rows))?;
            bar_plot(&rows, &dir.join("fusion.png"))?;
        }
        "backbone" => {
            let variants: Vec<_> = [ModelKind::Rnn, ModelKind::Lstm, ModelKind::GoalSar]
                .iter()
                .map(|&k| (k.backbone().name().to_string(), k, cfg.fusion))
                .collect();
            let rows = train_variants(cfg, &variants)?;
            write(&dir.join("backbone.csv"), &variant_table(&rows))?;
            bar_plot(&rows, &dir.join("backbone.png"))?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation mode {other:?}; expected goal-noise, goal-fde, fusion or backbone"
            )))
        }
    }
    echo_config(cfg, &dir)
}

fn bar_plot(rows: &[(String, EvalReport)], path: &Path) -> Result<()> {
    let scale = 1000.0;
    let counts: Vec<usize> = rows.iter().map(|(_, r)| (r.mean_ade * scale).round() as usize).collect();
    plot::save_png(&plot::histogram(&counts, 60 * rows.len() as u32, 240), path)
}

/// Samples goals for the first `eval.plots` test windows and writes them
/// with the predicted probability maps.
pub fn cmd_sample_goals(cfg: &RunConfig) -> Result<()> {
    let set = load_data(cfg)?;
    let parts = split(cfg, &set)?;
    let model = load_checkpoint(cfg, &set)?;
    let gm = model
        .goal
        .as_ref()
        .ok_or_else(|| Error::Config("sample-goals needs a goal-conditioned model".into()))?;
    let dir = cfg.out.join("goals");
    for i in 0..cfg.eval_plots.min(parts.test.len()) {
        let s = &parts.test.samples[i];
        let map = gm.probability_map(&s.window, parts.test.scene_of(s))?;
        let goals = sample_goals_at(
            &map,
            cfg.sample_k,
            cfg.sample_ttst,
            cfg.seed.wrapping_add(i as u64),
            cfg.sample_resolution,
        )?;
        write(&dir.join(format!("goals_{i:04}.txt")), &goals.to_text())?;
        plot::save_png(&plot::probability_image(&map, 4), &dir.join(format!("map_{i:04}.png")))?;
    }
    echo_config(cfg, &dir)
}
