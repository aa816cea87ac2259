//! Flat `key = value` run configuration with dotted keys.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{AnnotationSchema, AugmentParams, PathFamily, SplitSpec, SyntheticConfig};
use crate::fusion::{FusionMode, TimeFeature};
use crate::model::ModelKind;
use crate::raster::RasterConfig;
use crate::sampling::SampleResolution;
use crate::sar::SarConfig;
use crate::train::{TrainConfig, TrainMode};
use crate::unet::UnetConfig;
use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// a later duplicate key is an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(key, _)| key == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Which part of the scenes each split draws from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitChoice {
    Ratio,
    LeaveOneOut(String),
    Fixed {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
}

impl SplitChoice {
    pub fn spec(&self) -> SplitSpec {
        match self {
            SplitChoice::Ratio => SplitSpec::Ratio701020,
            SplitChoice::LeaveOneOut(s) => SplitSpec::LeaveOneSceneOut(s.clone()),
            SplitChoice::Fixed { train, val, test } => SplitSpec::FixedSceneList {
                train: train.clone(),
                val: val.clone(),
                test: test.clone(),
            },
        }
    }
}

/// `sigma_s` either fixed in pixels or derived from the first scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaChoice {
    Pixels(f64),
    /// `min(W, H)` of the scene.
    Literal,
    /// One sixteenth of the shorter down-sampled side.
    Desk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Checkpoint directory read by eval, ablate and sample-goals;
    /// `<out>/checkpoint` when unset.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelKind,
    pub fusion: FusionMode,
    /// `None` generates synthetic scenes instead of reading a directory.
    pub data_dir: Option<PathBuf>,
    pub stride: usize,
    pub unit: String,
    pub split: SplitChoice,
    pub schema: AnnotationSchema,
    pub synthetic: SyntheticConfig,
    pub synthetic_scenes: usize,
    pub sigma: SigmaChoice,
    pub downsample_factor: usize,
    pub peak_normalize: bool,
    pub sar: SarConfig,
    pub unet: UnetConfig,
    pub train: TrainConfig,
    pub augment: AugmentParams,
    pub augment_enabled: bool,
    pub eval_k: usize,
    pub eval_plots: usize,
    pub ablate_mode: String,
    pub ablate_sigmas: Vec<f64>,
    pub ablate_epochs: usize,
    pub sample_k: usize,
    pub sample_ttst: bool,
    pub sample_resolution: SampleResolution,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            model: ModelKind::GoalSar,
            fusion: FusionMode::Skip,
            data_dir: None,
            stride: 1,
            unit: "px".into(),
            split: SplitChoice::Ratio,
            schema: AnnotationSchema::default(),
            synthetic: SyntheticConfig::default(),
            synthetic_scenes: 1,
            sigma: SigmaChoice::Literal,
            downsample_factor: 4,
            peak_normalize: true,
            sar: SarConfig::default(),
            unet: UnetConfig::default(),
            augment: train.augment.clone().unwrap_or_else(AugmentParams::none),
            augment_enabled: true,
            train,
            eval_k: 20,
            eval_plots: 4,
            ablate_mode: "goal-noise".into(),
            ablate_sigmas: vec![0.0, 10.0, 25.0, 50.0, 100.0],
            ablate_epochs: 20,
            sample_k: 20,
            sample_ttst: true,
            sample_resolution: SampleResolution::Grid,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overridden by the keys in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Sets one dotted key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "model" => self.model = ModelKind::parse(v)?,
            "fusion" => self.fusion = FusionMode::parse(v)?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.stride" => self.stride = num(key, v)?,
            "data.unit" => self.unit = v.to_string(),
            "data.split" => {
                self.split = match v.split_once(':') {
                    None if v == "ratio" => SplitChoice::Ratio,
                    None if v == "fixed" => SplitChoice::Fixed {
                        train: Vec::new(),
                        val: Vec::new(),
                        test: Vec::new(),
                    },
                    Some(("loso", s)) => SplitChoice::LeaveOneOut(s.trim().to_string()),
                    _ => return Err(Error::Config(format!("{key}: expected ratio, fixed or loso:<scene>, got {v:?}"))),
                }
            }
            "data.train_scenes" | "data.val_scenes" | "data.test_scenes" => {
                let ids: Vec<String> = list(key, v)?;
                let SplitChoice::Fixed { train, val, test } = &mut self.split else {
                    return Err(Error::Config(format!("{key} needs data.split = fixed set first")));
                };
                match key {
                    "data.train_scenes" => *train = ids,
                    "data.val_scenes" => *val = ids,
                    _ => *test = ids,
                }
            }
            "data.schema.frame" => self.schema.frame = num(key, v)?,
            "data.schema.agent" => self.schema.agent = num(key, v)?,
            "data.schema.x" => self.schema.x = num(key, v)?,
            "data.schema.y" => self.schema.y = num(key, v)?,
            "data.schema.label" => self.schema.label = if v == "none" { None } else { Some(num(key, v)?) },
            "synthetic.scenes" => self.synthetic_scenes = num(key, v)?,
            "synthetic.width" => self.synthetic.width = num(key, v)?,
            "synthetic.height" => self.synthetic.height = num(key, v)?,
            "synthetic.agents" => self.synthetic.agents = num(key, v)?,
            "synthetic.family" => self.synthetic.family = PathFamily::parse(v)?,
            "synthetic.speed_min" => self.synthetic.speed_min = num(key, v)?,
            "synthetic.speed_max" => self.synthetic.speed_max = num(key, v)?,
            "synthetic.position_noise" => self.synthetic.position_noise = num(key, v)?,
            "synthetic.prefix" => self.synthetic.scene_id = v.to_string(),
            "raster.sigma_s" => {
                self.sigma = match v {
                    "literal" => SigmaChoice::Literal,
                    "desk" => SigmaChoice::Desk,
                    _ => SigmaChoice::Pixels(num(key, v)?),
                }
            }
            "raster.downsample_factor" => self.downsample_factor = num(key, v)?,
            "raster.peak_normalize" => self.peak_normalize = boolean(key, v)?,
            "sar.d_model" => self.sar.d_model = num(key, v)?,
            "sar.heads" => self.sar.heads = num(key, v)?,
            "sar.z_dim" => self.sar.z_dim = num(key, v)?,
            "sar.goal_dim" => self.sar.goal_dim = num(key, v)?,
            "sar.feed_forward" => self.sar.feed_forward = boolean(key, v)?,
            "sar.positional_encoding" => self.sar.positional_encoding = boolean(key, v)?,
            "sar.time_feature" => self.sar.time_feature = TimeFeature::parse(v)?,
            "sar.coord_scale" => self.sar.coord_scale = num(key, v)?,
            "unet.encoder" => self.unet.encoder = list(key, v)?,
            "unet.decoder" => self.unet.decoder = list(key, v)?,
            "train.lambda" => self.train.lambda = num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.mode" => self.train.mode = TrainMode::parse(v)?,
            "train.val_every" => self.train.val_every = num(key, v)?,
            "train.val_k" => self.train.val_k = num(key, v)?,
            "train.augment" => self.augment_enabled = boolean(key, v)?,
            "augment.rotation_deg" => self.augment.rotation_deg = num(key, v)?,
            "augment.flip_x" => self.augment.flip_x = num(key, v)?,
            "augment.flip_y" => self.augment.flip_y = num(key, v)?,
            "augment.translation" => self.augment.translation = num(key, v)?,
            "augment.shear_deg" => self.augment.shear_deg = num(key, v)?,
            "augment.perspective" => self.augment.perspective = num(key, v)?,
            "eval.k" => self.eval_k = num(key, v)?,
            "eval.plots" => self.eval_plots = num(key, v)?,
            "ablate.mode" => self.ablate_mode = v.to_string(),
            "ablate.sigmas" => self.ablate_sigmas = list(key, v)?,
            "ablate.epochs" => self.ablate_epochs = num(key, v)?,
            "sample.k" => self.sample_k = num(key, v)?,
            "sample.ttst" => self.sample_ttst = boolean(key, v)?,
            "sample.resolution" => {
                self.sample_resolution = match v {
                    "grid" => SampleResolution::Grid,
                    "pixel" => SampleResolution::Pixel,
                    _ => return Err(Error::Config(format!("{key}: expected grid or pixel, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e: Vec<(&'static str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            (
                "checkpoint",
                self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("model", self.model.name().into()),
            ("fusion", self.fusion.name().into()),
            (
                "data.dir",
                self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("data.stride", self.stride.to_string()),
            ("data.unit", self.unit.clone()),
        ];
        match &self.split {
            SplitChoice::Ratio => e.push(("data.split", "ratio".into())),
            SplitChoice::LeaveOneOut(s) => e.push(("data.split", format!("loso:{s}"))),
            SplitChoice::Fixed { train, val, test } => {
                e.push(("data.split", "fixed".into()));
                e.push(("data.train_scenes", train.join(",")));
                e.push(("data.val_scenes", val.join(",")));
                e.push(("data.test_scenes", test.join(",")));
            }
        }
        let sigma = match self.sigma {
            SigmaChoice::Pixels(p) => p.to_string(),
            SigmaChoice::Literal => "literal".into(),
            SigmaChoice::Desk => "desk".into(),
        };
        e.extend([
            ("data.schema.frame", self.schema.frame.to_string()),
            ("data.schema.agent", self.schema.agent.to_string()),
            ("data.schema.x", self.schema.x.to_string()),
            ("data.schema.y", self.schema.y.to_string()),
            (
                "data.schema.label",
                self.schema.label.map_or("none".into(), |l| l.to_string()),
            ),
            ("synthetic.scenes", self.synthetic_scenes.to_string()),
            ("synthetic.prefix", self.synthetic.scene_id.clone()),
            ("synthetic.width", self.synthetic.width.to_string()),
            ("synthetic.height", self.synthetic.height.to_string()),
            ("synthetic.agents", self.synthetic.agents.to_string()),
            ("synthetic.family", self.synthetic.family.name().into()),
            ("synthetic.speed_min", self.synthetic.speed_min.to_string()),
            ("synthetic.speed_max", self.synthetic.speed_max.to_string()),
            ("synthetic.position_noise", self.synthetic.position_noise.to_string()),
            ("raster.sigma_s", sigma),
            ("raster.downsample_factor", self.downsample_factor.to_string()),
            ("raster.peak_normalize", self.peak_normalize.to_string()),
            ("sar.d_model", self.sar.d_model.to_string()),
            ("sar.heads", self.sar.heads.to_string()),
            ("sar.z_dim", self.sar.z_dim.to_string()),
            ("sar.goal_dim", self.sar.goal_dim.to_string()),
            ("sar.feed_forward", self.sar.feed_forward.to_string()),
            ("sar.positional_encoding", self.sar.positional_encoding.to_string()),
            ("sar.time_feature", self.sar.time_feature.name().into()),
            ("sar.coord_scale", self.sar.coord_scale.to_string()),
            ("unet.encoder", join(&self.unet.encoder)),
            ("unet.decoder", join(&self.unet.decoder)),
            ("train.lambda", self.train.lambda.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.mode", self.train.mode.name().into()),
            ("train.val_every", self.train.val_every.to_string()),
            ("train.val_k", self.train.val_k.to_string()),
            ("train.augment", self.augment_enabled.to_string()),
            ("augment.rotation_deg", self.augment.rotation_deg.to_string()),
            ("augment.flip_x", self.augment.flip_x.to_string()),
            ("augment.flip_y", self.augment.flip_y.to_string()),
            ("augment.translation", self.augment.translation.to_string()),
            ("augment.shear_deg", self.augment.shear_deg.to_string()),
            ("augment.perspective", self.augment.perspective.to_string()),
            ("eval.k", self.eval_k.to_string()),
            ("eval.plots", self.eval_plots.to_string()),
            ("ablate.mode", self.ablate_mode.clone()),
            ("ablate.sigmas", join(&self.ablate_sigmas)),
            ("ablate.epochs", self.ablate_epochs.to_string()),
            ("sample.k", self.sample_k.to_string()),
            ("sample.ttst", self.sample_ttst.to_string()),
            (
                "sample.resolution",
                match self.sample_resolution {
                    SampleResolution::Grid => "grid".into(),
                    SampleResolution::Pixel => "pixel".into(),
                },
            ),
        ]);
        e
    }

    /// The resolved configuration as loadable text.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("data.stride must be >= 1".into()));
        }
        if let SigmaChoice::Pixels(p) = self.sigma {
            if !(p > 0.0) {
                return Err(Error::Config("raster.sigma_s must be > 0".into()));
            }
        }
        if self.downsample_factor == 0 {
            return Err(Error::Config("raster.downsample_factor must be >= 1".into()));
        }
        if self.eval_k == 0 || self.sample_k == 0 {
            return Err(Error::Config("eval.k and sample.k must be >= 1".into()));
        }
        self.synthetic.validate()?;
        self.augment.validate()?;
        self.unet.validate()?;
        self.training()?.validate()?;
        let mut sar = self.sar.clone();
        sar.backbone = self.model.backbone();
        sar.fusion = self.model.goal_conditioned().then_some(self.fusion);
        sar.validate()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint"))
    }

    /// The training settings with augmentation and seed applied.
    pub fn training(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            augment: self.augment_enabled.then_some(AugmentParams {
                seed: self.seed,
                ..self.augment
            }),
            seed: self.seed,
            ..self.train.clone()
        })
    }

    /// Rasterization for scenes of `width x height` pixels.
    pub fn raster(&self, width: usize, height: usize) -> RasterConfig {
        let d = self.downsample_factor;
        let mut r = match self.sigma {
            SigmaChoice::Pixels(p) => RasterConfig {
                sigma_s: p,
                downsample_factor: d,
                peak_normalize: true,
            },
            SigmaChoice::Literal => RasterConfig::literal(width, height, d),
            SigmaChoice::Desk => RasterConfig::desk(width, height, d),
        };
        r.peak_normalize = self.peak_normalize;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\n a = 1 \n\nb.c=x y\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b.c".into(), "x y".into())]);
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn run_config_echo_round_trips() {
        let cfg = RunConfig::from_text(
            "seed = 7\nmodel = lstm\nfusion = late\nraster.sigma_s = desk\nunet.encoder = 4,4\nunet.decoder = 4,4\n\
             data.split = fixed\ndata.train_scenes = a,b\ndata.test_scenes = c\nablate.sigmas = 0,2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model, ModelKind::Lstm);
        assert_eq!(cfg.unet.encoder, vec![4, 4]);
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn run_config_rejects_bad_input() {
        assert!(RunConfig::from_text("no.such.key = 1").is_err());
        assert!(RunConfig::from_text("train.epochs = many").is_err());
        assert!(RunConfig::from_text("train.epochs = 0").is_err());
        assert!(RunConfig::from_text("data.train_scenes = a").is_err());
        assert!(RunConfig::from_text("sar.heads = 7").is_err());
    }
}
