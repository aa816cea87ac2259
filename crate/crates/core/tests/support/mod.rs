//! Central finite-difference checks shared by the gradient and acceptance suites.
#![allow(dead_code)]

use goalsar::dataset::{Affine, Scene, SemanticClass, SemanticRaster};
use goalsar::fusion::FusionMode;
use goalsar::nn::{Graph, Grads, ParamStore, Tensor};
use goalsar::raster::{build_input_tensor, gt_goal_map, RasterConfig};
use goalsar::sar::{Backbone, SarConfig, SarModel};
use goalsar::trajectory::Point2;
use goalsar::unet::{UnetConfig, UnetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;
const ENTRIES_PER_TENSOR: usize = 4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Fraction of checked entries that may sit on a ReLU or max-pool kink.
pub const MAX_KINK_FRACTION: f64 = 0.02;

/// Outcome of checking one parameter group.
#[derive(Debug, Clone, Copy, Default)]
pub struct Check {
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl Check {
    fn merge(self, o: Check) -> Check {
        Check {
            max_rel_err: self.max_rel_err.max(o.max_rel_err),
            checked: self.checked + o.checked,
            kinks: self.kinks + o.kinks,
        }
    }

    pub fn passes(&self) -> bool {
        self.checked > 0
            && self.max_rel_err < TOLERANCE
            && (self.kinks as f64) <= MAX_KINK_FRACTION * self.checked as f64
    }
}

/// Checks a few random entries of every tensor whose name starts with one
/// of `prefixes`. An entry whose central differences at `STEP` and
/// `STEP / 2` disagree has a non-differentiable point inside the stencil;
/// it is counted as a kink instead of compared.
pub fn worst<M: Clone>(
    model: &M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: &dyn Fn(&M) -> f64,
    grads: &Grads,
    prefixes: &[&str],
    rng: &mut ChaCha8Rng,
) -> Check {
    let mut m = model.clone();
    let ids: Vec<_> = store(&mut m)
        .iter()
        .filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .map(|(id, _, t)| (id, t.len()))
        .collect();
    let mut out = Check::default();
    for (id, len) in ids {
        let zero = Tensor::zeros(&[len]);
        let analytic = grads.get(id).unwrap_or(&zero).data().to_vec();
        for _ in 0..ENTRIES_PER_TENSOR.min(len) {
            let i = rng.random_range(0..len);
            let orig = store(&mut m).get(id).data()[i];
            let mut central = |h: f64| {
                store(&mut m).get_mut(id).data_mut()[i] = orig + h;
                let up = loss(&m);
                store(&mut m).get_mut(id).data_mut()[i] = orig - h;
                let down = loss(&m);
                store(&mut m).get_mut(id).data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            };
            let numeric = central(STEP);
            let half = central(STEP / 2.0);
            out.checked += 1;
            if (numeric - half).abs() > 1e-5 * numeric.abs().max(1e-4) {
                out.kinks += 1;
                continue;
            }
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic[i], numeric));
        }
    }
    out
}

fn random_path(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point2> {
    let mut p = Point2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    (0..n)
        .map(|_| {
            p = p + Point2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            p
        })
        .collect()
}

fn sar_case(cfg: SarConfig, prefixes: &[&str], with_goal: bool) -> Check {
    let mut all = Check::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let model = SarModel::new(cfg.clone(), seed).unwrap();
        let path = random_path(&mut rng, 20);
        let offset = path[7];
        let path: Vec<Point2> = path.iter().map(|&p| p - offset).collect();
        let (obs, fut) = (path[..8].to_vec(), path[8..].to_vec());
        let goal = with_goal.then(|| fut[11]);
        let z = model.sample_noise(seed);
        let (_, grads) = model.traj_loss_grads(&obs, &fut, goal, &z).unwrap();
        let loss = |m: &SarModel| m.traj_loss_grads(&obs, &fut, goal, &z).unwrap().0;
        all = all.merge(worst(&model, SarModel::store_mut, &loss, &grads, prefixes, &mut rng));
    }
    all
}

pub fn embedding() -> Check {
    sar_case(SarConfig::default(), &["embed."], false)
}

pub fn attention_and_feed_forward() -> Check {
    sar_case(SarConfig::default(), &["attn.", "ffn."], false)
}

pub fn decoder() -> Check {
    sar_case(SarConfig::goal_sar(FusionMode::Skip), &["decoder"], true)
}

pub fn goal_embedding() -> Check {
    [FusionMode::Early, FusionMode::Late, FusionMode::Skip]
        .into_iter()
        .map(|mode| sar_case(SarConfig::goal_sar(mode), &["goal.", "attn.goal_"], true))
        .fold(Check::default(), Check::merge)
}

pub fn recurrent_cells() -> Check {
    [Backbone::Rnn, Backbone::Lstm]
        .into_iter()
        .map(|backbone| {
            let cfg = SarConfig { backbone, ..SarConfig::goal_sar(FusionMode::Skip) };
            sar_case(cfg, &["cell.", "embed.", "goal."], true)
        })
        .fold(Check::default(), Check::merge)
}

/// Two levels of four channels on a 16x16 input.
pub fn tiny_unet() -> Check {
    let cfg = UnetConfig { encoder: vec![4, 4], decoder: vec![4, 4], ..UnetConfig::desk() };
    let raster_cfg = RasterConfig { sigma_s: 1.5, downsample_factor: 1, peak_normalize: true };
    let mut all = Check::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut raster = SemanticRaster::filled(16, 16, SemanticClass::Pavement);
        for _ in 0..60 {
            raster.set(rng.random_range(0..16), rng.random_range(0..16), SemanticClass::Structure);
        }
        let scene = Scene::new("g", raster, Affine::IDENTITY, 2.5).unwrap();
        let mut pt = || Point2::new(rng.random_range(0.0..16.0), rng.random_range(0.0..16.0));
        let obs: Vec<Point2> = (0..8).map(|_| pt()).collect();
        let goal = pt();
        let input = build_input_tensor(&scene, &obs, &raster_cfg).unwrap();
        let target = gt_goal_map(goal, &scene, &raster_cfg).unwrap();
        let model = UnetModel::new(cfg.clone(), seed).unwrap();
        let (_, grads) = model.goal_loss_grads(&input, &target).unwrap();
        let loss = |m: &UnetModel| m.goal_loss_grads(&input, &target).unwrap().0;
        all = all.merge(worst(&model, UnetModel::store_mut, &loss, &grads, &["unet."], &mut rng));
    }
    all
}

pub fn stable_bce() -> Check {
    let mut all = Check::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let n = 12;
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-12.0..12.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let target = Tensor::new(vec![n], target);
        let mut store = ParamStore::new();
        let id = store.add("logits", Tensor::new(vec![n], logits));
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let x = g.param(id);
            let l = g.bce_with_logits_mean(x, &target);
            (g.value(l).item(), g.backward(l))
        };
        let (_, grads) = eval(&store);
        let loss = |s: &ParamStore| eval(s).0;
        all = all.merge(worst(&store, |s| s, &loss, &grads, &["logits"], &mut rng));
    }
    all
}

/// Every group with its worst relative error.
pub fn all_groups() -> Vec<(&'static str, Check)> {
    vec![
        ("embedding", embedding()),
        ("attention+ffn", attention_and_feed_forward()),
        ("decoder", decoder()),
        ("goal embedding", goal_embedding()),
        ("recurrent cells", recurrent_cells()),
        ("tiny unet", tiny_unet()),
        ("stable bce", stable_bce()),
    ]
}
