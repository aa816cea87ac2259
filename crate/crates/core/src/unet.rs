//! U-Net goal estimator over the trajectory-on-scene tensor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{bce_with_logits_mean, Graph, Grads, ParamId, ParamStore, Tensor, Var};
use crate::raster::{InputTensor, ProbabilityMap, INPUT_CHANNELS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnetConfig {
    pub in_channels: usize,
    /// Output channels of each contracting block.
    pub encoder: Vec<usize>,
    /// Output channels of each expanding block, deepest first.
    pub decoder: Vec<usize>,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: INPUT_CHANNELS,
            encoder: vec![32, 32, 64, 64, 64],
            decoder: vec![64, 64, 64, 32, 32],
        }
    }
}

impl UnetConfig {
    /// Four narrow blocks for CPU-scale runs.
    pub fn desk() -> Self {
        UnetConfig {
            in_channels: INPUT_CHANNELS,
            encoder: vec![8, 8, 16, 16],
            decoder: vec![16, 16, 8, 8],
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.encoder.len() != self.decoder.len() {
            return Err(Error::Config(format!(
                "encoder and decoder need the same non-zero depth, got {} and {}",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        if self.in_channels == 0 || self.encoder.iter().chain(&self.decoder).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct UnetModel {
    cfg: UnetConfig,
    store: ParamStore,
    enc: Vec<[Conv; 2]>,
    dec: Vec<[Conv; 2]>,
    out: Conv,
}

impl UnetModel {
    pub fn new(cfg: UnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut conv = |store: &mut ParamStore, name: String, ci: usize, co: usize, k: usize| {
            let (w, b) = store.conv(&name, ci, co, k, &mut rng);
            Conv { w, b }
        };
        let mut enc = Vec::new();
        let mut c = cfg.in_channels;
        for (l, &co) in cfg.encoder.iter().enumerate() {
            let a = conv(&mut store, format!("unet.enc{l}.0"), c, co, 3);
            let b = conv(&mut store, format!("unet.enc{l}.1"), co, co, 3);
            enc.push([a, b]);
            c = co;
        }
        let mut dec = Vec::new();
        let depth = cfg.depth();
        for (l, &co) in cfg.decoder.iter().enumerate() {
            let skip = cfg.encoder[depth - 1 - l];
            let a = conv(&mut store, format!("unet.dec{l}.0"), c + skip, co, 3);
            let b = conv(&mut store, format!("unet.dec{l}.1"), co, co, 3);
            dec.push([a, b]);
            c = co;
        }
        let out = conv(&mut store, "unet.out".into(), c, 1, 1);
        Ok(UnetModel {
            cfg,
            store,
            enc,
            dec,
            out,
        })
    }

    pub fn with_store(mut self, store: ParamStore) -> Result<Self> {
        if store.len() != self.store.len()
            || self
                .store
                .ids()
                .any(|id| store.name(id) != self.store.name(id) || store.get(id).shape() != self.store.get(id).shape())
        {
            return Err(Error::Checkpoint("goal module parameters do not match the configuration".into()));
        }
        self.store = store;
        Ok(self)
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Id of the final 1x1 convolution bias.
    pub fn output_bias(&self) -> ParamId {
        self.out.b
    }

    fn double_conv(g: &mut Graph, x: Var, c: &[Conv; 2]) -> Var {
        let x = g.conv2d(x, c[0].w, c[0].b, 1);
        let x = g.relu(x);
        let x = g.conv2d(x, c[1].w, c[1].b, 1);
        g.relu(x)
    }

    /// Records the forward pass of a `[c, h, w]` input; returns `[1, h, w]` logits.
    pub fn forward_graph(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "goal module expects [{}, h, w] input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let m = 1 << self.cfg.depth();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut x = if (hp, wp) == (h, w) { input } else { g.pad_spatial(input, hp, wp) };
        let mut skips = Vec::with_capacity(self.enc.len());
        for block in &self.enc {
            x = Self::double_conv(g, x, block);
            skips.push(x);
            x = g.max_pool2(x);
        }
        for block in &self.dec {
            x = g.upsample2(x);
            let skip = skips.pop().expect("one skip per level");
            x = g.concat_channels(x, skip);
            x = Self::double_conv(g, x, block);
        }
        let logits = g.conv2d(x, self.out.w, self.out.b, 0);
        Ok(if (hp, wp) == (h, w) { logits } else { g.crop_spatial(logits, h, w) })
    }

    /// Per-cell logits `[1, H', W']`.
    pub fn forward(&self, input: &InputTensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(input.tensor.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// Sigmoid of the logits as a probability map.
    pub fn predict(&self, input: &InputTensor, downsample_factor: usize) -> Result<ProbabilityMap> {
        let logits = self.forward(input)?;
        let data = logits.data().iter().map(|&x| crate::nn::sigmoid(x)).collect();
        ProbabilityMap::new(input.width, input.height, downsample_factor, data)
    }

    /// Mean stable BCE against `target` and its gradient.
    pub fn goal_loss_grads(&self, input: &InputTensor, target: &ProbabilityMap) -> Result<(f64, Grads)> {
        let mut g = Graph::new(&self.store);
        let loss = self.goal_loss_var(&mut g, input, target)?;
        Ok((g.value(loss).item(), g.backward(loss)))
    }

    pub fn goal_loss_var(&self, g: &mut Graph, input: &InputTensor, target: &ProbabilityMap) -> Result<Var> {
        if (target.width, target.height) != (input.width, input.height) {
            return Err(Error::Shape(format!(
                "target {}x{} vs input {}x{}",
                target.width, target.height, input.width, input.height
            )));
        }
        let x = g.constant(input.tensor.clone());
        let logits = self.forward_graph(g, x)?;
        let t = Tensor::new(vec![1, target.height, target.width], target.data.clone());
        Ok(g.bce_with_logits_mean(logits, &t))
    }
}

/// Mean of the numerically stable binary cross-entropy over all cells.
pub fn goal_loss(logits: &Tensor, target: &ProbabilityMap) -> Result<f64> {
    if logits.len() != target.data.len() {
        return Err(Error::Shape(format!(
            "{} logits for a {}x{} target",
            logits.len(),
            target.width,
            target.height
        )));
    }
    Ok(bce_with_logits_mean(logits.data(), &target.data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Affine, Scene, SemanticClass, SemanticRaster};
    use crate::raster::{build_input_tensor, RasterConfig};
    use crate::trajectory::Point2;

    fn input(w: usize, h: usize) -> InputTensor {
        let scene = Scene::new("s", SemanticRaster::filled(w, h, SemanticClass::Pavement), Affine::IDENTITY, 2.5).unwrap();
        let cfg = RasterConfig {
            sigma_s: 2.0,
            downsample_factor: 1,
            peak_normalize: true,
        };
        build_input_tensor(&scene, &[Point2::new(3.0, 3.0); 8], &cfg).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let m = UnetModel::new(UnetConfig::desk(), 0).unwrap();
        assert_eq!(m.forward(&input(64, 64)).unwrap().shape(), &[1, 64, 64]);
        assert_eq!(m.forward(&input(21, 13)).unwrap().shape(), &[1, 13, 21]);
    }

    #[test]
    fn zero_parameters_give_constant_logits() {
        let mut m = UnetModel::new(UnetConfig::desk(), 0).unwrap();
        for id in m.store().ids().collect::<Vec<_>>() {
            m.store_mut().get_mut(id).data_mut().fill(0.0);
        }
        let inp = input(16, 16);
        let p = m.predict(&inp, 1).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.5));
        let b = m.output_bias();
        m.store_mut().get_mut(b).data_mut()[0] = 1.5;
        assert!(m.forward(&inp).unwrap().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let m = UnetModel::new(UnetConfig::desk(), 0).unwrap();
        let mut bad = input(16, 16);
        bad.tensor = Tensor::zeros(&[13, 16, 16]);
        assert!(m.forward(&bad).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let map = |v: f64| ProbabilityMap::new(1, 1, 1, vec![v]).unwrap();
        let l = |x: f64, y: f64| goal_loss(&Tensor::scalar(x), &map(y)).unwrap();
        assert!((l(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l(-50.0, 1.0) - 50.0).abs() < 1e-6);
        assert!(l(50.0, 1.0) < 1e-6);
        assert!(l(1e6, 0.0).is_finite() && l(-1e6, 1.0).is_finite());
        assert!(goal_loss(&Tensor::zeros(&[2]), &map(0.0)).is_err());
    }
}
