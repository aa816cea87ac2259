//! Self-attentive recurrent backbone.
//!
//! Positions (normalized so the last observed one is the origin) are
//! embedded with a linear map and ReLU, passed through one encoder layer of
//! multi-head self-attention over the whole prefix, and the last hidden
//! state is decoded together with a noise vector into the next position.
//! The prediction is appended to the prefix and the process repeats.
//!
//! The encoder layer is the usual residual + layer-norm + feed-forward
//! block. Only the last row of a single encoder layer is ever consumed,
//! so each step computes the last query against the cached per-token keys
//! and values; the result is identical to re-encoding the full prefix.
//!
//! [`Backbone::Rnn`] and [`Backbone::Lstm`] replace the attention block
//! with a recurrent cell and share the embedding and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fusion::{goal_features, FusionMode, TimeFeature, GOAL_FEATURES};
use crate::nn::{Graph, Grads, ParamId, ParamStore, Tensor, Var};
use crate::trajectory::{Point2, T_OBS, T_PRED};

/// Temporal block used by the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    Sar,
    Rnn,
    Lstm,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Rnn, Backbone::Lstm, Backbone::Sar];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Sar => "sar",
            Backbone::Rnn => "rnn",
            Backbone::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sar" => Ok(Backbone::Sar),
            "rnn" => Ok(Backbone::Rnn),
            "lstm" => Ok(Backbone::Lstm),
            other => Err(Error::InvalidArgument(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SarConfig {
    pub backbone: Backbone,
    pub d_model: usize,
    pub heads: usize,
    pub z_dim: usize,
    /// Width of the embedded goal features.
    pub goal_dim: usize,
    pub feed_forward: bool,
    /// Sinusoidal position codes on the embeddings (attention backbone only).
    pub positional_encoding: bool,
    /// `None` for the goal-free backbone.
    pub fusion: Option<FusionMode>,
    pub time_feature: TimeFeature,
    /// Coordinates are divided by this before embedding and predictions
    /// multiplied by it after decoding.
    pub coord_scale: f64,
}

impl Default for SarConfig {
    fn default() -> Self {
        SarConfig {
            backbone: Backbone::Sar,
            d_model: 32,
            heads: 8,
            z_dim: 16,
            goal_dim: 16,
            feed_forward: true,
            positional_encoding: true,
            fusion: None,
            time_feature: TimeFeature::Absolute,
            coord_scale: 1.0,
        }
    }
}

impl SarConfig {
    pub fn goal_sar(fusion: FusionMode) -> Self {
        SarConfig {
            fusion: Some(fusion),
            ..SarConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config("d_model and heads must be positive".into()));
        }
        if !(self.coord_scale > 0.0) || !self.coord_scale.is_finite() {
            return Err(Error::Config(format!("coord_scale must be > 0, got {}", self.coord_scale)));
        }
        if self.backbone == Backbone::Sar {
            if self.d_model % self.heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {} heads",
                    self.d_model, self.heads
                )));
            }
            let (enc, _) = self.widths();
            if enc % self.heads != 0 {
                return Err(Error::Config(format!(
                    "fused attention input width {enc} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.fusion.is_some() && self.goal_dim == 0 {
            return Err(Error::Config("goal_dim must be positive with fusion".into()));
        }
        Ok(())
    }

    /// `(temporal block input width, decoder input width)`.
    pub fn widths(&self) -> (usize, usize) {
        crate::fusion::fusion_widths(self.fusion, self.d_model, self.z_dim, self.goal_dim)
    }

    fn goal_in_encoder(&self) -> bool {
        self.fusion.is_some_and(FusionMode::feeds_encoder)
    }

    fn goal_in_decoder(&self) -> bool {
        self.fusion.is_some_and(FusionMode::feeds_decoder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    TeacherForcing,
    Autoregressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    pub noise_seed: u64,
    pub steps: usize,
    /// Uses `z = 0` instead of a Gaussian draw.
    pub zero_noise: bool,
}

impl RolloutConfig {
    pub fn autoregressive(noise_seed: u64) -> Self {
        RolloutConfig {
            mode: RolloutMode::Autoregressive,
            noise_seed,
            steps: T_PRED,
            zero_noise: false,
        }
    }

    pub fn teacher_forcing(noise_seed: u64) -> Self {
        RolloutConfig {
            mode: RolloutMode::TeacherForcing,
            ..Self::autoregressive(noise_seed)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ln1: (ParamId, ParamId),
    ffn: Option<(Lin, Lin, (ParamId, ParamId))>,
    goal_qkv: Option<[ParamId; 3]>,
}

#[derive(Debug, Clone)]
struct CellIds {
    x: Lin,
    h: ParamId,
    goal: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Ids {
    embed: Lin,
    attn: Option<AttnIds>,
    cell: Option<CellIds>,
    dec: Lin,
    goal: Option<Lin>,
    dec_goal: Option<ParamId>,
}

/// Backbone parameters and hyper-parameters.
#[derive(Debug, Clone)]
pub struct SarModel {
    cfg: SarConfig,
    store: ParamStore,
    ids: Ids,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
        store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
    )
}

fn lin(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> Lin {
    let (w, b) = store.linear(name, i, o, rng);
    Lin { w, b }
}

fn weight(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.weight(name, i, o, rng)
}

/// Sinusoidal position code for step `t`.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn pe_tensor(start: usize, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for t in start..start + n {
        data.extend(positional_encoding(t, d));
    }
    Tensor::new(vec![n, d], data)
}

/// Per-token projections kept across rollout steps.
struct TokenRows {
    x: Vec<Var>,
    q: Vec<Var>,
    k: Vec<Var>,
    v: Vec<Var>,
    len: usize,
}

/// Recurrent state for the cell backbones.
#[derive(Clone, Copy)]
struct CellState {
    h: Var,
    c: Option<Var>,
}

impl SarModel {
    pub fn new(cfg: SarConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embed = lin(&mut store, "embed", 2, d, &mut rng);
        let (mut attn, mut cell) = (None, None);
        match cfg.backbone {
            Backbone::Sar => {
                let q = lin(&mut store, "attn.q", d, d, &mut rng);
                let k = lin(&mut store, "attn.k", d, d, &mut rng);
                let v = lin(&mut store, "attn.v", d, d, &mut rng);
                let o = lin(&mut store, "attn.out", d, d, &mut rng);
                let ln1 = layer_norm_params(&mut store, "attn.norm1", d);
                let ffn = cfg.feed_forward.then(|| {
                    let f1 = lin(&mut store, "ffn.0", d, 2 * d, &mut rng);
                    let f2 = lin(&mut store, "ffn.1", 2 * d, d, &mut rng);
                    (f1, f2, layer_norm_params(&mut store, "attn.norm2", d))
                });
                attn = Some(AttnIds {
                    q,
                    k,
                    v,
                    o,
                    ln1,
                    ffn,
                    goal_qkv: None,
                });
            }
            Backbone::Rnn | Backbone::Lstm => {
                let gates = if cfg.backbone == Backbone::Lstm { 4 * d } else { d };
                let x = lin(&mut store, "cell.x", d, gates, &mut rng);
                let h = weight(&mut store, "cell.h", d, gates, &mut rng);
                cell = Some(CellIds { x, h, goal: None });
            }
        }
        let dec = lin(&mut store, "decoder", d + cfg.z_dim, 2, &mut rng);
        let (mut goal, mut dec_goal) = (None, None);
        if cfg.fusion.is_some() {
            let g = cfg.goal_dim;
            goal = Some(lin(&mut store, "goal.embed", GOAL_FEATURES, g, &mut rng));
            if cfg.goal_in_encoder() {
                if let Some(a) = attn.as_mut() {
                    a.goal_qkv = Some([
                        weight(&mut store, "attn.goal_q", g, d, &mut rng),
                        weight(&mut store, "attn.goal_k", g, d, &mut rng),
                        weight(&mut store, "attn.goal_v", g, d, &mut rng),
                    ]);
                }
                if let Some(c) = cell.as_mut() {
                    let gates = if cfg.backbone == Backbone::Lstm { 4 * d } else { d };
                    c.goal = Some(weight(&mut store, "cell.goal", g, gates, &mut rng));
                }
            }
            if cfg.goal_in_decoder() {
                dec_goal = Some(weight(&mut store, "decoder.goal", g, 2, &mut rng));
            }
        }
        Ok(SarModel {
            cfg,
            store,
            ids: Ids {
                embed,
                attn,
                cell,
                dec,
                goal,
                dec_goal,
            },
        })
    }

    /// Replaces the parameters with a store of identical layout.
    pub fn with_store(mut self, store: ParamStore) -> Result<Self> {
        if store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.store.len(),
                store.len()
            )));
        }
        for id in self.store.ids() {
            let (a, b) = (self.store.get(id), store.get(id));
            if self.store.name(id) != store.name(id) || a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    self.store.name(id),
                    a.shape(),
                    store.name(id),
                    b.shape()
                )));
            }
        }
        self.store = store;
        Ok(self)
    }

    pub fn config(&self) -> &SarConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter ids of the goal-feature embedding, when fused.
    pub fn goal_embedding_params(&self) -> Option<(ParamId, ParamId)> {
        self.ids.goal.map(|l| (l.w, l.b))
    }

    /// Draws the per-rollout noise vector.
    pub fn sample_noise(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.cfg.z_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn noise_for(&self, cfg: &RolloutConfig) -> Vec<f64> {
        if cfg.zero_noise {
            vec![0.0; self.cfg.z_dim]
        } else {
            self.sample_noise(cfg.noise_seed)
        }
    }

    fn use_pe(&self) -> bool {
        self.cfg.positional_encoding && self.cfg.backbone == Backbone::Sar
    }

    /// Embeds positions `start..start + n` given as a `[n, 2]` tensor of
    /// already-scaled coordinates.
    fn embed_var(&self, g: &mut Graph, p: Var, start: usize) -> Var {
        let n = g.value(p).rows();
        let e = g.linear(p, self.ids.embed.w, self.ids.embed.b);
        let e = g.relu(e);
        if self.use_pe() {
            let pe = g.constant(pe_tensor(start, n, self.cfg.d_model));
            g.add(e, pe)
        } else {
            e
        }
    }

    fn positions_var(&self, g: &mut Graph, pts: &[Point2]) -> Var {
        let s = self.cfg.coord_scale;
        let data = pts.iter().flat_map(|p| [p.x / s, p.y / s]).collect();
        g.constant(Tensor::new(vec![pts.len(), 2], data))
    }

    /// Per-step embeddings `[T, d_model]`.
    pub fn embed(&self, positions: &[Point2]) -> Tensor {
        let mut g = Graph::new(&self.store);
        let p = self.positions_var(&mut g, positions);
        let e = self.embed_var(&mut g, p, 0);
        g.value(e).clone()
    }

    fn goal_embedding(&self, g: &mut Graph, current: Point2, goal: Point2, t: usize) -> Option<Var> {
        let l = self.ids.goal?;
        let f = goal_features(current, goal, t).encode(self.cfg.coord_scale, self.cfg.time_feature);
        let f = g.constant(Tensor::new(vec![1, GOAL_FEATURES], f.to_vec()));
        let h = g.linear(f, l.w, l.b);
        Some(g.relu(h))
    }

    /// Residual, normalization and feed-forward around attention output.
    fn encoder_tail(&self, g: &mut Graph, a: &AttnIds, x_q: Var, att: Var) -> Var {
        let o = g.linear(att, a.o.w, a.o.b);
        let r = g.add(x_q, o);
        let x1 = g.layer_norm(r, a.ln1.0, a.ln1.1);
        match &a.ffn {
            Some((f1, f2, ln2)) => {
                let h = g.linear(x1, f1.w, f1.b);
                let h = g.relu(h);
                let h = g.linear(h, f2.w, f2.b);
                let r = g.add(x1, h);
                g.layer_norm(r, ln2.0, ln2.1)
            }
            None => x1,
        }
    }

    fn with_goal(&self, g: &mut Graph, base: Var, goal_emb: Option<Var>, w: Option<ParamId>) -> Var {
        match (goal_emb, w) {
            (Some(ge), Some(w)) => {
                let w = g.param(w);
                let row = g.matmul(ge, w);
                g.add_row(base, row)
            }
            _ => base,
        }
    }

    fn attn_ids(&self) -> Result<&AttnIds> {
        self.ids
            .attn
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} backbone has no attention layer", self.cfg.backbone.name())))
    }

    /// Full encoder layer over `[T, d_model]` embeddings, every query row.
    pub fn self_attention(&self, embeddings: &Tensor) -> Result<Tensor> {
        let a = self.attn_ids()?;
        if embeddings.rows() == 0 {
            return Err(Error::Empty("self-attention over an empty sequence".into()));
        }
        if embeddings.cols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "embedding width {} != d_model {}",
                embeddings.cols(),
                self.cfg.d_model
            )));
        }
        let mut g = Graph::new(&self.store);
        let x = g.constant(embeddings.clone());
        let q = g.linear(x, a.q.w, a.q.b);
        let k = g.linear(x, a.k.w, a.k.b);
        let v = g.linear(x, a.v.w, a.v.b);
        let att = g.attention(q, k, v, self.cfg.heads);
        let out = self.encoder_tail(&mut g, a, x, att);
        Ok(g.value(out).clone())
    }

    /// Last hidden state after encoding a goal-free prefix.
    pub fn encode_last(&self, prefix: &[Point2]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Empty("empty prefix".into()));
        }
        let mut g = Graph::new(&self.store);
        let p = self.positions_var(&mut g, prefix);
        let x = self.embed_var(&mut g, p, 0);
        let h = match self.cfg.backbone {
            Backbone::Sar => {
                let a = self.attn_ids()?;
                let mut rows = self.token_rows(&mut g, a, x);
                self.attend_last(&mut g, a, &mut rows, prefix.len(), None)
            }
            _ => {
                let c = self.ids.cell.as_ref().expect("cell backbone");
                let xw = g.linear(x, c.x.w, c.x.b);
                let mut st = self.zero_state(&mut g);
                for t in 0..prefix.len() {
                    let row = g.slice_rows(xw, t, 1);
                    st = self.cell_step(&mut g, c, row, st, None);
                }
                st.h
            }
        };
        Ok(g.value(h).data().to_vec())
    }

    /// Decodes one position from a hidden state, a noise vector and an
    /// optional embedded goal.
    pub fn decode_step(&self, h: &[f64], z: &[f64], goal_emb: Option<&[f64]>) -> Result<Point2> {
        if h.len() != self.cfg.d_model || z.len() != self.cfg.z_dim {
            return Err(Error::Shape(format!(
                "decoder expects h:{} z:{}, got h:{} z:{}",
                self.cfg.d_model,
                self.cfg.z_dim,
                h.len(),
                z.len()
            )));
        }
        match (goal_emb, self.ids.dec_goal) {
            (Some(ge), Some(_)) if ge.len() != self.cfg.goal_dim => {
                return Err(Error::Shape(format!("goal embedding width {} != {}", ge.len(), self.cfg.goal_dim)))
            }
            (Some(_), None) => return Err(Error::Shape("decoder takes no goal input".into())),
            (None, Some(_)) => return Err(Error::Shape("decoder needs a goal input".into())),
            _ => {}
        }
        let mut g = Graph::new(&self.store);
        let hv = g.constant(Tensor::row(h));
        let zv = g.constant(Tensor::row(z));
        let ge = goal_emb.map(|e| g.constant(Tensor::row(e)));
        let out = self.decode_var(&mut g, hv, zv, ge);
        let o = g.value(out).data();
        Ok(Point2::new(o[0], o[1]))
    }

    fn decode_var(&self, g: &mut Graph, h: Var, z: Var, goal_emb: Option<Var>) -> Var {
        let cat = g.concat_cols(&[h, z]);
        let cat = g.relu(cat);
        let out = g.linear(cat, self.ids.dec.w, self.ids.dec.b);
        let out = self.with_goal(g, out, goal_emb, self.ids.dec_goal);
        g.scale(out, self.cfg.coord_scale)
    }

    fn token_rows(&self, g: &mut Graph, a: &AttnIds, x: Var) -> TokenRows {
        let q = g.linear(x, a.q.w, a.q.b);
        let k = g.linear(x, a.k.w, a.k.b);
        let v = g.linear(x, a.v.w, a.v.b);
        let len = g.value(x).rows();
        TokenRows {
            x: vec![x],
            q: vec![q],
            k: vec![k],
            v: vec![v],
            len,
        }
    }

    fn push_token(&self, g: &mut Graph, a: &AttnIds, rows: &mut TokenRows, x: Var) {
        let q = g.linear(x, a.q.w, a.q.b);
        let k = g.linear(x, a.k.w, a.k.b);
        let v = g.linear(x, a.v.w, a.v.b);
        rows.x.push(x);
        rows.q.push(q);
        rows.k.push(k);
        rows.v.push(v);
        rows.len += g.value(x).rows();
    }

    fn prefix(g: &mut Graph, blocks: &[Var], n: usize) -> Var {
        let all = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(blocks) };
        if g.value(all).rows() == n {
            all
        } else {
            g.slice_rows(all, 0, n)
        }
    }

    fn row_at(g: &mut Graph, blocks: &[Var], t: usize) -> Var {
        let mut start = 0;
        for &b in blocks {
            let r = g.value(b).rows();
            if t < start + r {
                return if r == 1 { b } else { g.slice_rows(b, t - start, 1) };
            }
            start += r;
        }
        panic!("token {t} out of range");
    }

    /// Hidden state of token `n - 1` attending over tokens `0..n`.
    fn attend_last(&self, g: &mut Graph, a: &AttnIds, rows: &mut TokenRows, n: usize, goal_emb: Option<Var>) -> Var {
        let gq = a.goal_qkv.map(|w| w[0]);
        let gk = a.goal_qkv.map(|w| w[1]);
        let gv = a.goal_qkv.map(|w| w[2]);
        let x_last = Self::row_at(g, &rows.x, n - 1);
        let q = Self::row_at(g, &rows.q, n - 1);
        let q = self.with_goal(g, q, goal_emb, gq);
        let k = Self::prefix(g, &rows.k, n);
        let k = self.with_goal(g, k, goal_emb, gk);
        let v = Self::prefix(g, &rows.v, n);
        let v = self.with_goal(g, v, goal_emb, gv);
        let att = g.attention(q, k, v, self.cfg.heads);
        self.encoder_tail(g, a, x_last, att)
    }

    fn zero_state(&self, g: &mut Graph) -> CellState {
        let d = self.cfg.d_model;
        let h = g.constant(Tensor::zeros(&[1, d]));
        let c = (self.cfg.backbone == Backbone::Lstm).then(|| g.constant(Tensor::zeros(&[1, d])));
        CellState { h, c }
    }

    fn cell_step(&self, g: &mut Graph, c: &CellIds, xw_row: Var, st: CellState, goal_emb: Option<Var>) -> CellState {
        let wh = g.param(c.h);
        let hh = g.matmul(st.h, wh);
        let pre = g.add(xw_row, hh);
        let pre = self.with_goal(g, pre, goal_emb, c.goal);
        match st.c {
            None => CellState { h: g.tanh(pre), c: None },
            Some(cprev) => {
                let d = self.cfg.d_model;
                let i = g.slice_cols(pre, 0, d);
                let i = g.sigmoid(i);
                let f = g.slice_cols(pre, d, d);
                let f = g.sigmoid(f);
                let cand = g.slice_cols(pre, 2 * d, d);
                let cand = g.tanh(cand);
                let o = g.slice_cols(pre, 3 * d, d);
                let o = g.sigmoid(o);
                let keep = g.mul(f, cprev);
                let write = g.mul(i, cand);
                let cnew = g.add(keep, write);
                let tc = g.tanh(cnew);
                CellState {
                    h: g.mul(o, tc),
                    c: Some(cnew),
                }
            }
        }
    }

    /// Records a full rollout on `g`. Returns one `[1, 2]` prediction per
    /// step, in the normalized frame and scene units.
    pub fn rollout_graph(
        &self,
        g: &mut Graph,
        observed: &[Point2],
        future: Option<&[Point2]>,
        goal: Option<Point2>,
        z: &[f64],
        mode: RolloutMode,
        steps: usize,
    ) -> Result<Vec<Var>> {
        if observed.len() != T_OBS {
            return Err(Error::Shape(format!("expected {T_OBS} observed positions, got {}", observed.len())));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("rollout needs at least one step".into()));
        }
        if z.len() != self.cfg.z_dim {
            return Err(Error::Shape(format!("noise width {} != {}", z.len(), self.cfg.z_dim)));
        }
        if self.cfg.fusion.is_some() != goal.is_some() {
            return Err(Error::InvalidArgument(if goal.is_some() {
                "goal given to a goal-free model".into()
            } else {
                "goal-conditioned model needs a goal".into()
            }));
        }
        let teacher = mode == RolloutMode::TeacherForcing;
        let gt: &[Point2] = match (teacher, future) {
            (true, Some(f)) if f.len() >= steps => f,
            (true, Some(f)) => {
                return Err(Error::Shape(format!("{} ground-truth steps for a {steps}-step rollout", f.len())))
            }
            (true, None) => return Err(Error::InvalidArgument("teacher forcing needs the ground-truth future".into())),
            (false, _) => &[],
        };

        let zv = g.constant(Tensor::row(z));
        let mut values: Vec<Point2> = observed.to_vec();
        let mut inputs: Vec<Point2> = observed.to_vec();
        if teacher {
            inputs.extend_from_slice(&gt[..steps - 1]);
        }
        let p = self.positions_var(g, &inputs);
        let x = self.embed_var(g, p, 0);

        let mut preds = Vec::with_capacity(steps);
        match self.cfg.backbone {
            Backbone::Sar => {
                let a = self.attn_ids()?;
                let mut rows = self.token_rows(g, a, x);
                for step in 0..steps {
                    let n = T_OBS + step;
                    let ge = goal.and_then(|gl| self.goal_embedding(g, values[n - 1], gl, n));
                    let enc_goal = if self.cfg.goal_in_encoder() { ge } else { None };
                    let h = self.attend_last(g, a, &mut rows, n, enc_goal);
                    let dec_goal = if self.cfg.goal_in_decoder() { ge } else { None };
                    let out = self.decode_var(g, h, zv, dec_goal);
                    preds.push(out);
                    if step + 1 < steps {
                        if teacher {
                            values.push(gt[step]);
                        } else {
                            let o = g.value(out).data();
                            values.push(Point2::new(o[0], o[1]));
                            let pin = g.scale(out, 1.0 / self.cfg.coord_scale);
                            let xn = self.embed_var(g, pin, n);
                            self.push_token(g, a, &mut rows, xn);
                        }
                    }
                }
            }
            Backbone::Rnn | Backbone::Lstm => {
                let c = self.ids.cell.as_ref().expect("cell backbone");
                let xw = g.linear(x, c.x.w, c.x.b);
                let mut xw_blocks = vec![xw];
                let rerun = self.cfg.goal_in_encoder();
                let mut st = self.zero_state(g);
                if !rerun {
                    for t in 0..T_OBS {
                        let row = Self::row_at(g, &xw_blocks, t);
                        st = self.cell_step(g, c, row, st, None);
                    }
                }
                for step in 0..steps {
                    let n = T_OBS + step;
                    let ge = goal.and_then(|gl| self.goal_embedding(g, values[n - 1], gl, n));
                    let h = if rerun {
                        let mut s = self.zero_state(g);
                        for t in 0..n {
                            let row = Self::row_at(g, &xw_blocks, t);
                            s = self.cell_step(g, c, row, s, ge);
                        }
                        s.h
                    } else {
                        st.h
                    };
                    let dec_goal = if self.cfg.goal_in_decoder() { ge } else { None };
                    let out = self.decode_var(g, h, zv, dec_goal);
                    preds.push(out);
                    if step + 1 < steps {
                        if teacher {
                            values.push(gt[step]);
                        } else {
                            let o = g.value(out).data();
                            values.push(Point2::new(o[0], o[1]));
                            let pin = g.scale(out, 1.0 / self.cfg.coord_scale);
                            let xn = self.embed_var(g, pin, n);
                            let xwn = g.linear(xn, c.x.w, c.x.b);
                            xw_blocks.push(xwn);
                        }
                        if !rerun {
                            let row = Self::row_at(g, &xw_blocks, n);
                            st = self.cell_step(g, c, row, st, None);
                        }
                    }
                }
            }
        }
        Ok(preds)
    }

    /// Predicts `cfg.steps` positions in the normalized frame.
    pub fn rollout(
        &self,
        observed: &[Point2],
        future: Option<&[Point2]>,
        goal: Option<Point2>,
        cfg: &RolloutConfig,
    ) -> Result<Vec<Point2>> {
        let z = self.noise_for(cfg);
        self.rollout_with_noise(observed, future, goal, &z, cfg.mode, cfg.steps)
    }

    pub fn rollout_with_noise(
        &self,
        observed: &[Point2],
        future: Option<&[Point2]>,
        goal: Option<Point2>,
        z: &[f64],
        mode: RolloutMode,
        steps: usize,
    ) -> Result<Vec<Point2>> {
        let mut g = Graph::new(&self.store);
        let preds = self.rollout_graph(&mut g, observed, future, goal, z, mode, steps)?;
        Ok(preds
            .iter()
            .map(|&v| {
                let o = g.value(v).data();
                Point2::new(o[0], o[1])
            })
            .collect())
    }

    /// Teacher-forced trajectory loss of one normalized window and its
    /// gradient.
    pub fn traj_loss_grads(
        &self,
        observed: &[Point2],
        future: &[Point2],
        goal: Option<Point2>,
        z: &[f64],
    ) -> Result<(f64, Grads)> {
        let mut g = Graph::new(&self.store);
        let loss = self.traj_loss_var(&mut g, observed, future, goal, z)?;
        Ok((g.value(loss).item(), g.backward(loss)))
    }

    /// Records the teacher-forced loss on `g`.
    pub fn traj_loss_var(
        &self,
        g: &mut Graph,
        observed: &[Point2],
        future: &[Point2],
        goal: Option<Point2>,
        z: &[f64],
    ) -> Result<Var> {
        let steps = future.len();
        let preds = self.rollout_graph(g, observed, Some(future), goal, z, RolloutMode::TeacherForcing, steps)?;
        let all = g.concat_rows(&preds);
        let target = g.constant(Tensor::new(
            vec![steps, 2],
            future.iter().flat_map(|p| [p.x, p.y]).collect(),
        ));
        let diff = g.sub(all, target);
        let sq = g.sum_sq(diff);
        Ok(g.scale(sq, 1.0 / steps as f64))
    }
}

/// Mean over steps of the squared l2 error for one agent.
pub fn traj_loss(pred: &[Point2], gt: &[Point2]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("prediction length {} vs ground truth {}", pred.len(), gt.len())));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, q)| {
            let d = *p - *q;
            d.x * d.x + d.y * d.y
        })
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean of [`traj_loss`] over agents.
pub fn batch_traj_loss(preds: &[Vec<Point2>], gts: &[Vec<Point2>]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} agents", preds.len(), gts.len())));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += traj_loss(p, g)?;
    }
    Ok(total / preds.len() as f64)
}
