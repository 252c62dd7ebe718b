//! Agent networks: per-variant observation encoders, a GRU core, and the
//! actor, critic and auxiliary heads.
//!
//! Every operation acts on rows independently, so a row's outputs do not
//! depend on what else is in the batch. Sampling (one row per environment)
//! and optimization (whole sequences) therefore produce bit-identical values.

use multionlab_autodiff::{Checkpoint, IntoDyn, Scalar, SparseRows, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{HitClass, Ray, N_ACTIONS};
use crate::spatial::{
    EgoGrid, SparseEgo, DIR_BINS, DIST_BINS, EGO_CELLS, EGO_SIDE, NM_FEATURES, N_CLASSES, OBJ_CATEGORIES, OCC_CATEGORIES,
};

/// Per-ray input width: normalized depth, then one-hot over
/// {obstacle, max range, class 0..8}.
pub const RAY_FEATURES: usize = 3 + N_CLASSES;
/// Previous-action index used at the first step of an episode.
pub const PREV_ACTION_NONE: usize = N_ACTIONS;
/// First conv: kernel = stride = 5 over the 50x50 grid (10x10 output).
const CONV1_K: usize = 5;
const CONV1_OUT: usize = EGO_SIDE / CONV1_K;
/// Second conv: kernel = stride = 2 (5x5 output).
const CONV2_K: usize = 2;
const CONV2_CELLS: usize = (CONV1_OUT / CONV2_K) * (CONV1_OUT / CONV2_K);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    NoMap,
    ProjNeural,
    OracleMap,
    OracleEgoMap,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoMap, Variant::ProjNeural, Variant::OracleMap, Variant::OracleEgoMap];

    pub fn has_map(self) -> bool {
        self != Variant::NoMap
    }

    pub fn is_oracle(self) -> bool {
        matches!(self, Variant::OracleMap | Variant::OracleEgoMap)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoMap => "nomap",
            Variant::ProjNeural => "projneural",
            Variant::OracleMap => "oraclemap",
            Variant::OracleEgoMap => "oracleegomap",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub d_model: usize,
    pub ray_hidden: usize,
    pub embed_dim: usize,
    pub map_embed: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub spatial_dim: usize,
    pub aux_hidden: usize,
    pub seen_head: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::ProjNeural,
            hidden: 256,
            d_model: 256,
            ray_hidden: 256,
            embed_dim: 16,
            map_embed: 16,
            conv1: 16,
            conv2: 32,
            spatial_dim: 128,
            aux_hidden: 128,
            seen_head: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.hidden, self.d_model, self.ray_hidden, self.embed_dim, self.map_embed, self.conv1, self.conv2, self.spatial_dim, self.aux_hidden];
        if sizes.contains(&0) {
            return Err(Error::Config("all agent layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Map-structured part of one step's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpatialInput {
    None,
    Neural(SparseEgo),
    Oracle(EgoGrid),
}

/// Everything the policy sees at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInput {
    pub rays: Vec<f32>,
    pub target_class: usize,
    pub prev_action: usize,
    pub spatial: SpatialInput,
}

pub fn ray_features(rays: &[Ray], max_range: f64) -> Vec<f32> {
    let mut out = vec![0f32; rays.len() * RAY_FEATURES];
    for (r, f) in rays.iter().zip(out.chunks_mut(RAY_FEATURES)) {
        f[0] = (r.depth / max_range) as f32;
        let slot = match r.hit {
            HitClass::Obstacle => 1,
            HitClass::MaxRange => 2,
            HitClass::Object { class_id, .. } => 3 + class_id,
        };
        f[slot] = 1.0;
    }
    out
}

/// Named parameter tensors of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T: Scalar> {
    pub config: AgentConfig,
    pub n_rays: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Shapes and initialization scales of every parameter, in storage order.
fn layout(cfg: &AgentConfig, n_rays: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut lin = |name: &str, fan_in: usize, out: usize, gain: f64| {
        v.push((format!("{name}.w"), vec![fan_in, out], Init::Uniform(gain / (fan_in as f64).sqrt())));
        v.push((format!("{name}.b"), vec![1, out], Init::Zero));
    };
    let (h, rh, e) = (cfg.hidden, cfg.ray_hidden, cfg.embed_dim);
    lin("ray1", n_rays * RAY_FEATURES, rh, 1.0);
    lin("ray2", rh, rh, 1.0);
    let mut fuse_in = rh + 2 * e;
    let conv1_in = match cfg.variant {
        Variant::NoMap => None,
        Variant::ProjNeural => Some(CONV1_K * CONV1_K * NM_FEATURES),
        Variant::OracleMap | Variant::OracleEgoMap => Some(CONV1_K * CONV1_K * 2 * cfg.map_embed),
    };
    if let Some(c_in) = conv1_in {
        lin("conv1", c_in, cfg.conv1, 1.0);
        lin("conv2", CONV2_K * CONV2_K * cfg.conv1, cfg.conv2, 1.0);
        lin("spatial", CONV2_CELLS * cfg.conv2, cfg.spatial_dim, 1.0);
        fuse_in += cfg.spatial_dim;
    }
    lin("fuse", fuse_in, cfg.d_model, 1.0);
    lin("actor", h, N_ACTIONS, 0.01);
    lin("critic", h, 1, 1.0);
    lin("dir1", h, cfg.aux_hidden, 1.0);
    lin("dir2", cfg.aux_hidden, DIR_BINS, 1.0);
    lin("dist1", h, cfg.aux_hidden, 1.0);
    lin("dist2", cfg.aux_hidden, DIST_BINS, 1.0);
    if cfg.seen_head {
        lin("seen", h, 1, 1.0);
    }
    let gru = Init::Uniform(1.0 / (h as f64).sqrt());
    v.push(("gru.w_ih".into(), vec![cfg.d_model, 3 * h], gru));
    v.push(("gru.b_ih".into(), vec![1, 3 * h], gru));
    v.push(("gru.w_hh".into(), vec![h, 3 * h], gru));
    v.push(("gru.b_hh".into(), vec![1, 3 * h], gru));
    let unit = Init::Uniform(3f64.sqrt());
    v.push(("emb.target".into(), vec![N_CLASSES, e], unit));
    v.push(("emb.prev_action".into(), vec![N_ACTIONS + 1, e], unit));
    if cfg.variant.is_oracle() {
        v.push(("emb.occupancy".into(), vec![OCC_CATEGORIES, cfg.map_embed], unit));
        v.push(("emb.object".into(), vec![OBJ_CATEGORIES, cfg.map_embed], unit));
    }
    v
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    Uniform(f64),
}

impl<T: Scalar> PolicyParams<T> {
    pub fn init(cfg: &AgentConfig, n_rays: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg, n_rays) {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::Uniform(a) => Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-a..=a))),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(PolicyParams { config: cfg.clone(), n_rays, names, tensors })
    }

    /// Same layout with every parameter set to zero.
    pub fn zeros(cfg: &AgentConfig, n_rays: usize) -> Result<Self> {
        let mut p = Self::init(cfg, n_rays, 0)?;
        for t in &mut p.tensors {
            *t = Tensor::zeros(t.shape());
        }
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams { config: self.config.clone(), n_rays: self.n_rays, names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

impl<T: IntoDyn> PolicyParams<T> {
    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ck.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Loads a parameter set with the layout implied by `cfg`.
    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str, cfg: &AgentConfig, n_rays: usize) -> Result<Self> {
        let mut p = Self::zeros(cfg, n_rays)?;
        for (n, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            let key = format!("{prefix}{n}");
            let loaded: Tensor<T> = ck.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing or mistyped entry `{key}`")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{key}: shape {:?}, expected {:?}", loaded.shape(), t.shape())));
            }
            *t = loaded;
        }
        Ok(p)
    }
}

/// Parameter handles on a tape, looked up by name.
pub struct Bound<'a> {
    names: &'a [String],
    vars: &'a [Var],
}

impl<'a> Bound<'a> {
    pub fn new<T: Scalar>(params: &'a PolicyParams<T>, vars: &'a [Var]) -> Bound<'a> {
        Bound { names: &params.names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Variant(format!("parameter `{name}` is not part of this agent")))
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn dense_tanh<T: Scalar>(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let y = self.linear(tape, name, x)?;
        Ok(tape.tanh(y)?)
    }
}

/// Observation encoder: `[B]` inputs -> `[B, d_model]` features.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &AgentConfig, n_rays: usize, inputs: &[&StepInput]) -> Result<Var> {
    let b = inputs.len();
    let ray_w = n_rays * RAY_FEATURES;
    let mut rays = Vec::with_capacity(b * ray_w);
    for inp in inputs {
        if inp.rays.len() != ray_w {
            return Err(Error::Variant(format!("{} ray features, expected {ray_w}", inp.rays.len())));
        }
        rays.extend(inp.rays.iter().map(|&v| T::lit(f64::from(v))));
    }
    let rays = tape.constant(Tensor::matrix(b, ray_w, rays)?);
    let r1 = p.dense_tanh(tape, "ray1", rays)?;
    let r2 = p.dense_tanh(tape, "ray2", r1)?;
    let targets: Vec<usize> = inputs.iter().map(|i| i.target_class).collect();
    let prevs: Vec<usize> = inputs.iter().map(|i| i.prev_action).collect();
    let tgt = tape.embedding(p.get("emb.target")?, &targets)?;
    let prev = tape.embedding(p.get("emb.prev_action")?, &prevs)?;
    let mut parts = vec![r2];
    if cfg.variant.has_map() {
        parts.push(spatial_encoder(tape, p, cfg, inputs)?);
    }
    parts.push(tgt);
    parts.push(prev);
    let cat = tape.concat_cols(&parts)?;
    p.dense_tanh(tape, "fuse", cat)
}

fn spatial_encoder<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &AgentConfig, inputs: &[&StepInput]) -> Result<Var> {
    let b = inputs.len();
    let c1 = match cfg.variant {
        Variant::ProjNeural => {
            // The neural read is sparse (unwritten cells are zero), so the
            // patch matrix is built directly in sparse form.
            let cols = CONV1_K * CONV1_K * NM_FEATURES;
            let mut entries: Vec<(u32, u32, T)> = Vec::new();
            for (s, inp) in inputs.iter().enumerate() {
                let SpatialInput::Neural(cells) = &inp.spatial else {
                    return Err(Error::Variant("projneural agent needs a neural-map read".into()));
                };
                for (k, f) in cells {
                    let (i, j) = (*k as usize % EGO_SIDE, *k as usize / EGO_SIDE);
                    let row = s * CONV1_OUT * CONV1_OUT + (j / CONV1_K) * CONV1_OUT + i / CONV1_K;
                    let slot = (j % CONV1_K) * CONV1_K + i % CONV1_K;
                    for (d, &v) in f.iter().enumerate() {
                        if v != 0.0 {
                            entries.push((row as u32, (slot * NM_FEATURES + d) as u32, T::lit(f64::from(v))));
                        }
                    }
                }
            }
            entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
            let patches = SparseRows::new(b * CONV1_OUT * CONV1_OUT, cols, entries)?;
            let y = tape.sparse_matmul(patches, p.get("conv1.w")?)?;
            let y = tape.add_row(y, p.get("conv1.b")?)?;
            tape.tanh(y)?
        }
        Variant::OracleMap | Variant::OracleEgoMap => {
            let mut occ = Vec::with_capacity(b * EGO_CELLS);
            let mut obj = Vec::with_capacity(b * EGO_CELLS);
            for inp in inputs {
                let SpatialInput::Oracle(g) = &inp.spatial else {
                    return Err(Error::Variant("oracle agent needs an egocentric oracle grid".into()));
                };
                occ.extend(g.occupancy.iter().map(|&c| c as usize));
                obj.extend(g.objects.iter().map(|&c| c as usize));
            }
            let eo = tape.embedding(p.get("emb.occupancy")?, &occ)?;
            let eb = tape.embedding(p.get("emb.object")?, &obj)?;
            let cells = tape.concat_cols(&[eo, eb])?;
            let patches = tape.patchify(cells, b, EGO_SIDE, EGO_SIDE, CONV1_K)?;
            p.dense_tanh(tape, "conv1", patches)?
        }
        Variant::NoMap => return Err(Error::Variant("nomap agent has no spatial encoder".into())),
    };
    let c1p = tape.patchify(c1, b, CONV1_OUT, CONV1_OUT, CONV2_K)?;
    let c2 = p.dense_tanh(tape, "conv2", c1p)?;
    let flat = tape.reshape(c2, b, CONV2_CELLS * cfg.conv2)?;
    p.dense_tanh(tape, "spatial", flat)
}

/// Input-side GRU pre-activations `x W_ih + b_ih` for a block of rows.
pub fn gru_input<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    let w = p.get("gru.w_ih")?;
    let b = p.get("gru.b_ih")?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// One GRU update (gate order r, z, n). `mask` zeroes the previous hidden
/// state at episode starts.
pub fn gru_step<T: Scalar>(tape: &mut Tape<T>, p: &Bound, gi: Var, h: Var, mask: Var, hidden: usize) -> Result<Var> {
    let h = tape.mul_rows(h, mask)?;
    let w = p.get("gru.w_hh")?;
    let b = p.get("gru.b_hh")?;
    let gh = tape.matmul(h, w)?;
    let gh = tape.add_row(gh, b)?;
    let (h1, h2, h3) = (hidden, 2 * hidden, 3 * hidden);
    let gi_r = tape.slice_cols(gi, 0, h1)?;
    let gh_r = tape.slice_cols(gh, 0, h1)?;
    let gi_z = tape.slice_cols(gi, h1, h2)?;
    let gh_z = tape.slice_cols(gh, h1, h2)?;
    let gi_n = tape.slice_cols(gi, h2, h3)?;
    let gh_n = tape.slice_cols(gh, h2, h3)?;
    let r = tape.add(gi_r, gh_r)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(gi_z, gh_z)?;
    let z = tape.sigmoid(z)?;
    let rn = tape.mul(r, gh_n)?;
    let n = tape.add(gi_n, rn)?;
    let n = tape.tanh(n)?;
    // h' = (1 - z) * n + z * h
    let one_minus_z = tape.neg(z)?;
    let one_minus_z = tape.add_scalar(one_minus_z, T::one())?;
    let a = tape.mul(one_minus_z, n)?;
    let c = tape.mul(z, h)?;
    Ok(tape.add(a, c)?)
}

/// Head outputs for a block of hidden states.
pub struct Heads {
    pub logits: Var,
    pub value: Var,
    pub dir: Var,
    pub dist: Var,
    pub seen: Option<Var>,
}

pub fn heads<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &AgentConfig, h: Var) -> Result<Heads> {
    let logits = p.linear(tape, "actor", h)?;
    let value = p.linear(tape, "critic", h)?;
    let d1 = p.dense_tanh(tape, "dir1", h)?;
    let dir = p.linear(tape, "dir2", d1)?;
    let s1 = p.dense_tanh(tape, "dist1", h)?;
    let dist = p.linear(tape, "dist2", s1)?;
    let seen = if cfg.seen_head { Some(p.linear(tape, "seen", h)?) } else { None };
    Ok(Heads { logits, value, dir, dist, seen })
}

/// Plain values of one batched policy step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub values: Vec<T>,
    pub dir: Tensor<T>,
    pub dist: Tensor<T>,
    pub seen: Option<Vec<T>>,
    pub hidden: Tensor<T>,
    /// Encoder output fed to the GRU.
    pub features: Tensor<T>,
}

/// One recurrent step for a batch of independent streams.
pub fn policy_step<T: Scalar>(params: &PolicyParams<T>, inputs: &[&StepInput], h: &Tensor<T>, masks: &[T]) -> Result<StepOutput<T>> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let p = Bound::new(params, &vars);
    let x = encode(&mut tape, &p, cfg, params.n_rays, inputs)?;
    let gi = gru_input(&mut tape, &p, x)?;
    let hv = tape.constant(h.clone());
    let mv = tape.constant(Tensor::column(masks.to_vec()));
    let h1 = gru_step(&mut tape, &p, gi, hv, mv, cfg.hidden)?;
    let out = heads(&mut tape, &p, cfg, h1)?;
    Ok(StepOutput {
        logits: tape.value(out.logits).clone(),
        values: tape.value(out.value).to_vec(),
        dir: tape.value(out.dir).clone(),
        dist: tape.value(out.dist).clone(),
        seen: out.seen.map(|s| tape.value(s).to_vec()),
        hidden: tape.value(h1).clone(),
        features: tape.value(x).clone(),
    })
}

/// Log-probabilities of one row of logits, with the same kernel the loss uses.
pub fn log_probs<T: Scalar>(logits: &[T]) -> Vec<T> {
    multionlab_autodiff::kernels::log_softmax_rows(logits, 1, logits.len())
}

pub fn greedy_action<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF sample from `softmax(logits)`.
pub fn sample_action<T: Scalar, R: Rng>(logits: &[T], rng: &mut R) -> usize {
    let probs = multionlab_autodiff::kernels::softmax_rows(logits, 1, logits.len());
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_picks_argmax() {
        assert_eq!(greedy_action(&[2.0f32, 0.0, 0.0, 0.0]), 0);
        assert_eq!(greedy_action(&[0.0f32, 0.0, 3.0, 1.0]), 2);
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn layout_sizes_follow_config() {
        let cfg = AgentConfig { variant: Variant::NoMap, hidden: 8, d_model: 6, ray_hidden: 5, embed_dim: 3, aux_hidden: 4, ..Default::default() };
        let p = PolicyParams::<f64>::init(&cfg, 4, 1).unwrap();
        assert_eq!(p.get("gru.w_hh").unwrap().shape(), &[8, 24]);
        assert_eq!(p.get("fuse.w").unwrap().shape(), &[5 + 6, 6]);
        assert!(p.get("conv1.w").is_none());
        let cfg = AgentConfig { variant: Variant::OracleMap, ..cfg };
        let p = PolicyParams::<f64>::init(&cfg, 4, 1).unwrap();
        assert_eq!(p.get("conv1.w").unwrap().shape(), &[25 * 32, 16]);
    }
}
