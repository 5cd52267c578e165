//! Parameter store, layer builders, and the AdamW optimizer.
//!
//! Parameters live in a flat name -> tensor map. Each forward pass binds
//! them onto a fresh tape through a [`Session`]; after backward, the
//! bound names map gradients back to parameters. Initialization is seeded
//! per parameter name, so it does not depend on registration order.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Keeps GDN denominators strictly positive under the square reparam.
pub const GDN_BETA_MIN: f32 = 1e-6;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic per-parameter RNG: independent of registration order.
fn param_rng(seed: u64, name: &str) -> ChaCha12Rng {
    let mut key = Vec::with_capacity(name.len() + 8);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(name.as_bytes());
    ChaCha12Rng::seed_from_u64(fnv1a64(&key))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn { fan_in: usize },
    Zero,
    Const(i32),
}

#[derive(Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        assert!(!self.entries.contains_key(name), "duplicate parameter {name}");
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, v as f32),
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                let mut rng = param_rng(seed, name);
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
        };
        self.entries.insert(name.to_string(), t);
    }

    pub fn insert_raw(&mut self, name: &str, t: Tensor) {
        assert!(!self.entries.contains_key(name), "duplicate parameter {name}");
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    params: IndexMap<String, String>,
}

/// Write a checkpoint directory: `manifest.json` mapping parameter names
/// to container files, plus one NCFL container per parameter.
pub fn save_checkpoint(dir: &Path, config: &ModelConfig, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut params = IndexMap::new();
    for (i, (name, tensor)) in store.entries.iter().enumerate() {
        let file = format!("p{i:04}.ncfl");
        write_tensor(tensor, &dir.join(&file))?;
        params.insert(name.clone(), file);
    }
    let manifest = Manifest { config: config.clone(), params };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ParamStore)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        message: format!("missing manifest.json: {e}"),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        message: format!("bad manifest: {e}"),
    })?;
    let mut store = ParamStore::new();
    for (name, file) in &manifest.params {
        let t = read_tensor(&dir.join(file))?;
        store.insert_raw(name, t);
    }
    Ok((manifest.config, store))
}

/// One forward pass worth of parameter bindings onto a tape.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: IndexMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Session<'a> {
        Session { tape: Tape::new(), store, bound: IndexMap::new() }
    }

    /// Bind a parameter as a tape leaf (cached per session).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

// ---- layer specs ----

#[derive(Clone, Debug)]
pub struct Conv2dSpec {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv2dSpec {
    pub fn new(name: impl Into<String>, ci: usize, co: usize, k: usize, stride: usize) -> Self {
        Conv2dSpec { name: name.into(), ci, co, k, stride, pad: k / 2, zero_init: false }
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = self.ci * self.k * self.k;
        let init = if self.zero_init { Init::Zero } else { Init::FanIn { fan_in } };
        store.register(&format!("{}.w", self.name), &[self.co, self.ci, self.k, self.k], init, seed);
        store.register(&format!("{}.b", self.name), &[self.co], init, seed);
    }

    pub fn forward(&self, ss: &mut Session, x: Var) -> Var {
        let w = ss.p(&format!("{}.w", self.name));
        let b = ss.p(&format!("{}.b", self.name));
        ss.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed conv used for x2 upsampling (k=4, s=2, p=1 by default).
#[derive(Clone, Debug)]
pub struct ConvT2dSpec {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl ConvT2dSpec {
    pub fn up2(name: impl Into<String>, ci: usize, co: usize) -> Self {
        ConvT2dSpec { name: name.into(), ci, co, k: 4, stride: 2, pad: 1, zero_init: false }
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = self.ci * self.k * self.k / (self.stride * self.stride);
        let init = if self.zero_init { Init::Zero } else { Init::FanIn { fan_in } };
        store.register(&format!("{}.w", self.name), &[self.ci, self.co, self.k, self.k], init, seed);
        store.register(&format!("{}.b", self.name), &[self.co], init, seed);
    }

    pub fn forward(&self, ss: &mut Session, x: Var) -> Var {
        let w = ss.p(&format!("{}.w", self.name));
        let b = ss.p(&format!("{}.b", self.name));
        ss.tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// GDN/IGDN with squared reparametrization keeping beta > 0, gamma >= 0.
#[derive(Clone, Debug)]
pub struct GdnSpec {
    pub name: String,
    pub c: usize,
    pub inverse: bool,
}

impl GdnSpec {
    pub fn new(name: impl Into<String>, c: usize, inverse: bool) -> Self {
        GdnSpec { name: name.into(), c, inverse }
    }

    pub fn register(&self, store: &mut ParamStore, _seed: u64) {
        store.register(&format!("{}.beta_raw", self.name), &[self.c], Init::Const(1), 0);
        // gamma = gamma_raw^2 = 0.1 on the diagonal at init.
        let c = self.c;
        let mut g = Tensor::zeros(&[c, c]);
        let v = 0.1f32.sqrt();
        for i in 0..c {
            g.data_mut()[i * c + i] = v;
        }
        store.insert_raw(&format!("{}.gamma_raw", self.name), g);
    }

    pub fn forward(&self, ss: &mut Session, x: Var) -> Var {
        let braw = ss.p(&format!("{}.beta_raw", self.name));
        let graw = ss.p(&format!("{}.gamma_raw", self.name));
        let b2 = ss.tape.mul(braw, braw);
        let beta = ss.tape.add_scalar(b2, GDN_BETA_MIN);
        let gamma = ss.tape.mul(graw, graw);
        ss.tape.gdn(x, beta, gamma, self.inverse)
    }
}

/// EDSR-style residual block: x + conv(relu(conv(x))).
#[derive(Clone, Debug)]
pub struct ResBlockSpec {
    pub c1: Conv2dSpec,
    pub c2: Conv2dSpec,
}

impl ResBlockSpec {
    pub fn new(name: &str, c: usize) -> Self {
        ResBlockSpec {
            c1: Conv2dSpec::new(format!("{name}.c1"), c, c, 3, 1),
            c2: Conv2dSpec::new(format!("{name}.c2"), c, c, 3, 1),
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.c1.register(store, seed);
        self.c2.register(store, seed);
    }

    pub fn forward(&self, ss: &mut Session, x: Var) -> Var {
        let h = self.c1.forward(ss, x);
        let h = ss.tape.relu(h);
        let h = self.c2.forward(ss, h);
        ss.tape.add(x, h)
    }
}

// ---- optimizer ----

/// Decoupled-weight-decay adaptive moments (AdamW).
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Apply one update. `updates` pairs parameter names with gradients;
    /// `lr_for` gives the per-parameter learning rate (0 skips, e.g. a
    /// frozen flow net).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        updates: &[(String, Tensor)],
        lr_for: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let bc1 = (1.0 - self.beta1.powi(self.step as i32)) as f32;
        let bc2 = (1.0 - self.beta2.powi(self.step as i32)) as f32;
        for (name, grad) in updates {
            let lr = lr_for(name);
            if lr == 0.0 {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let p = store.get_mut(name);
            assert_eq!(p.shape(), grad.shape(), "grad shape mismatch for {name}");
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let wd = (lr * self.weight_decay) as f32;
            let lrf = lr as f32;
            let eps = self.eps as f32;
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pv = p.data()[i];
                p.data_mut()[i] = pv - wd * pv - lrf * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `lr0` to 0 across `total` iterations.
pub fn cosine_lr(lr0: f64, iter: usize, total: usize) -> f64 {
    let frac = (iter as f64 / total as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let spec_a = Conv2dSpec::new("alpha", 3, 4, 3, 1);
        let spec_b = Conv2dSpec::new("beta", 4, 4, 3, 1);
        let mut s1 = ParamStore::new();
        spec_a.register(&mut s1, 7);
        spec_b.register(&mut s1, 7);
        let mut s2 = ParamStore::new();
        spec_b.register(&mut s2, 7);
        spec_a.register(&mut s2, 7);
        assert_eq!(s1.get("alpha.w"), s2.get("alpha.w"));
        assert_eq!(s1.get("beta.b"), s2.get("beta.b"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        Conv2dSpec::new("layer", 2, 3, 3, 1).register(&mut store, 1);
        GdnSpec::new("norm", 3, false).register(&mut store, 1);
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk();
        save_checkpoint(dir.path(), &cfg, &store).unwrap();
        let (cfg2, store2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store.len(), store2.len());
        for name in store.names() {
            assert_eq!(store.get(name), store2.get(name), "param {name}");
        }
    }

    #[test]
    fn load_missing_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize (p - 3)^2 elementwise.
        let mut store = ParamStore::new();
        store.insert_raw("p", Tensor::zeros(&[4]));
        let mut opt = AdamW::new(0.0);
        for _ in 0..800 {
            let grad = store.get("p").map(|v| 2.0 * (v - 3.0));
            opt.step(&mut store, &[("p".into(), grad)], |_| 0.05);
        }
        for &v in store.get("p").data() {
            assert!((v - 3.0).abs() < 1e-2, "converged to {v}");
        }
    }

    #[test]
    fn frozen_params_are_bit_unchanged() {
        let mut store = ParamStore::new();
        store.insert_raw("flow.w", Tensor::full(&[3], 0.5));
        store.insert_raw("main.w", Tensor::full(&[3], 0.5));
        let before = store.get("flow.w").clone();
        let mut opt = AdamW::new(1e-4);
        let g = Tensor::full(&[3], 1.0);
        opt.step(
            &mut store,
            &[("flow.w".into(), g.clone()), ("main.w".into(), g)],
            |n| if n.starts_with("flow.") { 0.0 } else { 1e-3 },
        );
        assert_eq!(store.get("flow.w"), &before);
        assert_ne!(store.get("main.w"), &before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(2e-4, 0, 100) - 2e-4).abs() < 1e-12);
        assert!(cosine_lr(2e-4, 100, 100).abs() < 1e-12);
        assert!((cosine_lr(2e-4, 50, 100) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::new();
        store.insert_raw("x", Tensor::zeros(&[2]));
        let mut ss = Session::new(&store);
        let a = ss.p("x");
        let b = ss.p("x");
        assert_eq!(a, b);
        assert_eq!(ss.tape.len(), 1);
    }
}
