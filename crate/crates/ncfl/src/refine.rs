//! Feature refinement: spatial-channel attention plus the neural
//! compression bottleneck that purifies propagated features.
//!
//! The bottleneck is Encoder -> adaptive quantization -> Decoder. A prior
//! net predicts per-element (mu, sigma, q); latents are quantized to
//! round((e - mu)/q) * q + mu with a straight-through round, and the
//! cross-entropy loss is the expected -log2 of the mass a Laplace(mu,
//! sigma) x U(-q/2, q/2) bin model assigns to the quantized value. Large
//! learned steps collapse noise-perturbed latents onto the same grid
//! point, which is what makes the refined features noise-robust.

use crate::autograd::{laplace_bin_mass, Var, MASS_FLOOR};
use crate::config::{ModelConfig, QuantMode};
use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, ConvT2dSpec, GdnSpec, ParamStore, ResBlockSpec, Session};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, FeatureStage, LatentCode, PriorParams};

pub const SIGMA_FLOOR: f32 = 1e-6;
pub const Q_FLOOR: f32 = 1e-6;

/// Scalar adaptive quantization (ties round away from zero).
pub fn quantize_value(e: f32, mu: f32, q: f32) -> f32 {
    ((e - mu) / q).round() * q + mu
}

/// Auto-encoder attention net over concat(x_t, c_hat), residual blocks at
/// each scale and four at the smallest, zero-initialized output head so
/// gating starts at sigmoid(0) = 1/2.
pub struct FaNet {
    in_conv: Conv2dSpec,
    rb0: ResBlockSpec,
    down1: Conv2dSpec,
    rb1: ResBlockSpec,
    down2: Conv2dSpec,
    rb2: Vec<ResBlockSpec>,
    up1: ConvT2dSpec,
    rb3: ResBlockSpec,
    up0: ConvT2dSpec,
    rb4: ResBlockSpec,
    out_conv: Conv2dSpec,
}

impl FaNet {
    pub fn new(cfg: &ModelConfig) -> FaNet {
        let cf = cfg.feature_width;
        let [w0, w1, w2] = cfg.fa_widths;
        FaNet {
            in_conv: Conv2dSpec::new("fa.in", 3 + cf, w0, 3, 1),
            rb0: ResBlockSpec::new("fa.rb0", w0),
            down1: Conv2dSpec::new("fa.down1", w0, w1, 3, 2),
            rb1: ResBlockSpec::new("fa.rb1", w1),
            down2: Conv2dSpec::new("fa.down2", w1, w2, 3, 2),
            rb2: (0..4).map(|i| ResBlockSpec::new(&format!("fa.rb2_{i}"), w2)).collect(),
            up1: ConvT2dSpec::up2("fa.up1", w2, w1),
            rb3: ResBlockSpec::new("fa.rb3", w1),
            up0: ConvT2dSpec::up2("fa.up0", w1, w0),
            rb4: ResBlockSpec::new("fa.rb4", w0),
            out_conv: Conv2dSpec::new("fa.out", w0, cf, 3, 1).zero_init(),
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.in_conv.register(store, seed);
        self.rb0.register(store, seed);
        self.down1.register(store, seed);
        self.rb1.register(store, seed);
        self.down2.register(store, seed);
        for rb in &self.rb2 {
            rb.register(store, seed);
        }
        self.up1.register(store, seed);
        self.rb3.register(store, seed);
        self.up0.register(store, seed);
        self.rb4.register(store, seed);
        self.out_conv.register(store, seed);
    }

    /// Attention logits m_t for frames [N,3,H,W] and features [N,Cf,H,W].
    pub fn forward(&self, ss: &mut Session, frame: Var, c_hat: Var) -> Var {
        let frame_c = ss.tape.add_scalar(frame, -0.5);
        let x = ss.tape.concat_c(&[frame_c, c_hat]);
        let x = self.in_conv.forward(ss, x);
        let x = self.rb0.forward(ss, x);
        let x = self.down1.forward(ss, x);
        let x = self.rb1.forward(ss, x);
        let x = self.down2.forward(ss, x);
        let mut y = x;
        for rb in &self.rb2 {
            y = rb.forward(ss, y);
        }
        let y = self.up1.forward(ss, y);
        let y = self.rb3.forward(ss, y);
        let y = self.up0.forward(ss, y);
        let y = self.rb4.forward(ss, y);
        self.out_conv.forward(ss, y)
    }
}

/// Compression bottleneck nets: encoder/decoder with GDN between their
/// strided stages, a 3-conv prior (two strided) with LeakyReLU, and the
/// plain-conv replacement stack (N-Conv).
pub struct NcflNet {
    enc1: Conv2dSpec,
    enc_gdn: GdnSpec,
    enc2: Conv2dSpec,
    dec1: ConvT2dSpec,
    dec_igdn: GdnSpec,
    dec2: ConvT2dSpec,
    prior1: Conv2dSpec,
    prior2: Conv2dSpec,
    prior3: Conv2dSpec,
    nconv: Vec<Conv2dSpec>,
    pub latent_width: usize,
    pub quant_mode: QuantMode,
    pub fixed_step: f32,
    pub use_nconv: bool,
}

impl NcflNet {
    pub fn new(cfg: &ModelConfig) -> NcflNet {
        let cf = cfg.feature_width;
        let ce = cfg.latent_width;
        let h = cfg.ncfl_width;
        NcflNet {
            enc1: Conv2dSpec::new("ncfl.enc1", cf, h, 3, 2),
            enc_gdn: GdnSpec::new("ncfl.enc_gdn", h, false),
            enc2: Conv2dSpec::new("ncfl.enc2", h, ce, 3, 2),
            dec1: ConvT2dSpec::up2("ncfl.dec1", ce, h),
            dec_igdn: GdnSpec::new("ncfl.dec_igdn", h, true),
            dec2: ConvT2dSpec::up2("ncfl.dec2", h, cf),
            prior1: Conv2dSpec::new("ncfl.prior1", cf, h, 3, 2),
            prior2: Conv2dSpec::new("ncfl.prior2", h, h, 3, 2),
            prior3: Conv2dSpec::new("ncfl.prior3", h, 3 * ce, 3, 1),
            nconv: vec![
                Conv2dSpec::new("ncfl.nconv0", cf, h, 3, 1),
                Conv2dSpec::new("ncfl.nconv1", h, h, 3, 1),
                Conv2dSpec::new("ncfl.nconv2", h, h, 3, 1),
                Conv2dSpec::new("ncfl.nconv3", h, cf, 3, 1),
            ],
            latent_width: ce,
            quant_mode: cfg.quant_mode,
            fixed_step: cfg.fixed_step.unwrap_or(1.0),
            use_nconv: cfg.n_conv,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        if self.use_nconv {
            for c in &self.nconv {
                c.register(store, seed);
            }
            return;
        }
        self.enc1.register(store, seed);
        self.enc_gdn.register(store, seed);
        self.enc2.register(store, seed);
        self.dec1.register(store, seed);
        self.dec_igdn.register(store, seed);
        self.dec2.register(store, seed);
        if self.quant_mode != QuantMode::None {
            self.prior1.register(store, seed);
            self.prior2.register(store, seed);
            self.prior3.register(store, seed);
        }
    }

    pub fn encode(&self, ss: &mut Session, feats: Var) -> Var {
        let (_, _, h, w) = ss.tape.value(feats).dims4();
        assert!(h % 4 == 0 && w % 4 == 0, "encoder needs H,W divisible by 4, got {h}x{w}");
        let x = self.enc1.forward(ss, feats);
        let x = self.enc_gdn.forward(ss, x);
        self.enc2.forward(ss, x)
    }

    pub fn decode(&self, ss: &mut Session, latent: Var) -> Var {
        let x = self.dec1.forward(ss, latent);
        let x = self.dec_igdn.forward(ss, x);
        self.dec2.forward(ss, x)
    }

    /// Prior heads (mu, sigma, q) over the x4-downsampled grid; sigma
    /// and q are softplus-floored. Fixed mode pins q to the configured
    /// step and mu to zero while sigma stays learned.
    pub fn prior(&self, ss: &mut Session, feats: Var) -> (Var, Var, Var) {
        let x = self.prior1.forward(ss, feats);
        let x = ss.tape.leaky_relu(x, 0.1);
        let x = self.prior2.forward(ss, x);
        let x = ss.tape.leaky_relu(x, 0.1);
        let x = self.prior3.forward(ss, x);
        let ce = self.latent_width;
        let mu_raw = ss.tape.slice_c(x, 0, ce);
        let sigma_raw = ss.tape.slice_c(x, ce, 2 * ce);
        let q_raw = ss.tape.slice_c(x, 2 * ce, 3 * ce);
        let sp_s = ss.tape.softplus(sigma_raw);
        let sigma = ss.tape.add_scalar(sp_s, SIGMA_FLOOR);
        let shape = ss.tape.value(mu_raw).shape().to_vec();
        let (mu, q) = match self.quant_mode {
            QuantMode::Fixed => {
                let mu = ss.tape.leaf(Tensor::zeros(&shape));
                let q = ss.tape.leaf(Tensor::full(&shape, self.fixed_step));
                (mu, q)
            }
            _ => {
                let sp_q = ss.tape.softplus(q_raw);
                let q = ss.tape.add_scalar(sp_q, Q_FLOOR);
                (mu_raw, q)
            }
        };
        (mu, sigma, q)
    }
}

/// Bundled attention + bottleneck with the ablation flags resolved.
pub struct RefineStage {
    pub fa: FaNet,
    pub ncfl: NcflNet,
    pub fa_on: bool,
    pub ncfl_on: bool,
}

/// Refined features, mean CE bits, and the quantization-step map (None
/// when the bottleneck or its quantizer is disabled).
pub struct RefineOut {
    pub refined: Var,
    pub ce: Var,
    pub q: Option<Var>,
}

impl RefineStage {
    pub fn new(cfg: &ModelConfig) -> RefineStage {
        RefineStage {
            fa: FaNet::new(cfg),
            ncfl: NcflNet::new(cfg),
            fa_on: cfg.fa,
            // N-Conv replaces the bottleneck but occupies the same slot.
            ncfl_on: cfg.ncfl || cfg.n_conv,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        if self.fa_on {
            self.fa.register(store, seed);
        }
        if self.ncfl_on {
            self.ncfl.register(store, seed);
        }
    }

    /// Full refinement chain on batched tensors: the mean cross-entropy
    /// is in bits per latent element, zero when the bottleneck or its
    /// quantizer is disabled.
    pub fn forward(&self, ss: &mut Session, frame: Var, c_hat: Var) -> RefineOut {
        let checked = if self.fa_on {
            let logits = self.fa.forward(ss, frame, c_hat);
            let gate = ss.tape.sigmoid(logits);
            ss.tape.mul(c_hat, gate)
        } else {
            c_hat
        };
        let zero_ce = |ss: &mut Session| ss.tape.leaf(Tensor::scalar(0.0));
        if !self.ncfl_on {
            let ce = zero_ce(ss);
            return RefineOut { refined: checked, ce, q: None };
        }
        if self.ncfl.use_nconv {
            let mut x = checked;
            for (i, conv) in self.ncfl.nconv.iter().enumerate() {
                x = conv.forward(ss, x);
                if i + 1 < self.ncfl.nconv.len() {
                    x = ss.tape.relu(x);
                }
            }
            let ce = zero_ce(ss);
            return RefineOut { refined: x, ce, q: None };
        }
        let e = self.ncfl.encode(ss, checked);
        match self.ncfl.quant_mode {
            QuantMode::None => {
                let ce = zero_ce(ss);
                RefineOut { refined: self.ncfl.decode(ss, e), ce, q: None }
            }
            _ => {
                let (mu, sigma, q) = self.ncfl.prior(ss, checked);
                let e_hat = ss.tape.quantize_ste(e, mu, q);
                let bits = ss.tape.ce_bits(e_hat, mu, sigma, q);
                let ce = ss.tape.mean_all(bits);
                RefineOut { refined: self.ncfl.decode(ss, e_hat), ce, q: Some(q) }
            }
        }
    }
}

// ---- single-map typed operations ----

/// Gate warped features by sigmoid attention over (x_t, c_hat).
pub fn attend(
    stage: &RefineStage,
    store: &ParamStore,
    frame: &Tensor,
    c_hat: &FeatureMap,
) -> Result<FeatureMap> {
    if c_hat.stage != FeatureStage::Warped {
        return Err(Error::Invalid(format!(
            "attend expects warped features, got {:?}",
            c_hat.stage
        )));
    }
    let (_, fh, fw) = frame.dims3();
    let (_, ch, cw) = c_hat.data.dims3();
    if (fh, fw) != (ch, cw) {
        return Err(Error::shape(format!("frame {fh}x{fw} vs features {ch}x{cw}")));
    }
    let mut ss = Session::new(store);
    let f = ss.tape.leaf(frame.unsqueeze0());
    let c = ss.tape.leaf(c_hat.data.unsqueeze0());
    let out = if stage.fa_on {
        let logits = stage.fa.forward(&mut ss, f, c);
        let gate = ss.tape.sigmoid(logits);
        ss.tape.mul(c, gate)
    } else {
        c
    };
    FeatureMap::new(ss.tape.value(out).squeeze0(), FeatureStage::Attended)
}

pub fn encode_features(
    net: &NcflNet,
    store: &ParamStore,
    feats: &FeatureMap,
) -> Result<LatentCode> {
    let (_, h, w) = feats.data.dims3();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("encoder needs H,W divisible by 4, got {h}x{w}")));
    }
    let mut ss = Session::new(store);
    let x = ss.tape.leaf(feats.data.unsqueeze0());
    let e = net.encode(&mut ss, x);
    Ok(LatentCode { data: ss.tape.value(e).squeeze0(), quantized: false })
}

pub fn prior(net: &NcflNet, store: &ParamStore, feats: &FeatureMap) -> Result<PriorParams> {
    let (_, h, w) = feats.data.dims3();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("prior needs H,W divisible by 4, got {h}x{w}")));
    }
    let mut ss = Session::new(store);
    let x = ss.tape.leaf(feats.data.unsqueeze0());
    let (mu, sigma, q) = net.prior(&mut ss, x);
    let p = PriorParams {
        mu: ss.tape.value(mu).squeeze0(),
        sigma: ss.tape.value(sigma).squeeze0(),
        q: ss.tape.value(q).squeeze0(),
    };
    p.check()?;
    Ok(p)
}

/// e_hat = round((e - mu)/q) * q + mu, elementwise.
pub fn quantize(e: &LatentCode, p: &PriorParams) -> Result<LatentCode> {
    if e.quantized {
        return Err(Error::Invalid("latent already quantized".into()));
    }
    p.check()?;
    if e.data.shape() != p.mu.shape() {
        return Err(Error::shape(format!(
            "latent {:?} vs prior {:?}",
            e.data.shape(),
            p.mu.shape()
        )));
    }
    let mut out = e.data.clone();
    for (v, (m, qq)) in out.data_mut().iter_mut().zip(p.mu.data().iter().zip(p.q.data())) {
        *v = quantize_value(*v, *m, *qq);
    }
    Ok(LatentCode { data: out, quantized: true })
}

/// Per-element probability mass under the Laplace x uniform bin model,
/// clamped to 1e-9. Computed in f64.
pub fn bin_probability(e_hat: &LatentCode, p: &PriorParams) -> Result<Vec<f64>> {
    if !e_hat.quantized {
        return Err(Error::Invalid("bin_probability expects quantized latents".into()));
    }
    p.check()?;
    Ok(e_hat
        .data
        .data()
        .iter()
        .zip(p.mu.data().iter().zip(p.sigma.data().iter().zip(p.q.data())))
        .map(|(&eh, (&mu, (&sig, &qq)))| {
            laplace_bin_mass(eh as f64, mu as f64, sig as f64, qq as f64).0
        })
        .collect())
}

/// Mean bits per latent element: E[-log2 p(e_hat)].
pub fn cross_entropy_bits(e_hat: &LatentCode, p: &PriorParams) -> Result<f64> {
    let masses = bin_probability(e_hat, p)?;
    let total: f64 = masses.iter().map(|m| -(m.max(MASS_FLOOR).log2())).sum();
    Ok(total / masses.len() as f64)
}

pub fn decode_features(
    net: &NcflNet,
    store: &ParamStore,
    e_hat: &LatentCode,
) -> Result<FeatureMap> {
    if !e_hat.quantized && net.quant_mode != QuantMode::None {
        return Err(Error::Invalid("decode expects quantized latents".into()));
    }
    let mut ss = Session::new(store);
    let x = ss.tape.leaf(e_hat.data.unsqueeze0());
    let y = net.decode(&mut ss, x);
    FeatureMap::new(ss.tape.value(y).squeeze0(), FeatureStage::Refined)
}

/// Chain attend -> encode -> prior -> quantize -> decode on one frame.
pub fn refine_features(
    stage: &RefineStage,
    store: &ParamStore,
    frame: &Tensor,
    c_hat: &FeatureMap,
) -> Result<(FeatureMap, f64)> {
    if c_hat.stage != FeatureStage::Warped {
        return Err(Error::Invalid(format!(
            "refine_features expects warped features, got {:?}",
            c_hat.stage
        )));
    }
    let mut ss = Session::new(store);
    let f = ss.tape.leaf(frame.unsqueeze0());
    let c = ss.tape.leaf(c_hat.data.unsqueeze0());
    let out = stage.forward(&mut ss, f, c);
    let (out, ce) = (out.refined, out.ce);
    let stage_tag = if stage.ncfl_on || stage.fa_on {
        if stage.ncfl_on {
            FeatureStage::Refined
        } else {
            FeatureStage::Attended
        }
    } else {
        FeatureStage::Warped
    };
    let ce_v = ss.tape.value(ce).scalar_value() as f64;
    Ok((FeatureMap { data: ss.tape.value(out).squeeze0(), stage: stage_tag }, ce_v))
}
