//! Feature fusion and reconstruction: a five-scale U-Net with
//! channel-attention blocks, a residual image head (zero-initialized, so
//! restoration starts at identity) and a feature head producing the
//! propagated features for the next step. The W-Net variant cascades a
//! second U-Net on the first one's pre-head trunk.
//!
//! The input always reserves two feature slots (forward and backward
//! streams); uni-directional runs feed zeros in the backward slot, which
//! keeps one architecture serving both directions.

use crate::autograd::Var;
use crate::config::{ModelConfig, RestorationVariant};
use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, ConvT2dSpec, ParamStore, Session};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, FeatureStage};

const SCALES: usize = 5;

/// Channel-attention block:
///   r = conv(relu(conv(x)));
///   w = sigmoid(conv(relu(conv(GAP(r))))) per channel;
///   out = x + r * w.
pub struct CabSpec {
    conv1: Conv2dSpec,
    conv2: Conv2dSpec,
    gap_a: Conv2dSpec,
    gap_b: Conv2dSpec,
}

impl CabSpec {
    pub fn new(name: &str, c: usize, reduction: usize) -> CabSpec {
        let mid = (c / reduction).max(1);
        CabSpec {
            conv1: Conv2dSpec::new(format!("{name}.c1"), c, c, 3, 1),
            // Zero-initialized residual branch: the block starts as identity.
            conv2: Conv2dSpec::new(format!("{name}.c2"), c, c, 3, 1).zero_init(),
            gap_a: Conv2dSpec::new(format!("{name}.ga"), c, mid, 1, 1),
            gap_b: Conv2dSpec::new(format!("{name}.gb"), mid, c, 1, 1),
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.conv1.register(store, seed);
        self.conv2.register(store, seed);
        self.gap_a.register(store, seed);
        self.gap_b.register(store, seed);
    }

    pub fn forward(&self, ss: &mut Session, x: Var) -> Var {
        let r = self.conv1.forward(ss, x);
        let r = ss.tape.relu(r);
        let r = self.conv2.forward(ss, r);
        let p = ss.tape.gap(r);
        let a = self.gap_a.forward(ss, p);
        let a = ss.tape.relu(a);
        let wmap = self.gap_b.forward(ss, a);
        let wmap = ss.tape.sigmoid(wmap);
        let gated = ss.tape.mul_cmap(r, wmap);
        ss.tape.add(x, gated)
    }
}

pub struct UNet {
    in_conv: Conv2dSpec,
    enc_cabs: Vec<Vec<CabSpec>>,
    downs: Vec<Conv2dSpec>,
    ups: Vec<ConvT2dSpec>,
    skips: Vec<Conv2dSpec>,
    fuses: Vec<Conv2dSpec>,
    dec_cabs: Vec<Vec<CabSpec>>,
}

impl UNet {
    pub fn new(prefix: &str, cin: usize, cfg: &ModelConfig) -> UNet {
        let w = cfg.unet_widths;
        let n_cab = cfg.cab_per_scale;
        let red = cfg.cab_reduction;
        let mk_cabs = |tag: &str, s: usize| -> Vec<CabSpec> {
            (0..n_cab).map(|i| CabSpec::new(&format!("{prefix}.{tag}{s}.cab{i}"), w[s], red)).collect()
        };
        UNet {
            in_conv: Conv2dSpec::new(format!("{prefix}.in"), cin, w[0], 3, 1),
            enc_cabs: (0..SCALES).map(|s| mk_cabs("enc", s)).collect(),
            downs: (0..SCALES - 1)
                .map(|s| Conv2dSpec::new(format!("{prefix}.down{s}"), w[s], w[s + 1], 3, 2))
                .collect(),
            ups: (0..SCALES - 1)
                .map(|s| ConvT2dSpec::up2(format!("{prefix}.up{s}"), w[s + 1], w[s]))
                .collect(),
            skips: (0..SCALES - 1)
                .map(|s| Conv2dSpec::new(format!("{prefix}.skip{s}"), w[s], w[s], 3, 1))
                .collect(),
            fuses: (0..SCALES - 1)
                .map(|s| Conv2dSpec::new(format!("{prefix}.fuse{s}"), 2 * w[s], w[s], 3, 1))
                .collect(),
            dec_cabs: (0..SCALES - 1).map(|s| mk_cabs("dec", s)).collect(),
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.in_conv.register(store, seed);
        for cabs in self.enc_cabs.iter().chain(&self.dec_cabs) {
            for cab in cabs {
                cab.register(store, seed);
            }
        }
        for c in self.downs.iter().chain(&self.skips).chain(&self.fuses) {
            c.register(store, seed);
        }
        for u in &self.ups {
            u.register(store, seed);
        }
    }

    /// Trunk features at full resolution; input H, W divisible by 16.
    pub fn forward(&self, ss: &mut Session, x: Var) -> Var {
        let mut enc = Vec::with_capacity(SCALES);
        let mut cur = self.in_conv.forward(ss, x);
        for s in 0..SCALES {
            for cab in &self.enc_cabs[s] {
                cur = cab.forward(ss, cur);
            }
            enc.push(cur);
            if s + 1 < SCALES {
                cur = self.downs[s].forward(ss, cur);
            }
        }
        let mut dec = enc[SCALES - 1];
        for s in (0..SCALES - 1).rev() {
            let up = self.ups[s].forward(ss, dec);
            let skip = self.skips[s].forward(ss, enc[s]);
            let cat = ss.tape.concat_c(&[up, skip]);
            dec = self.fuses[s].forward(ss, cat);
            for cab in &self.dec_cabs[s] {
                dec = cab.forward(ss, dec);
            }
        }
        dec
    }
}

pub struct RestoreNet {
    unet1: UNet,
    unet2: Option<UNet>,
    img_head: Conv2dSpec,
    feat_head: Conv2dSpec,
    feature_width: usize,
}

impl RestoreNet {
    pub fn new(cfg: &ModelConfig) -> RestoreNet {
        let cf = cfg.feature_width;
        let cin = 3 + 2 * cf;
        let c0 = cfg.unet_widths[0];
        RestoreNet {
            unet1: UNet::new("restore.u0", cin, cfg),
            unet2: match cfg.restoration {
                RestorationVariant::Unet => None,
                RestorationVariant::Wnet => Some(UNet::new("restore.u1", c0, cfg)),
            },
            img_head: Conv2dSpec::new("restore.img", c0, 3, 3, 1).zero_init(),
            feat_head: Conv2dSpec::new("restore.feat", c0, cf, 3, 1),
            feature_width: cf,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.unet1.register(store, seed);
        if let Some(u2) = &self.unet2 {
            u2.register(store, seed);
        }
        self.img_head.register(store, seed);
        self.feat_head.register(store, seed);
    }

    /// Fuse the current frame with forward/backward refined features.
    /// Returns (restored frame, next-step features), both full size.
    /// Sizes not divisible by 16 are reflect-padded and cropped back.
    pub fn forward(&self, ss: &mut Session, frame: Var, c_fwd: Var, c_bwd: Var) -> (Var, Var) {
        let (_, _, h, w) = ss.tape.value(frame).dims4();
        let (ph, pw) = (pad_to16(h), pad_to16(w));
        if ph == 0 && pw == 0 {
            return self.forward_inner(ss, frame, c_fwd, c_bwd);
        }
        let (pt, pb) = (ph / 2, ph - ph / 2);
        let (pl, pr) = (pw / 2, pw - pw / 2);
        let fp = ss.tape.pad_reflect(frame, pl, pr, pt, pb);
        let cfp = ss.tape.pad_reflect(c_fwd, pl, pr, pt, pb);
        let cbp = ss.tape.pad_reflect(c_bwd, pl, pr, pt, pb);
        let (y, c) = self.forward_inner(ss, fp, cfp, cbp);
        (ss.tape.crop(y, pl, pr, pt, pb), ss.tape.crop(c, pl, pr, pt, pb))
    }

    fn forward_inner(&self, ss: &mut Session, frame: Var, c_fwd: Var, c_bwd: Var) -> (Var, Var) {
        let centered = ss.tape.add_scalar(frame, -0.5);
        let x = ss.tape.concat_c(&[centered, c_fwd, c_bwd]);
        let trunk = self.unet1.forward(ss, x);
        let trunk = match &self.unet2 {
            Some(u2) => u2.forward(ss, trunk),
            None => trunk,
        };
        let residual = self.img_head.forward(ss, trunk);
        let y = ss.tape.add(frame, residual);
        let c = self.feat_head.forward(ss, trunk);
        (y, c)
    }

    /// Single-frame convenience. `c_bwd` is None in uni-directional use.
    pub fn restore(
        &self,
        store: &ParamStore,
        frame: &Tensor,
        c_fwd: &FeatureMap,
        c_bwd: Option<&FeatureMap>,
    ) -> Result<(Tensor, FeatureMap)> {
        let (fc, fh, fw) = frame.dims3();
        if fc != 3 {
            return Err(Error::shape(format!("frame must be [3,H,W], got {:?}", frame.shape())));
        }
        let (cc, ch, cw) = c_fwd.data.dims3();
        if cc != self.feature_width || (ch, cw) != (fh, fw) {
            return Err(Error::shape(format!(
                "features [{cc},{ch},{cw}] vs frame [{fc},{fh},{fw}] with C_f {}",
                self.feature_width
            )));
        }
        let mut ss = Session::new(store);
        let f = ss.tape.leaf(frame.unsqueeze0());
        let cf = ss.tape.leaf(c_fwd.data.unsqueeze0());
        let cb = match c_bwd {
            Some(m) => {
                if m.data.shape() != c_fwd.data.shape() {
                    return Err(Error::shape("backward features shape mismatch".to_string()));
                }
                ss.tape.leaf(m.data.unsqueeze0())
            }
            None => ss.tape.leaf(Tensor::zeros(&[1, cc, ch, cw])),
        };
        let (y, c) = self.forward(&mut ss, f, cf, cb);
        Ok((
            ss.tape.value(y).squeeze0(),
            FeatureMap { data: ss.tape.value(c).squeeze0(), stage: FeatureStage::Propagated },
        ))
    }
}

fn pad_to16(dim: usize) -> usize {
    (16 - dim % 16) % 16
}
