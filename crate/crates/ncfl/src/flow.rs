//! Motion estimation, MV refinement and bilinear warping.
//!
//! The motion estimator is a 3-level coarse-to-fine pyramid of small
//! conv stacks (a trainable stand-in for a pretrained flow net): each
//! level doubles and upsamples the coarser flow, warps the previous
//! frame by it, and predicts a residual from (warped prev, cur, upflow).
//! Its parameters live under the `flow.` prefix so the trainer can give
//! them their own learning rate and freeze window.
//!
//! MV refinement is a GDN auto-encoder over the 2-channel flow field
//! with no residual connection; its final layer starts at zero, so the
//! refined MV starts at zero rather than amplifying early flow noise.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, ConvT2dSpec, GdnSpec, ParamStore, Session};
use crate::tensor::Tensor;
use crate::types::FlowField;

/// Validated single-map GDN: y_i = x_i / sqrt(beta_i + sum_j g_ij x_j^2)
/// (or the multiplicative inverse). `x` is [C,H,W].
pub fn gdn(x: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    let (c, _, _) = x.dims3();
    if beta.shape() != [c] {
        return Err(Error::shape(format!("beta must be [{c}], got {:?}", beta.shape())));
    }
    if gamma.shape() != [c, c] {
        return Err(Error::shape(format!("gamma must be [{c},{c}], got {:?}", gamma.shape())));
    }
    if beta.data().iter().any(|&b| b <= 0.0) {
        return Err(Error::Invalid("gdn: beta must be positive".into()));
    }
    if gamma.data().iter().any(|&g| g < 0.0) {
        return Err(Error::Invalid("gdn: gamma must be non-negative".into()));
    }
    let mut tape = crate::autograd::Tape::new();
    let xv = tape.leaf(x.unsqueeze0());
    let bv = tape.leaf(beta.clone());
    let gv = tape.leaf(gamma.clone());
    let y = tape.gdn(xv, bv, gv, inverse);
    Ok(tape.value(y).squeeze0())
}

/// Bilinear backward warp of a [C,H,W] map by a flow field.
pub fn warp(features: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (_, h, w) = features.dims3();
    if flow.size() != (h, w) {
        return Err(Error::shape(format!("flow size {:?} vs features {h}x{w}", flow.size())));
    }
    let mut tape = crate::autograd::Tape::new();
    let xv = tape.leaf(features.unsqueeze0());
    let fv = tape.leaf(flow.flow.unsqueeze0());
    let y = tape.warp(xv, fv);
    Ok(tape.value(y).squeeze0())
}

const CONVS_PER_LEVEL: usize = 5;

pub struct FlowNet {
    pub levels: usize,
    convs: Vec<Vec<Conv2dSpec>>,
}

impl FlowNet {
    pub fn new(cfg: &ModelConfig) -> FlowNet {
        let w = cfg.flow_width;
        let levels = cfg.flow_levels;
        let convs = (0..levels)
            .map(|l| {
                let mut stack = Vec::with_capacity(CONVS_PER_LEVEL);
                // warped prev (3) + cur (3) + upsampled flow (2).
                stack.push(Conv2dSpec::new(format!("flow.l{l}.c0"), 8, w, 3, 1));
                for i in 1..CONVS_PER_LEVEL - 1 {
                    stack.push(Conv2dSpec::new(format!("flow.l{l}.c{i}"), w, w, 3, 1));
                }
                stack.push(
                    Conv2dSpec::new(format!("flow.l{l}.c{}", CONVS_PER_LEVEL - 1), w, 2, 3, 1)
                        .zero_init(),
                );
                stack
            })
            .collect();
        FlowNet { levels, convs }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        for stack in &self.convs {
            for c in stack {
                c.register(store, seed);
            }
        }
    }

    /// Batched flow from `prev` to `cur` frames [N,3,H,W] -> [N,2,H,W].
    pub fn forward(&self, ss: &mut Session, prev: Var, cur: Var) -> Var {
        let (_, _, h, w) = ss.tape.value(prev).dims4();
        let factor = 1 << (self.levels - 1);
        assert!(
            h % factor == 0 && w % factor == 0,
            "flow needs H,W divisible by {factor}, got {h}x{w}"
        );
        // Center frames so conv stacks see zero-mean inputs.
        let prev_c = ss.tape.add_scalar(prev, -0.5);
        let cur_c = ss.tape.add_scalar(cur, -0.5);
        // Image pyramids, finest first.
        let mut prevs = vec![prev_c];
        let mut curs = vec![cur_c];
        for l in 1..self.levels {
            prevs.push(ss.tape.avg_pool2(prevs[l - 1]));
            curs.push(ss.tape.avg_pool2(curs[l - 1]));
        }
        let mut flow: Option<Var> = None;
        for l in (0..self.levels).rev() {
            let (n, _, lh, lw) = ss.tape.value(curs[l]).dims4();
            let upflow = match flow {
                Some(f) => {
                    let up = ss.tape.upsample2(f);
                    ss.tape.scale(up, 2.0)
                }
                None => ss.tape.leaf(Tensor::zeros(&[n, 2, lh, lw])),
            };
            let warped = ss.tape.warp(prevs[l], upflow);
            let mut x = ss.tape.concat_c(&[warped, curs[l], upflow]);
            let stack = &self.convs[l];
            for (i, conv) in stack.iter().enumerate() {
                x = conv.forward(ss, x);
                if i + 1 < stack.len() {
                    x = ss.tape.leaky_relu(x, 0.1);
                }
            }
            flow = Some(ss.tape.add(upflow, x));
        }
        flow.expect("at least one level")
    }

    /// Single-pair convenience: [3,H,W] frames to a [`FlowField`].
    pub fn estimate(&self, store: &ParamStore, prev: &Tensor, cur: &Tensor) -> Result<FlowField> {
        if prev.shape() != cur.shape() {
            return Err(Error::shape(format!(
                "frame shapes differ: {:?} vs {:?}",
                prev.shape(),
                cur.shape()
            )));
        }
        let (_, h, w) = prev.dims3();
        let factor = 1 << (self.levels - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "flow needs H,W divisible by {factor}, got {h}x{w}"
            )));
        }
        let mut ss = Session::new(store);
        let p = ss.tape.leaf(prev.unsqueeze0());
        let c = ss.tape.leaf(cur.unsqueeze0());
        let f = self.forward(&mut ss, p, c);
        FlowField::new(ss.tape.value(f).squeeze0())
    }
}

/// MV refinement auto-encoder (2 strided convs with GDN, 2 transposed
/// convs with IGDN), or its plain-conv replacement (M-Conv).
pub struct Mvr {
    enc1: Conv2dSpec,
    gdn1: GdnSpec,
    enc2: Conv2dSpec,
    gdn2: GdnSpec,
    dec1: ConvT2dSpec,
    igdn1: GdnSpec,
    dec2: ConvT2dSpec,
    mconv: Vec<Conv2dSpec>,
    pub use_mconv: bool,
}

impl Mvr {
    pub fn new(cfg: &ModelConfig) -> Mvr {
        let h = cfg.mvr_width;
        Mvr {
            enc1: Conv2dSpec::new("mvr.enc1", 2, h, 3, 2),
            gdn1: GdnSpec::new("mvr.gdn1", h, false),
            enc2: Conv2dSpec::new("mvr.enc2", h, h, 3, 2),
            gdn2: GdnSpec::new("mvr.gdn2", h, false),
            dec1: ConvT2dSpec::up2("mvr.dec1", h, h),
            igdn1: GdnSpec::new("mvr.igdn1", h, true),
            dec2: ConvT2dSpec::up2("mvr.dec2", h, 2).zero_init(),
            // M-Conv: full-resolution conv stack of slightly larger cost.
            mconv: vec![
                Conv2dSpec::new("mvr.mconv0", 2, h, 3, 1),
                Conv2dSpec::new("mvr.mconv1", h, h, 3, 1),
                Conv2dSpec::new("mvr.mconv2", h, h, 3, 1),
                Conv2dSpec::new("mvr.mconv3", h, 2, 3, 1).zero_init(),
            ],
            use_mconv: cfg.m_conv,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        if self.use_mconv {
            for c in &self.mconv {
                c.register(store, seed);
            }
            return;
        }
        self.enc1.register(store, seed);
        self.gdn1.register(store, seed);
        self.enc2.register(store, seed);
        self.gdn2.register(store, seed);
        self.dec1.register(store, seed);
        self.igdn1.register(store, seed);
        self.dec2.register(store, seed);
    }

    /// Refine a batched flow field [N,2,H,W]; same shape out.
    pub fn forward(&self, ss: &mut Session, mv: Var) -> Var {
        if self.use_mconv {
            let mut x = mv;
            for (i, conv) in self.mconv.iter().enumerate() {
                x = conv.forward(ss, x);
                if i + 1 < self.mconv.len() {
                    x = ss.tape.relu(x);
                }
            }
            return x;
        }
        let x = self.enc1.forward(ss, mv);
        let x = self.gdn1.forward(ss, x);
        let x = self.enc2.forward(ss, x);
        let x = self.gdn2.forward(ss, x);
        let x = self.dec1.forward(ss, x);
        let x = self.igdn1.forward(ss, x);
        self.dec2.forward(ss, x)
    }

    /// Single-field convenience.
    pub fn refine(&self, store: &ParamStore, mv: &FlowField) -> Result<FlowField> {
        let (h, w) = mv.size();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "mv refinement needs H,W divisible by 4, got {h}x{w}"
            )));
        }
        let mut ss = Session::new(store);
        let v = ss.tape.leaf(mv.flow.unsqueeze0());
        let r = self.forward(&mut ss, v);
        FlowField::new(ss.tape.value(r).squeeze0())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamW;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn gdn_validates_parameters() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let bad_beta = Tensor::new(&[2], vec![1.0, 0.0]);
        let gamma = Tensor::zeros(&[2, 2]);
        assert!(gdn(&x, &bad_beta, &gamma, false).is_err());
        let beta = Tensor::full(&[2], 1.0);
        let bad_gamma = Tensor::new(&[2, 2], vec![0.1, -0.1, 0.0, 0.1]);
        assert!(gdn(&x, &beta, &bad_gamma, false).is_err());
        assert!(gdn(&x, &beta, &gamma, false).is_ok());
    }

    #[test]
    fn warp_checks_sizes() {
        let f = Tensor::zeros(&[4, 8, 8]);
        let flow = FlowField::zeros(8, 10);
        assert!(warp(&f, &flow).is_err());
        assert!(warp(&f, &FlowField::zeros(8, 8)).is_ok());
    }

    fn desk_flow() -> (FlowNet, ParamStore) {
        let cfg = ModelConfig::desk();
        let net = FlowNet::new(&cfg);
        let mut store = ParamStore::new();
        net.register(&mut store, cfg.seed);
        (net, store)
    }

    #[test]
    fn zero_final_layers_give_zero_flow() {
        let (net, store) = desk_flow();
        let prev = Tensor::from_fn(&[3, 16, 16], |i| (i % 17) as f32 / 16.0);
        let cur = Tensor::from_fn(&[3, 16, 16], |i| (i % 13) as f32 / 12.0);
        let flow = net.estimate(&store, &prev, &cur).unwrap();
        assert_eq!(flow.flow.shape(), &[2, 16, 16]);
        assert!(flow.flow.data().iter().all(|&v| v == 0.0), "residual heads start at zero");
    }

    #[test]
    fn flow_rejects_indivisible_sizes() {
        let (net, store) = desk_flow();
        let f = Tensor::zeros(&[3, 18, 16]);
        assert!(net.estimate(&store, &f, &f).is_err());
    }

    fn desk_mvr(m_conv: bool) -> (Mvr, ParamStore) {
        let mut cfg = ModelConfig::desk();
        cfg.m_conv = m_conv;
        let mvr = Mvr::new(&cfg);
        let mut store = ParamStore::new();
        mvr.register(&mut store, cfg.seed);
        (mvr, store)
    }

    #[test]
    fn mvr_shape_and_zero_init() {
        let (mvr, store) = desk_mvr(false);
        let mv = FlowField::new(Tensor::from_fn(&[2, 16, 12], |i| (i % 5) as f32 - 2.0)).unwrap();
        let refined = mvr.refine(&store, &mv).unwrap();
        assert_eq!(refined.flow.shape(), &[2, 16, 12]);
        // Zero-initialized decoder final layer -> zero refined flow.
        assert!(refined.flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mconv_replacement_matches_shape() {
        let (mvr, store) = desk_mvr(true);
        let mv = FlowField::new(Tensor::from_fn(&[2, 8, 8], |i| i as f32 * 0.01)).unwrap();
        let refined = mvr.refine(&store, &mv).unwrap();
        assert_eq!(refined.flow.shape(), &[2, 8, 8]);
    }

    /// Sum-of-sinusoids pattern evaluated analytically at (x - ox, y - oy).
    fn pattern_frame(h: usize, w: usize, ox: f32, oy: f32, rng_seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
        let waves: Vec<(f32, f32, f32, f32)> = (0..6)
            .map(|_| {
                let wavelength = rng.gen_range(5.0..14.0f32);
                let theta = rng.gen_range(0.0..std::f32::consts::TAU);
                let k = std::f32::consts::TAU / wavelength;
                (
                    k * theta.cos(),
                    k * theta.sin(),
                    rng.gen_range(0.0..6.28f32),
                    rng.gen_range(0.05..0.12f32),
                )
            })
            .collect();
        Tensor::from_fn(&[3, h, w], |i| {
            let pix = i % (h * w);
            let (y, x) = (pix / w, pix % w);
            let (px, py) = (x as f32 - ox, y as f32 - oy);
            let mut v = 0.5;
            for &(kx, ky, ph, a) in &waves {
                v += a * (kx * px + ky * py + ph).sin();
            }
            v
        })
    }

    /// Supervised mini-training on global shifts: after a few hundred
    /// steps the net recovers +-2 px translations with mean EPE < 0.5,
    /// and is translation-consistent on interior pixels.
    #[test]
    fn flow_net_learns_global_shifts() {
        let (net, mut store) = desk_flow();
        let (h, w) = (16, 16);
        let mut opt = AdamW::new(0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for it in 0..2500 {
            let mut prevs = Vec::new();
            let mut curs = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..8 {
                let seed = rng.gen::<u64>() % 1000;
                let (dx, dy) = (rng.gen_range(-2.0..2.0f32), rng.gen_range(-2.0..2.0f32));
                prevs.push(pattern_frame(h, w, 0.0, 0.0, seed));
                curs.push(pattern_frame(h, w, dx, dy, seed));
                // warp(prev, flow) == cur requires flow = -(dx, dy).
                let mut t = Tensor::zeros(&[2, h, w]);
                for p in 0..h * w {
                    t.data_mut()[p] = -dx;
                    t.data_mut()[h * w + p] = -dy;
                }
                targets.push(t);
            }
            let mut ss = Session::new(&store);
            let pv = ss.tape.leaf(Tensor::stack(&prevs));
            let cv = ss.tape.leaf(Tensor::stack(&curs));
            let tv = ss.tape.leaf(Tensor::stack(&targets));
            let flow = net.forward(&mut ss, pv, cv);
            let loss = ss.tape.mse(flow, tv);
            let grads = ss.tape.backward(loss);
            let updates: Vec<(String, Tensor)> = ss
                .bound()
                .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
                .collect();
            let lr = if it < 1500 { 1e-3 } else { 3e-4 };
            opt.step(&mut store, &updates, |_| lr);
        }
        // Held-out shifts.
        let mut epe_sum = 0.0f64;
        let mut count = 0usize;
        let cases = [(1.5f32, -0.5f32), (-2.0, 1.0), (0.75, 2.0)];
        for (i, &(dx, dy)) in cases.iter().enumerate() {
            let prev = pattern_frame(h, w, 0.0, 0.0, 5000 + i as u64);
            let cur = pattern_frame(h, w, dx, dy, 5000 + i as u64);
            let flow = net.estimate(&store, &prev, &cur).unwrap();
            for y in 3..h - 3 {
                for x in 3..w - 3 {
                    let fx = flow.flow.data()[y * w + x];
                    let fy = flow.flow.data()[h * w + y * w + x];
                    let e = ((fx + dx).powi(2) + (fy + dy).powi(2)).sqrt();
                    epe_sum += e as f64;
                    count += 1;
                }
            }
        }
        let epe = epe_sum / count as f64;
        assert!(epe < 0.5, "mean endpoint error {epe:.3} px");

        // Translation consistency: integer-shift both inputs, interior
        // flow unchanged within 0.1 px. Needs a canvas large enough that
        // interior pixels escape the coarsest level's padding halo.
        let (ch_, cw) = (48usize, 48usize);
        let prev = pattern_frame(ch_, cw, 0.0, 0.0, 9000);
        let cur = pattern_frame(ch_, cw, 1.0, -1.5, 9000);
        let prev_s = pattern_frame(ch_, cw, 2.0, 1.0, 9000);
        let cur_s = pattern_frame(ch_, cw, 3.0, -0.5, 9000);
        let fa = net.estimate(&store, &prev, &cur).unwrap();
        let fb = net.estimate(&store, &prev_s, &cur_s).unwrap();
        let mut max_dev = 0.0f32;
        let margin = 20;
        for y in margin..ch_ - margin {
            for x in margin..cw - margin {
                // Content of fb at (x, y) matches fa at (x - 2, y - 1).
                let (xs, ys) = (x - 2, y - 1);
                for chan in 0..2 {
                    let a = fa.flow.data()[chan * ch_ * cw + ys * cw + xs];
                    let b = fb.flow.data()[chan * ch_ * cw + y * cw + x];
                    max_dev = max_dev.max((a - b).abs());
                }
            }
        }
        assert!(max_dev < 0.1, "interior flow shifted by {max_dev:.3} px");
    }
}
