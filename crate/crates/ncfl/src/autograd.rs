//! Reverse-mode autodiff tape over [`Tensor`].
//!
//! Ops push nodes onto the tape; `backward` walks the nodes in reverse,
//! calling each node's backward closure with the accumulated output
//! gradient. Node indices are topologically ordered by construction.
//!
//! Two gradient conventions here are part of the model's contract rather
//! than plain calculus:
//! * [`Tape::quantize_ste`] passes gradient 1 through the rounding
//!   operator (straight-through) while the surrounding algebra stays
//!   differentiable, so d(e_hat)/de = 1, d(e_hat)/dmu = 0 and
//!   d(e_hat)/dq = k - z.
//! * [`Tape::ce_bits`] computes the Laplace bin mass in f64 and exposes
//!   analytic partials w.r.t. the latent, mean, scale and step.

use std::rc::Rc;

use crate::tensor::Tensor;

pub const LN2: f64 = std::f64::consts::LN_2;

/// Floor applied to the bin probability mass before the log, bounding the
/// per-element cost at ~29.9 bits.
pub const MASS_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&Tensor, &mut Grads)>;

struct Node {
    value: Rc<Tensor>,
    back: Option<BackFn>,
}

pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn accum(&mut self, v: Var, g: Tensor) {
        match &mut self.slots[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Shared handle to a node's value, for ops in sibling modules.
    pub(crate) fn rc(&self, v: Var) -> Rc<Tensor> {
        self.value_rc(v)
    }

    pub(crate) fn push_op(&mut self, value: Tensor, back: BackFn) -> Var {
        self.push(value, back)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Rc::new(t), back: None });
        Var(self.nodes.len() - 1)
    }

    /// New leaf carrying the same value; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, back: BackFn) -> Var {
        self.nodes.push(Node { value: Rc::new(value), back: Some(back) });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar root. Gradients stay retrievable for
    /// every node afterwards.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads = Grads { slots: vec![None; self.nodes.len()] };
        grads.slots[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads.slots[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&g, &mut grads);
            }
            grads.slots[i] = Some(g);
        }
        grads
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let out = Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect(),
        );
        self.push(
            out,
            Box::new(move |g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let out = Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect(),
        );
        self.push(
            out,
            Box::new(move |g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.map(|v| -v));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let out = Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect(),
        );
        self.push(
            out,
            Box::new(move |g, grads| {
                let ga = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(tb.data()).map(|(&gv, &y)| gv * y).collect(),
                );
                let gb = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(ta.data()).map(|(&gv, &x)| gv * x).collect(),
                );
                grads.accum(a, ga);
                grads.accum(b, gb);
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Box::new(move |g, grads| grads.accum(a, g.map(|v| v * s))))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Box::new(move |g, grads| grads.accum(a, g.clone())))
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value_rc(a);
        let out = ta.map(|v| v.max(0.0));
        self.push(
            out,
            Box::new(move |g, grads| {
                let ga = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
                grads.accum(a, ga);
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let ta = self.value_rc(a);
        let out = ta.map(|v| if v > 0.0 { v } else { slope * v });
        self.push(
            out,
            Box::new(move |g, grads| {
                let ga = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { slope * gv })
                        .collect(),
                );
                grads.accum(a, ga);
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let saved = Rc::new(out.clone());
        self.push(
            out,
            Box::new(move |g, grads| {
                let ga = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(saved.data())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect(),
                );
                grads.accum(a, ga);
            }),
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        let ta = self.value_rc(a);
        let out = ta.map(|v| v.max(0.0) + (-(v.abs())).exp().ln_1p());
        self.push(
            out,
            Box::new(move |g, grads| {
                let ga = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv / (1.0 + (-x).exp()))
                        .collect(),
                );
                grads.accum(a, ga);
            }),
        )
    }

    // ---- broadcasting helpers over [N, C, H, W] ----

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        assert_eq!(self.value(b).shape(), [c], "bias must be [C]");
        let tb = self.value_rc(b);
        let hw = h * w;
        let mut out = tx.clone();
        {
            let data = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let bv = tb.data()[ci];
                    for v in &mut data[base..base + hw] {
                        *v += bv;
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gb = vec![0.0f32; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        gb[ci] += g.data()[base..base + hw].iter().sum::<f32>();
                    }
                }
                grads.accum(x, g.clone());
                grads.accum(b, Tensor::new(&[c], gb));
            }),
        )
    }

    /// Global average pool over the spatial axes: [N,C,H,W] -> [N,C,1,1].
    pub fn gap(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        let hw = h * w;
        let inv = 1.0 / hw as f32;
        let mut out = Tensor::zeros(&[n, c, 1, 1]);
        for i in 0..n * c {
            out.data_mut()[i] = tx.data()[i * hw..(i + 1) * hw].iter().sum::<f32>() * inv;
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n * c {
                    let gv = g.data()[i] * inv;
                    for v in &mut gx.data_mut()[i * hw..(i + 1) * hw] {
                        *v = gv;
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// x[N,C,H,W] * w[N,C,1,1], broadcast over space.
    pub fn mul_cmap(&mut self, x: Var, wmap: Var) -> Var {
        let tx = self.value_rc(x);
        let tw = self.value_rc(wmap);
        let (n, c, h, w) = tx.dims4();
        assert_eq!(tw.shape(), [n, c, 1, 1], "channel map must be [N,C,1,1]");
        let hw = h * w;
        let mut out = (*tx).clone();
        for i in 0..n * c {
            let wv = tw.data()[i];
            for v in &mut out.data_mut()[i * hw..(i + 1) * hw] {
                *v *= wv;
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = g.clone();
                let mut gw = Tensor::zeros(&[n, c, 1, 1]);
                for i in 0..n * c {
                    let wv = tw.data()[i];
                    let mut acc = 0.0f32;
                    for (gv, xv) in
                        gx.data_mut()[i * hw..(i + 1) * hw].iter_mut().zip(&tx.data()[i * hw..])
                    {
                        acc += *gv * *xv;
                        *gv *= wv;
                    }
                    gw.data_mut()[i] = acc;
                }
                grads.accum(x, gx);
                grads.accum(wmap, gw);
            }),
        )
    }

    // ---- shape ops ----

    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let dims: Vec<(usize, usize, usize, usize)> =
            parts.iter().map(|&p| self.value(p).dims4()).collect();
        let (n, _, h, w) = dims[0];
        for &(ni, _, hi, wi) in &dims {
            assert_eq!((ni, hi, wi), (n, h, w), "concat_c spatial/batch mismatch");
        }
        let c_total: usize = dims.iter().map(|d| d.1).sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        let mut c_off = 0;
        for (&p, &(_, ci, _, _)) in parts.iter().zip(&dims) {
            let tp = self.value(p);
            for ni in 0..n {
                let src = &tp.data()[ni * ci * hw..(ni + 1) * ci * hw];
                let dst_base = (ni * c_total + c_off) * hw;
                out.data_mut()[dst_base..dst_base + ci * hw].copy_from_slice(src);
            }
            c_off += ci;
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut c_off = 0;
                for (&p, &(_, ci, _, _)) in parts.iter().zip(&dims) {
                    let mut gp = Tensor::zeros(&[n, ci, h, w]);
                    for ni in 0..n {
                        let src_base = (ni * c_total + c_off) * hw;
                        gp.data_mut()[ni * ci * hw..(ni + 1) * ci * hw]
                            .copy_from_slice(&g.data()[src_base..src_base + ci * hw]);
                    }
                    grads.accum(p, gp);
                    c_off += ci;
                }
            }),
        )
    }

    /// Channels [c0, c1) of x.
    pub fn slice_c(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        assert!(c0 < c1 && c1 <= c, "slice_c out of range");
        let hw = h * w;
        let cs = c1 - c0;
        let mut out = Tensor::zeros(&[n, cs, h, w]);
        for ni in 0..n {
            let src_base = (ni * c + c0) * hw;
            out.data_mut()[ni * cs * hw..(ni + 1) * cs * hw]
                .copy_from_slice(&tx.data()[src_base..src_base + cs * hw]);
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    let dst_base = (ni * c + c0) * hw;
                    gx.data_mut()[dst_base..dst_base + cs * hw]
                        .copy_from_slice(&g.data()[ni * cs * hw..(ni + 1) * cs * hw]);
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// 2x2 mean pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let od = out.data_mut();
            for i in 0..n * c {
                let sp = &tx.data()[i * h * w..];
                let op = &mut od[i * oh * ow..(i + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = sp[2 * y * w + 2 * xx]
                            + sp[2 * y * w + 2 * xx + 1]
                            + sp[(2 * y + 1) * w + 2 * xx]
                            + sp[(2 * y + 1) * w + 2 * xx + 1];
                        op[y * ow + xx] = 0.25 * s;
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = gx.data_mut();
                for i in 0..n * c {
                    let gp = &g.data()[i * oh * ow..];
                    let xp = &mut gd[i * h * w..(i + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * gp[y * ow + xx];
                            xp[2 * y * w + 2 * xx] += gv;
                            xp[2 * y * w + 2 * xx + 1] += gv;
                            xp[(2 * y + 1) * w + 2 * xx] += gv;
                            xp[(2 * y + 1) * w + 2 * xx + 1] += gv;
                        }
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// Bilinear 2x upsampling (half-pixel-centre convention), separable.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let od = out.data_mut();
            for i in 0..n * c {
                let sp = &tx.data()[i * h * w..(i + 1) * h * w];
                let op = &mut od[i * oh * ow..(i + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, wy) = up2_taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = up2_taps(ox, w);
                        let v = (1.0 - wy) * ((1.0 - wx) * sp[y0 * w + x0] + wx * sp[y0 * w + x1])
                            + wy * ((1.0 - wx) * sp[y1 * w + x0] + wx * sp[y1 * w + x1]);
                        op[oy * ow + ox] = v;
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = gx.data_mut();
                for i in 0..n * c {
                    let gp = &g.data()[i * oh * ow..];
                    let xp = &mut gd[i * h * w..(i + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, wy) = up2_taps(oy, h);
                        for ox in 0..ow {
                            let (x0, x1, wx) = up2_taps(ox, w);
                            let gv = gp[oy * ow + ox];
                            xp[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            xp[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            xp[y1 * w + x0] += gv * wy * (1.0 - wx);
                            xp[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// Symmetric (edge-inclusive) reflective padding.
    pub fn pad_reflect(&mut self, x: Var, left: usize, right: usize, top: usize, bot: usize) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        assert!(left <= w && right <= w && top <= h && bot <= h, "pad exceeds dims");
        let (oh, ow) = (h + top + bot, w + left + right);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let reflect = |i: isize, len: usize| -> usize {
            // symmetric: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
            if i < 0 {
                (-i - 1) as usize
            } else if i as usize >= len {
                2 * len - 1 - i as usize
            } else {
                i as usize
            }
        };
        {
            let od = out.data_mut();
            for i in 0..n * c {
                let sp = &tx.data()[i * h * w..(i + 1) * h * w];
                let op = &mut od[i * oh * ow..(i + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = reflect(oy as isize - top as isize, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - left as isize, w);
                        op[oy * ow + ox] = sp[sy * w + sx];
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = gx.data_mut();
                let reflect = |i: isize, len: usize| -> usize {
                    if i < 0 {
                        (-i - 1) as usize
                    } else if i as usize >= len {
                        2 * len - 1 - i as usize
                    } else {
                        i as usize
                    }
                };
                for i in 0..n * c {
                    let gp = &g.data()[i * oh * ow..];
                    let xp = &mut gd[i * h * w..(i + 1) * h * w];
                    for oy in 0..oh {
                        let sy = reflect(oy as isize - top as isize, h);
                        for ox in 0..ow {
                            let sx = reflect(ox as isize - left as isize, w);
                            xp[sy * w + sx] += gp[oy * ow + ox];
                        }
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    /// Crop `left/right/top/bot` off the spatial borders.
    pub fn crop(&mut self, x: Var, left: usize, right: usize, top: usize, bot: usize) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        assert!(left + right < w && top + bot < h, "crop exceeds dims");
        let (oh, ow) = (h - top - bot, w - left - right);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let od = out.data_mut();
            for i in 0..n * c {
                let sp = &tx.data()[i * h * w..(i + 1) * h * w];
                let op = &mut od[i * oh * ow..(i + 1) * oh * ow];
                for oy in 0..oh {
                    let src = (oy + top) * w + left;
                    op[oy * ow..(oy + 1) * ow].copy_from_slice(&sp[src..src + ow]);
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = gx.data_mut();
                for i in 0..n * c {
                    let gp = &g.data()[i * oh * ow..];
                    let xp = &mut gd[i * h * w..(i + 1) * h * w];
                    for oy in 0..oh {
                        let dst = (oy + top) * w + left;
                        xp[dst..dst + ow].copy_from_slice(&gp[oy * ow..(oy + 1) * ow]);
                    }
                }
                grads.accum(x, gx);
            }),
        )
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.numel();
        let mean = tx.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let shape = tx.shape().to_vec();
        self.push(
            Tensor::scalar(mean as f32),
            Box::new(move |g, grads| {
                let gv = g.scalar_value() / n as f32;
                grads.accum(x, Tensor::full(&shape, gv));
            }),
        )
    }

    /// Mean squared error over all elements (scalar).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let n = ta.numel();
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        self.push(
            Tensor::scalar((sum / n as f64) as f32),
            Box::new(move |g, grads| {
                let s = g.scalar_value() * 2.0 / n as f32;
                let ga = Tensor::new(
                    ta.shape(),
                    ta.data().iter().zip(tb.data()).map(|(&x, &y)| s * (x - y)).collect(),
                );
                let gb = ga.map(|v| -v);
                grads.accum(a, ga);
                grads.accum(b, gb);
            }),
        )
    }

    // ---- domain-specific ops ----

    /// Generalized divisive normalization over the channel axis, applied
    /// per spatial position:
    ///   forward: y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)
    ///   inverse: y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2)
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Var {
        let tx = self.value_rc(x);
        let tb = self.value_rc(beta);
        let tg = self.value_rc(gamma);
        let (n, c, h, w) = tx.dims4();
        assert_eq!(tb.shape(), [c], "beta must be [C]");
        assert_eq!(tg.shape(), [c, c], "gamma must be [C,C]");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let od = out.data_mut();
            let mut xs = vec![0.0f32; c];
            for ni in 0..n {
                for p in 0..hw {
                    for ci in 0..c {
                        xs[ci] = tx.data()[(ni * c + ci) * hw + p];
                    }
                    for ci in 0..c {
                        let mut d = tb.data()[ci];
                        let grow = &tg.data()[ci * c..(ci + 1) * c];
                        for cj in 0..c {
                            d += grow[cj] * xs[cj] * xs[cj];
                        }
                        let f = if inverse { d.sqrt() } else { 1.0 / d.sqrt() };
                        od[(ni * c + ci) * hw + p] = xs[ci] * f;
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let mut gb = vec![0.0f32; c];
                let mut gg = vec![0.0f32; c * c];
                let mut xs = vec![0.0f32; c];
                let mut gs = vec![0.0f32; c];
                let mut dpow = vec![0.0f32; c]; // d^{-3/2} or d^{-1/2}
                let mut droot = vec![0.0f32; c]; // d^{-1/2} or d^{1/2}
                let mut s = vec![0.0f32; c];
                for ni in 0..n {
                    for p in 0..hw {
                        for ci in 0..c {
                            xs[ci] = tx.data()[(ni * c + ci) * hw + p];
                            gs[ci] = g.data()[(ni * c + ci) * hw + p];
                        }
                        for ci in 0..c {
                            let mut d = tb.data()[ci];
                            let grow = &tg.data()[ci * c..(ci + 1) * c];
                            for cj in 0..c {
                                d += grow[cj] * xs[cj] * xs[cj];
                            }
                            let rsqrt = 1.0 / d.sqrt();
                            if inverse {
                                droot[ci] = d.sqrt();
                                dpow[ci] = rsqrt;
                            } else {
                                droot[ci] = rsqrt;
                                dpow[ci] = rsqrt / d;
                            }
                            s[ci] = gs[ci] * xs[ci] * dpow[ci];
                        }
                        let sign = if inverse { 1.0f32 } else { -1.0 };
                        for ci in 0..c {
                            gb[ci] += 0.5 * sign * s[ci];
                            let ggrow = &mut gg[ci * c..(ci + 1) * c];
                            for cj in 0..c {
                                ggrow[cj] += 0.5 * sign * s[ci] * xs[cj] * xs[cj];
                            }
                        }
                        for ck in 0..c {
                            let mut acc = 0.0f32;
                            for ci in 0..c {
                                acc += s[ci] * tg.data()[ci * c + ck];
                            }
                            gx.data_mut()[(ni * c + ck) * hw + p] =
                                gs[ck] * droot[ck] + sign * xs[ck] * acc;
                        }
                    }
                }
                grads.accum(x, gx);
                grads.accum(beta, Tensor::new(&[c], gb));
                grads.accum(gamma, Tensor::new(&[c, c], gg));
            }),
        )
    }

    /// Backward bilinear warp: out(p) = x sampled at p + flow(p), with
    /// out-of-bounds coordinates clamped to the border. Differentiable in
    /// both the features and the flow.
    pub fn warp(&mut self, x: Var, flow: Var) -> Var {
        let tx = self.value_rc(x);
        let tf = self.value_rc(flow);
        let (n, c, h, w) = tx.dims4();
        let (fn_, fc, fh, fw) = tf.dims4();
        assert_eq!((fn_, fc, fh, fw), (n, 2, h, w), "flow must be [N,2,H,W] matching features");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let od = out.data_mut();
            for ni in 0..n {
                let fx = &tf.data()[ni * 2 * hw..ni * 2 * hw + hw];
                let fy = &tf.data()[ni * 2 * hw + hw..ni * 2 * hw + 2 * hw];
                for yy in 0..h {
                    for xx in 0..w {
                        let p = yy * w + xx;
                        let xs = xx as f32 + fx[p];
                        let ys = yy as f32 + fy[p];
                        let (x0, x1, wx) = sample_taps(xs, w);
                        let (y0, y1, wy) = sample_taps(ys, h);
                        for ci in 0..c {
                            let sp = &tx.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            let v00 = sp[y0 * w + x0];
                            let v01 = sp[y0 * w + x1];
                            let v10 = sp[y1 * w + x0];
                            let v11 = sp[y1 * w + x1];
                            od[(ni * c + ci) * hw + p] = (1.0 - wy)
                                * ((1.0 - wx) * v00 + wx * v01)
                                + wy * ((1.0 - wx) * v10 + wx * v11);
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let mut gf = Tensor::zeros(&[n, 2, h, w]);
                for ni in 0..n {
                    let fx = &tf.data()[ni * 2 * hw..ni * 2 * hw + hw];
                    let fy = &tf.data()[ni * 2 * hw + hw..ni * 2 * hw + 2 * hw];
                    for yy in 0..h {
                        for xx in 0..w {
                            let p = yy * w + xx;
                            let xs = xx as f32 + fx[p];
                            let ys = yy as f32 + fy[p];
                            let (x0, x1, wx) = sample_taps(xs, w);
                            let (y0, y1, wy) = sample_taps(ys, h);
                            let mut gfx = 0.0f32;
                            let mut gfy = 0.0f32;
                            for ci in 0..c {
                                let off = (ni * c + ci) * hw;
                                let gv = g.data()[off + p];
                                if gv == 0.0 {
                                    continue;
                                }
                                let sp = &tx.data()[off..off + hw];
                                let v00 = sp[y0 * w + x0];
                                let v01 = sp[y0 * w + x1];
                                let v10 = sp[y1 * w + x0];
                                let v11 = sp[y1 * w + x1];
                                let gxp = &mut gx.data_mut()[off..off + hw];
                                gxp[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                                gxp[y0 * w + x1] += gv * (1.0 - wy) * wx;
                                gxp[y1 * w + x0] += gv * wy * (1.0 - wx);
                                gxp[y1 * w + x1] += gv * wy * wx;
                                gfx += gv * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                                gfy += gv * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                            }
                            gf.data_mut()[ni * 2 * hw + p] = gfx;
                            gf.data_mut()[ni * 2 * hw + hw + p] = gfy;
                        }
                    }
                }
                grads.accum(x, gx);
                grads.accum(flow, gf);
            }),
        )
    }

    /// Adaptive quantization with a straight-through round:
    ///   e_hat = round((e - mu) / q) * q + mu, ties away from zero.
    pub fn quantize_ste(&mut self, e: Var, mu: Var, q: Var) -> Var {
        let te = self.value(e);
        let tm = self.value(mu);
        let tq = self.value(q);
        assert_eq!(te.shape(), tm.shape(), "quantize: mu shape mismatch");
        assert_eq!(te.shape(), tq.shape(), "quantize: q shape mismatch");
        assert!(tq.data().iter().all(|&v| v > 0.0), "quantize: q must be positive");
        let nel = te.numel();
        let mut out = Tensor::zeros(te.shape());
        let mut k_minus_z = vec![0.0f32; nel];
        for i in 0..nel {
            let z = (te.data()[i] - tm.data()[i]) / tq.data()[i];
            let k = z.round(); // f32::round ties away from zero
            k_minus_z[i] = k - z;
            out.data_mut()[i] = k * tq.data()[i] + tm.data()[i];
        }
        let shape = te.shape().to_vec();
        self.push(
            out,
            Box::new(move |g, grads| {
                // STE: d(e_hat)/de = 1, d(e_hat)/dmu = 0, d(e_hat)/dq = k - z.
                grads.accum(e, g.clone());
                let gq = Tensor::new(
                    &shape,
                    g.data().iter().zip(&k_minus_z).map(|(&gv, &kz)| gv * kz).collect(),
                );
                grads.accum(q, gq);
            }),
        )
    }

    /// Per-element cross-entropy in bits under the Laplace-bin likelihood:
    ///   mass = F(e_hat - mu + q/2) - F(e_hat - mu - q/2), clamped to
    ///   MASS_FLOOR; bits = -log2(mass).
    pub fn ce_bits(&mut self, e_hat: Var, mu: Var, sigma: Var, q: Var) -> Var {
        let th = self.value_rc(e_hat);
        let tm = self.value_rc(mu);
        let ts = self.value_rc(sigma);
        let tq = self.value_rc(q);
        assert_eq!(th.shape(), tm.shape(), "ce_bits: mu shape mismatch");
        assert_eq!(th.shape(), ts.shape(), "ce_bits: sigma shape mismatch");
        assert_eq!(th.shape(), tq.shape(), "ce_bits: q shape mismatch");
        let nel = th.numel();
        let mut out = Tensor::zeros(th.shape());
        for i in 0..nel {
            let (mass, _) = laplace_bin_mass(
                th.data()[i] as f64,
                tm.data()[i] as f64,
                ts.data()[i] as f64,
                tq.data()[i] as f64,
            );
            out.data_mut()[i] = (-(mass.ln()) / LN2) as f32;
        }
        let shape = th.shape().to_vec();
        self.push(
            out,
            Box::new(move |g, grads| {
                let mut gh = Tensor::zeros(&shape);
                let mut gm = Tensor::zeros(&shape);
                let mut gs = Tensor::zeros(&shape);
                let mut gq = Tensor::zeros(&shape);
                for i in 0..nel {
                    let gv = g.data()[i] as f64;
                    if gv == 0.0 {
                        continue;
                    }
                    let (mass, partials) = laplace_bin_mass(
                        th.data()[i] as f64,
                        tm.data()[i] as f64,
                        ts.data()[i] as f64,
                        tq.data()[i] as f64,
                    );
                    let Some((dm_de, dm_dmu, dm_dsigma, dm_dq)) = partials else { continue };
                    let dbits_dm = -1.0 / (mass * LN2);
                    gh.data_mut()[i] = (gv * dbits_dm * dm_de) as f32;
                    gm.data_mut()[i] = (gv * dbits_dm * dm_dmu) as f32;
                    gs.data_mut()[i] = (gv * dbits_dm * dm_dsigma) as f32;
                    gq.data_mut()[i] = (gv * dbits_dm * dm_dq) as f32;
                }
                grads.accum(e_hat, gh);
                grads.accum(mu, gm);
                grads.accum(sigma, gs);
                grads.accum(q, gq);
            }),
        )
    }
}

/// Laplace CDF with location 0 and scale sigma.
pub fn laplace_cdf(x: f64, sigma: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / sigma).exp()
    } else {
        1.0 - 0.5 * (-x / sigma).exp()
    }
}

fn laplace_pdf(x: f64, sigma: f64) -> f64 {
    (-(x.abs()) / sigma).exp() / (2.0 * sigma)
}

/// Mass the Laplace(mu, sigma) prior, convolved with U(-q/2, q/2),
/// assigns at `e_hat`, floored at MASS_FLOOR. Returns the clamped mass
/// and, when unclamped, its partials (d/de_hat, d/dmu, d/dsigma, d/dq).
pub fn laplace_bin_mass(
    e_hat: f64,
    mu: f64,
    sigma: f64,
    q: f64,
) -> (f64, Option<(f64, f64, f64, f64)>) {
    let a = e_hat - mu + q / 2.0;
    let b = e_hat - mu - q / 2.0;
    let mass = laplace_cdf(a, sigma) - laplace_cdf(b, sigma);
    if mass <= MASS_FLOOR {
        return (MASS_FLOOR, None);
    }
    let fa = laplace_pdf(a, sigma);
    let fb = laplace_pdf(b, sigma);
    let dm_de = fa - fb;
    let dm_dmu = fb - fa;
    let dm_dq = 0.5 * (fa + fb);
    let dm_dsigma = (-a * fa + b * fb) / sigma;
    (mass, Some((dm_de, dm_dmu, dm_dsigma, dm_dq)))
}

/// Bilinear taps for a continuous coordinate with border clamping.
fn sample_taps(s: f32, len: usize) -> (usize, usize, f32) {
    let s0 = s.floor();
    let frac = s - s0;
    let i0 = s0 as isize;
    let clamp = |i: isize| -> usize { i.clamp(0, len as isize - 1) as usize };
    (clamp(i0), clamp(i0 + 1), frac)
}

/// Source taps for 2x bilinear upsampling at output index `o`.
fn up2_taps(o: usize, len: usize) -> (usize, usize, f32) {
    // Half-pixel centres: src = (o + 0.5)/2 - 0.5.
    let src = (o as f32 + 0.5) * 0.5 - 0.5;
    let s0 = src.floor();
    let frac = src - s0;
    let i0 = s0 as isize;
    let clamp = |i: isize| -> usize { i.clamp(0, len as isize - 1) as usize };
    (clamp(i0), clamp(i0 + 1), frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha12Rng, lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Central-difference check of d(scalar)/d(inputs[check]) for an op
    /// under test, on small tensors.
    fn check_grad(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[Tensor],
        check: usize,
        h: f32,
        tol: f32,
    ) {
        let eval = |tensors: &[Tensor]| -> f32 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let m = tape.mean_all(out);
            tape.value(m).scalar_value()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let m = tape.mean_all(out);
        let grads = tape.backward(m);
        let analytic = grads.get(vars[check]).expect("grad missing").clone();

        for i in 0..inputs[check].numel() {
            let mut plus = inputs.to_vec();
            plus[check].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[check].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs();
            let scale = an.abs().max(fd.abs()).max(1e-2);
            assert!(
                err / scale < tol,
                "grad mismatch input {check} elem {i}: analytic {an}, fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
        check_grad(|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], 1, 1e-2, 0.02);
        check_grad(|t, v| t.sigmoid(v[0]), &[a.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.softplus(v[0]), &[a.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.leaky_relu(v[0], 0.1), &[b], 0, 1e-3, 0.03);
        check_grad(|t, v| t.mse(v[0], v[1]), &[a.clone(), rand_tensor(&[2, 3], &mut rng, -1.0, 1.0)], 0, 1e-2, 0.02);
    }

    #[test]
    fn broadcast_and_shape_grads_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
        check_grad(|t, v| t.add_bias(v[0], v[1]), &[x.clone(), b.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.add_bias(v[0], v[1]), &[x.clone(), b], 1, 1e-2, 0.02);
        let wmap = rand_tensor(&[2, 3, 1, 1], &mut rng, 0.1, 1.0);
        check_grad(|t, v| t.mul_cmap(v[0], v[1]), &[x.clone(), wmap.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.mul_cmap(v[0], v[1]), &[x.clone(), wmap], 1, 1e-2, 0.02);
        check_grad(|t, v| t.gap(v[0]), &[x.clone()], 0, 1e-2, 0.02);
        let y = rand_tensor(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
        check_grad(|t, v| t.concat_c(&[v[0], v[1]]), &[x.clone(), y.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.concat_c(&[v[0], v[1]]), &[x.clone(), y], 1, 1e-2, 0.02);
        check_grad(|t, v| t.slice_c(v[0], 1, 3), &[x.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.avg_pool2(v[0]), &[x.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.upsample2(v[0]), &[x.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.pad_reflect(v[0], 2, 1, 1, 2), &[x.clone()], 0, 1e-2, 0.02);
        check_grad(|t, v| t.crop(v[0], 1, 1, 1, 0), &[x], 0, 1e-2, 0.02);
    }

    #[test]
    fn gdn_identity_case() {
        // beta = 1, gamma = 0 -> identity.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32 * 0.3 - 0.5));
        let beta = tape.leaf(Tensor::full(&[2], 1.0));
        let gamma = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.gdn(x, beta, gamma, false);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn gdn_scalar_value_matches_formula() {
        // C=1, x=3, beta=1, gamma=1 -> 3/sqrt(10).
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![3.0]));
        let beta = tape.leaf(Tensor::new(&[1], vec![1.0]));
        let gamma = tape.leaf(Tensor::new(&[1, 1], vec![1.0]));
        let y = tape.gdn(x, beta, gamma, false);
        let expect = 3.0 / 10.0f32.sqrt();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-6);
        assert!((expect - 0.94868).abs() < 1e-5);
    }

    #[test]
    fn gdn_preserves_sign_and_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let mut xt = rand_tensor(&[1, 3, 4, 4], &mut rng, -2.0, 2.0);
        xt.data_mut()[0] = 0.0;
        let x = tape.leaf(xt.clone());
        let beta = tape.leaf(rand_tensor(&[3], &mut rng, 0.5, 1.5));
        let gamma = tape.leaf(rand_tensor(&[3, 3], &mut rng, 0.0, 0.3));
        let y = tape.gdn(x, beta, gamma, false);
        for (xv, yv) in xt.data().iter().zip(tape.value(y).data()) {
            assert_eq!(xv.signum() * yv.signum() >= 0.0, true);
            if *xv == 0.0 {
                assert_eq!(*yv, 0.0);
            }
        }
    }

    #[test]
    fn igdn_inverts_gdn_for_small_gamma() {
        // Shared parameters, diagonal-dominant small gamma: igdn(gdn(x))
        // recovers x to ~1e-3 relative.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let xt = rand_tensor(&[1, 4, 3, 3], &mut rng, -1.0, 1.0);
        let x = tape.leaf(xt.clone());
        let beta = tape.leaf(Tensor::full(&[4], 1.0));
        let mut gt = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            gt.data_mut()[i * 4 + i] = 0.01;
        }
        let gamma = tape.leaf(gt);
        let y = tape.gdn(x, beta, gamma, false);
        let z = tape.gdn(y, beta, gamma, true);
        for (xv, zv) in xt.data().iter().zip(tape.value(z).data()) {
            let rel = (xv - zv).abs() / xv.abs().max(1e-3);
            assert!(rel < 1e-3, "x {xv} vs igdn(gdn(x)) {zv}");
        }
    }

    #[test]
    fn gdn_grads_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_tensor(&[1, 3, 2, 2], &mut rng, -1.0, 1.0);
        let beta = rand_tensor(&[3], &mut rng, 0.5, 1.5);
        let gamma = rand_tensor(&[3, 3], &mut rng, 0.01, 0.3);
        for inverse in [false, true] {
            for check in 0..3 {
                check_grad(
                    |t, v| t.gdn(v[0], v[1], v[2], inverse),
                    &[x.clone(), beta.clone(), gamma.clone()],
                    check,
                    5e-3,
                    0.03,
                );
            }
        }
    }

    #[test]
    fn warp_zero_flow_is_exact_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let xt = rand_tensor(&[2, 3, 5, 7], &mut rng, -1.0, 1.0);
        let x = tape.leaf(xt.clone());
        let f = tape.leaf(Tensor::zeros(&[2, 2, 5, 7]));
        let y = tape.warp(x, f);
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn warp_integer_and_half_shifts_on_ramp() {
        // f(x,y) = x; dx=1 -> interior x+1; dx=0.5 -> interior x+0.5.
        let (h, w) = (6, 8);
        let ramp = Tensor::from_fn(&[1, 1, h, w], |i| (i % w) as f32);
        for (dx, expect_off) in [(1.0f32, 1.0f32), (0.5, 0.5)] {
            let mut tape = Tape::new();
            let x = tape.leaf(ramp.clone());
            let mut ft = Tensor::zeros(&[1, 2, h, w]);
            for i in 0..h * w {
                ft.data_mut()[i] = dx;
            }
            let f = tape.leaf(ft);
            let y = tape.warp(x, f);
            for yy in 0..h {
                for xx in 0..w - 2 {
                    let got = tape.value(y).data()[yy * w + xx];
                    assert!(
                        (got - (xx as f32 + expect_off)).abs() < 1e-6,
                        "dx={dx} at ({xx},{yy}): {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_features() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let f1 = rand_tensor(&[1, 2, 6, 6], &mut rng, -1.0, 1.0);
        let f2 = rand_tensor(&[1, 2, 6, 6], &mut rng, -1.0, 1.0);
        let flow = rand_tensor(&[1, 2, 6, 6], &mut rng, -2.0, 2.0);
        let (a, b) = (0.7f32, -1.3f32);
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(t.clone());
            let f = tape.leaf(flow.clone());
            let y = tape.warp(x, f);
            tape.value(y).clone()
        };
        let mut combo = f1.map(|v| a * v);
        let f2b = f2.map(|v| b * v);
        combo.add_assign(&f2b);
        let lhs = run(&combo);
        let (w1, w2) = (run(&f1), run(&f2));
        for i in 0..lhs.numel() {
            let rhs = a * w1.data()[i] + b * w2.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_grads_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng, -1.0, 1.0);
        // Keep flow away from integer knots where bilinear is non-smooth.
        let flow = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.gen_range(-1.2..1.2f32) + 0.31);
        check_grad(|t, v| t.warp(v[0], v[1]), &[x.clone(), flow.clone()], 0, 1e-3, 0.03);
        check_grad(|t, v| t.warp(v[0], v[1]), &[x, flow], 1, 1e-3, 0.03);
    }

    #[test]
    fn quantize_matches_hand_values() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::new(&[1, 1, 1, 3], vec![3.7, 0.2, 1.3]));
        let mu = tape.leaf(Tensor::new(&[1, 1, 1, 3], vec![0.2, 0.2, 0.0]));
        let q = tape.leaf(Tensor::new(&[1, 1, 1, 3], vec![1.0, 0.7, 0.5]));
        let ehat = tape.quantize_ste(e, mu, q);
        let got = tape.value(ehat).data();
        assert!((got[0] - 4.2).abs() < 1e-6, "tie rounds away from zero: {}", got[0]);
        assert!((got[1] - 0.2).abs() < 1e-7, "grid centre: {}", got[1]);
        assert!((got[2] - 1.5).abs() < 1e-6, "round(2.6)=3 -> 1.5: {}", got[2]);
    }

    #[test]
    fn quantize_ste_gradient_contract() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![1.3, -0.4]));
        let mu = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![0.1, 0.0]));
        let q = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![0.5, 0.8]));
        let ehat = tape.quantize_ste(e, mu, q);
        let m = tape.mean_all(ehat);
        let grads = tape.backward(m);
        let ge = grads.get(e).unwrap();
        assert!(ge.data().iter().all(|&v| (v - 0.5).abs() < 1e-7), "de = 1 through STE");
        assert!(grads.get(mu).is_none(), "mu receives no decode-path gradient");
        let gq = grads.get(q).unwrap();
        // d(e_hat)/dq = k - z.
        for (i, (&ev, &mv)) in [1.3f32, -0.4].iter().zip(&[0.1f32, 0.0]).enumerate() {
            let qv = [0.5f32, 0.8][i];
            let z = (ev - mv) / qv;
            let expect = (z.round() - z) * 0.5;
            assert!((gq.data()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_bits_spot_values() {
        let mut tape = Tape::new();
        let ehat = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![0.0, 10.0]));
        let mu = tape.leaf(Tensor::zeros(&[1, 1, 1, 2]));
        let sigma = tape.leaf(Tensor::full(&[1, 1, 1, 2], 1.0));
        let q = tape.leaf(Tensor::full(&[1, 1, 1, 2], 1.0));
        let bits = tape.ce_bits(ehat, mu, sigma, q);
        let b0 = tape.value(bits).data()[0] as f64;
        // mass(0) = 1 - e^{-1/2} = 0.393469...; -log2 = 1.3455 bits.
        assert!((b0 - 1.3455).abs() < 1e-3, "{b0}");
        let b1 = tape.value(bits).data()[1] as f64;
        let expect = -(0.5 * (-9.5f64).exp() * (1.0 - (-1.0f64).exp())).log2();
        assert!((b1 - expect).abs() < 1e-3, "{b1} vs {expect}");
    }

    #[test]
    fn ce_grads_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        // Values away from bin boundaries; e_hat is on-grid by construction
        // in the model, but the op itself is defined for any input.
        let ehat = rand_tensor(&[1, 1, 2, 2], &mut rng, -2.0, 2.0);
        let mu = rand_tensor(&[1, 1, 2, 2], &mut rng, -0.5, 0.5);
        let sigma = rand_tensor(&[1, 1, 2, 2], &mut rng, 0.4, 2.0);
        let q = rand_tensor(&[1, 1, 2, 2], &mut rng, 0.3, 1.5);
        for check in 0..4 {
            check_grad(
                |t, v| t.ce_bits(v[0], v[1], v[2], v[3]),
                &[ehat.clone(), mu.clone(), sigma.clone(), q.clone()],
                check,
                1e-3,
                0.02,
            );
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let d = tape.detach(x);
        let y = tape.mul(d, d);
        let m = tape.mean_all(y);
        let grads = tape.backward(m);
        assert!(grads.get(x).is_none());
        assert!(grads.get(d).is_some());
    }
}
