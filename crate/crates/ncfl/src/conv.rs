//! Conv2d / ConvTranspose2d tape ops, implemented as im2col + SGEMM.
//!
//! Weight layouts follow the usual convention: conv `[Co, Ci, K, K]`,
//! transposed conv `[Ci, Co, K, K]`.
//!
//! A process-wide multiply-add counter tracks GEMM work so compute
//! comparisons (e.g. uni- vs bi-directional) are deterministic rather
//! than wall-clock based.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

static GEMM_MACS: AtomicU64 = AtomicU64::new(0);

/// Multiply-accumulate operations issued to GEMM since the last reset.
pub fn gemm_macs() -> u64 {
    GEMM_MACS.load(Ordering::Relaxed)
}

pub fn reset_gemm_macs() {
    GEMM_MACS.store(0, Ordering::Relaxed);
}

thread_local! {
    static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

fn with_cols<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// C = A(m,k) * B(k,n) + beta * C on row-major slices. A transposed flag
/// means the operand is physically stored as its transpose.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    GEMM_MACS.fetch_add((m * k * n) as u64, Ordering::Relaxed);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gather `src[c, a*s - p + k]` over an `(ah, aw)` grid into
/// `cols[(c*K + kh)*K + kw, ah*aw]`. Out-of-range taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    ch: usize,
    bh: usize,
    bw: usize,
    ah: usize,
    aw: usize,
    ksize: usize,
    stride: usize,
    pad: isize,
    cols: &mut [f32],
) {
    let a_area = ah * aw;
    for c in 0..ch {
        let plane = &src[c * bh * bw..(c + 1) * bh * bw];
        for kh in 0..ksize {
            for kw in 0..ksize {
                let row = &mut cols[((c * ksize + kh) * ksize + kw) * a_area..][..a_area];
                for ay in 0..ah {
                    let by = (ay * stride) as isize - pad + kh as isize;
                    let dst = &mut row[ay * aw..(ay + 1) * aw];
                    if by < 0 || by >= bh as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &plane[by as usize * bw..(by as usize + 1) * bw];
                    if stride == 1 {
                        // bx = ax - pad + kw is contiguous in ax.
                        let off = kw as isize - pad;
                        let lo = (-off).max(0) as usize;
                        let hi = ((bw as isize - off).min(aw as isize)).max(0) as usize;
                        dst[..lo.min(aw)].fill(0.0);
                        if hi > lo {
                            dst[lo..hi]
                                .copy_from_slice(&srow[(lo as isize + off) as usize..][..hi - lo]);
                        }
                        dst[hi.max(lo)..].fill(0.0);
                    } else {
                        for (ax, d) in dst.iter_mut().enumerate() {
                            let bx = (ax * stride) as isize - pad + kw as isize;
                            *d = if bx < 0 || bx >= bw as isize {
                                0.0
                            } else {
                                srow[bx as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add cols back onto the `B` grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    ch: usize,
    bh: usize,
    bw: usize,
    ah: usize,
    aw: usize,
    ksize: usize,
    stride: usize,
    pad: isize,
    dst: &mut [f32],
) {
    let a_area = ah * aw;
    for c in 0..ch {
        let plane = &mut dst[c * bh * bw..(c + 1) * bh * bw];
        for kh in 0..ksize {
            for kw in 0..ksize {
                let row = &cols[((c * ksize + kh) * ksize + kw) * a_area..][..a_area];
                for ay in 0..ah {
                    let by = (ay * stride) as isize - pad + kh as isize;
                    if by < 0 || by >= bh as isize {
                        continue;
                    }
                    let drow = &mut plane[by as usize * bw..(by as usize + 1) * bw];
                    let srow = &row[ay * aw..(ay + 1) * aw];
                    if stride == 1 {
                        let off = kw as isize - pad;
                        let lo = (-off).max(0) as usize;
                        let hi = ((bw as isize - off).min(aw as isize)).max(0) as usize;
                        if hi > lo {
                            let dst = &mut drow[(lo as isize + off) as usize..][..hi - lo];
                            for (d, &v) in dst.iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ax, &v) in srow.iter().enumerate() {
                            let bx = (ax * stride) as isize - pad + kw as isize;
                            if bx >= 0 && bx < bw as isize {
                                drow[bx as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

impl Tape {
    /// 2-d convolution, NCHW.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let tx = self.rc(x);
        let tw = self.rc(w);
        let tb = self.rc(b);
        let (n, ci, h, wd) = tx.dims4();
        let (co, wci, k, k2) = tw.dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(wci, ci, "conv2d: weight expects {wci} input channels, got {ci}");
        assert_eq!(tb.shape(), [co], "conv2d: bias must be [Co]");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
        let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let (ckk, oarea) = (ci * k * k, oh * ow);
        let trivial = k == 1 && stride == 1 && pad == 0;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for ni in 0..n {
            let xn = &tx.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
            let yn = &mut out.data_mut()[ni * co * oarea..(ni + 1) * co * oarea];
            if trivial {
                sgemm(co, ckk, oarea, tw.data(), false, xn, false, 0.0, yn);
            } else {
                with_cols(ckk * oarea, |cols| {
                    im2col(xn, ci, h, wd, oh, ow, k, stride, pad as isize, cols);
                    sgemm(co, ckk, oarea, tw.data(), false, cols, false, 0.0, yn);
                });
            }
            for c in 0..co {
                let bias = tb.data()[c];
                for v in &mut yn[c * oarea..(c + 1) * oarea] {
                    *v += bias;
                }
            }
        }
        self.push_op(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, ci, h, wd]);
                let mut gw = Tensor::zeros(&[co, ci, k, k]);
                let mut gb = vec![0.0f32; co];
                for ni in 0..n {
                    let gn = &g.data()[ni * co * oarea..(ni + 1) * co * oarea];
                    let xn = &tx.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
                    let gxn = &mut gx.data_mut()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
                    for c in 0..co {
                        gb[c] += gn[c * oarea..(c + 1) * oarea].iter().sum::<f32>();
                    }
                    if trivial {
                        // dW += g xᵀ ; dX += Wᵀ g.
                        sgemm(co, oarea, ckk, gn, false, xn, true, 1.0, gw.data_mut());
                        sgemm(ckk, co, oarea, tw.data(), true, gn, false, 1.0, gxn);
                        continue;
                    }
                    with_cols(ckk * oarea, |cols| {
                        im2col(xn, ci, h, wd, oh, ow, k, stride, pad as isize, cols);
                        
                        // dW += g · colsᵀ.
                        sgemm(co, oarea, ckk, gn, false, cols, true, 1.0, gw.data_mut());
                        // gcols = Wᵀ g, then scatter back.
                        let gcols = &mut *cols;
                        sgemm(ckk, co, oarea, tw.data(), true, gn, false, 0.0, gcols);
                        col2im(gcols, ci, h, wd, oh, ow, k, stride, pad as isize, gxn);
                    });
                }
                grads.accum(x, gx);
                grads.accum(w, gw);
                grads.accum(b, Tensor::new(&[co], gb));
            }),
        )
    }

    /// 2-d transposed convolution (fractionally-strided), NCHW.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let tx = self.rc(x);
        let tw = self.rc(w);
        let tb = self.rc(b);
        let (n, ci, h, wd) = tx.dims4();
        let (wci, co, k, k2) = tw.dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(wci, ci, "conv_transpose2d: weight expects {wci} input channels, got {ci}");
        assert_eq!(tb.shape(), [co], "conv_transpose2d: bias must be [Co]");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let (ckk, iarea, oarea) = (co * k * k, h * wd, oh * ow);
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for ni in 0..n {
            let xn = &tx.data()[ni * ci * iarea..(ni + 1) * ci * iarea];
            let yn = &mut out.data_mut()[ni * co * oarea..(ni + 1) * co * oarea];
            with_cols(ckk * iarea, |cols| {
                // cols[ckk, iarea] = W'ᵀ[ckk, ci] x[ci, iarea]
                sgemm(ckk, ci, iarea, tw.data(), true, xn, false, 0.0, cols);
                col2im(cols, co, oh, ow, h, wd, k, stride, pad as isize, yn);
            });
            for c in 0..co {
                let bias = tb.data()[c];
                for v in &mut yn[c * oarea..(c + 1) * oarea] {
                    *v += bias;
                }
            }
        }
        self.push_op(
            out,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&[n, ci, h, wd]);
                let mut gw = Tensor::zeros(&[ci, co, k, k]);
                let mut gb = vec![0.0f32; co];
                for ni in 0..n {
                    let gn = &g.data()[ni * co * oarea..(ni + 1) * co * oarea];
                    let xn = &tx.data()[ni * ci * iarea..(ni + 1) * ci * iarea];
                    let gxn = &mut gx.data_mut()[ni * ci * iarea..(ni + 1) * ci * iarea];
                    for c in 0..co {
                        gb[c] += gn[c * oarea..(c + 1) * oarea].iter().sum::<f32>();
                    }
                    with_cols(ckk * iarea, |gcols| {
                        im2col(gn, co, oh, ow, h, wd, k, stride, pad as isize, gcols);
                        // gX[ci, iarea] = W'[ci, ckk] gcols.
                        sgemm(ci, ckk, iarea, tw.data(), false, gcols, false, 1.0, gxn);
                        // gW'[ci, ckk] += x[ci, iarea] gcolsᵀ.
                        sgemm(ci, iarea, ckk, xn, false, gcols, true, 1.0, gw.data_mut());
                    });
                }
                grads.accum(x, gx);
                grads.accum(w, gw);
                grads.accum(b, Tensor::new(&[co], gb));
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0f32))
    }

    /// Direct triple-loop convolution, the independent oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: isize) -> Tensor {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let oh = ((h as isize + 2 * p - k as isize) / s as isize + 1) as usize;
        let ow = ((wd as isize + 2 * p - k as isize) / s as isize + 1) as usize;
        let mut y = Tensor::zeros(&[n, co, oh, ow]);
        for ni in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s) as isize - p + ky as isize;
                                    let ix = (ox * s) as isize - p + kx as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((ni * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        y.data_mut()[((ni * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    /// Direct transposed convolution oracle.
    fn tconv_naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let (n, ci, h, wd) = x.dims4();
        let (_, co, k, _) = w.dims4();
        let oh = (h - 1) * s + k - 2 * p;
        let ow = (wd - 1) * s + k - 2 * p;
        let mut y = Tensor::zeros(&[n, co, oh, ow]);
        for ni in 0..n {
            for o in 0..co {
                for v in
                    &mut y.data_mut()[(ni * co + o) * oh * ow..(ni * co + o + 1) * oh * ow]
                {
                    *v = b.data()[o];
                }
            }
            for c in 0..ci {
                for iy in 0..h {
                    for ix in 0..wd {
                        let xv = x.data()[((ni * ci + c) * h + iy) * wd + ix];
                        for o in 0..co {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * s + ky) as isize - p as isize;
                                    let ox = (ix * s + kx) as isize - p as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    y.data_mut()
                                        [((ni * co + o) * oh + oy as usize) * ow + ox as usize] +=
                                        xv * w.data()[((c * co + o) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for &(ci, co, k, s, p, h, w) in &[
            (3usize, 8usize, 3usize, 1usize, 1usize, 9usize, 11usize),
            (4, 6, 3, 2, 1, 10, 8),
            (2, 5, 1, 1, 0, 7, 7),
            (3, 4, 4, 2, 1, 8, 8),
            (5, 3, 5, 1, 2, 9, 9),
        ] {
            let x = rand_tensor(&[2, ci, h, w], &mut rng);
            let wt = rand_tensor(&[co, ci, k, k], &mut rng);
            let b = rand_tensor(&[co], &mut rng);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(xv, wv, bv, s, p);
            let want = conv_naive(&x, &wt, &b, s, p as isize);
            assert_eq!(tape.value(y).shape(), want.shape());
            assert!(
                tape.value(y).max_abs_diff(&want) < 1e-4,
                "conv mismatch at ci={ci} co={co} k={k} s={s} p={p}"
            );
        }
    }

    #[test]
    fn conv_transpose2d_matches_naive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for &(ci, co, k, s, p, h, w) in &[
            (3usize, 5usize, 4usize, 2usize, 1usize, 5usize, 6usize),
            (4, 3, 2, 2, 0, 6, 4),
            (2, 2, 3, 1, 1, 7, 7),
        ] {
            let x = rand_tensor(&[2, ci, h, w], &mut rng);
            let wt = rand_tensor(&[ci, co, k, k], &mut rng);
            let b = rand_tensor(&[co], &mut rng);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
            let y = tape.conv_transpose2d(xv, wv, bv, s, p);
            let want = tconv_naive(&x, &wt, &b, s, p);
            assert_eq!(tape.value(y).shape(), want.shape());
            assert!(
                tape.value(y).max_abs_diff(&want) < 1e-4,
                "tconv mismatch at ci={ci} co={co} k={k} s={s} p={p}"
            );
        }
    }

    fn check_grad_conv(transposed: bool, s: usize, p: usize) {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let (ci, co, k) = (2, 3, 3);
        let x = rand_tensor(&[1, ci, 6, 6], &mut rng);
        let w = if transposed {
            rand_tensor(&[ci, co, k, k], &mut rng)
        } else {
            rand_tensor(&[co, ci, k, k], &mut rng)
        };
        let b = rand_tensor(&[co], &mut rng);
        let eval = |inputs: &[Tensor]| -> f32 {
            let mut tape = Tape::new();
            let xv = tape.leaf(inputs[0].clone());
            let wv = tape.leaf(inputs[1].clone());
            let bv = tape.leaf(inputs[2].clone());
            let y = if transposed {
                tape.conv_transpose2d(xv, wv, bv, s, p)
            } else {
                tape.conv2d(xv, wv, bv, s, p)
            };
            let m = tape.mean_all(y);
            tape.value(m).scalar_value()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = if transposed {
            tape.conv_transpose2d(xv, wv, bv, s, p)
        } else {
            tape.conv2d(xv, wv, bv, s, p)
        };
        let m = tape.mean_all(y);
        let grads = tape.backward(m);
        let inputs = [x, w, b];
        for (idx, var) in [(0usize, xv), (1, wv), (2, bv)] {
            let analytic = grads.get(var).unwrap();
            for i in 0..inputs[idx].numel() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[i] += 1e-2;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[i] -= 1e-2;
                let fd = (eval(&plus) - eval(&minus)) / 2e-2;
                let an = analytic.data()[i];
                assert!(
                    (fd - an).abs() / an.abs().max(fd.abs()).max(1e-2) < 0.02,
                    "transposed={transposed} input {idx} elem {i}: analytic {an} fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_grads_match_fd() {
        check_grad_conv(false, 1, 1);
        check_grad_conv(false, 2, 1);
    }

    #[test]
    fn conv_transpose2d_grads_match_fd() {
        check_grad_conv(true, 2, 1);
        check_grad_conv(true, 1, 1);
    }

    #[test]
    fn mac_counter_tracks_gemm_work() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let x = rand_tensor(&[1, 4, 8, 8], &mut rng);
        let w = rand_tensor(&[4, 4, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        reset_gemm_macs();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let _ = tape.conv2d(xv, wv, bv, 1, 1);
        assert_eq!(gemm_macs(), (4 * 4 * 3 * 3 * 8 * 8) as u64);
    }


    #[test]
    #[ignore = "throughput probe, run on demand"]
    fn bench_conv_parts() {
        let (ci, co, k, s, p) = (16usize, 16usize, 3usize, 1usize, 1usize);
        let (h, w) = (32usize, 32usize);
        let (oh, ow) = (h, w);
        let (ckk, oarea) = (ci * k * k, oh * ow);
        let x = vec![0.3f32; ci * h * w];
        let wt = vec![0.1f32; co * ckk];
        let mut cols = vec![0.0f32; ckk * oarea];
        let mut y = vec![0.0f32; co * oarea];
        let reps = 4000;
        let t = std::time::Instant::now();
        for _ in 0..reps {
            im2col(&x, ci, h, w, oh, ow, k, s, p as isize, &mut cols);
        }
        eprintln!("im2col: {:.1} us/call", t.elapsed().as_secs_f64() * 1e6 / reps as f64);
        let t = std::time::Instant::now();
        for _ in 0..reps {
            sgemm(co, ckk, oarea, &wt, false, &cols, false, 0.0, &mut y);
        }
        eprintln!("gemm fwd: {:.1} us/call ({:.1} GMAC/s)",
            t.elapsed().as_secs_f64() * 1e6 / reps as f64,
            (co * ckk * oarea * reps) as f64 / 1e9 / t.elapsed().as_secs_f64());
        let mut gx = vec![0.0f32; ci * h * w];
        let t = std::time::Instant::now();
        for _ in 0..reps {
            col2im(&cols, ci, h, w, oh, ow, k, s, p as isize, &mut gx);
        }
        eprintln!("col2im: {:.1} us/call", t.elapsed().as_secs_f64() * 1e6 / reps as f64);
        let t = std::time::Instant::now();
        for _ in 0..reps {
            let z = Tensor::zeros(&[4, 16, 32, 32]);
            std::hint::black_box(&z);
        }
        eprintln!("zeros 256KB: {:.1} us", t.elapsed().as_secs_f64() * 1e6 / reps as f64);
    }

    #[test]
    #[ignore = "throughput probe, run on demand"]
    fn bench_desk_scale_conv() {
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let x = rand_tensor(&[4, 16, 32, 32], &mut rng);
        let w = rand_tensor(&[16, 16, 3, 3], &mut rng);
        let b = rand_tensor(&[16], &mut rng);
        let reps = 200;
        reset_gemm_macs();
        let start = std::time::Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(xv, wv, bv, 1, 1);
            let m = tape.mean_all(y);
            let _ = tape.backward(m);
        }
        let dt = start.elapsed().as_secs_f64();
        let gmacs = gemm_macs() as f64 / 1e9;
        eprintln!("conv fwd+bwd: {:.2} GMAC in {:.3}s = {:.2} GMAC/s", gmacs, dt, gmacs / dt);
    }
}
