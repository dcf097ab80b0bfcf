//! Direct 3D convolution (stride 1, replicate padding) with backward
//! passes for both input and weights.
//!
//! Layouts: input (Cin, H, W, D), weights (Cout, Cin, k, k, k) with odd k,
//! bias (Cout), output (Cout, H, W, D). The inner loops run along the
//! contiguous D axis so the compiler can vectorize them; with the volumes
//! this crate works on, direct convolution is fast enough and bit-exactly
//! deterministic (fixed accumulation order).

use crate::tensor::Tensor;

/// Replicate-pads every channel of a (C, H, W, D) tensor by `pad` voxels on
/// both ends of each spatial axis.
pub fn pad_replicate_channels(x: &Tensor, pad: usize) -> Tensor {
    let [c, h, w, d] = dims4(x);
    let (ph, pw, pd) = (h + 2 * pad, w + 2 * pad, d + 2 * pad);
    let mut out = vec![0.0; c * ph * pw * pd];
    let src = x.data();
    for ci in 0..c {
        let sch = &src[ci * h * w * d..(ci + 1) * h * w * d];
        let dch = &mut out[ci * ph * pw * pd..(ci + 1) * ph * pw * pd];
        for ih in 0..ph {
            let sh = ih.saturating_sub(pad).min(h - 1);
            for iw in 0..pw {
                let sw = iw.saturating_sub(pad).min(w - 1);
                let srow = &sch[(sh * w + sw) * d..(sh * w + sw) * d + d];
                let drow = &mut dch[(ih * pw + iw) * pd..(ih * pw + iw) * pd + pd];
                for id in 0..pd {
                    drow[id] = srow[id.saturating_sub(pad).min(d - 1)];
                }
            }
        }
    }
    Tensor::from_vec(&[c, ph, pw, pd], out)
}

fn dims4(t: &Tensor) -> [usize; 4] {
    assert_eq!(t.rank(), 4, "expected rank-4 tensor, got {:?}", t.shape());
    [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]]
}

fn check_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> (usize, usize, usize, [usize; 3]) {
    let [cin, h, wd, d] = dims4(x);
    assert_eq!(w.rank(), 5, "weights must be (Cout, Cin, k, k, k)");
    let cout = w.shape()[0];
    let k = w.shape()[2];
    assert_eq!(w.shape()[1], cin, "weight Cin mismatch");
    assert!(w.shape()[2] == k && w.shape()[3] == k && w.shape()[4] == k, "kernel must be cubic");
    assert!(k % 2 == 1, "kernel side must be odd");
    assert_eq!(b.shape(), &[cout], "bias shape mismatch");
    (cin, cout, k, [h, wd, d])
}

/// Forward convolution: out[co] = bias[co] + sum_ci x[ci] * w[co, ci].
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, cout, k, [h, wd, d]) = check_shapes(x, w, b);
    let pad = k / 2;
    let xp = pad_replicate_channels(x, pad);
    let (pw, pd) = (wd + 2 * pad, d + 2 * pad);
    let ch_padded = (h + 2 * pad) * pw * pd;
    let hwd = h * wd * d;
    let mut out = vec![0.0; cout * hwd];
    let wdata = w.data();
    let xdata = xp.data();

    for co in 0..cout {
        let och = &mut out[co * hwd..(co + 1) * hwd];
        och.fill(b.data()[co]);
        for ci in 0..cin {
            let xch = &xdata[ci * ch_padded..(ci + 1) * ch_padded];
            let wk = &wdata[(co * cin + ci) * k * k * k..(co * cin + ci + 1) * k * k * k];
            for ih in 0..h {
                for iw in 0..wd {
                    let drow = &mut och[(ih * wd + iw) * d..(ih * wd + iw) * d + d];
                    for kh in 0..k {
                        for kw in 0..k {
                            let base = ((ih + kh) * pw + iw + kw) * pd;
                            for kd in 0..k {
                                let wgt = wk[(kh * k + kw) * k + kd];
                                let srow = &xch[base + kd..base + kd + d];
                                for (dv, &sv) in drow.iter_mut().zip(srow) {
                                    *dv += wgt * sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cout, h, wd, d], out)
}

/// Gradient of the loss w.r.t. the convolution input.
pub fn conv3d_backward_input(gout: &Tensor, x_shape: &[usize], w: &Tensor) -> Tensor {
    let [cout, h, wd, d] = dims4(gout);
    let cin = x_shape[0];
    let k = w.shape()[2];
    let pad = k / 2;
    let (ph, pw, pd) = (h + 2 * pad, wd + 2 * pad, d + 2 * pad);
    let ch_padded = ph * pw * pd;
    let hwd = h * wd * d;
    let mut gpad = vec![0.0; cin * ch_padded];
    let wdata = w.data();
    let gdata = gout.data();

    for ci in 0..cin {
        let gch = &mut gpad[ci * ch_padded..(ci + 1) * ch_padded];
        for co in 0..cout {
            let grow_ch = &gdata[co * hwd..(co + 1) * hwd];
            let wk = &wdata[(co * cin + ci) * k * k * k..(co * cin + ci + 1) * k * k * k];
            for ih in 0..h {
                for iw in 0..wd {
                    let grow = &grow_ch[(ih * wd + iw) * d..(ih * wd + iw) * d + d];
                    for kh in 0..k {
                        for kw in 0..k {
                            let base = ((ih + kh) * pw + iw + kw) * pd;
                            for kd in 0..k {
                                let wgt = wk[(kh * k + kw) * k + kd];
                                let trow = &mut gch[base + kd..base + kd + d];
                                for (tv, &gv) in trow.iter_mut().zip(grow) {
                                    *tv += wgt * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // fold replicate-padding gradients back onto the edge voxels
    let mut gx = vec![0.0; cin * h * wd * d];
    for ci in 0..cin {
        let gch = &gpad[ci * ch_padded..(ci + 1) * ch_padded];
        let dch = &mut gx[ci * hwd..(ci + 1) * hwd];
        for ih in 0..ph {
            let sh = ih.saturating_sub(pad).min(h - 1);
            for iw in 0..pw {
                let sw = iw.saturating_sub(pad).min(wd - 1);
                let srow = &gch[(ih * pw + iw) * pd..(ih * pw + iw) * pd + pd];
                let drow = &mut dch[(sh * wd + sw) * d..(sh * wd + sw) * d + d];
                for id in 0..pd {
                    drow[id.saturating_sub(pad).min(d - 1)] += srow[id];
                }
            }
        }
    }
    Tensor::from_vec(&[cin, h, wd, d], gx)
}

/// Gradients of the loss w.r.t. weights and bias.
pub fn conv3d_backward_weights(gout: &Tensor, x: &Tensor, k: usize) -> (Tensor, Tensor) {
    let [cout, h, wd, d] = dims4(gout);
    let cin = x.shape()[0];
    let pad = k / 2;
    let xp = pad_replicate_channels(x, pad);
    let (pw, pd) = (wd + 2 * pad, d + 2 * pad);
    let ch_padded = (h + 2 * pad) * pw * pd;
    let hwd = h * wd * d;
    let gdata = gout.data();
    let xdata = xp.data();
    let mut gw = vec![0.0; cout * cin * k * k * k];
    let mut gb = vec![0.0; cout];

    for co in 0..cout {
        let gch = &gdata[co * hwd..(co + 1) * hwd];
        gb[co] = gch.iter().sum();
        for ci in 0..cin {
            let xch = &xdata[ci * ch_padded..(ci + 1) * ch_padded];
            let wslot = &mut gw[(co * cin + ci) * k * k * k..(co * cin + ci + 1) * k * k * k];
            for ih in 0..h {
                for iw in 0..wd {
                    let grow = &gch[(ih * wd + iw) * d..(ih * wd + iw) * d + d];
                    for kh in 0..k {
                        for kw in 0..k {
                            let base = ((ih + kh) * pw + iw + kw) * pd;
                            for kd in 0..k {
                                let srow = &xch[base + kd..base + kd + d];
                                let mut acc = 0.0;
                                for (&gv, &sv) in grow.iter().zip(srow) {
                                    acc += gv * sv;
                                }
                                wslot[(kh * k + kw) * k + kd] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[cout, cin, k, k, k], gw),
        Tensor::from_vec(&[cout], gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    /// Naive reference: direct 7-loop convolution with clamped (replicate)
    /// indexing, no padding buffer.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let [cin, h, wd, d] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let cout = w.shape()[0];
        let k = w.shape()[2];
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, wd, d]);
        for co in 0..cout {
            for ih in 0..h {
                for iw in 0..wd {
                    for id in 0..d {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    for kd in 0..k {
                                        let sh = (ih as isize + kh as isize - pad).clamp(0, h as isize - 1) as usize;
                                        let sw = (iw as isize + kw as isize - pad).clamp(0, wd as isize - 1) as usize;
                                        let sd = (id as isize + kd as isize - pad).clamp(0, d as isize - 1) as usize;
                                        acc += x.at(&[ci, sh, sw, sd]) * w.at(&[co, ci, kh, kw, kd]);
                                    }
                                }
                            }
                        }
                        out.set(&[co, ih, iw, id], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = Rng::new(20);
        for &(cin, cout, s) in &[(1usize, 2usize, 4usize), (3, 2, 5), (2, 3, 3)] {
            let x = random(&mut rng, &[cin, s, s, s]);
            let w = random(&mut rng, &[cout, cin, 3, 3, 3]);
            let b = random(&mut rng, &[cout]);
            let fast = conv3d_forward(&x, &w, &b);
            let slow = conv_reference(&x, &w, &b);
            let max_err = fast
                .data()
                .iter()
                .zip(slow.data())
                .fold(0.0f64, |m, (&a, &o)| m.max((a - o).abs()));
            assert!(max_err < 1e-12, "cin={cin} cout={cout} s={s}: {max_err}");
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor::full(&[1, 6, 6, 6], 0.3);
        let mut rng = Rng::new(21);
        let w = random(&mut rng, &[2, 1, 3, 3, 3]);
        let b = random(&mut rng, &[2]);
        let out = conv3d_forward(&x, &w, &b);
        for co in 0..2 {
            let first = out.at(&[co, 0, 0, 0]);
            for &v in &out.data()[co * 216..(co + 1) * 216] {
                assert!((v - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        // conv is linear in x at fixed w (bias zero):
        // <gout, conv(x)> must equal <backward_input(gout), x>
        let mut rng = Rng::new(22);
        let (cin, cout, s) = (2usize, 3usize, 5usize);
        let x = random(&mut rng, &[cin, s, s, s]);
        let w = random(&mut rng, &[cout, cin, 3, 3, 3]);
        let b = Tensor::zeros(&[cout]);
        let gout = random(&mut rng, &[cout, s, s, s]);
        let lhs: f64 = conv3d_forward(&x, &w, &b)
            .data()
            .iter()
            .zip(gout.data())
            .map(|(&a, &g)| a * g)
            .sum();
        let gx = conv3d_backward_input(&gout, &[cin, s, s, s], &w);
        let rhs: f64 = gx.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn backward_weights_is_adjoint_in_w() {
        // conv is linear in (w, b) at fixed x:
        // <gout, conv(x; w, b)> = <gw, w> + <gb, b>
        let mut rng = Rng::new(23);
        let (cin, cout, s) = (2usize, 2usize, 4usize);
        let x = random(&mut rng, &[cin, s, s, s]);
        let w = random(&mut rng, &[cout, cin, 3, 3, 3]);
        let b = random(&mut rng, &[cout]);
        let gout = random(&mut rng, &[cout, s, s, s]);
        let lhs: f64 = conv3d_forward(&x, &w, &b)
            .data()
            .iter()
            .zip(gout.data())
            .map(|(&a, &g)| a * g)
            .sum();
        let (gw, gb) = conv3d_backward_weights(&gout, &x, 3);
        let rhs: f64 = gw.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum::<f64>()
            + gb.data().iter().zip(b.data()).map(|(&a, &b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
