//! Forward/backward kernels for the fixed op set: 3x3 same-padding convolution,
//! group normalization, SiLU, 2x average pooling, 2x nearest upsampling, dense
//! layers, and the sinusoidal timestep embedding.
//!
//! All kernels are plain slice loops over row-major `[C, H, W]` planes with the
//! inner loop contiguous in `x`.

pub const GN_EPS: f64 = 1e-5;

/// y[co] = bias[co] + sum_ci conv3x3(x[ci]), padding 1, stride 1.
///
/// One pass per kernel row: each output row accumulates the three horizontal
/// taps of one input row at a time, with the left/right columns peeled off.
pub fn conv3x3_forward(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    bias: &[f64],
    co: usize,
    y: &mut [f64],
) {
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(wgt.len(), co * ci * 9);
    debug_assert_eq!(y.len(), co * h * w);
    debug_assert!(w >= 2);
    for oc in 0..co {
        let yplane = &mut y[oc * h * w..(oc + 1) * h * w];
        yplane.fill(bias[oc]);
        for ic in 0..ci {
            let xplane = &x[ic * h * w..(ic + 1) * h * w];
            let wbase = (oc * ci + ic) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy.max(0)) as usize;
                let (w0, w1, w2) = (wgt[wbase + ky * 3], wgt[wbase + ky * 3 + 1], wgt[wbase + ky * 3 + 2]);
                for yy in y0..y1 {
                    let iy = (yy as isize + dy) as usize;
                    let src = &xplane[iy * w..(iy + 1) * w];
                    let dst = &mut yplane[yy * w..(yy + 1) * w];
                    dst[0] += w1 * src[0] + w2 * src[1];
                    for (((o, a), b), c) in dst[1..w - 1]
                        .iter_mut()
                        .zip(&src[..w - 2])
                        .zip(&src[1..w - 1])
                        .zip(&src[2..])
                    {
                        *o += w0 * *a + w1 * *b + w2 * *c;
                    }
                    dst[w - 1] += w0 * src[w - 2] + w1 * src[w - 1];
                }
            }
        }
    }
}

/// Gradients of `conv3x3_forward` for input, weights, and bias.
/// `dx`, `dw`, `db` are accumulated into (callers pass zeroed buffers).
pub fn conv3x3_backward(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    co: usize,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    debug_assert_eq!(dy.len(), co * h * w);
    debug_assert_eq!(dx.len(), ci * h * w);
    debug_assert_eq!(dw.len(), co * ci * 9);
    debug_assert_eq!(db.len(), co);
    debug_assert!(w >= 2);
    for oc in 0..co {
        let dyplane = &dy[oc * h * w..(oc + 1) * h * w];
        db[oc] += dyplane.iter().sum::<f64>();
        for ic in 0..ci {
            let xplane = &x[ic * h * w..(ic + 1) * h * w];
            let dxplane = &mut dx[ic * h * w..(ic + 1) * h * w];
            let wbase = (oc * ci + ic) * 9;
            for ky in 0..3 {
                let dyo = ky as isize - 1;
                let y0 = (-dyo).max(0) as usize;
                let y1 = (h as isize - dyo.max(0)) as usize;
                let (w0, w1, w2) = (wgt[wbase + ky * 3], wgt[wbase + ky * 3 + 1], wgt[wbase + ky * 3 + 2]);
                let (mut g0, mut g1, mut g2) = (0.0f64, 0.0f64, 0.0f64);
                for yy in y0..y1 {
                    let iy = (yy as isize + dyo) as usize;
                    let g = &dyplane[yy * w..(yy + 1) * w];
                    let src = &xplane[iy * w..(iy + 1) * w];
                    let dst = &mut dxplane[iy * w..(iy + 1) * w];
                    // Input-gradient: the transposed stencil gathers the
                    // three output taps that read each input column.
                    dst[0] += w0 * g[1] + w1 * g[0];
                    for (((o, a), b), c) in dst[1..w - 1]
                        .iter_mut()
                        .zip(&g[2..])
                        .zip(&g[1..w - 1])
                        .zip(&g[..w - 2])
                    {
                        *o += w0 * *a + w1 * *b + w2 * *c;
                    }
                    dst[w - 1] += w1 * g[w - 1] + w2 * g[w - 2];
                    // Weight gradients for the three horizontal taps.
                    let mut a0 = 0.0;
                    for (gv, sv) in g[1..].iter().zip(&src[..w - 1]) {
                        a0 += gv * sv;
                    }
                    let mut a1 = 0.0;
                    for (gv, sv) in g.iter().zip(src) {
                        a1 += gv * sv;
                    }
                    let mut a2 = 0.0;
                    for (gv, sv) in g[..w - 1].iter().zip(&src[1..]) {
                        a2 += gv * sv;
                    }
                    g0 += a0;
                    g1 += a1;
                    g2 += a2;
                }
                dw[wbase + ky * 3] += g0;
                dw[wbase + ky * 3 + 1] += g1;
                dw[wbase + ky * 3 + 2] += g2;
            }
        }
    }
}

/// Group normalization over `[C, H, W]` with per-channel affine.
/// Writes the normalized (pre-affine) values into `xhat` and the per-group
/// inverse standard deviations into `inv_std`.
pub fn groupnorm_forward(
    x: &[f64],
    c: usize,
    hw: usize,
    groups: usize,
    gain: &[f64],
    bias: &[f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
    y: &mut [f64],
) {
    debug_assert_eq!(c % groups, 0);
    let cg = c / groups;
    let m = (cg * hw) as f64;
    for g in 0..groups {
        let lo = g * cg * hw;
        let hi = lo + cg * hw;
        let slice = &x[lo..hi];
        let mean = slice.iter().sum::<f64>() / m;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let istd = 1.0 / (var + GN_EPS).sqrt();
        inv_std[g] = istd;
        for idx in lo..hi {
            xhat[idx] = (x[idx] - mean) * istd;
        }
        for ch in g * cg..(g + 1) * cg {
            let (gn, bs) = (gain[ch], bias[ch]);
            for i in ch * hw..(ch + 1) * hw {
                y[i] = gn * xhat[i] + bs;
            }
        }
    }
}

/// Backward of group normalization; accumulates `dgain`/`dbias`, writes `dx`.
pub fn groupnorm_backward(
    xhat: &[f64],
    c: usize,
    hw: usize,
    groups: usize,
    gain: &[f64],
    inv_std: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let cg = c / groups;
    let m = (cg * hw) as f64;
    for ch in 0..c {
        let mut dg = 0.0;
        let mut db = 0.0;
        for i in ch * hw..(ch + 1) * hw {
            dg += dy[i] * xhat[i];
            db += dy[i];
        }
        dgain[ch] += dg;
        dbias[ch] += db;
    }
    for g in 0..groups {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for ch in g * cg..(g + 1) * cg {
            let gn = gain[ch];
            for i in ch * hw..(ch + 1) * hw {
                let dxh = dy[i] * gn;
                s1 += dxh;
                s2 += dxh * xhat[i];
            }
        }
        let istd = inv_std[g];
        for ch in g * cg..(g + 1) * cg {
            let gn = gain[ch];
            for i in ch * hw..(ch + 1) * hw {
                let dxh = dy[i] * gn;
                dx[i] = istd * (dxh - (s1 + xhat[i] * s2) / m);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_forward(x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o = v * sigmoid(*v);
    }
}

/// dx = dy * sigma(x) * (1 + x * (1 - sigma(x)))
pub fn silu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((o, v), g) in dx.iter_mut().zip(x).zip(dy) {
        let s = sigmoid(*v);
        *o = g * s * (1.0 + v * (1.0 - s));
    }
}

/// 2x2 average pooling, stride 2.
pub fn avgpool2_forward(x: &[f64], c: usize, h: usize, w: usize, y: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let yp = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                yp[oy * ow + ox] = 0.25 * (xp[base] + xp[base + 1] + xp[base + w] + xp[base + w + 1]);
            }
        }
    }
}

pub fn avgpool2_backward(dy: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let gp = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * gp[oy * ow + ox];
                let base = 2 * oy * w + 2 * ox;
                dp[base] += g;
                dp[base + 1] += g;
                dp[base + w] += g;
                dp[base + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: &[f64], c: usize, h: usize, w: usize, y: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let yp = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let v = xp[iy * w + ix];
                let base = 2 * iy * ow + 2 * ix;
                yp[base] = v;
                yp[base + 1] = v;
                yp[base + ow] = v;
                yp[base + ow + 1] = v;
            }
        }
    }
}

pub fn upsample2_backward(dy: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    debug_assert_eq!(dy.len(), c * oh * ow);
    for ch in 0..c {
        let gp = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let base = 2 * iy * ow + 2 * ix;
                dp[iy * w + ix] += gp[base] + gp[base + 1] + gp[base + ow] + gp[base + ow + 1];
            }
        }
    }
}

/// y = W x + b with W of shape [out, in].
pub fn linear_forward(x: &[f64], wgt: &[f64], bias: &[f64], out: usize, y: &mut [f64]) {
    let n = x.len();
    for o in 0..out {
        let row = &wgt[o * n..(o + 1) * n];
        y[o] = bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn linear_backward(
    x: &[f64],
    wgt: &[f64],
    out: usize,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let n = x.len();
    for o in 0..out {
        let g = dy[o];
        db[o] += g;
        let wrow = &wgt[o * n..(o + 1) * n];
        let dwrow = &mut dw[o * n..(o + 1) * n];
        for i in 0..n {
            dwrow[i] += g * x[i];
            dx[i] += g * wrow[i];
        }
    }
}

/// Standard sinusoidal timestep embedding of even dimension `dim`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0 && dim >= 2);
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10000.0f64).ln() * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let arg = t as f64 * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}
