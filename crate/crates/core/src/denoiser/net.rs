use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::layers::*;
use super::params::{ConvBlockParams, DenoiserConfig, DenoiserParams};

/// Epsilon prediction plus the captured bottleneck activation and encoder
/// skip features (outermost level first).
///
/// For an injected forward pass `h` is still the activation the encoder
/// produced, not the replacement.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Tensor,
    pub h: Tensor,
    pub skips: Vec<Tensor>,
}

pub(crate) struct BlockTape {
    x_in: Tensor,
    xhat: Tensor,
    inv_std: Vec<f64>,
    act_in: Tensor,
}

pub(crate) struct Tape {
    emb_sin: Vec<f64>,
    emb_pre1: Vec<f64>,
    emb_mid: Vec<f64>,
    emb: Vec<f64>,
    enc: Vec<[BlockTape; 2]>,
    mid: [BlockTape; 2],
    dec: Vec<[BlockTape; 2]>,
    final_in: Tensor,
    injected: bool,
}

fn block_forward(
    bp: &ConvBlockParams,
    x: Tensor,
    side: usize,
    emb: &[f64],
    groups: usize,
) -> (Tensor, BlockTape) {
    let ci = x.shape()[0];
    let co = bp.conv_b.numel();
    let hw = side * side;
    debug_assert_eq!(x.numel(), ci * hw);
    let mut conv = Tensor::zeros(&[co, side, side]);
    conv3x3_forward(x.data(), ci, side, side, bp.conv_w.data(), bp.conv_b.data(), co, conv.data_mut());

    let mut xhat = Tensor::zeros(&[co, side, side]);
    let mut inv_std = vec![0.0; groups];
    let mut gn = Tensor::zeros(&[co, side, side]);
    groupnorm_forward(
        conv.data(),
        co,
        hw,
        groups,
        bp.gn_gain.data(),
        bp.gn_bias.data(),
        xhat.data_mut(),
        &mut inv_std,
        gn.data_mut(),
    );

    let mut proj = vec![0.0; co];
    linear_forward(emb, bp.emb_w.data(), bp.emb_b.data(), co, &mut proj);
    let mut act_in = gn;
    for c in 0..co {
        let p = proj[c];
        for v in &mut act_in.data_mut()[c * hw..(c + 1) * hw] {
            *v += p;
        }
    }

    let mut y = Tensor::zeros(&[co, side, side]);
    silu_forward(act_in.data(), y.data_mut());
    (y, BlockTape { x_in: x, xhat, inv_std, act_in })
}

fn block_backward(
    bp: &ConvBlockParams,
    tape: &BlockTape,
    emb: &[f64],
    dy: &Tensor,
    groups: usize,
    g: &mut ConvBlockParams,
    d_emb: &mut [f64],
) -> Tensor {
    let co = bp.conv_b.numel();
    let hw = tape.act_in.numel() / co;
    let ci = tape.x_in.shape()[0];
    let side = tape.x_in.shape()[1];

    let mut d_act = Tensor::zeros(tape.act_in.shape());
    silu_backward(tape.act_in.data(), dy.data(), d_act.data_mut());

    // Per-channel sums feed the timestep projection gradient.
    let mut sums = vec![0.0; co];
    for c in 0..co {
        sums[c] = d_act.data()[c * hw..(c + 1) * hw].iter().sum();
    }
    let mut d_emb_local = vec![0.0; emb.len()];
    linear_backward(
        emb,
        bp.emb_w.data(),
        co,
        &sums,
        &mut d_emb_local,
        g.emb_w.data_mut(),
        g.emb_b.data_mut(),
    );
    for (a, b) in d_emb.iter_mut().zip(&d_emb_local) {
        *a += b;
    }

    let mut d_conv = Tensor::zeros(tape.act_in.shape());
    groupnorm_backward(
        tape.xhat.data(),
        co,
        hw,
        groups,
        bp.gn_gain.data(),
        &tape.inv_std,
        d_act.data(),
        d_conv.data_mut(),
        g.gn_gain.data_mut(),
        g.gn_bias.data_mut(),
    );

    let mut dx = Tensor::zeros(&[ci, side, side]);
    conv3x3_backward(
        tape.x_in.data(),
        ci,
        side,
        side,
        bp.conv_w.data(),
        co,
        d_conv.data(),
        dx.data_mut(),
        g.conv_w.data_mut(),
        g.conv_b.data_mut(),
    );
    dx
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[0];
    let mut out = Tensor::zeros(&[ca + cb, h, w]);
    out.data_mut()[..ca * h * w].copy_from_slice(a.data());
    out.data_mut()[ca * h * w..].copy_from_slice(b.data());
    out
}

pub(crate) fn forward_with_tape(
    cfg: &DenoiserConfig,
    params: &DenoiserParams,
    x: &Tensor,
    t: usize,
    inject: Option<&Tensor>,
) -> Result<(DenoiserOutput, Tape)> {
    let expect = cfg.input_shape();
    if x.shape() != expect {
        return Err(Error::Contract(format!(
            "forward: input shape {:?}, expected {:?}",
            x.shape(),
            expect
        )));
    }
    if t < 1 {
        return Err(Error::Contract(format!("forward: timestep {t} must be >= 1")));
    }
    if let Some(hn) = inject {
        let want = cfg.bottleneck_shape();
        if hn.shape() != want {
            return Err(Error::Contract(format!(
                "forward_injected: bottleneck shape {:?}, expected {want:?}",
                hn.shape()
            )));
        }
    }

    let e = cfg.emb_dim;
    let emb_sin = timestep_embedding(t, e);
    let mut emb_pre1 = vec![0.0; e];
    linear_forward(&emb_sin, params.temb_w1.data(), params.temb_b1.data(), e, &mut emb_pre1);
    let mut emb_mid = vec![0.0; e];
    silu_forward(&emb_pre1, &mut emb_mid);
    let mut emb = vec![0.0; e];
    linear_forward(&emb_mid, params.temb_w2.data(), params.temb_b2.data(), e, &mut emb);

    let levels = cfg.levels();
    let mut cur = x.clone();
    let mut enc_tapes = Vec::with_capacity(levels);
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        let side = cfg.resolution >> l;
        let (y0, t0) = block_forward(&params.enc[l][0], cur, side, &emb, cfg.groups);
        let (y1, t1) = block_forward(&params.enc[l][1], y0, side, &emb, cfg.groups);
        let c = y1.shape()[0];
        let mut pooled = Tensor::zeros(&[c, side / 2, side / 2]);
        avgpool2_forward(y1.data(), c, side, side, pooled.data_mut());
        skips.push(y1);
        enc_tapes.push([t0, t1]);
        cur = pooled;
    }

    let bs = cfg.bottleneck_side();
    let (m0, mt0) = block_forward(&params.mid[0], cur, bs, &emb, cfg.groups);
    let (m1, mt1) = block_forward(&params.mid[1], m0, bs, &emb, cfg.groups);
    let h = m1.clone();
    cur = match inject {
        Some(hn) => hn.clone(),
        None => m1,
    };

    let mut dec_tapes: Vec<Option<[BlockTape; 2]>> = (0..levels).map(|_| None).collect();
    for l in (0..levels).rev() {
        let side = cfg.resolution >> l;
        let c = cur.shape()[0];
        let mut up = Tensor::zeros(&[c, side, side]);
        upsample2_forward(cur.data(), c, side / 2, side / 2, up.data_mut());
        let cat = concat_channels(&up, &skips[l]);
        let (y0, t0) = block_forward(&params.dec[l][0], cat, side, &emb, cfg.groups);
        let (y1, t1) = block_forward(&params.dec[l][1], y0, side, &emb, cfg.groups);
        dec_tapes[l] = Some([t0, t1]);
        cur = y1;
    }

    let res = cfg.resolution;
    let mut eps = Tensor::zeros(&[cfg.in_channels, res, res]);
    conv3x3_forward(
        cur.data(),
        cfg.widths[0],
        res,
        res,
        params.out_w.data(),
        params.out_b.data(),
        cfg.in_channels,
        eps.data_mut(),
    );

    let tape = Tape {
        emb_sin,
        emb_pre1,
        emb_mid,
        emb,
        enc: enc_tapes,
        mid: [mt0, mt1],
        dec: dec_tapes.into_iter().map(|t| t.unwrap()).collect(),
        final_in: cur,
        injected: inject.is_some(),
    };
    Ok((DenoiserOutput { eps, h, skips }, tape))
}

/// Reverse-mode gradients of `mean((eps - target)^2)`-style losses: the caller
/// supplies `d_eps = dL/d_eps` and receives gradients in a parameter-shaped
/// container. Only valid for non-injected forward passes.
pub(crate) fn backward(
    cfg: &DenoiserConfig,
    params: &DenoiserParams,
    tape: &Tape,
    d_eps: &Tensor,
) -> DenoiserParams {
    assert!(!tape.injected, "backward is defined for the training (non-injected) path");
    let mut g = DenoiserParams::zeros(cfg);
    let e = cfg.emb_dim;
    let mut d_emb = vec![0.0; e];
    let levels = cfg.levels();
    let res = cfg.resolution;

    // Output conv.
    let mut d_final = Tensor::zeros(tape.final_in.shape());
    conv3x3_backward(
        tape.final_in.data(),
        cfg.widths[0],
        res,
        res,
        params.out_w.data(),
        cfg.in_channels,
        d_eps.data(),
        d_final.data_mut(),
        g.out_w.data_mut(),
        g.out_b.data_mut(),
    );

    // Decoder levels, outermost first (reverse of execution).
    let mut dcur = d_final;
    let mut d_skips: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    for l in 0..levels {
        let side = cfg.resolution >> l;
        let d1 = block_backward(&params.dec[l][1], &tape.dec[l][1], &tape.emb, &dcur, cfg.groups, &mut g.dec[l][1], &mut d_emb);
        let d_cat = block_backward(&params.dec[l][0], &tape.dec[l][0], &tape.emb, &d1, cfg.groups, &mut g.dec[l][0], &mut d_emb);
        let c_above = if l + 1 == levels { cfg.bottleneck_channels } else { cfg.widths[l + 1] };
        let c_skip = cfg.widths[l];
        let hw = side * side;
        let mut d_up = Tensor::zeros(&[c_above, side, side]);
        d_up.data_mut().copy_from_slice(&d_cat.data()[..c_above * hw]);
        let mut d_skip = Tensor::zeros(&[c_skip, side, side]);
        d_skip.data_mut().copy_from_slice(&d_cat.data()[c_above * hw..]);
        d_skips[l] = Some(d_skip);
        let mut d_below = Tensor::zeros(&[c_above, side / 2, side / 2]);
        upsample2_backward(d_up.data(), c_above, side / 2, side / 2, d_below.data_mut());
        dcur = d_below;
    }

    // Bottleneck.
    let d_m1 = block_backward(&params.mid[1], &tape.mid[1], &tape.emb, &dcur, cfg.groups, &mut g.mid[1], &mut d_emb);
    let d_m0 = block_backward(&params.mid[0], &tape.mid[0], &tape.emb, &d_m1, cfg.groups, &mut g.mid[0], &mut d_emb);

    // Encoder levels, innermost first.
    let mut d_pooled = d_m0;
    for l in (0..levels).rev() {
        let side = cfg.resolution >> l;
        let c = cfg.widths[l];
        let mut d_y1 = d_skips[l].take().unwrap();
        avgpool2_backward(d_pooled.data(), c, side, side, d_y1.data_mut());
        let d_b1 = block_backward(&params.enc[l][1], &tape.enc[l][1], &tape.emb, &d_y1, cfg.groups, &mut g.enc[l][1], &mut d_emb);
        d_pooled = block_backward(&params.enc[l][0], &tape.enc[l][0], &tape.emb, &d_b1, cfg.groups, &mut g.enc[l][0], &mut d_emb);
    }

    // Timestep embedding MLP.
    let mut d_mid_e = vec![0.0; e];
    linear_backward(
        &tape.emb_mid,
        params.temb_w2.data(),
        e,
        &d_emb,
        &mut d_mid_e,
        g.temb_w2.data_mut(),
        g.temb_b2.data_mut(),
    );
    let mut d_pre1 = vec![0.0; e];
    silu_backward(&tape.emb_pre1, &d_mid_e, &mut d_pre1);
    let mut d_sin = vec![0.0; e];
    linear_backward(
        &tape.emb_sin,
        params.temb_w1.data(),
        e,
        &d_pre1,
        &mut d_sin,
        g.temb_w1.data_mut(),
        g.temb_b1.data_mut(),
    );

    g
}
