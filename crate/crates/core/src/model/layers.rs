//! Layer kernels with exact backward passes.
//!
//! Every kernel is a pure function from inputs and parameters to outputs
//! plus whatever cache its backward needs; nothing hides state. Long
//! reductions (batch statistics, weight-gradient sums) accumulate per-row
//! partial sums in the working precision, then combine rows in f64, so f32
//! training does not lose gradients to cancellation.

#![allow(clippy::type_complexity)]

use rand::Rng;

use super::{ModelError, Tensor};
use crate::Real;

pub const BN_EPSILON: f64 = 1e-5;

fn dims4<F: Real>(t: &Tensor<F>, what: &str) -> Result<(usize, usize, usize, usize), ModelError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(ModelError::ShapeMismatch {
            context: format!("{what} must be rank 4, got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn dims3<F: Real>(t: &Tensor<F>, what: &str) -> Result<(usize, usize, usize), ModelError> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(ModelError::ShapeMismatch {
            context: format!("{what} must be rank 3, got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2]))
}

fn dot<F: Real>(a: &[F], b: &[F]) -> f64 {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc.to_f()
}

/// 3x3 convolution, stride 1, zero padding 1 (same-size output).
pub fn conv3x3_forward<F: Real>(
    input: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>, ModelError> {
    let (n, ci, h, wd) = dims4(input, "conv input")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != ci || ws[2] != 3 || ws[3] != 3 || b.shape() != [ws[0]] {
        return Err(ModelError::ShapeMismatch {
            context: format!(
                "conv weights {ws:?} / bias {:?} do not fit input {:?}",
                b.shape(),
                input.shape()
            ),
        });
    }
    let co = ws[0];
    let mut out = Tensor::zeros(&[n, co, h, wd]);
    let plane = h * wd;
    let xs = input.data();
    let wsd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for c_out in 0..co {
            let out_plane = &mut od[(ni * co + c_out) * plane..(ni * co + c_out + 1) * plane];
            let bias = b.data()[c_out];
            for v in out_plane.iter_mut() {
                *v = bias;
            }
            for c_in in 0..ci {
                let in_plane = &xs[(ni * ci + c_in) * plane..(ni * ci + c_in + 1) * plane];
                let wk = &wsd[(c_out * ci + c_in) * 9..(c_out * ci + c_in + 1) * 9];
                for ky in 0..3usize {
                    let ylo = usize::from(ky == 0);
                    let yhi = h - usize::from(ky == 2);
                    for kx in 0..3usize {
                        let weight = wk[ky * 3 + kx];
                        if weight == F::zero() {
                            continue;
                        }
                        let xlo = usize::from(kx == 0);
                        let xhi = wd - usize::from(kx == 2);
                        if xhi <= xlo || yhi <= ylo {
                            continue;
                        }
                        for y in ylo..yhi {
                            let yin = y + ky - 1;
                            let orow = &mut out_plane[y * wd + xlo..y * wd + xhi];
                            let irow = &in_plane[yin * wd + xlo + kx - 1..yin * wd + xhi + kx - 1];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += weight * *i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the 3x3 convolution: input, kernel, and bias.
pub fn conv3x3_backward<F: Real>(
    input: &Tensor<F>,
    w: &Tensor<F>,
    d_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), ModelError> {
    let (n, ci, h, wd) = dims4(input, "conv input")?;
    let co = w.shape()[0];
    if d_out.shape() != [n, co, h, wd] {
        return Err(ModelError::ShapeMismatch {
            context: format!(
                "conv upstream gradient {:?} does not match output shape",
                d_out.shape()
            ),
        });
    }
    let plane = h * wd;
    let mut d_in = Tensor::zeros(&[n, ci, h, wd]);
    let mut d_w64 = vec![0.0f64; w.numel()];
    let mut d_b64 = vec![0.0f64; co];
    let xs = input.data();
    let wsd = w.data();
    let gd = d_out.data();
    let did = d_in.data_mut();
    for ni in 0..n {
        for c_out in 0..co {
            let g_plane = &gd[(ni * co + c_out) * plane..(ni * co + c_out + 1) * plane];
            let mut bias_acc = F::zero();
            for &g in g_plane {
                bias_acc += g;
            }
            d_b64[c_out] += bias_acc.to_f();
            for c_in in 0..ci {
                let in_plane = &xs[(ni * ci + c_in) * plane..(ni * ci + c_in + 1) * plane];
                let di_plane = &mut did[(ni * ci + c_in) * plane..(ni * ci + c_in + 1) * plane];
                let wk = &wsd[(c_out * ci + c_in) * 9..(c_out * ci + c_in + 1) * 9];
                let dk = &mut d_w64[(c_out * ci + c_in) * 9..(c_out * ci + c_in + 1) * 9];
                for ky in 0..3usize {
                    let ylo = usize::from(ky == 0);
                    let yhi = h - usize::from(ky == 2);
                    for kx in 0..3usize {
                        let xlo = usize::from(kx == 0);
                        let xhi = wd - usize::from(kx == 2);
                        if xhi <= xlo || yhi <= ylo {
                            continue;
                        }
                        let weight = wk[ky * 3 + kx];
                        let mut tap = 0.0f64;
                        for y in ylo..yhi {
                            let yin = y + ky - 1;
                            let grow = &g_plane[y * wd + xlo..y * wd + xhi];
                            let irow = &in_plane[yin * wd + xlo + kx - 1..yin * wd + xhi + kx - 1];
                            tap += dot(grow, irow);
                            let drow =
                                &mut di_plane[yin * wd + xlo + kx - 1..yin * wd + xhi + kx - 1];
                            for (d, g) in drow.iter_mut().zip(grow) {
                                *d += weight * *g;
                            }
                        }
                        dk[ky * 3 + kx] += tap;
                    }
                }
            }
        }
    }
    let d_w = Tensor::from_f64(w.shape(), &d_w64);
    let d_b = Tensor::from_f64(&[co], &d_b64);
    Ok((d_in, d_w, d_b))
}

/// Per-channel batch statistics kept by the train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Train-mode batch norm: normalizes with the batch's own statistics.
/// Returns the output, the normalized activations, and the statistics.
pub fn batchnorm_forward_train<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, BnCache), ModelError> {
    let (n, c, h, w) = dims4(x, "batch norm input")?;
    check_channel_params(c, gamma, beta)?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let xs = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let p = &xs[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            let mut row = F::zero();
            for &v in p {
                row += v;
            }
            acc += row.to_f();
        }
        let mu = acc / m;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let p = &xs[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            for &v in p {
                let d = v.to_f() - mu;
                sq += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = sq / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

    let mut xhat = Tensor::zeros(&[n, c, h, w]);
    let mut y = Tensor::zeros(&[n, c, h, w]);
    {
        let xh = xhat.data_mut();
        let yd = y.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mu = F::from_f(mean[ci]);
                let istd = F::from_f(inv_std[ci]);
                let g = gamma.data()[ci];
                let b = beta.data()[ci];
                for i in base..base + plane {
                    let xn = (xs[i] - mu) * istd;
                    xh[i] = xn;
                    yd[i] = g * xn + b;
                }
            }
        }
    }
    Ok((y, xhat, BnCache { mean, var, inv_std }))
}

/// Eval-mode batch norm: normalizes with stored running statistics.
pub fn batchnorm_forward_eval<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &Tensor<F>,
    running_var: &Tensor<F>,
) -> Result<Tensor<F>, ModelError> {
    let (n, c, h, w) = dims4(x, "batch norm input")?;
    check_channel_params(c, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(ModelError::ShapeMismatch {
            context: "running statistics do not match channel count".to_string(),
        });
    }
    let plane = h * w;
    let xs = x.data();
    let mut y = Tensor::zeros(&[n, c, h, w]);
    let yd = y.data_mut();
    for ci in 0..c {
        let istd = F::from_f(1.0 / (running_var.data()[ci].to_f() + BN_EPSILON).sqrt());
        let mu = running_mean.data()[ci];
        let g = gamma.data()[ci];
        let b = beta.data()[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                yd[i] = g * (xs[i] - mu) * istd + b;
            }
        }
    }
    Ok(y)
}

/// Train-mode batch norm backward from the cached normalized activations.
pub fn batchnorm_backward<F: Real>(
    d_out: &Tensor<F>,
    xhat: &Tensor<F>,
    gamma: &Tensor<F>,
    cache: &BnCache,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), ModelError> {
    let (n, c, h, w) = dims4(d_out, "batch norm gradient")?;
    if xhat.shape() != d_out.shape() {
        return Err(ModelError::ShapeMismatch {
            context: "batch norm cache does not match gradient shape".to_string(),
        });
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let gd = d_out.data();
    let xh = xhat.data();
    let mut d_gamma = vec![0.0f64; c];
    let mut d_beta = vec![0.0f64; c];
    for ci in 0..c {
        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            let g = &gd[base..base + plane];
            let x = &xh[base..base + plane];
            let mut row1 = F::zero();
            for &v in g {
                row1 += v;
            }
            s1 += row1.to_f();
            s2 += dot(g, x);
        }
        d_beta[ci] = s1;
        d_gamma[ci] = s2;
    }
    let mut d_x = Tensor::zeros(d_out.shape());
    let dxd = d_x.data_mut();
    for ci in 0..c {
        let scale = F::from_f(gamma.data()[ci].to_f() * cache.inv_std[ci]);
        let k1 = F::from_f(d_beta[ci] / m);
        let k2 = F::from_f(d_gamma[ci] / m);
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                dxd[i] = scale * (gd[i] - k1 - xh[i] * k2);
            }
        }
    }
    Ok((
        d_x,
        Tensor::from_f64(&[c], &d_gamma),
        Tensor::from_f64(&[c], &d_beta),
    ))
}

fn check_channel_params<F: Real>(
    c: usize,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<(), ModelError> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(ModelError::ShapeMismatch {
            context: format!(
                "batch norm parameters {:?}/{:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    Ok(())
}

/// In-place ReLU; the returned mask marks the entries that stayed positive.
pub fn relu_forward<F: Real>(x: &mut Tensor<F>) -> Vec<bool> {
    x.data_mut()
        .iter_mut()
        .map(|v| {
            if *v > F::zero() {
                true
            } else {
                *v = F::zero();
                false
            }
        })
        .collect()
}

pub fn relu_backward<F: Real>(d: &mut Tensor<F>, mask: &[bool]) {
    for (v, &keep) in d.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = F::zero();
        }
    }
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avgpool2_forward<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
    let (n, c, h, w) = dims4(x, "pool input")?;
    let ho = h / 2;
    let wo = w / 2;
    if ho == 0 || wo == 0 {
        return Err(ModelError::ShapeMismatch {
            context: format!("input {h}x{w} too small for 2x2 pooling"),
        });
    }
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let quarter = F::from_f(0.25);
    let xs = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let ip = &xs[nc * h * w..(nc + 1) * h * w];
        let op = &mut od[nc * ho * wo..(nc + 1) * ho * wo];
        for yo in 0..ho {
            let r0 = &ip[(2 * yo) * w..(2 * yo) * w + w];
            let r1 = &ip[(2 * yo + 1) * w..(2 * yo + 1) * w + w];
            let orow = &mut op[yo * wo..(yo + 1) * wo];
            for (xo, o) in orow.iter_mut().enumerate() {
                *o = (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2_backward<F: Real>(
    d_out: &Tensor<F>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<F>, ModelError> {
    let (n, c, ho, wo) = dims4(d_out, "pool gradient")?;
    if ho != in_h / 2 || wo != in_w / 2 {
        return Err(ModelError::ShapeMismatch {
            context: format!("pool gradient {ho}x{wo} does not match input {in_h}x{in_w}"),
        });
    }
    let mut d_in = Tensor::zeros(&[n, c, in_h, in_w]);
    let quarter = F::from_f(0.25);
    let gd = d_out.data();
    let did = d_in.data_mut();
    for nc in 0..n * c {
        let gp = &gd[nc * ho * wo..(nc + 1) * ho * wo];
        let dp = &mut did[nc * in_h * in_w..(nc + 1) * in_h * in_w];
        for yo in 0..ho {
            for xo in 0..wo {
                let g = gp[yo * wo + xo] * quarter;
                dp[(2 * yo) * in_w + 2 * xo] = g;
                dp[(2 * yo) * in_w + 2 * xo + 1] = g;
                dp[(2 * yo + 1) * in_w + 2 * xo] = g;
                dp[(2 * yo + 1) * in_w + 2 * xo + 1] = g;
            }
        }
    }
    Ok(d_in)
}

/// Collapses the frequency axis: mean plus max over mel rows, per frame.
/// Returns the reduced features and the (first) argmax row per cell.
pub fn freq_reduce_forward<F: Real>(
    x: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<usize>), ModelError> {
    let (n, c, h, w) = dims4(x, "reduce input")?;
    let mut out = Tensor::zeros(&[n, c, w]);
    let mut argmax = vec![0usize; n * c * w];
    let inv_h = F::from_f(1.0 / h as f64);
    let xs = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let ip = &xs[nc * h * w..(nc + 1) * h * w];
        let orow = &mut od[nc * w..(nc + 1) * w];
        let arow = &mut argmax[nc * w..(nc + 1) * w];
        for t in 0..w {
            let mut sum = F::zero();
            let mut best = ip[t];
            let mut best_h = 0usize;
            for hh in 0..h {
                let v = ip[hh * w + t];
                sum += v;
                if v > best {
                    best = v;
                    best_h = hh;
                }
            }
            orow[t] = sum * inv_h + best;
            arow[t] = best_h;
        }
    }
    Ok((out, argmax))
}

pub fn freq_reduce_backward<F: Real>(
    d_f: &Tensor<F>,
    argmax: &[usize],
    h: usize,
) -> Result<Tensor<F>, ModelError> {
    let (n, c, w) = dims3(d_f, "reduce gradient")?;
    if argmax.len() != n * c * w {
        return Err(ModelError::ShapeMismatch {
            context: "frequency-reduce cache does not match gradient".to_string(),
        });
    }
    let mut d_in = Tensor::zeros(&[n, c, h, w]);
    let inv_h = F::from_f(1.0 / h as f64);
    let gd = d_f.data();
    let did = d_in.data_mut();
    for nc in 0..n * c {
        let grow = &gd[nc * w..(nc + 1) * w];
        let arow = &argmax[nc * w..(nc + 1) * w];
        let dp = &mut did[nc * h * w..(nc + 1) * h * w];
        for t in 0..w {
            let g = grow[t];
            let gm = g * inv_h;
            for hh in 0..h {
                dp[hh * w + t] = gm;
            }
            dp[arow[t] * w + t] += g;
        }
    }
    Ok(d_in)
}

/// Inverted dropout, in place. Draws one uniform per element in data order.
pub fn dropout_forward<F: Real, R: Rng>(x: &mut Tensor<F>, rate: f64, rng: &mut R) -> Vec<bool> {
    let keep = 1.0 - rate;
    let scale = F::from_f(1.0 / keep);
    x.data_mut()
        .iter_mut()
        .map(|v| {
            if rng.random::<f64>() < keep {
                *v *= scale;
                true
            } else {
                *v = F::zero();
                false
            }
        })
        .collect()
}

pub fn dropout_backward<F: Real>(d: &mut Tensor<F>, mask: &[bool], rate: f64) {
    let scale = F::from_f(1.0 / (1.0 - rate));
    for (v, &keep) in d.data_mut().iter_mut().zip(mask) {
        if keep {
            *v *= scale;
        } else {
            *v = F::zero();
        }
    }
}

/// SED head: per-frame class and attention logits from shared features,
/// tempered softmax attention over time, sigmoid segment probabilities, and
/// attention-pooled clip probabilities.
///
/// Returns `(segmentwise, attention, clipwise)`.
#[allow(clippy::too_many_arguments)]
pub fn head_forward<F: Real>(
    f: &Tensor<F>,
    class_w: &Tensor<F>,
    class_b: &Tensor<F>,
    att_w: &Tensor<F>,
    att_b: &Tensor<F>,
    temperature: f64,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), ModelError> {
    let (n, c, t) = dims3(f, "head input")?;
    let k = class_w.shape().first().copied().unwrap_or(0);
    for (name, w_, b_) in [("class", class_w, class_b), ("attention", att_w, att_b)] {
        if w_.shape() != [k, c] || b_.shape() != [k] {
            return Err(ModelError::ShapeMismatch {
                context: format!("{name} head parameters do not match {k} classes x {c} features"),
            });
        }
    }
    let mut seg = Tensor::zeros(&[n, k, t]);
    let mut att = Tensor::zeros(&[n, k, t]);
    let mut clip = Tensor::zeros(&[n, k]);
    let fd = f.data();
    let mut logits = vec![0.0f64; t];
    let mut alogits = vec![0.0f64; t];
    for ni in 0..n {
        let fplane = &fd[ni * c * t..(ni + 1) * c * t];
        for ki in 0..k {
            logits.iter_mut().for_each(|v| *v = class_b.data()[ki].to_f());
            alogits.iter_mut().for_each(|v| *v = att_b.data()[ki].to_f());
            for ci in 0..c {
                let cw = class_w.data()[ki * c + ci].to_f();
                let aw = att_w.data()[ki * c + ci].to_f();
                let frow = &fplane[ci * t..(ci + 1) * t];
                for ((lc, la), &fv) in logits.iter_mut().zip(alogits.iter_mut()).zip(frow) {
                    let fv = fv.to_f();
                    *lc += cw * fv;
                    *la += aw * fv;
                }
            }
            let srow = &mut seg.data_mut()[(ni * k + ki) * t..(ni * k + ki + 1) * t];
            for (s, &l) in srow.iter_mut().zip(logits.iter()) {
                *s = F::from_f(1.0 / (1.0 + (-l).exp()));
            }
            let mut m = f64::NEG_INFINITY;
            for la in alogits.iter_mut() {
                *la /= temperature;
                m = m.max(*la);
            }
            let mut denom = 0.0f64;
            for la in alogits.iter_mut() {
                *la = (*la - m).exp();
                denom += *la;
            }
            let arow = &mut att.data_mut()[(ni * k + ki) * t..(ni * k + ki + 1) * t];
            let mut pooled = 0.0f64;
            for ((a, &e), s) in arow.iter_mut().zip(alogits.iter()).zip(srow.iter()) {
                let w = e / denom;
                *a = F::from_f(w);
                pooled += w * s.to_f();
            }
            clip.data_mut()[ni * k + ki] = F::from_f(pooled);
        }
    }
    Ok((seg, att, clip))
}

/// Head backward from the clip-probability gradient.
///
/// Returns the feature gradient plus the four parameter gradients
/// `(d_features, d_class_w, d_class_b, d_att_w, d_att_b)`.
#[allow(clippy::too_many_arguments)]
pub fn head_backward<F: Real>(
    d_clip: &Tensor<F>,
    f: &Tensor<F>,
    class_w: &Tensor<F>,
    att_w: &Tensor<F>,
    seg: &Tensor<F>,
    att: &Tensor<F>,
    clip: &Tensor<F>,
    temperature: f64,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>), ModelError> {
    let (n, c, t) = dims3(f, "head input")?;
    let k = class_w.shape()[0];
    if d_clip.shape() != [n, k] || seg.shape() != [n, k, t] || att.shape() != [n, k, t] {
        return Err(ModelError::ShapeMismatch {
            context: "head backward shapes are inconsistent".to_string(),
        });
    }
    let mut d_f = Tensor::zeros(&[n, c, t]);
    let mut d_cw = vec![0.0f64; k * c];
    let mut d_cb = vec![0.0f64; k];
    let mut d_aw = vec![0.0f64; k * c];
    let mut d_ab = vec![0.0f64; k];
    let fd = f.data();
    let mut dc = vec![0.0f64; t];
    let mut da = vec![0.0f64; t];
    for ni in 0..n {
        let fplane = &fd[ni * c * t..(ni + 1) * c * t];
        for ki in 0..k {
            let dp = d_clip.data()[ni * k + ki].to_f();
            if dp == 0.0 {
                continue;
            }
            let p = clip.data()[ni * k + ki].to_f();
            let srow = &seg.data()[(ni * k + ki) * t..(ni * k + ki + 1) * t];
            let arow = &att.data()[(ni * k + ki) * t..(ni * k + ki + 1) * t];
            let mut sc = 0.0f64;
            let mut sa = 0.0f64;
            for ti in 0..t {
                let s = srow[ti].to_f();
                let a = arow[ti].to_f();
                let common = dp * a;
                dc[ti] = common * s * (1.0 - s);
                da[ti] = common * (s - p) / temperature;
                sc += dc[ti];
                sa += da[ti];
            }
            d_cb[ki] += sc;
            d_ab[ki] += sa;
            for ci in 0..c {
                let frow = &fplane[ci * t..(ci + 1) * t];
                let mut accc = 0.0f64;
                let mut acca = 0.0f64;
                for ti in 0..t {
                    let fv = frow[ti].to_f();
                    accc += dc[ti] * fv;
                    acca += da[ti] * fv;
                }
                d_cw[ki * c + ci] += accc;
                d_aw[ki * c + ci] += acca;
                let cw = class_w.data()[ki * c + ci].to_f();
                let aw = att_w.data()[ki * c + ci].to_f();
                let drow = &mut d_f.data_mut()[ni * c * t + ci * t..ni * c * t + (ci + 1) * t];
                for (dv, (&dcv, &dav)) in drow.iter_mut().zip(dc.iter().zip(da.iter())) {
                    *dv += F::from_f(cw * dcv + aw * dav);
                }
            }
        }
    }
    Ok((
        d_f,
        Tensor::from_f64(class_w.shape(), &d_cw),
        Tensor::from_f64(&[k], &d_cb),
        Tensor::from_f64(att_w.shape(), &d_aw),
        Tensor::from_f64(&[k], &d_ab),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check::{finite_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Loss used by the gradient checks: inner product with a fixed
    /// projection, whose gradient is the projection itself.
    fn proj_loss(out: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
        out.data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn conv_matches_a_hand_example() {
        // 1x1x2x2 input, identity-center kernel: output equals input.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], kernel).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = conv3x3_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5]);

        // Shifted kernel reads the neighbour to the right; border is zero.
        let mut kernel = vec![0.0; 9];
        kernel[5] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], kernel).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = conv3x3_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = rand_tensor(&[2, 2, 5, 6], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let proj = rand_tensor(&[2, 3, 5, 6], &mut rng);

        let (d_in, d_w, d_b) = conv3x3_backward(&x, &w, &proj).unwrap();

        let num_w = finite_difference(w.data(), 1e-5, |wd| {
            let w2 = Tensor::from_vec(w.shape(), wd.to_vec()).unwrap();
            proj_loss(&conv3x3_forward(&x, &w2, &b).unwrap(), &proj)
        });
        assert!(max_relative_error(d_w.data(), &num_w, 1e-8) < 1e-6);

        let num_x = finite_difference(x.data(), 1e-5, |xd| {
            let x2 = Tensor::from_vec(x.shape(), xd.to_vec()).unwrap();
            proj_loss(&conv3x3_forward(&x2, &w, &b).unwrap(), &proj)
        });
        assert!(max_relative_error(d_in.data(), &num_x, 1e-8) < 1e-6);

        let num_b = finite_difference(b.data(), 1e-5, |bd| {
            let b2 = Tensor::from_vec(b.shape(), bd.to_vec()).unwrap();
            proj_loss(&conv3x3_forward(&x, &w, &b2).unwrap(), &proj)
        });
        assert!(max_relative_error(d_b.data(), &num_b, 1e-8) < 1e-6);
    }

    #[test]
    fn batchnorm_normalizes_and_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[3, 2, 4, 5], &mut rng);
        let gamma = Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.2, -0.1]).unwrap();
        let (_, xhat, cache) = batchnorm_forward_train(&x, &gamma, &beta).unwrap();

        // Normalized activations have zero mean, unit variance per channel.
        let (n, c, h, w) = (3usize, 2usize, 4usize, 5usize);
        for ci in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                vals.extend_from_slice(&xhat.data()[base..base + h * w]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-4);
        }

        let proj = rand_tensor(&[3, 2, 4, 5], &mut rng);
        let (d_x, d_gamma, d_beta) = batchnorm_backward(&proj, &xhat, &gamma, &cache).unwrap();

        let num_x = finite_difference(x.data(), 1e-5, |xd| {
            let x2 = Tensor::from_vec(x.shape(), xd.to_vec()).unwrap();
            let (y, _, _) = batchnorm_forward_train(&x2, &gamma, &beta).unwrap();
            proj_loss(&y, &proj)
        });
        assert!(max_relative_error(d_x.data(), &num_x, 1e-7) < 1e-5);

        let num_g = finite_difference(gamma.data(), 1e-5, |gd| {
            let g2 = Tensor::from_vec(&[2], gd.to_vec()).unwrap();
            let (y, _, _) = batchnorm_forward_train(&x, &g2, &beta).unwrap();
            proj_loss(&y, &proj)
        });
        assert!(max_relative_error(d_gamma.data(), &num_g, 1e-7) < 1e-6);

        let num_b = finite_difference(beta.data(), 1e-5, |bd| {
            let b2 = Tensor::from_vec(&[2], bd.to_vec()).unwrap();
            let (y, _, _) = batchnorm_forward_train(&x, &gamma, &b2).unwrap();
            proj_loss(&y, &proj)
        });
        assert!(max_relative_error(d_beta.data(), &num_b, 1e-7) < 1e-6);
    }

    #[test]
    fn pooling_and_reduction_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[2, 3, 5, 7], &mut rng);
        let proj = rand_tensor(&[2, 3, 2, 3], &mut rng);
        let d_in = avgpool2_backward(&proj, 5, 7).unwrap();
        let num = finite_difference(x.data(), 1e-5, |xd| {
            let x2 = Tensor::from_vec(x.shape(), xd.to_vec()).unwrap();
            proj_loss(&avgpool2_forward(&x2).unwrap(), &proj)
        });
        assert!(max_relative_error(d_in.data(), &num, 1e-9) < 1e-6);

        // Frequency reduction: keep values separated so the argmax never
        // switches inside the finite-difference step.
        let x = rand_tensor(&[2, 2, 4, 6], &mut rng);
        let proj = rand_tensor(&[2, 2, 6], &mut rng);
        let (_, argmax) = freq_reduce_forward(&x).unwrap();
        let d_in = freq_reduce_backward(&proj, &argmax, 4).unwrap();
        let num = finite_difference(x.data(), 1e-6, |xd| {
            let x2 = Tensor::from_vec(x.shape(), xd.to_vec()).unwrap();
            let (f, _) = freq_reduce_forward(&x2).unwrap();
            proj_loss(&f, &proj)
        });
        assert!(max_relative_error(d_in.data(), &num, 1e-8) < 1e-5);
    }

    #[test]
    fn head_pools_with_attention_and_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, c, t, k) = (2usize, 3usize, 5usize, 4usize);
        let f = rand_tensor(&[n, c, t], &mut rng);
        let cw = rand_tensor(&[k, c], &mut rng);
        let cb = rand_tensor(&[k], &mut rng);
        let aw = rand_tensor(&[k, c], &mut rng);
        let ab = rand_tensor(&[k], &mut rng);
        let tau = 1.5;

        let (seg, att, clip) = head_forward(&f, &cw, &cb, &aw, &ab, tau).unwrap();
        // Attention rows are a distribution; clip is their pooling of seg.
        for ni in 0..n {
            for ki in 0..k {
                let arow = &att.data()[(ni * k + ki) * t..(ni * k + ki + 1) * t];
                let srow = &seg.data()[(ni * k + ki) * t..(ni * k + ki + 1) * t];
                let sum: f64 = arow.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                let pooled: f64 = arow.iter().zip(srow).map(|(a, s)| a * s).sum();
                assert!((pooled - clip.data()[ni * k + ki]).abs() < 1e-12);
            }
        }

        let proj = rand_tensor(&[n, k], &mut rng);
        let (d_f, d_cw, d_cb, d_aw, d_ab) =
            head_backward(&proj, &f, &cw, &aw, &seg, &att, &clip, tau).unwrap();
        let loss = |fv: &Tensor<f64>, cwv: &Tensor<f64>, cbv: &Tensor<f64>, awv: &Tensor<f64>, abv: &Tensor<f64>| {
            let (_, _, clip) = head_forward(fv, cwv, cbv, awv, abv, tau).unwrap();
            proj_loss(&clip, &proj)
        };
        let pairs: [(&Tensor<f64>, &Tensor<f64>); 5] = [
            (&f, &d_f),
            (&cw, &d_cw),
            (&cb, &d_cb),
            (&aw, &d_aw),
            (&ab, &d_ab),
        ];
        for (idx, (param, analytic)) in pairs.iter().enumerate() {
            let num = finite_difference(param.data(), 1e-6, |pd| {
                let p2 = Tensor::from_vec(param.shape(), pd.to_vec()).unwrap();
                match idx {
                    0 => loss(&p2, &cw, &cb, &aw, &ab),
                    1 => loss(&f, &p2, &cb, &aw, &ab),
                    2 => loss(&f, &cw, &p2, &aw, &ab),
                    3 => loss(&f, &cw, &cb, &p2, &ab),
                    _ => loss(&f, &cw, &cb, &aw, &p2),
                }
            });
            assert!(
                max_relative_error(analytic.data(), &num, 1e-9) < 1e-5,
                "head parameter set {idx}"
            );
        }
    }

    #[test]
    fn relu_and_dropout_masks_gate_gradients() {
        let mut x = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.0, 2.0, 0.0, 3.0]).unwrap();
        let mask = relu_forward(&mut x);
        assert_eq!(x.data(), &[0.0, 2.0, 0.0, 3.0]);
        assert_eq!(mask, vec![false, true, false, true]);
        let mut d = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        relu_backward(&mut d, &mask);
        assert_eq!(d.data(), &[0.0, 1.0, 0.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x: Tensor<f64> = Tensor::from_vec(&[1, 2, 50], vec![1.0; 100]).unwrap();
        let mask = dropout_forward(&mut x, 0.4, &mut rng);
        let kept = mask.iter().filter(|&&k| k).count();
        assert!(kept > 30 && kept < 90);
        for (v, &keep) in x.data().iter().zip(&mask) {
            if keep {
                assert!((v - 1.0 / 0.6).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
