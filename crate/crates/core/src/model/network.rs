//! Forward pass through body and heads, and its exact reverse mode.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};

use super::lstm::{lstm_backward, lstm_forward, LstmCache};
use super::params::{BlstmLayer, ChimeraParams};
use crate::error::{ensure_shape, Error, Result};
use crate::loss::{chimera_loss, MiTarget};

/// Norm below which an embedding row is not normalized.
pub const NORM_EPS: f64 = 1e-8;

/// Network outputs plus what backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pre-head representation, (T, F, D).
    pub z: Array3<f64>,
    /// Unit-norm embeddings, (T·F, D), rows in (t, f) order.
    pub embeddings: Array2<f64>,
    /// Softmax masks, (C, T, F).
    pub masks: Array3<f64>,
    cache: ForwardCache,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Input to each BLSTM layer; the last entry is the body output.
    layer_inputs: Vec<Array2<f64>>,
    lstm: Vec<(LstmCache, LstmCache)>,
    tanh_z: Array2<f64>,
    norms: Vec<f64>,
}

impl ForwardOutput {
    pub fn n_frames(&self) -> usize {
        self.z.dim().0
    }
}

/// Loss values from one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub dc: f64,
    pub mi: f64,
}

fn check_finite(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Runs the body and both heads on `feats` (T, input_dim).
pub fn forward(p: &ChimeraParams, feats: ArrayView2<f64>) -> Result<ForwardOutput> {
    let cfg = p.config;
    ensure_shape(feats.ncols() == cfg.input_dim, || {
        format!("features have {} columns, model expects {}", feats.ncols(), cfg.input_dim)
    })?;
    if feats.nrows() == 0 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    if feats.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input features".into()));
    }
    let t_len = feats.nrows();
    let (f_len, d_len, c_len) = (cfg.n_freq, cfg.embed_dim, cfg.n_sources);

    let mut layer_inputs = vec![feats.to_owned()];
    let mut lstm = Vec::with_capacity(p.layers.len());
    for (l, layer) in p.layers.iter().enumerate() {
        let x = layer_inputs.last().expect("non-empty").view();
        let fwd = lstm_forward(&layer.forward, x, false);
        let bwd = lstm_forward(&layer.backward, x, true);
        let out = concatenate(Axis(1), &[fwd.hidden.view(), bwd.hidden.view()]).expect("same frame count");
        check_finite(&out, || format!("BLSTM layer {l}"))?;
        layer_inputs.push(out);
        lstm.push((fwd, bwd));
    }

    let top = layer_inputs.last().expect("non-empty");
    let z_flat = top.dot(&p.linear_w) + &p.linear_b;
    check_finite(&z_flat, || "linear layer".to_string())?;
    let z_rows = z_flat.into_shape_with_order((t_len * f_len, d_len)).expect("row-major reshape");

    let tanh_z = z_rows.mapv(f64::tanh);
    let mut embeddings = tanh_z.clone();
    let mut norms = Vec::with_capacity(t_len * f_len);
    for mut row in embeddings.outer_iter_mut() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row /= n.max(NORM_EPS);
        norms.push(n);
    }

    let mut masks = Array3::<f64>::zeros((c_len, t_len, f_len));
    let mut logits = vec![0.0; c_len];
    for t in 0..t_len {
        for f in 0..f_len {
            let zr = z_rows.row(t * f_len + f);
            let w = p.head_w.index_axis(Axis(0), f);
            for (c, l) in logits.iter_mut().enumerate() {
                *l = p.head_b[[f, c]] + zr.iter().zip(w.column(c)).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite("mask head".into()));
            }
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (c, l) in logits.iter().enumerate() {
                masks[[c, t, f]] = (l - max).exp() / total;
            }
        }
    }

    let z = z_rows.into_shape_with_order((t_len, f_len, d_len)).expect("row-major reshape");
    Ok(ForwardOutput { z, embeddings, masks, cache: ForwardCache { layer_inputs, lstm, tanh_z, norms } })
}

/// Parameter gradients given dL/dV (T·F, D) and dL/dM (C, T, F).
pub fn backward(
    p: &ChimeraParams,
    out: &ForwardOutput,
    d_embeddings: ArrayView2<f64>,
    d_masks: &Array3<f64>,
) -> ChimeraParams {
    let cfg = p.config;
    let (t_len, f_len, d_len) = out.z.dim();
    let c_len = cfg.n_sources;
    let mut grads = p.zeros_like();
    let cache = &out.cache;

    // Deep clustering head: unit normalization then tanh.
    let mut d_z = Array2::<f64>::zeros((t_len * f_len, d_len));
    for (i, mut dz) in d_z.outer_iter_mut().enumerate() {
        let n = cache.norms[i];
        if n <= NORM_EPS {
            continue;
        }
        let v = out.embeddings.row(i);
        let dv = d_embeddings.row(i);
        let proj: f64 = v.iter().zip(dv.iter()).map(|(a, b)| a * b).sum();
        let u = cache.tanh_z.row(i);
        for d in 0..d_len {
            let du = (dv[d] - v[d] * proj) / n;
            dz[d] = du * (1.0 - u[d] * u[d]);
        }
    }

    // Mask-inference head: per-frequency softmax layers.
    let mut d_logits = vec![0.0; c_len];
    for t in 0..t_len {
        for f in 0..f_len {
            let dot: f64 = (0..c_len).map(|c| out.masks[[c, t, f]] * d_masks[[c, t, f]]).sum();
            for (c, dl) in d_logits.iter_mut().enumerate() {
                *dl = out.masks[[c, t, f]] * (d_masks[[c, t, f]] - dot);
            }
            let row = t * f_len + f;
            let zr = out.z.slice(s![t, f, ..]);
            let w = p.head_w.index_axis(Axis(0), f);
            let mut gw = grads.head_w.index_axis_mut(Axis(0), f);
            for (c, &dl) in d_logits.iter().enumerate() {
                grads.head_b[[f, c]] += dl;
                for d in 0..d_len {
                    gw[[d, c]] += zr[d] * dl;
                    d_z[[row, d]] += w[[d, c]] * dl;
                }
            }
        }
    }

    // Linear layer.
    let d_z_flat = d_z.into_shape_with_order((t_len, f_len * d_len)).expect("row-major reshape");
    let top = cache.layer_inputs.last().expect("non-empty");
    grads.linear_w = top.t().dot(&d_z_flat);
    grads.linear_b = d_z_flat.sum_axis(Axis(0));
    let mut d_hidden = d_z_flat.dot(&p.linear_w.t());

    // BLSTM stack, top down.
    let h = cfg.hidden;
    for l in (0..p.layers.len()).rev() {
        let layer = &p.layers[l];
        let x = cache.layer_inputs[l].view();
        let (fwd_cache, bwd_cache) = &cache.lstm[l];
        let (g_fwd, dx_fwd) = lstm_backward(&layer.forward, x, fwd_cache, d_hidden.slice(s![.., ..h]));
        let (g_bwd, dx_bwd) = lstm_backward(&layer.backward, x, bwd_cache, d_hidden.slice(s![.., h..]));
        grads.layers[l] = BlstmLayer { forward: g_fwd, backward: g_bwd };
        d_hidden = dx_fwd + dx_bwd;
    }
    grads
}

/// Chimera loss on one segment and the gradient of every parameter.
pub fn loss_and_grad(
    p: &ChimeraParams,
    feats: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    mixture: ArrayView2<f64>,
    target: MiTarget<'_>,
    alpha: f64,
) -> Result<(LossBreakdown, ChimeraParams)> {
    let out = forward(p, feats)?;
    let report = chimera_loss(alpha, out.embeddings.view(), labels, out.masks.view(), mixture, target)?;
    if !report.value.is_finite() {
        return Err(Error::NonFinite("chimera loss".into()));
    }
    let grads = backward(p, &out, report.grad_v.view(), &report.grad_m);
    Ok((LossBreakdown { total: report.value, dc: report.dc, mi: report.mi }, grads))
}

/// Forward-only loss evaluation.
pub fn evaluate_loss(
    p: &ChimeraParams,
    feats: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    mixture: ArrayView2<f64>,
    target: MiTarget<'_>,
    alpha: f64,
) -> Result<LossBreakdown> {
    let out = forward(p, feats)?;
    let report = chimera_loss(alpha, out.embeddings.view(), labels, out.masks.view(), mixture, target)?;
    Ok(LossBreakdown { total: report.value, dc: report.dc, mi: report.mi })
}
