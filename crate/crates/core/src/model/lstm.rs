//! Single-direction LSTM with backpropagation through time.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::LstmParams;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Activated gates (T, 4H): input, forget, cell candidate, output.
    gates: Array2<f64>,
    cells: Array2<f64>,
    tanh_cells: Array2<f64>,
    /// Hidden states (T, H) in time order, whichever way the scan ran.
    pub hidden: Array2<f64>,
    reverse: bool,
}

/// Runs the recurrence over `x` (T, input); `reverse` scans from the last frame.
pub fn lstm_forward(p: &LstmParams, x: ArrayView2<f64>, reverse: bool) -> LstmCache {
    let t_len = x.nrows();
    let h = p.hidden();
    let mut gates = x.dot(&p.w_ih) + &p.bias;
    let mut cells = Array2::<f64>::zeros((t_len, h));
    let mut tanh_cells = Array2::<f64>::zeros((t_len, h));
    let mut hidden = Array2::<f64>::zeros((t_len, h));
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let w_hh = p.w_hh.as_slice().expect("standard layout");

    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let mut g_row = gates.row_mut(t);
        let g = g_row.as_slice_mut().expect("contiguous row");
        for (j, &hj) in h_prev.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            let w_row = &w_hh[j * 4 * h..(j + 1) * 4 * h];
            for (gk, &wk) in g.iter_mut().zip(w_row) {
                *gk += hj * wk;
            }
        }
        let (gi, rest) = g.split_at_mut(h);
        let (gf, rest) = rest.split_at_mut(h);
        let (gc, go) = rest.split_at_mut(h);
        let mut c_row = cells.row_mut(t);
        let mut tc_row = tanh_cells.row_mut(t);
        let mut h_row = hidden.row_mut(t);
        for j in 0..h {
            gi[j] = sigmoid(gi[j]);
            gf[j] = sigmoid(gf[j]);
            gc[j] = gc[j].tanh();
            go[j] = sigmoid(go[j]);
            let c = gf[j] * c_prev[j] + gi[j] * gc[j];
            let tc = c.tanh();
            c_row[j] = c;
            tc_row[j] = tc;
            h_row[j] = go[j] * tc;
            c_prev[j] = c;
            h_prev[j] = go[j] * tc;
        }
    }
    LstmCache { gates, cells, tanh_cells, hidden, reverse }
}

/// Gradients of one direction given dL/dh (T, H) from above.
/// Returns parameter gradients and dL/dx.
pub fn lstm_backward(
    p: &LstmParams,
    x: ArrayView2<f64>,
    cache: &LstmCache,
    d_hidden: ArrayView2<f64>,
) -> (LstmParams, Array2<f64>) {
    let t_len = x.nrows();
    let h = p.hidden();
    let mut d_gates = Array2::<f64>::zeros((t_len, 4 * h));
    let mut dh_rec = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let w_hh = p.w_hh.as_slice().expect("standard layout");

    for step in (0..t_len).rev() {
        let t = if cache.reverse { t_len - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if cache.reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let gates = cache.gates.row(t);
        let tc = cache.tanh_cells.row(t);
        let dh_in = d_hidden.row(t);
        let mut dg_row = d_gates.row_mut(t);
        let dg = dg_row.as_slice_mut().expect("contiguous row");
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let c_prev = prev.map_or(0.0, |tp| cache.cells[[tp, j]]);
            let dh = dh_in[j] + dh_rec[j];
            let dc = dc_next[j] + dh * o * (1.0 - tc[j] * tc[j]);
            dg[j] = dc * g * i * (1.0 - i);
            dg[h + j] = dc * c_prev * f * (1.0 - f);
            dg[2 * h + j] = dc * i * (1.0 - g * g);
            dg[3 * h + j] = dh * tc[j] * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        for (j, d) in dh_rec.iter_mut().enumerate() {
            let w_row = &w_hh[j * 4 * h..(j + 1) * 4 * h];
            *d = w_row.iter().zip(dg.iter()).map(|(w, g)| w * g).sum();
        }
    }

    let w_ih = x.t().dot(&d_gates);
    let w_hh_grad = if t_len > 1 {
        if cache.reverse {
            cache.hidden.slice(s![1.., ..]).t().dot(&d_gates.slice(s![..t_len - 1, ..]))
        } else {
            cache.hidden.slice(s![..t_len - 1, ..]).t().dot(&d_gates.slice(s![1.., ..]))
        }
    } else {
        Array2::zeros((h, 4 * h))
    };
    let bias: Array1<f64> = d_gates.sum_axis(Axis(0));
    let dx = d_gates.dot(&p.w_ih.t());
    (LstmParams { w_ih, w_hh: w_hh_grad, bias }, dx)
}
