use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Dimension as _};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;

/// Gate blocks along the 4H axis, in this order.
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_CELL: usize = 2;
pub const GATE_OUTPUT: usize = 3;

/// One LSTM direction. Gate pre-activations are `x·w_ih + h·w_hh + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// (input, 4H)
    pub w_ih: Array2<f64>,
    /// (H, 4H)
    pub w_hh: Array2<f64>,
    /// (4H)
    pub bias: Array1<f64>,
}

impl LstmParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((input, 4 * hidden)),
            w_hh: Array2::zeros((hidden, 4 * hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlstmLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Every trainable tensor of the body and both heads. The same type holds
/// gradients and optimizer accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ChimeraParams {
    pub config: ModelConfig,
    pub layers: Vec<BlstmLayer>,
    /// (2H, F·D); column f·D + d produces Z[t, f, d].
    pub linear_w: Array2<f64>,
    /// (F·D)
    pub linear_b: Array1<f64>,
    /// One D×C softmax layer per frequency: (F, D, C).
    pub head_w: Array3<f64>,
    /// (F, C)
    pub head_b: Array2<f64>,
}

impl ChimeraParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let h = config.hidden;
        let layers = (0..config.n_layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { 2 * h };
                BlstmLayer { forward: LstmParams::zeros(input, h), backward: LstmParams::zeros(input, h) }
            })
            .collect();
        let fd = config.n_freq * config.embed_dim;
        Self {
            config,
            layers,
            linear_w: Array2::zeros((2 * h, fd)),
            linear_b: Array1::zeros(fd),
            head_w: Array3::zeros((config.n_freq, config.embed_dim, config.n_sources)),
            head_b: Array2::zeros((config.n_freq, config.n_sources)),
        }
    }

    /// Uniform(−s, s) weights with s = 1/√fan_in, forget-gate bias 1,
    /// other biases 0. Values are kept on the f32 grid.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |a: &mut [f64], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            for x in a {
                *x = rng.random_range(-s..s) as f32 as f64;
            }
        };
        let h = config.hidden;
        for layer in &mut p.layers {
            for dir in [&mut layer.forward, &mut layer.backward] {
                let fan_in = dir.w_ih.nrows();
                fill(dir.w_ih.as_slice_mut().expect("standard layout"), fan_in);
                fill(dir.w_hh.as_slice_mut().expect("standard layout"), h);
                dir.bias.slice_mut(ndarray::s![GATE_FORGET * h..(GATE_FORGET + 1) * h]).fill(1.0);
            }
        }
        fill(p.linear_w.as_slice_mut().expect("standard layout"), 2 * h);
        fill(p.head_w.as_slice_mut().expect("standard layout"), config.embed_dim);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Named views in a fixed order (the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (dir_name, dir) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
                out.push((format!("blstm.{l}.{dir_name}.w_ih"), dir.w_ih.view().into_dyn()));
                out.push((format!("blstm.{l}.{dir_name}.w_hh"), dir.w_hh.view().into_dyn()));
                out.push((format!("blstm.{l}.{dir_name}.bias"), dir.bias.view().into_dyn()));
            }
        }
        out.push(("linear.weight".into(), self.linear_w.view().into_dyn()));
        out.push(("linear.bias".into(), self.linear_b.view().into_dyn()));
        out.push(("mask_head.weight".into(), self.head_w.view().into_dyn()));
        out.push(("mask_head.bias".into(), self.head_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let BlstmLayer { forward, backward } = layer;
            for (dir_name, dir) in [("fwd", forward), ("bwd", backward)] {
                let LstmParams { w_ih, w_hh, bias } = dir;
                out.push((format!("blstm.{l}.{dir_name}.w_ih"), w_ih.view_mut().into_dyn()));
                out.push((format!("blstm.{l}.{dir_name}.w_hh"), w_hh.view_mut().into_dyn()));
                out.push((format!("blstm.{l}.{dir_name}.bias"), bias.view_mut().into_dyn()));
            }
        }
        out.push(("linear.weight".into(), self.linear_w.view_mut().into_dyn()));
        out.push(("linear.bias".into(), self.linear_b.view_mut().into_dyn()));
        out.push(("mask_head.weight".into(), self.head_w.view_mut().into_dyn()));
        out.push(("mask_head.bias".into(), self.head_b.view_mut().into_dyn()));
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, mut dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d += scale * s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    /// Rounds every value to the nearest f32, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors().into_iter().map(|(n, t)| (n, t.raw_dim().slice().to_vec())).collect()
    }
}
