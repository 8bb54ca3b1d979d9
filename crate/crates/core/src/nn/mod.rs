//! Fully-connected regressor with a sinusoidal time embedding and optional
//! latent conditioning, trained with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat buffer, layer by layer, each layer stored as a
//! row-major `(out, in)` weight matrix followed by its bias. The network input
//! is `[x | embed(t) | latent]` and the output has the dimension of `x`.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamConfig, LrSchedule};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::schedule::{InterpolantBatch, ResidualKind, Schedule};

/// Rows per gradient chunk. Chunks are reduced in index order, so the
/// gradient does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Activation {
    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Value and derivative with one transcendental evaluation.
    #[inline]
    fn value_and_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Gelu => {
                let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                (0.5 * x * (1.0 + th), 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)
            }
            Activation::Tanh => {
                let th = x.tanh();
                (th, 1.0 - th * th)
            }
        }
    }
}

/// Network shape. Hidden layers use `activation`; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Even; zero disables the time input.
    pub time_embed_dim: usize,
    pub latent_dim: usize,
    /// Lowest embedding frequency is `1 / max_positions`.
    pub max_positions: f64,
}

impl Architecture {
    /// Three hidden layers of 128 GELU units, 32-wide time embedding.
    pub fn default_for(state_dim: usize, latent_dim: usize) -> Self {
        Self {
            state_dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Gelu,
            time_embed_dim: 32,
            latent_dim,
            max_positions: 2.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.time_embed_dim + self.latent_dim
    }

    /// `[input, hidden.., state_dim]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim());
        w.extend(&self.hidden);
        w.push(self.state_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(invalid("state_dim must be positive"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(invalid("time_embed_dim must be even"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if !(self.max_positions.is_finite() && self.max_positions > 0.0) {
            return Err(invalid("max_positions must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[cos(t f_j), sin(t f_j)]` with
/// `f_j = max_positions^(-j / half)`.
pub fn time_embedding(t: f64, dim: usize, max_positions: f64, out: &mut [f64]) {
    embed_with(t, &frequencies(dim, max_positions), out);
}

fn frequencies(dim: usize, max_positions: f64) -> Vec<f64> {
    let half = dim / 2;
    (0..half).map(|j| (1.0 / max_positions).powf(j as f64 / half as f64)).collect()
}

fn embed_with(t: f64, freqs: &[f64], out: &mut [f64]) {
    let half = freqs.len();
    for (j, f) in freqs.iter().enumerate() {
        let (s, c) = (t * f).sin_cos();
        out[j] = c;
        out[half + j] = s;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    arch: Architecture,
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Offsets of one layer's weights and bias in the flat buffer.
#[derive(Clone, Copy)]
struct LayerSlot {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Regressor {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        let params = vec![0.0; arch.param_count()];
        Ok(Self { arch, widths, params })
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization with the output layer scaled
    /// by `output_scale` and its bias zeroed, so a small scale starts the
    /// network near the zero field.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, output_scale: f64, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let slots = m.slots();
        let last = slots.len() - 1;
        for (l, slot) in slots.into_iter().enumerate() {
            let bound = 1.0 / (slot.n_in as f64).sqrt();
            let scale = if l == last { output_scale } else { 1.0 };
            for w in &mut m.params[slot.w..slot.b] {
                *w = scale * rng.random_range(-bound..bound);
            }
            for b in &mut m.params[slot.b..slot.b + slot.n_out] {
                *b = if l == last { 0.0 } else { rng.random_range(-bound..bound) };
            }
        }
        Ok(m)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        ensure_dim(m.params.len(), params.len())?;
        m.params = params;
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|p| {
                let slot = LayerSlot { n_in: p[0], n_out: p[1], w: off, b: off + p[0] * p[1] };
                off += p[0] * p[1] + p[1];
                slot
            })
            .collect()
    }

    /// Weight matrix of layer `l` as an `(out, in)` view.
    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let s = self.slots()[l];
        ArrayView2::from_shape((s.n_out, s.n_in), &self.params[s.w..s.b]).expect("layer shape")
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let s = self.slots()[l];
        ArrayViewMut2::from_shape((s.n_out, s.n_in), &mut self.params[s.w..s.b]).expect("layer shape")
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.slots()[l];
        &mut self.params[s.b..s.b + s.n_out]
    }

    fn check_inputs(&self, x: &ArrayView2<f64>, t: &[f64], latent: Option<&ArrayView2<f64>>) -> Result<()> {
        ensure_dim(self.arch.state_dim, x.ncols())?;
        ensure_dim(x.nrows(), t.len())?;
        match latent {
            Some(l) => {
                ensure_dim(self.arch.latent_dim, l.ncols())?;
                ensure_dim(x.nrows(), l.nrows())?;
            }
            None => ensure_dim(self.arch.latent_dim, 0)?,
        }
        Ok(())
    }

    /// Assemble `[x | embed(t) | latent]` row by row.
    fn assemble(&self, x: ArrayView2<f64>, t: &[f64], latent: Option<ArrayView2<f64>>) -> Array2<f64> {
        let (d, e) = (self.arch.state_dim, self.arch.time_embed_dim);
        let mut input = Array2::zeros((x.nrows(), self.arch.input_dim()));
        input.slice_mut(s![.., ..d]).assign(&x);
        if let Some(l) = latent {
            input.slice_mut(s![.., d + e..]).assign(&l);
        }
        if e > 0 {
            let freqs = frequencies(e, self.arch.max_positions);
            let mut emb = vec![0.0; e];
            let mut last = f64::NAN;
            for (r, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
                // transport batches share one time, so the embedding is usually reused
                if t[r] != last {
                    embed_with(t[r], &freqs, &mut emb);
                    last = t[r];
                }
                row.as_slice_mut().expect("standard layout")[d..d + e].copy_from_slice(&emb);
            }
        }
        input
    }

    fn layer(&self, slot: LayerSlot) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape((slot.n_out, slot.n_in), &self.params[slot.w..slot.b]).expect("shape");
        (w, ArrayView1::from(&self.params[slot.b..slot.b + slot.n_out]))
    }

    /// Output rows for an assembled input.
    fn forward_input(&self, input: Array2<f64>) -> Array2<f64> {
        let slots = self.slots();
        let act = self.arch.activation;
        let mut a = input;
        for (l, slot) in slots.iter().enumerate() {
            let (w, b) = self.layer(*slot);
            a = a.dot(&w.t()) + &b;
            if l + 1 < slots.len() {
                a.mapv_inplace(|v| act.value(v));
            }
        }
        a
    }

    /// Layer inputs (the assembled input, then each hidden activation), the
    /// activation derivatives of each hidden layer, and the output.
    fn forward_cache(&self, input: Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Array2<f64>) {
        let slots = self.slots();
        let act = self.arch.activation;
        let mut inputs = vec![input];
        let mut derivs = Vec::with_capacity(slots.len());
        for (l, slot) in slots.iter().enumerate() {
            let (w, b) = self.layer(*slot);
            let z = inputs[l].dot(&w.t()) + &b;
            if l + 1 == slots.len() {
                return (inputs, derivs, z);
            }
            let mut a = z;
            let mut da = Array2::zeros(a.raw_dim());
            ndarray::Zip::from(&mut a).and(&mut da).for_each(|v, dv| {
                let (y, dy) = act.value_and_derivative(*v);
                *v = y;
                *dv = dy;
            });
            inputs.push(a);
            derivs.push(da);
        }
        unreachable!("networks have an output layer")
    }

    /// Batched forward pass, one row per sample.
    pub fn forward_batch(&self, x: ArrayView2<f64>, t: &[f64], latent: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        self.check_inputs(&x, t, latent.as_ref())?;
        Ok(self.forward_input(self.assemble(x, t, latent)))
    }

    pub fn forward(&self, x: &[f64], t: f64, latent: Option<&[f64]>) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let lv = latent.map(|l| ArrayView2::from_shape((1, l.len()), l).expect("row"));
        Ok(self.forward_batch(xv, &[t], lv)?.into_raw_vec_and_offset().0)
    }

    /// Sum over rows of `|f(x_r, t_r, l_r) - target_r|^2` and its gradient.
    fn sum_loss_grad(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        latent: Option<ArrayView2<f64>>,
        target: ArrayView2<f64>,
    ) -> (f64, Vec<f64>) {
        let (inputs, derivs, out) = self.forward_cache(self.assemble(x, t, latent));
        let slots = self.slots();
        let mut grad = vec![0.0; self.params.len()];
        let diff = out - &target;
        let loss = diff.iter().map(|v| v * v).sum();
        let mut delta = diff * 2.0;
        for l in (0..slots.len()).rev() {
            let slot = slots[l];
            {
                let (gw, gb) = grad[slot.w..slot.b + slot.n_out].split_at_mut(slot.n_in * slot.n_out);
                let mut gw = ArrayViewMut2::from_shape((slot.n_out, slot.n_in), gw).expect("shape");
                ndarray::linalg::general_mat_mul(1.0, &delta.t(), &inputs[l], 0.0, &mut gw);
                for (g, col) in gb.iter_mut().zip(delta.axis_iter(Axis(1))) {
                    *g = col.sum();
                }
            }
            if l > 0 {
                let (w, _) = self.layer(slot);
                let mut back = delta.dot(&w);
                back *= &derivs[l - 1];
                delta = back;
            }
        }
        (loss, grad)
    }

    /// Mean over rows of `|f - target|^2` and its gradient with respect to
    /// every parameter. Rows are processed in fixed-size chunks, possibly in
    /// parallel, and reduced in chunk order.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        latent: Option<ArrayView2<f64>>,
        target: ArrayView2<f64>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(&x, t, latent.as_ref())?;
        ensure_dim(x.nrows(), target.nrows())?;
        ensure_dim(self.arch.state_dim, target.ncols())?;
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        let starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
        let parts: Vec<(f64, Vec<f64>)> = starts
            .par_iter()
            .map(|&a| {
                let b = (a + GRAD_CHUNK).min(n);
                self.sum_loss_grad(
                    x.slice(s![a..b, ..]),
                    &t[a..b],
                    latent.as_ref().map(|l| l.slice(s![a..b, ..])),
                    target.slice(s![a..b, ..]),
                )
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss * inv, grad))
    }

    /// Mean residual of the given kind over an interpolant batch, and its
    /// gradient.
    pub fn backward(&self, batch: &InterpolantBatch, kind: ResidualKind, sched: &Schedule) -> Result<(f64, Vec<f64>)> {
        let target = batch.targets(kind, sched)?;
        self.loss_and_grad(batch.i_t.view(), &batch.t, batch.latent.as_ref().map(|l| l.view()), target.view())
    }
}
