//! The channel-to-modem network.
//!
//! The channel matrix enters as a two-channel image (real and imaginary
//! parts). A stack of densely connected convolutions, each followed by batch
//! normalization and a leaky rectifier, extracts features; every convolution
//! sees the input together with the outputs of all earlier convolutions. A
//! fully connected head then emits the real and imaginary parts of `Φ` and
//! `Ψᴴ`, which are energy-normalized before leaving the network.
//!
//! Training uses a [`Tape`] recorded by [`ModNetParams::forward_train`] and the
//! hand-written [`ModNetParams::backward`] pass.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modem::Modem;
use crate::nn::{self, gemm, BatchStats, ConvGeom};
use crate::scalar::Scalar;

/// Input image channels (real and imaginary part of `H`).
pub const INPUT_CHANNELS: usize = 2;


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModNetArch {
    /// `M_L`; the input image is `M_L x M_L`.
    pub frame_len: usize,
    /// `M`.
    pub num_subcarriers: usize,
    pub conv_kernel: usize,
    /// Output channels of each convolution.
    pub conv_channels: Vec<usize>,
    /// Widths of the fully connected layers; the last equals
    /// [`ModNetArch::output_count`].
    pub fc_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModNetArch {
    /// Three 7x7 convolutions of width 16 and a `4 M_L`, `4 M_L` hidden head.
    pub fn new(num_subcarriers: usize, prefix_len: usize) -> Self {
        let frame_len = num_subcarriers + prefix_len;
        let out = 4 * frame_len * num_subcarriers;
        ModNetArch {
            frame_len,
            num_subcarriers,
            conv_kernel: 7,
            conv_channels: vec![16; 3],
            fc_widths: vec![4 * frame_len, 4 * frame_len, out],
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_conv_width(mut self, width: usize) -> Self {
        self.conv_channels.iter_mut().for_each(|c| *c = width);
        self
    }

    pub fn with_hidden_width(mut self, width: usize) -> Self {
        let n = self.fc_widths.len();
        self.fc_widths[..n - 1].iter_mut().for_each(|w| *w = width);
        self
    }

    pub fn prefix_len(&self) -> usize {
        self.frame_len - self.num_subcarriers
    }

    /// Real outputs: real and imaginary parts of `Φ` (`M_L x M`) and `Ψᴴ`
    /// (`M x M_L`).
    pub fn output_count(&self) -> usize {
        4 * self.frame_len * self.num_subcarriers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_subcarriers == 0 || self.frame_len < self.num_subcarriers {
            return bad(format!(
                "frame length {} must be at least the subcarrier count {} > 0",
                self.frame_len, self.num_subcarriers
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("convolution kernel {} must be odd", self.conv_kernel));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("convolution widths must be non-empty and positive".into());
        }
        if self.fc_widths.is_empty() || self.fc_widths.contains(&0) {
            return bad("dense widths must be non-empty and positive".into());
        }
        if *self.fc_widths.last().unwrap() != self.output_count() {
            return bad(format!(
                "last dense width {} must equal the output count {}",
                self.fc_widths.last().unwrap(),
                self.output_count()
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.bn_eps > 0.0 && self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("invalid activation slope or batch-norm constants".into());
        }
        Ok(())
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom {
            side: self.frame_len,
            kernel: self.conv_kernel,
        }
    }

    /// Input channels of convolution `layer`: the image plus all earlier outputs.
    pub fn conv_in_channels(&self, layer: usize) -> usize {
        INPUT_CHANNELS + self.conv_channels[..layer].iter().sum::<usize>()
    }

    fn dense_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.conv_channels.last().unwrap() * self.frame_len * self.frame_len
        } else {
            self.fc_widths[layer - 1]
        }
    }

    /// Names and shapes of all trainable tensors, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.conv_kernel;
        let mut out = Vec::new();
        for (i, &c) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![c, self.conv_in_channels(i), k, k]));
            out.push((format!("bn{}.gamma", i + 1), vec![c]));
            out.push((format!("bn{}.beta", i + 1), vec![c]));
        }
        for (j, &w) in self.fc_widths.iter().enumerate() {
            out.push((format!("fc{}.weight", j + 1), vec![w, self.dense_in(j)]));
            out.push((format!("fc{}.bias", j + 1), vec![w]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    conv_w: Vec<Range<usize>>,
    gamma: Vec<Range<usize>>,
    beta: Vec<Range<usize>>,
    fc_w: Vec<Range<usize>>,
    fc_b: Vec<Range<usize>>,
    total: usize,
}

impl Layout {
    fn new(arch: &ModNetArch) -> Self {
        let mut ranges = Vec::new();
        let mut offset = 0;
        for (_, shape) in arch.tensor_shapes() {
            let n: usize = shape.iter().product();
            ranges.push(offset..offset + n);
            offset += n;
        }
        let nc = arch.conv_channels.len();
        let pick = |start: usize, stride: usize, count: usize| -> Vec<Range<usize>> {
            (0..count).map(|i| ranges[start + i * stride].clone()).collect()
        };
        Layout {
            conv_w: pick(0, 3, nc),
            gamma: pick(1, 3, nc),
            beta: pick(2, 3, nc),
            fc_w: pick(3 * nc, 2, arch.fc_widths.len()),
            fc_b: pick(3 * nc + 1, 2, arch.fc_widths.len()),
            total: offset,
        }
    }
}

/// Trainable weights and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModNetParams<T> {
    arch: ModNetArch,
    init_seed: u64,
    values: Vec<T>,
    running_mean: Vec<Array1<T>>,
    running_var: Vec<Array1<T>>,
    layout: Layout,
}

/// Uniform fan-in initialization: weights and biases on `±1/sqrt(fan_in)`,
/// batch-norm scale 1 and shift 0.
pub fn init_modnet<T: Scalar>(arch: &ModNetArch, seed: u64) -> Result<ModNetParams<T>> {
    arch.validate()?;
    let layout = Layout::new(arch);
    let mut values = vec![T::zero(); layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps = arch.conv_kernel * arch.conv_kernel;
    let mut fill = |range: &Range<usize>, fan_in: usize, values: &mut [T]| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[range.clone()] {
            *v = T::lit(rng.random_range(-bound..bound));
        }
    };
    for i in 0..arch.conv_channels.len() {
        fill(&layout.conv_w[i], arch.conv_in_channels(i) * taps, &mut values);
        values[layout.gamma[i].clone()].fill(T::one());
    }
    for j in 0..arch.fc_widths.len() {
        fill(&layout.fc_w[j], arch.dense_in(j), &mut values);
        fill(&layout.fc_b[j], arch.dense_in(j), &mut values);
    }
    Ok(ModNetParams {
        arch: arch.clone(),
        init_seed: seed,
        values,
        running_mean: arch.conv_channels.iter().map(|&c| Array1::zeros(c)).collect(),
        running_var: arch.conv_channels.iter().map(|&c| Array1::ones(c)).collect(),
        layout,
    })
}

/// Per-layer activations kept for the backward pass.
struct ConvCache<T> {
    xhat: Vec<Array2<T>>,
    act: Vec<Array2<T>>,
    inv_std: Array1<T>,
}

/// Forward-pass record consumed by [`ModNetParams::backward`].
pub struct Tape<T> {
    training: bool,
    inputs: Vec<Array2<T>>,
    conv: Vec<ConvCache<T>>,
    /// Input of each dense layer, batch-major.
    dense_in: Vec<Array2<T>>,
    /// Network output before energy normalization.
    raw: Array2<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn batch_len(&self) -> usize {
        self.inputs.len()
    }

    /// Input of convolution `layer` for sample `b`: the channel-wise
    /// concatenation of the image and all earlier convolution outputs.
    pub fn conv_input(&self, layer: usize, b: usize) -> Array2<T> {
        let blocks = self.blocks(layer, b);
        ndarray::concatenate(Axis(0), &blocks).expect("blocks share the spatial size")
    }

    fn blocks(&self, layer: usize, b: usize) -> Vec<ArrayView2<'_, T>> {
        let mut blocks = vec![self.inputs[b].view()];
        blocks.extend(self.conv[..layer].iter().map(|c| c.act[b].view()));
        blocks
    }
}

/// Stacks `Re H` over `Im H` as a `2 x M_L²` image.
fn channel_image<T: Scalar>(h: &Array2<Complex<T>>) -> Array2<T> {
    let n = h.len();
    let mut img = Array2::<T>::zeros((INPUT_CHANNELS, n));
    for (i, z) in h.iter().enumerate() {
        img[(0, i)] = z.re;
        img[(1, i)] = z.im;
    }
    img
}

fn norm_of<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

impl<T: Scalar> ModNetParams<T> {
    pub fn arch(&self) -> &ModNetArch {
        &self.arch
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// All trainable values in storage order (see [`ModNetArch::tensor_shapes`]).
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn running_stats(&self) -> (&[Array1<T>], &[Array1<T>]) {
        (&self.running_mean, &self.running_var)
    }

    /// Every tensor including batch-norm buffers, as `(name, shape, data)`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out: Vec<_> = self
            .arch
            .tensor_shapes()
            .into_iter()
            .scan(0usize, |offset, (name, shape)| {
                let n: usize = shape.iter().product();
                let data = self.values[*offset..*offset + n].to_vec();
                *offset += n;
                Some((name, shape, data))
            })
            .collect();
        for (i, (mean, var)) in self.running_mean.iter().zip(&self.running_var).enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), vec![mean.len()], mean.to_vec()));
            out.push((format!("bn{}.running_var", i + 1), vec![var.len()], var.to_vec()));
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `arch`.
    pub fn from_named_tensors(
        arch: ModNetArch,
        init_seed: u64,
        tensors: Vec<(String, Vec<usize>, Vec<T>)>,
    ) -> Result<Self> {
        arch.validate()?;
        let mut expected = arch.tensor_shapes();
        for (i, &c) in arch.conv_channels.iter().enumerate() {
            expected.push((format!("bn{}.running_mean", i + 1), vec![c]));
            expected.push((format!("bn{}.running_var", i + 1), vec![c]));
        }
        if expected.len() != tensors.len() {
            return Err(Error::ArchMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(arch.param_count());
        let mut running_mean = Vec::new();
        let mut running_var = Vec::new();
        for ((name, shape), (got_name, got_shape, data)) in expected.iter().zip(tensors) {
            if *name != got_name || *shape != got_shape || data.len() != shape.iter().product::<usize>() {
                return Err(Error::ArchMismatch(format!(
                    "tensor {got_name} {got_shape:?} does not match expected {name} {shape:?}"
                )));
            }
            if name.ends_with("running_mean") {
                running_mean.push(Array1::from(data));
            } else if name.ends_with("running_var") {
                running_var.push(Array1::from(data));
            } else {
                values.extend(data);
            }
        }
        let layout = Layout::new(&arch);
        Ok(ModNetParams {
            arch,
            init_seed,
            values,
            running_mean,
            running_var,
            layout,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModNetParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        ModNetParams {
            arch: self.arch.clone(),
            init_seed: self.init_seed,
            values: conv(&self.values),
            running_mean: self.running_mean.iter().map(|a| a.mapv(|x| U::lit(x.as_f64()))).collect(),
            running_var: self.running_var.iter().map(|a| a.mapv(|x| U::lit(x.as_f64()))).collect(),
            layout: self.layout.clone(),
        }
    }

    fn view(&self, range: &Range<usize>, rows: usize) -> ArrayView2<'_, T> {
        let data = &self.values[range.clone()];
        ArrayView2::from_shape((rows, data.len() / rows), data).expect("layout matches arch")
    }

    fn check_inputs(&self, channels: &[Array2<Complex<T>>]) -> Result<()> {
        if channels.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let n = self.arch.frame_len;
        for h in channels {
            if h.dim() != (n, n) {
                return Err(Error::Dimension(format!(
                    "channel matrix is {}x{} but the network expects {n}x{n}",
                    h.nrows(),
                    h.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn infer(&self, channels: &[Array2<Complex<T>>]) -> Result<Vec<Modem<T>>> {
        let (modems, _, _) = self.run(channels, false)?;
        Ok(modems)
    }

    /// Training-mode forward pass: batch norm normalizes with the batch
    /// statistics, which are folded into the running averages.
    pub fn forward_train(&mut self, channels: &[Array2<Complex<T>>]) -> Result<(Vec<Modem<T>>, Tape<T>)> {
        let (modems, tape, stats) = self.run(channels, true)?;
        let mom = T::lit(self.arch.bn_momentum);
        for (i, st) in stats.into_iter().enumerate() {
            let unbias = if st.count > 1 {
                T::count(st.count) / T::count(st.count - 1)
            } else {
                T::one()
            };
            let rm = &mut self.running_mean[i];
            rm.zip_mut_with(&st.mean, |r, &m| *r = (T::one() - mom) * *r + mom * m);
            let rv = &mut self.running_var[i];
            rv.zip_mut_with(&st.var, |r, &v| *r = (T::one() - mom) * *r + mom * v * unbias);
        }
        Ok((modems, tape))
    }

    /// Single-channel forward pass in either mode.
    pub fn forward(&mut self, h: &Array2<Complex<T>>, training: bool) -> Result<Modem<T>> {
        let batch = std::slice::from_ref(h);
        let mut out = if training {
            self.forward_train(batch)?.0
        } else {
            self.infer(batch)?
        };
        Ok(out.pop().expect("one output per input"))
    }

    fn run(&self, channels: &[Array2<Complex<T>>], training: bool) -> Result<(Vec<Modem<T>>, Tape<T>, Vec<BatchStats<T>>)> {
        self.check_inputs(channels)?;
        let arch = &self.arch;
        let geom = arch.geom();
        let slope = T::lit(arch.leaky_slope);
        let eps = T::lit(arch.bn_eps);
        let inputs: Vec<Array2<T>> = channels.iter().map(channel_image).collect();
        let mut tape = Tape {
            training,
            inputs,
            conv: Vec::with_capacity(arch.conv_channels.len()),
            dense_in: Vec::new(),
            raw: Array2::zeros((0, 0)),
        };
        let mut all_stats = Vec::new();

        for (layer, &width) in arch.conv_channels.iter().enumerate() {
            let w = self.view(&self.layout.conv_w[layer], width);
            let pre: Vec<Array2<T>> = (0..tape.batch_len())
                .into_par_iter()
                .map(|b| {
                    let col = nn::im2col_concat(geom, &tape.blocks(layer, b));
                    let mut z = Array2::<T>::zeros((width, geom.area()));
                    gemm(T::one(), &w, &col.view(), T::zero(), &mut z.view_mut());
                    z
                })
                .collect();
            let (mean, var) = if training {
                let st = nn::batch_stats(&pre);
                let mv = (st.mean.clone(), st.var.clone());
                all_stats.push(st);
                mv
            } else {
                (self.running_mean[layer].clone(), self.running_var[layer].clone())
            };
            let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
            let gamma = &self.values[self.layout.gamma[layer].clone()];
            let beta = &self.values[self.layout.beta[layer].clone()];
            let (xhat, act): (Vec<_>, Vec<_>) = pre
                .into_par_iter()
                .map(|mut z| {
                    let mut a = Array2::<T>::zeros(z.dim());
                    for c in 0..width {
                        let (mu, is, g, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
                        let mut zr = z.row_mut(c);
                        let mut ar = a.row_mut(c);
                        for (x, y) in zr.iter_mut().zip(ar.iter_mut()) {
                            *x = (*x - mu) * is;
                            *y = nn::leaky(g * *x + bt, slope);
                        }
                    }
                    (z, a)
                })
                .unzip();
            tape.conv.push(ConvCache { xhat, act, inv_std });
        }

        let last = tape.conv.last().expect("at least one convolution");
        let flat = last.act[0].len();
        let mut x = Array2::<T>::zeros((tape.batch_len(), flat));
        for (b, a) in last.act.iter().enumerate() {
            x.row_mut(b).as_slice_mut().unwrap().copy_from_slice(a.as_slice().unwrap());
        }
        let n_fc = arch.fc_widths.len();
        for j in 0..n_fc {
            let w = self.view(&self.layout.fc_w[j], arch.fc_widths[j]);
            let bias = &self.values[self.layout.fc_b[j].clone()];
            let mut z = nn::dense_forward(&x.view(), &w, bias);
            tape.dense_in.push(x);
            if j + 1 < n_fc {
                z.mapv_inplace(|v| nn::leaky(v, slope));
            }
            x = z;
        }
        tape.raw = x;

        let modems = tape
            .raw
            .rows()
            .into_iter()
            .map(|row| self.split_output(row.as_slice().unwrap()))
            .collect::<Result<Vec<_>>>()?;
        Ok((modems, tape, all_stats))
    }

    fn split_output(&self, raw: &[T]) -> Result<Modem<T>> {
        let (ml, m) = (self.arch.frame_len, self.arch.num_subcarriers);
        let n = ml * m;
        let complex = |re: &[T], im: &[T], rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |(r, c)| Complex::new(re[r * cols + c], im[r * cols + c]))
        };
        let phi = complex(&raw[..n], &raw[n..2 * n], ml, m);
        let psi_h = complex(&raw[2 * n..3 * n], &raw[3 * n..], m, ml);
        Modem::new(phi, psi_h)?.normalized()
    }

    /// Gradient of a loss with respect to every trainable value, given the
    /// loss gradients `(∂/∂Φ, ∂/∂Ψᴴ)` of each output modem in the batch.
    pub fn backward(&self, tape: &Tape<T>, grads: &[(Array2<Complex<T>>, Array2<Complex<T>>)]) -> Result<Vec<T>> {
        let arch = &self.arch;
        if grads.len() != tape.batch_len() {
            return Err(Error::Dimension(format!(
                "{} output gradients for a batch of {}",
                grads.len(),
                tape.batch_len()
            )));
        }
        let geom = arch.geom();
        let slope = T::lit(arch.leaky_slope);
        let batch = tape.batch_len();
        let mut grad = vec![T::zero(); self.layout.total];
        let n = arch.frame_len * arch.num_subcarriers;

        // energy normalization
        let mut dz = Array2::<T>::zeros(tape.raw.dim());
        for (b, (g_phi, g_psi)) in grads.iter().enumerate() {
            let raw = tape.raw.row(b);
            let raw = raw.as_slice().unwrap();
            let mut out = dz.row_mut(b);
            let out = out.as_slice_mut().unwrap();
            for (part, g, target) in [
                (0..2 * n, g_phi, arch.frame_len),
                (2 * n..4 * n, g_psi, arch.num_subcarriers),
            ] {
                let u = &raw[part.clone()];
                let norm = norm_of(u);
                let scale = T::count(target).sqrt() / norm;
                let g_flat: Vec<T> = g.iter().map(|z| z.re).chain(g.iter().map(|z| z.im)).collect();
                let proj = u.iter().zip(&g_flat).map(|(&a, &b)| a * b).sum::<T>() / (norm * norm);
                for ((d, &gi), &ui) in out[part].iter_mut().zip(&g_flat).zip(u) {
                    *d = scale * (gi - proj * ui);
                }
            }
        }

        // dense head
        let n_fc = arch.fc_widths.len();
        for j in (0..n_fc).rev() {
            let input = &tape.dense_in[j];
            let rows = arch.fc_widths[j];
            {
                let gw = &mut grad[self.layout.fc_w[j].clone()];
                let mut gw = ndarray::ArrayViewMut2::from_shape((rows, input.ncols()), gw).unwrap();
                gemm(T::one(), &dz.t(), &input.view(), T::zero(), &mut gw);
            }
            let gb = nn::column_sums(&dz);
            grad[self.layout.fc_b[j].clone()].copy_from_slice(gb.as_slice().unwrap());
            let w = self.view(&self.layout.fc_w[j], rows);
            let mut dx = dz.dot(&w);
            if j > 0 {
                dx.zip_mut_with(input, |d, &a| *d *= nn::leaky_grad(a, slope));
            }
            dz = dx;
        }

        // gradients w.r.t. each convolution's activations, per sample then layer
        let n_conv = arch.conv_channels.len();
        let mut d_act: Vec<Vec<Array2<T>>> = (0..batch)
            .map(|b| {
                let mut per_layer: Vec<Array2<T>> =
                    arch.conv_channels.iter().map(|&c| Array2::zeros((c, geom.area()))).collect();
                per_layer[n_conv - 1]
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(dz.row(b).as_slice().unwrap());
                per_layer
            })
            .collect();

        for layer in (0..n_conv).rev() {
            let width = arch.conv_channels[layer];
            let cache = &tape.conv[layer];
            let gamma = &self.values[self.layout.gamma[layer].clone()];
            let mut dy: Vec<Array2<T>> = d_act.iter_mut().map(|per| std::mem::take(&mut per[layer])).collect();
            for (d, a) in dy.iter_mut().zip(&cache.act) {
                d.zip_mut_with(a, |g, &v| *g *= nn::leaky_grad(v, slope));
            }
            let mut d_gamma = vec![0.0f64; width];
            let mut d_beta = vec![0.0f64; width];
            for (d, xh) in dy.iter().zip(&cache.xhat) {
                for c in 0..width {
                    d_gamma[c] += d.row(c).iter().zip(xh.row(c)).map(|(&g, &x)| (g * x).as_f64()).sum::<f64>();
                    d_beta[c] += d.row(c).iter().map(|g| g.as_f64()).sum::<f64>();
                }
            }
            let count = T::count(batch * geom.area());
            for (d, xh) in dy.iter_mut().zip(&cache.xhat) {
                for c in 0..width {
                    let k = gamma[c] * cache.inv_std[c];
                    let (dg, db) = (T::lit(d_gamma[c]), T::lit(d_beta[c]));
                    let mut row = d.row_mut(c);
                    if tape.training {
                        for (g, &x) in row.iter_mut().zip(xh.row(c)) {
                            *g = k * (*g - (db + x * dg) / count);
                        }
                    } else {
                        row.mapv_inplace(|g| g * k);
                    }
                }
            }
            for c in 0..width {
                grad[self.layout.gamma[layer].start + c] = T::lit(d_gamma[c]);
                grad[self.layout.beta[layer].start + c] = T::lit(d_beta[c]);
            }

            let w = self.view(&self.layout.conv_w[layer], width);
            let skip = INPUT_CHANNELS * geom.taps();
            let w_feat = w.slice(s![.., skip..]);
            let per_sample: Vec<Array2<T>> = dy
                .par_iter()
                .zip(d_act.par_iter_mut())
                .enumerate()
                .map(|(b, (d, earlier))| {
                    let col = nn::im2col_concat(geom, &tape.blocks(layer, b));
                    let mut gw = Array2::<T>::zeros(w.dim());
                    gemm(T::one(), &d.view(), &col.t(), T::zero(), &mut gw.view_mut());
                    drop(col);
                    if layer > 0 {
                        let mut dcol = Array2::<T>::zeros((w_feat.ncols(), geom.area()));
                        gemm(T::one(), &w_feat.t(), &d.view(), T::zero(), &mut dcol.view_mut());
                        let mut row0 = 0;
                        for acts in earlier[..layer].iter_mut() {
                            nn::col2im_add(geom, &dcol.view(), row0, &mut acts.view_mut());
                            row0 += acts.nrows() * geom.taps();
                        }
                    }
                    gw
                })
                .collect();
            let gw_total = &mut grad[self.layout.conv_w[layer].clone()];
            for gw in per_sample {
                for (t, &v) in gw_total.iter_mut().zip(gw.iter()) {
                    *t += v;
                }
            }
        }
        Ok(grad)
    }
}
