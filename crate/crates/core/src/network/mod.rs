//! Small feed-forward regressors over band spectra with exact
//! backpropagation, plus an optional domain discriminator.
//!
//! Activations are batch-major matrices: one row per sample. A row holds
//! `channels × length` values, channel-major; dense layers produce rows of
//! `units × 1`.

mod io;
mod optim;
mod train;

pub use io::{decode_model, encode_model, load_model, load_model_with_spec, model_file_size, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use optim::{Adam, AdamConfig, PlateauScheduler};
pub use train::{
    balanced_accuracy, bce_with_logits, discriminator_accuracy, evaluate_mse, infer_map, mse, train_adversarial,
    train_regressor, EpochRecord, TrainConfig, TrainHistory,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, streams};
use crate::scalar::Scalar;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { units: usize },
    /// Stride 1, no padding.
    Conv1d { channels: usize, kernel: usize },
    Relu,
    BatchNorm,
    Dropout { rate: f64 },
}

/// Generator layers; a single linear regression unit is always appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_bands: usize,
    pub layers: Vec<LayerSpec>,
    /// Adds a single-unit domain classifier over the last hidden features.
    pub discriminator: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Fcn,
    Cnn,
    DaFcn,
    DaCnn,
}

impl Variant {
    pub fn is_adversarial(self) -> bool {
        matches!(self, Variant::DaFcn | Variant::DaCnn)
    }

    pub fn spec(self, bands: usize) -> NetworkSpec {
        let mut spec = match self {
            Variant::Fcn | Variant::DaFcn => NetworkSpec::fcn(bands),
            Variant::Cnn | Variant::DaCnn => NetworkSpec::cnn(bands),
        };
        spec.discriminator = self.is_adversarial();
        spec
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcn => "fcn",
            Variant::Cnn => "cnn",
            Variant::DaFcn => "da-fcn",
            Variant::DaCnn => "da-cnn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcn" => Ok(Variant::Fcn),
            "cnn" => Ok(Variant::Cnn),
            "da-fcn" => Ok(Variant::DaFcn),
            "da-cnn" => Ok(Variant::DaCnn),
            _ => Err(Error::config(format!("unknown model variant {s:?}"))),
        }
    }
}

impl NetworkSpec {
    fn block(affine: LayerSpec) -> [LayerSpec; 4] {
        [affine, LayerSpec::Relu, LayerSpec::BatchNorm, LayerSpec::Dropout { rate: 0.2 }]
    }

    /// Three dense blocks of 64, 128 and 256 units.
    pub fn fcn(bands: usize) -> Self {
        let layers = [64, 128, 256].into_iter().flat_map(|units| Self::block(LayerSpec::Dense { units })).collect();
        Self { input_bands: bands, layers, discriminator: false }
    }

    /// Two kernel-2 convolution blocks with 16 and 32 channels.
    pub fn cnn(bands: usize) -> Self {
        let layers = [16, 32]
            .into_iter()
            .flat_map(|channels| Self::block(LayerSpec::Conv1d { channels, kernel: 2 }))
            .collect();
        Self { input_bands: bands, layers, discriminator: false }
    }

    pub fn with_discriminator(mut self, on: bool) -> Self {
        self.discriminator = on;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Dense { fan_in: usize, units: usize, w: usize, b: usize },
    Conv { cin: usize, cout: usize, kernel: usize, lin: usize, lout: usize, w: usize, b: usize },
    Relu { width: usize },
    BatchNorm { channels: usize, len: usize, gamma: usize, beta: usize, stats: usize },
    Dropout { width: usize, rate: f64 },
}

impl Layer {
    fn out_width(&self) -> usize {
        match *self {
            Layer::Dense { units, .. } => units,
            Layer::Conv { cout, lout, .. } => cout * lout,
            Layer::Relu { width } | Layer::Dropout { width, .. } => width,
            Layer::BatchNorm { channels, len, .. } => channels * len,
        }
    }
}

/// Single-unit affine map over the feature row.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Unit {
    w: usize,
    b: usize,
}

/// Parameters, batch-norm running statistics and topology of a network.
///
/// Parameters are one flat vector: generator layers, then the regression
/// head, then (if present) the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    head: Unit,
    disc: Option<Unit>,
    feature_width: usize,
    pub(crate) params: Vec<T>,
    pub(crate) buffers: Vec<T>,
}

/// Per-layer values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Col(Vec<T>),
    Norm { xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T> },
    Mask(Vec<T>),
}

/// Record of a training-mode forward pass, consumed by backpropagation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub batch: usize,
    inputs: Vec<Vec<T>>,
    caches: Vec<Cache<T>>,
    /// Last hidden features, `batch × feature_width`.
    pub features: Vec<T>,
    pub predictions: Vec<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with PyTorch-style default initialization.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let (layers, head, disc, feature_width, n_params, n_buffers) = plan(spec)?;
        let mut params = vec![T::zero(); n_params];
        let mut buffers = vec![T::zero(); n_buffers];
        let mut rng = rng_from_seed(derive_seed(seed, streams::INIT));
        let mut uniform = |slice: &mut [T], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            slice.iter_mut().for_each(|p| *p = T::lit(rng.gen_range(-bound..=bound)));
        };
        for layer in &layers {
            match *layer {
                Layer::Dense { fan_in, units, w, b } => {
                    uniform(&mut params[w..w + fan_in * units], fan_in);
                    uniform(&mut params[b..b + units], fan_in);
                }
                Layer::Conv { cin, cout, kernel, w, b, .. } => {
                    uniform(&mut params[w..w + cout * cin * kernel], cin * kernel);
                    uniform(&mut params[b..b + cout], cin * kernel);
                }
                Layer::BatchNorm { channels, gamma, stats, .. } => {
                    params[gamma..gamma + channels].iter_mut().for_each(|g| *g = T::one());
                    buffers[stats + channels..stats + 2 * channels].iter_mut().for_each(|v| *v = T::one());
                }
                Layer::Relu { .. } | Layer::Dropout { .. } => {}
            }
        }
        for unit in std::iter::once(head).chain(disc) {
            uniform(&mut params[unit.w..unit.w + feature_width], feature_width);
            uniform(&mut params[unit.b..unit.b + 1], feature_width);
        }
        Ok(Self { spec: spec.clone(), layers, head, disc, feature_width, params, buffers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_bands
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn has_discriminator(&self) -> bool {
        self.disc.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Batch-norm running means and variances.
    pub fn buffers(&self) -> &[T] {
        &self.buffers
    }

    /// Parameters updated by the regression objective: generator and head.
    pub fn generator_range(&self) -> std::ops::Range<usize> {
        0..self.disc.map_or(self.params.len(), |d| d.w)
    }

    pub fn discriminator_range(&self) -> std::ops::Range<usize> {
        self.disc.map_or(self.params.len()..self.params.len(), |d| d.w..self.params.len())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        Network {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            head: self.head,
            disc: self.disc,
            feature_width: self.feature_width,
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    fn check_input(&self, x: &[T], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.input_width() {
            return Err(Error::shape(format!(
                "input of {} values is not {batch} rows of {} bands",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass: batch statistics, dropout masks drawn
    /// from `rng`. Running statistics are left untouched; see
    /// [`Network::update_running_stats`].
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &[T], batch: usize, rng: &mut R) -> Result<Tape<T>> {
        self.check_input(x, batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let (out, cache) = self.layer_train(layer, &cur, batch, rng);
            inputs.push(cur);
            caches.push(cache);
            cur = out;
        }
        let predictions = self.unit(self.head, &cur, batch);
        Ok(Tape { batch, inputs, caches, features: cur, predictions })
    }

    /// Moves running batch-norm statistics towards those seen in `tape`.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        let m = T::lit(BATCHNORM_MOMENTUM);
        for (layer, cache) in self.layers.iter().zip(&tape.caches) {
            if let (Layer::BatchNorm { channels, len, stats, .. }, Cache::Norm { mean, var, .. }) = (layer, cache) {
                let n = tape.batch * len;
                let unbias = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
                for c in 0..*channels {
                    let rm = &mut self.buffers[stats + c];
                    *rm = (T::one() - m) * *rm + m * mean[c];
                    let rv = &mut self.buffers[stats + channels + c];
                    *rv = (T::one() - m) * *rv + m * var[c] * unbias;
                }
            }
        }
    }

    /// Evaluation-mode forward pass: running statistics, no dropout.
    /// Returns predictions and last hidden features.
    pub fn forward_eval(&self, x: &[T], batch: usize) -> Result<(Vec<T>, Vec<T>)> {
        self.check_input(x, batch)?;
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = self.layer_eval(layer, cur, batch);
        }
        let pred = self.unit(self.head, &cur, batch);
        Ok((pred, cur))
    }

    pub fn predict(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        Ok(self.forward_eval(x, batch)?.0)
    }

    /// Discriminator logits for a batch of hidden features.
    pub fn discriminate(&self, features: &[T], batch: usize) -> Result<Vec<T>> {
        let d = self.disc.ok_or_else(|| Error::config("network has no discriminator"))?;
        if features.len() != batch * self.feature_width {
            return Err(Error::shape("feature batch does not match the feature width"));
        }
        Ok(self.unit(d, features, batch))
    }

    fn unit(&self, u: Unit, x: &[T], batch: usize) -> Vec<T> {
        let mut y = vec![self.params[u.b]; batch];
        let w = &self.params[u.w..u.w + self.feature_width];
        T::gemm(batch, self.feature_width, 1, T::one(), x, (self.feature_width, 1), w, (1, 1), T::one(), &mut y, (1, 1));
        y
    }

    /// Accumulates head gradients for `d_pred` into `grads` and returns the
    /// gradient with respect to the features.
    pub fn backward_head(&self, features: &[T], d_pred: &[T], grads: &mut [T]) -> Vec<T> {
        self.unit_backward(self.head, features, d_pred, grads)
    }

    /// Like [`Network::backward_head`] for the discriminator logits.
    pub fn backward_discriminator(&self, features: &[T], d_logits: &[T], grads: &mut [T]) -> Result<Vec<T>> {
        let d = self.disc.ok_or_else(|| Error::config("network has no discriminator"))?;
        Ok(self.unit_backward(d, features, d_logits, grads))
    }

    fn unit_backward(&self, u: Unit, x: &[T], dy: &[T], grads: &mut [T]) -> Vec<T> {
        let fw = self.feature_width;
        let batch = dy.len();
        T::gemm(1, batch, fw, T::one(), dy, (batch, 1), x, (fw, 1), T::one(), &mut grads[u.w..u.w + fw], (fw, 1));
        grads[u.b] += dy.iter().copied().sum::<T>();
        let mut dx = vec![T::zero(); batch * fw];
        T::gemm(batch, 1, fw, T::one(), dy, (1, 1), &self.params[u.w..u.w + fw], (fw, 1), T::zero(), &mut dx, (fw, 1));
        dx
    }

    /// Backpropagates `d_features` through the generator layers of `tape`,
    /// accumulating into `grads`. Returns the gradient with respect to the
    /// network input.
    pub fn backward_generator(&self, tape: &Tape<T>, d_features: Vec<T>, grads: &mut [T]) -> Vec<T> {
        let mut dy = d_features;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            dy = self.layer_backward(layer, &tape.inputs[i], &tape.caches[i], dy, tape.batch, grads);
        }
        dy
    }

    fn layer_train<R: Rng + ?Sized>(&self, layer: &Layer, x: &[T], batch: usize, rng: &mut R) -> (Vec<T>, Cache<T>) {
        match *layer {
            Layer::Dense { .. } | Layer::Relu { .. } => (self.layer_eval(layer, x.to_vec(), batch), Cache::None),
            Layer::Conv { .. } => {
                let col = self.im2col(layer, x, batch);
                let y = self.conv_from_col(layer, &col, batch);
                (y, Cache::Col(col))
            }
            Layer::BatchNorm { channels, len, gamma, beta, .. } => {
                let n = (batch * len) as f64;
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for row in x.chunks_exact(channels * len) {
                    for c in 0..channels {
                        mean[c] += row[c * len..(c + 1) * len].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= T::lit(n));
                for row in x.chunks_exact(channels * len) {
                    for c in 0..channels {
                        var[c] += row[c * len..(c + 1) * len].iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= T::lit(n));
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BATCHNORM_EPS)).sqrt()).collect();
                let mut xhat = x.to_vec();
                let mut y = x.to_vec();
                for (hrow, yrow) in xhat.chunks_exact_mut(channels * len).zip(y.chunks_exact_mut(channels * len)) {
                    for c in 0..channels {
                        let (g, b) = (self.params[gamma + c], self.params[beta + c]);
                        for t in c * len..(c + 1) * len {
                            let h = (hrow[t] - mean[c]) * inv_std[c];
                            hrow[t] = h;
                            yrow[t] = g * h + b;
                        }
                    }
                }
                (y, Cache::Norm { xhat, inv_std, mean, var })
            }
            Layer::Dropout { rate, .. } => {
                if rate == 0.0 {
                    return (x.to_vec(), Cache::Mask(vec![T::one(); x.len()]));
                }
                let keep = T::lit(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.len()).map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() }).collect();
                let y = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                (y, Cache::Mask(mask))
            }
        }
    }

    fn layer_eval(&self, layer: &Layer, mut x: Vec<T>, batch: usize) -> Vec<T> {
        match *layer {
            Layer::Dense { fan_in, units, w, b } => {
                let bias = &self.params[b..b + units];
                let mut y: Vec<T> = Vec::with_capacity(batch * units);
                for _ in 0..batch {
                    y.extend_from_slice(bias);
                }
                let wm = &self.params[w..w + fan_in * units];
                T::gemm(batch, fan_in, units, T::one(), &x, (fan_in, 1), wm, (1, fan_in), T::one(), &mut y, (units, 1));
                y
            }
            Layer::Conv { .. } => {
                let col = self.im2col(layer, &x, batch);
                self.conv_from_col(layer, &col, batch)
            }
            Layer::Relu { .. } => {
                x.iter_mut().for_each(|v| {
                    if !(*v > T::zero()) {
                        *v = T::zero()
                    }
                });
                x
            }
            Layer::BatchNorm { channels, len, gamma, beta, stats } => {
                let scale: Vec<T> = (0..channels)
                    .map(|c| {
                        self.params[gamma + c] / (self.buffers[stats + channels + c] + T::lit(BATCHNORM_EPS)).sqrt()
                    })
                    .collect();
                let shift: Vec<T> =
                    (0..channels).map(|c| self.params[beta + c] - scale[c] * self.buffers[stats + c]).collect();
                for row in x.chunks_exact_mut(channels * len) {
                    for c in 0..channels {
                        row[c * len..(c + 1) * len].iter_mut().for_each(|v| *v = scale[c] * *v + shift[c]);
                    }
                }
                x
            }
            Layer::Dropout { .. } => x,
        }
    }

    fn im2col(&self, layer: &Layer, x: &[T], batch: usize) -> Vec<T> {
        let Layer::Conv { cin, kernel, lin, lout, .. } = *layer else { unreachable!() };
        let cols = cin * kernel;
        let mut col = vec![T::zero(); batch * lout * cols];
        for b in 0..batch {
            let xs = &x[b * cin * lin..(b + 1) * cin * lin];
            for t in 0..lout {
                let r = &mut col[(b * lout + t) * cols..(b * lout + t + 1) * cols];
                for ci in 0..cin {
                    r[ci * kernel..(ci + 1) * kernel].copy_from_slice(&xs[ci * lin + t..ci * lin + t + kernel]);
                }
            }
        }
        col
    }

    fn conv_from_col(&self, layer: &Layer, col: &[T], batch: usize) -> Vec<T> {
        let Layer::Conv { cin, cout, kernel, lout, w, b, .. } = *layer else { unreachable!() };
        let cols = cin * kernel;
        let wm = &self.params[w..w + cout * cols];
        let mut y = vec![T::zero(); batch * cout * lout];
        for s in 0..batch {
            let ys = &mut y[s * cout * lout..(s + 1) * cout * lout];
            for co in 0..cout {
                ys[co * lout..(co + 1) * lout].iter_mut().for_each(|v| *v = self.params[b + co]);
            }
            // ys (cout × lout) += W (cout × cols) · col_sᵀ (cols × lout)
            let cs = &col[s * lout * cols..(s + 1) * lout * cols];
            T::gemm(cout, cols, lout, T::one(), wm, (cols, 1), cs, (1, cols), T::one(), ys, (lout, 1));
        }
        y
    }

    fn layer_backward(&self, layer: &Layer, x: &[T], cache: &Cache<T>, mut dy: Vec<T>, batch: usize, grads: &mut [T]) -> Vec<T> {
        match (layer, cache) {
            (&Layer::Dense { fan_in, units, w, b }, _) => {
                T::gemm(units, batch, fan_in, T::one(), &dy, (1, units), x, (fan_in, 1), T::one(), &mut grads[w..w + units * fan_in], (fan_in, 1));
                for row in dy.chunks_exact(units) {
                    for (g, &d) in grads[b..b + units].iter_mut().zip(row) {
                        *g += d;
                    }
                }
                let mut dx = vec![T::zero(); batch * fan_in];
                let wm = &self.params[w..w + fan_in * units];
                T::gemm(batch, units, fan_in, T::one(), &dy, (units, 1), wm, (fan_in, 1), T::zero(), &mut dx, (fan_in, 1));
                dx
            }
            (&Layer::Conv { cin, cout, kernel, lin, lout, w, b }, Cache::Col(col)) => {
                let cols = cin * kernel;
                let wm = &self.params[w..w + cout * cols];
                let mut dx = vec![T::zero(); batch * cin * lin];
                let mut dcol = vec![T::zero(); lout * cols];
                for s in 0..batch {
                    let dys = &dy[s * cout * lout..(s + 1) * cout * lout];
                    let cs = &col[s * lout * cols..(s + 1) * lout * cols];
                    // dW (cout × cols) += dy_s (cout × lout) · col_s (lout × cols)
                    T::gemm(cout, lout, cols, T::one(), dys, (lout, 1), cs, (cols, 1), T::one(), &mut grads[w..w + cout * cols], (cols, 1));
                    for co in 0..cout {
                        grads[b + co] += dys[co * lout..(co + 1) * lout].iter().copied().sum::<T>();
                    }
                    // dcol (lout × cols) = dy_sᵀ (lout × cout) · W (cout × cols)
                    T::gemm(lout, cout, cols, T::one(), dys, (1, lout), wm, (cols, 1), T::zero(), &mut dcol, (cols, 1));
                    let dxs = &mut dx[s * cin * lin..(s + 1) * cin * lin];
                    for t in 0..lout {
                        for ci in 0..cin {
                            for j in 0..kernel {
                                dxs[ci * lin + t + j] += dcol[t * cols + ci * kernel + j];
                            }
                        }
                    }
                }
                dx
            }
            (Layer::Relu { .. }, _) => {
                for (d, &v) in dy.iter_mut().zip(x) {
                    if !(v > T::zero()) {
                        *d = T::zero();
                    }
                }
                dy
            }
            (&Layer::BatchNorm { channels, len, gamma, beta, .. }, Cache::Norm { xhat, inv_std, .. }) => {
                let n = T::lit((batch * len) as f64);
                let mut sum_d = vec![T::zero(); channels];
                let mut sum_dh = vec![T::zero(); channels];
                for (drow, hrow) in dy.chunks_exact(channels * len).zip(xhat.chunks_exact(channels * len)) {
                    for c in 0..channels {
                        for t in c * len..(c + 1) * len {
                            sum_d[c] += drow[t];
                            sum_dh[c] += drow[t] * hrow[t];
                        }
                    }
                }
                for c in 0..channels {
                    grads[gamma + c] += sum_dh[c];
                    grads[beta + c] += sum_d[c];
                }
                for (drow, hrow) in dy.chunks_exact_mut(channels * len).zip(xhat.chunks_exact(channels * len)) {
                    for c in 0..channels {
                        let g = self.params[gamma + c];
                        let k = inv_std[c] / n;
                        for t in c * len..(c + 1) * len {
                            // dxhat = g·dy; dx = k·(n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                            drow[t] = k * g * (n * drow[t] - sum_d[c] - hrow[t] * sum_dh[c]);
                        }
                    }
                }
                dy
            }
            (Layer::Dropout { .. }, Cache::Mask(mask)) => {
                dy.iter_mut().zip(mask).for_each(|(d, &m)| *d *= m);
                dy
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
}

type Plan = (Vec<Layer>, Unit, Option<Unit>, usize, usize, usize);

fn plan(spec: &NetworkSpec) -> Result<Plan> {
    if spec.input_bands == 0 {
        return Err(Error::config("network input must have at least one band"));
    }
    let (mut channels, mut len) = (1usize, spec.input_bands);
    let mut p = 0usize;
    let mut buffers = 0usize;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut take = |n: usize| {
        let at = p;
        p += n;
        at
    };
    for (i, l) in spec.layers.iter().enumerate() {
        let width = channels * len;
        let layer = match *l {
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(Error::config(format!("layer {i}: dense units must be >= 1")));
                }
                let w = take(width * units);
                let b = take(units);
                (channels, len) = (units, 1);
                Layer::Dense { fan_in: width, units, w, b }
            }
            LayerSpec::Conv1d { channels: cout, kernel } => {
                if cout == 0 || kernel == 0 || kernel > len {
                    return Err(Error::config(format!(
                        "layer {i}: conv1d needs channels >= 1 and 1 <= kernel <= input length {len}"
                    )));
                }
                let w = take(cout * channels * kernel);
                let b = take(cout);
                let lout = len - kernel + 1;
                let layer = Layer::Conv { cin: channels, cout, kernel, lin: len, lout, w, b };
                (channels, len) = (cout, lout);
                layer
            }
            LayerSpec::Relu => Layer::Relu { width },
            LayerSpec::BatchNorm => {
                let gamma = take(channels);
                let beta = take(channels);
                let stats = buffers;
                buffers += 2 * channels;
                Layer::BatchNorm { channels, len, gamma, beta, stats }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::config(format!("layer {i}: dropout rate {rate} must lie in [0, 1)")));
                }
                Layer::Dropout { width, rate }
            }
        };
        layers.push(layer);
    }
    let feature_width = layers.last().map_or(spec.input_bands, Layer::out_width);
    let head = Unit { w: take(feature_width), b: take(1) };
    let disc = spec.discriminator.then(|| Unit { w: take(feature_width), b: take(1) });
    Ok((layers, head, disc, feature_width, p, buffers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn fcn_parameter_count() {
        let net = Network::<f32>::new(&NetworkSpec::fcn(16), 0).unwrap();
        let affine = 16 * 64 + 64 + 64 * 128 + 128 + 128 * 256 + 256 + 256 + 1;
        assert_eq!(affine, 42_689);
        assert_eq!(net.parameter_count(), affine + 2 * (64 + 128 + 256));
        assert_eq!(net.buffers().len(), 896);
        let da = Network::<f32>::new(&NetworkSpec::fcn(16).with_discriminator(true), 0).unwrap();
        assert_eq!(da.parameter_count(), affine + 896 + 257);
        assert_eq!(da.discriminator_range().len(), 257);
    }

    #[test]
    fn cnn_feature_length_shrinks() {
        let net = Network::<f64>::new(&NetworkSpec::cnn(16), 0).unwrap();
        assert_eq!(net.feature_width(), 32 * 14);
        let x = random_input(3 * 16, 1);
        let (p, f) = net.forward_eval(&x, 3).unwrap();
        assert_eq!((p.len(), f.len()), (3, 3 * 448));
    }

    #[test]
    fn zero_weights_predict_zero() {
        let mut net = Network::<f64>::new(&NetworkSpec::fcn(16), 3).unwrap();
        net.params.iter_mut().for_each(|p| *p = 0.0);
        let p = net.predict(&random_input(5 * 16, 2), 5).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_dense() {
        let spec = NetworkSpec { input_bands: 2, layers: vec![], discriminator: false };
        let mut net = Network::<f64>::new(&spec, 0).unwrap();
        net.params.copy_from_slice(&[1.0, 1.0, 0.0]);
        assert_eq!(net.predict(&[0.3, 0.7], 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = |layers| NetworkSpec { input_bands: 16, layers, discriminator: false };
        assert!(Network::<f32>::new(&bad(vec![LayerSpec::Conv1d { channels: 4, kernel: 17 }]), 0).is_err());
        assert!(Network::<f32>::new(&bad(vec![LayerSpec::Dropout { rate: 1.0 }]), 0).is_err());
        assert!(Network::<f32>::new(&bad(vec![LayerSpec::Dense { units: 0 }]), 0).is_err());
        let net = Network::<f32>::new(&NetworkSpec::fcn(16), 0).unwrap();
        assert!(matches!(net.predict(&[0.0; 15], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let spec = NetworkSpec {
            input_bands: 6,
            layers: vec![LayerSpec::Dense { units: 6 }, LayerSpec::BatchNorm],
            discriminator: false,
        };
        let net = Network::<f64>::new(&spec, 0).unwrap();
        let x: Vec<f64> = random_input(64 * 6, 9).iter().map(|v| 3.0 * v + 2.0).collect();
        let tape = net.forward_train(&x, 64, &mut rng_from_seed(0)).unwrap();
        for c in 0..6 {
            let col: Vec<f64> = (0..64).map(|b| tape.features[b * 6 + c]).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_follow_batches() {
        let spec = NetworkSpec {
            input_bands: 2,
            layers: vec![LayerSpec::Dense { units: 2 }, LayerSpec::BatchNorm],
            discriminator: false,
        };
        let mut net = Network::<f64>::new(&spec, 0).unwrap();
        net.params[..6].copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let x = [1.0, 10.0, 3.0, 14.0];
        for _ in 0..400 {
            let tape = net.forward_train(&x, 2, &mut rng_from_seed(0)).unwrap();
            net.update_running_stats(&tape);
        }
        assert!((net.buffers()[0] - 2.0).abs() < 1e-9 && (net.buffers()[1] - 12.0).abs() < 1e-9);
        // unbiased variances of {1, 3} and {10, 14}
        assert!((net.buffers()[2] - 2.0).abs() < 1e-9 && (net.buffers()[3] - 8.0).abs() < 1e-9);
        let a = net.predict(&x, 2).unwrap();
        assert_eq!(a, net.predict(&x, 2).unwrap());
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        let spec = NetworkSpec { input_bands: 8, layers: vec![LayerSpec::Dropout { rate: 0.2 }], discriminator: false };
        let net = Network::<f64>::new(&spec, 4).unwrap();
        let x: Vec<f64> = random_input(8, 5).iter().map(|v| v + 2.0).collect();
        let eval = net.predict(&x, 1).unwrap()[0];
        let mut rng = rng_from_seed(6);
        let reps = 20_000;
        let mean = (0..reps).map(|_| net.forward_train(&x, 1, &mut rng).unwrap().predictions[0]).sum::<f64>() / reps as f64;
        assert!((mean - eval).abs() < 0.01 * eval.abs().max(1.0), "{mean} vs {eval}");
    }

    fn loss_of(net: &Network<f64>, x: &[f64], batch: usize, coef: &[f64], dcoef: &[f64], seed: u64) -> f64 {
        let tape = net.forward_train(x, batch, &mut rng_from_seed(seed)).unwrap();
        let mut l: f64 = tape.predictions.iter().zip(coef).map(|(p, c)| p * c).sum();
        if net.has_discriminator() {
            let logits = net.discriminate(&tape.features, batch).unwrap();
            l += logits.iter().zip(dcoef).map(|(p, c)| p * c).sum::<f64>();
        }
        l
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = NetworkSpec {
            input_bands: 7,
            layers: vec![
                LayerSpec::Conv1d { channels: 3, kernel: 2 },
                LayerSpec::Relu,
                LayerSpec::BatchNorm,
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::Dense { units: 5 },
                LayerSpec::Relu,
                LayerSpec::BatchNorm,
                LayerSpec::Dropout { rate: 0.2 },
            ],
            discriminator: true,
        };
        let mut net = Network::<f64>::new(&spec, 11).unwrap();
        let batch = 4;
        let mut x = random_input(batch * 7, 12);
        let coef = random_input(batch, 13);
        let dcoef = random_input(batch, 14);
        let tape = net.forward_train(&x, batch, &mut rng_from_seed(15)).unwrap();
        let mut grads = vec![0.0; net.parameter_count()];
        let mut df = net.backward_head(&tape.features, &coef, &mut grads);
        let dd = net.backward_discriminator(&tape.features, &dcoef, &mut grads).unwrap();
        df.iter_mut().zip(&dd).for_each(|(a, b)| *a += b);
        let dx = net.backward_generator(&tape, df, &mut grads);
        let h = 1e-6;
        let check = |a: f64, n: f64, what: &str| {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
            assert!(rel < 1e-4, "{what}: analytic {a} numeric {n}");
        };
        for i in 0..net.parameter_count() {
            let p0 = net.params[i];
            net.params[i] = p0 + h;
            let up = loss_of(&net, &x, batch, &coef, &dcoef, 15);
            net.params[i] = p0 - h;
            let down = loss_of(&net, &x, batch, &coef, &dcoef, 15);
            net.params[i] = p0;
            check(grads[i], (up - down) / (2.0 * h), &format!("param {i}"));
        }
        for i in 0..x.len() {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = loss_of(&net, &x, batch, &coef, &dcoef, 15);
            x[i] = x0 - h;
            let down = loss_of(&net, &x, batch, &coef, &dcoef, 15);
            x[i] = x0;
            check(dx[i], (up - down) / (2.0 * h), &format!("input {i}"));
        }
    }
}
