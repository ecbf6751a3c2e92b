//! Feed-forward regressor that predicts the D-score from an element's raw input.
//!
//! Hidden layers use ReLU or tanh, the single output unit is logistic, and
//! training minimizes `1/(2N) * sum (pred - target)^2` with plain mini-batch
//! gradient descent. Initialization and shuffling draw from two independent
//! ChaCha streams derived from the configured seed, so a run is reproducible
//! bit for bit.
//!
//! Model file (little endian): magic `DDLM`, `u32` layer count, `u32` layer
//! sizes, `u32` activation (0 = relu, 1 = tanh), parameters as `f64` (per
//! layer: weights row-major `[out][in]`, then biases), followed by a training
//! trailer `f64 learning_rate, u64 batch_size, u64 epochs, u64 seed,
//! f64 weight_init_scale`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ByteReader, Corpus, DiscriminabilityRecord};
use crate::error::{DdlError, Result};
use crate::scalar::{logistic, Scalar};

const MODEL_MAGIC: &[u8; 4] = b"DDLM";
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            c => Err(DdlError::Format(format!("unknown activation code {c}"))),
        }
    }

    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and its output `a`.
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }
}

impl FromStr for Activation {
    type Err = DdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(DdlError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorConfig {
    /// Starts with the raw-input dimension and ends with 1.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_init_scale: f64,
}

impl RegressorConfig {
    /// Defaults: layers `[d_raw, 64, 32, 1]`, ReLU, learning rate 1.0,
    /// batch 32, 200 epochs.
    pub fn with_input(d_raw: usize) -> Self {
        Self {
            layer_sizes: vec![d_raw, 64, 32, 1],
            hidden_activation: Activation::Relu,
            learning_rate: 1.0,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            weight_init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 3 {
            return Err(DdlError::Config(
                "regressor needs at least one hidden layer".into(),
            ));
        }
        if sizes.last() != Some(&1) {
            return Err(DdlError::Config("last layer size must be 1".into()));
        }
        if sizes.contains(&0) {
            return Err(DdlError::Config("layer sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DdlError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DdlError::Config("batch size and epochs must be positive".into()));
        }
        if !(self.weight_init_scale > 0.0 && self.weight_init_scale.is_finite()) {
            return Err(DdlError::Config("weight_init_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn parameter_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<T> {
    n_in: usize,
    n_out: usize,
    /// Row-major `[n_out][n_in]`.
    weights: Vec<T>,
    biases: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn forward(&self, input: &[T], z: &mut Vec<T>) {
        z.clear();
        z.extend(self.weights.chunks_exact(self.n_in).zip(&self.biases).map(
            |(row, &b)| row.iter().zip(input).fold(b, |acc, (&w, &x)| acc + w * x),
        ));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor<T> {
    config: RegressorConfig,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Regressor<T> {
    /// Uniform(-a, a) weights with `a = weight_init_scale / sqrt(fan_in)`, zero biases.
    pub fn init(config: RegressorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let a = config.weight_init_scale / (n_in as f64).sqrt();
                let weights = (0..n_in * n_out)
                    .map(|_| T::of(rng.random_range(-a..a)))
                    .collect();
                Layer {
                    n_in,
                    n_out,
                    weights,
                    biases: vec![T::zero(); n_out],
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Every weight and bias zero; predicts 0.5 everywhere.
    pub fn zeros(config: RegressorConfig) -> Result<Self> {
        config.validate()?;
        let params = vec![T::zero(); config.parameter_count()];
        Self::from_parameters(config, &params)
    }

    pub fn from_parameters(config: RegressorConfig, params: &[T]) -> Result<Self> {
        config.validate()?;
        if params.len() != config.parameter_count() {
            return Err(DdlError::Domain(format!(
                "expected {} parameters, got {}",
                config.parameter_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(DdlError::Domain("parameters must be finite".into()));
        }
        let mut rest = params;
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let (weights, tail) = rest.split_at(n_in * n_out);
                let (biases, tail) = tail.split_at(n_out);
                rest = tail;
                Layer {
                    n_in,
                    n_out,
                    weights: weights.to_vec(),
                    biases: biases.to_vec(),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.config.parameter_count()
    }

    /// Flattened parameters in file order.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.config.input_dim() {
            return Err(DdlError::Domain(format!(
                "raw input has length {}, regressor expects {}",
                input.len(),
                self.config.input_dim()
            )));
        }
        Ok(())
    }

    /// Predicted D-score, strictly inside (0, 1).
    pub fn predict(&self, input: &[T]) -> Result<T> {
        self.check_input(input)?;
        let mut a = input.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&a, &mut z);
            a.clear();
            if i == last {
                a.push(logistic(z[0]));
            } else {
                let act = self.config.hidden_activation;
                a.extend(z.iter().map(|&v| act.apply(v)));
            }
        }
        Ok(a[0])
    }

    /// Forward pass keeping pre-activations and activations of every layer.
    fn forward_cached(&self, input: &[T], zs: &mut [Vec<T>], acts: &mut [Vec<T>]) {
        acts[0].clear();
        acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        let act = self.config.hidden_activation;
        for (i, layer) in self.layers.iter().enumerate() {
            let (prev, next) = acts.split_at_mut(i + 1);
            layer.forward(&prev[i], &mut zs[i]);
            next[0].clear();
            if i == last {
                next[0].push(logistic(zs[i][0]));
            } else {
                next[0].extend(zs[i].iter().map(|&v| act.apply(v)));
            }
        }
    }

    /// Loss and flattened gradient over `batch`, in [`Self::parameters`] order.
    pub fn loss_and_gradient(&self, batch: &[(&[T], T)]) -> Result<(T, Vec<T>)> {
        if batch.is_empty() {
            return Err(DdlError::Precondition("empty batch".into()));
        }
        let mut scratch = Scratch::new(self);
        let loss = self.accumulate_gradient(batch, &mut scratch)?;
        let mut flat = Vec::with_capacity(self.num_parameters());
        for (gw, gb) in scratch.grad_w.iter().zip(&scratch.grad_b) {
            flat.extend_from_slice(gw);
            flat.extend_from_slice(gb);
        }
        Ok((loss, flat))
    }

    fn accumulate_gradient(&self, batch: &[(&[T], T)], s: &mut Scratch<T>) -> Result<T> {
        s.zero();
        let n = T::of(batch.len() as f64);
        let half = T::of(0.5);
        let act = self.config.hidden_activation;
        let mut loss = T::zero();
        for &(input, target) in batch {
            self.check_input(input)?;
            self.forward_cached(input, &mut s.zs, &mut s.acts);
            let out = s.acts[self.layers.len()][0];
            let logit = s.zs[self.layers.len() - 1][0].abs();
            if logit.is_nan() || logit > s.max_logit {
                s.max_logit = logit;
            }
            let err = out - target;
            loss += half * err * err / n;
            s.delta.clear();
            s.delta.push(err / n * out * (T::one() - out));
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input_act = &s.acts[l];
                for (o, &d) in s.delta.iter().enumerate() {
                    s.grad_b[l][o] += d;
                    let row = &mut s.grad_w[l][o * layer.n_in..(o + 1) * layer.n_in];
                    for (g, &x) in row.iter_mut().zip(input_act) {
                        *g += d * x;
                    }
                }
                if l > 0 {
                    s.next_delta.clear();
                    s.next_delta.resize(layer.n_in, T::zero());
                    for (o, &d) in s.delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                        for (nd, &w) in s.next_delta.iter_mut().zip(row) {
                            *nd += w * d;
                        }
                    }
                    for (j, nd) in s.next_delta.iter_mut().enumerate() {
                        *nd *= act.derivative(s.zs[l - 1][j], s.acts[l][j]);
                    }
                    std::mem::swap(&mut s.delta, &mut s.next_delta);
                }
            }
        }
        Ok(loss)
    }

    fn apply_step(&mut self, s: &Scratch<T>, lr: T) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(s.grad_w.iter().zip(&s.grad_b)) {
            for (w, &g) in layer.weights.iter_mut().zip(gw) {
                *w -= lr * g;
            }
            for (b, &g) in layer.biases.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|p| p.is_finite()))
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Regressor<U> {
        Regressor {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    n_in: l.n_in,
                    n_out: l.n_out,
                    weights: l.weights.iter().map(|w| U::of(w.as_f64())).collect(),
                    biases: l.biases.iter().map(|b| U::of(b.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

struct Scratch<T> {
    zs: Vec<Vec<T>>,
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    next_delta: Vec<T>,
    grad_w: Vec<Vec<T>>,
    grad_b: Vec<Vec<T>>,
    /// Largest output-logit magnitude seen since the last reset.
    max_logit: T,
}

impl<T: Scalar> Scratch<T> {
    fn new(model: &Regressor<T>) -> Self {
        let n = model.layers.len();
        Self {
            zs: vec![Vec::new(); n],
            acts: vec![Vec::new(); n + 1],
            delta: Vec::new(),
            next_delta: Vec::new(),
            grad_w: model.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            grad_b: model.layers.iter().map(|l| vec![T::zero(); l.biases.len()]).collect(),
            max_logit: T::zero(),
        }
    }

    fn zero(&mut self) {
        for g in self.grad_w.iter_mut().chain(self.grad_b.iter_mut()) {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
        self.max_logit = T::zero();
    }
}

/// `1/(2N) * sum (pred - target)^2`.
pub fn mse_loss<T: Scalar>(predictions: &[T], targets: &[T]) -> Result<T> {
    if predictions.len() != targets.len() {
        return Err(DdlError::Domain(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(DdlError::Domain("mse of an empty batch".into()));
    }
    let n = T::of(predictions.len() as f64);
    let sum: T = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / (T::of(2.0) * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Training-set loss before the first step.
    pub initial_loss: f64,
    /// Training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "loss"])?;
        w.write_record(["0".to_string(), crate::data::fmt_real(self.initial_loss)])?;
        for (i, l) in self.epoch_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), crate::data::fmt_real(*l)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn dataset_loss<T: Scalar>(model: &Regressor<T>, inputs: &[&[T]], targets: &[T]) -> Result<T> {
    let preds = inputs
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<Vec<T>>>()?;
    mse_loss(&preds, targets)
}

/// Continues training `model` in place with its own configuration.
///
/// Fails with a divergence error naming the step once the loss or a
/// parameter is non-finite, or an output logit is too large for its
/// exponential to be represented.
pub fn train_model<T: Scalar>(
    model: &mut Regressor<T>,
    inputs: &[&[T]],
    targets: &[T],
) -> Result<TrainReport> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(DdlError::Precondition(format!(
            "{} inputs for {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let config = model.config.clone();
    let lr = T::of(config.learning_rate);
    let logit_limit = T::max_value().ln();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut scratch = Scratch::new(model);
    let mut batch: Vec<(&[T], T)> = Vec::with_capacity(config.batch_size);

    let initial_loss = dataset_loss(model, inputs, targets)?.as_f64();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            batch.clear();
            batch.extend(chunk.iter().map(|&i| (inputs[i], targets[i])));
            let loss = model.accumulate_gradient(&batch, &mut scratch)?;
            model.apply_step(&scratch, lr);
            // a logit whose exponential overflows has saturated the output
            let saturated = scratch.max_logit.is_nan() || scratch.max_logit > logit_limit;
            if !loss.is_finite() || !model.all_finite() || saturated {
                return Err(DdlError::Divergence {
                    step,
                    loss: loss.as_f64(),
                });
            }
        }
        let loss = dataset_loss(model, inputs, targets)?.as_f64();
        if !loss.is_finite() {
            return Err(DdlError::Divergence { step, loss });
        }
        log::debug!("epoch {} loss {loss:.6e}", epoch + 1);
        epoch_losses.push(loss);
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(initial_loss);
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
        steps: step,
    })
}

/// Pairs every element with its D-score target by element id.
pub fn training_pairs<'a, T: Scalar>(
    corpus: &'a Corpus<T>,
    scores: &[DiscriminabilityRecord<T>],
) -> Result<(Vec<&'a [T]>, Vec<T>)> {
    let by_id: HashMap<&str, T> = scores
        .iter()
        .map(|r| (r.element_id.as_str(), r.d_score))
        .collect();
    let mut inputs = Vec::with_capacity(corpus.len());
    let mut targets = Vec::with_capacity(corpus.len());
    for e in corpus.elements() {
        let target = by_id.get(e.element_id.as_str()).ok_or_else(|| {
            DdlError::Precondition(format!("no d_score target for element {}", e.element_id))
        })?;
        inputs.push(e.raw_input.as_slice());
        targets.push(*target);
    }
    Ok((inputs, targets))
}

/// Initializes a regressor from `config` and fits it to the corpus' D-scores.
pub fn train<T: Scalar>(
    corpus: &Corpus<T>,
    scores: &[DiscriminabilityRecord<T>],
    config: RegressorConfig,
) -> Result<(Regressor<T>, TrainReport)> {
    if config.input_dim() != corpus.d_raw() {
        return Err(DdlError::Config(format!(
            "first layer size {} does not match d_raw {}",
            config.input_dim(),
            corpus.d_raw()
        )));
    }
    let (inputs, targets) = training_pairs(corpus, scores)?;
    let mut model = Regressor::init(config)?;
    let report = train_model(&mut model, &inputs, &targets)?;
    log::info!(
        "trained {} steps: loss {:.6e} -> {:.6e}",
        report.steps,
        report.initial_loss,
        report.final_loss
    );
    Ok((model, report))
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_check<T: Scalar>(model: &Regressor<T>, batch: &[(&[T], T)]) -> Result<T> {
    let (_, analytic) = model.loss_and_gradient(batch)?;
    let h = T::of(FD_STEP);
    let floor = T::of(FD_FLOOR);
    let mut probe = model.clone();
    let base = model.parameters();
    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let plus = perturbed_loss(&mut probe, &base, i, h, batch)?;
        let minus = perturbed_loss(&mut probe, &base, i, -h, batch)?;
        let numeric = (plus - minus) / (T::of(2.0) * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn perturbed_loss<T: Scalar>(
    probe: &mut Regressor<T>,
    base: &[T],
    index: usize,
    delta: T,
    batch: &[(&[T], T)],
) -> Result<T> {
    for (p, (i, &b)) in probe.parameters_mut().zip(base.iter().enumerate()) {
        *p = if i == index { b + delta } else { b };
    }
    let preds = batch
        .iter()
        .map(|(x, _)| probe.predict(x))
        .collect::<Result<Vec<T>>>()?;
    let targets: Vec<T> = batch.iter().map(|&(_, t)| t).collect();
    mse_loss(&preds, &targets)
}

pub fn save_model<T: Scalar>(model: &Regressor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_model<T: Scalar, W: Write>(model: &Regressor<T>, mut w: W) -> Result<()> {
    let c = &model.config;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(c.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &c.layer_sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&c.hidden_activation.code().to_le_bytes())?;
    for p in model.parameters() {
        w.write_all(&p.as_f64().to_le_bytes())?;
    }
    w.write_all(&c.learning_rate.to_le_bytes())?;
    w.write_all(&(c.batch_size as u64).to_le_bytes())?;
    w.write_all(&(c.epochs as u64).to_le_bytes())?;
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&c.weight_init_scale.to_le_bytes())?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Regressor<T>> {
    read_model(BufReader::new(File::open(path)?))
}

pub fn read_model<T: Scalar, R: Read>(reader: R) -> Result<Regressor<T>> {
    let mut r = ByteReader::new(reader);
    if &r.bytes::<4>()? != MODEL_MAGIC {
        return Err(DdlError::Format("bad model magic, expected DDLM".into()));
    }
    let n_layers = r.u32()?;
    if !(3..=64).contains(&n_layers) {
        return Err(DdlError::Format(format!("implausible layer count {n_layers}")));
    }
    let layer_sizes = (0..n_layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let hidden_activation = Activation::from_code(r.u32()? as u32)?;
    let count: usize = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let params = (0..count)
        .map(|_| r.f64().map(T::of))
        .collect::<Result<Vec<T>>>()?;
    let config = RegressorConfig {
        layer_sizes,
        hidden_activation,
        learning_rate: r.f64()?,
        batch_size: r.u64()? as usize,
        epochs: r.u64()? as usize,
        seed: r.u64()?,
        weight_init_scale: r.f64()?,
    };
    r.finish()?;
    config
        .validate()
        .map_err(|e| DdlError::Format(format!("invalid stored config: {e}")))?;
    Regressor::from_parameters(config, &params).map_err(|e| DdlError::Format(e.to_string()))
}
