//! Latent-variable model: MLP encoder to a diagonal Gaussian, MLP decoder to a
//! likelihood head, trained on the penalized negative ELBO with Adam.

use std::fs;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{Error, Result};
use crate::heads::{LikelihoodHead, LikelihoodKind};
use crate::likelihood::{kl_diag_gaussian, PenaltyConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::simulate::{rng_stream, SimRng};

const INIT_STREAM: u64 = 100;
const SHUFFLE_STREAM: u64 = 101;
const NOISE_STREAM: u64 = 102;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
        }
    }

    /// Multiply `d` by the derivative, given the activated output `y`.
    fn backprop(self, d: &mut Array2<f64>, y: &Array2<f64>) {
        match self {
            Activation::Relu => d.zip_mut_with(y, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => d.zip_mut_with(y, |g, &v| *g *= 1.0 - v * v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Number of categories K.
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default)]
    pub hidden_activation: Activation,
    pub output_head: LikelihoodKind,
}

impl NetworkSpec {
    /// 128/128 hidden layers on both sides and a 10-dimensional latent.
    pub fn new(input_dim: usize, output_head: LikelihoodKind) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![128, 128],
            decoder_hidden: vec![128, 128],
            latent_dim: 10,
            hidden_activation: Activation::Relu,
            output_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::Validation(format!("need at least 2 categories, got {}", self.input_dim)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Validation("latent dimension must be at least 1".into()));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return Err(Error::Validation("hidden widths must be at least 1".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut build = |dims: Vec<usize>| -> Vec<Slot> {
            dims.windows(2)
                .map(|w| {
                    let slot = Slot {
                        n_in: w[0],
                        n_out: w[1],
                        w: offset,
                        b: offset + w[0] * w[1],
                    };
                    offset += w[0] * w[1] + w[1];
                    slot
                })
                .collect()
        };
        let mut enc = vec![self.input_dim];
        enc.extend(&self.encoder_hidden);
        enc.push(2 * self.latent_dim);
        let mut dec = vec![self.latent_dim];
        dec.extend(&self.decoder_hidden);
        dec.push(self.input_dim);
        let encoder = build(enc);
        let decoder = build(dec);
        Layout {
            encoder,
            decoder,
            total: offset,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }
}

/// One affine layer inside the flat weight vector: `W` is `n_in x n_out`
/// row-major at `w`, the bias follows at `b`.
#[derive(Debug, Clone, Copy)]
struct Slot {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Slot {
    fn weight<'a>(&self, flat: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.n_in, self.n_out), &flat[self.w..self.b]).expect("layout")
    }

    fn bias<'a>(&self, flat: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&flat[self.b..self.b + self.n_out])
    }

    fn weight_mut<'a>(&self, flat: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.n_in, self.n_out), &mut flat[self.w..self.b]).expect("layout")
    }

    fn bias_mut<'a>(&self, flat: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut flat[self.b..self.b + self.n_out])
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Slot>,
    decoder: Vec<Slot>,
    total: usize,
}

/// Encoder and decoder weights in one flat vector (encoder layers first,
/// each as weight then bias) plus the Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub weights: Vec<f64>,
    pub moments: AdamState,
}

impl NetworkParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut rng = rng_stream(seed, INIT_STREAM);
        let mut weights = vec![0.0; layout.total];
        for slot in layout.encoder.iter().chain(&layout.decoder) {
            let bound = 1.0 / (slot.n_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("positive bound");
            for w in &mut weights[slot.w..slot.b + slot.n_out] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            moments: AdamState::new(layout.total),
            weights,
        })
    }

    pub fn from_weights(spec: NetworkSpec, weights: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_params();
        if weights.len() != n {
            return Err(Error::Shape(format!("spec needs {n} weights, got {}", weights.len())));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Validation(format!("weight {i} is not finite")));
        }
        Ok(Self {
            spec,
            moments: AdamState::new(n),
            weights,
        })
    }

    fn layout(&self) -> Layout {
        self.spec.layout()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Forward pass through `slots`; returns the last layer's linear output and
/// the input of every layer.
fn mlp_forward(flat: &[f64], slots: &[Slot], act: Activation, x: Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
    let mut inputs = Vec::with_capacity(slots.len());
    let mut h = x;
    for (l, slot) in slots.iter().enumerate() {
        let mut out = h.dot(&slot.weight(flat));
        out += &slot.bias(flat);
        if l + 1 < slots.len() {
            act.apply(&mut out);
        }
        inputs.push(h);
        h = out;
    }
    (h, inputs)
}

/// Accumulates weight gradients into `grad` and returns the gradient with
/// respect to the network input.
fn mlp_backward(
    flat: &[f64],
    slots: &[Slot],
    act: Activation,
    inputs: &[Array2<f64>],
    d_out: Array2<f64>,
    grad: &mut [f64],
) -> Array2<f64> {
    let mut d = d_out;
    for (l, slot) in slots.iter().enumerate().rev() {
        let x = &inputs[l];
        general_mat_mul(1.0, &x.t(), &d, 1.0, &mut slot.weight_mut(grad));
        let mut gb = slot.bias_mut(grad);
        gb += &d.sum_axis(Axis(0));
        let mut dx = d.dot(&slot.weight(flat).t());
        if l > 0 {
            act.backprop(&mut dx, x);
        }
        d = dx;
    }
    d
}

fn encoder_input(rows: &[&[u32]], k: usize) -> Array2<f64> {
    let mut x = Array2::zeros((rows.len(), k));
    for (mut xr, r) in x.rows_mut().into_iter().zip(rows) {
        for (v, &c) in xr.iter_mut().zip(r.iter()) {
            *v = (c as f64).ln_1p();
        }
    }
    x
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if let Some((idx, v)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            epoch: 0,
            detail: format!("{what} entry {idx:?} is {v}"),
        });
    }
    Ok(())
}

fn encode_rows(params: &NetworkParams, rows: &[&[u32]]) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let layout = params.layout();
    let x = encoder_input(rows, params.spec.input_dim);
    let (out, inputs) = mlp_forward(&params.weights, &layout.encoder, params.spec.hidden_activation, x);
    check_finite(&out, "encoder output")?;
    Ok((out, inputs))
}

fn decode_latent(params: &NetworkParams, z: Array2<f64>) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let layout = params.layout();
    let (out, inputs) = mlp_forward(&params.weights, &layout.decoder, params.spec.hidden_activation, z);
    check_finite(&out, "decoder output")?;
    Ok((out, inputs))
}

fn check_row(params: &NetworkParams, c: &[u32]) -> Result<()> {
    if c.len() != params.spec.input_dim {
        return Err(Error::Shape(format!(
            "row has {} categories, network {}",
            c.len(),
            params.spec.input_dim
        )));
    }
    Ok(())
}

/// Posterior mean and log-variance for one observation; the counts enter
/// the first layer as `ln(1 + c)`.
pub fn encode(c: &[u32], params: &NetworkParams) -> Result<PosteriorParams> {
    check_row(params, c)?;
    let (out, _) = encode_rows(params, &[c])?;
    let d = params.spec.latent_dim;
    Ok(PosteriorParams {
        mean: out.slice(s![0, ..d]).to_vec(),
        log_var: out.slice(s![0, d..]).to_vec(),
    })
}

/// `z = mean + exp(log_var / 2) * eps` with `eps ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(post: &PosteriorParams, rng: &mut R) -> Vec<f64> {
    post.mean
        .iter()
        .zip(&post.log_var)
        .map(|(&m, &lv)| {
            let e: f64 = StandardNormal.sample(rng);
            m + (0.5 * lv).exp() * e
        })
        .collect()
}

/// Head output for a latent vector.
pub fn decode(z: &[f64], params: &NetworkParams) -> Result<Vec<f64>> {
    if z.len() != params.spec.latent_dim {
        return Err(Error::Shape(format!("latent has {} dims, network {}", z.len(), params.spec.latent_dim)));
    }
    let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("shape");
    let (pre, _) = decode_latent(params, z)?;
    let mut out = vec![0.0; params.spec.input_dim];
    params.spec.output_head.head().activate(pre.as_slice().expect("standard layout"), &mut out);
    Ok(out)
}

/// Loss terms summed over the rows of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub kl: f64,
    pub nll: f64,
    pub penalty: f64,
    /// Penalty weight in force.
    pub weight: f64,
    pub total: f64,
    /// Entries whose rectified output sits below a positive count.
    pub violations: usize,
    pub entries: usize,
}

/// Penalized negative ELBO of `rows` with fixed noise `eps` (one row of
/// `latent_dim` normals per observation). With `grad`, adds the gradient of
/// the batch mean to it.
fn objective(
    params: &NetworkParams,
    head: &dyn LikelihoodHead,
    rows: &[&[u32]],
    eps: &Array2<f64>,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<LossParts> {
    let b = rows.len();
    let d = params.spec.latent_dim;
    let k = params.spec.input_dim;
    let act = params.spec.hidden_activation;
    let (enc_out, enc_inputs) = encode_rows(params, rows)?;
    let mu = enc_out.slice(s![.., ..d]);
    let lv = enc_out.slice(s![.., d..]);
    let sigma = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sigma * eps);
    let (pre, dec_inputs) = decode_latent(params, z)?;

    let scale = 1.0 / b as f64;
    let mut parts = LossParts {
        weight,
        entries: b * k,
        ..Default::default()
    };
    let mut d_pre = Array2::zeros((b, k));
    let want_grad = grad.is_some();
    for r in 0..b {
        let c = rows[r];
        let p = pre.row(r);
        let p = p.as_slice().expect("standard layout");
        let g = if want_grad {
            Some(d_pre.row_mut(r).into_slice().expect("standard layout"))
        } else {
            None
        };
        let hl = head.loss(c, p, weight, scale, g);
        parts.nll += hl.nll;
        parts.penalty += hl.penalty;
        parts.kl += kl_diag_gaussian(&mu.row(r).to_vec(), &lv.row(r).to_vec());
        parts.violations += c.iter().zip(p).filter(|(&ci, &pi)| ci > 0 && pi.max(0.0) < ci as f64).count();
    }
    parts.total = parts.kl + parts.nll + weight * parts.penalty;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            detail: format!("loss {} (kl {}, nll {}, penalty {})", parts.total, parts.kl, parts.nll, parts.penalty),
        });
    }

    if let Some(grad) = grad {
        let layout = params.layout();
        let dz = mlp_backward(&params.weights, &layout.decoder, act, &dec_inputs, d_pre, grad);
        let mut d_enc = Array2::zeros((b, 2 * d));
        for r in 0..b {
            for j in 0..d {
                let (m, v, s, e) = (mu[[r, j]], lv[[r, j]], sigma[[r, j]], eps[[r, j]]);
                d_enc[[r, j]] = dz[[r, j]] + scale * m;
                d_enc[[r, d + j]] = dz[[r, j]] * e * 0.5 * s + scale * 0.5 * (v.exp() - 1.0);
            }
        }
        mlp_backward(&params.weights, &layout.encoder, act, &enc_inputs, d_enc, grad);
    }
    Ok(parts)
}

fn noise<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, d), || StandardNormal.sample(rng))
}

/// Penalized negative ELBO of one observation with a single noise draw.
pub fn elbo_loss<R: Rng + ?Sized>(c: &[u32], params: &NetworkParams, weight: f64, rng: &mut R) -> Result<LossParts> {
    check_row(params, c)?;
    let eps = noise(1, params.spec.latent_dim, rng);
    objective(params, &*params.spec.output_head.head(), &[c], &eps, weight, None)
}

/// Loss and exact gradient for one observation, holding the noise draw fixed.
pub fn backward<R: Rng + ?Sized>(
    c: &[u32],
    params: &NetworkParams,
    weight: f64,
    rng: &mut R,
) -> Result<(LossParts, Vec<f64>)> {
    check_row(params, c)?;
    let eps = noise(1, params.spec.latent_dim, rng);
    let mut grad = vec![0.0; params.weights.len()];
    let parts = objective(params, &*params.spec.output_head.head(), &[c], &eps, weight, Some(&mut grad))?;
    Ok((parts, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub penalty: PenaltyConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 100,
            max_epochs: 100,
            penalty: PenaltyConfig::constant(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.penalty.validate()
    }
}

/// Per-epoch means over observations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub kl: Vec<f64>,
    pub nll: Vec<f64>,
    pub penalty: Vec<f64>,
    pub penalty_weight: Vec<f64>,
    /// Fraction of entries violating their count during the epoch.
    pub violation_fraction: Vec<f64>,
}

pub fn train(data: &CountMatrix, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<(NetworkParams, TrainHistory)> {
    train_with_observer(data, spec, cfg, |_, _| Ok(()))
}

/// Mini-batch Adam. `observer` runs after every epoch with the epoch index
/// and the current parameters.
pub fn train_with_observer<F>(
    data: &CountMatrix,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(NetworkParams, TrainHistory)>
where
    F: FnMut(usize, &NetworkParams) -> Result<()>,
{
    cfg.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    if data.n_cols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "data has {} categories, network {}",
            data.n_cols(),
            spec.input_dim
        )));
    }
    let head = spec.output_head.head();
    let mut params = NetworkParams::init(spec, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut shuffle_rng: SimRng = rng_stream(cfg.seed, SHUFFLE_STREAM);
    let mut noise_rng: SimRng = rng_stream(cfg.seed, NOISE_STREAM);
    let mut order: Vec<usize> = (0..data.n_rows()).collect();
    let mut history = TrainHistory::default();
    let mut grad = vec![0.0; params.weights.len()];
    let n = data.n_rows() as f64;

    for epoch in 0..cfg.max_epochs {
        let weight = cfg.penalty.weight_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[u32]> = chunk.iter().map(|&i| data.row(i)).collect();
            let eps = noise(rows.len(), spec.latent_dim, &mut noise_rng);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let parts = objective(&params, &*head, &rows, &eps, weight, Some(&mut grad)).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite { epoch, detail },
                other => other,
            })?;
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    detail: format!("gradient of weight {i} is {}", grad[i]),
                });
            }
            params.moments.apply(&mut params.weights, &grad, &adam);
            sum.kl += parts.kl;
            sum.nll += parts.nll;
            sum.penalty += parts.penalty;
            sum.total += parts.total;
            sum.violations += parts.violations;
            sum.entries += parts.entries;
        }
        history.loss.push(sum.total / n);
        history.kl.push(sum.kl / n);
        history.nll.push(sum.nll / n);
        history.penalty.push(sum.penalty / n);
        history.penalty_weight.push(weight);
        history.violation_fraction.push(sum.violations as f64 / sum.entries as f64);
        observer(epoch, &params)?;
    }
    Ok((params, history))
}

const INFER_CHUNK: usize = 1024;

fn decoder_outputs(data: &CountMatrix, params: &NetworkParams) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if data.n_cols() != params.spec.input_dim {
        return Err(Error::Shape(format!(
            "data has {} categories, network {}",
            data.n_cols(),
            params.spec.input_dim
        )));
    }
    let d = params.spec.latent_dim;
    let mut out = Vec::with_capacity(data.n_rows());
    let idx: Vec<usize> = (0..data.n_rows()).collect();
    for chunk in idx.chunks(INFER_CHUNK) {
        let rows: Vec<&[u32]> = chunk.iter().map(|&i| data.row(i)).collect();
        let (enc, _) = encode_rows(params, &rows)?;
        let mu = enc.slice(s![.., ..d]).to_owned();
        let (pre, _) = decode_latent(params, mu.clone())?;
        for (m, p) in mu.rows().into_iter().zip(pre.rows()) {
            out.push((m.to_vec(), p.to_vec()));
        }
    }
    Ok(out)
}

/// Posterior means for every observation.
pub fn latent_means(data: &CountMatrix, params: &NetworkParams) -> Result<Vec<Vec<f64>>> {
    Ok(decoder_outputs(data, params)?.into_iter().map(|(m, _)| m).collect())
}

/// Per-observation head output at the posterior mean: thresholded estimates
/// for the hypergeometric head, probabilities or rates otherwise.
pub fn infer_estimates(data: &CountMatrix, params: &NetworkParams) -> Result<Vec<Vec<f64>>> {
    let head = params.spec.output_head.head();
    Ok(decoder_outputs(data, params)?
        .into_iter()
        .enumerate()
        .map(|(i, (_, pre))| head.estimate(data.row(i), &pre))
        .collect())
}

/// Fraction of entries whose rectified output at the posterior mean sits
/// below a positive count.
pub fn violation_fraction(data: &CountMatrix, params: &NetworkParams) -> Result<f64> {
    let outs = decoder_outputs(data, params)?;
    let mut bad = 0usize;
    for (i, (_, pre)) in outs.iter().enumerate() {
        bad += data
            .row(i)
            .iter()
            .zip(pre)
            .filter(|(&c, &p)| c > 0 && p.max(0.0) < c as f64)
            .count();
    }
    Ok(bad as f64 / (data.n_rows() * data.n_cols()).max(1) as f64)
}

pub const CHECKPOINT_FORMAT: &str = "hyperpop-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: NetworkSpec,
    weights: Vec<f64>,
}

/// JSON container: format tag, version, network spec and the flat weights.
pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        spec: params.spec.clone(),
        weights: params.weights.clone(),
    };
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Validation(format!("{} is not a model checkpoint", path.display())));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint version {}", ck.version)));
    }
    NetworkParams::from_weights(ck.spec, ck.weights)
}
