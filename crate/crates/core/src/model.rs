//! DLRM-lite model math: forward pass, backward pass, logistic loss, and
//! the local optimizer for the replicated dense component.
//!
//! The dense component is the bottom MLP (over numerical features), the
//! pairwise dot-product interaction of the pooled embeddings with the
//! bottom-MLP output, and the top prediction MLP with a sigmoid output.
//! Hidden layers use ReLU. Predicted probabilities are clamped to
//! `[1e-7, 1 - 1e-7]` so the loss and normalized entropy stay finite.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hash::{hash3, to_range};
use crate::num::{AtomicScalar, HogwildVec, Scalar};

pub const PROB_CLAMP: f64 = 1e-7;

/// Architecture of the DLRM-lite model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArch {
    pub num_tables: usize,
    pub embedding_dim: usize,
    pub rows_per_table: usize,
    pub dense_in_dim: usize,
    /// Widths of the bottom MLP layers; the last width must equal
    /// `embedding_dim`.
    pub bottom_mlp_dims: Vec<usize>,
    /// Widths of the top MLP layers; the last width must be 1.
    pub top_mlp_dims: Vec<usize>,
}

impl ModelArch {
    /// Number of pairwise dot-product interaction features among the
    /// bottom-MLP output and the pooled tables.
    pub fn num_interactions(&self) -> usize {
        let nf = self.num_tables + 1;
        nf * (nf - 1) / 2
    }

    /// Input width of the top MLP: bottom output concatenated with the
    /// interaction features.
    pub fn top_in_dim(&self) -> usize {
        self.embedding_dim + self.num_interactions()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_tables == 0 || self.embedding_dim == 0 || self.rows_per_table == 0 {
            return bad("tables, embedding dim and rows must all be >= 1".into());
        }
        if self.dense_in_dim == 0 {
            return bad("dense_in_dim must be >= 1".into());
        }
        if self.bottom_mlp_dims.is_empty() || self.top_mlp_dims.is_empty() {
            return bad("MLP dim lists must be non-empty".into());
        }
        if self.bottom_mlp_dims.iter().chain(&self.top_mlp_dims).any(|&w| w == 0) {
            return bad("all MLP widths must be >= 1".into());
        }
        if *self.bottom_mlp_dims.last().unwrap() != self.embedding_dim {
            return bad(format!(
                "bottom MLP output width {} must equal embedding_dim {}",
                self.bottom_mlp_dims.last().unwrap(),
                self.embedding_dim
            ));
        }
        if *self.top_mlp_dims.last().unwrap() != 1 {
            return bad("top MLP final width must be 1".into());
        }
        Ok(())
    }
}

/// One fully-connected layer inside the flat parameter vector.
///
/// Weights are row-major `[out_dim x in_dim]` at `w_off`; biases follow at
/// `b_off`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub w_off: usize,
    pub b_off: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }
}

/// Deterministic offset table mapping (layer, row, col) to flat indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseLayout {
    pub bottom: Vec<LayerSpec>,
    pub top: Vec<LayerSpec>,
    pub len: usize,
}

impl DenseLayout {
    pub fn new(arch: &ModelArch) -> Self {
        let mut off = 0;
        let mut mk = |in_dim: usize, out_dim: usize| {
            let spec = LayerSpec {
                w_off: off,
                b_off: off + out_dim * in_dim,
                in_dim,
                out_dim,
            };
            off += spec.param_count();
            spec
        };
        let mut bottom = Vec::new();
        let mut prev = arch.dense_in_dim;
        for &w in &arch.bottom_mlp_dims {
            bottom.push(mk(prev, w));
            prev = w;
        }
        let mut top = Vec::new();
        prev = arch.top_in_dim();
        for &w in &arch.top_mlp_dims {
            top.push(mk(prev, w));
            prev = w;
        }
        DenseLayout { bottom, top, len: off }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.bottom.iter().chain(self.top.iter())
    }
}

/// Replicated dense parameters plus Adagrad accumulators, shared between
/// worker and shadow roles under the Hogwild contract.
pub struct DenseParams<T: AtomicScalar> {
    pub values: HogwildVec<T>,
    pub adagrad_acc: HogwildVec<T>,
    pub layout: Arc<DenseLayout>,
}

impl<T: AtomicScalar> DenseParams<T> {
    pub fn new(layout: Arc<DenseLayout>, init: Vec<T>) -> Self {
        assert_eq!(init.len(), layout.len);
        DenseParams {
            values: HogwildVec::from_vec(init),
            adagrad_acc: HogwildVec::zeros(layout.len),
            layout,
        }
    }

    pub fn snapshot(&self) -> Vec<T> {
        self.values.snapshot()
    }
}

/// Gradients aligned to the `DenseParams` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub values: Vec<T>,
}

/// Per-example predicted click probabilities, clamped into
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub probs: Vec<T>,
}

/// Per-layer initial weights: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
/// counter-hashed from the seed. Biases start at zero.
pub fn init_dense<T: Scalar>(arch: &ModelArch, layout: &DenseLayout, seed: u64) -> Vec<T> {
    let _ = arch;
    let mut values = vec![T::zero(); layout.len];
    for (li, spec) in layout.layers().enumerate() {
        let bound = 1.0 / (spec.in_dim as f64).sqrt();
        for k in 0..spec.out_dim * spec.in_dim {
            let h = hash3(seed, 0x11 + li as u64, k as u64);
            values[spec.w_off + k] = T::from_f64(to_range(h, -bound, bound));
        }
    }
    values
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::from_f64(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// Activations cached by [`forward`] for the backward pass. Owns copies of
/// its inputs so the backward pass is pure with respect to the snapshot
/// the forward pass ran on.
#[derive(Debug)]
pub struct ForwardCache<T> {
    pub batch: usize,
    params: Vec<T>,
    layout: Arc<DenseLayout>,
    arch: ModelArch,
    dense_x: Vec<T>,
    pooled: Vec<Vec<T>>,
    /// Post-activation outputs per bottom layer, `[batch * width]` each.
    bottom_acts: Vec<Vec<T>>,
    /// Post-activation outputs per top layer (final layer holds raw logits).
    top_acts: Vec<Vec<T>>,
    top_in: Vec<T>,
    pub logits: Vec<T>,
}

fn layer_forward<T: Scalar>(
    params: &[T],
    spec: &LayerSpec,
    input: &[T],
    batch: usize,
    relu: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * spec.out_dim];
    for e in 0..batch {
        let x = &input[e * spec.in_dim..(e + 1) * spec.in_dim];
        for o in 0..spec.out_dim {
            let row = &params[spec.w_off + o * spec.in_dim..spec.w_off + (o + 1) * spec.in_dim];
            let mut z = params[spec.b_off + o];
            for k in 0..spec.in_dim {
                z = z + row[k] * x[k];
            }
            out[e * spec.out_dim + o] = if relu { z.max(T::zero()) } else { z };
        }
    }
    out
}

/// Forward pass over a snapshot of the dense parameters.
///
/// `pooled[t]` is the pooled embedding of table `t`, `[batch * embedding_dim]`
/// row-major; `dense_x` is `[batch * dense_in_dim]`.
pub fn forward<T: Scalar>(
    params: &[T],
    layout: &Arc<DenseLayout>,
    arch: &ModelArch,
    pooled: &[Vec<T>],
    dense_x: &[T],
    batch: usize,
) -> Result<(Prediction<T>, ForwardCache<T>)> {
    if params.len() != layout.len {
        return Err(Error::Shape {
            tensor: "params",
            expected: layout.len.to_string(),
            got: params.len().to_string(),
        });
    }
    if dense_x.len() != batch * arch.dense_in_dim {
        return Err(Error::Shape {
            tensor: "dense_x",
            expected: format!("{}x{}", batch, arch.dense_in_dim),
            got: dense_x.len().to_string(),
        });
    }
    if pooled.len() != arch.num_tables {
        return Err(Error::Shape {
            tensor: "pooled",
            expected: format!("{} tables", arch.num_tables),
            got: format!("{} tables", pooled.len()),
        });
    }
    for (t, p) in pooled.iter().enumerate() {
        if p.len() != batch * arch.embedding_dim {
            return Err(Error::Shape {
                tensor: "pooled",
                expected: format!("table {}: {}x{}", t, batch, arch.embedding_dim),
                got: p.len().to_string(),
            });
        }
    }

    let dim = arch.embedding_dim;
    let nf = arch.num_tables + 1;

    let mut bottom_acts = Vec::with_capacity(layout.bottom.len());
    let mut input: &[T] = dense_x;
    for spec in &layout.bottom {
        let out = layer_forward(params, spec, input, batch, true);
        bottom_acts.push(out);
        input = bottom_acts.last().unwrap();
    }
    let bottom_out = bottom_acts.last().unwrap().clone();

    // Interaction features: all pairwise dot products among
    // {bottom output, pooled tables}, pairs in lexicographic order.
    let top_in_dim = arch.top_in_dim();
    let mut top_in = vec![T::zero(); batch * top_in_dim];
    for e in 0..batch {
        let feat = |i: usize| -> &[T] {
            if i == 0 {
                &bottom_out[e * dim..(e + 1) * dim]
            } else {
                &pooled[i - 1][e * dim..(e + 1) * dim]
            }
        };
        let row = &mut top_in[e * top_in_dim..(e + 1) * top_in_dim];
        row[..dim].copy_from_slice(&bottom_out[e * dim..(e + 1) * dim]);
        let mut w = dim;
        for i in 0..nf {
            for j in i + 1..nf {
                let (fi, fj) = (feat(i), feat(j));
                let mut d = T::zero();
                for k in 0..dim {
                    d = d + fi[k] * fj[k];
                }
                row[w] = d;
                w += 1;
            }
        }
    }

    let mut top_acts = Vec::with_capacity(layout.top.len());
    let mut input: &[T] = &top_in;
    for (li, spec) in layout.top.iter().enumerate() {
        let relu = li + 1 < layout.top.len();
        let out = layer_forward(params, spec, input, batch, relu);
        top_acts.push(out);
        input = top_acts.last().unwrap();
    }
    let logits = top_acts.last().unwrap().clone();
    let probs: Vec<T> = logits.iter().map(|&z| clamp_prob(sigmoid(z))).collect();

    let cache = ForwardCache {
        batch,
        params: params.to_vec(),
        layout: Arc::clone(layout),
        arch: arch.clone(),
        dense_x: dense_x.to_vec(),
        pooled: pooled.to_vec(),
        bottom_acts,
        top_acts,
        top_in,
        logits,
    };
    Ok((Prediction { probs }, cache))
}

fn layer_backward<T: Scalar>(
    params: &[T],
    spec: &LayerSpec,
    input: &[T],
    delta: &[T],
    batch: usize,
    grads: &mut [T],
) -> Vec<T> {
    let mut dinput = vec![T::zero(); batch * spec.in_dim];
    for e in 0..batch {
        let x = &input[e * spec.in_dim..(e + 1) * spec.in_dim];
        let d = &delta[e * spec.out_dim..(e + 1) * spec.out_dim];
        for o in 0..spec.out_dim {
            let g = d[o];
            if g == T::zero() {
                continue;
            }
            let w_row = spec.w_off + o * spec.in_dim;
            for k in 0..spec.in_dim {
                grads[w_row + k] += g * x[k];
                dinput[e * spec.in_dim + k] += g * params[w_row + k];
            }
            grads[spec.b_off + o] += g;
        }
    }
    dinput
}

#[inline]
fn relu_mask<T: Scalar>(delta: &mut [T], post_act: &[T]) {
    for (d, &a) in delta.iter_mut().zip(post_act) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Backward pass of the mean log-loss over the batch.
///
/// Returns dense gradients and, per table, the gradient with respect to the
/// pooled embedding vector of each example (`[batch * embedding_dim]`).
/// Distribution over contributing rows (including the divide by the pooling
/// count for mean pooling) is the caller's job.
pub fn backward<T: Scalar>(
    cache: &ForwardCache<T>,
    labels: &[u8],
) -> Result<(DenseGrads<T>, Vec<Vec<T>>)> {
    if labels.len() != cache.batch {
        return Err(Error::Shape {
            tensor: "labels",
            expected: cache.batch.to_string(),
            got: labels.len().to_string(),
        });
    }
    let arch = &cache.arch;
    let layout = &cache.layout;
    let batch = cache.batch;
    let dim = arch.embedding_dim;
    let nf = arch.num_tables + 1;
    let inv_n = T::one() / T::from_f64(batch as f64);

    let mut grads = vec![T::zero(); layout.len];

    // d(mean logloss)/d(logit) = (sigmoid(z) - y) / N
    let mut delta: Vec<T> = cache
        .logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - T::from_f64(y as f64)) * inv_n)
        .collect();

    // Top MLP.
    for (li, spec) in layout.top.iter().enumerate().rev() {
        let input: &[T] = if li == 0 { &cache.top_in } else { &cache.top_acts[li - 1] };
        let mut dinput = layer_backward(&cache.params, spec, input, &delta, batch, &mut grads);
        if li > 0 {
            relu_mask(&mut dinput, &cache.top_acts[li - 1]);
        }
        delta = dinput;
    }
    let d_top_in = delta;

    // Split the top-input gradient into the direct bottom-output part and
    // the interaction part, then backprop the pairwise dots.
    let top_in_dim = arch.top_in_dim();
    let bottom_out = cache.bottom_acts.last().unwrap();
    let mut d_bottom_out = vec![T::zero(); batch * dim];
    let mut pooled_grads = vec![vec![T::zero(); batch * dim]; arch.num_tables];
    for e in 0..batch {
        let drow = &d_top_in[e * top_in_dim..(e + 1) * top_in_dim];
        for k in 0..dim {
            d_bottom_out[e * dim + k] += drow[k];
        }
        let feat = |i: usize| -> &[T] {
            if i == 0 {
                &bottom_out[e * dim..(e + 1) * dim]
            } else {
                &cache.pooled[i - 1][e * dim..(e + 1) * dim]
            }
        };
        let mut w = dim;
        for i in 0..nf {
            for j in i + 1..nf {
                let g = drow[w];
                w += 1;
                if g == T::zero() {
                    continue;
                }
                let (fi, fj) = (feat(i), feat(j));
                for k in 0..dim {
                    let (gi, gj) = (g * fj[k], g * fi[k]);
                    if i == 0 {
                        d_bottom_out[e * dim + k] += gi;
                    } else {
                        pooled_grads[i - 1][e * dim + k] += gi;
                    }
                    pooled_grads[j - 1][e * dim + k] += gj;
                }
            }
        }
    }

    // Bottom MLP (every bottom layer is ReLU, including the last).
    let mut delta = d_bottom_out;
    relu_mask(&mut delta, bottom_out);
    for (li, spec) in layout.bottom.iter().enumerate().rev() {
        let input: &[T] = if li == 0 { &cache.dense_x } else { &cache.bottom_acts[li - 1] };
        let mut dinput = layer_backward(&cache.params, spec, input, &delta, batch, &mut grads);
        if li > 0 {
            relu_mask(&mut dinput, &cache.bottom_acts[li - 1]);
        }
        delta = dinput;
    }

    Ok((DenseGrads { values: grads }, pooled_grads))
}

/// Mean logistic loss of clamped predictions.
pub fn logistic_loss<T: Scalar>(pred: &Prediction<T>, labels: &[u8]) -> Result<T> {
    if pred.probs.len() != labels.len() {
        return Err(Error::Shape {
            tensor: "labels",
            expected: pred.probs.len().to_string(),
            got: labels.len().to_string(),
        });
    }
    let mut sum = T::zero();
    for (&p, &y) in pred.probs.iter().zip(labels) {
        let p = clamp_prob(p);
        sum = sum
            + if y == 1 {
                -(p.ln())
            } else {
                -((T::one() - p).ln())
            };
    }
    Ok(sum / T::from_f64(labels.len() as f64))
}

/// In-place Adagrad step on shared parameters (Hogwild contract):
/// `acc += g^2; value -= lr * g / sqrt(acc + eps)` elementwise.
pub fn adagrad_step<T: AtomicScalar>(params: &DenseParams<T>, grads: &DenseGrads<T>, lr: T, eps: T) {
    debug_assert_eq!(grads.values.len(), params.values.len());
    for (i, &g) in grads.values.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let acc = params.adagrad_acc.get(i) + g * g;
        params.adagrad_acc.set(i, acc);
        let v = params.values.get(i) - lr * g / (acc + eps).sqrt();
        params.values.set(i, v);
    }
}

/// Plain SGD behind the same signature as [`adagrad_step`].
pub fn sgd_step<T: AtomicScalar>(params: &DenseParams<T>, grads: &DenseGrads<T>, lr: T, _eps: T) {
    for (i, &g) in grads.values.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        params.values.set(i, params.values.get(i) - lr * g);
    }
}
