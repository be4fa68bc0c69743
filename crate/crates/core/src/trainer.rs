//! Joint fine-tuning of bases and coefficients.
//!
//! The objective is the data loss plus `γ·Σ_l ‖W_l − B_l·A_l‖²_F`, summed
//! over decomposed layers that carry a frozen reference weight `W_l` (in
//! split-matrix layout). Only basis and coefficient blobs are trained; all
//! other weights stay fixed. Gradients come from a reverse pass over the
//! recorded layer inputs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dataset};
use crate::decomposed::basis_stage;
use crate::decomposer::split_and_flatten;
use crate::error::{Error, Result};
use crate::graph::{Layer, LayerOp, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_backward, Matrix, Tensor4};

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over all output elements of the squared error.
    #[default]
    Mse,
    /// Softmax cross-entropy against per-sample target distributions,
    /// averaged over the batch.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::Mse,
            gamma: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: LossKind,
    pub gamma: f64,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    /// The learning rate is divided by this at every decay epoch.
    pub decay_divisor: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mse,
            gamma: 1e-2,
            lr: 1e-2,
            momentum: 0.0,
            decay_divisor: 10.0,
            decay_epochs: Vec::new(),
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Momentum SGD, lr 0.1 divided by 10 at 50% and 75% of the run.
    pub fn classification(epochs: usize) -> Self {
        TrainConfig {
            loss: LossKind::CrossEntropy,
            lr: 0.1,
            momentum: 0.9,
            decay_epochs: vec![epochs / 2, epochs * 3 / 4],
            ..Self::default()
        }
    }

    /// Plain SGD with a single decay by 10 after two thirds of the run.
    pub fn regression(lr: f64, epochs: usize) -> Self {
        TrainConfig {
            lr,
            decay_epochs: vec![epochs * 2 / 3],
            ..Self::default()
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidArgument(s.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.decay_divisor.is_nan() || self.decay_divisor <= 0.0 {
            return bad("decay divisor must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        let mut lr = self.lr;
        for _ in 0..decays {
            lr /= self.decay_divisor;
        }
        lr
    }
}

/// SGD state: configuration, per-blob velocity and step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: TrainConfig,
    pub velocity: BTreeMap<String, Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            velocity: BTreeMap::new(),
            step: 0,
        })
    }

    /// One SGD step: `v ← μ·v + g`, `θ ← θ − lr·v`.
    pub fn apply(
        &mut self,
        graph: &mut ModelGraph<T>,
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
    ) -> Result<()> {
        let mu = T::of(self.config.momentum);
        let lr = T::of(lr);
        for (name, g) in grads {
            let blob = graph
                .blobs
                .get_mut(name)
                .ok_or_else(|| Error::DanglingBlob(name.clone()))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, v), &g) in blob.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub data: f64,
    /// `γ·Σ‖W − B·A‖²_F`.
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Gradient per trainable blob, laid out like the blob.
    pub params: BTreeMap<String, Vec<T>>,
    /// Gradient with respect to the batch input.
    pub input: Tensor4<T>,
}

fn data_loss<T: Scalar>(
    out: &Tensor4<T>,
    target: &Tensor4<T>,
    kind: LossKind,
) -> Result<(T, Tensor4<T>)> {
    if out.dims() != target.dims() {
        return Err(Error::shape(
            "loss",
            format!("output {:?} vs target {:?}", out.dims(), target.dims()),
        ));
    }
    match kind {
        LossKind::Mse => {
            let count = T::of(out.len() as f64);
            let mut loss = T::zero();
            let mut grad = out.clone();
            for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
                let d = *g - t;
                loss += d * d;
                *g = T::of(2.0) * d / count;
            }
            Ok((loss / count, grad))
        }
        LossKind::CrossEntropy => {
            let batch = out.n();
            let k = out.len() / batch;
            let bt = T::of(batch as f64);
            let mut loss = T::zero();
            let mut grad = out.clone();
            for b in 0..batch {
                let z = &out.data()[b * k..(b + 1) * k];
                let y = &target.data()[b * k..(b + 1) * k];
                let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = zmax + z.iter().map(|&v| (v - zmax).exp()).sum::<T>().ln();
                let ysum: T = y.iter().copied().sum();
                for j in 0..k {
                    loss -= y[j] * (z[j] - lse);
                    grad.data_mut()[b * k + j] = ((z[j] - lse).exp() * ysum - y[j]) / bt;
                }
            }
            Ok((loss / bt, grad))
        }
    }
}

/// `(B, A, W)` of one decomposed layer in split-matrix layout.
type ResidualParts<T> = (Matrix<T>, Matrix<T>, Matrix<T>);

/// Residual `B·A − W` of one decomposed layer in split-matrix layout, or
/// `None` if the layer has no reference weight.
fn layer_residual<T: Scalar>(
    graph: &ModelGraph<T>,
    layer: &Layer,
) -> Result<Option<ResidualParts<T>>> {
    let LayerOp::DecomposedConv {
        reference: Some(reference),
        s,
        ..
    } = &layer.op
    else {
        return Ok(None);
    };
    let d = graph.decomposed_layer(layer)?;
    let w = split_and_flatten(&graph.blob(reference)?.to_tensor()?, *s)?;
    let b = d.basis.mat;
    let a = d.coeffs.mat;
    let r = b.matmul(&a)?.sub(&w.mat)?;
    Ok(Some((r, b, a)))
}

/// Frobenius norm `‖W − B·A‖_F` of every decomposed layer with a reference.
pub fn residuals<T: Scalar>(graph: &ModelGraph<T>) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for layer in &graph.layers {
        if let Some((r, ..)) = layer_residual(graph, layer)? {
            out.push((layer.name.clone(), r.frobenius_norm().to_f64_lossy()));
        }
    }
    Ok(out)
}

/// Penalty `γ·Σ‖W − B·A‖²_F` and its gradients `2γ(BA − W)Aᵀ` (basis) and
/// `2γBᵀ(BA − W)` (coefficients), accumulated into `grads`.
pub fn penalty_with_gradients<T: Scalar>(
    graph: &ModelGraph<T>,
    gamma: f64,
    grads: &mut BTreeMap<String, Vec<T>>,
) -> Result<T> {
    let g2 = T::of(2.0 * gamma);
    let mut total = T::zero();
    for layer in &graph.layers {
        let Some((r, b, a)) = layer_residual(graph, layer)? else {
            continue;
        };
        let LayerOp::DecomposedConv { basis, coeffs, .. } = &layer.op else {
            unreachable!("residual only for decomposed layers")
        };
        let sq = r.data().iter().map(|&v| v * v).sum::<T>();
        if !sq.is_finite() {
            return Err(Error::NonFinite {
                layer: layer.name.clone(),
                stage: "penalty",
            });
        }
        total += T::of(gamma) * sq;
        if gamma == 0.0 {
            continue;
        }
        // Basis blob rows are basis filters, i.e. columns of B.
        let gb = r.matmul(&a.transpose())?.scale(g2).transpose();
        accumulate(grads, graph, basis, gb.data())?;
        let ga = b.transpose().matmul(&r)?.scale(g2);
        accumulate(grads, graph, coeffs, ga.data())?;
    }
    Ok(total)
}

/// Add `g` into the leading entries of the gradient for `name`.
fn accumulate<T: Scalar>(
    grads: &mut BTreeMap<String, Vec<T>>,
    graph: &ModelGraph<T>,
    name: &str,
    g: &[T],
) -> Result<()> {
    let len = graph.blob(name)?.len();
    let acc = grads
        .entry(name.to_string())
        .or_insert_with(|| vec![T::zero(); len]);
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
    Ok(())
}

/// Forward pass keeping every layer input.
fn forward_tape<T: Scalar>(
    graph: &ModelGraph<T>,
    x: &Tensor4<T>,
) -> Result<(Vec<Tensor4<T>>, Tensor4<T>)> {
    let mut tape = Vec::with_capacity(graph.layers.len());
    let mut cur = x.clone();
    for layer in &graph.layers {
        let next = graph.apply(layer, &cur)?;
        tape.push(std::mem::replace(&mut cur, next));
    }
    Ok((tape, cur))
}

/// Data loss, weighted penalty and their sum for one batch.
pub fn joint_loss<T: Scalar>(
    graph: &ModelGraph<T>,
    batch: &Batch<T>,
    spec: &LossSpec,
) -> Result<LossParts> {
    let out = graph.forward(&batch.x)?;
    let (data, _) = data_loss(&out, &batch.y, spec.kind)?;
    let data = data.to_f64_lossy();
    let mut penalty = 0.0;
    for layer in &graph.layers {
        if let Some((r, ..)) = layer_residual(graph, layer)? {
            let sq = r.data().iter().map(|&v| v * v).sum::<T>().to_f64_lossy();
            if !sq.is_finite() {
                return Err(Error::NonFinite {
                    layer: layer.name.clone(),
                    stage: "penalty",
                });
            }
            penalty += spec.gamma * sq;
        }
    }
    Ok(LossParts {
        data,
        penalty,
        total: data + penalty,
    })
}

/// Loss parts and gradients for every trainable blob plus the input.
pub fn backward<T: Scalar>(
    graph: &ModelGraph<T>,
    batch: &Batch<T>,
    spec: &LossSpec,
) -> Result<(LossParts, Gradients<T>)> {
    let (tape, out) = forward_tape(graph, &batch.x)?;
    let (data, mut g) = data_loss(&out, &batch.y, spec.kind)?;
    let mut params = BTreeMap::new();
    for name in graph.trainable_blobs() {
        let len = graph.blob(&name)?.len();
        params.insert(name, vec![T::zero(); len]);
    }
    for (layer, x) in graph.layers.iter().zip(&tape).rev() {
        g = layer_backward(graph, layer, x, &g, &mut params)?;
        if !g.is_finite() {
            return Err(Error::NonFinite {
                layer: layer.name.clone(),
                stage: "backward",
            });
        }
    }
    let penalty = penalty_with_gradients(graph, spec.gamma, &mut params)?;
    for (name, v) in &params {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                layer: owning_layer(graph, name),
                stage: "backward",
            });
        }
    }
    let data = data.to_f64_lossy();
    let penalty = penalty.to_f64_lossy();
    Ok((
        LossParts {
            data,
            penalty,
            total: data + penalty,
        },
        Gradients { params, input: g },
    ))
}

fn owning_layer<T: Scalar>(graph: &ModelGraph<T>, blob: &str) -> String {
    graph
        .layers
        .iter()
        .find(|l| l.blob_refs().contains(&blob))
        .map(|l| l.name.clone())
        .unwrap_or_else(|| blob.to_string())
}

fn layer_backward<T: Scalar>(
    graph: &ModelGraph<T>,
    layer: &Layer,
    x: &Tensor4<T>,
    gy: &Tensor4<T>,
    params: &mut BTreeMap<String, Vec<T>>,
) -> Result<Tensor4<T>> {
    match &layer.op {
        LayerOp::Conv {
            weight,
            stride,
            pad,
            ..
        } => {
            let w = graph.blob(weight)?.to_tensor()?;
            Ok(conv2d_backward(x, &w, gy, *stride, *pad)?.0)
        }
        LayerOp::DecomposedConv { basis, coeffs, .. } => {
            let d = graph.decomposed_layer(layer)?;
            let (n, s, m, p) = (d.n(), d.s(), d.m(), d.basis.p);
            let z = basis_stage(x, &d, &mut 0)?;
            let (gz, gcomb) = conv2d_backward(&z, &d.combine_weight(), gy, 1, 0)?;
            let mut ga = vec![T::zero(); m * n * s];
            for i in 0..n {
                for g in 0..s {
                    for j in 0..m {
                        ga[j * n * s + g * n + i] = gcomb[[i, g * m + j, 0, 0]];
                    }
                }
            }
            accumulate(params, graph, coeffs, &ga)?;
            let filters = d.basis.filters();
            let mut gf = vec![T::zero(); filters.len()];
            let mut gx = Vec::with_capacity(s);
            for g in 0..s {
                let (gxg, gfg) = conv2d_backward(
                    &x.narrow_channels(g * p, p)?,
                    &filters,
                    &gz.narrow_channels(g * m, m)?,
                    d.stride,
                    d.pad,
                )?;
                for (a, &v) in gf.iter_mut().zip(gfg.data()) {
                    *a += v;
                }
                gx.push(gxg);
            }
            accumulate(params, graph, basis, &gf)?;
            Tensor4::concat_channels(&gx)
        }
        LayerOp::Relu => {
            let mut gx = gy.clone();
            for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                if v <= T::zero() {
                    *g = T::zero();
                }
            }
            Ok(gx)
        }
        LayerOp::GlobalAveragePool => {
            let scale = T::one() / T::of((x.h() * x.w()) as f64);
            Ok(Tensor4::from_fn(x.dims(), |[b, c, _, _]| {
                gy[[b, c, 0, 0]] * scale
            }))
        }
        LayerOp::Dense { weight, .. } => {
            let w = graph.blob(weight)?.to_matrix()?;
            let gm = Matrix::new(gy.n(), w.rows(), gy.data().to_vec())?;
            Tensor4::new(x.dims(), gm.matmul(&w)?.into_data())
        }
        LayerOp::UpsampleNearest { factor } => {
            let mut gx = Tensor4::zeros(x.dims());
            let [nb, c, h, w] = gy.dims();
            for b in 0..nb {
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[b, ch, y / factor, xx / factor]] += gy[[b, ch, y, xx]];
                        }
                    }
                }
            }
            Ok(gx)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of the pre-step losses.
    pub data_loss: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    /// Loss on the whole dataset after the last step.
    pub final_loss: LossParts,
    /// `‖W − B·A‖_F` per decomposed layer after the last step.
    pub residuals: Vec<(String, f64)>,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.epochs {
            writeln!(
                f,
                "epoch={} lr={:.6e} data_loss={:.9e} penalty={:.9e} total={:.9e}",
                e.epoch, e.lr, e.data_loss, e.penalty, e.total
            )?;
        }
        writeln!(
            f,
            "final steps={} data_loss={:.9e} penalty={:.9e} total={:.9e}",
            self.steps, self.final_loss.data, self.final_loss.penalty, self.final_loss.total
        )?;
        for (layer, r) in &self.residuals {
            writeln!(f, "residual layer={layer} frobenius={r:.9e}")?;
        }
        Ok(())
    }
}

/// Seeded SGD over `epochs` passes; each epoch uses its own shuffle.
pub fn train<T: Scalar>(
    graph: &mut ModelGraph<T>,
    data: &Dataset<T>,
    opt: &mut OptimizerState<T>,
    epochs: usize,
) -> Result<TrainReport> {
    let spec = opt.config.loss_spec();
    let mut report = TrainReport::default();
    for epoch in 0..epochs {
        let lr = opt.config.lr_at(epoch);
        let seed = opt.config.seed.wrapping_add(epoch as u64);
        let batches = data.batches(opt.config.batch_size, Some(seed))?;
        let mut sum = LossParts::default();
        for batch in &batches {
            let (loss, grads) = backward(graph, batch, &spec)?;
            if loss.total.is_nan() || loss.total > DIVERGENCE_LOSS {
                report.steps = opt.step;
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.total,
                    report: Box::new(report),
                });
            }
            sum.data += loss.data;
            sum.penalty += loss.penalty;
            sum.total += loss.total;
            opt.apply(graph, &grads.params, lr)?;
        }
        let k = batches.len() as f64;
        log::debug!("epoch {epoch}: total {:.6e}", sum.total / k);
        report.epochs.push(EpochStats {
            epoch,
            lr,
            data_loss: sum.data / k,
            penalty: sum.penalty / k,
            total: sum.total / k,
        });
    }
    report.steps = opt.step;
    report.final_loss = joint_loss(graph, &data.full(), &spec)?;
    report.residuals = residuals(graph)?;
    if report.final_loss.total.is_nan() || report.final_loss.total > DIVERGENCE_LOSS {
        return Err(Error::Diverged {
            epoch: epochs,
            loss: report.final_loss.total,
            report: Box::new(report),
        });
    }
    Ok(report)
}

/// Inference copy: reference weights, training config and unreferenced
/// blobs removed. Forward results are unchanged.
pub fn export_for_inference<T: Scalar>(graph: &ModelGraph<T>) -> ModelGraph<T> {
    let mut out = graph.clone();
    for layer in &mut out.layers {
        if let LayerOp::DecomposedConv { reference, .. } = &mut layer.op {
            *reference = None;
        }
    }
    out.training = None;
    let used: std::collections::BTreeSet<String> = out
        .layers
        .iter()
        .flat_map(|l| l.blob_refs().into_iter().map(str::to_string))
        .collect();
    out.blobs.retain(|k, _| used.contains(k));
    out
}
