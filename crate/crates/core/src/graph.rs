//! Sequential layer graphs with named weight blobs.
//!
//! Blob layouts:
//! - conv weight and reference weight: `[n, c, kh, kw]`
//! - basis: `[m, p, kh, kw]` (one row per basis filter)
//! - coefficients: `[m, n·s]`, column `g·n + i`
//! - dense weight: `[out, in]`
//! - biases: `[n]`

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decomposed::{self, add_bias, DecomposedLayer};
use crate::decomposer::{BasisSet, CoefficientSet};
use crate::error::{Error, Result};
use crate::planner::{count_flops, Budget, DecompositionPlan, LayerShape};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv_output_len, Matrix, Tensor4};
use crate::trainer::TrainConfig;

/// A named dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Blob<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if dims.is_empty() || len != data.len() {
            return Err(Error::shape(
                "blob",
                format!("dims {dims:?} need {len} elements, got {}", data.len()),
            ));
        }
        Ok(Blob { dims, data })
    }

    pub fn from_tensor(t: &Tensor4<T>) -> Self {
        Blob {
            dims: t.dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn from_matrix(m: &Matrix<T>) -> Self {
        Blob {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn from_vec(v: Vec<T>) -> Self {
        Blob {
            dims: vec![v.len()],
            data: v,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_tensor(&self) -> Result<Tensor4<T>> {
        match self.dims[..] {
            [a, b, c, d] => Tensor4::new([a, b, c, d], self.data.clone()),
            _ => Err(Error::shape(
                "blob",
                format!("expected rank 4, got dims {:?}", self.dims),
            )),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix<T>> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.data.clone()),
            _ => Err(Error::shape(
                "blob",
                format!("expected rank 2, got dims {:?}", self.dims),
            )),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Blob<U> {
        Blob {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerOp {
    Conv {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        pad: usize,
    },
    DecomposedConv {
        basis: String,
        coeffs: String,
        s: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        pad: usize,
        /// Leading basis filters read from a shared basis.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slice: Option<usize>,
        /// Frozen pre-compression weight used by the approximation penalty.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<String>,
    },
    Relu,
    GlobalAveragePool,
    Dense {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    UpsampleNearest {
        factor: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    #[serde(flatten)]
    pub op: LayerOp,
    /// Residual block this layer belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<String>,
    /// Group of residual blocks (stage) this layer belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: LayerOp) -> Self {
        Layer {
            name: name.into(),
            op,
            block: None,
            stage: None,
        }
    }

    pub fn in_block(mut self, block: impl Into<String>) -> Self {
        self.block = Some(block.into());
        self
    }

    pub fn in_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = Some(stage.into());
        self
    }

    /// Blob names this layer reads.
    pub fn blob_refs(&self) -> Vec<&str> {
        let mut out = Vec::new();
        match &self.op {
            LayerOp::Conv { weight, bias, .. } | LayerOp::Dense { weight, bias } => {
                out.push(weight.as_str());
                out.extend(bias.as_deref());
            }
            LayerOp::DecomposedConv {
                basis,
                coeffs,
                bias,
                reference,
                ..
            } => {
                out.push(basis.as_str());
                out.push(coeffs.as_str());
                out.extend(bias.as_deref());
                out.extend(reference.as_deref());
            }
            _ => {}
        }
        out
    }

    pub fn is_convolution(&self) -> bool {
        matches!(
            self.op,
            LayerOp::Conv { .. } | LayerOp::DecomposedConv { .. }
        )
    }
}

/// Activation shape `(c, h, w)` of one sample.
pub type ActShape = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    pub input: InputSpec,
    pub layers: Vec<Layer>,
    pub blobs: BTreeMap<String, Blob<T>>,
    pub plan: Option<DecompositionPlan>,
    pub training: Option<TrainConfig>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new(input: InputSpec) -> Self {
        ModelGraph {
            input,
            layers: Vec::new(),
            blobs: BTreeMap::new(),
            plan: None,
            training: None,
        }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn insert_blob(&mut self, name: impl Into<String>, blob: Blob<T>) {
        self.blobs.insert(name.into(), blob);
    }

    /// Append a convolution with its weight (and optional bias) blobs named
    /// `<name>.weight` / `<name>.bias`.
    pub fn add_conv(
        &mut self,
        name: &str,
        weight: Tensor4<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        pad: usize,
    ) -> &mut Layer {
        let w_name = format!("{name}.weight");
        self.insert_blob(w_name.clone(), Blob::from_tensor(&weight));
        let b_name = bias.map(|b| {
            let n = format!("{name}.bias");
            self.insert_blob(n.clone(), Blob::from_vec(b));
            n
        });
        self.layers.push(Layer::new(
            name,
            LayerOp::Conv {
                weight: w_name,
                bias: b_name,
                stride,
                pad,
            },
        ));
        self.layers.last_mut().expect("just pushed")
    }

    pub fn add_dense(&mut self, name: &str, weight: Matrix<T>, bias: Option<Vec<T>>) -> &mut Layer {
        let w_name = format!("{name}.weight");
        self.insert_blob(w_name.clone(), Blob::from_matrix(&weight));
        let b_name = bias.map(|b| {
            let n = format!("{name}.bias");
            self.insert_blob(n.clone(), Blob::from_vec(b));
            n
        });
        self.layers.push(Layer::new(
            name,
            LayerOp::Dense {
                weight: w_name,
                bias: b_name,
            },
        ));
        self.layers.last_mut().expect("just pushed")
    }

    pub fn add_op(&mut self, name: &str, op: LayerOp) -> &mut Layer {
        self.layers.push(Layer::new(name, op));
        self.layers.last_mut().expect("just pushed")
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn blob(&self, name: &str) -> Result<&Blob<T>> {
        self.blobs
            .get(name)
            .ok_or_else(|| Error::DanglingBlob(name.to_string()))
    }

    fn blob_tensor(&self, name: &str) -> Result<Tensor4<T>> {
        self.blob(name)?.to_tensor()
    }

    fn blob_vec(&self, name: &Option<String>) -> Result<Option<Vec<T>>> {
        name.as_deref()
            .map(|n| self.blob(n).map(|b| b.data.clone()))
            .transpose()
    }

    /// Dense weight shape of a convolution-like layer.
    pub fn conv_shape(&self, layer: &Layer) -> Result<Option<LayerShape>> {
        match &layer.op {
            LayerOp::Conv { weight, .. } => {
                let t = self.blob(weight)?;
                match t.dims[..] {
                    [n, c, h, w] => Ok(Some(LayerShape::new(n, c, h, w)?)),
                    _ => Err(chain_err(layer, format!("weight `{weight}` is not rank 4"))),
                }
            }
            LayerOp::DecomposedConv { .. } => Ok(Some(self.decomposed_layer(layer)?.shape())),
            _ => Ok(None),
        }
    }

    /// The executable form of a decomposed layer; a slice reads the leading
    /// basis filters of the (possibly shared) basis blob.
    pub fn decomposed_layer(&self, layer: &Layer) -> Result<DecomposedLayer<T>> {
        let LayerOp::DecomposedConv {
            basis,
            coeffs,
            s,
            bias,
            stride,
            pad,
            slice,
            ..
        } = &layer.op
        else {
            return Err(chain_err(layer, "not a decomposed convolution"));
        };
        let mut filters = self.blob_tensor(basis).map_err(|e| relabel(e, layer))?;
        if let Some(k) = slice {
            let [m, p, h, w] = filters.dims();
            if *k == 0 || *k > m {
                return Err(chain_err(
                    layer,
                    format!("slice {k} outside shared basis of {m}"),
                ));
            }
            filters = Tensor4::new([*k, p, h, w], filters.data()[..k * p * h * w].to_vec())?;
        }
        let basis = BasisSet::from_filters(&filters);
        let a = self
            .blob(coeffs)?
            .to_matrix()
            .map_err(|e| relabel(e, layer))?;
        if *s == 0 || a.cols() % s != 0 {
            return Err(chain_err(
                layer,
                format!("{} coefficient columns not divisible by s = {s}", a.cols()),
            ));
        }
        let n = a.cols() / s;
        let coeffs = CoefficientSet::new(a, n, *s)?;
        DecomposedLayer::new(basis, coeffs, self.blob_vec(bias)?, *stride, *pad)
            .map_err(|e| relabel(e, layer))
    }

    /// Activation shapes after each layer, checking every link.
    pub fn shape_chain(&self) -> Result<Vec<ActShape>> {
        let mut cur = [self.input.c, self.input.h, self.input.w];
        let mut out = Vec::with_capacity(self.layers.len());
        let mut names = BTreeSet::new();
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(chain_err(layer, "duplicate layer name"));
            }
            for name in layer.blob_refs() {
                self.blob(name)?;
            }
            cur = self.layer_output_shape(layer, cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    fn layer_output_shape(&self, layer: &Layer, [c, h, w]: ActShape) -> Result<ActShape> {
        let spatial = |kh: usize, kw: usize, stride: usize, pad: usize| -> Result<(usize, usize)> {
            match (
                conv_output_len(h, kh, stride, pad),
                conv_output_len(w, kw, stride, pad),
            ) {
                (Some(oh), Some(ow)) => Ok((oh, ow)),
                _ => Err(chain_err(
                    layer,
                    format!("kernel {kh}x{kw} does not fit {h}x{w}"),
                )),
            }
        };
        let check_bias = |bias: &Option<String>, n: usize| -> Result<()> {
            if let Some(b) = bias {
                if self.blob(b)?.len() != n {
                    return Err(chain_err(
                        layer,
                        format!("bias `{b}` does not have {n} entries"),
                    ));
                }
            }
            Ok(())
        };
        match &layer.op {
            LayerOp::Conv {
                bias, stride, pad, ..
            } => {
                let shape = self.conv_shape(layer)?.expect("conv");
                if shape.c != c {
                    return Err(chain_err(
                        layer,
                        format!("expects {} input channels, receives {c}", shape.c),
                    ));
                }
                check_bias(bias, shape.n)?;
                let (oh, ow) = spatial(shape.h, shape.w, *stride, *pad)?;
                Ok([shape.n, oh, ow])
            }
            LayerOp::DecomposedConv { reference, .. } => {
                let d = self.decomposed_layer(layer)?;
                if d.in_channels() != c {
                    return Err(chain_err(
                        layer,
                        format!("expects {} input channels, receives {c}", d.in_channels()),
                    ));
                }
                if let Some(r) = reference {
                    let shape = d.shape();
                    let want = vec![shape.n, shape.c, shape.h, shape.w];
                    if self.blob(r)?.dims != want {
                        return Err(chain_err(layer, format!("reference `{r}` is not {want:?}")));
                    }
                }
                let (oh, ow) = spatial(d.basis.h, d.basis.w, d.stride, d.pad)?;
                Ok([d.n(), oh, ow])
            }
            LayerOp::Relu => Ok([c, h, w]),
            LayerOp::GlobalAveragePool => Ok([c, 1, 1]),
            LayerOp::Dense { weight, bias } => {
                let wb = self.blob(weight)?;
                match wb.dims[..] {
                    [out, inp] if inp == c * h * w => {
                        check_bias(bias, out)?;
                        Ok([out, 1, 1])
                    }
                    _ => Err(chain_err(
                        layer,
                        format!(
                            "weight {:?} does not accept {} features",
                            wb.dims,
                            c * h * w
                        ),
                    )),
                }
            }
            LayerOp::UpsampleNearest { factor } => {
                if *factor == 0 {
                    return Err(chain_err(layer, "upsample factor must be >= 1"));
                }
                Ok([c, h * factor, w * factor])
            }
        }
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        Ok(self.shape_chain()?.last().copied().unwrap_or([
            self.input.c,
            self.input.h,
            self.input.w,
        ]))
    }

    /// Run one layer.
    pub fn apply(&self, layer: &Layer, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = match &layer.op {
            LayerOp::Conv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let mut y = conv2d(x, &self.blob_tensor(weight)?, *stride, *pad)
                    .map_err(|e| relabel(e, layer))?;
                if let Some(b) = self.blob_vec(bias)? {
                    add_bias(&mut y, &b);
                }
                y
            }
            LayerOp::DecomposedConv { .. } => {
                decomposed::forward(x, &self.decomposed_layer(layer)?)
                    .map_err(|e| relabel(e, layer))?
            }
            LayerOp::Relu => x.map(|v| v.max(T::zero())),
            LayerOp::GlobalAveragePool => global_average_pool(x),
            LayerOp::Dense { weight, bias } => {
                let w = self.blob(weight)?.to_matrix()?;
                dense_forward(x, &w, self.blob_vec(bias)?.as_deref())
                    .map_err(|e| relabel(e, layer))?
            }
            LayerOp::UpsampleNearest { factor } => upsample_nearest(x, *factor),
        };
        if !y.is_finite() {
            return Err(Error::NonFinite {
                layer: layer.name.clone(),
                stage: "forward",
            });
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = self.apply(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Blob names updated by training: every basis and coefficient blob.
    pub fn trainable_blobs(&self) -> BTreeSet<String> {
        self.layers
            .iter()
            .filter_map(|l| match &l.op {
                LayerOp::DecomposedConv { basis, coeffs, .. } => {
                    Some([basis.clone(), coeffs.clone()])
                }
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Convolution parameter and per-sample MAC budget. Shared basis blobs
    /// are counted once; biases and dense layers are excluded.
    pub fn budget(&self) -> Result<Budget> {
        let chain = self.shape_chain()?;
        let mut total = Budget::default();
        let mut seen_basis = BTreeSet::new();
        for (layer, out) in self.layers.iter().zip(&chain) {
            let (oh, ow) = (out[1], out[2]);
            match &layer.op {
                LayerOp::Conv { .. } => {
                    let shape = self.conv_shape(layer)?.expect("conv");
                    let macs = shape.params() * (oh * ow) as u64;
                    total = total + Budget::new(shape.params(), shape.params(), macs, macs);
                }
                LayerOp::DecomposedConv { basis, .. } => {
                    let d = self.decomposed_layer(layer)?;
                    let shape = d.shape();
                    let flops = count_flops(shape, d.m(), d.s(), oh, ow)?;
                    let mut compressed = (d.m() * d.n() * d.s()) as u64;
                    if seen_basis.insert(basis.clone()) {
                        compressed += self.blob(basis)?.len() as u64;
                    }
                    total = total
                        + Budget::new(
                            shape.params(),
                            compressed,
                            flops.flops_original,
                            flops.flops_compressed,
                        );
                }
                _ => {}
            }
        }
        Ok(total)
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            input: self.input,
            layers: self.layers.clone(),
            blobs: self
                .blobs
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            plan: self.plan.clone(),
            training: self.training.clone(),
        }
    }
}

fn chain_err(layer: &Layer, detail: impl Into<String>) -> Error {
    Error::ShapeChain {
        layer: layer.name.clone(),
        detail: detail.into(),
    }
}

/// Attach the layer name to shape and non-finite errors.
fn relabel(e: Error, layer: &Layer) -> Error {
    match e {
        Error::Shape { op, detail } => Error::ShapeChain {
            layer: layer.name.clone(),
            detail: format!("{op}: {detail}"),
        },
        Error::NonFinite { stage, .. } => Error::NonFinite {
            layer: layer.name.clone(),
            stage,
        },
        other => other,
    }
}

pub fn global_average_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let scale = T::one() / T::of(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor4::new([n, c, 1, 1], data).expect("pool dims")
}

/// `y = x_flat · Wᵀ + b`, output `(batch, out, 1, 1)`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Matrix<T>,
    bias: Option<&[T]>,
) -> Result<Tensor4<T>> {
    let batch = x.n();
    let features = x.len() / batch;
    if weight.cols() != features {
        return Err(Error::shape(
            "dense",
            format!(
                "weight accepts {} features, input has {features}",
                weight.cols()
            ),
        ));
    }
    let xm = Matrix::new(batch, features, x.data().to_vec())?;
    let mut y = xm.matmul(&weight.transpose())?;
    if let Some(b) = bias {
        for i in 0..batch {
            for (o, &bo) in b.iter().enumerate() {
                y.set(i, o, y.get(i, o) + bo);
            }
        }
    }
    Tensor4::new([batch, weight.rows(), 1, 1], y.into_data())
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor4<T>, factor: usize) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    Tensor4::from_fn([n, c, h * factor, w * factor], |[a, b, y, z]| {
        x[[a, b, y / factor, z / factor]]
    })
}
