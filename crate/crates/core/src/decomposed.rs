//! Forward pass of a decomposed convolution.
//!
//! The input is cut into `s` channel splits of depth `p`. Every split is
//! convolved with the same basis weight `(m, p, h, w)`; the `s·m` result
//! channels are concatenated split-major (channel `g·m + j` is split `g`
//! against basis `j`) and mixed by a `1×1` convolution whose weight at
//! `(i, g·m + j)` is `α[j, g·n + i]`.

use crate::decomposer::{reconstruct, BasisSet, CoefficientSet};
use crate::error::{Error, Result};
use crate::planner::{count_flops, LayerShape};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_counted, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLayer<T> {
    pub basis: BasisSet<T>,
    pub coeffs: CoefficientSet<T>,
    /// Optional bias of the `1×1` combine, one per output channel.
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> DecomposedLayer<T> {
    pub fn new(
        basis: BasisSet<T>,
        coeffs: CoefficientSet<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if basis.m() != coeffs.m() {
            return Err(Error::shape(
                "decomposed layer",
                format!(
                    "{} basis filters but {} coefficient rows",
                    basis.m(),
                    coeffs.m()
                ),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != coeffs.n {
                return Err(Error::shape(
                    "decomposed layer",
                    format!("bias has {} entries for {} outputs", b.len(), coeffs.n),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::shape("decomposed layer", "stride must be >= 1"));
        }
        Ok(DecomposedLayer {
            basis,
            coeffs,
            bias,
            stride,
            pad,
        })
    }

    pub fn m(&self) -> usize {
        self.basis.m()
    }
    pub fn s(&self) -> usize {
        self.coeffs.s
    }
    pub fn n(&self) -> usize {
        self.coeffs.n
    }
    pub fn in_channels(&self) -> usize {
        self.coeffs.s * self.basis.p
    }

    /// Shape of the dense layer this one stands in for.
    pub fn shape(&self) -> LayerShape {
        LayerShape::of(self.n(), self.in_channels(), self.basis.h, self.basis.w)
    }

    /// The `1×1` combine weight `(n, s·m, 1, 1)`.
    pub fn combine_weight(&self) -> Tensor4<T> {
        let (n, s, m) = (self.n(), self.s(), self.m());
        Tensor4::from_fn([n, s * m, 1, 1], |[i, k, _, _]| {
            self.coeffs.alpha(k % m, i, k / m)
        })
    }

    /// Dense weight `unflatten(B·A)`.
    pub fn reconstructed_weight(&self) -> Result<Tensor4<T>> {
        reconstruct(&self.basis, &self.coeffs, self.shape(), self.s())
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.in_channels() {
            return Err(Error::shape(
                "decomposed forward",
                format!(
                    "input has {} channels, layer expects s·p = {}·{}",
                    x.c(),
                    self.s(),
                    self.basis.p
                ),
            ));
        }
        Ok(())
    }
}

pub(crate) fn add_bias<T: Scalar>(y: &mut Tensor4<T>, bias: &[T]) {
    let [batch, n, h, w] = y.dims();
    let plane = h * w;
    let data = y.data_mut();
    for b in 0..batch {
        for (o, &bo) in bias.iter().enumerate().take(n) {
            let base = (b * n + o) * plane;
            data[base..base + plane].iter_mut().for_each(|v| *v += bo);
        }
    }
}

/// Basis-stage output `(batch, s·m, oh, ow)`, split-major.
pub fn basis_stage<T: Scalar>(
    x: &Tensor4<T>,
    layer: &DecomposedLayer<T>,
    macs: &mut u64,
) -> Result<Tensor4<T>> {
    layer.check_input(x)?;
    let filters = layer.basis.filters();
    let p = layer.basis.p;
    let parts = (0..layer.s())
        .map(|g| {
            conv2d_counted(
                &x.narrow_channels(g * p, p)?,
                &filters,
                layer.stride,
                layer.pad,
                macs,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor4::concat_channels(&parts)
}

/// Decomposed forward pass; multiply-adds executed are added to `macs`.
pub fn forward_counted<T: Scalar>(
    x: &Tensor4<T>,
    layer: &DecomposedLayer<T>,
    macs: &mut u64,
) -> Result<Tensor4<T>> {
    let z = basis_stage(x, layer, macs)?;
    let mut y = conv2d_counted(&z, &layer.combine_weight(), 1, 0, macs)?;
    if let Some(b) = &layer.bias {
        add_bias(&mut y, b);
    }
    if !y.is_finite() {
        return Err(Error::NonFinite {
            layer: "decomposed".into(),
            stage: "forward",
        });
    }
    Ok(y)
}

pub fn forward<T: Scalar>(x: &Tensor4<T>, layer: &DecomposedLayer<T>) -> Result<Tensor4<T>> {
    let mut macs = 0;
    forward_counted(x, layer, &mut macs)
}

/// Reference path: reconstruct the dense weight and convolve with it.
pub fn forward_via_reconstruction<T: Scalar>(
    x: &Tensor4<T>,
    layer: &DecomposedLayer<T>,
) -> Result<Tensor4<T>> {
    layer.check_input(x)?;
    let mut y = conv2d(x, &layer.reconstructed_weight()?, layer.stride, layer.pad)?;
    if let Some(b) = &layer.bias {
        add_bias(&mut y, b);
    }
    Ok(y)
}

/// Multiply-adds of one sample through the decomposed layer.
pub fn macs<T: Scalar>(layer: &DecomposedLayer<T>, out_h: usize, out_w: usize) -> Result<u64> {
    Ok(count_flops(layer.shape(), layer.m(), layer.s(), out_h, out_w)?.flops_compressed)
}
