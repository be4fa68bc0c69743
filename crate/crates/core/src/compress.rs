//! Apply a decomposition plan to a graph.
//!
//! Every planned convolution becomes a decomposed convolution. Blob names:
//! `<group>.basis` for a share group (`<layer>.basis` otherwise) and
//! `<layer>.coeffs`; the original weight blob stays as the layer's frozen
//! reference for fine-tuning.

use crate::decomposed::forward_via_reconstruction;
use crate::decomposer::{fit, fit_shared, fit_sliced, split_and_flatten, FitWarning, SplitMatrix};
use crate::error::{Error, Result};
use crate::graph::{Blob, LayerOp, ModelGraph};
use crate::planner::PlanEntry;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFitReport {
    pub layer: String,
    pub group: Option<String>,
    pub m: usize,
    pub s: usize,
    /// `‖W − B·A‖_F` of this layer alone.
    pub residual: f64,
    pub warning: Option<FitWarning>,
}

/// Fit every plan group and rewrite its convolutions.
pub fn decompose_graph<T: Scalar>(
    graph: &ModelGraph<T>,
) -> Result<(ModelGraph<T>, Vec<LayerFitReport>)> {
    let plan = graph.plan.as_ref().ok_or_else(|| {
        Error::Manifest("model has no decomposition plan; run `plan` first".into())
    })?;
    graph.shape_chain()?;
    let mut out = graph.clone();
    let mut reports = Vec::new();
    for group in plan.fit_groups() {
        fit_group(graph, &mut out, &group, &mut reports)?;
    }
    out.shape_chain()?;
    Ok((out, reports))
}

/// Decomposed forward versus convolution with the reconstructed weight,
/// for one layer on the activations it actually receives.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceCheck {
    pub layer: String,
    /// `max|decomposed − reconstructed| / max|reconstructed|`.
    pub max_rel_err: f64,
}

/// Run `x` through the graph and compare both paths at every decomposed
/// convolution.
pub fn check_equivalence<T: Scalar>(
    graph: &ModelGraph<T>,
    x: &Tensor4<T>,
) -> Result<Vec<EquivalenceCheck>> {
    let mut out = Vec::new();
    let mut cur = x.clone();
    for layer in &graph.layers {
        let next = graph.apply(layer, &cur)?;
        if let LayerOp::DecomposedConv { .. } = layer.op {
            let reference = forward_via_reconstruction(&cur, &graph.decomposed_layer(layer)?)?;
            let scale = reference
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.to_f64_lossy().abs()));
            let diff = next.max_abs_diff(&reference).to_f64_lossy();
            out.push(EquivalenceCheck {
                layer: layer.name.clone(),
                max_rel_err: if diff == 0.0 {
                    0.0
                } else {
                    diff / scale.max(f64::MIN_POSITIVE)
                },
            });
        }
        cur = next;
    }
    Ok(out)
}

fn plan_err(layer: &str, detail: impl Into<String>) -> Error {
    Error::Plan {
        layer: layer.to_string(),
        detail: detail.into(),
    }
}

fn fit_group<T: Scalar>(
    src: &ModelGraph<T>,
    out: &mut ModelGraph<T>,
    group: &[&PlanEntry],
    reports: &mut Vec<LayerFitReport>,
) -> Result<()> {
    let first = group[0];
    let mut mats: Vec<SplitMatrix<T>> = Vec::with_capacity(group.len());
    let mut weights = Vec::with_capacity(group.len());
    for e in group {
        let layer = src
            .layer(&e.layer)
            .ok_or_else(|| plan_err(&e.layer, "no such layer"))?;
        let LayerOp::Conv { weight, .. } = &layer.op else {
            return Err(plan_err(
                &e.layer,
                "only plain convolutions can be decomposed",
            ));
        };
        let shape = src.conv_shape(layer)?.expect("conv");
        e.check(shape)?;
        if e.m != first.m {
            return Err(plan_err(
                &e.layer,
                format!(
                    "m = {} differs from m = {} of `{}` in the same group",
                    e.m, first.m, first.layer
                ),
            ));
        }
        let sm = split_and_flatten(&src.blob(weight)?.to_tensor()?, e.s)?;
        if let Some(prev) = mats.first() {
            if prev.mat.rows() != sm.mat.rows()
                || prev.shape.h != sm.shape.h
                || prev.shape.w != sm.shape.w
            {
                return Err(plan_err(
                    &e.layer,
                    format!(
                        "basis filter p·h·w = {} does not match {} of `{}`",
                        sm.mat.rows(),
                        prev.mat.rows(),
                        first.layer
                    ),
                ));
            }
        }
        weights.push(weight.clone());
        mats.push(sm);
    }
    let m = first.m;
    let cols: usize = mats.iter().map(|sm| sm.mat.cols()).sum();
    let limit = mats[0].mat.rows().min(cols);
    if m > limit {
        return Err(plan_err(
            &first.layer,
            format!("m = {m} exceeds min(p·h·w, n·s) = {limit} of the fitted matrix"),
        ));
    }
    let sliced = group.iter().any(|e| e.slice.is_some());
    let (basis, coeffs, warning) = if group.len() == 1 && !sliced {
        let f = fit(&mats[0], m).map_err(|e| plan_err(&first.layer, e.to_string()))?;
        (f.basis, vec![f.coeffs], f.warning)
    } else {
        let slices: Vec<usize> = group.iter().map(|e| e.m_used()).collect();
        let f = if sliced {
            fit_sliced(&mats, m, &slices)
        } else {
            fit_shared(&mats, m)
        }
        .map_err(|e| plan_err(&first.layer, e.to_string()))?;
        (f.basis, f.coeffs, f.warning)
    };
    let basis_name = match &first.share_group {
        Some(g) if group.len() > 1 || sliced => format!("{g}.basis"),
        _ => format!("{}.basis", first.layer),
    };
    out.insert_blob(basis_name.clone(), Blob::from_tensor(&basis.filters()));
    for (((e, sm), a), weight) in group.iter().zip(&mats).zip(coeffs).zip(weights) {
        let k = a.m();
        let bk = basis.mat.column_block(0, k)?;
        let residual = sm
            .mat
            .sub(&bk.matmul(&a.mat)?)?
            .frobenius_norm()
            .to_f64_lossy();
        let coeffs_name = format!("{}.coeffs", e.layer);
        out.insert_blob(coeffs_name.clone(), Blob::from_matrix(&a.mat));
        let idx = out.layer_index(&e.layer).expect("checked above");
        let LayerOp::Conv {
            bias, stride, pad, ..
        } = out.layers[idx].op.clone()
        else {
            unreachable!("checked above")
        };
        out.layers[idx].op = LayerOp::DecomposedConv {
            basis: basis_name.clone(),
            coeffs: coeffs_name,
            s: e.s,
            bias,
            stride,
            pad,
            slice: (k < basis.m()).then_some(k),
            reference: Some(weight),
        };
        log::info!("{}: m={} s={} residual={residual:.3e}", e.layer, k, e.s);
        reports.push(LayerFitReport {
            layer: e.layer.clone(),
            group: e.share_group.clone(),
            m: k,
            s: e.s,
            residual,
            warning,
        });
    }
    Ok(())
}
