use std::fs;
use std::io::Write;
use std::path::Path;

use filterbasis::planner::{count_group_params, plan_layer, GroupMember};
use filterbasis::sharing::{
    self, plan_block_sharing, plan_group_sharing, plan_network_sharing_dense, stage_boundaries,
};
use filterbasis::toy;
use filterbasis::trainer::residuals;
use filterbasis::{
    check_equivalence, count_flops, decompose_graph, export_for_inference, load_dataset,
    load_model, save_dataset, save_model, train, Budget, Dataset, DecompositionPlan, Error,
    LayerOp, LayerShape, LossKind, ModelGraph, OptimizerState, TrainConfig,
};

use crate::args::{
    DecomposeArgs, Loss, PlanArgs, ReportArgs, Share, SynthArgs, ToyKind, TrainArgs, VerifyArgs,
};
use crate::table::{percent, Table};
use crate::{Failure, EXIT_NUMERICAL, EXIT_VALIDATION};

/// Largest relative difference `verify` accepts.
pub const VERIFY_TOLERANCE: f64 = 1e-6;

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::new(EXIT_VALIDATION, format!("writing output: {e}")))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        emit($out, &format!("{}\n", format_args!($($arg)*)))
    };
}

pub fn plan(a: &PlanArgs, out: Out) -> Result<(), Failure> {
    let mut g: ModelGraph<f64> = load_model(&a.model)?;
    let mut plan = DecompositionPlan::default();
    plan.flags.auto_split = a.s == filterbasis::SplitChoice::Auto;
    if a.share != Share::Network {
        let mut problems = Vec::new();
        for layer in g
            .layers
            .iter()
            .filter(|l| matches!(l.op, LayerOp::Conv { .. }))
        {
            let shape = g.conv_shape(layer)?.expect("convolution");
            match plan_layer(&layer.name, shape, a.m, a.s) {
                Ok(e) => {
                    let limit = (e.p * shape.kernel_area()).min(shape.n * e.s);
                    if a.share == Share::None && a.m > limit {
                        problems.push(format!(
                            "{}: m = {} exceeds min(p·h·w, n·s) = {limit} at s = {}",
                            layer.name, a.m, e.s
                        ));
                    } else {
                        plan.entries.push(e);
                    }
                }
                Err(e) => problems.push(format!("{}: {e}", layer.name)),
            }
        }
        if !problems.is_empty() {
            return Err(Failure::new(
                EXIT_VALIDATION,
                format!("unplannable layers:\n  {}", problems.join("\n  ")),
            ));
        }
    }
    let shared = match a.share {
        Share::None => None,
        Share::Block => Some(plan_block_sharing(&g, a.m)?),
        Share::Group => {
            let mut stages: Vec<(String, usize)> = Vec::new();
            for l in &g.layers {
                if let Some(s) = &l.stage {
                    if l.is_convolution() && !stages.iter().any(|(x, _)| x == s) {
                        stages.push((s.clone(), a.m));
                    }
                }
            }
            if stages.is_empty() {
                return Err(Failure::new(
                    EXIT_VALIDATION,
                    "group sharing needs stage annotations",
                ));
            }
            Some(plan_group_sharing(&g, &stage_boundaries(&g, &stages)?)?)
        }
        Share::Network => {
            let convs = g.layers.iter().filter(|l| l.is_convolution()).count();
            Some(plan_network_sharing_dense(
                &g,
                a.splits.unwrap_or(convs),
                a.m,
            )?)
        }
    };
    if let Some(sp) = &shared {
        sharing::apply(sp, &mut plan, &g)?;
    }
    g.plan = Some(plan);
    let table = plan_table(&g)?;
    save_model(&g, &a.out)?;
    emit(out, &table.render(a.format))
}

/// One row per fit group (shared basis or single layer) plus a total.
pub fn plan_table(g: &ModelGraph<f64>) -> Result<Table, Failure> {
    let plan = g
        .plan
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_VALIDATION, "model has no plan"))?;
    let chain = g.shape_chain()?;
    let mut t = Table::new(vec![
        "group",
        "layers",
        "m",
        "s",
        "p",
        "params",
        "original",
        "rate",
        "macs",
        "macs_original",
    ]);
    let mut total = Budget::default();
    for group in plan.fit_groups() {
        let mut members = Vec::new();
        let mut macs = Budget::default();
        for e in &group {
            let idx = g.layer_index(&e.layer).ok_or_else(|| {
                Failure::new(
                    EXIT_VALIDATION,
                    format!("plan names missing layer `{}`", e.layer),
                )
            })?;
            let shape: LayerShape = g.conv_shape(&g.layers[idx])?.ok_or_else(|| {
                Failure::new(
                    EXIT_VALIDATION,
                    format!("`{}` is not a convolution", e.layer),
                )
            })?;
            let [_, oh, ow] = chain[idx];
            macs = macs + count_flops(shape, e.m_used(), e.s, oh, ow)?;
            members.push(GroupMember {
                shape,
                s: e.s,
                m_used: e.m_used(),
            });
        }
        let params = count_group_params(group[0].m, &members)?;
        let span = |f: fn(&&filterbasis::PlanEntry) -> usize| {
            let lo = group.iter().map(f).min().unwrap_or(0);
            let hi = group.iter().map(f).max().unwrap_or(0);
            if lo == hi {
                lo.to_string()
            } else {
                format!("{lo}-{hi}")
            }
        };
        t.push(vec![
            group[0]
                .share_group
                .clone()
                .unwrap_or_else(|| group[0].layer.clone()),
            group.len().to_string(),
            group[0].m.to_string(),
            span(|e| e.s),
            span(|e| e.p),
            params.params_compressed.to_string(),
            params.params_original.to_string(),
            percent(params.params_compressed, params.params_original),
            macs.flops_compressed.to_string(),
            macs.flops_original.to_string(),
        ]);
        total = total
            + Budget::new(
                params.params_original,
                params.params_compressed,
                macs.flops_original,
                macs.flops_compressed,
            );
    }
    t.push(vec![
        "total".into(),
        plan.entries.len().to_string(),
        "".into(),
        "".into(),
        "".into(),
        total.params_compressed.to_string(),
        total.params_original.to_string(),
        percent(total.params_compressed, total.params_original),
        total.flops_compressed.to_string(),
        total.flops_original.to_string(),
    ]);
    Ok(t)
}

pub fn decompose(a: &DecomposeArgs, out: Out) -> Result<(), Failure> {
    let g: ModelGraph<f64> = load_model(&a.model)?;
    let (d, reports) = decompose_graph(&g)?;
    save_model(&d, &a.out)?;
    for r in reports {
        let group = r.group.as_deref().unwrap_or("-");
        say!(
            out,
            "layer={} group={group} m={} s={} residual={:.6e}",
            r.layer,
            r.m,
            r.s,
            r.residual
        )?;
        if let Some(w) = r.warning {
            say!(out, "warning layer={}: {w:?}", r.layer)?;
        }
    }
    Ok(())
}

/// Layer that reads `blob`, for attributing load failures.
fn owner_of_blob(model: &Path, blob: &str) -> Option<String> {
    let manifest = filterbasis::model_io::read_manifest(model).ok()?;
    manifest
        .layers
        .iter()
        .find(|l| l.blob_refs().contains(&blob))
        .map(|l| l.name.clone())
}

pub fn verify(a: &VerifyArgs, out: Out) -> Result<(), Failure> {
    let g: ModelGraph<f64> = match load_model(&a.model) {
        Ok(g) => g,
        Err(e @ (Error::Checksum(_) | Error::BlobLength { .. } | Error::DanglingBlob(_))) => {
            let blob = match &e {
                Error::Checksum(n) | Error::DanglingBlob(n) => n.clone(),
                Error::BlobLength { name, .. } => name.clone(),
                _ => unreachable!(),
            };
            let layer = owner_of_blob(&a.model, &blob).unwrap_or_else(|| "?".into());
            say!(out, "FAIL layer={layer} blob={blob}: {e}")?;
            return Err(Failure::new(
                EXIT_NUMERICAL,
                format!("layer `{layer}`: {e}"),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(orig) = &a.original {
        let o: ModelGraph<f64> = load_model(orig)?;
        if o.input != g.input || o.output_shape()? != g.output_shape()? {
            return Err(Failure::new(
                EXIT_VALIDATION,
                format!(
                    "shape drift: original maps {:?} to {:?}, compressed maps {:?} to {:?}",
                    o.input,
                    o.output_shape()?,
                    g.input,
                    g.output_shape()?
                ),
            ));
        }
    }
    let x = toy::random_inputs(a.seed, &g, a.samples.max(1));
    let checks = match check_equivalence(&g, &x) {
        Ok(c) => c,
        Err(Error::NonFinite { layer, stage }) => {
            say!(out, "FAIL layer={layer}: non-finite values during {stage}")?;
            return Err(Failure::new(
                EXIT_NUMERICAL,
                format!("layer `{layer}` produced non-finite values"),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    if checks.is_empty() {
        return Err(Failure::new(
            EXIT_VALIDATION,
            "model has no decomposed layers",
        ));
    }
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.max_rel_err <= VERIFY_TOLERANCE;
        say!(
            out,
            "{} layer={} max_rel_err={:.3e}",
            if ok { "PASS" } else { "FAIL" },
            c.layer,
            c.max_rel_err
        )?;
        worst = worst.max(c.max_rel_err);
        if !ok {
            failed.push(c.layer.clone());
        }
    }
    if failed.is_empty() {
        say!(
            out,
            "PASS max_rel_err={worst:.3e} tolerance={VERIFY_TOLERANCE:e}"
        )
    } else {
        say!(
            out,
            "FAIL max_rel_err={worst:.3e} tolerance={VERIFY_TOLERANCE:e}"
        )?;
        Err(Failure::new(
            EXIT_NUMERICAL,
            format!("decomposed forward disagrees in {}", failed.join(", ")),
        ))
    }
}

pub fn train_cmd(a: &TrainArgs, out: Out) -> Result<(), Failure> {
    let mut g: ModelGraph<f64> = load_model(&a.model)?;
    let data: Dataset<f64> = load_dataset(&a.dataset)?;
    let mut cfg = g.training.clone().unwrap_or_default();
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.loss {
        cfg.loss = match v {
            Loss::Mse => LossKind::Mse,
            Loss::Ce => LossKind::CrossEntropy,
        };
    }
    if let Some(v) = &a.decay_epochs {
        cfg.decay_epochs = v.clone();
    }
    let mut opt = OptimizerState::new(cfg.clone())?;
    let result = train(&mut g, &data, &mut opt, a.epochs);
    let report = match result {
        Ok(r) => r,
        Err(Error::Diverged {
            epoch,
            loss,
            report,
        }) => {
            emit(out, &report.to_string())?;
            return Err(Failure::new(
                EXIT_NUMERICAL,
                format!("training diverged at epoch {epoch}: loss {loss:e}"),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    // Zero epochs leaves the artifact exactly as it was.
    if a.epochs > 0 {
        g.training = Some(cfg);
    }
    let g = if a.export {
        export_for_inference(&g)
    } else {
        g
    };
    save_model(&g, &a.out)?;
    let text = report.to_string();
    fs::write(a.out.join("train_report.txt"), &text)
        .map_err(|e| Error::io(a.out.join("train_report.txt"), e))?;
    emit(out, &text)
}

pub fn report(a: &ReportArgs, out: Out) -> Result<(), Failure> {
    if a.model.is_empty() {
        return Err(Failure::new(
            EXIT_VALIDATION,
            "report needs at least one --model",
        ));
    }
    let mut t = Table::new(vec![
        "model",
        "decomposed",
        "params",
        "params_original",
        "rate",
        "macs",
        "macs_original",
        "vs_first",
    ]);
    let mut first: Option<u64> = None;
    let mut residual_lines = Vec::new();
    for path in &a.model {
        let g: ModelGraph<f64> = load_model(path)?;
        let b = g.budget()?;
        let base = *first.get_or_insert(b.params_compressed);
        let decomposed = g
            .layers
            .iter()
            .filter(|l| matches!(l.op, LayerOp::DecomposedConv { .. }))
            .count();
        t.push(vec![
            path.display().to_string(),
            decomposed.to_string(),
            b.params_compressed.to_string(),
            b.params_original.to_string(),
            format!("{:.12}", b.ratio),
            b.flops_compressed.to_string(),
            b.flops_original.to_string(),
            format!("{:.12}", b.params_compressed as f64 / base as f64),
        ]);
        for (layer, r) in residuals(&g)? {
            residual_lines.push(format!(
                "residual model={} layer={layer} frobenius={r:.6e}",
                path.display()
            ));
        }
    }
    emit(out, &t.render(a.format))?;
    if a.format == crate::args::Format::Text {
        for line in residual_lines {
            say!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, out: Out) -> Result<(), Failure> {
    let seed = a.seed;
    let spatial = a.spatial;
    let (g, data): (ModelGraph<f64>, Option<Dataset<f64>>) = match a.kind {
        ToyKind::Edsr => (
            toy::residual_body(seed, a.blocks.unwrap_or(1), 256, 3, spatial),
            None,
        ),
        ToyKind::Srresnet => (
            toy::residual_body(seed, a.blocks.unwrap_or(1), 64, 3, spatial),
            None,
        ),
        ToyKind::Resnet => (
            toy::staged(seed, [16, 32, 64], a.blocks.unwrap_or(3), spatial),
            None,
        ),
        ToyKind::Densenet => (
            toy::dense_growth(seed, 12, 12, a.blocks.unwrap_or(6), spatial),
            None,
        ),
        ToyKind::Pointwise => (toy::pointwise(seed, &[8, 16, 8, 4], spatial), None),
        ToyKind::Teacher => {
            let shape = LayerShape::of(8, 8, 3, 3);
            let ts = toy::teacher_student::<f64>(seed, shape, 1, 4, 0.01, a.samples, spatial)?;
            (ts.student, Some(ts.data))
        }
    };
    let mut g = g;
    if a.kind == ToyKind::Teacher {
        g.training = Some(TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            gamma: 1e-2,
            ..TrainConfig::default()
        });
    }
    save_model(&g, &a.out)?;
    say!(
        out,
        "model {} layers={} -> {}",
        kind_name(a.kind),
        g.layers.len(),
        a.out.display()
    )?;
    if let Some(path) = &a.dataset {
        let data = match data {
            Some(d) => d,
            None => {
                let x = toy::random_inputs(seed.wrapping_add(1), &g, a.samples);
                let y = g.forward(&x)?;
                Dataset::new(x, y)?
            }
        };
        save_dataset(&data, path)?;
        say!(out, "dataset samples={} -> {}", data.len(), path.display())?;
    } else if a.kind == ToyKind::Teacher {
        return Err(Failure::new(
            EXIT_VALIDATION,
            "the teacher toy needs --dataset",
        ));
    }
    Ok(())
}

fn kind_name(k: ToyKind) -> &'static str {
    match k {
        ToyKind::Edsr => "edsr",
        ToyKind::Srresnet => "srresnet",
        ToyKind::Resnet => "resnet",
        ToyKind::Densenet => "densenet",
        ToyKind::Pointwise => "pointwise",
        ToyKind::Teacher => "teacher",
    }
}
