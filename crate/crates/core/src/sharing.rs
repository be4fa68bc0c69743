//! Basis sharing across layers.
//!
//! A sharing plan groups convolutions that read one basis. Members of a
//! group must agree on the basis filter size `p·h·w`. Sliced groups give
//! member `l` only the first `slices[l]` basis filters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::planner::{count_group_params, DecompositionPlan, GroupMember, LayerShape, PlanEntry};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareStrategy {
    Block,
    Group,
    Network,
}

impl std::str::FromStr for ShareStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(ShareStrategy::Block),
            "group" => Ok(ShareStrategy::Group),
            "network" => Ok(ShareStrategy::Network),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sharing strategy `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareGroup {
    pub id: String,
    pub members: Vec<String>,
    pub m: usize,
    /// Basis prefix width per member; empty means every member reads all `m`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<usize>,
    /// Split depth forced on every member (`s = c / depth`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

impl ShareGroup {
    pub fn width(&self, idx: usize) -> usize {
        self.slices.get(idx).copied().unwrap_or(self.m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub strategy: ShareStrategy,
    pub groups: Vec<ShareGroup>,
}

/// A group of layers given by the caller for group-wise sharing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupBoundary {
    pub id: String,
    pub layers: Vec<String>,
    pub m: usize,
}

/// Split count of `layer` inside `group`: forced by the group's depth,
/// else taken from the graph's plan, else 1.
fn member_split<T: Scalar>(
    graph: &ModelGraph<T>,
    group: &ShareGroup,
    shape: LayerShape,
    layer: &str,
) -> usize {
    match group.depth {
        Some(d) if d > 0 && shape.c.is_multiple_of(d) => shape.c / d,
        Some(_) => 0,
        None => graph
            .plan
            .as_ref()
            .and_then(|p| p.entry(layer))
            .map(|e| e.s)
            .unwrap_or(1),
    }
}

fn conv_shape<T: Scalar>(graph: &ModelGraph<T>, layer: &str) -> Result<LayerShape> {
    let l = graph.layer(layer).ok_or_else(|| Error::Plan {
        layer: layer.into(),
        detail: "no such layer".into(),
    })?;
    graph.conv_shape(l)?.ok_or_else(|| Error::Plan {
        layer: layer.into(),
        detail: "not a convolution".into(),
    })
}

/// One group per residual block, holding the block's convolutions.
pub fn plan_block_sharing<T: Scalar>(graph: &ModelGraph<T>, m: usize) -> Result<SharingPlan> {
    let mut groups: Vec<ShareGroup> = Vec::new();
    for layer in graph.layers.iter().filter(|l| l.is_convolution()) {
        let Some(block) = &layer.block else { continue };
        match groups.iter_mut().find(|g| &g.id == block) {
            Some(g) => g.members.push(layer.name.clone()),
            None => groups.push(ShareGroup {
                id: block.clone(),
                members: vec![layer.name.clone()],
                m,
                slices: Vec::new(),
                depth: None,
            }),
        }
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument(
            "graph has no residual-block annotations on its convolutions".into(),
        ));
    }
    let plan = SharingPlan {
        strategy: ShareStrategy::Block,
        groups,
    };
    validate(&plan, graph)?.into_result()?;
    Ok(plan)
}

/// One group per boundary; members must agree on `p·h·w`.
pub fn plan_group_sharing<T: Scalar>(
    graph: &ModelGraph<T>,
    boundaries: &[GroupBoundary],
) -> Result<SharingPlan> {
    let plan = SharingPlan {
        strategy: ShareStrategy::Group,
        groups: boundaries
            .iter()
            .filter(|b| !b.layers.is_empty())
            .map(|b| ShareGroup {
                id: b.id.clone(),
                members: b.layers.clone(),
                m: b.m,
                slices: Vec::new(),
                depth: None,
            })
            .collect(),
    };
    validate(&plan, graph)?.into_result()?;
    Ok(plan)
}

/// Boundaries from `stage` annotations. Within a stage the input depth
/// shared by most convolutions defines the group; convolutions with any
/// other depth (stage transitions) get singleton groups of their own, with
/// `m` capped at `min(c·h·w, n)`.
pub fn stage_boundaries<T: Scalar>(
    graph: &ModelGraph<T>,
    m_per_stage: &[(String, usize)],
) -> Result<Vec<GroupBoundary>> {
    let mut out = Vec::new();
    for (stage, m) in m_per_stage {
        let mut members = Vec::new();
        for layer in graph.layers.iter().filter(|l| l.is_convolution()) {
            if layer.stage.as_deref() == Some(stage.as_str()) {
                members.push((layer.name.clone(), conv_shape(graph, &layer.name)?));
            }
        }
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "stage `{stage}` has no convolutions"
            )));
        }
        let mut counts: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        for (_, s) in &members {
            *counts.entry((s.c, s.h, s.w)).or_default() += 1;
        }
        let common = counts
            .iter()
            .max_by_key(|(k, v)| (**v, k.0))
            .map(|(k, _)| *k)
            .expect("non-empty");
        let mut main = Vec::new();
        for (name, s) in members {
            if (s.c, s.h, s.w) == common {
                main.push(name);
            } else {
                // A lone layer cannot use more filters than its unsplit
                // matrix has rows or columns.
                out.push(GroupBoundary {
                    id: format!("{stage}.{name}"),
                    layers: vec![name],
                    m: (*m).min(s.c * s.h * s.w).min(s.n),
                });
            }
        }
        out.push(GroupBoundary {
            id: stage.clone(),
            layers: main,
            m: *m,
        });
    }
    Ok(out)
}

/// One network-wide basis cut into `total_splits` equal slices. Layer `l`
/// reads `k_l = ⌈total_splits · c_l / c_max⌉` slices, each of
/// `m_per_split` filters, and is split with depth `c_max / total_splits`.
/// Input depths must grow strictly along the network.
pub fn plan_network_sharing_dense<T: Scalar>(
    graph: &ModelGraph<T>,
    total_splits: usize,
    m_per_split: usize,
) -> Result<SharingPlan> {
    if total_splits == 0 || m_per_split == 0 {
        return Err(Error::InvalidArgument(
            "total splits and filters per split must be >= 1".into(),
        ));
    }
    let mut convs = Vec::new();
    for layer in graph.layers.iter().filter(|l| l.is_convolution()) {
        convs.push((layer.name.clone(), conv_shape(graph, &layer.name)?));
    }
    let (_, last) = convs
        .last()
        .ok_or_else(|| Error::InvalidArgument("graph has no convolutions".into()))?;
    for pair in convs.windows(2) {
        if pair[1].1.c <= pair[0].1.c {
            return Err(Error::InvalidArgument(format!(
                "input channels do not grow: `{}` has {} after {} of `{}`",
                pair[1].0, pair[1].1.c, pair[0].1.c, pair[0].0
            )));
        }
    }
    let c_max = last.c;
    if c_max % total_splits != 0 {
        return Err(Error::InvalidArgument(format!(
            "{total_splits} splits do not divide the final depth {c_max}"
        )));
    }
    let depth = c_max / total_splits;
    let mut slices = Vec::with_capacity(convs.len());
    for (name, shape) in &convs {
        if shape.c % depth != 0 {
            return Err(Error::InvalidArgument(format!(
                "`{name}` has {} input channels, not a multiple of the split depth {depth}",
                shape.c
            )));
        }
        let k = (total_splits * shape.c).div_ceil(c_max);
        slices.push(k * m_per_split);
    }
    let plan = SharingPlan {
        strategy: ShareStrategy::Network,
        groups: vec![ShareGroup {
            id: "network".into(),
            members: convs.into_iter().map(|(n, _)| n).collect(),
            m: total_splits * m_per_split,
            slices,
            depth: Some(depth),
        }],
    };
    validate(&plan, graph)?.into_result()?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Parameters of the grouped layers: basis stored once plus coefficients.
    pub params_compressed: u64,
    pub params_original: u64,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_clean() {
            Ok(self)
        } else {
            Err(Error::Sharing(
                self.violations
                    .iter()
                    .map(|v| format!("{}: {}", v.kind, v.detail))
                    .collect(),
            ))
        }
    }
}

/// Check every plan invariant and cross-check the parameter total against
/// the planner's group count. Errors only for graph lookups that cannot be
/// attributed to the plan.
pub fn validate<T: Scalar>(plan: &SharingPlan, graph: &ModelGraph<T>) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let mut v =
        |kind: &'static str, detail: String| report.violations.push(Violation { kind, detail });
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    let mut budgets = Vec::new();
    for group in &plan.groups {
        if !ids.insert(group.id.as_str()) {
            v(
                "duplicate-group",
                format!("group id `{}` used twice", group.id),
            );
        }
        if group.members.is_empty() {
            v(
                "empty-group",
                format!("group `{}` has no members", group.id),
            );
            continue;
        }
        if group.m == 0 {
            v("basis-size", format!("group `{}` has m = 0", group.id));
            continue;
        }
        if !group.slices.is_empty() && group.slices.len() != group.members.len() {
            v(
                "slice-count",
                format!(
                    "group `{}` has {} slice widths for {} members",
                    group.id,
                    group.slices.len(),
                    group.members.len()
                ),
            );
            continue;
        }
        let mut members = Vec::new();
        let mut first: Option<(&str, usize)> = None;
        let mut own_coeffs = 0u64;
        let mut own_original = 0u64;
        for (idx, name) in group.members.iter().enumerate() {
            if let Some(prev) = owner.insert(name, &group.id) {
                v(
                    "multi-membership",
                    format!("layer `{name}` is in groups `{prev}` and `{}`", group.id),
                );
            }
            let shape = match graph.layer(name) {
                None => {
                    v(
                        "unknown-layer",
                        format!("group `{}` names missing layer `{name}`", group.id),
                    );
                    continue;
                }
                Some(l) => match graph.conv_shape(l)? {
                    Some(s) => s,
                    None => {
                        v(
                            "not-convolution",
                            format!("layer `{name}` is not a convolution"),
                        );
                        continue;
                    }
                },
            };
            let s = member_split(graph, group, shape, name);
            if s == 0 || shape.c % s != 0 {
                v(
                    "split",
                    format!(
                        "layer `{name}` with c = {} cannot use the group depth",
                        shape.c
                    ),
                );
                continue;
            }
            let len = shape.c / s * shape.kernel_area();
            match first {
                None => first = Some((name, len)),
                Some((f, flen)) if flen != len => v(
                    "depth-mismatch",
                    format!("`{f}` has basis filters of size {flen}, `{name}` of size {len}"),
                ),
                _ => {}
            }
            let k = group.width(idx);
            if k == 0 || k > group.m {
                v(
                    "slice-range",
                    format!("layer `{name}` reads {k} of {} filters", group.m),
                );
                continue;
            }
            own_coeffs += (k * shape.n * s) as u64;
            own_original += shape.params();
            members.push(GroupMember {
                shape,
                s,
                m_used: k,
            });
        }
        if group.slices.windows(2).any(|w| w[1] < w[0]) {
            v(
                "slice-order",
                format!(
                    "slice widths of group `{}` decrease: {:?}",
                    group.id, group.slices
                ),
            );
        }
        let Some((_, flen)) = first else { continue };
        if group.m > flen {
            v(
                "basis-size",
                format!(
                    "group `{}` asks for {} filters of size {flen}",
                    group.id, group.m
                ),
            );
        }
        let columns: usize = members.iter().map(|mm| mm.shape.n * mm.s).sum();
        if members.len() == group.members.len() && group.m > columns {
            v(
                "basis-size",
                format!(
                    "group `{}` asks for {} filters but its members have {columns} coefficient columns",
                    group.id, group.m
                ),
            );
        }
        if members.len() == group.members.len() {
            budgets.push((
                group,
                members,
                (group.m * flen) as u64 + own_coeffs,
                own_original,
            ));
        }
    }
    if report.violations.is_empty() {
        for (group, members, own, original) in budgets {
            let planned = count_group_params(group.m, &members)?;
            if planned.params_compressed != own || planned.params_original != original {
                report.violations.push(Violation {
                    kind: "budget-mismatch",
                    detail: format!(
                        "group `{}`: {own} parameters vs planner {}",
                        group.id, planned.params_compressed
                    ),
                });
            }
            report.params_compressed += own;
            report.params_original += original;
        }
    }
    Ok(report)
}

/// Fold a validated sharing plan into a decomposition plan. Missing entries
/// are created; singleton groups without slicing stay unshared.
pub fn apply<T: Scalar>(
    sharing: &SharingPlan,
    plan: &mut DecompositionPlan,
    graph: &ModelGraph<T>,
) -> Result<()> {
    let mut probe = graph.clone();
    probe.plan = Some(plan.clone());
    validate(sharing, &probe)?.into_result()?;
    for group in &sharing.groups {
        let shared = group.members.len() > 1 || !group.slices.is_empty();
        for (idx, name) in group.members.iter().enumerate() {
            let shape = conv_shape(graph, name)?;
            let s = member_split(&probe, group, shape, name);
            let mut entry = PlanEntry::new(name.clone(), shape, group.m, s)?;
            entry.share_group = shared.then(|| group.id.clone());
            let k = group.width(idx);
            entry.slice = (k < group.m).then_some(k);
            match plan.entry_mut(name) {
                Some(e) => *e = entry,
                None => plan.entries.push(entry),
            }
        }
    }
    plan.flags.sharing = Some(sharing.strategy);
    Ok(())
}
