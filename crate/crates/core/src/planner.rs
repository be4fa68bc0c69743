//! Compression rates, optimal split selection and exact parameter / MAC budgets.
//!
//! A layer with `n` output channels, `c` input channels and an `h × w`
//! kernel is cut into `s` splits of depth `p = c / s`. With `m` basis filters
//! the layer stores `m·p·h·w` basis weights and `m·n·s` coefficients.
//! Biases are never counted.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a convolution weight: `n` filters over `c` channels, `h × w` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer shape ({n}, {c}, {h}, {w}) has a zero dimension"
            )));
        }
        Ok(LayerShape { n, c, h, w })
    }

    /// Panicking constructor for literals in tests and examples.
    pub fn of(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::new(n, c, h, w).expect("valid layer shape")
    }

    pub fn kernel_area(&self) -> usize {
        self.h * self.w
    }

    pub fn params(&self) -> u64 {
        (self.n * self.c * self.h * self.w) as u64
    }

    /// Split depth `p = c / s`.
    pub fn split_depth(&self, s: usize) -> Result<usize> {
        if s == 0 || s > self.c || !self.c.is_multiple_of(s) {
            return Err(Error::Divisor { c: self.c, s });
        }
        Ok(self.c / s)
    }
}

/// Compression rate with one basis for whole 3-D filters: `m/n + m/(c·w·h)`.
pub fn rate_filter(shape: LayerShape, m: usize) -> f64 {
    let m = m as f64;
    m / shape.n as f64 + m / (shape.c * shape.kernel_area()) as f64
}

/// Compression rate with one basis for 2-D channel slices: `m/(n·c) + m/(w·h)`.
pub fn rate_channel(shape: LayerShape, m: usize) -> f64 {
    let m = m as f64;
    m / (shape.n * shape.c) as f64 + m / shape.kernel_area() as f64
}

/// Compression rate of the split-wise scheme: `m/(n·s) + m/(p·w·h)`.
pub fn rate_split(shape: LayerShape, m: usize, s: usize) -> Result<f64> {
    let p = shape.split_depth(s)?;
    let m = m as f64;
    Ok(m / (shape.n * s) as f64 + m / (p * shape.kernel_area()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalSplit {
    /// Continuous minimizer `√(c·w·h / n)`.
    pub s_star: f64,
    /// Continuous minimizer `√(n·c / (w·h))`.
    pub p_star: f64,
    pub s: usize,
    pub p: usize,
    /// `rate_split` at the quantized pair.
    pub rate: f64,
}

/// Closed-form optimal split and its quantization to a divisor of `c`.
///
/// The rate is `a·p + b/p` in `p`, so the best divisor is one of the two
/// divisors bracketing `p_star`; they are compared exactly in integer
/// arithmetic. Ties go to the smaller `p` (more splits).
pub fn optimal_split(shape: LayerShape, m: usize) -> OptimalSplit {
    let area = shape.kernel_area();
    let s_star = ((shape.c * area) as f64 / shape.n as f64).sqrt();
    let p_star = ((shape.n * shape.c) as f64 / area as f64).sqrt();

    let divisors = divisors(shape.c);
    let below = divisors
        .iter()
        .rev()
        .find(|&&d| d as f64 <= p_star)
        .copied();
    let above = divisors.iter().find(|&&d| d as f64 >= p_star).copied();
    let p = match (below, above) {
        (Some(lo), Some(hi)) => {
            if compare_split_rate(shape, lo, hi) != std::cmp::Ordering::Greater {
                lo
            } else {
                hi
            }
        }
        (Some(d), None) | (None, Some(d)) => d,
        (None, None) => unreachable!("1 and c always divide c"),
    };
    let s = shape.c / p;
    OptimalSplit {
        s_star,
        p_star,
        s,
        p,
        rate: rate_split(shape, m, s).expect("p divides c"),
    }
}

/// Exact ordering of `rate_split` at split depths `p1` and `p2`.
///
/// `m·p/(n·c) + m/(p·w·h)` scaled by `n·c·w·h·p1·p2 / m`.
pub fn compare_split_rate(shape: LayerShape, p1: usize, p2: usize) -> std::cmp::Ordering {
    let (p1, p2) = (p1 as u128, p2 as u128);
    let area = shape.kernel_area() as u128;
    let nc = (shape.n * shape.c) as u128;
    let lhs = p1 * p1 * area * p2 + nc * p2;
    let rhs = p2 * p2 * area * p1 + nc * p1;
    lhs.cmp(&rhs)
}

pub fn divisors(c: usize) -> Vec<usize> {
    (1..=c).filter(|&d| c.is_multiple_of(d)).collect()
}

/// Parameter and multiply-accumulate counts for a layer or a set of layers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Budget {
    pub params_original: u64,
    pub params_compressed: u64,
    pub flops_original: u64,
    pub flops_compressed: u64,
    pub ratio: f64,
}

impl Budget {
    pub fn new(
        params_original: u64,
        params_compressed: u64,
        flops_original: u64,
        flops_compressed: u64,
    ) -> Self {
        let ratio = if params_original == 0 {
            0.0
        } else {
            params_compressed as f64 / params_original as f64
        };
        Budget {
            params_original,
            params_compressed,
            flops_original,
            flops_compressed,
            ratio,
        }
    }

    pub fn flops_ratio(&self) -> f64 {
        if self.flops_original == 0 {
            0.0
        } else {
            self.flops_compressed as f64 / self.flops_original as f64
        }
    }
}

impl Add for Budget {
    type Output = Budget;
    fn add(self, rhs: Budget) -> Budget {
        Budget::new(
            self.params_original + rhs.params_original,
            self.params_compressed + rhs.params_compressed,
            self.flops_original + rhs.flops_original,
            self.flops_compressed + rhs.flops_compressed,
        )
    }
}

impl std::iter::Sum for Budget {
    fn sum<I: Iterator<Item = Budget>>(iter: I) -> Budget {
        iter.fold(Budget::default(), Add::add)
    }
}

/// Parameters of `shared_across` identically shaped layers that share one basis.
///
/// compressed = `m·p·w·h + shared_across·m·n·s`, original = `shared_across·n·c·w·h`.
pub fn count_params(shape: LayerShape, m: usize, s: usize, shared_across: usize) -> Result<Budget> {
    if shared_across == 0 {
        return Err(Error::InvalidArgument("shared_across must be >= 1".into()));
    }
    let member = GroupMember {
        shape,
        s,
        m_used: m,
    };
    count_group_params(m, &vec![member; shared_across])
}

/// One layer inside a sharing group; `m_used` is the basis prefix it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMember {
    pub shape: LayerShape,
    pub s: usize,
    pub m_used: usize,
}

/// Parameters of a group whose members read prefixes of one `m`-filter basis.
pub fn count_group_params(m: usize, members: &[GroupMember]) -> Result<Budget> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty sharing group".into()))?;
    if m == 0 {
        return Err(Error::InvalidArgument("basis size m must be >= 1".into()));
    }
    let filter_len = first.shape.split_depth(first.s)? * first.shape.kernel_area();
    let mut original = 0u64;
    let mut coeffs = 0u64;
    for member in members {
        let len = member.shape.split_depth(member.s)? * member.shape.kernel_area();
        if len != filter_len {
            return Err(Error::InvalidArgument(format!(
                "group members have basis filter sizes {filter_len} and {len}"
            )));
        }
        if member.m_used == 0 || member.m_used > m {
            return Err(Error::InvalidArgument(format!(
                "member uses {} of {m} basis filters",
                member.m_used
            )));
        }
        original += member.shape.params();
        coeffs += (member.m_used * member.shape.n * member.s) as u64;
    }
    Ok(Budget::new(
        original,
        (m * filter_len) as u64 + coeffs,
        0,
        0,
    ))
}

/// Multiply-accumulates of the original convolution and of the decomposed
/// pair (basis stage over `m·s` channels plus the `1×1` combine), together
/// with the unshared parameter budget of the layer.
pub fn count_flops(
    shape: LayerShape,
    m: usize,
    s: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Budget> {
    let p = shape.split_depth(s)?;
    let hw = (out_h * out_w) as u64;
    let area = shape.kernel_area() as u64;
    let ms = (m * s) as u64;
    let original = shape.params() * hw;
    let compressed = ms * p as u64 * area * hw + shape.n as u64 * ms * hw;
    let params = count_params(shape, m, s, 1)?;
    Ok(Budget::new(
        params.params_original,
        params.params_compressed,
        original,
        compressed,
    ))
}

/// How the split count of a layer is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitChoice {
    Fixed(usize),
    Auto,
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(SplitChoice::Auto);
        }
        s.parse::<usize>().map(SplitChoice::Fixed).map_err(|_| {
            Error::InvalidArgument(format!(
                "split count must be an integer or `auto`, got `{s}`"
            ))
        })
    }
}

/// Decomposition settings of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: String,
    pub m: usize,
    pub s: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_group: Option<String>,
    /// Number of leading filters of a shared basis this layer reads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<usize>,
}

impl PlanEntry {
    pub fn new(layer: impl Into<String>, shape: LayerShape, m: usize, s: usize) -> Result<Self> {
        let layer = layer.into();
        let p = shape.split_depth(s).map_err(|e| Error::Plan {
            layer: layer.clone(),
            detail: e.to_string(),
        })?;
        if m == 0 {
            return Err(Error::Plan {
                layer,
                detail: "basis size m must be >= 1".into(),
            });
        }
        Ok(PlanEntry {
            layer,
            m,
            s,
            p,
            share_group: None,
            slice: None,
        })
    }

    /// Basis filters this layer reads.
    pub fn m_used(&self) -> usize {
        self.slice.unwrap_or(self.m)
    }

    pub fn check(&self, shape: LayerShape) -> Result<()> {
        let bad = |detail: String| Error::Plan {
            layer: self.layer.clone(),
            detail,
        };
        if self.s * self.p != shape.c {
            return Err(bad(format!(
                "s·p = {}·{} != c = {}",
                self.s, self.p, shape.c
            )));
        }
        if self.m == 0 || self.s == 0 || self.s > shape.c {
            return Err(bad(format!("m = {}, s = {} out of range", self.m, self.s)));
        }
        if let Some(k) = self.slice {
            if k == 0 || k > self.m {
                return Err(bad(format!("slice {k} outside 1..={}", self.m)));
            }
        }
        Ok(())
    }
}

/// Plan a single layer, resolving `Auto` through [`optimal_split`].
pub fn plan_layer(
    layer: impl Into<String>,
    shape: LayerShape,
    m: usize,
    choice: SplitChoice,
) -> Result<PlanEntry> {
    let s = match choice {
        SplitChoice::Fixed(s) => s,
        SplitChoice::Auto => optimal_split(shape, m).s,
    };
    PlanEntry::new(layer, shape, m, s)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanFlags {
    /// Split counts were chosen by [`optimal_split`].
    #[serde(default)]
    pub auto_split: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharing: Option<crate::sharing::ShareStrategy>,
}

/// Per-layer decomposition choices plus sharing membership.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub entries: Vec<PlanEntry>,
    #[serde(default)]
    pub flags: PlanFlags,
}

impl DecompositionPlan {
    pub fn entry(&self, layer: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn entry_mut(&mut self, layer: &str) -> Option<&mut PlanEntry> {
        self.entries.iter_mut().find(|e| e.layer == layer)
    }

    /// Entries grouped for fitting: each share group in first-appearance
    /// order, unshared layers as singletons.
    pub fn fit_groups(&self) -> Vec<Vec<&PlanEntry>> {
        let mut groups: Vec<(Option<&str>, Vec<&PlanEntry>)> = Vec::new();
        for e in &self.entries {
            match e.share_group.as_deref() {
                Some(g) => match groups.iter_mut().find(|(id, _)| *id == Some(g)) {
                    Some((_, members)) => members.push(e),
                    None => groups.push((Some(g), vec![e])),
                },
                None => groups.push((None, vec![e])),
            }
        }
        groups.into_iter().map(|(_, m)| m).collect()
    }
}
