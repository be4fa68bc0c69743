//! Small synthetic models and datasets with seeded weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::decomposer::{unflatten, SplitMatrix};
use crate::error::Result;
use crate::graph::{InputSpec, LayerOp, ModelGraph};
use crate::planner::LayerShape;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor4};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normal weights with standard deviation `√(2 / fan_in)`.
pub fn he_weight<T: Scalar>(rng: &mut impl Rng, shape: LayerShape) -> Tensor4<T> {
    let std = (2.0 / (shape.c * shape.h * shape.w) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor4::from_fn([shape.n, shape.c, shape.h, shape.w], |_| {
        T::of(normal.sample(rng))
    })
}

/// Weight whose split matrix (with `s` splits) has exactly rank `rank`.
pub fn low_rank_weight<T: Scalar>(
    rng: &mut impl Rng,
    shape: LayerShape,
    s: usize,
    rank: usize,
) -> Result<Tensor4<T>> {
    let p = shape.split_depth(s)?;
    let rows = p * shape.h * shape.w;
    let cols = shape.n * s;
    // Entries of B·A have variance 2 / fan_in, as for he_weight.
    let std = (2.0 / (rank * rows) as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let b = Matrix::from_fn(rows, rank, |_, _| T::of(normal.sample(rng) * std));
    let a = Matrix::from_fn(rank, cols, |_, _| T::of(normal.sample(rng)));
    unflatten(&SplitMatrix {
        mat: b.matmul(&a)?,
        shape,
        s,
    })
}

/// Residual-network body: `blocks` pairs of `c → c` `k×k` convolutions with
/// a ReLU between them, each pair annotated as one block.
pub fn residual_body<T: Scalar>(
    seed: u64,
    blocks: usize,
    c: usize,
    k: usize,
    spatial: usize,
) -> ModelGraph<T> {
    let mut rng = rng(seed);
    let mut g = ModelGraph::new(InputSpec {
        c,
        h: spatial,
        w: spatial,
    });
    let shape = LayerShape::of(c, c, k, k);
    for b in 0..blocks {
        let block = format!("block{b}");
        g.add_conv(
            &format!("{block}.conv1"),
            he_weight(&mut rng, shape),
            None,
            1,
            k / 2,
        )
        .block = Some(block.clone());
        g.add_op(&format!("{block}.relu"), LayerOp::Relu).block = Some(block.clone());
        let conv2 = format!("{block}.conv2");
        g.add_conv(&conv2, he_weight(&mut rng, shape), None, 1, k / 2)
            .block = Some(block);
    }
    g
}

/// Three stages of widths `widths`, `convs_per_stage` `3×3` convolutions
/// each; the first convolution of stages two and three widens the channels
/// and halves the resolution.
pub fn staged<T: Scalar>(
    seed: u64,
    widths: [usize; 3],
    convs_per_stage: usize,
    spatial: usize,
) -> ModelGraph<T> {
    let mut rng = rng(seed);
    let mut g = ModelGraph::new(InputSpec {
        c: widths[0],
        h: spatial,
        w: spatial,
    });
    let mut c = widths[0];
    for (si, &width) in widths.iter().enumerate() {
        let stage = format!("stage{}", si + 1);
        for k in 0..convs_per_stage {
            let stride = if k == 0 && width != c { 2 } else { 1 };
            let name = format!("{stage}.conv{k}");
            g.add_conv(
                &name,
                he_weight(&mut rng, LayerShape::of(width, c, 3, 3)),
                None,
                stride,
                1,
            )
            .stage = Some(stage.clone());
            g.add_op(&format!("{stage}.relu{k}"), LayerOp::Relu).stage = Some(stage.clone());
            c = width;
        }
    }
    g
}

/// Densely growing chain: layer `b` maps `c0 + growth·b` channels to
/// `c0 + growth·(b + 1)`.
pub fn dense_growth<T: Scalar>(
    seed: u64,
    c0: usize,
    growth: usize,
    layers: usize,
    spatial: usize,
) -> ModelGraph<T> {
    let mut rng = rng(seed);
    let mut g = ModelGraph::new(InputSpec {
        c: c0,
        h: spatial,
        w: spatial,
    });
    for b in 0..layers {
        let c = c0 + growth * b;
        let shape = LayerShape::of(c + growth, c, 3, 3);
        g.add_conv(&format!("dense{b}"), he_weight(&mut rng, shape), None, 1, 1);
    }
    g
}

/// Model built only from `1×1` convolutions.
pub fn pointwise<T: Scalar>(seed: u64, widths: &[usize], spatial: usize) -> ModelGraph<T> {
    let mut rng = rng(seed);
    let mut g = ModelGraph::new(InputSpec {
        c: widths[0],
        h: spatial,
        w: spatial,
    });
    for (i, pair) in widths.windows(2).enumerate() {
        let shape = LayerShape::of(pair[1], pair[0], 1, 1);
        g.add_conv(
            &format!("pw{i}"),
            he_weight(&mut rng, shape),
            Some(vec![T::of(0.01); pair[1]]),
            1,
            0,
        );
        if i + 2 < widths.len() {
            g.add_op(&format!("relu{i}"), LayerOp::Relu);
        }
    }
    g
}

/// Seeded normal inputs `(samples, c, h, w)` for a graph.
pub fn random_inputs<T: Scalar>(seed: u64, graph: &ModelGraph<T>, samples: usize) -> Tensor4<T> {
    let mut rng = rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor4::from_fn(
        [samples, graph.input.c, graph.input.h, graph.input.w],
        |_| T::of(normal.sample(&mut rng)),
    )
}

/// A teacher layer of known split-matrix rank, the student's pretrained
/// weight (teacher plus noise) and the teacher's input/output pairs.
pub struct TeacherStudent<T> {
    pub teacher: ModelGraph<T>,
    /// Single convolution `conv` holding the noisy pretrained weight.
    pub student: ModelGraph<T>,
    pub data: Dataset<T>,
    pub rank: usize,
}

pub fn teacher_student<T: Scalar>(
    seed: u64,
    shape: LayerShape,
    s: usize,
    rank: usize,
    noise: f64,
    samples: usize,
    spatial: usize,
) -> Result<TeacherStudent<T>> {
    let mut rng = rng(seed);
    let w: Tensor4<T> = low_rank_weight(&mut rng, shape, s, rank)?;
    let normal = Normal::new(0.0, noise).expect("non-negative noise");
    let noisy = Tensor4::from_fn(w.dims(), |i| w[i] + T::of(normal.sample(&mut rng)));
    let input = InputSpec {
        c: shape.c,
        h: spatial,
        w: spatial,
    };
    let pad = shape.h / 2;
    let mut teacher = ModelGraph::new(input);
    teacher.add_conv("conv", w, None, 1, pad);
    let mut student = ModelGraph::new(input);
    student.add_conv("conv", noisy, None, 1, pad);
    let x = random_inputs(rng.random(), &teacher, samples);
    let y = teacher.forward(&x)?;
    Ok(TeacherStudent {
        teacher,
        student,
        data: Dataset::new(x, y)?,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposer::split_and_flatten;
    use crate::svd::truncated_svd;

    #[test]
    fn low_rank_weight_has_requested_rank() {
        let mut r = rng(3);
        let w: Tensor4<f64> = low_rank_weight(&mut r, LayerShape::of(6, 4, 3, 3), 2, 3).unwrap();
        let sm = split_and_flatten(&w, 2).unwrap();
        let svd = truncated_svd(&sm.mat, 6).unwrap();
        assert!(svd.sigma[2] > 1e-3);
        assert!(svd.sigma[3] < 1e-10 * svd.sigma[0]);
    }

    #[test]
    fn toy_graphs_chain() {
        residual_body::<f64>(1, 2, 8, 3, 6).shape_chain().unwrap();
        staged::<f64>(1, [4, 8, 16], 2, 8).shape_chain().unwrap();
        dense_growth::<f64>(1, 12, 12, 4, 4).shape_chain().unwrap();
        pointwise::<f64>(1, &[4, 6, 3], 4).shape_chain().unwrap();
    }
}
