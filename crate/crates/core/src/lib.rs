//! Filter-basis compression of convolutional layers.
//!
//! A convolution weight `(n, c, h, w)` is cut into `s` channel splits of depth
//! `p = c / s`; the resulting `n·s` small filters are approximated by linear
//! combinations of `m` basis filters. The decomposed layer runs as `s`
//! weight-shared convolutions with the basis followed by a `1×1` combine.

pub mod compress;
pub mod dataset;
pub mod decomposed;
pub mod decomposer;
pub mod error;
pub mod graph;
pub mod model_io;
pub mod planner;
pub mod scalar;
pub mod sharing;
pub mod svd;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use compress::{check_equivalence, decompose_graph, EquivalenceCheck, LayerFitReport};
pub use dataset::{Batch, Dataset};
pub use decomposed::DecomposedLayer;
pub use decomposer::{
    fit, fit_shared, fit_sliced, reconstruct, slice_basis, split_and_flatten, unflatten, BasisSet,
    CoefficientSet, SplitMatrix,
};
pub use error::{Error, Result};
pub use graph::{Blob, InputSpec, Layer, LayerOp, ModelGraph};
pub use model_io::{load_dataset, load_model, save_dataset, save_model};
pub use planner::{
    count_flops, count_params, optimal_split, rate_channel, rate_filter, rate_split, Budget,
    DecompositionPlan, LayerShape, PlanEntry, SplitChoice,
};
pub use scalar::Scalar;
pub use sharing::{ShareStrategy, SharingPlan};
pub use svd::{truncated_svd, truncated_svd_with, SvdConfig, SvdResult};
pub use tensor::{conv2d, conv2d_backward, conv2d_counted, matmul, Matrix, Tensor4};
pub use trainer::{
    export_for_inference, train, LossKind, LossSpec, OptimizerState, TrainConfig, TrainReport,
};

pub type Tensor4F64 = Tensor4<f64>;
pub type Tensor4F32 = Tensor4<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type ModelGraphF64 = ModelGraph<f64>;
pub type ModelGraphF32 = ModelGraph<f32>;
pub type DatasetF64 = Dataset<f64>;
