//! Distribution functions and the pointwise two-sample tests.

pub mod dist;
pub mod pointwise;

pub use dist::{beta_reg, f_sf, student_t_isf, student_t_sf};
pub use pointwise::{
    mean_and_variance, pointwise_mean_test, pointwise_test, pointwise_variance_test, Direction,
    MeanStatistic, PointwisePValues, PointwiseTest, TestKind,
};
