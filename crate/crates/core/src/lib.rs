//! Conditional independence testing with double generators.
//!
//! Tests `H0: X ⫫ Y | Z` with a cross-fitted maximum-type statistic built from
//! random bounded feature banks and pseudo samples drawn from learned
//! approximations of `X | Z` and `Y | Z`. The null distribution of the
//! maximum is simulated by a Gaussian multiplier bootstrap.
//!
//! Module map:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`data`] | datasets, fold partitions, configuration, CSV input, reports |
//! | [`featbank`] | random logistic feature banks |
//! | [`nn`] | small feedforward networks with exact gradients and Adam |
//! | [`sampler`] | conditional samplers: oracle, nearest neighbour, Sinkhorn GAN |
//! | [`stats`] | GCM test and the conditional randomization baseline |
//! | [`dgcit`] | the max-type statistic |
//! | [`bootstrap`] | multiplier bootstrap p-value |
//! | [`synthetic`] | data generators for the simulation models |
//! | [`experiment`] | replication harness for size/power sweeps |

pub mod bootstrap;
pub mod data;
pub mod dgcit;
pub mod error;
pub mod experiment;
pub mod featbank;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod synthetic;

pub use data::{Dataset, FoldPartition, GeneratorKind, TestConfig, TestReport};
pub use dgcit::{run_dgcit, PsiTensor};
pub use error::{Error, Result};
pub use sampler::{ConditionalSampler, SamplerFactory};
