//! GBLUP and G×EBLUP kernel baselines.

mod fit;
mod relationship;
mod subsample;

pub use fit::{
    fit_gblup, fit_gxeblup, write_kernel_fit, FixedVariances, KernelFit, KernelModel, KernelOptions,
    VarianceComponents,
};
pub use relationship::{environmental_relationship, genomic_relationship, RelationshipMatrix};
pub use subsample::subsample_for_budget;
