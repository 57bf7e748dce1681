//! Codebook clustering with output-aware centroid refinement.

mod calibrate;
mod codebook;
mod loss;

pub use calibrate::{
    assignment_scales, calibrate_layer, calibrate_model, calibrate_moe_block, centroid_step, reassign,
    ACCFConfig, AssignmentScales, CalibrationReport, CentroidOptimizer, SiteReport,
};
pub use codebook::{clustering_error, kmeans_1d, kmeans_init, Codebook, KMeans1d, KMeansConfig};
pub use loss::{
    accf_loss_local, accf_loss_moe, moe_centroid_grads, ExpertCodebooks, ExpertMats, LocalObjective,
    MoeBlockCalib,
};
