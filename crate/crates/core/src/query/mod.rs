//! Sample valuation and batch selection.

mod features;
pub mod kmeans;
mod pool;
mod select;

pub use features::{
    class_feature, class_feature_pair_var, class_feature_var, entropy_score, image_feature, uncertainty_score,
    uncertainty_var, Class,
};
pub use kmeans::{weighted_kmeans, weighted_kmeans_exhaustive, weighted_kmeans_from, ClusterResult, KMeansConfig};
pub use pool::SamplePool;
pub use select::{
    centroid_nearest, k_center_greedy, select_batch, select_batch_ours, SampleScore, SampleSummary,
    SelectionRecord, Strategy,
};
