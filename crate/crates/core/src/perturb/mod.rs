//! Input perturbations: grid shuffling, Gaussian frequency filters and
//! L*a*b* colour-cluster ablation, plus the sweep harness that re-scores a
//! trained network under each transform.

mod color;
mod filter;
mod shuffle;
mod sweep;

pub use color::{
    ablate_chromaticity, ablate_gray, elbow, fit_color_clusters, ColorClusterModel, DEFAULT_SAMPLE_PER_IMAGE,
};
pub use filter::{filter_planes, freq_filter, frequency_sigma, transfer, FilterKind, FilterSpec, BAND_RATIO, SIGMA_GRID};
pub use shuffle::{grid_shuffle, ShuffleSpec, SHUFFLE_GRID};
pub use sweep::{
    evaluate_transform, mean, perturbation_sweep, std_dev, ParamTransform, SweepConfig, SweepPoint, SweepResult,
};
