//! Read-only analytics over parameter sets and masks: L1 and angular
//! distances, per-layer closeness, mask overlap, magnitudes of removed
//! weights, and power-law fits.

mod distance;
mod overlap;
mod stats;

pub use distance::{
    angular_distance, distance_report, full_distance_report, l1, per_layer_closeness,
    DistanceReport, LayerCloseness, TensorDistance,
};
pub use overlap::{mask_overlap, pruned_magnitude_stats, MagnitudeStats, OverlapGrid, OverlapScope};
pub use stats::{mean_std, powerlaw_fit, ranks, spearman, PowerLawFit};

/// `Σ|aᵢ - bᵢ|` restricted to `names`.
pub fn l1_distance<S: AsRef<str>>(
    a: &crate::encoder::ParameterSet,
    b: &crate::encoder::ParameterSet,
    names: &[S],
) -> crate::error::Result<DistanceReport> {
    distance_report(a, b, names)
}
