//! Post-training studies exported as plot-ready tables.

pub mod latent;
pub mod spectral;
pub mod topology;

pub use latent::{
    correlation_matrix, gate_trace, latent_factors, max_off_diagonal, orth_trace, rolling_std, GateRow, GateTrace, OrthRow,
};
pub use spectral::{model_spectral_profile, periodogram, spectral_profile, Bands, SpectralProfile};
pub use topology::{build_ground_truth, mean_channel_attention, random_iou, topology_match, TopologyReport};
