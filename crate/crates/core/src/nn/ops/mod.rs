//! Differentiable operations. Each function computes its output eagerly and
//! records a backward closure on the [`Graph`](super::Graph).

mod conv;
mod elementwise;
mod loss;
mod norm;
mod spectral;
mod structural;

pub use conv::{conv2d, depthwise_causal, pointwise, Conv2dSpec};
pub use elementwise::{add, mean, mul, prelu, relu, scale, sigmoid, sub, sum, tanh, weighted_sum};
pub use loss::{cross_entropy, si_snr, si_snr_value, SiSnrOptions, SI_SNR_CLAMP_DB};
pub use norm::{batch_norm_eval, batch_norm_train, layer_norm, BatchStats, NORM_EPS, BN_EPS};
pub use spectral::{complex_mask, istft, lps, stft};
pub use structural::{concat, gather, icd_kernel, reshape, splice, swap_axes};
