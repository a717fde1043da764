//! Fourier-mixing visual backbone: FT and windowed FT layers and the
//! shifted-window stage stack built from them.

pub mod fourier;

pub use fourier::{
    cyclic_shift, ft_layer, ft_layer_flops, window_partition, window_reverse, wft_layer,
    wft_layer_flops, WindowGrid,
};
pub mod swift;

pub use swift::{patch_merge, swift_forward, SwiftBackbone, SwiftConfig};
