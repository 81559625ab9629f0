//! The toy VGG-style network used by the pipeline and the acceptance runs.

use crate::model::LayerSpec;

/// Input side length of the toy network.
pub const TOY_SIZE: usize = 32;
/// Filters in the toy network's last conv layer.
pub const TOY_LAST_FILTERS: usize = 32;

fn conv3(out_channels: usize, in_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        in_channels,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 1,
    }
}

const POOL: LayerSpec = LayerSpec::MaxPool { window: 2, stride: 2 };

/// Six 3×3 conv layers (8, 8, 16, 16, 32, 32 filters) with four 2×2 pools,
/// then a 64-unit hidden layer and a two-way softmax. Input is `1×32×32`.
pub fn toy_specs() -> Vec<LayerSpec> {
    vec![
        conv3(8, 1),
        LayerSpec::Relu,
        POOL,
        conv3(8, 8),
        LayerSpec::Relu,
        conv3(16, 8),
        LayerSpec::Relu,
        POOL,
        conv3(16, 16),
        LayerSpec::Relu,
        conv3(32, 16),
        LayerSpec::Relu,
        POOL,
        conv3(TOY_LAST_FILTERS, 32),
        LayerSpec::Relu,
        POOL,
        LayerSpec::Flatten,
        LayerSpec::Dense { out_dim: 64, in_dim: TOY_LAST_FILTERS * 2 * 2 },
        LayerSpec::Relu,
        LayerSpec::Dense { out_dim: 2, in_dim: 64 },
        LayerSpec::Softmax,
    ]
}

pub fn toy_input_shape() -> [usize; 3] {
    [1, TOY_SIZE, TOY_SIZE]
}
