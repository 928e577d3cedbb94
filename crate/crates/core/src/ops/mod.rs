//! Layer kernels and their graph bindings.
//!
//! Each submodule holds plain forward/backward kernels over tensors plus an
//! `impl Graph` block that records the operation. Kernels accumulate in a
//! fixed order, so results do not depend on scheduling.

pub mod attention;
pub mod bilinear;
pub mod conv;
pub mod deform;
pub mod elementwise;
pub(crate) mod gemm;
pub mod loss;
pub mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use attention::{ChannelAttentionParams, SpatialAttentionParams};
pub use bilinear::{bilinear_sample, bilinear_sample_grad};
pub use conv::{conv2d_forward, im2col};
pub use deform::deform_conv2d_forward;
pub use pool::max_pool2x2_forward;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1, dilation 1, no padding.
    pub fn new(kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self { kernel_size, in_channels, out_channels, stride: 1, dilation: 1, padding: 0 }
    }

    /// Resolution-preserving convolution at the given dilation rate.
    pub fn same(kernel_size: usize, in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Self {
            kernel_size,
            in_channels,
            out_channels,
            stride: 1,
            dilation,
            padding: dilation * (kernel_size.saturating_sub(1)) / 2,
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn effective_extent(&self) -> usize {
        self.dilation * (self.kernel_size - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    /// `floor((n + 2·padding − dilation·(k−1) − 1) / stride) + 1`, or an
    /// error when that is below 1.
    pub fn output_extent(&self, n: usize) -> Result<usize> {
        let span = n + 2 * self.padding;
        let eff = self.effective_extent();
        if span < eff {
            return shape_err(format!(
                "input extent {n} with padding {} is smaller than the kernel extent {eff}",
                self.padding
            ));
        }
        Ok((span - eff) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

/// Channel-MLP bottleneck and spatial kernel of the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self { reduction_ratio: 16, spatial_kernel: 7 }
    }
}

impl AttentionSpec {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction_ratio == 0 || channels % self.reduction_ratio != 0 || channels < self.reduction_ratio {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by reduction ratio {}",
                self.reduction_ratio
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial kernel {} must be odd", self.spatial_kernel)));
        }
        Ok(())
    }

    pub fn hidden(&self, channels: usize) -> usize {
        channels / self.reduction_ratio
    }
}
