//! Sequential channel → spatial attention gates.
//!
//! Channel gate: `σ(MLP(avgpool(x)) + MLP(maxpool(x)))`, where the MLP is a
//! shared pair of 1×1 convolutions `C → C/r → C` with a ReLU between.
//! Spatial gate: `σ(conv_k([mean_c(x), max_c(x)]))` with same padding.
//! Both return the gate only; the caller multiplies it into the features.

use super::{AttentionSpec, ConvSpec};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::Scalar;

/// Vars of the shared channel MLP (`fc1: C/r×C×1×1`, `fc2: C×C/r×1×1`).
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionParams {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Vars of the spatial gate convolution (`1×2×k×k`).
#[derive(Debug, Clone, Copy)]
pub struct SpatialAttentionParams {
    pub weight: Var,
    pub bias: Var,
}

pub fn channel_mlp_specs(channels: usize, spec: &AttentionSpec) -> (ConvSpec, ConvSpec) {
    let hidden = spec.hidden(channels);
    (ConvSpec::new(1, channels, hidden), ConvSpec::new(1, hidden, channels))
}

pub fn spatial_conv_spec(spec: &AttentionSpec) -> ConvSpec {
    ConvSpec::same(spec.spatial_kernel, 2, 1, 1)
}

impl<T: Scalar> Graph<T> {
    /// `B×C×H×W → B×C×1×1` gate with values in (0, 1).
    pub fn channel_attention(&mut self, x: Var, p: &ChannelAttentionParams, spec: &AttentionSpec) -> Result<Var> {
        let [_, c, _, _] = self.value(x).dims4()?;
        spec.validate(c)?;
        let (s1, s2) = channel_mlp_specs(c, spec);
        let avg = self.global_avg_pool(x)?;
        let max = self.global_max_pool(x)?;
        let branch = |g: &mut Self, d: Var| -> Result<Var> {
            let h = g.conv2d(d, p.fc1_weight, p.fc1_bias, &s1)?;
            let h = g.relu(h)?;
            g.conv2d(h, p.fc2_weight, p.fc2_bias, &s2)
        };
        let a = branch(self, avg)?;
        let m = branch(self, max)?;
        let s = self.add(a, m)?;
        self.sigmoid(s)
    }

    /// `B×C×H×W → B×1×H×W` gate with values in (0, 1).
    pub fn spatial_attention(&mut self, x: Var, p: &SpatialAttentionParams, spec: &AttentionSpec) -> Result<Var> {
        if spec.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial kernel {} must be odd", spec.spatial_kernel)));
        }
        if self.value(x).dims4().is_err() {
            return shape_err(format!("spatial attention needs a 4-D input, got {:?}", self.shape(x)));
        }
        let mean = self.channel_mean(x)?;
        let max = self.channel_max(x)?;
        let stats = self.concat_channels(&[mean, max])?;
        let z = self.conv2d(stats, p.weight, p.bias, &spatial_conv_spec(spec))?;
        self.sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Init, Tensor};

    fn zeros(s: &[usize]) -> Tensor<f64> {
        Tensor::zeros(s).unwrap()
    }

    #[test]
    fn zero_mlp_gives_half() {
        let spec = AttentionSpec { reduction_ratio: 2, spatial_kernel: 3 };
        let mut g = Graph::new();
        let x = g.input(Tensor::create(&[2, 4, 3, 3], Init::Gaussian { mean: 0.0, std: 1.0, seed: 4 }).unwrap());
        let p = ChannelAttentionParams {
            fc1_weight: g.leaf(zeros(&[2, 4, 1, 1])),
            fc1_bias: g.leaf(zeros(&[2])),
            fc2_weight: g.leaf(zeros(&[4, 2, 1, 1])),
            fc2_bias: g.leaf(zeros(&[4])),
        };
        let a = g.channel_attention(x, &p, &spec).unwrap();
        assert_eq!(g.shape(a), &[2, 4, 1, 1]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));

        let sp = SpatialAttentionParams { weight: g.leaf(zeros(&[1, 2, 3, 3])), bias: g.leaf(zeros(&[1])) };
        let s = g.spatial_attention(x, &sp, &spec).unwrap();
        assert_eq!(g.shape(s), &[2, 1, 3, 3]);
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bad_specs_rejected() {
        let mut g = Graph::new();
        let x = g.input(zeros(&[1, 6, 2, 2]));
        let p = ChannelAttentionParams {
            fc1_weight: g.leaf(zeros(&[1, 6, 1, 1])),
            fc1_bias: g.leaf(zeros(&[1])),
            fc2_weight: g.leaf(zeros(&[6, 1, 1, 1])),
            fc2_bias: g.leaf(zeros(&[6])),
        };
        let spec = AttentionSpec { reduction_ratio: 4, spatial_kernel: 7 };
        assert!(matches!(g.channel_attention(x, &p, &spec), Err(Error::Config(_))));
        let sp = SpatialAttentionParams { weight: g.leaf(zeros(&[1, 2, 4, 4])), bias: g.leaf(zeros(&[1])) };
        let even = AttentionSpec { reduction_ratio: 2, spatial_kernel: 4 };
        assert!(matches!(g.spatial_attention(x, &sp, &even), Err(Error::Config(_))));
    }
}
