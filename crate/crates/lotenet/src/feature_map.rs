//! Pixel-wise local feature maps.
//!
//! Each intensity in `[0, 1]` is lifted (per channel) into a small vector
//! before the first squeeze. The sinusoidal map has unit Euclidean norm for
//! every input; the linear map partitions unity; `none` is the identity used
//! in 3D mode, where the squeeze alone inflates the feature dimension.
//! Maps apply only at the input layer; intermediate layer outputs enter the
//! next layer raw.

use std::fmt;
use std::str::FromStr;

use crate::scalar::Real;
use crate::tensor::Tensor;

const RANGE_TOLERANCE: f64 = 1e-9;

/// Which local feature map lifts input intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMapKind {
    /// `x -> [cos(pi x / 2), sin(pi x / 2)]`, unit norm on `[0, 1]`.
    Sinusoidal,
    /// `x -> [x, 1 - x]`, components summing to 1 on `[0, 1]`.
    Linear,
    /// Identity; the per-site dimension stays the channel count.
    None,
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureMapError {
    #[error("unknown feature map {0:?}; expected \"sinusoidal\", \"linear\" or \"none\"")]
    UnknownKind(String),
    #[error(
        "intensity {value} outside [0, 1]; rescale inputs to the unit interval before mapping"
    )]
    OutOfRange { value: f64 },
}

impl FeatureMapKind {
    /// Output dimension per input channel.
    pub fn embed_dim(&self) -> usize {
        match self {
            FeatureMapKind::Sinusoidal | FeatureMapKind::Linear => 2,
            FeatureMapKind::None => 1,
        }
    }
}

impl FromStr for FeatureMapKind {
    type Err = FeatureMapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sinusoidal" => Ok(FeatureMapKind::Sinusoidal),
            "linear" => Ok(FeatureMapKind::Linear),
            "none" => Ok(FeatureMapKind::None),
            other => Err(FeatureMapError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for FeatureMapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureMapKind::Sinusoidal => "sinusoidal",
            FeatureMapKind::Linear => "linear",
            FeatureMapKind::None => "none",
        };
        f.write_str(s)
    }
}

/// Applies the map to every channel value of an image whose last axis is the
/// channel axis; the channel extent becomes `embed_dim * C`. The `none` kind
/// returns the input unchanged.
pub fn apply_map<T: Real>(
    kind: FeatureMapKind,
    image: &Tensor<T>,
) -> Result<Tensor<T>, FeatureMapError> {
    let lo = T::real(-RANGE_TOLERANCE);
    let hi = T::real(1.0 + RANGE_TOLERANCE);
    if let Some(bad) = image.data().iter().find(|&&v| v < lo || v > hi) {
        return Err(FeatureMapError::OutOfRange {
            value: bad.to_f64_lossy(),
        });
    }
    if kind == FeatureMapKind::None {
        return Ok(image.clone());
    }
    let half_pi = T::real(std::f64::consts::FRAC_PI_2);
    let mut data = Vec::with_capacity(image.len() * 2);
    for &x in image.data() {
        match kind {
            FeatureMapKind::Sinusoidal => {
                data.push((half_pi * x).cos());
                data.push((half_pi * x).sin());
            }
            FeatureMapKind::Linear => {
                data.push(x);
                data.push(T::one() - x);
            }
            FeatureMapKind::None => unreachable!(),
        }
    }
    let mut shape = image.shape().to_vec();
    let last = shape.len() - 1;
    shape[last] *= 2;
    Ok(Tensor::from_vec(shape, data).expect("mapped data matches inflated shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn image(values: &[f64], channels: usize) -> Tensor<f64> {
        Tensor::from_vec(vec![values.len() / channels, channels], values.to_vec()).unwrap()
    }

    #[test]
    fn sinusoidal_endpoints() {
        let out = apply_map(FeatureMapKind::Sinusoidal, &image(&[0.0, 1.0], 1)).unwrap();
        assert_relative_eq!(out.get(&[0, 0]), 1.0);
        assert!(out.get(&[0, 1]).abs() < 1e-15);
        assert!(out.get(&[1, 0]).abs() < 1e-15);
        assert_relative_eq!(out.get(&[1, 1]), 1.0);
    }

    #[test]
    fn sinusoidal_midpoint() {
        let out = apply_map(FeatureMapKind::Sinusoidal, &image(&[0.5], 1)).unwrap();
        let sqrt_half = 0.5f64.sqrt();
        assert_relative_eq!(out.get(&[0, 0]), sqrt_half, max_relative = 1e-12);
        assert_relative_eq!(out.get(&[0, 1]), sqrt_half, max_relative = 1e-12);
    }

    #[test]
    fn linear_map_direct() {
        let out = apply_map(FeatureMapKind::Linear, &image(&[0.3], 1)).unwrap();
        assert_relative_eq!(out.get(&[0, 0]), 0.3);
        assert_relative_eq!(out.get(&[0, 1]), 0.7);
    }

    #[test]
    fn linear_components_sum_to_one() {
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let out = apply_map(FeatureMapKind::Linear, &image(&[x], 1)).unwrap();
            assert_relative_eq!(out.get(&[0, 0]) + out.get(&[0, 1]), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn sinusoidal_unit_norm_on_grid() {
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let out = apply_map(FeatureMapKind::Sinusoidal, &image(&[x], 1)).unwrap();
            let norm = (out.get(&[0, 0]).powi(2) + out.get(&[0, 1]).powi(2)).sqrt();
            assert!((norm - 1.0).abs() <= 1e-12, "x={x}: norm={norm}");
        }
    }

    #[test]
    fn none_is_bitwise_identity() {
        let img = image(&[0.1, 0.9, 0.4, 0.6], 2);
        let out = apply_map(FeatureMapKind::None, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn channel_axis_inflates_per_channel() {
        // 1 pixel, 3 channels -> 6 features ordered [phi(c0), phi(c1), phi(c2)]
        let img = Tensor::from_vec(vec![1, 1, 3], vec![0.0, 1.0, 0.5]).unwrap();
        let out = apply_map(FeatureMapKind::Linear, &img).unwrap();
        assert_eq!(out.shape(), &[1, 1, 6]);
        assert_eq!(out.data(), &[0.0, 1.0, 1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let img = image(&[1.1], 1);
        let err = apply_map(FeatureMapKind::Sinusoidal, &img).unwrap_err();
        assert!(err.to_string().contains("rescale"));
    }

    #[test]
    fn kind_parses_from_config_strings() {
        assert_eq!("sinusoidal".parse::<FeatureMapKind>().unwrap(), FeatureMapKind::Sinusoidal);
        assert_eq!("linear".parse::<FeatureMapKind>().unwrap(), FeatureMapKind::Linear);
        assert_eq!("none".parse::<FeatureMapKind>().unwrap(), FeatureMapKind::None);
        assert!("wavelet".parse::<FeatureMapKind>().is_err());
    }
}
