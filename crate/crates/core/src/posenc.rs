//! Sinusoidal positional encodings for word sequences and feature maps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// N×C table: even channel `2i` holds `sin(pos / 10000^(2i/C))`, odd channel `2i+1` the cosine.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding1D {
    pub len: usize,
    pub channels: usize,
    values: Vec<f64>,
}

/// C×H×W map: the first C/2 channels encode the row index, the last C/2 the column index.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding2D {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    values: Vec<f64>,
}

fn angle(pos: usize, pair: usize, channels: usize) -> f64 {
    pos as f64 / 10000f64.powf((2 * pair) as f64 / channels as f64)
}

pub fn sinusoid_1d(len: usize, channels: usize) -> Result<PositionalEncoding1D> {
    if len == 0 {
        return Err(Error::invalid("sinusoid_1d: length must be at least 1"));
    }
    if channels < 2 || !channels.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "sinusoid_1d: channel count must be even and >= 2, got {channels}"
        )));
    }
    let mut values = vec![0.0; len * channels];
    for pos in 0..len {
        for pair in 0..channels / 2 {
            let a = angle(pos, pair, channels);
            values[pos * channels + 2 * pair] = a.sin();
            values[pos * channels + 2 * pair + 1] = a.cos();
        }
    }
    Ok(PositionalEncoding1D {
        len,
        channels,
        values,
    })
}

pub fn sinusoid_2d(height: usize, width: usize, channels: usize) -> Result<PositionalEncoding2D> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("sinusoid_2d: map size must be positive"));
    }
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "sinusoid_2d: channel count must be divisible by 4, got {channels}"
        )));
    }
    let half = channels / 2;
    let rows = sinusoid_1d(height, half)?;
    let cols = sinusoid_1d(width, half)?;
    let plane = height * width;
    let mut values = vec![0.0; channels * plane];
    for c in 0..half {
        for y in 0..height {
            for x in 0..width {
                values[c * plane + y * width + x] = rows.at(y, c);
                values[(half + c) * plane + y * width + x] = cols.at(x, c);
            }
        }
    }
    Ok(PositionalEncoding2D {
        height,
        width,
        channels,
        values,
    })
}

impl PositionalEncoding1D {
    pub fn at(&self, pos: usize, channel: usize) -> f64 {
        self.values[pos * self.channels + channel]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_f64(&[self.len, self.channels], &self.values).expect("pe shape")
    }
}

impl PositionalEncoding2D {
    pub fn at(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.values[(channel * self.height + y) * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_f64(&[self.channels, self.height, self.width], &self.values)
            .expect("pe shape")
    }

    /// Encoding vector of one pixel, across all channels.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin0_cos0() {
        let pe = sinusoid_1d(4, 8).unwrap();
        for c in 0..8 {
            assert_eq!(pe.at(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn position_one_channel_zero_is_sin_one() {
        for c in [2, 16, 64] {
            let pe = sinusoid_1d(2, c).unwrap();
            assert!((pe.at(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-15);
        }
    }

    #[test]
    fn values_bounded() {
        let pe = sinusoid_1d(25, 64).unwrap();
        assert!(pe.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(sinusoid_1d(4, 7).is_err());
        assert!(sinusoid_2d(4, 4, 6).is_err());
    }

    #[test]
    fn prefix_consistency() {
        let long = sinusoid_1d(25, 32).unwrap();
        let short = sinusoid_1d(7, 32).unwrap();
        assert_eq!(&long.values()[..7 * 32], short.values());
    }

    #[test]
    fn origin_pattern_in_both_halves() {
        let pe = sinusoid_2d(5, 6, 16).unwrap();
        for c in 0..16 {
            assert_eq!(pe.at(c, 0, 0), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn halves_depend_on_row_and_column_only() {
        let pe = sinusoid_2d(6, 7, 16).unwrap();
        for c in 0..8 {
            for y in 0..6 {
                for x in 1..7 {
                    assert_eq!(pe.at(c, y, x), pe.at(c, y, 0));
                }
            }
        }
        for c in 8..16 {
            for x in 0..7 {
                for y in 1..6 {
                    assert_eq!(pe.at(c, y, x), pe.at(c, 0, x));
                }
            }
        }
    }

    #[test]
    fn pixels_are_distinct() {
        // exhaustive pairwise comparison at the largest size
        let pe = sinusoid_2d(64, 64, 64).unwrap();
        let mut pixels: Vec<Vec<u64>> = (0..64)
            .flat_map(|y| (0..64).map(move |x| (y, x)))
            .map(|(y, x)| pe.pixel(y, x).iter().map(|v| v.to_bits()).collect())
            .collect();
        let n = pixels.len();
        pixels.sort();
        pixels.dedup();
        assert_eq!(pixels.len(), n);
    }

    #[test]
    fn repeated_calls_bit_identical() {
        assert_eq!(sinusoid_2d(8, 8, 64).unwrap(), sinusoid_2d(8, 8, 64).unwrap());
    }
}
