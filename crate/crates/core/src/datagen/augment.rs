use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

/// Zeroes one time band of width `U{0..=time_mask_max}` and one channel band
/// of width `U{0..=channel_mask_max}`, each at a uniform offset.
pub fn spec_augment_like(
    frames: &Tensor<f64>,
    time_mask_max: usize,
    channel_mask_max: usize,
    seed: u64,
) -> Result<Tensor<f64>> {
    let (t, c) = frames.dims2();
    if time_mask_max > t || channel_mask_max > c {
        return Err(Error::invalid(format!(
            "mask maxima ({time_mask_max}, {channel_mask_max}) exceed extents ({t}, {c})"
        )));
    }
    let mut out = frames.clone();
    if time_mask_max == 0 && channel_mask_max == 0 {
        return Ok(out);
    }
    let mut r = rng::stream(&[seed, 0x5a]);
    let tw = r.random_range(0..=time_mask_max);
    let t0 = r.random_range(0..=t - tw);
    let cw = r.random_range(0..=channel_mask_max);
    let c0 = r.random_range(0..=c - cw);
    let data = out.data_mut();
    for i in 0..t {
        for j in 0..c {
            if (t0..t0 + tw).contains(&i) || (c0..c0 + cw).contains(&j) {
                data[i * c + j] = 0.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(t: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(t, c, vec![1.0; t * c]).unwrap()
    }

    #[test]
    fn zero_maxima_is_identity() {
        let x = ones(10, 4);
        assert_eq!(spec_augment_like(&x, 0, 0, 3).unwrap(), x);
    }

    #[test]
    fn shape_preserved_and_bounds_checked() {
        let x = ones(10, 4);
        assert_eq!(spec_augment_like(&x, 5, 2, 1).unwrap().shape(), x.shape());
        assert!(spec_augment_like(&x, 11, 0, 1).is_err());
        assert!(spec_augment_like(&x, 0, 5, 1).is_err());
    }

    #[test]
    fn expected_masked_fraction_matches_monte_carlo() {
        let (t, c, tm, cm) = (20usize, 16usize, 6usize, 4usize);
        let x = ones(t, c);
        let et = tm as f64 / 2.0;
        let ec = cm as f64 / 2.0;
        let expected = et / t as f64 + ec / c as f64 - et * ec / (t * c) as f64;
        let n = 10_000;
        let mut zeroed = 0usize;
        for seed in 0..n {
            let y = spec_augment_like(&x, tm, cm, seed).unwrap();
            zeroed += y.data().iter().filter(|&&v| v == 0.0).count();
        }
        let observed = zeroed as f64 / (n as usize * t * c) as f64;
        assert!(
            (observed - expected).abs() / expected < 0.02,
            "{observed} vs {expected}"
        );
    }
}
