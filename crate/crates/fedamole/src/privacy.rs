//! Metric-DP noise for uploaded embeddings: norm-Laplace noise with
//! density proportional to exp(-eta * ||z||), followed by an l2 clip.
//!
//! The density factorizes into a uniform direction on the unit sphere
//! and a Gamma(r, 1/eta) radius, which is how we sample it.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub enabled: bool,
    /// Privacy parameter eta (larger = less noise).
    pub eta: f64,
    /// l2 clip bound applied after noising.
    pub clip: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig { enabled: false, eta: 10.0, clip: 1.0 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            if self.eta <= 0.0 {
                return Err(Error::config("privacy.eta", "must be > 0 when enabled"));
            }
            if self.clip <= 0.0 {
                return Err(Error::config("privacy.clip", "must be > 0 when enabled"));
            }
        }
        Ok(())
    }
}

/// Draw z = radius * u with u uniform on the unit sphere and
/// radius ~ Gamma(shape r, scale 1/eta).
pub fn sample_noise(dim: usize, eta: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Invalid("sample_noise: dim must be >= 1".into()));
    }
    if eta <= 0.0 {
        return Err(Error::Invalid("sample_noise: eta must be > 0".into()));
    }
    let gamma = Gamma::new(dim as f64, 1.0 / eta)
        .map_err(|e| Error::Invalid(format!("gamma sampler: {e}")))?;
    let radius = gamma.sample(rng);
    loop {
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return Ok(dir.into_iter().map(|x| x / norm * radius).collect());
        }
    }
}

/// Normalize to unit norm, add norm-Laplace noise, then clip to `cfg.clip`.
/// Disabled configs are the identity map.
pub fn privatize(v: &[f64], cfg: &DpConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !cfg.enabled {
        return Ok(v.to_vec());
    }
    cfg.validate()?;
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let unit: Vec<f64> = if norm > 1e-12 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    };
    let z = sample_noise(v.len(), cfg.eta, rng)?;
    let noised: Vec<f64> = unit.iter().zip(&z).map(|(a, b)| a + b).collect();
    Ok(clip_l2(&noised, cfg.clip))
}

pub fn clip_l2(v: &[f64], bound: f64) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= bound {
        return v.to_vec();
    }
    let f = bound / norm;
    v.iter().map(|x| x * f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn noise_norm_mean_tracks_gamma_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = 4;
        let eta = 2.0;
        let n = 1000;
        let mean: f64 =
            (0..n).map(|_| norm(&sample_noise(r, eta, &mut rng).unwrap())).sum::<f64>() / n as f64;
        let expected = r as f64 / eta;
        assert!((mean - expected).abs() / expected < 0.2, "mean {} expected {}", mean, expected);
    }

    #[test]
    fn noise_shrinks_with_eta() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let r = 4;
        let n = 500;
        let mut means = Vec::new();
        for eta in [1.0, 10.0, 100.0] {
            let m: f64 = (0..n)
                .map(|_| norm(&sample_noise(r, eta, &mut rng).unwrap()))
                .sum::<f64>()
                / n as f64;
            means.push(m);
        }
        assert!(means[0] > means[1] && means[1] > means[2]);
        // eta = 100, r = 4: mean norm ~ 0.04
        assert!((means[2] - 0.04).abs() < 0.02);
    }

    #[test]
    fn direction_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let r = 3;
        let n = 1000;
        let mut acc = vec![0.0; r];
        for _ in 0..n {
            let z = sample_noise(r, 5.0, &mut rng).unwrap();
            let zn = norm(&z);
            for (a, v) in acc.iter_mut().zip(&z) {
                *a += v / zn;
            }
        }
        for a in acc {
            assert!((a / n as f64).abs() < 0.1);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        assert!(sample_noise(0, 1.0, &mut rng).is_err());
        assert!(sample_noise(3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn clip_behaviour() {
        let big = vec![10.0, 0.0];
        let clipped = clip_l2(&big, 1.0);
        assert!((norm(&clipped) - 1.0).abs() < 1e-12);
        let small = vec![0.3, 0.4];
        assert_eq!(clip_l2(&small, 1.0), small);
    }

    #[test]
    fn privatized_norm_never_exceeds_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = DpConfig { enabled: true, eta: 1.0, clip: 1.0 };
        for _ in 0..500 {
            let v = vec![3.0, -1.0, 0.5, 2.0];
            let out = privatize(&v, &cfg, &mut rng).unwrap();
            assert!(norm(&out) <= cfg.clip + 1e-12);
        }
    }

    #[test]
    fn disabled_config_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cfg = DpConfig::default();
        let v = vec![5.0, -2.0];
        assert_eq!(privatize(&v, &cfg, &mut rng).unwrap(), v);
    }
}
