//! Diagonal Gaussian mixtures with missing-data (bounded marginalisation)
//! log-likelihoods.

use std::f64::consts::PI;

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `ln Φ(z)` for the standard normal CDF, accurate in both tails.
pub fn log_phi(z: f64) -> f64 {
    if z < -30.0 {
        // asymptotic series of the Mills ratio
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - 0.5 * LN_2PI + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    } else if z < 0.0 {
        (0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)).ln()
    } else {
        (-0.5 * erfc(z * std::f64::consts::FRAC_1_SQRT_2)).ln_1p()
    }
}

/// How unreliable delta dimensions enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMarginalization {
    /// Integrated out completely (contribute 0).
    #[default]
    Full,
    /// Treated like static dimensions, bounded above by the observation.
    Bounded,
}

impl std::str::FromStr for DeltaMarginalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Self::Full),
            "bounded" => Ok(Self::Bounded),
            o => Err(Error::InvalidConfig(format!("unknown delta marginalization `{o}`"))),
        }
    }
}

/// One diagonal Gaussian with cached normalisers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_sd: Vec<f64>,
    /// `-½ ln(2π σ²)` per dimension.
    log_norm: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), var.len());
        let inv_sd = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let log_norm = var.iter().map(|v| -0.5 * (2.0 * PI * v).ln()).collect();
        Self {
            mean,
            var,
            inv_sd,
            log_norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Ordinary diagonal log-density.
    pub fn loglik(&self, obs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.mean.len() {
            let z = (obs[d] - self.mean[d]) * self.inv_sd[d];
            acc += self.log_norm[d] - 0.5 * z * z;
        }
        acc
    }

    /// Missing-data log-likelihood. `mask[d]` true = reliable. The first
    /// `n_static` dimensions are static log-energies; unreliable ones are
    /// integrated from −∞ up to the observation. Unreliable delta dimensions
    /// follow `delta_policy`.
    pub fn marginal_loglik(
        &self,
        obs: &[f64],
        mask: &[bool],
        n_static: usize,
        delta_policy: DeltaMarginalization,
    ) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.mean.len() {
            let z = (obs[d] - self.mean[d]) * self.inv_sd[d];
            if mask[d] {
                acc += self.log_norm[d] - 0.5 * z * z;
            } else if d < n_static || delta_policy == DeltaMarginalization::Bounded {
                acc += log_phi(z);
            }
        }
        acc
    }
}

/// Checked form of [`Gaussian::marginal_loglik`].
pub fn gaussian_marginal_loglik(
    comp: &Gaussian,
    obs: &[f64],
    mask: &[bool],
    n_static: usize,
    delta_policy: DeltaMarginalization,
    var_floor: f64,
) -> Result<f64> {
    if obs.len() != comp.dim() || mask.len() != comp.dim() || n_static > comp.dim() {
        return Err(Error::ShapeMismatch(format!(
            "obs {} / mask {} / model {}",
            obs.len(),
            mask.len(),
            comp.dim()
        )));
    }
    if let Some(d) = obs.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("observation dim {d}")));
    }
    if let Some(d) = comp.var.iter().position(|&v| !(v >= var_floor)) {
        return Err(Error::InvalidConfig(format!("variance below floor in dim {d}")));
    }
    Ok(comp.marginal_loglik(obs, mask, n_static, delta_policy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian>,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Self {
        assert_eq!(weights.len(), components.len());
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Self {
            weights,
            components,
            log_weights,
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, Gaussian::dim)
    }

    fn log_sum_exp(&self, f: impl Fn(&Gaussian) -> f64) -> f64 {
        if self.components.len() == 1 {
            return self.log_weights[0] + f(&self.components[0]);
        }
        let mut terms = [0.0f64; 16];
        let mut heap;
        let vals: &mut [f64] = if self.components.len() <= 16 {
            &mut terms[..self.components.len()]
        } else {
            heap = vec![0.0; self.components.len()];
            &mut heap
        };
        let mut max = f64::NEG_INFINITY;
        for (i, c) in self.components.iter().enumerate() {
            vals[i] = self.log_weights[i] + f(c);
            max = max.max(vals[i]);
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    pub fn loglik(&self, obs: &[f64]) -> f64 {
        self.log_sum_exp(|c| c.loglik(obs))
    }

    pub fn marginal_loglik(
        &self,
        obs: &[f64],
        mask: &[bool],
        n_static: usize,
        delta_policy: DeltaMarginalization,
    ) -> f64 {
        self.log_sum_exp(|c| c.marginal_loglik(obs, mask, n_static, delta_policy))
    }

    /// Per-component log posteriors (responsibilities) for one frame.
    pub fn log_posteriors(&self, obs: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.loglik(obs))
            .collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        v.iter().map(|x| x - lse).collect()
    }
}

/// Log-likelihood of one state: log-sum-exp over components.
pub fn state_loglik(
    gmm: &GaussianMixture,
    obs: &[f64],
    mask: &[bool],
    n_static: usize,
    delta_policy: DeltaMarginalization,
) -> Result<f64> {
    if gmm.is_empty() {
        return Err(Error::EmptyInput("mixture has no components".into()));
    }
    if obs.len() != gmm.dim() || mask.len() != gmm.dim() {
        return Err(Error::ShapeMismatch(format!(
            "obs {} / mask {} / model {}",
            obs.len(),
            mask.len(),
            gmm.dim()
        )));
    }
    Ok(gmm.marginal_loglik(obs, mask, n_static, delta_policy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_reliable_is_plain_density() {
        let g = Gaussian::new(vec![0.5, -1.0, 2.0, 0.0], vec![1.0, 0.5, 2.0, 0.1]);
        let obs = [0.1, -0.2, 3.0, 0.05];
        let direct: f64 = (0..4)
            .map(|d| {
                let v = g.var[d];
                -0.5 * (2.0 * PI * v).ln() - (obs[d] - g.mean[d]).powi(2) / (2.0 * v)
            })
            .sum();
        let m = g.marginal_loglik(&obs, &[true; 4], 2, DeltaMarginalization::Full);
        assert!((m - direct).abs() < 1e-12);
        assert!((g.loglik(&obs) - direct).abs() < 1e-12);
    }

    #[test]
    fn unreliable_static_at_mean_is_log_half() {
        let g = Gaussian::new(vec![1.0, 2.0], vec![1.0, 4.0]);
        let with = g.marginal_loglik(&[1.0, 2.5], &[false, true], 1, DeltaMarginalization::Full);
        let rel_only = g.marginal_loglik(&[1.0, 2.5], &[true, true], 1, DeltaMarginalization::Full)
            - (-0.5 * (2.0 * PI).ln());
        assert!((with - rel_only - 0.5f64.ln()).abs() < 1e-15);
        assert!((0.5f64.ln() + 0.693147).abs() < 1e-6);
    }

    #[test]
    fn unreliable_delta_policies() {
        let g = Gaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let full = g.marginal_loglik(&[0.0, 0.7], &[true, false], 1, DeltaMarginalization::Full);
        assert_eq!(full, -0.5 * (2.0 * PI).ln());
        let bounded = g.marginal_loglik(&[0.0, 0.7], &[true, false], 1, DeltaMarginalization::Bounded);
        assert!((bounded - full - log_phi(0.7)).abs() < 1e-15);
    }

    #[test]
    fn log_phi_tails_are_continuous() {
        for z in [-30.0f64, 0.0] {
            let a = log_phi(z - 1e-9);
            let b = log_phi(z + 1e-9);
            assert!((a - b).abs() < 1e-6 * a.abs().max(1e-3), "jump at {z}");
        }
        assert!(log_phi(40.0) == 0.0 || log_phi(40.0) > -1e-300);
        assert!(log_phi(-100.0).is_finite());
    }

    #[test]
    fn checked_errors() {
        let g = Gaussian::new(vec![0.0; 2], vec![1.0, 1e-6]);
        assert!(gaussian_marginal_loglik(&g, &[0.0, f64::NAN], &[true; 2], 1, Default::default(), 0.0).is_err());
        assert!(gaussian_marginal_loglik(&g, &[0.0, 0.0], &[true; 2], 1, Default::default(), 1e-3).is_err());
        assert!(gaussian_marginal_loglik(&g, &[0.0, 0.0], &[true; 2], 1, Default::default(), 1e-7).is_ok());
        let empty = GaussianMixture::new(vec![], vec![]);
        assert!(state_loglik(&empty, &[], &[], 0, Default::default()).is_err());
    }

    #[test]
    fn mixture_reductions() {
        let g = Gaussian::new(vec![0.3, -0.1], vec![0.7, 1.3]);
        let obs = [0.9, 0.4];
        let mask = [false, true];
        let c = g.marginal_loglik(&obs, &mask, 1, DeltaMarginalization::Full);
        let one = GaussianMixture::new(vec![1.0], vec![g.clone()]);
        assert_eq!(state_loglik(&one, &obs, &mask, 1, Default::default()).unwrap(), c);
        let two = GaussianMixture::new(vec![0.5, 0.5], vec![g.clone(), g]);
        assert!((state_loglik(&two, &obs, &mask, 1, Default::default()).unwrap() - c).abs() < 1e-14);
    }

    #[test]
    fn mixture_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let comps: Vec<Gaussian> = (0..3)
                .map(|_| {
                    Gaussian::new(
                        (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        (0..6).map(|_| rng.random_range(0.2..2.0)).collect(),
                    )
                })
                .collect();
            let mut w: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let gmm = GaussianMixture::new(w.clone(), comps.clone());
            let obs: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mask: Vec<bool> = (0..6).map(|_| rng.random_bool(0.6)).collect();
            let got = gmm.marginal_loglik(&obs, &mask, 3, Default::default());
            // the values are moderate, so direct exponentiation is safe
            let direct: f64 = comps
                .iter()
                .zip(&w)
                .map(|(c, wi)| wi * c.marginal_loglik(&obs, &mask, 3, Default::default()).exp())
                .sum::<f64>()
                .ln();
            assert!(((got - direct) / direct).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn bounded_term_nonpositive_and_increasing(z in -50.0f64..10.0, dz in 1e-3f64..5.0) {
            let a = log_phi(z);
            let b = log_phi(z + dz);
            proptest::prop_assert!(a <= 0.0);
            proptest::prop_assert!(b > a);
        }
    }
}
