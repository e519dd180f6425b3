//! DDPM noise schedule with linearly spaced betas.

use crate::attention::LatentVideo;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Beta at 1-based step `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `T` betas from `beta1` to `beta_t` inclusive (`[beta1]` when `T = 1`).
pub fn make_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < beta1 <= betaT < 1, got {beta1} and {beta_t}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta1
            } else {
                beta1 + (beta_t - beta1) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Forward noising with an explicit `alpha_bar`.
pub fn q_sample_with(x0: &LatentVideo, eps: &LatentVideo, alpha_bar: f64) -> Result<LatentVideo> {
    if x0.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "latent {:?} and noise {:?} differ",
            x0.dims(),
            eps.dims()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut data = x0.data.clone();
    data.zip_mut_with(&eps.data, |x, e| *x = a * *x + b * e);
    Ok(LatentVideo { data })
}

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps` for 1-based `t`.
pub fn q_sample(
    x0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    sched.check_step(t)?;
    q_sample_with(x0, eps, sched.alpha_bar(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars, vec![0.5]);
    }

    #[test]
    fn two_steps() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas, vec![0.1, 0.2]);
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_decreases() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!((s.beta(100) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(10, f64::NAN, 0.2).is_err());
    }

    #[test]
    fn limits() {
        let mut rng = SplitMix64::new(3);
        let x0 = LatentVideo::from_fn((1, 3, 2, 2, 2), || rng.normal());
        let eps = LatentVideo::from_fn((1, 3, 2, 2, 2), || rng.normal());
        assert_eq!(q_sample_with(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(q_sample_with(&x0, &eps, 0.0).unwrap(), eps);
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 5, &eps, &s).is_err());
        let other = LatentVideo::zeros(1, 3, 1, 2, 2);
        assert!(q_sample_with(&x0, &other, 0.5).is_err());
    }
}
