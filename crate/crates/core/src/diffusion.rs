//! Forward Q-process and deterministic DDIM reverse process.
//!
//! Shared by the teacher (which denoises toward a clean feature target) and
//! the student (which predicts the injected noise). None of this is on the
//! tape: latents are plain tensors, and the denoiser network is evaluated
//! through a callback so the sampler stays pure.

use rand::Rng;

use crate::numerics::{lit, Scalar, TensorData};
use crate::rng::draw_standard_normal;
use crate::{Error, Result};

/// Beta/alpha tables of the forward process. `alpha_bar[t-1]` is the
/// cumulative product for step `t` in `1..=T`; step 0 means "fully denoised"
/// and has an implicit alpha_bar of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Cumulative alpha for `t` in `0..=T`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Linear beta schedule over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_steps < 1 {
        return Err(Error::invalid("make_schedule", "need at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "make_schedule",
            format!("need 0 < beta_start <= beta_end < 1, got [{}, {}]", beta_start, beta_end),
        ));
    }
    let mut beta = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let f = if t_steps == 1 { 0.0 } else { t as f64 / (t_steps - 1) as f64 };
        beta.push(beta_start + f * (beta_end - beta_start));
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut running = 1.0;
    for a in &alpha {
        running *= a;
        alpha_bar.push(running);
    }
    Ok(DiffusionSchedule { beta, alpha, alpha_bar })
}

/// Noisy latent produced by the forward process; keeps the Gaussian draw so
/// training can target it.
#[derive(Debug, Clone)]
pub struct NoisyLatent<T> {
    pub x_t: TensorData<T>,
    pub t: usize,
    pub eps: TensorData<T>,
}

/// Forward process: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(
    x0: &TensorData<T>,
    t: usize,
    eps: &TensorData<T>,
    sched: &DiffusionSchedule,
) -> Result<TensorData<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    if t < 1 || t > sched.steps() {
        return Err(Error::invalid("q_sample", format!("t = {} outside 1..={}", t, sched.steps())));
    }
    let ab = sched.alpha_bar_at(t);
    let (ca, ce) = (lit::<T>(ab.sqrt()), lit::<T>((1.0 - ab).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&a, &e)| ca * a + ce * e)
        .collect();
    TensorData::new(x0.shape().to_vec(), data)
}

/// Seeded unit-Gaussian tensor, drawn in f64 for cross-precision parity.
pub fn gaussian_like<T: Scalar>(shape: Vec<usize>, rng: &mut impl Rng) -> TensorData<T> {
    TensorData::from_fn(shape, |_| lit::<T>(draw_standard_normal(rng)))
}

/// One deterministic DDIM update from `t` to `t_prev < t` (0 meaning done):
/// reconstructs `x0_hat` from the predicted noise, then re-noises to the
/// earlier step with the same noise estimate.
pub fn ddim_step<T: Scalar>(
    x_t: &TensorData<T>,
    eps_hat: &TensorData<T>,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<TensorData<T>> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::shape(
            "ddim_step",
            format!("x_t {:?} vs eps_hat {:?}", x_t.shape(), eps_hat.shape()),
        ));
    }
    if t_prev >= t || t > sched.steps() {
        return Err(Error::invalid("ddim_step", format!("bad step pair t={} t_prev={}", t, t_prev)));
    }
    let ab_t = sched.alpha_bar_at(t);
    let ab_p = sched.alpha_bar_at(t_prev);
    let inv_sqrt = lit::<T>(1.0 / ab_t.sqrt());
    let noise_t = lit::<T>((1.0 - ab_t).sqrt());
    let scale_p = lit::<T>(ab_p.sqrt());
    let noise_p = lit::<T>((1.0 - ab_p).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data().iter())
        .map(|(&xt, &eh)| {
            let x0_hat = (xt - noise_t * eh) * inv_sqrt;
            scale_p * x0_hat + noise_p * eh
        })
        .collect();
    TensorData::new(x_t.shape().to_vec(), data)
}

/// Evenly spaced decreasing timestep subsequence of length `steps`, starting
/// at `T` and implicitly finishing at 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_max {
        return Err(Error::invalid(
            "ddim_timesteps",
            format!("steps = {} outside 1..={}", steps, t_max),
        ));
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            let f = (steps - i) as f64 / steps as f64;
            ((t_max as f64) * f).round().max(1.0) as usize
        })
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Runs the reverse process from seeded Gaussian noise.
///
/// `denoiser(x_t, t)` returns the predicted noise for the latent at step `t`;
/// `on_state` observes every latent (initial noise first, final `x0` last),
/// which is how trajectory dumps are produced.
pub fn sample<T: Scalar>(
    shape: Vec<usize>,
    steps: usize,
    seed: u64,
    sched: &DiffusionSchedule,
    mut denoiser: impl FnMut(&TensorData<T>, usize) -> Result<TensorData<T>>,
    mut on_state: impl FnMut(usize, &TensorData<T>),
) -> Result<TensorData<T>> {
    let mut rng = crate::rng::SeedTree::new(seed).stream("diffusion", &[]);
    let mut x = gaussian_like::<T>(shape, &mut rng);
    let ts = ddim_timesteps(sched.steps(), steps)?;
    on_state(0, &x);
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = if k + 1 < ts.len() { ts[k + 1] } else { 0 };
        let eps_hat = denoiser(&x, t)?;
        x = ddim_step(&x, &eps_hat, t, t_prev, sched)?;
        on_state(k + 1, &x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> DiffusionSchedule {
        make_schedule(10, 1e-4, 0.2).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = sched();
        // Strictly decreasing alpha_bar, betas in (0,1).
        for t in 1..s.steps() {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        }
        for &b in &s.beta {
            assert!(b > 0.0 && b < 1.0);
        }
        // Product identity against an independent loop.
        for t in 1..=s.steps() {
            let mut prod = 1.0;
            for k in 0..t {
                prod *= 1.0 - s.beta[k];
            }
            assert!((prod - s.alpha_bar_at(t)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar_at(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn invalid_beta_ranges_rejected() {
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let s = sched();
        let x0 = TensorData::<f64>::from_fn(vec![3, 3, 2], |i| (i as f64 * 0.37).sin());
        let zero = TensorData::<f64>::zeros(vec![3, 3, 2]);
        let t = 6;
        let ab = s.alpha_bar_at(t);

        let xt = q_sample(&x0, t, &zero, &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - ab.sqrt() * b).abs() < 1e-15);
        }
        let eps = TensorData::<f64>::from_fn(vec![3, 3, 2], |i| (i as f64 * 0.11).cos());
        let xt = q_sample(&zero, t, &eps, &s).unwrap();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert!((a - (1.0 - ab).sqrt() * e).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_variance_matches_one_minus_alpha_bar() {
        // Monte-Carlo oracle: with x0 = 0 and unit-Gaussian eps, the sample
        // variance of x_t must approach 1 - alpha_bar within 5%.
        let s = sched();
        let t = 7;
        let mut rng = crate::rng::SeedTree::new(99).stream("diffusion", &[0]);
        let n = 10_000;
        let zero = TensorData::<f64>::zeros(vec![1]);
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = gaussian_like::<f64>(vec![1], &mut rng);
            let xt = q_sample(&zero, t, &eps, &s).unwrap();
            acc += xt.data()[0] * xt.data()[0];
        }
        let var = acc / n as f64;
        let want = 1.0 - s.alpha_bar_at(t);
        assert!(
            (var - want).abs() / want < 0.05,
            "variance {} vs expected {}",
            var,
            want
        );
    }

    #[test]
    fn ddim_inverts_q_sample_with_oracle_noise() {
        let s = sched();
        let x0 = TensorData::<f64>::from_fn(vec![4, 4, 1], |i| ((i * 7) % 5) as f64 - 2.0);
        let mut rng = crate::rng::SeedTree::new(3).stream("diffusion", &[1]);
        let eps = gaussian_like::<f64>(vec![4, 4, 1], &mut rng);
        for t in 1..=s.steps() {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            // t_prev = 0 returns x0_hat exactly.
            let rec = ddim_step(&xt, &eps, t, 0, &s).unwrap();
            for (a, b) in rec.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-10, "t={} {} vs {}", t, a, b);
            }
        }
    }

    #[test]
    fn chained_ddim_with_oracle_predictor_recovers_target() {
        let s = sched();
        let x0 = TensorData::<f64>::from_fn(vec![3, 3, 2], |i| (i as f64 * 0.21).sin() * 2.0);
        let mut rng = crate::rng::SeedTree::new(4).stream("diffusion", &[2]);
        let eps = gaussian_like::<f64>(vec![3, 3, 2], &mut rng);
        let mut x = q_sample(&x0, s.steps(), &eps, &s).unwrap();
        // With the true eps at every step the chain is an exact inversion.
        for t in (1..=s.steps()).rev() {
            x = ddim_step(&x, &eps, t, t - 1, &s).unwrap();
        }
        for (a, b) in x.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn timestep_subsequences() {
        assert_eq!(ddim_timesteps(10, 10).unwrap(), vec![10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(ddim_timesteps(10, 5).unwrap(), vec![10, 8, 6, 4, 2]);
        assert_eq!(ddim_timesteps(10, 2).unwrap(), vec![10, 5]);
        assert_eq!(ddim_timesteps(10, 1).unwrap(), vec![10]);
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_recovers_with_oracle() {
        let s = sched();
        let x0 = TensorData::<f64>::from_fn(vec![2, 2, 2], |i| 0.5 * i as f64 - 1.0);
        // Oracle denoiser: derives the exact eps that explains x_t given x0.
        let denoiser = |x_t: &TensorData<f64>, t: usize| {
            let ab = s.alpha_bar_at(t);
            let data = x_t
                .data()
                .iter()
                .zip(x0.data())
                .map(|(&xt, &a)| (xt - ab.sqrt() * a) / (1.0 - ab).sqrt())
                .collect();
            TensorData::new(x_t.shape().to_vec(), data)
        };
        let mut states_a = Vec::new();
        let out_a = sample(vec![2, 2, 2], s.steps(), 42, &s, denoiser, |_, x| {
            states_a.push(x.clone())
        })
        .unwrap();
        let mut states_b = Vec::new();
        let out_b = sample(vec![2, 2, 2], s.steps(), 42, &s, denoiser, |_, x| {
            states_b.push(x.clone())
        })
        .unwrap();
        assert_eq!(out_a, out_b);
        assert_eq!(states_a, states_b);
        assert_eq!(states_a.len(), s.steps() + 1);
        for (a, b) in out_a.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
