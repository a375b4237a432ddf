//! Noise schedules, forward noising, Tweedie clean-latent estimates and
//! deterministic DDIM stepping / inversion.
//!
//! Reverse steps move from timestep `t` to `t_prev`; `t_prev = None` is the
//! virtual step before 0 where `alpha_bar = 1`, so the final reverse step
//! returns the Tweedie estimate itself.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(0.0 <= beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 <= beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_min],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                const OFFSET: f64 = 0.008;
                let f = |t: f64| {
                    let x = (t / steps as f64 + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..steps)
                    .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(beta_min, beta_max))
                    .collect()
            }
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("empty beta sequence".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside [0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, steps: self.steps() })
    }

    /// `alpha_bar` with the virtual step before 0 mapped to 1.
    pub fn alpha_bar_or_one(&self, t: Option<usize>) -> Result<f64> {
        t.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }

    /// Uniformly strided inference timesteps in ascending order:
    /// `0, stride, 2*stride, ..` with `stride = steps / count`.
    pub fn inference_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > self.steps() {
            return Err(Error::InvalidSchedule(format!(
                "inference step count {count} must be in 1..={}",
                self.steps()
            )));
        }
        let stride = self.steps() / count;
        Ok((0..count).map(|i| i * stride).collect())
    }

    /// `sqrt(a) * z0 + sqrt(1 - a) * eps` at timestep `t`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let a = self.alpha_bar(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::shape("add_noise", z0.shape(), eps.shape()));
        }
        z0.scale(a.sqrt()).axpy((1.0 - a).sqrt(), eps)
    }

    /// Clean-latent estimate `(zt - sqrt(1 - a) * eps) / sqrt(a)`.
    pub fn tweedie_z0(&self, zt: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
        let a = self.alpha_bar(t)?;
        tweedie_with(zt, eps_pred, a, t)
    }

    /// Differentiable (in `zt`) version of [`Self::tweedie_z0`].
    pub fn tweedie_z0_var<'t>(&self, zt: &Var<'t>, eps_pred: &Tensor, t: usize) -> Result<Var<'t>> {
        let a = self.alpha_bar(t)?;
        if a == 0.0 {
            return Err(Error::DegenerateTerminalStep(t));
        }
        let eps = zt.tape().constant(eps_pred.scale((1.0 - a).sqrt()));
        Ok(zt.sub(&eps)?.scale(1.0 / a.sqrt()))
    }

    /// Deterministic DDIM step from `t` to `t_prev`.
    pub fn ddim_step(&self, zt: &Tensor, eps_pred: &Tensor, t: usize, t_prev: Option<usize>) -> Result<Tensor> {
        if t_prev.is_some_and(|p| p >= t) {
            return Err(Error::StepOrder(format!(
                "ddim_step needs t_prev < t, got t={t}, t_prev={t_prev:?}"
            )));
        }
        let a_t = self.alpha_bar(t)?;
        let a_prev = self.alpha_bar_or_one(t_prev)?;
        if zt.shape() != eps_pred.shape() {
            return Err(Error::shape("ddim_step", zt.shape(), eps_pred.shape()));
        }
        if a_prev == a_t {
            return Ok(zt.clone());
        }
        let z0 = tweedie_with(zt, eps_pred, a_t, t)?;
        z0.scale(a_prev.sqrt()).axpy((1.0 - a_prev).sqrt(), eps_pred)
    }

    /// Exact algebraic inverse of [`Self::ddim_step`] for a fixed `eps_pred`:
    /// moves a latent from `t_prev` up to `t`.
    pub fn ddim_invert_step(
        &self,
        z_prev: &Tensor,
        eps_pred: &Tensor,
        t_prev: Option<usize>,
        t: usize,
    ) -> Result<Tensor> {
        if t_prev.is_some_and(|p| p >= t) {
            return Err(Error::StepOrder(format!(
                "ddim_invert_step needs t > t_prev, got t={t}, t_prev={t_prev:?}"
            )));
        }
        let a_t = self.alpha_bar(t)?;
        let a_prev = self.alpha_bar_or_one(t_prev)?;
        if z_prev.shape() != eps_pred.shape() {
            return Err(Error::shape("ddim_invert_step", z_prev.shape(), eps_pred.shape()));
        }
        if a_prev == a_t {
            return Ok(z_prev.clone());
        }
        if a_prev == 0.0 {
            return Err(Error::DegenerateTerminalStep(t_prev.unwrap_or(0)));
        }
        let z0 = z_prev
            .axpy(-(1.0 - a_prev).sqrt(), eps_pred)?
            .scale(1.0 / a_prev.sqrt());
        z0.scale(a_t.sqrt()).axpy((1.0 - a_t).sqrt(), eps_pred)
    }
}

fn tweedie_with(zt: &Tensor, eps_pred: &Tensor, a: f64, t: usize) -> Result<Tensor> {
    if a == 0.0 {
        return Err(Error::DegenerateTerminalStep(t));
    }
    if zt.shape() != eps_pred.shape() {
        return Err(Error::shape("tweedie_z0", zt.shape(), eps_pred.shape()));
    }
    Ok(zt.sub(&eps_pred.scale((1.0 - a).sqrt()))?.scale(1.0 / a.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::new(2, ScheduleKind::Linear, 0.1, 0.2).unwrap()
    }

    fn with_alpha(a: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - a]).unwrap()
    }

    #[test]
    fn zero_noise_schedule() {
        let s = NoiseSchedule::new(3, ScheduleKind::Linear, 0.0, 0.0).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_step_hand_product() {
        let s = two_step();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn thousand_step_linear() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let ab = s.alpha_bars();
        assert!(ab[999] > 0.0 && ab[999] < 0.01);
        assert!(ab.windows(2).all(|w| w[1] <= w[0]));
        assert!((s.beta()[0] - 1e-4).abs() < 1e-18 && (s.beta()[999] - 0.02).abs() < 1e-15);
        // independent cumulative product
        let mut prod = 1.0;
        for (i, b) in s.beta().iter().enumerate() {
            prod *= 1.0 - b;
            assert!((ab[i] - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn bounds_rejected() {
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(5, ScheduleKind::Linear, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::new(5, ScheduleKind::Linear, 0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(5, ScheduleKind::Cosine, -0.1, 0.5).is_err());
    }

    #[test]
    fn cosine_schedule_invariants() {
        let s = NoiseSchedule::new(200, ScheduleKind::Cosine, 0.0, 0.999).unwrap();
        let ab = s.alpha_bars();
        assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!(ab.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn add_noise_cases() {
        let z0 = rand(&[4], 1);
        let eps = rand(&[4], 2);
        let s = with_alpha(1.0);
        assert_eq!(s.add_noise(&z0, &eps, 0).unwrap(), z0);

        let s = with_alpha(0.75);
        let zero = Tensor::zeros(&[4]).unwrap();
        let out = s.add_noise(&zero, &eps, 0).unwrap();
        assert!(out.max_abs_diff(&eps.scale(0.5)).unwrap() < 1e-15);

        let s = with_alpha(0.9);
        let out = s.add_noise(&z0, &eps, 0).unwrap();
        for i in 0..4 {
            let want = 0.9f64.sqrt() * z0.data()[i] + 0.1f64.sqrt() * eps.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
        assert!(s.add_noise(&z0, &Tensor::zeros(&[3]).unwrap(), 0).is_err());
        assert!(s.add_noise(&z0, &eps, 1).is_err());
    }

    #[test]
    fn tweedie_cases() {
        let s = with_alpha(0.25);
        let out = s
            .tweedie_z0(&Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![0.5]), 0)
            .unwrap();
        assert!((out.data()[0] - 1.133_974_596_215_561_4).abs() < 1e-12);

        let eps = rand(&[5], 3);
        let zt = eps.scale(0.75f64.sqrt());
        assert!(s.tweedie_z0(&zt, &eps, 0).unwrap().max_abs() < 1e-15);

        let degenerate = NoiseSchedule {
            beta: vec![1.0],
            alpha_bar: vec![0.0],
        };
        let err = degenerate.tweedie_z0(&zt, &eps, 0).unwrap_err();
        assert!(err.to_string().contains("degenerate terminal step"));
    }

    #[test]
    fn tweedie_gradient_is_scaled_identity() {
        let s = with_alpha(0.3);
        let eps = rand(&[6], 4);
        let zt = rand(&[6], 5);
        let w = rand(&[6], 6);
        let err = check_gradient(
            |z| {
                let y = s.tweedie_z0_var(z, &eps, 0)?;
                Ok(y.mul(&z.tape().constant(w.clone()))?.sum())
            },
            &zt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
        let tape = crate::Tape::new();
        let z = tape.leaf(zt.clone());
        let y = s.tweedie_z0_var(&z, &eps, 0).unwrap().sum();
        let g = tape.backward(&y).unwrap().wrt(&z);
        for v in g.data() {
            assert!((v - 1.0 / 0.3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_cases() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.0, 0.3]).unwrap();
        let zt = rand(&[3], 7);
        let eps = rand(&[3], 8);
        // equal rates at t=0 and t=1
        assert_eq!(s.ddim_step(&zt, &eps, 1, Some(0)).unwrap(), zt);
        // terminal convention
        let last = s.ddim_step(&zt, &eps, 0, None).unwrap();
        assert!(last.max_abs_diff(&s.tweedie_z0(&zt, &eps, 0).unwrap()).unwrap() < 1e-15);
        assert!(s.ddim_step(&zt, &eps, 1, Some(1)).is_err());
        assert!(s.ddim_invert_step(&zt, &eps, Some(2), 1).is_err());
    }

    #[test]
    fn two_step_chain_matches_scalar_oracle() {
        let s = NoiseSchedule::new(10, ScheduleKind::Linear, 0.05, 0.3).unwrap();
        let (z, e1, e2) = (0.7, -0.4, 1.3);
        let scalar_step = |z: f64, e: f64, a_t: f64, a_p: f64| {
            let x0 = (z - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
            a_p.sqrt() * x0 + (1.0 - a_p).sqrt() * e
        };
        let ab = s.alpha_bars();
        let want = scalar_step(scalar_step(z, e1, ab[9], ab[5]), e2, ab[5], ab[1]);
        let got = s
            .ddim_step(&Tensor::from_vec(vec![z]), &Tensor::from_vec(vec![e1]), 9, Some(5))
            .and_then(|z| s.ddim_step(&z, &Tensor::from_vec(vec![e2]), 5, Some(1)))
            .unwrap();
        assert!((got.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn invert_step_matches_bisection_root() {
        let s = NoiseSchedule::new(20, ScheduleKind::Linear, 0.01, 0.2).unwrap();
        let (target, e) = (0.37, -0.8);
        let f = |z: f64| {
            s.ddim_step(&Tensor::from_vec(vec![z]), &Tensor::from_vec(vec![e]), 15, Some(4))
                .unwrap()
                .data()[0]
                - target
        };
        // ddim_step is increasing and affine in z
        let (mut lo, mut hi) = (-100.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        let got = s
            .ddim_invert_step(&Tensor::from_vec(vec![target]), &Tensor::from_vec(vec![e]), Some(4), 15)
            .unwrap();
        assert!((got.data()[0] - 0.5 * (lo + hi)).abs() < 1e-10);
    }

    #[test]
    fn inference_timesteps_strided() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let ts = s.inference_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[1], ts[49]), (0, 20, 980));
        assert!(s.inference_timesteps(0).is_err());
    }

    proptest! {
        #[test]
        fn tweedie_inverts_add_noise(seed in 0u64..1000, t in 0usize..1000) {
            let s = NoiseSchedule::new(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
            let z0 = rand(&[8], seed);
            let eps = rand(&[8], seed + 1);
            let zt = s.add_noise(&z0, &eps, t).unwrap();
            let back = s.tweedie_z0(&zt, &eps, t).unwrap();
            prop_assert!(back.max_abs_diff(&z0).unwrap() < 1e-10);
        }

        #[test]
        fn ddim_step_and_inversion_are_mutual_inverses(seed in 0u64..1000, a in 0usize..999, gap in 1usize..500) {
            let s = NoiseSchedule::new(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
            let b = (a + gap).min(999);
            prop_assume!(b > a);
            let z = rand(&[8], seed);
            let e = rand(&[8], seed + 7);
            let up = s.ddim_invert_step(&z, &e, Some(a), b).unwrap();
            let down = s.ddim_step(&up, &e, b, Some(a)).unwrap();
            prop_assert!(down.max_abs_diff(&z).unwrap() < 1e-10);
            let down2 = s.ddim_step(&z, &e, b, Some(a)).unwrap();
            let up2 = s.ddim_invert_step(&down2, &e, Some(a), b).unwrap();
            prop_assert!(up2.max_abs_diff(&z).unwrap() < 1e-10);
        }
    }
}
