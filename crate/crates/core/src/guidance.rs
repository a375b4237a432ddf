//! Noise-prediction composition, step gating and the perceptual latent update.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::perceptual::PerceptualNet;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Maximum number of step-size halvings per inner iteration when backtracking.
pub const MAX_HALVINGS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Edit term extrapolates away from the source prediction.
    SrcAnchor,
    /// Edit term extrapolates away from the null prediction.
    NullAnchor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    BeforeStep,
    AfterStep,
}

/// Inclusive interval of reverse-step indices, or empty.
///
/// Serialised as `[first, last]` or `[]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub enum StepRange {
    Empty,
    Inclusive(usize, usize),
}

impl StepRange {
    pub fn contains(&self, step: usize) -> bool {
        match *self {
            StepRange::Empty => false,
            StepRange::Inclusive(a, b) => a <= step && step <= b,
        }
    }

    fn check(&self, name: &str, steps: usize) -> Result<()> {
        match *self {
            StepRange::Inclusive(_, b) if b >= steps => Err(Error::InvalidArgument(format!(
                "{name} [{}, {b}] exceeds the {steps} inference steps",
                self.first().unwrap_or(0)
            ))),
            _ => Ok(()),
        }
    }

    fn first(&self) -> Option<usize> {
        match *self {
            StepRange::Empty => None,
            StepRange::Inclusive(a, _) => Some(a),
        }
    }
}

impl TryFrom<Vec<usize>> for StepRange {
    type Error = String;

    fn try_from(v: Vec<usize>) -> std::result::Result<Self, String> {
        match v.as_slice() {
            [] => Ok(StepRange::Empty),
            &[a, b] if a <= b => Ok(StepRange::Inclusive(a, b)),
            &[a, b] => Err(format!("range start {a} is after its end {b}")),
            _ => Err(format!("a step range is [] or [first, last], got {} values", v.len())),
        }
    }
}

impl From<StepRange> for Vec<usize> {
    fn from(r: StepRange) -> Self {
        match r {
            StepRange::Empty => vec![],
            StepRange::Inclusive(a, b) => vec![a, b],
        }
    }
}

impl std::str::FromStr for StepRange {
    type Err = Error;

    /// `a:b` (inclusive) or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(StepRange::Empty);
        }
        let bad = || Error::InvalidArgument(format!("step range `{s}` must be `first:last` or `none`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        StepRange::try_from(vec![a, b]).map_err(Error::InvalidArgument)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub beta: f64,
    pub variant: Variant,
    pub text_range: StepRange,
    pub perceptual_range: StepRange,
    pub lambda: f64,
    pub inner_iters: usize,
    pub backtrack: bool,
    pub order: UpdateOrder,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::with_default_ranges(50)
    }
}

impl GuidanceConfig {
    /// Default scales with text guidance on the first 40% of steps and
    /// perceptual guidance on the rest.
    pub fn with_default_ranges(steps: usize) -> Self {
        let split = (steps * 2) / 5;
        let text_range = if split == 0 {
            StepRange::Empty
        } else {
            StepRange::Inclusive(0, split - 1)
        };
        let perceptual_range = if split >= steps {
            StepRange::Empty
        } else {
            StepRange::Inclusive(split, steps - 1)
        };
        Self {
            gamma: 7.5,
            beta: 7.5,
            variant: Variant::SrcAnchor,
            text_range,
            perceptual_range,
            lambda: 0.1,
            inner_iters: 1,
            backtrack: true,
            order: UpdateOrder::BeforeStep,
        }
    }

    pub fn validate(&self, inference_steps: usize) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        self.text_range.check("text_range", inference_steps)?;
        self.perceptual_range.check("perceptual_range", inference_steps)
    }
}

fn check_three(eps_null: &Tensor, eps_src: &Tensor, eps_edit: &Tensor) -> Result<()> {
    if eps_null.shape() != eps_src.shape() {
        return Err(Error::shape("compose", eps_null.shape(), eps_src.shape()));
    }
    if eps_null.shape() != eps_edit.shape() {
        return Err(Error::shape("compose", eps_null.shape(), eps_edit.shape()));
    }
    Ok(())
}

/// `eps_null + gamma * (eps_src - eps_null)`; exactly `eps_src` when `gamma == 1`.
pub fn noise_cond(eps_null: &Tensor, eps_src: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma == 1.0 {
        if eps_null.shape() != eps_src.shape() {
            return Err(Error::shape("noise_cond", eps_null.shape(), eps_src.shape()));
        }
        return Ok(eps_src.clone());
    }
    eps_null.axpy(gamma, &eps_src.sub(eps_null)?)
}

fn with_edit_term(base: Tensor, eps_edit: &Tensor, anchor: &Tensor, beta: f64) -> Result<Tensor> {
    if beta == 0.0 {
        return Ok(base);
    }
    base.axpy(beta, &eps_edit.sub(anchor)?)
}

/// `noise_cond + beta * (eps_edit - eps_src)`.
pub fn compose_src_anchor(
    eps_null: &Tensor,
    eps_src: &Tensor,
    eps_edit: &Tensor,
    gamma: f64,
    beta: f64,
) -> Result<Tensor> {
    check_three(eps_null, eps_src, eps_edit)?;
    with_edit_term(noise_cond(eps_null, eps_src, gamma)?, eps_edit, eps_src, beta)
}

/// `noise_cond + beta * (eps_edit - eps_null)`.
pub fn compose_null_anchor(
    eps_null: &Tensor,
    eps_src: &Tensor,
    eps_edit: &Tensor,
    gamma: f64,
    beta: f64,
) -> Result<Tensor> {
    check_three(eps_null, eps_src, eps_edit)?;
    with_edit_term(noise_cond(eps_null, eps_src, gamma)?, eps_edit, eps_null, beta)
}

pub fn compose(
    variant: Variant,
    eps_null: &Tensor,
    eps_src: &Tensor,
    eps_edit: &Tensor,
    gamma: f64,
    beta: f64,
) -> Result<Tensor> {
    match variant {
        Variant::SrcAnchor => compose_src_anchor(eps_null, eps_src, eps_edit, gamma, beta),
        Variant::NullAnchor => compose_null_anchor(eps_null, eps_src, eps_edit, gamma, beta),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gate {
    pub text_active: bool,
    pub perceptual_active: bool,
}

pub fn gate(step_index: usize, cfg: &GuidanceConfig) -> Gate {
    Gate {
        text_active: cfg.text_range.contains(step_index),
        perceptual_active: cfg.perceptual_range.contains(step_index),
    }
}

/// Outcome of one [`perceptual_update`] call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    /// Objective at the input latent, if evaluated.
    pub objective_before: Option<f64>,
    /// Objective at the returned latent, if evaluated.
    pub objective_after: Option<f64>,
    pub accepted_steps: usize,
    pub halvings: usize,
    /// Set when a non-finite value stopped the update.
    pub aborted: Option<String>,
}

/// Perceptual distance between the decoded Tweedie estimate and the source image.
pub struct PerceptualObjective<'a> {
    pub t: usize,
    pub eps_pred: &'a Tensor,
    pub x_src: &'a Tensor,
    pub codec: &'a Codec,
    pub perceptual: &'a PerceptualNet,
    pub sched: &'a NoiseSchedule,
}

impl PerceptualObjective<'_> {
    pub fn value(&self, zt: &Tensor) -> Result<f64> {
        let tape = Tape::untraced();
        let z0 = self
            .sched
            .tweedie_z0_var(&tape.constant(zt.clone()), self.eps_pred, self.t)?;
        let x0 = self.codec.decode_var(&z0)?;
        self.perceptual.distance_var(&x0, self.x_src)?.value().item()
    }

    pub fn value_and_grad(&self, zt: &Tensor) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let z = tape.leaf(zt.clone());
        let z0 = self.sched.tweedie_z0_var(&z, self.eps_pred, self.t)?;
        let x0 = self.codec.decode_var(&z0)?;
        let loss = self.perceptual.distance_var(&x0, self.x_src)?;
        let grads = tape.backward(&loss)?;
        Ok((loss.value().item()?, grads.wrt(&z)))
    }
}

/// Gradient descent on the perceptual objective with `eps_pred` frozen.
///
/// Returns the input unchanged when `lambda` or `inner_iters` is zero, or when
/// a non-finite value is met (recorded in the diagnostics).
pub fn perceptual_update(
    zt: &Tensor,
    objective: &PerceptualObjective<'_>,
    cfg: &GuidanceConfig,
) -> Result<(Tensor, UpdateDiagnostics)> {
    let mut diag = UpdateDiagnostics::default();
    if cfg.lambda == 0.0 || cfg.inner_iters == 0 {
        return Ok((zt.clone(), diag));
    }
    let abort = |mut diag: UpdateDiagnostics, what: &str| {
        diag.aborted = Some(what.to_string());
        diag.objective_after = diag.objective_before;
        Ok((zt.clone(), diag))
    };
    let mut z = zt.clone();
    let mut current = None;
    for _ in 0..cfg.inner_iters {
        let (loss, grad) = match objective.value_and_grad(&z) {
            Ok(v) => v,
            Err(Error::PixelOutOfRange { .. }) => return abort(diag, "decoded image out of range"),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return abort(diag, "non-finite objective");
        }
        if !grad.is_finite() {
            return abort(diag, "non-finite gradient");
        }
        diag.objective_before.get_or_insert(loss);
        current = Some(loss);
        if !cfg.backtrack {
            z = z.axpy(-cfg.lambda, &grad)?;
            diag.accepted_steps += 1;
            continue;
        }
        let mut step = cfg.lambda;
        let mut accepted = false;
        for attempt in 0..=MAX_HALVINGS {
            let cand = z.axpy(-step, &grad)?;
            let value = objective.value(&cand).unwrap_or(f64::NAN);
            if value < loss {
                z = cand;
                current = Some(value);
                accepted = true;
                diag.halvings += attempt;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            diag.halvings += MAX_HALVINGS;
            break;
        }
        diag.accepted_steps += 1;
    }
    if !z.is_finite() {
        return abort(diag, "non-finite latent");
    }
    diag.objective_after = if cfg.backtrack {
        current
    } else {
        objective.value(&z).ok()
    };
    Ok((z, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn hand_evaluated_compositions() {
        let (n, s, e) = (v(&[0.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0]));
        assert_eq!(compose_src_anchor(&n, &s, &e, 2.0, 1.5).unwrap().data(), &[0.5, 1.5]);
        assert_eq!(compose_null_anchor(&n, &s, &e, 2.0, 1.5).unwrap().data(), &[2.0, 1.5]);
    }

    #[test]
    fn source_collapse_is_exact() {
        let (n, s, e) = (v(&[0.3, -1.7]), v(&[1.1, 0.2]), v(&[-0.4, 2.5]));
        assert_eq!(compose_src_anchor(&n, &s, &e, 1.0, 0.0).unwrap(), s);
        assert_eq!(compose_null_anchor(&n, &s, &e, 1.0, 0.0).unwrap(), s);
    }

    #[test]
    fn null_anchor_gamma_one_beta_one() {
        let (n, s, e) = (v(&[0.5, -1.0]), v(&[1.0, 2.0]), v(&[-3.0, 0.25]));
        let want = s.add(&e).unwrap().sub(&n).unwrap();
        let got = compose_null_anchor(&n, &s, &e, 1.0, 1.0).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (a, b) = (v(&[1.0, 2.0]), v(&[1.0, 2.0, 3.0]));
        assert!(compose_src_anchor(&a, &a, &b, 2.0, 1.0).is_err());
        assert!(compose_null_anchor(&a, &b, &a, 1.0, 0.0).is_err());
    }

    #[test]
    fn gating_examples() {
        let mut cfg = GuidanceConfig::default();
        assert_eq!(cfg.text_range, StepRange::Inclusive(0, 19));
        assert_eq!(cfg.perceptual_range, StepRange::Inclusive(20, 49));
        assert!(gate(5, &cfg).text_active);
        assert!(gate(19, &cfg).text_active && !gate(20, &cfg).text_active);
        assert!(gate(20, &cfg).perceptual_active && gate(49, &cfg).perceptual_active);
        cfg.perceptual_range = StepRange::Empty;
        assert!((0..50).all(|i| !gate(i, &cfg).perceptual_active));
    }

    #[test]
    fn ranges_parse_and_validate() {
        assert_eq!("3:7".parse::<StepRange>().unwrap(), StepRange::Inclusive(3, 7));
        assert_eq!("none".parse::<StepRange>().unwrap(), StepRange::Empty);
        assert!("7:3".parse::<StepRange>().is_err());
        let cfg = GuidanceConfig::default();
        assert!(cfg.validate(50).is_ok());
        assert!(cfg.validate(40).is_err());
        let neg = GuidanceConfig {
            beta: -1.0,
            ..Default::default()
        };
        assert!(neg.validate(50).is_err());
    }
}
