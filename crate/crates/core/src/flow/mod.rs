//! Rectified-flow dynamics: straight-line noising, velocity targets, the
//! flow-matching loss, guidance and the Euler sampler.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `z_t = (1 − t)·z0 + t·ε`.
pub fn forward_diffuse(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_time(t)?;
    z0.zip_map(eps, "forward_diffuse", |a, e| (1.0 - t) * a + t * e)
}

/// `v = ε − z0`, independent of `t`.
pub fn velocity_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(z0)
}

/// Mean squared error over all elements.
pub fn fm_loss(v_pred: &Tensor, v_t: &Tensor) -> Result<f64> {
    let d = v_pred.zip_map(v_t, "fm_loss", |a, b| (a - b) * (a - b))?;
    Ok(d.mean())
}

/// Guided prediction `uncond + ω·(cond − uncond)`, evaluated as
/// `(1 − ω)·uncond + ω·cond` so that `ω = 0` and `ω = 1` are exact.
pub fn cfg_combine(pred_uncond: &Tensor, pred_cond: &Tensor, omega: f64) -> Result<Tensor> {
    if !(omega >= 0.0) {
        return Err(Error::invalid(format!("guidance scale {omega} must be non-negative")));
    }
    pred_uncond.zip_map(pred_cond, "cfg_combine", |u, c| (1.0 - omega) * u + omega * c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance scale ω.
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, cfg_scale: 5.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::invalid("guidance scale must be non-negative"));
        }
        Ok(())
    }

    /// `t_i = 1 − i/steps` for `i = 0..=steps`.
    pub fn time(&self, i: usize) -> f64 {
        1.0 - i as f64 / self.steps as f64
    }
}

/// Sampler position: latent, time and step index.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z: Tensor,
    pub t: f64,
    pub step_index: usize,
}

/// Anything that predicts a velocity with and without conditioning.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64, conditional: bool) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, bool) -> Result<Tensor>,
{
    fn velocity(&self, z: &Tensor, t: f64, conditional: bool) -> Result<Tensor> {
        self(z, t, conditional)
    }
}

/// How each step's velocity is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guidance {
    /// Conditional and null branches combined with ω.
    Cfg(f64),
    /// One evaluation per step on the chosen branch.
    Single { conditional: bool },
}

/// Explicit Euler from `z_1 = ε ~ N(0, I)` to `t = 0`.
pub fn sample<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &V,
    shape: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let eps = Tensor::randn(shape, rng);
    integrate(model, eps, cfg.steps, Guidance::Cfg(cfg.cfg_scale), |_| {})
}

/// Euler integration from `z` at `t = 1`; `observe` sees each state.
pub fn integrate<V: VelocityField + ?Sized>(
    model: &V,
    z: Tensor,
    steps: usize,
    guidance: Guidance,
    mut observe: impl FnMut(&FlowState),
) -> Result<Tensor> {
    let cfg = SamplerConfig { steps, cfg_scale: 1.0 };
    cfg.validate()?;
    let mut state = FlowState { z, t: 1.0, step_index: 0 };
    for i in 0..steps {
        observe(&state);
        let (t, t_next) = (cfg.time(i), cfg.time(i + 1));
        let v = match guidance {
            Guidance::Cfg(omega) => {
                let cond = model.velocity(&state.z, t, true)?;
                let uncond = model.velocity(&state.z, t, false)?;
                cfg_combine(&uncond, &cond, omega)?
            }
            Guidance::Single { conditional } => model.velocity(&state.z, t, conditional)?,
        };
        let dt = t - t_next;
        state.z = state.z.zip_map(&v, "euler step", |z, v| z - dt * v)?;
        if !state.z.is_finite() {
            return Err(Error::NonFinite { op: "euler step" });
        }
        state.t = t_next;
        state.step_index = i + 1;
    }
    observe(&state);
    Ok(state.z)
}
