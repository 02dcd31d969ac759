//! Learning-rate machinery and the AdamW optimizer.
//!
//! The rate of a parameter at step `t` is its group's base rate, times the
//! layer-wise decay factor `gamma^(L - l)` for vision-backbone layer `l`,
//! times the schedule factor (linear warmup, then inverse-square-root decay).

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::ParamGroup;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LLRDSpec {
    pub eta_base: f64,
    /// Number of decayed layers, `L`.
    pub layers: usize,
    pub gamma: f64,
}

impl LLRDSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("llrd gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.layers == 0 {
            return Err(Error::Config("llrd layer count must be at least 1".into()));
        }
        if !(self.eta_base > 0.0) {
            return Err(Error::Config(format!("base rate must be positive, got {}", self.eta_base)));
        }
        Ok(())
    }
}

/// `eta_base * gamma^(L - l)` for layer `l` in `1..=L`.
pub fn llrd_rate(layer: usize, spec: &LLRDSpec) -> Result<f64> {
    if layer == 0 || layer > spec.layers {
        return Err(Error::Validation(format!(
            "layer {layer} outside 1..={}",
            spec.layers
        )));
    }
    Ok(spec.eta_base * spec.gamma.powi((spec.layers - layer) as i32))
}

/// Base rate of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub decoder_seg_dot: f64,
    pub vision_backbone: f64,
    pub language_backbone: f64,
    pub geometry_prompt: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        GroupRates {
            decoder_seg_dot: 3e-4,
            vision_backbone: 5e-5,
            language_backbone: 5e-5,
            geometry_prompt: 1e-4,
        }
    }
}

impl GroupRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::DecoderSegDot => self.decoder_seg_dot,
            ParamGroup::VisionBackbone => self.vision_backbone,
            ParamGroup::LanguageBackbone => self.language_backbone,
            ParamGroup::GeometryPrompt => self.geometry_prompt,
        }
    }

    pub fn scaled(&self, factor: f64) -> GroupRates {
        GroupRates {
            decoder_seg_dot: self.decoder_seg_dot * factor,
            vision_backbone: self.vision_backbone * factor,
            language_backbone: self.language_backbone * factor,
            geometry_prompt: self.geometry_prompt * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in ParamGroup::ALL {
            if !(self.get(g) > 0.0) {
                return Err(Error::Config(format!("{} rate must be positive", g.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            warmup_steps: 1000,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    /// Multiplier on the base rate at step `t` (1-based).
    pub fn factor(&self, t: usize) -> f64 {
        let (t, w) = (t.max(1) as f64, self.warmup_steps as f64);
        if t <= w {
            t / w
        } else {
            (w / t).sqrt()
        }
    }
}

/// Linear warmup to `base` over `W` steps, then `base * sqrt(W / t)`.
pub fn lr_at_step(t: usize, base: f64, spec: &ScheduleSpec) -> f64 {
    base * spec.factor(t)
}

/// Everything needed to compute a parameter's rate at a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePlan {
    pub groups: GroupRates,
    pub llrd_gamma: f64,
    pub llrd_layers: usize,
    pub schedule: ScheduleSpec,
}

impl Default for RatePlan {
    fn default() -> Self {
        RatePlan {
            groups: GroupRates::default(),
            llrd_gamma: 0.85,
            llrd_layers: 12,
            schedule: ScheduleSpec::default(),
        }
    }
}

impl RatePlan {
    pub fn validate(&self) -> Result<()> {
        self.groups.validate()?;
        self.schedule.validate()?;
        self.llrd(1.0).validate()
    }

    fn llrd(&self, eta_base: f64) -> LLRDSpec {
        LLRDSpec {
            eta_base,
            layers: self.llrd_layers,
            gamma: self.llrd_gamma,
        }
    }

    /// Group base rate, times the layer decay for the vision backbone,
    /// times the schedule factor at step `t`.
    pub fn effective_rate(&self, group: ParamGroup, layer: Option<usize>, t: usize) -> Result<f64> {
        let base = self.groups.get(group);
        let rate = match (group, layer) {
            (ParamGroup::VisionBackbone, Some(l)) => llrd_rate(l, &self.llrd(base))?,
            (ParamGroup::VisionBackbone, None) => {
                return Err(Error::Validation("vision backbone rates need a layer index".into()))
            }
            (_, None) => base,
            (g, Some(_)) => {
                return Err(Error::Validation(format!(
                    "layer index given for the {} group, which has no layer decay",
                    g.name()
                )))
            }
        };
        Ok(lr_at_step(t, rate, &self.schedule))
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW with decoupled weight decay applied to matrices only (rank >= 2);
/// biases, gains and other vectors are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    spec: ScheduleSpec,
    step: usize,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(vars: &[&Var], spec: ScheduleSpec) -> Result<Self> {
        spec.validate()?;
        let moments = vars
            .iter()
            .map(|v| {
                Ok(Moments {
                    m: v.zeros_like()?,
                    v: v.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamW {
            spec,
            step: 0,
            moments,
        })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// Restores state saved from an optimizer over the same parameters.
    pub fn restore(&mut self, step: usize, moments: Vec<Moments>) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(Error::Validation(format!(
                "optimizer state has {} entries, expected {}",
                moments.len(),
                self.moments.len()
            )));
        }
        for (old, new) in self.moments.iter().zip(&moments) {
            if old.m.dims() != new.m.dims() || old.v.dims() != new.v.dims() {
                return Err(Error::Validation("optimizer state shape mismatch".into()));
            }
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }

    /// One update. `grads[i]` is `None` for parameters outside the graph;
    /// those keep their value and moments.
    pub fn step(&mut self, vars: &[&Var], grads: &[Option<Tensor>], rates: &[f64]) -> Result<()> {
        if vars.len() != self.moments.len() || grads.len() != vars.len() || rates.len() != vars.len() {
            return Err(Error::Validation("optimizer step received mismatched slices".into()));
        }
        self.step += 1;
        let (b1, b2) = self.spec.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((var, grad), (&lr, mom)) in vars.iter().zip(grads).zip(rates.iter().zip(&mut self.moments)) {
            let Some(g) = grad else { continue };
            let g = g.detach();
            mom.m = (mom.m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            mom.v = (mom.v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let denom = mom.v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.spec.eps)?;
            let update = mom.m.affine(1.0 / c1, 0.0)?.div(&denom)?;
            let decay = if var.rank() >= 2 { self.spec.weight_decay } else { 0.0 };
            let theta = var.as_tensor().detach();
            let next = (theta.affine(1.0 - lr * decay, 0.0)? - update.affine(lr, 0.0)?)?;
            var.set(&next)?;
        }
        Ok(())
    }
}
