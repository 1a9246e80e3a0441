//! Per-layer weight clipping and its proximal-operator reading.

use serde::{Deserialize, Serialize};

use super::Milestone;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_factor() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

/// Bounds `c_k = f * init_std_k`, optionally rescaled at iteration milestones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipPolicy {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_factor")]
    pub global_factor: f64,
    #[serde(default)]
    pub schedule: Vec<Milestone>,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            global_factor: default_factor(),
            schedule: Vec::new(),
        }
    }
}

impl ClipPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.global_factor > 0.0 && self.global_factor.is_finite()) {
            return Err(Error::config("clip global_factor must be positive"));
        }
        super::validate_schedule(&self.schedule, "clip schedule")
    }

    /// Bounds in effect during iteration `step`: milestones at or before
    /// `step` have been applied, in order.
    pub fn bounds_at(&self, init_std: &[f64], step: u64) -> Vec<f64> {
        let mut bounds: Vec<f64> = if self.enabled {
            init_std.iter().map(|s| self.global_factor * s).collect()
        } else {
            vec![f64::INFINITY; init_std.len()]
        };
        for m in self.schedule.iter().take_while(|m| m.step <= step) {
            bounds.iter_mut().for_each(|c| *c *= m.factor);
        }
        bounds
    }
}

/// Elementwise `max(min(w, c), -c)`.
pub fn clip_weights(w: &Tensor, c: f64) -> Tensor {
    w.map(|v| v.min(c).max(-c))
}

pub(crate) fn clip_in_place(w: &mut [f64], c: f64) {
    for v in w {
        *v = v.min(c).max(-c);
    }
}

/// Proximal operator of the indicator of `{x : ‖x‖_∞ ≤ radius}`.
///
/// The indicator is separable, so the minimizer of
/// `G(x) + ‖x - v‖² / (2λ)` is the coordinatewise nearest point of
/// `[-radius, radius]`, independent of the step size λ.
pub fn prox_linf_ball(v: &Tensor, radius: f64) -> Result<Tensor> {
    if !(radius > 0.0) {
        return Err(Error::input("prox radius must be positive"));
    }
    Ok(v.map(|x| {
        if x > radius {
            radius
        } else if x < -radius {
            -radius
        } else {
            x
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let w = Tensor::new(vec![3], vec![1.5, -0.3, -2.0]).unwrap();
        assert_eq!(clip_weights(&w, 1.0).data(), &[1.0, -0.3, -1.0]);
        assert_eq!(clip_weights(&w, f64::INFINITY), w);
        let inside = Tensor::new(vec![2], vec![0.25, -0.125]).unwrap();
        assert_eq!(clip_weights(&inside, 1.0), inside);
    }

    #[test]
    fn prox_inside_ball_is_identity() {
        let v = Tensor::new(vec![2], vec![0.5, -0.9]).unwrap();
        assert_eq!(prox_linf_ball(&v, 1.0).unwrap(), v);
        assert!(prox_linf_ball(&v, 0.0).is_err());
    }

    #[test]
    fn schedule_rescales_bounds() {
        let p = ClipPolicy {
            enabled: true,
            global_factor: 0.5,
            schedule: vec![
                Milestone {
                    step: 5,
                    factor: 1.4,
                },
                Milestone {
                    step: 10,
                    factor: 1.4,
                },
            ],
        };
        let std = [0.2, 0.1];
        assert_eq!(p.bounds_at(&std, 4), vec![0.1, 0.05]);
        assert_eq!(p.bounds_at(&std, 5), vec![0.1 * 1.4, 0.05 * 1.4]);
        assert_eq!(
            p.bounds_at(&std, 10),
            vec![0.1 * 1.4 * 1.4, 0.05 * 1.4 * 1.4]
        );
        assert!(ClipPolicy::disabled()
            .bounds_at(&std, 0)
            .iter()
            .all(|c| c.is_infinite()));
    }
}
