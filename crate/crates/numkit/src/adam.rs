//! Adam optimizer with bias correction, plus Polyak soft updates for
//! target networks.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{NumkitError, Result};
use crate::tape::{GradMap, Param, ParamId};

#[derive(Debug, Clone)]
struct Slot {
    first_moment: ArrayD<f64>,
    second_moment: ArrayD<f64>,
}

/// Per-optimizer Adam state. Moments are allocated lazily per parameter;
/// parameters without a gradient in a step still decay their moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    slots: HashMap<ParamId, Slot>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter in `params`. Parameters absent
    /// from `grads` are treated as having a zero gradient.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut Param>,
        grads: &GradMap,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for p in params {
            let zero;
            let g = match grads.get(p.id()) {
                Some(g) => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(NumkitError::Numeric(format!(
                            "non-finite gradient for parameter '{}'",
                            p.name()
                        )));
                    }
                    g
                }
                None => {
                    zero = ArrayD::zeros(p.value.raw_dim());
                    &zero
                }
            };
            if g.shape() != p.value.shape() {
                return Err(NumkitError::shape(
                    format!("Adam::step on '{}'", p.name()),
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let slot = self.slots.entry(p.id()).or_insert_with(|| Slot {
                first_moment: ArrayD::zeros(p.value.raw_dim()),
                second_moment: ArrayD::zeros(p.value.raw_dim()),
            });
            slot.first_moment = &slot.first_moment * self.beta1 + &(g * (1.0 - self.beta1));
            slot.second_moment =
                &slot.second_moment * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));

            let m_hat = &slot.first_moment / bc1;
            let v_hat = &slot.second_moment / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.epsilon) * self.learning_rate;
            p.value -= &update;
        }
        Ok(())
    }

    /// Moments and step count as named tensors, for checkpointing.
    /// Names are resolved through the parameters the optimizer serves.
    pub fn export_state<'p>(
        &self,
        params: impl IntoIterator<Item = &'p Param>,
    ) -> Vec<(String, ArrayD<f64>)> {
        let mut out = vec![(
            "adam.step_count".to_string(),
            ndarray::arr0(self.step_count as f64).into_dyn(),
        )];
        for p in params {
            if let Some(slot) = self.slots.get(&p.id()) {
                out.push((format!("adam.{}.m", p.name()), slot.first_moment.clone()));
                out.push((format!("adam.{}.v", p.name()), slot.second_moment.clone()));
            }
        }
        out
    }

    pub fn import_state<'p>(
        &mut self,
        params: impl IntoIterator<Item = &'p Param>,
        entries: &HashMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        let step = entries
            .get("adam.step_count")
            .ok_or_else(|| NumkitError::Format("missing adam.step_count".into()))?;
        self.step_count = step.iter().next().copied().unwrap_or(0.0) as u64;
        for p in params {
            let m = entries.get(&format!("adam.{}.m", p.name()));
            let v = entries.get(&format!("adam.{}.v", p.name()));
            if let (Some(m), Some(v)) = (m, v) {
                self.slots.insert(
                    p.id(),
                    Slot {
                        first_moment: m.clone(),
                        second_moment: v.clone(),
                    },
                );
            }
        }
        Ok(())
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn soft_update(target: &mut Param, online: &Param, tau: f64) {
    assert!(tau > 0.0 && tau <= 1.0, "tau must be in (0, 1], got {tau}");
    target.value = &target.value * (1.0 - tau) + &(&online.value * tau);
}

/// Soft-updates parallel parameter lists (targets first, online second).
pub fn soft_update_all<'a, 'b>(
    targets: impl IntoIterator<Item = &'a mut Param>,
    online: impl IntoIterator<Item = &'b Param>,
    tau: f64,
) {
    for (t, o) in targets.into_iter().zip(online) {
        soft_update(t, o, tau);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = Param::new("p", arr1(&[1.0, -2.0]).into_dyn());
        let mut opt = Adam::new(0.1);
        opt.step([&mut p], &GradMap::default()).unwrap();
        assert_eq!(p.value, arr1(&[1.0, -2.0]).into_dyn());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // g=1, lr=0.1: m_hat = 1, v_hat = 1, update = 0.1/(1 + eps).
        let mut p = Param::new("p", arr1(&[0.5]).into_dyn());
        let mut grads = GradMap::default();
        grads.insert(p.id(), arr1(&[1.0]).into_dyn());
        let mut opt = Adam::new(0.1);
        opt.step([&mut p], &grads).unwrap();
        let delta = 0.5 - p.value[[0]];
        assert!((delta - 0.1).abs() < 1e-7, "delta = {delta}");
    }

    #[test]
    fn nan_gradient_reports_param_name() {
        let mut p = Param::new("policy.l0.w", arr1(&[0.0]).into_dyn());
        let mut grads = GradMap::default();
        grads.insert(p.id(), arr1(&[f64::NAN]).into_dyn());
        let mut opt = Adam::new(0.1);
        let err = opt.step([&mut p], &grads).unwrap_err();
        assert!(err.to_string().contains("policy.l0.w"));
    }

    #[test]
    fn soft_update_tau_one_copies_online() {
        let mut t = Param::new("t", arr1(&[0.0, 0.0]).into_dyn());
        let o = Param::new("o", arr1(&[1.0, -3.0]).into_dyn());
        soft_update(&mut t, &o, 1.0);
        assert_eq!(t.value, o.value);
    }

    #[test]
    fn soft_update_rate_from_table() {
        let mut t = Param::new("t", arr1(&[0.0]).into_dyn());
        let o = Param::new("o", arr1(&[1.0]).into_dyn());
        soft_update(&mut t, &o, 0.05);
        assert!((t.value[[0]] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn repeated_soft_updates_converge_geometrically() {
        let mut t = Param::new("t", arr1(&[0.0]).into_dyn());
        let o = Param::new("o", arr1(&[1.0]).into_dyn());
        let tau = 0.05;
        for k in 1..=100 {
            soft_update(&mut t, &o, tau);
            let expected = 1.0 - (1.0 - tau).powi(k);
            assert!((t.value[[0]] - expected).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn two_identical_runs_produce_identical_parameters() {
        let run = || {
            let mut p = Param::new("p", arr1(&[0.3, -0.9, 2.0]).into_dyn());
            let mut opt = Adam::new(0.01);
            for i in 0..50 {
                let mut grads = GradMap::default();
                let g = arr1(&[(i as f64).sin(), 1.0, -0.5]).into_dyn();
                grads.insert(p.id(), g);
                opt.step([&mut p], &grads).unwrap();
            }
            p.value
        };
        assert_eq!(run(), run());
    }
}
