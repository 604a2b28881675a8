use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Float, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimMode {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimMode {
    pub fn adam() -> Self {
        OptimMode::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimMode::Sgd => "sgd",
            OptimMode::Adam { .. } => "adam",
        }
    }
}

impl std::str::FromStr for OptimMode {
    type Err = Error;

    /// `adam` (default moments) or `sgd`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimMode::adam()),
            "sgd" => Ok(OptimMode::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (adam|sgd)"))),
        }
    }
}

/// Optimizer state: per-parameter moments plus a freeze mask.
///
/// Moments are only ever allocated for parameters outside the mask.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Float = f32> {
    pub lr: f64,
    pub mode: OptimMode,
    frozen: BTreeSet<String>,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Float> Optimizer<T> {
    pub fn new(mode: OptimMode, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            lr,
            mode,
            frozen: BTreeSet::new(),
            moments: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn with_freeze_mask<I, S>(mut self, frozen: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.frozen = frozen.into_iter().map(Into::into).collect();
        self.moments.retain(|name, _| !self.frozen.contains(name));
        self
    }

    pub fn freeze_mask(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Apply one update to every parameter outside the freeze mask.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &HashMap<String, Vec<T>>,
    ) -> Result<()> {
        for (name, t) in params.iter() {
            if self.frozen.contains(name) {
                continue;
            }
            match grads.get(name) {
                None => {
                    return Err(Error::Contract(format!(
                        "no gradient for trainable parameter {name}"
                    )))
                }
                Some(g) if g.len() != t.numel() => {
                    return Err(Error::Contract(format!(
                        "gradient for {name} has {} values, parameter has {}",
                        g.len(),
                        t.numel()
                    )))
                }
                _ => {}
            }
        }

        self.step += 1;
        let lr = T::from_f64_lossy(self.lr);
        for (name, t) in params.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let g = &grads[name];
            match self.mode {
                OptimMode::Sgd => {
                    for (w, &gv) in t.data_mut().iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
                OptimMode::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
                    let b1 = T::from_f64_lossy(beta1);
                    let b2 = T::from_f64_lossy(beta2);
                    let eps = T::from_f64_lossy(eps);
                    let c1 = T::from_f64_lossy(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::from_f64_lossy(1.0 - beta2.powi(self.step as i32));
                    let one = T::one();
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        t.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[(&str, f64)]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        for (n, v) in vals {
            p.insert(*n, Tensor::new(&[1], vec![*v]).unwrap()).unwrap();
        }
        p
    }

    fn grads(vals: &[(&str, f64)]) -> HashMap<String, Vec<f64>> {
        vals.iter().map(|(n, v)| (n.to_string(), vec![*v])).collect()
    }

    #[test]
    fn sgd_step() {
        let mut p = store(&[("w", 1.0)]);
        let mut opt = Optimizer::new(OptimMode::Sgd, 0.1).unwrap();
        opt.step(&mut p, &grads(&[("w", 2.0)])).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn frozen_parameter_is_bit_identical_and_has_no_moments() {
        let mut p = store(&[("w", 1.0), ("f", 0.123456789)]);
        let before = p.get("f").unwrap().clone();
        let mut opt = Optimizer::new(OptimMode::adam(), 0.1)
            .unwrap()
            .with_freeze_mask(["f"]);
        for _ in 0..10 {
            opt.step(&mut p, &grads(&[("w", 0.5), ("f", 3.0)])).unwrap();
        }
        assert!(p.get("f").unwrap().bit_eq(&before));
        assert!(!opt.has_moments("f"));
        assert!(opt.has_moments("w"));
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = store(&[("w", 1.0), ("u", 2.0)]);
        let mut opt = Optimizer::new(OptimMode::Sgd, 0.1).unwrap();
        let err = opt.step(&mut p, &grads(&[("w", 1.0)])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(opt.steps(), 0);
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g|+eps).
        let (lr, eps) = (0.01, 1e-8);
        for g in [3.0, -0.25, 1e-3] {
            let mut p = store(&[("w", 0.5)]);
            let mut opt = Optimizer::new(
                OptimMode::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps,
                },
                lr,
            )
            .unwrap();
            opt.step(&mut p, &grads(&[("w", g)])).unwrap();
            let want = 0.5 - lr * g / (g.abs() + eps);
            assert!((p.get("w").unwrap().item() - want).abs() < 1e-7);
        }
    }

    #[test]
    fn non_positive_learning_rate_rejected() {
        assert!(Optimizer::<f32>::new(OptimMode::Sgd, 0.0).is_err());
        assert!(Optimizer::<f32>::new(OptimMode::Sgd, f64::NAN).is_err());
    }
}
