use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::substrate::ParamStore;

/// `lr0 · (1 − iter/max_iters)^power`, with `iter` clamped to `[0, max_iters]`.
pub fn poly_lr(iter: u64, lr0: f64, max_iters: u64, power: f64) -> f64 {
    let t = iter.min(max_iters) as f64 / max_iters.max(1) as f64;
    lr0 * (1.0 - t).powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

/// Per-parameter moment estimates, created lazily on first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates applied so far to `name`.
    pub fn steps(&self, name: &str) -> u32 {
        self.moments.get(name).map_or(0, |m| m.step as u32)
    }
}

/// One decoupled-weight-decay Adam update. Parameters absent from `grads`
/// are left untouched, decay included. Every gradient is checked before any
/// parameter changes.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &HashMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.len() != t.numel() {
                return Err(Error::Numerical(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    t.numel()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient {} in parameter `{name}` at element {i}", g[i])));
            }
        }
    }
    let (b1, b2) = cfg.betas;
    for (name, t) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let st = state.moments.entry(name.to_owned()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            step: 0,
        });
        st.step += 1;
        let c1 = 1.0 - b1.powi(st.step);
        let c2 = 1.0 - b2.powi(st.step);
        for (((p, &gi), m), v) in t.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *p -= lr * (update + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Tensor4;
    use proptest::prelude::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor4::from_vec([1, 1, 1, values.len()], values.to_vec()).unwrap()).unwrap();
        ps
    }

    fn grads(values: &[f64]) -> HashMap<String, Vec<f64>> {
        HashMap::from([("w".to_owned(), values.to_vec())])
    }

    #[test]
    fn poly_boundaries_and_midpoint() {
        assert_eq!(poly_lr(0, 0.01, 100, 1.0), 0.01);
        assert_eq!(poly_lr(100, 0.01, 100, 1.0), 0.0);
        assert_eq!(poly_lr(50, 0.01, 100, 1.0), 0.005);
        assert_eq!(poly_lr(50, 0.01, 100, 2.0), 0.0025);
        assert_eq!(poly_lr(500, 0.01, 100, 1.0), 0.0);
    }

    #[test]
    fn zero_grads_without_decay_are_a_fixed_point() {
        let mut ps = store(&[1.5, -2.0, 0.25]);
        let before = ps.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = AdamState::new();
        for _ in 0..5 {
            adamw_step(&mut ps, &grads(&[0.0; 3]), &mut st, 0.1, &cfg).unwrap();
        }
        assert_eq!(ps, before);
        assert_eq!(st.steps("w"), 5);
    }

    #[test]
    fn decay_shrinks_by_exact_factor() {
        // lr·wd = 1/4 is exact in binary, so the shrink is bit-exact.
        let mut ps = store(&[1.0, -3.0, 0.5]);
        let cfg = AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() };
        let mut st = AdamState::new();
        adamw_step(&mut ps, &grads(&[0.0; 3]), &mut st, 0.5, &cfg).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[0.75, -2.25, 0.375]);
        adamw_step(&mut ps, &grads(&[0.0; 3]), &mut st, 0.5, &cfg).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[0.5625, -1.6875, 0.28125]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut ps = store(&[0.0, 0.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = AdamState::new();
        let lr = 1e-3;
        for _ in 0..200 {
            let before = ps.get("w").unwrap().data().to_vec();
            adamw_step(&mut ps, &grads(&[0.3, -2.0]), &mut st, lr, &cfg).unwrap();
            let after = ps.get("w").unwrap().data();
            for (i, s) in [-1.0, 1.0].iter().enumerate() {
                let step = after[i] - before[i];
                assert!((step - s * lr).abs() < lr * 1e-6, "{step}");
            }
        }
    }

    #[test]
    fn missing_gradients_skip_decay_and_bad_ones_abort() {
        let mut ps = store(&[1.0]);
        ps.insert("frozen", Tensor4::full([1, 1, 1, 1], 2.0)).unwrap();
        let mut st = AdamState::new();
        adamw_step(&mut ps, &grads(&[0.0]), &mut st, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(ps.get("frozen").unwrap().data(), &[2.0]);
        assert_eq!(st.steps("frozen"), 0);
        let before = ps.clone();
        let err = adamw_step(&mut ps, &grads(&[f64::NAN]), &mut st, 0.1, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(ps, before);
    }

    proptest! {
        #[test]
        fn schedule_is_nonincreasing(lr0 in 1e-6f64..1.0, max in 1u64..500, power in 0.1f64..3.0) {
            let mut prev = poly_lr(0, lr0, max, power);
            prop_assert_eq!(prev, lr0);
            for it in 1..=max {
                let lr = poly_lr(it, lr0, max, power);
                prop_assert!(lr <= prev && lr >= 0.0);
                prev = lr;
            }
            prop_assert_eq!(prev, 0.0);
        }

        #[test]
        fn first_step_has_magnitude_lr(g in prop::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-5f64..1e-1) {
            prop_assume!(g.iter().all(|v| v.abs() > 1e-3));
            let mut ps = store(&vec![0.0; g.len()]);
            let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
            adamw_step(&mut ps, &grads(&g), &mut AdamState::new(), lr, &cfg).unwrap();
            for (p, gi) in ps.get("w").unwrap().data().iter().zip(&g) {
                prop_assert!((p + lr * gi.signum()).abs() < lr * 1e-4);
            }
        }
    }
}
