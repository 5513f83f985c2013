use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates plus the number of updates taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

/// Warmup-then-inverse-square-root schedule:
/// `d_model^-0.5 * min(t^-0.5, t * warmup^-1.5)` for step `t >= 1`.
pub fn noam_lr(d_model: usize, step: u64, warmup: u64) -> f64 {
    let t = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * t.powf(-0.5).min(t * w.powf(-1.5))
}

/// One Adam update with bias correction. Every gradient must be finite;
/// otherwise nothing is changed and an error names the tensor.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::invalid(
                "adam_step",
                format!("non-finite gradient for {name}"),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        if state.m.get(name).is_none() {
            state.m.insert(name, Tensor::zeros(g.shape()));
            state.v.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted").data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("inserted").data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.m.get(name).expect("inserted").data();
        let v = state.v.get(name).expect("inserted").data();
        let p = params.get_mut(name).expect("checked").data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let w = 400;
        let peak = noam_lr(64, w, w);
        assert!((peak - 64f64.powf(-0.5) * (w as f64).powf(-0.5)).abs() < 1e-18);
        for t in 1..w {
            assert!(noam_lr(64, t, w) < noam_lr(64, t + 1, w));
        }
        assert!(noam_lr(64, w + 1, w) < peak);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(&[1.0, 1.0, 1.0]));
        let mut g = ParamStore::new();
        g.insert("w", Tensor::vector(&[0.5, -3.0, 0.0]));
        let mut st = AdamState::default();
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] - 1.1).abs() < 1e-8);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(&[1.0]));
        let mut g = ParamStore::new();
        g.insert("w", Tensor::vector(&[f64::NAN]));
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).is_err());
        assert_eq!(st.t, 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }
}
