//! AdamW with bias correction and optional global-norm gradient clipping.

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay. Zero by default: the loss already carries an
    /// explicit L2 term.
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// First and second moment buffers, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Ok(AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads` is indexed by parameter id; `None` means the
    /// parameter did not take part in the loss and counts as a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<StepStats> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape("adamw_step", &[store.len()], &[grads.len()]));
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != store.value(id).shape() || self.m[id].len() != g.numel() {
                    return Err(Error::shape("adamw_step", store.value(id).shape(), g.shape()));
                }
            }
        }
        let grad_norm = global_norm(grads);
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.ids() {
            let value = store.value_mut(id).data_mut();
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let g = grads[id].as_ref().map(|g| g.data());
            for i in 0..value.len() {
                let gi = g.map_or(0.0, |g| g[i] * scale);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[i]);
            }
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamKind, Tape};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x), ParamKind::Weight);
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
        opt.step(&mut store, &[Some(Tensor::scalar(1.0))]).unwrap();
        let expect = -5e-5 / (1.0 + 1e-6);
        assert!((store.value(0).item() - expect).abs() < 1e-18);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut store = scalar_store(0.7);
        let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
        for _ in 0..10 {
            opt.step(&mut store, &[Some(Tensor::scalar(0.0))]).unwrap();
            opt.step(&mut store, &[None]).unwrap();
        }
        assert_eq!(store.value(0).item(), 0.7);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = scalar_store(0.0);
        store.add("y", Tensor::scalar(0.0), ParamKind::Weight);
        let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
        let stats = opt
            .step(&mut store, &[Some(Tensor::scalar(3.0)), Some(Tensor::scalar(4.0))])
            .unwrap();
        assert_eq!(stats.grad_norm, 5.0);
        assert!(stats.clipped);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
        assert!(opt.step(&mut store, &[Some(Tensor::zeros(&[2]))]).is_err());
        assert!(opt.step(&mut store, &[]).is_err());
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(x, y) = x² + 10 y²
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), ParamKind::Weight);
        let cfg = AdamWConfig {
            lr: 0.01,
            clip_norm: None,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&store, cfg).unwrap();
        let loss_and_grad = |store: &ParamStore| {
            let mut tape = Tape::with_params(store);
            let w = tape.param(0);
            let c = tape.constant(Tensor::new(vec![2], vec![1.0, 10.0]).unwrap());
            let sq = tape.mul(w, w).unwrap();
            let l = tape.mul(sq, c).unwrap();
            let l = tape.sum_all(l);
            tape.backward(l).unwrap();
            (tape.value(l).item(), tape.param_grads())
        };
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (l, g) = loss_and_grad(&store);
            losses.push(l);
            opt.step(&mut store, &g).unwrap();
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
        assert!(losses[49] < 0.5 * losses[0]);
    }

    #[test]
    fn l2_term_alone_shrinks_weights() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), ParamKind::Weight);
        let before = store.value(0).norm();
        let mut tape = Tape::with_params(&store);
        let w = tape.param(0);
        let reg = tape.frobenius_sq(&[w]).unwrap();
        let l = tape.scale(reg, 0.005);
        tape.backward(l).unwrap();
        let grads = tape.param_grads();
        drop(tape);
        let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
        opt.step(&mut store, &grads).unwrap();
        assert!(store.value(0).norm() < before);
    }
}
