use std::collections::BTreeMap;

use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Anything holding named tensors that an optimizer can update in place.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |k, t| {
            out.insert(k.to_string(), t.clone());
        });
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

pub type GradMap = BTreeMap<String, Tensor>;

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub precision: Precision,
}

impl Sgd {
    pub fn step(&mut self, params: &mut dyn Parameters, grads: &GradMap, lr: f64) -> Result<()> {
        let mut err = None;
        let precision = self.precision;
        params.visit_mut(&mut |name, t| {
            let Some(g) = grads.get(name) else { return };
            if g.shape() != t.shape() {
                err = Some(Error::shape("sgd", t.shape(), g.shape()));
                return;
            }
            for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                *p = precision.round(*p - lr * gv);
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            precision: Precision::F64,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every parameter that has an entry in `grads`; all others stay bit-identical.
    pub fn step(&mut self, params: &mut dyn Parameters, grads: &GradMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd, precision) = (self.beta1, self.beta2, self.eps, self.weight_decay, self.precision);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut err = None;
        params.visit_mut(&mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            if g.shape() != p.shape() {
                err = Some(Error::shape("adamw", p.shape(), g.shape()));
                return;
            }
            let m = first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let decayed = *pv * (1.0 - lr * wd);
                *pv = precision.round(decayed - lr * mhat / (vhat.sqrt() + eps));
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor);

    impl Parameters for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = One(Tensor::from_vec(vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.9, 0.95, 0.0);
        for _ in 0..500 {
            let g: GradMap = [("w".to_string(), p.0.scale(2.0))].into();
            opt.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p.0.sq_norm() < 1e-4, "{:?}", p.0);
    }

    #[test]
    fn params_without_grads_are_untouched() {
        let mut p = One(Tensor::from_vec(vec![0.1, 0.2]));
        let before = p.0.clone();
        let mut opt = AdamW::new(0.9, 0.95, 0.1);
        opt.step(&mut p, &GradMap::new(), 1e-3).unwrap();
        assert!(p.0.bit_eq(&before));
    }

    #[test]
    fn sgd_step() {
        let mut p = One(Tensor::from_vec(vec![1.0]));
        let g: GradMap = [("w".to_string(), Tensor::from_vec(vec![0.5]))].into();
        Sgd { precision: Precision::F64 }.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.0.item(), 0.95);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g: GradMap = [("a".to_string(), Tensor::from_vec(vec![3.0, 4.0]))].into();
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g["a"].sq_norm().sqrt() - 1.0).abs() < 1e-9);
    }
}
