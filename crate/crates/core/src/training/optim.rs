use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Parameter update from a dense gradient list aligned with the store order.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()>;
}

fn check(store: &ParamStore, grads: &[Tensor]) -> Result<()> {
    ensure!(
        grads.len() == store.len(),
        Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        ))
    );
    for ((_, name, p), g) in store.iter().zip(grads) {
        ensure!(
            p.shape() == g.shape(),
            Error::Contract(format!("gradient shape {:?} for {name} {:?}", g.shape(), p.shape()))
        );
    }
    Ok(())
}

pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check(store, grads)?;
        if self.lr == 0.0 {
            return Ok(());
        }
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            for (p, &d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= self.lr * d;
            }
        }
        Ok(())
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check(store, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, (id, g)) in ids.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let d = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                if self.lr != 0.0 {
                    p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

pub fn make_optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd { lr }),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        s.add("b", Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        s
    }

    fn grads() -> Vec<Tensor> {
        vec![
            Tensor::new(&[2], vec![0.5, -1.0]).unwrap(),
            Tensor::new(&[1], vec![2.0]).unwrap(),
        ]
    }

    #[test]
    fn zero_lr_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = store();
            let mut opt = make_optimizer(kind, 0.0);
            opt.step(&mut s, &grads()).unwrap();
            opt.step(&mut s, &grads()).unwrap();
            assert_eq!(s, store());
        }
    }

    #[test]
    fn sgd_step() {
        let mut s = store();
        Sgd { lr: 0.1 }.step(&mut s, &grads()).unwrap();
        assert_eq!(s.get(s.id("a").unwrap()).data(), &[1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut s = store();
        Adam::new(0.01).step(&mut s, &grads()).unwrap();
        let a = s.get(s.id("a").unwrap()).data();
        assert!((a[0] - 0.99).abs() < 1e-9);
        assert!((a[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut s = store();
        assert!(Sgd { lr: 0.1 }.step(&mut s, &grads()[..1]).is_err());
    }
}
