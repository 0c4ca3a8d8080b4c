use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers follow the module's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new<M: Module + ?Sized>(module: &M, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = module
            .parameters()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters absent from `grads` are left untouched.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &Gradients) -> Result<()> {
        let g: Vec<Option<Tensor>> = module.parameters().iter().map(|(_, p)| grads.wrt(p).cloned()).collect();
        self.apply(module, &g)
    }

    pub fn apply<M: Module + ?Sized>(&mut self, module: &mut M, grads: &[Option<Tensor>]) -> Result<()> {
        let params = module.parameters_mut();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg(format!(
                "optimizer tracks {} tensors, module has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((_, p), (m, v)), g) in params
            .into_iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(grads)
        {
            let Some(g) = g else {
                continue;
            };
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    struct Quadratic(Tensor);

    impl Module for Quadratic {
        fn parameters(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut q = Quadratic(Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap());
        let mut opt = Adam::new(&q, 0.1, 0.5, 0.999);
        let tape = Tape::new();
        let loss = tape.param(&q.0).square().sum();
        let grads = tape.backward(loss);
        opt.step(&mut q, &grads).unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((q.0.data()[0] - 0.9).abs() < 1e-6);
        assert!((q.0.data()[1] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut q = Quadratic(Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let mut opt = Adam::new(&q, 0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let tape = Tape::new();
            let loss = tape.param(&q.0).add_scalar(-2.0).square().sum();
            let grads = tape.backward(loss);
            opt.step(&mut q, &grads).unwrap();
        }
        assert!((q.0.data()[0] - 2.0).abs() < 1e-2);
    }
}
