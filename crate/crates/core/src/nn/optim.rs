use super::graph::ParamStore;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl Sgd {
    pub fn with_lr(self, lr: f32) -> Self {
        Self { lr, ..self }
    }

    /// Apply one update to every parameter and clear the gradients.
    ///
    /// Fails with a state error if any parameter of a trainable store has no
    /// gradient (backward was not run, or the store was not in the graph).
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if !store.is_trainable() {
            return Ok(());
        }
        if !store.has_grads() {
            return Err(Error::state("optimizer step without gradients"));
        }
        for p in store.params_mut() {
            let g = p.grad.take().expect("checked above");
            let v = p.velocity.get_or_insert_with(|| vec![0.0; g.len()]);
            for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; one instance per parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    steps: u32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.is_trainable() {
            return Ok(());
        }
        if !store.has_grads() {
            return Err(Error::state("optimizer step without gradients"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.params_mut() {
            let g = p.grad.take().expect("checked above");
            let m = p.velocity.get_or_insert_with(|| vec![0.0; g.len()]);
            let v = p.second_moment.get_or_insert_with(|| vec![0.0; g.len()]);
            for (((w, mi), vi), gi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                let gi = gi + self.weight_decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    #[test]
    fn step_without_backward_is_state_error() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::zeros(&[2]));
        assert!(matches!(Sgd::default().step(&mut s), Err(Error::State(_))));
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(&[1], vec![1.0]).unwrap());
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut expect_w = 1.0f32;
        let mut expect_v = 0.0f32;
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&s, 0);
            let l = g.sum(w);
            g.backward(l).unwrap();
            s.accumulate_grads(&g).unwrap();
            opt.step(&mut s).unwrap();
            expect_v = 0.5 * expect_v + 1.0;
            expect_w -= 0.1 * expect_v;
            assert!((s.get(0).value.item() - expect_w).abs() < 1e-7);
            assert!(s.get(0).grad.is_none());
        }
    }

    #[test]
    fn frozen_store_is_untouched() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(&[1], vec![3.0]).unwrap());
        s.set_trainable(false);
        Sgd::default().step(&mut s).unwrap();
        assert_eq!(s.get(0).value.item(), 3.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(&[1], vec![1.0]).unwrap());
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut reached = None;
        for step in 0..50 {
            let w = s.get(0).value.item();
            s.params_mut()[0].grad = Some(vec![2.0 * w]);
            opt.step(&mut s).unwrap();
            if reached.is_none() && s.get(0).value.item().abs() < 0.1 {
                reached = Some(step);
            }
        }
        assert!(reached.is_some());
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(&[2], vec![0.5, -0.5]).unwrap());
        s.params_mut()[0].grad = Some(vec![1.0, 1.0]);
        Sgd::default().with_lr(0.0).step(&mut s).unwrap();
        assert_eq!(s.get(0).value.data(), &[0.5, -0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        s.params_mut()[0].grad = Some(vec![0.3, -5.0]);
        let mut adam = Adam::new(0.01);
        adam.step(&mut s).unwrap();
        let w = s.get(0).value.data();
        assert!((w[0] - 0.99).abs() < 1e-5 && (w[1] - 1.01).abs() < 1e-5);
        assert!(matches!(adam.step(&mut s), Err(Error::State(_))));
    }
}
