use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f32, beta1: f32, beta2: f32) -> Self {
        let zeros = || -> Vec<Tensor<f32>> {
            params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).shape().to_vec()))
                .collect()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor<f32>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr / bc1;
        for ((id, g), (m, v)) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let w = params.get_mut(id);
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *wi -= step_size * *mi / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new([2], vec![1.0, -1.0]));
        let mut adam = Adam::new(&p, 0.1, 0.5, 0.9);
        adam.update(&mut p, &[Tensor::new([2], vec![3.0, -0.5])]);
        let w = p.get(p.id("w").unwrap()).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new([2], vec![0.25, 4.0]));
        let before = p.clone();
        let mut adam = Adam::new(&p, 2e-4, 0.5, 0.9);
        adam.update(&mut p, &[Tensor::zeros([2])]);
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::new([1], vec![5.0]));
        let mut adam = Adam::new(&p, 0.1, 0.5, 0.9);
        for _ in 0..500 {
            let w = p.get(id).data()[0];
            adam.update(&mut p, &[Tensor::new([1], vec![2.0 * (w - 1.0)])]);
        }
        assert!((p.get(id).data()[0] - 1.0).abs() < 1e-2);
    }
}
