use crate::layers::Param;
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are matched to parameters by
/// position, so callers must pass parameters in the same order every step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.moments.len() != params.len() {
            self.moments =
                params.iter().map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.value.data().iter().map(|w| 2.0 * w).collect();
            p.grad = Tensor::from_vec(&[2], g).unwrap();
            opt.step(vec![&mut p]);
        }
        assert!(p.value.data().iter().all(|w| w.abs() < 1e-2));
    }
}
