use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-12;

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    debug_assert_eq!(pred.shape(), target.shape());
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Mean binary cross-entropy on probabilities, with its gradient.
pub fn bce(prob: &Tensor, target: &Tensor) -> (f64, Tensor) {
    debug_assert_eq!(prob.shape(), target.shape());
    let n = prob.len() as f64;
    let mut grad = Tensor::zeros(prob.shape());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(prob.data()).zip(target.data()) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        *g = (p - t) / (p * (1.0 - p)) / n;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_one_half_is_ln2() {
        let p = Tensor::full(&[8, 1], 0.5);
        let (l0, _) = bce(&p, &Tensor::zeros(&[8, 1]));
        let (l1, _) = bce(&p, &Tensor::full(&[8, 1], 1.0));
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l1 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mse_of_constant_offset() {
        let (l, _) = mse(&Tensor::full(&[4], 0.5), &Tensor::full(&[4], 1.0));
        assert_eq!(l, 0.25);
    }
}
