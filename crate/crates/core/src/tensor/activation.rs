use super::{Real, Result, Tensor, TensorError};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU with a cached `x > 0` mask (subgradient 0 at 0).
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        relu(x)
    }

    pub fn backward<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or(TensorError::NoCache)?;
        if mask.len() != grad_out.numel() {
            return Err(TensorError::Shape("relu gradient size mismatch".into()));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Tensor::from_vec(grad_out.shape(), data)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Row-wise softmax over the last axis of a `[B, N]` tensor, with
/// max-subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(2, "softmax")?;
    let n = x.dim(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Gradient of softmax given its output `p` and upstream gradient `g`:
/// `p * (g - <g, p>)` per row.
pub fn softmax_backward<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    g.expect_shape(p.shape())?;
    let n = p.dim(1);
    let mut out = Tensor::zeros(p.shape());
    for ((pr, gr), or) in p
        .data()
        .chunks(n)
        .zip(g.data().chunks(n))
        .zip(out.data_mut().chunks_mut(n))
    {
        let mut dot = T::zero();
        for (&pv, &gv) in pr.iter().zip(gr) {
            dot += pv * gv;
        }
        for ((o, &pv), &gv) in or.iter_mut().zip(pr).zip(gr) {
            *o = pv * (gv - dot);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_values_and_mask() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut r = Relu::new();
        let y = r.forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&y), y);
        let g = r.backward(&Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 2f64.ln(), 0.0, 0.0]).unwrap();
        let p = softmax_rows(&x).unwrap();
        for v in &p.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_on_simplex(v in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
            let n = v.len();
            let x = Tensor::from_vec(&[1, n], v.clone()).unwrap();
            let p = softmax_rows(&x).unwrap();
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.data().iter().all(|&q| q > 0.0));
            let shifted = softmax_rows(&x.map(|a| a + shift)).unwrap();
            prop_assert!(p.max_abs_diff(&shifted) < 1e-9);
        }
    }
}
