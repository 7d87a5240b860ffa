use super::{he_normal, join, matmul, Param, ParamRng, Parameters, Real, Result, Tensor, TensorError};

/// Fully connected layer, `y = x W^T + b` on `[B, F]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_features: usize,
    out_features: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ParamRng) -> Self {
        Linear {
            weight: Param::new(he_normal(&[out_features, in_features], in_features, rng)),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn zero_init(&mut self) {
        self.weight.value.data_mut().fill(T::zero());
        self.bias.value.data_mut().fill(T::zero());
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(2, "linear")?;
        if x.dim(1) != self.in_features {
            return Err(TensorError::Shape(format!(
                "linear expects {} features, got {}",
                self.in_features,
                x.dim(1)
            )));
        }
        let b = x.dim(0);
        let mut out = Tensor::zeros(&[b, self.out_features]);
        matmul(
            b,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            self.weight.value.data(),
            true,
            out.data_mut(),
            false,
        );
        for row in out.data_mut().chunks_mut(self.out_features) {
            for (v, &bv) in row.iter_mut().zip(self.bias.value.data()) {
                *v += bv;
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(TensorError::NoCache)?;
        let b = x.dim(0);
        grad_out.expect_shape(&[b, self.out_features])?;
        let (f, g) = (self.in_features, self.out_features);
        matmul(
            g,
            b,
            f,
            grad_out.data(),
            true,
            x.data(),
            false,
            self.weight.grad_mut(),
            true,
        );
        let gb = self.bias.grad_mut();
        for row in grad_out.data().chunks(g) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dx = Tensor::zeros(&[b, f]);
        matmul(
            b,
            g,
            f,
            grad_out.data(),
            false,
            self.weight.value.data(),
            false,
            dx.data_mut(),
            false,
        );
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
