use super::{join, Mode, Param, Parameters, Real, Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over `[B, C, H, W]` (per channel) or `[B, F]`
/// (per feature).
///
/// Train mode normalizes with biased batch statistics and updates the running
/// estimates (`running = (1 - momentum) * running + momentum * batch`, with
/// the unbiased batch variance). Eval mode uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    running_mean: Option<Tensor<T>>,
    running_var: Option<Tensor<T>>,
    channels: usize,
    eps: f64,
    momentum: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    mode: Mode,
}

/// `(batch, channels, spatial)` view of a 2-D or 4-D input.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, f] => Ok((b, f, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(TensorError::Shape(format!(
            "batch norm expects rank 2 or 4, got {shape:?}"
        ))),
    }
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let mut bn = Self::uninitialized(channels);
        bn.running_mean = Some(Tensor::zeros(&[channels]));
        bn.running_var = Some(Tensor::full(&[channels], T::one()));
        bn
    }

    /// A layer without running statistics; eval mode fails until a train
    /// pass or [`BatchNorm::set_running_stats`] provides them.
    pub fn uninitialized(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::zeros(&[channels]),
            running_mean: None,
            running_var: None,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn running_stats(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.running_mean.as_ref()?, self.running_var.as_ref()?))
    }

    pub fn set_running_stats(&mut self, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        mean.expect_shape(&[self.channels])?;
        var.expect_shape(&[self.channels])?;
        if var.data().iter().any(|&v| !(v > T::zero())) {
            return Err(TensorError::Shape("running variance must be positive".into()));
        }
        self.running_mean = Some(mean);
        self.running_var = Some(var);
        Ok(())
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, s) = layout(x.shape())?;
        if c != self.channels {
            return Err(TensorError::Shape(format!(
                "batch norm has {} channels, input has {c}",
                self.channels
            )));
        }
        Ok((b, c, s))
    }

    fn batch_stats(x: &[T], b: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
        let n = (b * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for n_i in 0..b {
                for &v in &x[(n_i * c + ch) * s..(n_i * c + ch + 1) * s] {
                    acc += v.as_f64();
                }
            }
            let m = acc / n;
            let mut sq = 0.0;
            for n_i in 0..b {
                for &v in &x[(n_i * c + ch) * s..(n_i * c + ch + 1) * s] {
                    let d = v.as_f64() - m;
                    sq += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq / n;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[f64], inv_std: &[f64], keep_xhat: bool) -> Result<(Tensor<T>, Vec<T>)> {
        let (b, c, s) = self.check(x)?;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = if keep_xhat {
            vec![T::zero(); x.numel()]
        } else {
            Vec::new()
        };
        let g = self.gamma.value.data();
        let be = self.beta.value.data();
        for n_i in 0..b {
            for ch in 0..c {
                let m = T::cast(mean[ch]);
                let is = T::cast(inv_std[ch]);
                let base = (n_i * c + ch) * s;
                for i in base..base + s {
                    let xh = (x.data()[i] - m) * is;
                    out.data_mut()[i] = g[ch] * xh + be[ch];
                    if keep_xhat {
                        xhat[i] = xh;
                    }
                }
            }
        }
        Ok((out, xhat))
    }

    fn eval_stats(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (m, v) = self.running_stats().ok_or(TensorError::UninitializedStats)?;
        Ok((
            m.to_f64_vec(),
            v.data().iter().map(|v| 1.0 / (v.as_f64() + self.eps).sqrt()).collect(),
        ))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (b, c, s) = self.check(x)?;
        let (mean, inv_std) = match mode {
            Mode::Eval => self.eval_stats()?,
            Mode::Train => {
                let n = b * s;
                if n < 2 {
                    return Err(TensorError::TooFewValues(n));
                }
                let (mean, var) = Self::batch_stats(x.data(), b, c, s);
                let unbias = n as f64 / (n as f64 - 1.0);
                let mom = self.momentum;
                let rm = self.running_mean.get_or_insert_with(|| Tensor::zeros(&[c]));
                for (r, &m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = T::cast((1.0 - mom) * r.as_f64() + mom * m);
                }
                let rv = self.running_var.get_or_insert_with(|| Tensor::full(&[c], T::one()));
                for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = T::cast((1.0 - mom) * r.as_f64() + mom * v * unbias);
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                (mean, inv_std)
            }
        };
        let (out, xhat) = self.normalize(x, &mean, &inv_std, true)?;
        self.cache = Some(BnCache {
            xhat,
            inv_std: inv_std.into_iter().map(T::cast).collect(),
            shape: x.shape().to_vec(),
            mode,
        });
        Ok(out)
    }

    /// Eval-mode forward without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mean, inv_std) = self.eval_stats()?;
        Ok(self.normalize(x, &mean, &inv_std, false)?.0)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(TensorError::NoCache)?;
        grad_out.expect_shape(&cache.shape)?;
        let (b, c, s) = layout(&cache.shape)?;
        let n = T::cast((b * s) as f64);
        let gy = grad_out.data();
        let mut dx = Tensor::zeros(&cache.shape);
        let gamma = self.gamma.value.data().to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for n_i in 0..b {
                let base = (n_i * c + ch) * s;
                for i in base..base + s {
                    sum_g += gy[i];
                    sum_gx += gy[i] * cache.xhat[i];
                }
            }
            dbeta[ch] = sum_g;
            dgamma[ch] = sum_gx;
            let k = gamma[ch] * cache.inv_std[ch];
            for n_i in 0..b {
                let base = (n_i * c + ch) * s;
                for i in base..base + s {
                    dx.data_mut()[i] = match cache.mode {
                        Mode::Eval => k * gy[i],
                        Mode::Train => k * (gy[i] - sum_g / n - cache.xhat[i] * sum_gx / n),
                    };
                }
            }
        }
        for (g, d) in self.gamma.grad_mut().iter_mut().zip(dgamma) {
            *g += d;
        }
        for (g, d) in self.beta.grad_mut().iter_mut().zip(dbeta) {
            *g += d;
        }
        self.cache = Some(cache);
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Real> Parameters<T> for BatchNorm<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
    }

    fn visit_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        let c = self.channels;
        out.push((
            join(prefix, "running_mean"),
            self.running_mean.get_or_insert_with(|| Tensor::zeros(&[c])),
        ));
        out.push((
            join(prefix, "running_var"),
            self.running_var.get_or_insert_with(|| Tensor::full(&[c], T::one())),
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919) % 101) as f64 * 0.3 - 4.0).collect()).unwrap()
    }

    #[test]
    fn train_mode_standardizes() {
        let mut bn = BatchNorm::<f64>::new(3);
        let x = sample(&[4, 3, 5, 5]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let (mean, var) = BatchNorm::<f64>::batch_stats(y.data(), 4, 3, 25);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-6);
            assert!((var[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma.value = Tensor::zeros(&[2]);
        bn.beta.value = Tensor::full(&[2], 5.0);
        let y = bn.forward(&sample(&[3, 2]), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn eval_mode_is_affine_in_running_stats() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.set_running_stats(
            Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap(),
            Tensor::from_vec(&[2], vec![4.0, 0.25]).unwrap(),
        )
        .unwrap();
        bn.gamma.value = Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap();
        bn.beta.value = Tensor::from_vec(&[2], vec![0.5, 3.0]).unwrap();
        let x = sample(&[3, 2, 2, 2]);
        let y = bn.infer(&x).unwrap();
        let (m, v, g, b) = ([1.5, -2.0], [4.0, 0.25], [2.0, -1.0], [0.5, 3.0]);
        for (i, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
            let c = (i / 4) % 2;
            let expect = g[c] * (xv - m[c]) / (v[c] + BN_EPS).sqrt() + b[c];
            assert!((expect - yv).abs() < 1e-12);
        }
        assert_eq!(bn.forward(&x, Mode::Eval).unwrap(), y);
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        let (m, v) = bn.running_stats().unwrap();
        assert!((m.data()[0] - 0.25).abs() < 1e-12);
        // unbiased var = 5/3
        assert!((v.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let bn = BatchNorm::<f64>::uninitialized(2);
        assert_eq!(bn.infer(&sample(&[2, 2])), Err(TensorError::UninitializedStats));
        let mut bn = BatchNorm::<f64>::new(2);
        assert_eq!(
            bn.forward(&sample(&[1, 2]), Mode::Train),
            Err(TensorError::TooFewValues(1))
        );
        assert!(bn.forward(&sample(&[2, 3]), Mode::Train).is_err());
        // a uninitialized layer becomes usable after a train pass
        let mut bn = BatchNorm::<f64>::uninitialized(2);
        bn.forward(&sample(&[3, 2]), Mode::Train).unwrap();
        assert!(bn.infer(&sample(&[3, 2])).is_ok());
    }
}
