use super::{Real, Result, Tensor, TensorError};

/// Max pooling over `[B, C, H, W]`. Padding behaves as `-inf`; ties go to
/// the lowest linear index inside the window scan.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if 2 * p > k || h + 2 * p < k || w + 2 * p < k {
            return Err(TensorError::Shape(format!("max pool k={k} p={p} invalid for {h}x{w}")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn run<T: Real>(&self, x: &Tensor<T>, argmax: Option<&mut Vec<usize>>) -> Result<Tensor<T>> {
        x.expect_rank(4, "max pool")?;
        let [b, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        let (ho, wo) = self.output_size(h, w)?;
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let mut idx = Vec::new();
        let keep = argmax.is_some();
        if keep {
            idx.reserve(b * c * ho * wo);
        }
        let (k, s, p) = (self.kernel as isize, self.stride as isize, self.padding as isize);
        let od = out.data_mut();
        for plane in 0..b * c {
            let xp = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ki in 0..k {
                        let ih = oh as isize * s - p + ki;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = ow as isize * s - p + kj;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let li = ih as usize * w + iw as usize;
                            if best_i == usize::MAX || xp[li] > best {
                                best = xp[li];
                                best_i = li;
                            }
                        }
                    }
                    od[(plane * ho + oh) * wo + ow] = best;
                    if keep {
                        idx.push(plane * h * w + best_i);
                    }
                }
            }
        }
        if let Some(a) = argmax {
            *a = idx;
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut idx = Vec::new();
        let out = self.run(x, Some(&mut idx))?;
        self.cache = Some((idx, x.shape().to_vec()));
        Ok(out)
    }

    pub fn infer<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, None)
    }

    pub fn backward<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (idx, shape) = self.cache.as_ref().ok_or(TensorError::NoCache)?;
        if grad_out.numel() != idx.len() {
            return Err(TensorError::Shape("max pool gradient size mismatch".into()));
        }
        let mut dx = Tensor::zeros(shape);
        for (&i, &g) in idx.iter().zip(grad_out.data()) {
            dx.data_mut()[i] += g;
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Adaptive average pooling to a fixed `(out_h, out_w)` grid using the
/// usual `floor(i*H/out)` .. `ceil((i+1)*H/out)` bins.
#[derive(Debug, Clone)]
pub struct AdaptiveAvgPool2d {
    out_h: usize,
    out_w: usize,
    input_shape: Option<Vec<usize>>,
}

fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        AdaptiveAvgPool2d {
            out_h,
            out_w,
            input_shape: None,
        }
    }

    pub fn infer<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank(4, "adaptive avg pool")?;
        let [b, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        if h == 0 || w == 0 {
            return Err(TensorError::Shape("adaptive avg pool on empty map".into()));
        }
        let (oh_n, ow_n) = (self.out_h, self.out_w);
        let mut out = Tensor::zeros(&[b, c, oh_n, ow_n]);
        for plane in 0..b * c {
            let xp = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oh in 0..oh_n {
                let (h0, h1) = bin(oh, h, oh_n);
                for ow in 0..ow_n {
                    let (w0, w1) = bin(ow, w, ow_n);
                    let mut acc = T::zero();
                    for ih in h0..h1 {
                        for iw in w0..w1 {
                            acc += xp[ih * w + iw];
                        }
                    }
                    let count = T::cast(((h1 - h0) * (w1 - w0)) as f64);
                    out.data_mut()[(plane * oh_n + oh) * ow_n + ow] = acc / count;
                }
            }
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or(TensorError::NoCache)?;
        let [b, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let (oh_n, ow_n) = (self.out_h, self.out_w);
        grad_out.expect_shape(&[b, c, oh_n, ow_n])?;
        let mut dx = Tensor::zeros(shape);
        for plane in 0..b * c {
            for oh in 0..oh_n {
                let (h0, h1) = bin(oh, h, oh_n);
                for ow in 0..ow_n {
                    let (w0, w1) = bin(ow, w, ow_n);
                    let count = T::cast(((h1 - h0) * (w1 - w0)) as f64);
                    let g = grad_out.data()[(plane * oh_n + oh) * ow_n + ow] / count;
                    for ih in h0..h1 {
                        for iw in w0..w1 {
                            dx.data_mut()[plane * h * w + ih * w + iw] += g;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_pool_geometry() {
        let pool = MaxPool2d::new(3, 2, 1);
        assert_eq!(pool.output_size(600, 660).unwrap(), (300, 330));
        assert_eq!(pool.output_size(32, 32).unwrap(), (16, 16));
    }

    #[test]
    fn routes_gradient_to_max_only() {
        let mut pool = MaxPool2d::new(2, 2, 0);
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5]).unwrap();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, -0.5]);
        let g = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let dx = pool.backward(&g).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut pool = MaxPool2d::new(2, 2, 0);
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 3.0);
        pool.forward(&x).unwrap();
        let dx = pool.backward(&Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padding_never_wins_on_negative_inputs() {
        let pool = MaxPool2d::new(3, 2, 1);
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], -7.0);
        assert!(pool.infer(&x).unwrap().data().iter().all(|&v| v == -7.0));
    }

    #[test]
    fn adaptive_avg_of_constant() {
        let pool = AdaptiveAvgPool2d::new(1, 1);
        let x = Tensor::<f64>::full(&[2, 3, 5, 7], 2.5);
        let y = pool.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(bin(0, 5, 3), (0, 2));
        assert_eq!(bin(1, 5, 3), (1, 4));
        assert_eq!(bin(2, 5, 3), (3, 5));
    }
}
