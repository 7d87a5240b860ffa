use super::{he_normal, join, matmul, Param, ParamRng, Parameters, Real, Result, Tensor, TensorError};

/// 2-D convolution over `[B, Cin, H, W]` via im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    input_shape: [usize; 4],
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ParamRng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng));
        Conv2d {
            weight,
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Spatial output size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(TensorError::Shape(format!(
                "conv kernel {k} larger than padded input {h}x{w} (padding {p})"
            )));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        x.expect_rank(4, "conv2d")?;
        let s = x.shape();
        if s[1] != self.in_channels {
            return Err(TensorError::Shape(format!(
                "conv2d expects {} input channels, got {}",
                self.in_channels, s[1]
            )));
        }
        let (ho, wo) = self.output_size(s[2], s[3])?;
        Ok(Geometry {
            cin: s[1],
            h: s[2],
            w: s[3],
            ho,
            wo,
        })
    }

    fn im2col(&self, g: &Geometry, x: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = g.ho * g.wo;
        for c in 0..g.cin {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oh in 0..g.ho {
                        let ih = (oh * s + ki) as isize - p as isize;
                        let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                        if ih < 0 || ih >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * s + kj) as isize - p as isize;
                            *d = if iw < 0 || iw >= g.w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, cols: &[T], dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = g.ho * g.wo;
        for c in 0..g.cin {
            let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oh in 0..g.ho {
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst = &mut dxc[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * s + kj) as isize - p as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] += row[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<T>, mut keep: Option<&mut Vec<T>>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let b = x.dim(0);
        let kk = g.cin * self.kernel * self.kernel;
        let plane = g.ho * g.wo;
        let mut out = Tensor::zeros(&[b, self.out_channels, g.ho, g.wo]);
        let mut scratch = vec![T::zero(); kk * plane];
        if let Some(cols) = keep.as_deref_mut() {
            cols.clear();
            cols.resize(b * kk * plane, T::zero());
        }
        let in_stride = g.cin * g.h * g.w;
        let out_stride = self.out_channels * plane;
        for n in 0..b {
            let cols: &mut [T] = match keep.as_deref_mut() {
                Some(all) => &mut all[n * kk * plane..(n + 1) * kk * plane],
                None => &mut scratch,
            };
            self.im2col(&g, &x.data()[n * in_stride..(n + 1) * in_stride], cols);
            let y = &mut out.data_mut()[n * out_stride..(n + 1) * out_stride];
            matmul(
                self.out_channels,
                kk,
                plane,
                self.weight.value.data(),
                false,
                cols,
                false,
                y,
                false,
            );
            if let Some(bias) = &self.bias {
                for (co, &bv) in bias.value.data().iter().enumerate() {
                    for v in &mut y[co * plane..(co + 1) * plane] {
                        *v += bv;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cols = self.cache.take().map(|c| c.cols).unwrap_or_default();
        let out = self.run(x, Some(&mut cols))?;
        let s = x.shape();
        self.cache = Some(ConvCache {
            cols,
            input_shape: [s[0], s[1], s[2], s[3]],
        });
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, None)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(TensorError::NoCache)?;
        let [b, cin, h, w] = cache.input_shape;
        let (ho, wo) = self.output_size(h, w)?;
        grad_out.expect_shape(&[b, self.out_channels, ho, wo])?;
        let g = Geometry { cin, h, w, ho, wo };
        let kk = cin * self.kernel * self.kernel;
        let plane = ho * wo;
        let out_stride = self.out_channels * plane;
        let in_stride = cin * h * w;
        let mut dx = Tensor::zeros(&[b, cin, h, w]);
        let mut dcols = vec![T::zero(); kk * plane];
        for n in 0..b {
            let gy = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
            let cols = &cache.cols[n * kk * plane..(n + 1) * kk * plane];
            matmul(
                self.out_channels,
                plane,
                kk,
                gy,
                false,
                cols,
                true,
                self.weight.grad_mut(),
                true,
            );
            if let Some(bias) = &mut self.bias {
                let gb = bias.grad_mut();
                for (co, gbv) in gb.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &v in &gy[co * plane..(co + 1) * plane] {
                        acc += v;
                    }
                    *gbv += acc;
                }
            }
            matmul(
                kk,
                self.out_channels,
                plane,
                self.weight.value.data(),
                true,
                gy,
                false,
                &mut dcols,
                false,
            );
            self.col2im(&g, &dcols, &mut dx.data_mut()[n * in_stride..(n + 1) * in_stride]);
        }
        self.cache = Some(cache);
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, s: usize, p: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        for n in 0..b {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * s + ki) as isize - p as isize;
                                    let iw = (ow * s + kj) as isize - p as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.data()[((n * cin + ci) * h + ih as usize) * wd + iw as usize]
                                            * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 11) as f64) - 5.0).collect()).unwrap()
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ParamRng::new(3, 0);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut rng);
        conv.bias.as_mut().unwrap().value = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = ramp(&[2, 2, 7, 6]);
        let y = conv.forward(&x).unwrap();
        let bias = conv.bias.as_ref().unwrap().value.data().to_vec();
        let expect = direct_conv(&x, &conv.weight.value, Some(&bias), 2, 1);
        assert_eq!(y.shape(), expect.shape());
        assert!(y.max_abs_diff(&expect) < 1e-12);
        assert_eq!(conv.infer(&x).unwrap(), y);
    }

    #[test]
    fn output_size_formula() {
        let mut rng = ParamRng::new(0, 0);
        let conv = Conv2d::<f32>::new(1, 64, 7, 2, 3, false, &mut rng);
        assert_eq!(conv.output_size(1199, 1319).unwrap(), (600, 660));
        assert_eq!(conv.output_size(64, 64).unwrap(), (32, 32));
        let big = Conv2d::<f32>::new(1, 1, 7, 1, 0, false, &mut rng);
        assert!(big.output_size(5, 9).is_err());
    }

    #[test]
    fn identity_1x1() {
        let mut rng = ParamRng::new(0, 0);
        let mut conv = Conv2d::<f64>::new(3, 3, 1, 1, 0, true, &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        conv.weight.value = w;
        let x = ramp(&[2, 3, 4, 5]);
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ParamRng::new(9, 0);
        let conv = Conv2d::<f64>::new(2, 4, 3, 1, 1, false, &mut rng);
        let x = ramp(&[1, 2, 5, 5]);
        let y = conv.infer(&x).unwrap();
        let y3 = conv.infer(&x.scale(3.0)).unwrap();
        assert!(y.scale(3.0).max_abs_diff(&y3) < 1e-12);
    }

    #[test]
    fn rejects_wrong_channels() {
        let mut rng = ParamRng::new(0, 0);
        let conv = Conv2d::<f64>::new(2, 4, 3, 1, 1, false, &mut rng);
        assert!(matches!(conv.infer(&ramp(&[1, 3, 5, 5])), Err(TensorError::Shape(_))));
    }
}
