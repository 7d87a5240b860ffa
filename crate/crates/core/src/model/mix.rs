use crate::tensor::{Real, Result, Tensor, TensorError};

fn check<T: Real>(maps: &[&Tensor<T>], w: &Tensor<T>) -> Result<(usize, usize)> {
    w.expect_rank(2, "mixing weights")?;
    let (b, m) = (w.dim(0), w.dim(1));
    if maps.len() != m || m == 0 {
        return Err(TensorError::Shape(format!(
            "{} expert maps for {m} mixing weights",
            maps.len()
        )));
    }
    let shape = maps[0].shape();
    if shape.first() != Some(&b) || maps.iter().any(|r| r.shape() != shape) {
        return Err(TensorError::Shape(format!(
            "expert maps must all be [{b}, ...] with equal shapes"
        )));
    }
    Ok((b, maps[0].numel() / b))
}

/// `out[b] = sum_j w[b, j] * maps[j][b]`, summed in expert order.
pub fn mix<T: Real>(maps: &[&Tensor<T>], w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, inner) = check(maps, w)?;
    let m = maps.len();
    let mut out = Tensor::zeros(maps[0].shape());
    let od = out.data_mut();
    for n in 0..b {
        let o = &mut od[n * inner..(n + 1) * inner];
        for (j, r) in maps.iter().enumerate() {
            let wj = w.data()[n * m + j];
            for (ov, &rv) in o.iter_mut().zip(&r.data()[n * inner..(n + 1) * inner]) {
                *ov += wj * rv;
            }
        }
    }
    Ok(out)
}

/// Backward of [`mix`]. Adds `w[b, j] * g[b]` into `d_maps[j]` and returns
/// the gradient w.r.t. the weights, `dw[b, j] = <g[b], maps[j][b]>`.
pub fn mix_backward<T: Real>(
    maps: &[&Tensor<T>],
    w: &Tensor<T>,
    g: &Tensor<T>,
    d_maps: &mut [&mut Tensor<T>],
) -> Result<Tensor<T>> {
    let (b, inner) = check(maps, w)?;
    g.expect_shape(maps[0].shape())?;
    if d_maps.len() != maps.len() || d_maps.iter().any(|d| d.shape() != g.shape()) {
        return Err(TensorError::Shape("mix gradient buffers do not match maps".into()));
    }
    let m = maps.len();
    let mut dw = Tensor::zeros(&[b, m]);
    for n in 0..b {
        let gn = &g.data()[n * inner..(n + 1) * inner];
        for j in 0..m {
            let wj = w.data()[n * m + j];
            let rn = &maps[j].data()[n * inner..(n + 1) * inner];
            let mut dot = T::zero();
            for (&gv, &rv) in gn.iter().zip(rn) {
                dot += gv * rv;
            }
            dw.data_mut()[n * m + j] = dot;
            for (dv, &gv) in d_maps[j].data_mut()[n * inner..(n + 1) * inner].iter_mut().zip(gn) {
                *dv += wj * gv;
            }
        }
    }
    Ok(dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn half_and_half() {
        let r1 = Tensor::full(&[1, 2, 2, 2], 2.0);
        let r2 = Tensor::full(&[1, 2, 2, 2], 4.0);
        let out = mix(&[&r1, &r2], &t(&[1, 2], vec![0.5, 0.5])).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn one_hot_selects_exactly() {
        let r: Vec<Tensor<f64>> = (0..3)
            .map(|j| t(&[2, 3], (0..6).map(|i| (i * 7 + j * 13) as f64 * 0.123 - 1.7).collect()))
            .collect();
        let refs: Vec<&Tensor<f64>> = r.iter().collect();
        let w = t(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let out = mix(&refs, &w).unwrap();
        assert_eq!(&out.data()[..3], &r[1].data()[..3]);
        assert_eq!(&out.data()[3..], &r[2].data()[3..]);
    }

    #[test]
    fn shape_errors() {
        let r = Tensor::<f64>::zeros(&[2, 3]);
        assert!(mix(&[&r], &Tensor::zeros(&[2, 2])).is_err());
        assert!(mix(&[&r], &Tensor::zeros(&[3, 1])).is_err());
        let q = Tensor::<f64>::zeros(&[2, 4]);
        assert!(mix(&[&r, &q], &Tensor::zeros(&[2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn uniform_weights_average(seed in any::<u64>(), m in 1usize..5) {
            let mut rng = crate::tensor::ParamRng::new(seed, 0);
            let maps: Vec<Tensor<f64>> = (0..m)
                .map(|_| t(&[2, 3, 4], (0..24).map(|_| rng.normal()).collect()))
                .collect();
            let refs: Vec<&Tensor<f64>> = maps.iter().collect();
            let w = Tensor::full(&[2, m], 1.0 / m as f64);
            let out = mix(&refs, &w).unwrap();
            for i in 0..24 {
                let avg = maps.iter().map(|r| r.data()[i]).sum::<f64>() / m as f64;
                prop_assert!((out.data()[i] - avg).abs() < 1e-12);
            }
        }

        #[test]
        fn backward_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = crate::tensor::ParamRng::new(seed, 1);
            let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };
            let maps = [t(&[2, 5], v(10)), t(&[2, 5], v(10))];
            let w = t(&[2, 2], v(4));
            let g = t(&[2, 5], v(10));
            let refs: Vec<&Tensor<f64>> = maps.iter().collect();
            let mut d0 = Tensor::zeros(&[2, 5]);
            let mut d1 = Tensor::zeros(&[2, 5]);
            let dw = mix_backward(&refs, &w, &g, &mut [&mut d0, &mut d1]).unwrap();
            // mix is bilinear, so <g, mix> is exactly linear in each argument
            let obj = |maps: &[Tensor<f64>], w: &Tensor<f64>| -> f64 {
                let refs: Vec<&Tensor<f64>> = maps.iter().collect();
                mix(&refs, w).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let rep = crate::tensor::gradcheck::grad_check(
                |x| obj(&maps, &t(&[2, 2], x.to_vec())),
                w.data(),
                dw.data(),
                1e-5,
            ).unwrap();
            prop_assert!(rep.passes(1e-7));
            let rep = crate::tensor::gradcheck::grad_check(
                |x| obj(&[t(&[2, 5], x.to_vec()), maps[1].clone()], &w),
                maps[0].data(),
                d0.data(),
                1e-5,
            ).unwrap();
            prop_assert!(rep.passes(1e-7));
            prop_assert!(d1.data().iter().all(|v| v.is_finite()));
        }
    }
}
