use super::{Real, Result, Tensor, TensorError};

/// Mean cross-entropy of a batch and its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    pub loss: T,
    /// `(softmax(z) - onehot(y)) / B`
    pub grad: Tensor<T>,
}

pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    logits.expect_rank(2, "cross entropy")?;
    let (b, c) = (logits.dim(0), logits.dim(1));
    if labels.len() != b {
        return Err(TensorError::Shape(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(TensorError::Label { label, classes: c });
    }
    let inv_b = T::one() / T::cast(b as f64);
    let mut grad = Tensor::zeros(&[b, c]);
    let mut total = T::zero();
    for ((row, g), &y) in logits.data().chunks(c).zip(grad.data_mut().chunks_mut(c)).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[y];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok(CrossEntropy {
        loss: total * inv_b,
        grad,
    })
}
