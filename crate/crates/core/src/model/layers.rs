use crate::tensor::{
    join, softmax_backward, softmax_rows, AdaptiveAvgPool2d, BatchNorm, Conv2d, Linear, MaxPool2d, Mode, Param,
    ParamRng, Parameters, Real, Relu, Result, Tensor,
};

fn conv_params<T: Real>(c: &Conv2d<T>) -> usize {
    c.weight.numel() + c.bias.as_ref().map_or(0, |b| b.numel())
}

fn bn_params<T: Real>(b: &BatchNorm<T>) -> usize {
    b.gamma.numel() + b.beta.numel()
}

fn linear_params<T: Real>(l: &Linear<T>) -> usize {
    l.weight.numel() + l.bias.numel()
}

/// Front-end block: 7x7/2 convolution, batch norm, ReLU, 3x3/2 max pool.
#[derive(Debug, Clone)]
pub struct Expert<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    relu: Relu,
    pool: MaxPool2d,
}

impl<T: Real> Expert<T> {
    pub fn new(channels: usize, rng: &mut ParamRng) -> Self {
        Expert {
            conv: Conv2d::new(1, channels, 7, 2, 3, false, rng),
            bn: BatchNorm::new(channels),
            relu: Relu::new(),
            pool: MaxPool2d::new(3, 2, 1),
        }
    }

    pub fn num_params(&self) -> usize {
        conv_params(&self.conv) + bn_params(&self.bn)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv.forward(x)?;
        let h = self.bn.forward(&h, mode)?;
        let h = self.relu.forward(&h);
        self.pool.forward(&h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv.infer(x)?;
        let h = self.bn.infer(&h)?;
        self.pool.infer(&crate::tensor::relu(&h))
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.pool.backward(g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    pub fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
        self.pool.clear_cache();
    }
}

impl<T: Real> Parameters<T> for Expert<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
        self.bn.visit_params(&join(prefix, "bn"), out);
    }

    fn visit_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn.visit_buffers(&join(prefix, "bn"), out);
    }
}

/// Gating MLP: linear, batch norm, ReLU, linear, softmax over experts.
#[derive(Debug, Clone)]
pub struct Gate<T> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm<T>,
    relu: Relu,
    pub fc2: Linear<T>,
    probs: Option<Tensor<T>>,
}

impl<T: Real> Gate<T> {
    pub fn new(in_features: usize, hidden: usize, experts: usize, rng: &mut ParamRng) -> Self {
        Gate {
            fc1: Linear::new(in_features, hidden, rng),
            bn: BatchNorm::new(hidden),
            relu: Relu::new(),
            fc2: Linear::new(hidden, experts, rng),
            probs: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn experts(&self) -> usize {
        self.fc2.out_features()
    }

    pub fn num_params(&self) -> usize {
        linear_params(&self.fc1) + bn_params(&self.bn) + linear_params(&self.fc2)
    }

    /// Returns `[B, M]` mixing weights.
    pub fn forward(&mut self, s: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.fc1.forward(s)?;
        let h = self.bn.forward(&h, mode)?;
        let h = self.relu.forward(&h);
        let p = softmax_rows(&self.fc2.forward(&h)?)?;
        self.probs = Some(p.clone());
        Ok(p)
    }

    pub fn infer(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.infer(s)?;
        let h = crate::tensor::relu(&self.bn.infer(&h)?);
        softmax_rows(&self.fc2.infer(&h)?)
    }

    /// Backpropagates the gradient w.r.t. the mixing weights. The gradient
    /// w.r.t. the gating feature is not needed and is dropped.
    pub fn backward(&mut self, dw: &Tensor<T>) -> Result<()> {
        let p = self.probs.as_ref().ok_or(crate::tensor::TensorError::NoCache)?;
        let g = softmax_backward(p, dw)?;
        let g = self.fc2.backward(&g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.fc1.backward(&g)?;
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.fc1.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
        self.fc2.clear_cache();
        self.probs = None;
    }
}

impl<T: Real> Parameters<T> for Gate<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.fc1.visit_params(&join(prefix, "fc1"), out);
        self.bn.visit_params(&join(prefix, "bn"), out);
        self.fc2.visit_params(&join(prefix, "fc2"), out);
    }

    fn visit_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn.visit_buffers(&join(prefix, "bn"), out);
    }
}

/// Residual block: two 3x3 convolutions with batch norm, a skip path
/// (identity, or 1x1 conv + batch norm when the shape changes) and a ReLU
/// after the addition.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    relu1: Relu,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub downsample: Option<(Conv2d<T>, BatchNorm<T>)>,
    relu_out: Relu,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ParamRng) -> Self {
        let conv1 = Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng);
        let conv2 = Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm::new(out_ch),
            )
        });
        BasicBlock {
            conv1,
            bn1: BatchNorm::new(out_ch),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm::new(out_ch),
            downsample,
            relu_out: Relu::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        conv_params(&self.conv1)
            + bn_params(&self.bn1)
            + conv_params(&self.conv2)
            + bn_params(&self.bn2)
            + self
                .downsample
                .as_ref()
                .map_or(0, |(c, b)| conv_params(c) + bn_params(b))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x)?;
        let h = self.relu1.forward(&self.bn1.forward(&h, mode)?);
        let h = self.conv2.forward(&h)?;
        let mut h = self.bn2.forward(&h, mode)?;
        match &mut self.downsample {
            Some((c, b)) => {
                let s = c.forward(x)?;
                h.add_assign(&b.forward(&s, mode)?)?;
            }
            None => h.add_assign(x)?,
        }
        Ok(self.relu_out.forward(&h))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.infer(x)?;
        let h = crate::tensor::relu(&self.bn1.infer(&h)?);
        let mut h = self.bn2.infer(&self.conv2.infer(&h)?)?;
        match &self.downsample {
            Some((c, b)) => h.add_assign(&b.infer(&c.infer(x)?)?)?,
            None => h.add_assign(x)?,
        }
        Ok(crate::tensor::relu(&h))
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu_out.backward(g)?;
        let gh = self.bn2.backward(&g)?;
        let gh = self.conv2.backward(&gh)?;
        let gh = self.relu1.backward(&gh)?;
        let gh = self.bn1.backward(&gh)?;
        let mut dx = self.conv1.backward(&gh)?;
        match &mut self.downsample {
            Some((c, b)) => {
                let gs = b.backward(&g)?;
                dx.add_assign(&c.backward(&gs)?)?;
            }
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.relu1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        if let Some((c, b)) = &mut self.downsample {
            c.clear_cache();
            b.clear_cache();
        }
        self.relu_out.clear_cache();
    }
}

impl<T: Real> Parameters<T> for BasicBlock<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.bn1.visit_params(&join(prefix, "bn1"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        self.bn2.visit_params(&join(prefix, "bn2"), out);
        if let Some((c, b)) = &mut self.downsample {
            c.visit_params(&join(prefix, "downsample.0"), out);
            b.visit_params(&join(prefix, "downsample.1"), out);
        }
    }

    fn visit_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), out);
        self.bn2.visit_buffers(&join(prefix, "bn2"), out);
        if let Some((_, b)) = &mut self.downsample {
            b.visit_buffers(&join(prefix, "downsample.1"), out);
        }
    }
}

/// Task head: residual stages of two blocks each (stride 2 at the first
/// block of every stage but the first), global average pool, linear.
#[derive(Debug, Clone)]
pub struct Tower<T> {
    pub blocks: Vec<BasicBlock<T>>,
    pool: AdaptiveAvgPool2d,
    pub fc: Linear<T>,
    pooled_shape: Option<Vec<usize>>,
}

impl<T: Real> Tower<T> {
    /// `widths` has one entry per block.
    pub fn new(in_ch: usize, widths: &[usize], classes: usize, rng: &mut ParamRng) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i > 0 && i % 2 == 0 { 2 } else { 1 };
            blocks.push(BasicBlock::new(c, w, stride, rng));
            c = w;
        }
        Tower {
            blocks,
            pool: AdaptiveAvgPool2d::new(1, 1),
            fc: Linear::new(c, classes, rng),
            pooled_shape: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.out_features()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(BasicBlock::num_params).sum::<usize>() + linear_params(&self.fc)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        let p = self.pool.forward(&h)?;
        self.pooled_shape = Some(p.shape().to_vec());
        let (n, c) = (p.dim(0), p.dim(1));
        self.fc.forward(&p.reshape(&[n, c])?)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let p = self.pool.infer(&h)?;
        let (n, c) = (p.dim(0), p.dim(1));
        self.fc.infer(&p.reshape(&[n, c])?)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.pooled_shape.clone().ok_or(crate::tensor::TensorError::NoCache)?;
        let g = self.fc.backward(g)?.reshape(&shape)?;
        let mut g = self.pool.backward(&g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        for b in &mut self.blocks {
            b.clear_cache();
        }
        self.fc.clear_cache();
        self.pool = AdaptiveAvgPool2d::new(1, 1);
        self.pooled_shape = None;
    }
}

impl<T: Real> Parameters<T> for Tower<T> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.fc.visit_params(&join(prefix, "fc"), out);
    }

    fn visit_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&join(prefix, &format!("blocks.{i}")), out);
        }
    }
}
