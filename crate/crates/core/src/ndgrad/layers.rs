use rand::Rng;

use crate::error::Result;

use super::{Scalar, Tape, Tensor, Var};

/// Anything holding named trainable tensors (and optional non-trainable buffers).
///
/// Names are stable and unique; they key optimizer state and checkpoints.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

fn kaiming_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: f64, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    Linear,
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub name: String,
    /// Cout×Cin×k×k
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Square kernel `k` with "same" padding `k / 2`.
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            weight: kaiming_uniform(&[cout, cin, k, k], (cin * k * k) as f64, rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight)?;
        let b = tape.param(&format!("{}.bias", self.name), &self.bias)?;
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    /// Forward pass with the weights as constants (frozen feature extractors).
    pub fn forward_frozen(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.constant(self.weight.clone())?;
        let b = tape.constant(self.bias.clone())?;
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub name: String,
    /// Cin×Cout×k×k
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    /// Square kernel `k`, padding `k / 2`, output padding `stride − 1`, so a
    /// stride-s layer multiplies spatial extents by exactly s.
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f64 / (stride * stride) as f64;
        Self {
            name: name.to_string(),
            weight: kaiming_uniform(&[cin, cout, k, k], fan_in.max(1.0), rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding: k / 2,
            output_padding: stride - 1,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight)?;
        let b = tape.param(&format!("{}.bias", self.name), &self.bias)?;
        tape.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Batch statistics when `training` and the batch has at least two
    /// samples (running statistics are then updated); running statistics
    /// otherwise.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, training: bool) -> Result<Var> {
        let mut stats = BatchStats::default();
        let y = self.forward_collect(tape, x, training, &mut stats)?;
        for (_, mean, var) in stats.entries {
            self.absorb(&mean, &var);
        }
        Ok(y)
    }

    /// Like [`BatchNorm2d::forward`], but batch statistics are pushed onto
    /// `stats` instead of being folded into the running averages.
    pub fn forward_collect(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        training: bool,
        stats: &mut BatchStats<T>,
    ) -> Result<Var> {
        let g = tape.param(&format!("{}.gamma", self.name), &self.gamma)?;
        let b = tape.param(&format!("{}.beta", self.name), &self.beta)?;
        let batch = tape.shape(x).first().copied().unwrap_or(0);
        let eps = T::of(self.eps);
        if training && batch >= 2 {
            let (y, batch_stats) = tape.batch_norm(x, g, b, None, eps)?;
            if let Some((mean, var)) = batch_stats {
                stats.entries.push((self.name.clone(), mean, var));
            }
            Ok(y)
        } else {
            let (y, _) = tape.batch_norm(x, g, b, Some((self.running_mean.data(), self.running_var.data())), eps)?;
            Ok(y)
        }
    }

    /// Exponential moving average update of the running statistics.
    pub fn absorb(&mut self, mean: &[T], var: &[T]) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * v;
        }
    }
}

/// Batch-norm statistics gathered during a training forward pass, keyed by
/// layer name: (name, mean, unbiased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub entries: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T> Default for BatchStats<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> BatchStats<T> {
    /// Fold the gathered statistics into the matching layers.
    pub fn apply<'a>(self, layers: impl IntoIterator<Item = &'a mut BatchNorm2d<T>>) {
        let mut layers: Vec<&mut BatchNorm2d<T>> = layers.into_iter().collect();
        for (name, mean, var) in self.entries {
            if let Some(bn) = layers.iter_mut().find(|l| l.name == name) {
                bn.absorb(&mean, &var);
            }
        }
    }
}

/// 3×3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, stride, rng),
            norm: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, training: bool, stats: &mut BatchStats<T>) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward_collect(tape, y, training, stats)?;
        tape.relu(y)
    }
}

/// 3×3 stride-2 transposed convolution, batch norm, ReLU; doubles H and W.
#[derive(Clone, Debug)]
pub struct UpBlock<T> {
    pub conv: ConvTranspose2d<T>,
    pub norm: BatchNorm2d<T>,
}

impl<T: Scalar> UpBlock<T> {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv: ConvTranspose2d::new(&format!("{name}.deconv"), cin, cout, 3, 2, rng),
            norm: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, training: bool, stats: &mut BatchStats<T>) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward_collect(tape, y, training, stats)?;
        tape.relu(y)
    }
}

macro_rules! block_module {
    ($ty:ident) => {
        impl<T: Scalar> Module<T> for $ty<T> {
            fn params(&self) -> Vec<(String, &Tensor<T>)> {
                let mut p = self.conv.params();
                p.extend(self.norm.params());
                p
            }

            fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
                let mut p = self.conv.params_mut();
                p.extend(self.norm.params_mut());
                p
            }

            fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
                self.norm.buffers()
            }

            fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
                self.norm.buffers_mut()
            }
        }
    };
}

block_module!(ConvBlock);
block_module!(UpBlock);

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.gamma", self.name), &self.gamma),
            (format!("{}.beta", self.name), &self.beta),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.gamma", self.name), &mut self.gamma),
            (format!("{}.beta", self.name), &mut self.beta),
        ]
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub name: String,
    /// Out×In
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            weight: kaiming_uniform(&[fout, fin], fin as f64, rng),
            bias: Tensor::zeros(&[fout]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), &self.weight)?;
        let b = tape.param(&format!("{}.bias", self.name), &self.bias)?;
        tape.linear(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }
}

/// One parameterized layer of any supported kind.
#[derive(Clone, Debug)]
pub enum LayerParams<T> {
    Conv2d(Conv2d<T>),
    ConvTranspose2d(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Linear(Linear<T>),
}

impl<T: Scalar> LayerParams<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Self::Conv2d(_) => LayerKind::Conv2d,
            Self::ConvTranspose2d(_) => LayerKind::ConvTranspose2d,
            Self::BatchNorm(_) => LayerKind::BatchNorm,
            Self::Linear(_) => LayerKind::Linear,
        }
    }

    /// Record this layer's forward pass on `tape`. `training` only matters for
    /// batch norm.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, training: bool) -> Result<Var> {
        match self {
            Self::Conv2d(l) => l.forward(tape, x),
            Self::ConvTranspose2d(l) => l.forward(tape, x),
            Self::BatchNorm(l) => l.forward(tape, x, training),
            Self::Linear(l) => l.forward(tape, x),
        }
    }

    fn inner(&self) -> &dyn Module<T> {
        match self {
            Self::Conv2d(l) => l,
            Self::ConvTranspose2d(l) => l,
            Self::BatchNorm(l) => l,
            Self::Linear(l) => l,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            Self::Conv2d(l) => l,
            Self::ConvTranspose2d(l) => l,
            Self::BatchNorm(l) => l,
            Self::Linear(l) => l,
        }
    }
}

impl<T: Scalar> Module<T> for LayerParams<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.inner_mut().params_mut()
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.inner().buffers()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.inner_mut().buffers_mut()
    }
}
