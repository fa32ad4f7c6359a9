use crate::diffops::{BatchStats, Padding, Scalar, Tape, Tensor, Var};

use super::params::{uniform_init, NamedTensors};
use super::ModelError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution weights and bias, as indices into the parameter store.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

/// `[maxpool2] → (conv3×3 → batch norm → relu) × 2`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub pool: bool,
    pub conv1: ConvLayer,
    pub bn1: BnLayer,
    pub conv2: ConvLayer,
    pub bn2: BnLayer,
}

/// Creates parameters and buffers with deterministic initial values.
pub struct Registry<T> {
    pub params: NamedTensors<T>,
    pub buffers: NamedTensors<T>,
    seed: u64,
}

impl<T: Scalar> Registry<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: NamedTensors::default(),
            buffers: NamedTensors::default(),
            seed,
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvLayer {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let w = uniform_init(self.seed, &wname, [cout, cin, k, k], bound);
        let b = uniform_init(self.seed, &bname, [cout, 1, 1, 1], bound);
        ConvLayer {
            weight: self.params.push(wname, w),
            bias: self.params.push(bname, b),
        }
    }

    /// 2×2 stride-2 transposed convolution, weight `cin×cout×2×2`.
    pub fn upsample(&mut self, name: &str, cin: usize, cout: usize) -> ConvLayer {
        let bound = 1.0 / ((cin * 4) as f64).sqrt();
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let w = uniform_init(self.seed, &wname, [cin, cout, 2, 2], bound);
        let b = uniform_init(self.seed, &bname, [cout, 1, 1, 1], bound);
        ConvLayer {
            weight: self.params.push(wname, w),
            bias: self.params.push(bname, b),
        }
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> BnLayer {
        BnLayer {
            gamma: self
                .params
                .push(format!("{name}.gamma"), Tensor::full([c, 1, 1, 1], T::one())),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros([c, 1, 1, 1])),
            running_mean: self
                .buffers
                .push(format!("{name}.running_mean"), Tensor::zeros([c, 1, 1, 1])),
            running_var: self
                .buffers
                .push(format!("{name}.running_var"), Tensor::full([c, 1, 1, 1], T::one())),
        }
    }

    pub fn block(&mut self, name: &str, cin: usize, cout: usize, pool: bool) -> ConvBlock {
        ConvBlock {
            pool,
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            bn1: self.batchnorm(&format!("{name}.bn1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            bn2: self.batchnorm(&format!("{name}.bn2"), cout),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running estimates are reported back.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Running-statistics update produced by one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: usize,
    pub running_var: usize,
    pub stats: BatchStats,
}

/// State threaded through one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a [Var],
    pub buffers: &'a NamedTensors<T>,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn conv(&mut self, layer: &ConvLayer, x: Var) -> Result<Var, ModelError> {
        let (w, b) = (self.params[layer.weight], self.params[layer.bias]);
        Ok(self.tape.conv2d(x, w, b, 1, Padding::Same)?)
    }

    pub fn upsample(&mut self, layer: &ConvLayer, x: Var) -> Result<Var, ModelError> {
        let (w, b) = (self.params[layer.weight], self.params[layer.bias]);
        Ok(self.tape.conv_transpose2d(x, w, b)?)
    }

    pub fn batchnorm(&mut self, layer: &BnLayer, x: Var) -> Result<Var, ModelError> {
        let (g, b) = (self.params[layer.gamma], self.params[layer.beta]);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm_train(x, g, b, BN_EPS)?;
                self.bn_updates.push(BnUpdate {
                    running_mean: layer.running_mean,
                    running_var: layer.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let to_f64 = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
                let mean = to_f64(self.buffers.get(layer.running_mean));
                let var = to_f64(self.buffers.get(layer.running_var));
                Ok(self.tape.batchnorm_eval(x, g, b, &mean, &var, BN_EPS)?)
            }
        }
    }

    pub fn block(&mut self, block: &ConvBlock, x: Var) -> Result<Var, ModelError> {
        let mut h = if block.pool { self.tape.maxpool2(x)? } else { x };
        for (conv, bn) in [(&block.conv1, &block.bn1), (&block.conv2, &block.bn2)] {
            h = self.conv(conv, h)?;
            h = self.batchnorm(bn, h)?;
            h = self.tape.relu(h);
        }
        Ok(h)
    }
}
