use crate::layers::{
    BatchNorm2d, Conv2d, Dense, LeakyRelu, MaxPool2d, MinibatchDiscrimination, Param, Relu, Reshape, ResizeNearest,
    Sigmoid,
};
use crate::tensor::Tensor;
use crate::{NnError, Result};

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu(Relu),
    LeakyRelu(LeakyRelu),
    Sigmoid(Sigmoid),
    MaxPool2d(MaxPool2d),
    Resize(ResizeNearest),
    Dense(Dense),
    Reshape(Reshape),
    Minibatch(MinibatchDiscrimination),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::BatchNorm2d(_) => "bn",
            Layer::Relu(_) => "relu",
            Layer::LeakyRelu(_) => "lrelu",
            Layer::Sigmoid(_) => "sigmoid",
            Layer::MaxPool2d(_) => "pool",
            Layer::Resize(_) => "resize",
            Layer::Dense(_) => "dense",
            Layer::Reshape(_) => "reshape",
            Layer::Minibatch(_) => "mbd",
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.infer(x),
            Layer::BatchNorm2d(l) => l.infer(x),
            Layer::Relu(l) => Ok(l.infer(x)),
            Layer::LeakyRelu(l) => Ok(l.infer(x)),
            Layer::Sigmoid(l) => Ok(l.infer(x)),
            Layer::MaxPool2d(l) => l.infer(x),
            Layer::Resize(l) => l.infer(x),
            Layer::Dense(l) => l.infer(x),
            Layer::Reshape(l) => l.infer(x),
            Layer::Minibatch(l) => l.infer(x),
        }
    }

    /// Caching forward. Batch norm uses batch statistics only when `train`.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::BatchNorm2d(l) if train => l.forward(x),
            Layer::BatchNorm2d(l) => l.infer(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::LeakyRelu(l) => Ok(l.forward(x)),
            Layer::Sigmoid(l) => Ok(l.forward(x)),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::Resize(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::Reshape(l) => l.forward(x),
            Layer::Minibatch(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::BatchNorm2d(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::LeakyRelu(l) => l.backward(grad),
            Layer::Sigmoid(l) => l.backward(grad),
            Layer::MaxPool2d(l) => l.backward(grad),
            Layer::Resize(l) => l.backward(grad),
            Layer::Dense(l) => l.backward(grad),
            Layer::Reshape(l) => l.backward(grad),
            Layer::Minibatch(l) => l.backward(grad),
        }
    }

    /// Trainable parameters with their local names.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::Dense(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm2d(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            Layer::Minibatch(l) => vec![("kernel", &mut l.tensor)],
            _ => Vec::new(),
        }
    }

    /// Every persistent tensor (parameters and running statistics).
    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &l.weight.value), ("bias", &l.bias.value)],
            Layer::Dense(l) => vec![("weight", &l.weight.value), ("bias", &l.bias.value)],
            Layer::BatchNorm2d(l) => vec![
                ("gamma", &l.gamma.value),
                ("beta", &l.beta.value),
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            Layer::Minibatch(l) => vec![("kernel", &l.tensor.value)],
            _ => Vec::new(),
        }
    }

    fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight.value), ("bias", &mut l.bias.value)],
            Layer::Dense(l) => vec![("weight", &mut l.weight.value), ("bias", &mut l.bias.value)],
            Layer::BatchNorm2d(l) => vec![
                ("gamma", &mut l.gamma.value),
                ("beta", &mut l.beta.value),
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            Layer::Minibatch(l) => vec![("kernel", &mut l.tensor.value)],
            _ => Vec::new(),
        }
    }
}

/// A linear stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, train)?;
        }
        Ok(h)
    }

    /// Back-propagates `grad`, accumulating parameter gradients; returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().into_iter().map(|(_, p)| p)).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.state())
            .filter(|(name, _)| !name.starts_with("running"))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Named persistent tensors, `"{index}.{kind}.{name}"`.
    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.state() {
                out.push((format!("{i}.{}.{name}", l.kind()), t));
            }
        }
        out
    }

    /// Restores tensors produced by [`Sequential::named_state`]. Every
    /// persistent tensor must be present with a matching shape.
    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let kind = l.kind();
            for (name, t) in l.state_mut() {
                let key = format!("{i}.{kind}.{name}");
                let value = lookup(&key).ok_or_else(|| NnError::State(format!("missing tensor {key}")))?;
                if value.shape() != t.shape() {
                    return Err(NnError::Shape(format!(
                        "tensor {key}: expected {:?}, found {:?}",
                        t.shape(),
                        value.shape()
                    )));
                }
                *t = value;
            }
        }
        Ok(())
    }
}
