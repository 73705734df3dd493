use crate::layers::Param;
use crate::sequential::Sequential;
use crate::tensor::Tensor;
use crate::Result;

/// An ordered list of named [`Sequential`] parts run back to back.
///
/// Naming the parts lets a larger network adopt the parameters of a smaller
/// one part by part.
#[derive(Clone, Debug, Default)]
pub struct Chain {
    parts: Vec<(String, Sequential)>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, part: Sequential) {
        self.parts.push((name.into(), part));
    }

    pub fn parts(&self) -> &[(String, Sequential)] {
        &self.parts
    }

    pub fn part(&self, name: &str) -> Option<&Sequential> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn part_mut(&mut self, name: &str) -> Option<&mut Sequential> {
        self.parts.iter_mut().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (_, p) in &self.parts {
            h = p.infer(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (_, p) in &mut self.parts {
            h = p.forward(&h, train)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for (_, p) in self.parts.iter_mut().rev() {
            g = p.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.parts.iter_mut().flat_map(|(_, p)| p.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.parts {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.parts.iter().map(|(_, p)| p.param_count()).sum()
    }

    /// Persistent tensors named `"{part}.{index}.{kind}.{name}"`.
    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        self.parts
            .iter()
            .flat_map(|(part, seq)| seq.named_state().into_iter().map(move |(n, t)| (format!("{part}.{n}"), t)))
            .collect()
    }

    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (part, seq) in &mut self.parts {
            let prefix = format!("{part}.");
            seq.load_state(&|name: &str| lookup(&format!("{prefix}{name}")))?;
        }
        Ok(())
    }
}
