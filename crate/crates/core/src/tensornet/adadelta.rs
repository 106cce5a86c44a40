use super::model::{NamedTensor, Parameters};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaDeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        AdaDeltaConfig { rho: 0.95, eps: 1e-6 }
    }
}

/// Running averages of squared gradients and squared updates, one pair of
/// tensors per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDeltaState<T> {
    pub config: AdaDeltaConfig,
    pub sq_grad: Vec<Tensor<T>>,
    pub sq_update: Vec<Tensor<T>>,
}

impl<T: Scalar> AdaDeltaState<T> {
    pub fn new(params: &Parameters<T>, config: AdaDeltaConfig) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.tensor.shape().to_vec()))
                .collect()
        };
        AdaDeltaState {
            config,
            sq_grad: zeros(),
            sq_update: zeros(),
        }
    }

    /// Applies one update in place:
    /// `Eg = rho Eg + (1 - rho) g^2`, `dx = -sqrt(Ed + eps) / sqrt(Eg + eps) * g`,
    /// `Ed = rho Ed + (1 - rho) dx^2`, `x += dx`.
    pub fn update(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) -> Result<()> {
        if params.tensors.len() != grads.tensors.len() || params.tensors.len() != self.sq_grad.len() {
            return Err(Error::Shape("optimizer state, parameters and gradients differ in length".into()));
        }
        let rho = T::lit(self.config.rho);
        let one_minus = T::one() - rho;
        let eps = T::lit(self.config.eps);
        for (((p, g), eg), ed) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.sq_grad)
            .zip(&mut self.sq_update)
        {
            if p.tensor.shape() != g.tensor.shape() || p.tensor.shape() != eg.shape() {
                return Err(Error::Shape(format!("gradient for `{}` has the wrong shape", p.name)));
            }
            for (((x, &gv), egv), edv) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.tensor.data())
                .zip(eg.data_mut())
                .zip(ed.data_mut())
            {
                *egv = rho * *egv + one_minus * gv * gv;
                let dx = -((*edv + eps).sqrt() / (*egv + eps).sqrt()) * gv;
                *edv = rho * *edv + one_minus * dx * dx;
                *x += dx;
            }
        }
        Ok(())
    }

    /// State tensors framed for storage: `<name>.eg` and `<name>.ed` per
    /// parameter plus the two hyperparameters.
    pub fn to_named(&self, params: &Parameters<T>) -> Vec<NamedTensor<T>> {
        let mut out = Vec::with_capacity(2 * self.sq_grad.len() + 2);
        for ((p, eg), ed) in params.tensors.iter().zip(&self.sq_grad).zip(&self.sq_update) {
            out.push(NamedTensor {
                name: format!("{}.eg", p.name),
                tensor: eg.clone(),
            });
            out.push(NamedTensor {
                name: format!("{}.ed", p.name),
                tensor: ed.clone(),
            });
        }
        for (name, v) in [("rho", self.config.rho), ("eps", self.config.eps)] {
            out.push(NamedTensor {
                name: name.into(),
                tensor: Tensor::new(vec![1], vec![T::lit(v)]).expect("scalar tensor"),
            });
        }
        out
    }
}
