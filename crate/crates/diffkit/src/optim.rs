//! Parameter storage and first-order optimizers (SGD, AdamW) with an
//! optional exponential moving average of the weights.

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn attach(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Adds every parameter to `g` as a constant (frozen weights).
    pub fn attach_frozen(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Collects gradients for the attached vars in parameter order.
    pub fn collect_grads(&self, grads: &mut Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|v| grads.take(*v)).collect()
    }

    /// Replaces all values, checking names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Contract("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Dimension(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Contract("name/tensor count mismatch".into()));
        }
        Ok(Self { names, tensors })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub kind: OptimKind,
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    ema_decay: Option<f32>,
    ema: Vec<Tensor>,
}

impl OptimState {
    pub fn sgd(params: &ParamSet, lr: f32) -> Self {
        Self::build(OptimKind::Sgd, params, lr, (0.9, 0.999), 1e-8, 0.0)
    }

    pub fn adamw(params: &ParamSet, lr: f32, betas: (f32, f32), eps: f32, weight_decay: f32) -> Self {
        Self::build(OptimKind::AdamW, params, lr, betas, eps, weight_decay)
    }

    fn build(
        kind: OptimKind,
        params: &ParamSet,
        lr: f32,
        betas: (f32, f32),
        eps: f32,
        weight_decay: f32,
    ) -> Self {
        let zeros = |p: &ParamSet| p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let (m, v) = match kind {
            OptimKind::Sgd => (Vec::new(), Vec::new()),
            OptimKind::AdamW => (zeros(params), zeros(params)),
        };
        Self {
            kind,
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            m,
            v,
            ema_decay: None,
            ema: Vec::new(),
        }
    }

    /// Enables weight EMA; the shadow starts at the current weights.
    pub fn with_ema(mut self, params: &ParamSet, decay: f32) -> Self {
        self.ema_decay = Some(decay);
        self.ema = params.tensors.clone();
        self
    }

    pub fn ema_decay(&self) -> Option<f32> {
        self.ema_decay
    }

    /// Shadow weights, when EMA is enabled.
    pub fn ema_weights(&self) -> Option<&[Tensor]> {
        self.ema_decay.map(|_| self.ema.as_slice())
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.tensors.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.tensors.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimKind::AdamW => {
                let (b1, b2) = self.betas;
                let t = self.step as i32;
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params
                    .tensors
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    let pd = p.data_mut();
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for j in 0..pd.len() {
                        let gj = g.data()[j];
                        md[j] = b1 * md[j] + (1.0 - b1) * gj;
                        vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
                        let mh = md[j] / bc1;
                        let vh = vd[j] / bc2;
                        pd[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * pd[j]);
                    }
                }
            }
        }
        if let Some(d) = self.ema_decay {
            for (e, p) in self.ema.iter_mut().zip(&params.tensors) {
                for (s, w) in e.data_mut().iter_mut().zip(p.data()) {
                    *s = d * *s + (1.0 - d) * w;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn sgd_single_step() {
        let mut p = one(0.0);
        let mut s = OptimState::sgd(&p, 0.1);
        s.step(&mut p, &[Tensor::full(&[1], 1.0)]).unwrap();
        assert!((p.tensors()[0].item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn adamw_first_step_is_sign_scaled() {
        for g in [3.0f32, -0.25] {
            let mut p = one(1.5);
            let mut s = OptimState::adamw(&p, 1e-3, (0.9, 0.999), 1e-8, 0.0);
            s.step(&mut p, &[Tensor::full(&[1], g)]).unwrap();
            let want = 1.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p.tensors()[0].item() - want).abs() < 1e-7);
        }
    }

    #[test]
    fn adamw_weight_decay_is_decoupled() {
        let mut p = one(2.0);
        let mut s = OptimState::adamw(&p, 0.1, (0.9, 0.999), 1e-8, 0.01);
        s.step(&mut p, &[Tensor::full(&[1], 0.0)]).unwrap();
        assert!((p.tensors()[0].item() - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn ema_boundary_decays() {
        let mut p = one(0.0);
        let mut s = OptimState::sgd(&p, 1.0).with_ema(&p, 0.0);
        s.step(&mut p, &[Tensor::full(&[1], -1.0)]).unwrap();
        assert_eq!(s.ema_weights().unwrap()[0].item(), p.tensors()[0].item());

        let mut p = one(0.0);
        let mut s = OptimState::sgd(&p, 1.0).with_ema(&p, 1.0);
        s.step(&mut p, &[Tensor::full(&[1], -1.0)]).unwrap();
        assert_eq!(s.ema_weights().unwrap()[0].item(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = one(0.0);
        let mut s = OptimState::sgd(&p, 1.0);
        assert!(matches!(s.step(&mut p, &[Tensor::zeros(&[2])]), Err(Error::Contract(_))));
        assert!(matches!(s.step(&mut p, &[]), Err(Error::Contract(_))));
    }
}
