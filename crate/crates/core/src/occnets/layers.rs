use diffkit::{Graph, ParamSet, Tensor, Var};
use rand::rngs::StdRng;

use crate::error::{Error, Result};

/// Adds parameters in a fixed order with a seeded initialiser.
pub(crate) struct Builder {
    pub params: ParamSet,
    rng: StdRng,
}

impl Builder {
    pub fn new(rng: StdRng) -> Self {
        Self { params: ParamSet::new(), rng }
    }

    fn weight(&mut self, shape: &[usize], fan_in: usize, relu: bool) -> Tensor {
        // He-uniform in front of a ReLU, LeCun-uniform otherwise.
        let gain = if relu { 6.0 } else { 1.0 };
        Tensor::uniform(shape, (gain / fan_in.max(1) as f32).sqrt(), &mut self.rng)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, relu: bool) {
        let w = self.weight(&[cout, cin, k, k], cin * k * k, relu);
        self.params.push(format!("{name}.w"), w);
        self.params.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, relu: bool) {
        let w = self.weight(&[din, dout], din, relu);
        self.params.push(format!("{name}.w"), w);
        self.params.push(format!("{name}.b"), Tensor::zeros(&[dout]));
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) {
        let w = self.weight(&[rows, cols], cols, false);
        self.params.push(format!("{name}.w"), w);
    }
}

/// Parameter vars attached to a graph, looked up by name.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    names: &'a [String],
    vars: &'a [Var],
}

impl<'a> Bound<'a> {
    pub fn new(params: &'a ParamSet, vars: &'a [Var]) -> Self {
        Self { names: params.names(), vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }
}

pub(crate) fn conv(g: &mut Graph, p: Bound, name: &str, x: Var, padding: usize, relu: bool) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.conv2d(x, w, Some(b), 1, padding)?;
    Ok(if relu { g.relu(y)? } else { y })
}

/// `x[N, In] · W + b`
pub(crate) fn linear(g: &mut Graph, p: Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    let (n, d) = (g.shape(y)[0], g.shape(y)[1]);
    let idx = (0..n * d).map(|i| i % d).collect();
    let rows = g.gather(b, idx, &[n, d])?;
    Ok(g.add(y, rows)?)
}
