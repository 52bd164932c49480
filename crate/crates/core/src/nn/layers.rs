use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Flat view of every scalar, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// FNV-1a over the raw bits of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.values {
            for x in &t.data {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Copies values from `other` by name, checking shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = other
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Parameters of a [`ParamSet`] placed on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Places every parameter on `g`. Frozen parameters become constants and
    /// never accumulate gradients.
    pub fn new(g: &mut Graph, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .values()
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order, zero where nothing flowed.
    pub fn grads(&self, g: &Graph, grads: &super::graph::Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                let (r, c) = g.value(v).shape();
                grads.get_or_zeros(v, r, c)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

/// Layer widths including the input width, e.g. `[3, 64, 128]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// Activation after the last layer; hidden layers always use ReLU.
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], output: Activation) -> Self {
        Self {
            widths: widths.to_vec(),
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!("mlp needs at least two widths, got {:?}", self.widths)));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("mlp widths must be >= 1, got {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Glorot-uniform weight init in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = params.push(format!("{name}.w"), glorot(fan_in, fan_out, rng));
        let b = params.push(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.affine(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(params: &mut ParamSet, name: &str, spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { spec, layers })
    }

    /// Applies the stack row-wise; parameters are shared across rows.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let cols = g.value(x).cols;
        assert_eq!(
            cols,
            self.spec.input_width(),
            "mlp input width {cols} does not match spec {:?}",
            self.spec.widths
        );
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            let act = if i == last { self.spec.output } else { Activation::Relu };
            h = match act {
                Activation::None => h,
                Activation::Relu => g.relu(h),
                Activation::Sigmoid => g.sigmoid(h),
            };
        }
        h
    }
}

/// Per-point shared MLP with ReLU on every layer.
pub fn shared_mlp(g: &mut Graph, p: &Bound, mlp: &Mlp, points: Var) -> Var {
    mlp.forward(g, p, points)
}

/// Symmetric pooling over points.
pub fn max_pool(g: &mut Graph, features: Var) -> Var {
    g.max_rows(features)
}

/// Layer that consumes a per-point feature block plus a global row, as if
/// the global row were concatenated onto every point. Splitting the weight
/// avoids materializing the repeated global block.
#[derive(Clone, Copy, Debug)]
pub struct SplitDense {
    pub w_point: usize,
    pub w_global: usize,
    pub b: usize,
}

impl SplitDense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        point_in: usize,
        global_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = glorot(point_in + global_in, fan_out, rng);
        let (top, bottom) = w.data.split_at(point_in * fan_out);
        let w_point = params.push(format!("{name}.wp"), Tensor::from_vec(point_in, fan_out, top.to_vec()));
        let w_global = params.push(format!("{name}.wg"), Tensor::from_vec(global_in, fan_out, bottom.to_vec()));
        let b = params.push(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w_point, w_global, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, points: Var, global: Var) -> Var {
        let local = g.affine(points, p.var(self.w_point), p.var(self.b));
        let shift = g.matmul(global, p.var(self.w_global));
        g.add_row(local, shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut params, "m", MlpSpec::new(&[3, 3], Activation::Relu), &mut rng).unwrap();
        let mut eye = Tensor::zeros(3, 3);
        (0..3).for_each(|i| eye.set(i, i, 1.0));
        *params.get_mut(mlp.layers[0].w) = eye;
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &params, false);
        let x = Tensor::from_rows(&[[0.1, 2.0, 3.0], [4.0, 0.5, 6.0]]);
        let xv = g.constant(x.clone());
        let y = shared_mlp(&mut g, &b, &mlp, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn shared_mlp_is_row_equivariant() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut params, "m", MlpSpec::new(&[3, 8, 4], Activation::Relu), &mut rng).unwrap();
        let rows = [[0.1, -2.0, 3.0], [4.0, 0.5, -6.0], [1.0, 1.0, 1.0]];
        let perm = [2, 0, 1];
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| rows[i]).collect();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &params, false);
        let x1 = g.constant(Tensor::from_rows(&rows));
        let x2 = g.constant(Tensor::from_rows(&permuted));
        let y1 = shared_mlp(&mut g, &b, &mlp, x1);
        let y2 = shared_mlp(&mut g, &b, &mlp, x2);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(g.value(y2).row_slice(k), g.value(y1).row_slice(i));
        }
        let p1 = max_pool(&mut g, y1);
        let p2 = max_pool(&mut g, y2);
        assert_eq!(g.value(p1), g.value(p2));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        assert!(MlpSpec::new(&[3], Activation::None).validate().is_err());
        assert!(MlpSpec::new(&[3, 0, 2], Activation::None).validate().is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = glorot(10, 20, &mut rng);
        let a = (6.0f64 / 30.0).sqrt();
        assert!(t.data.iter().all(|x| x.abs() <= a));
    }
}
