//! Small feed-forward networks whose activation sites all share one
//! [`ActivationSpec`] and therefore one `alpha` (and `beta`) scalar.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationSpec, Family};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "paf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten,
    Activation,
}

/// Anything that maps a batch of inputs to logits inside a [`Graph`].
pub trait Model {
    /// Shape of a single sample.
    fn input_shape(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.logits_graph(&mut g, xv)?;
        Ok(g.tensor(out))
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(argmax_rows(z.data(), self.num_classes()))
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(z: &[f64], k: usize) -> Vec<usize> {
    z.chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Graph handles for a network's parameters within one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
    pub alpha: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    params: Vec<(String, Tensor)>,
    input_shape: Vec<usize>,
    classes: usize,
    activation: ActivationSpec,
    alpha: Tensor,
    beta: Tensor,
}

impl Network {
    fn assemble(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        classes: usize,
        activation: ActivationSpec,
        seed: u64,
    ) -> Result<Self> {
        activation.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let (wshape, fan_in, nb) = match *layer {
                Layer::Dense { inputs, outputs } => (vec![inputs, outputs], inputs, outputs),
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = wshape.iter().product();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let prefix = match layer {
                Layer::Dense { .. } => "dense",
                _ => "conv",
            };
            params.push((format!("{prefix}{i}.weight"), Tensor::new(wshape, w)?.requires_grad(true)));
            params.push((format!("{prefix}{i}.bias"), Tensor::zeros(&[nb]).requires_grad(true)));
        }
        let alpha = Tensor::scalar(activation.alpha()).requires_grad(activation.alpha_learnable());
        let beta = Tensor::scalar(activation.beta()).requires_grad(activation.beta_learnable());
        Ok(Self {
            layers,
            params,
            input_shape,
            classes,
            activation,
            alpha,
            beta,
        })
    }

    /// Dense layers `dims[0] → … → dims[k]` with an activation between
    /// consecutive layers and linear logits at the end.
    pub fn mlp(dims: &[usize], activation: ActivationSpec, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "mlp needs at least two positive dims, got {dims:?}"
            )));
        }
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(Layer::Activation);
            }
            layers.push(Layer::Dense {
                inputs: pair[0],
                outputs: pair[1],
            });
        }
        Self::assemble(layers, vec![dims[0]], dims[dims.len() - 1], activation, seed)
    }

    /// Two conv blocks (stride 1 then stride 2, "same" padding) and a dense head.
    pub fn cnn(
        input: [usize; 3],
        channels: [usize; 2],
        kernel: usize,
        classes: usize,
        activation: ActivationSpec,
        seed: u64,
    ) -> Result<Self> {
        if input.contains(&0) || channels.contains(&0) || kernel == 0 || classes == 0 {
            return Err(Error::InvalidNetwork("cnn dimensions must be positive".into()));
        }
        let [c, h, w] = input;
        let pad = kernel / 2;
        let out = |n: usize, stride: usize| -> Result<usize> {
            if n + 2 * pad < kernel {
                return Err(Error::InvalidNetwork(format!("kernel {kernel} too large for size {n}")));
            }
            Ok((n + 2 * pad - kernel) / stride + 1)
        };
        let (h1, w1) = (out(h, 1)?, out(w, 1)?);
        let (h2, w2) = (out(h1, 2)?, out(w1, 2)?);
        let layers = vec![
            Layer::Conv {
                in_channels: c,
                out_channels: channels[0],
                kernel,
                stride: 1,
                padding: pad,
            },
            Layer::Activation,
            Layer::Conv {
                in_channels: channels[0],
                out_channels: channels[1],
                kernel,
                stride: 2,
                padding: pad,
            },
            Layer::Activation,
            Layer::Flatten,
            Layer::Dense {
                inputs: channels[1] * h2 * w2,
                outputs: classes,
            },
        ];
        Self::assemble(layers, input.to_vec(), classes, activation, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    /// Current activation spec, with the live parameter values.
    pub fn activation(&self) -> ActivationSpec {
        self.activation
    }

    pub fn paf_alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn paf_beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn paf_alpha_mut(&mut self) -> &mut Tensor {
        &mut self.alpha
    }

    pub fn paf_beta_mut(&mut self) -> &mut Tensor {
        &mut self.beta
    }

    /// Sets the shared PAF parameters, clamped into the family's domain.
    pub fn set_paf_params(&mut self, alpha: f64, beta: f64) {
        self.activation.set_params_clamped(alpha, beta);
        self.alpha.data_mut()[0] = self.activation.alpha();
        self.beta.data_mut()[0] = self.activation.beta();
    }

    /// Resets the PAF parameters to the family's nonparametric shape
    /// (ReLU for PReLU/PReLU⁺/ReBLU, ELU for PELU, SiLU for PSiLU/PSSiLU,
    /// Softplus for PSoftplus).
    pub fn init_to_nonparametric(&mut self) {
        let (_, a, b) = self.activation.family().anchor();
        self.set_paf_params(a, b);
    }

    /// Number of weight and bias scalars.
    pub fn weight_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of learnable PAF scalars (0, 1 or 2).
    pub fn paf_param_count(&self) -> usize {
        self.alpha.is_learnable() as usize + self.beta.is_learnable() as usize
    }

    /// Learnable scalars found by walking every parameter tensor.
    pub fn learnable_scalars(&self) -> usize {
        self.params
            .iter()
            .map(|(_, t)| t)
            .chain([&self.alpha, &self.beta])
            .filter(|t| t.is_learnable())
            .map(Tensor::numel)
            .sum()
    }

    pub fn activation_sites(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Activation)).count()
    }

    /// Registers parameters on `g`. With `track` false they are constants,
    /// which is what attacks want.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        let reg = |g: &mut Graph, t: &Tensor| if track { g.leaf(t) } else { g.constant(t) };
        let params = self.params.iter().map(|(_, t)| reg(g, t)).collect();
        let alpha = reg(g, &self.alpha);
        let beta = reg(g, &self.beta);
        Bound { params, alpha, beta }
    }

    pub fn forward_bound(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let mut expected = vec![g.shape(x)[0]];
        expected.extend(&self.input_shape);
        if g.shape(x) != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: g.shape(x).to_vec(),
                rhs: expected,
            });
        }
        let family = self.activation.family();
        let mut h = x;
        let mut p = 0;
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { .. } => {
                    let z = g.matmul(h, bound.params[p])?;
                    let z = g.bias_add(z, bound.params[p + 1])?;
                    p += 2;
                    z
                }
                Layer::Conv { stride, padding, .. } => {
                    let z = g.conv2d(h, bound.params[p], stride, padding)?;
                    let z = g.bias_add(z, bound.params[p + 1])?;
                    p += 2;
                    z
                }
                Layer::Flatten => g.flatten(h)?,
                Layer::Activation => g.paf(family, h, bound.alpha, bound.beta)?,
            };
        }
        Ok(h)
    }

    /// Adds the gradients recorded on `g` into the network's tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for ((_, t), &v) in self.params.iter_mut().zip(&bound.params) {
            if t.is_learnable() {
                if let Some(gr) = g.grad(v) {
                    t.accumulate_grad(gr)?;
                }
            }
        }
        for (t, v) in [(&mut self.alpha, bound.alpha), (&mut self.beta, bound.beta)] {
            if t.is_learnable() {
                if let Some(gr) = g.grad(v) {
                    t.accumulate_grad(gr)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.params {
            t.zero_grad();
        }
        self.alpha.zero_grad();
        self.beta.zero_grad();
    }

    /// Marks the PAF parameters learnable or frozen.
    pub fn set_paf_learnable(&mut self, alpha: bool, beta: bool) -> Result<()> {
        let a = self.activation;
        self.activation = ActivationSpec::with_flags(a.family(), a.alpha(), a.beta(), alpha, beta)?;
        self.alpha.set_requires_grad(self.activation.alpha_learnable());
        self.beta.set_requires_grad(self.activation.beta_learnable());
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            layers: self.layers.clone(),
            family: self.activation.family(),
            alpha_learnable: self.activation.alpha_learnable(),
            beta_learnable: self.activation.beta_learnable(),
            tensors,
            alpha: self.activation.alpha(),
            beta: self.activation.beta(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.format, ck.version
            )));
        }
        let activation =
            ActivationSpec::with_flags(ck.family, ck.alpha, ck.beta, ck.alpha_learnable, ck.beta_learnable)?;
        let mut net = Self::assemble(ck.layers.clone(), ck.input_shape.clone(), ck.classes, activation, 0)?;
        for (name, t) in &mut net.params {
            let stored = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if stored.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            *t = Tensor::new(stored.shape.clone(), stored.data.clone())?.requires_grad(true);
        }
        if ck.tensors.len() != net.params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected extra tensors".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ck)
    }
}

impl Model for Network {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let bound = self.bind(g, false);
        self.forward_bound(g, &bound, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned on-disk network state. Layer tensors are keyed by name;
/// the shared PAF scalars live under `paf.alpha` / `paf.beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub family: Family,
    pub alpha_learnable: bool,
    pub beta_learnable: bool,
    pub tensors: BTreeMap<String, StoredTensor>,
    #[serde(rename = "paf.alpha")]
    pub alpha: f64,
    #[serde(rename = "paf.beta")]
    pub beta: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_accounting() {
        let relu = Network::mlp(&[2, 8, 2], ActivationSpec::nonparametric(Family::Relu), 1).unwrap();
        assert_eq!(relu.weight_count(), 2 * 8 + 8 + 8 * 2 + 2);
        assert_eq!(relu.paf_param_count(), 0);
        assert_eq!(relu.learnable_scalars(), 42);

        let pssilu = Network::mlp(&[2, 8, 2], ActivationSpec::at_anchor(Family::Pssilu), 1).unwrap();
        assert_eq!(pssilu.paf_param_count(), 2);
        assert_eq!(pssilu.learnable_scalars(), 44);

        let psilu = Network::mlp(&[2, 8, 2], ActivationSpec::at_anchor(Family::Psilu), 1).unwrap();
        assert_eq!(psilu.paf_param_count(), 1);
    }

    #[test]
    fn mlp_rejects_bad_dims() {
        let a = ActivationSpec::nonparametric(Family::Relu);
        assert!(Network::mlp(&[3], a, 0).is_err());
        assert!(Network::mlp(&[3, 0, 2], a, 0).is_err());
    }

    #[test]
    fn cnn_shapes_and_symmetry() {
        let mut net = Network::cnn([1, 8, 8], [4, 6], 3, 5, ActivationSpec::at_anchor(Family::Psilu), 3).unwrap();
        assert_eq!(net.paf_param_count(), 1);
        let x = Tensor::zeros(&[3, 1, 8, 8]);
        let z = net.logits(&x).unwrap();
        assert_eq!(z.shape(), &[3, 5]);
        // zero input with zero biases gives zero logits everywhere
        assert!(z.data().iter().all(|&v| v == 0.0));
        for (_, t) in net.params_mut() {
            if t.shape().len() == 1 {
                t.data_mut().fill(0.0);
            }
        }
        let z = net.logits(&x).unwrap();
        let row = &z.data()[..5];
        assert!(row.iter().all(|&v| v == row[0]));
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Network::mlp(&[3, 4, 2], ActivationSpec::nonparametric(Family::Relu), 0).unwrap();
        assert!(matches!(
            net.logits(&Tensor::zeros(&[2, 4])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn init_to_nonparametric_values() {
        let mut p = Network::mlp(&[2, 3, 2], ActivationSpec::new(Family::Psilu, 3.0, 0.0).unwrap(), 0).unwrap();
        p.init_to_nonparametric();
        assert_eq!(p.activation().alpha(), 1.0);
        let mut r = Network::mlp(&[2, 3, 2], ActivationSpec::new(Family::Prelu, 0.4, 0.0).unwrap(), 0).unwrap();
        r.init_to_nonparametric();
        assert_eq!(r.activation().alpha(), 0.0);
        let mut s = Network::mlp(&[2, 3, 2], ActivationSpec::new(Family::Pssilu, 2.0, 0.4).unwrap(), 0).unwrap();
        s.init_to_nonparametric();
        assert_eq!((s.activation().alpha(), s.activation().beta()), (1.0, 0.0));
        assert_eq!(s.paf_alpha().item(), 1.0);
        assert_eq!(s.paf_beta().item(), 0.0);
    }

    #[test]
    fn single_dense_layer_is_affine() {
        let mut net = Network::mlp(&[3, 2], ActivationSpec::nonparametric(Family::Relu), 5).unwrap();
        net.params_mut()[1].1.data_mut().copy_from_slice(&[0.5, -1.0]);
        let w = net.params()[0].1.data().to_vec();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, -1.0]).unwrap();
        let z = net.logits(&x).unwrap();
        for j in 0..2 {
            let expect = (0..3).map(|i| x.data()[i] * w[i * 2 + j]).sum::<f64>() + [0.5, -1.0][j];
            assert!((z.data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut net = Network::mlp(&[2, 5, 3], ActivationSpec::new(Family::Pssilu, 1.3, 0.2).unwrap(), 11).unwrap();
        net.set_paf_params(1.7, 0.123_456_789_012_345_6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back, net);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"paf.alpha\"") && text.contains("\"version\":1"));
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let net = Network::mlp(&[2, 2], ActivationSpec::nonparametric(Family::Relu), 0).unwrap();
        let mut ck = net.to_checkpoint();
        ck.version = 99;
        assert!(matches!(Network::from_checkpoint(&ck), Err(Error::Checkpoint(_))));
    }
}
