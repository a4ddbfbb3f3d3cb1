//! Generator, discriminator and the two-stage latent inverter as MLPs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::argmax;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// How the raw output of the last layer is interpreted. The network itself
/// always returns the pre-activation; sigmoid and softmax are folded into
/// the losses or applied by the consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputKind {
    Linear,
    SigmoidLogit,
    SoftmaxLogit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputKind,
}

impl MlpSpec {
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        act: Activation,
        kind: OutputKind,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        MlpSpec {
            widths,
            hidden: act,
            output: kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::invalid("an MLP needs at least one hidden layer"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "MLP widths must be positive: {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Fully connected network; parameters are `[W_0, b_0, W_1, b_1, ...]`
/// with `W_l: [in, out]` and `b_l: [1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub spec: MlpSpec,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Gaussian fan-in initialization `N(0, 2 / fan_in)`, zero biases.
    pub fn init(name: &str, spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for w in spec.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], data)?);
            params.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Mlp {
            name: name.to_string(),
            spec,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.params.len() / 2
    }

    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.checksum())
    }

    /// Records the parameters on a tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundMlp { mlp: self, vars }
    }

    /// Uses parameter nodes already on a tape, in `params()` order.
    pub fn with_vars(&self, vars: Vec<Var>) -> Result<BoundMlp<'_>> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{}: {} parameter nodes for {} tensors",
                self.name,
                vars.len(),
                self.params.len()
            )));
        }
        Ok(BoundMlp { mlp: self, vars })
    }

    /// Forward pass without gradient tracking.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'a> {
    mlp: &'a Mlp,
    vars: Vec<Var>,
}

impl BoundMlp<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xin = tape.value(x).cols();
        if xin != self.mlp.spec.input() {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.mlp.spec.input()],
            });
        }
        let layers = self.mlp.num_layers();
        let mut h = x;
        for l in 0..layers {
            let nonfinite = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteActivation {
                    net: self.mlp.name.clone(),
                    layer: l,
                },
                other => other,
            };
            let lin = tape.matmul(h, self.vars[2 * l]).map_err(nonfinite)?;
            h = tape.add_row(lin, self.vars[2 * l + 1]).map_err(nonfinite)?;
            if l + 1 < layers {
                h = match self.mlp.spec.hidden {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                }
                .map_err(nonfinite)?;
            }
        }
        Ok(h)
    }
}

/// Architecture of all four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpecs {
    pub g: MlpSpec,
    pub d: MlpSpec,
    pub h1: MlpSpec,
    pub h2: MlpSpec,
}

impl NetworkSpecs {
    /// g, d, h1: two hidden layers of 128; h2: one hidden layer of 64; relu.
    pub fn defaults(latent_dim: usize, data_dim: usize, modes: usize) -> Self {
        NetworkSpecs::with_hidden(
            latent_dim,
            data_dim,
            modes,
            &[128, 128],
            &[128, 128],
            &[128, 128],
            &[64],
            Activation::Relu,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_hidden(
        latent_dim: usize,
        data_dim: usize,
        modes: usize,
        g: &[usize],
        d: &[usize],
        h1: &[usize],
        h2: &[usize],
        act: Activation,
    ) -> Self {
        NetworkSpecs {
            g: MlpSpec::new(latent_dim, g, data_dim, act, OutputKind::Linear),
            d: MlpSpec::new(data_dim, d, 1, act, OutputKind::SigmoidLogit),
            h1: MlpSpec::new(data_dim, h1, latent_dim, act, OutputKind::Linear),
            h2: MlpSpec::new(latent_dim, h2, modes, act, OutputKind::SoftmaxLogit),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.g, &self.d, &self.h1, &self.h2] {
            s.validate()?;
        }
        let pairs = [
            ("g output", self.g.output_dim(), "d input", self.d.input()),
            ("g output", self.g.output_dim(), "h1 input", self.h1.input()),
            (
                "h1 output",
                self.h1.output_dim(),
                "h2 input",
                self.h2.input(),
            ),
            ("h1 output", self.h1.output_dim(), "g input", self.g.input()),
            ("d output", self.d.output_dim(), "logit width", 1),
        ];
        for (left, left_dim, right, right_dim) in pairs {
            if left_dim != right_dim {
                return Err(Error::NetworkDims {
                    left,
                    left_dim,
                    right,
                    right_dim,
                });
            }
        }
        if self.h2.output_dim() < 2 {
            return Err(Error::invalid("h2 must output at least 2 mode logits"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.g.input()
    }

    pub fn data_dim(&self) -> usize {
        self.g.output_dim()
    }

    pub fn modes(&self) -> usize {
        self.h2.output_dim()
    }
}

/// Parameters of g, d, h1 and h2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSet {
    pub g: Mlp,
    pub d: Mlp,
    pub h1: Mlp,
    pub h2: Mlp,
}

/// Initializes all networks from one seed, in the order g, d, h1, h2.
pub fn init_networks(specs: &NetworkSpecs, seed: u64) -> Result<NetworkSet> {
    specs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NetworkSet {
        g: Mlp::init("g", specs.g.clone(), &mut rng)?,
        d: Mlp::init("d", specs.d.clone(), &mut rng)?,
        h1: Mlp::init("h1", specs.h1.clone(), &mut rng)?,
        h2: Mlp::init("h2", specs.h2.clone(), &mut rng)?,
    })
}

impl NetworkSet {
    pub fn specs(&self) -> NetworkSpecs {
        NetworkSpecs {
            g: self.g.spec.clone(),
            d: self.d.spec.clone(),
            h1: self.h1.spec.clone(),
            h2: self.h2.spec.clone(),
        }
    }

    pub fn modes(&self) -> usize {
        self.h2.spec.output_dim()
    }

    pub fn checksum(&self) -> u64 {
        [&self.g, &self.d, &self.h1, &self.h2]
            .iter()
            .fold(0u64, |acc, m| acc.rotate_left(13) ^ m.checksum())
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.g.eval(z)
    }

    pub fn d_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.d.eval(x)
    }

    /// Mode posterior rows `softmax(h2(h1(x)))`.
    pub fn posterior(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.posterior_graph(&mut tape, x, false)?;
        Ok(tape.value(p).clone())
    }

    /// Predicted mode per sample.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.posterior(x)?.iter_rows().map(argmax).collect())
    }

    fn posterior_graph(&self, tape: &mut Tape, x: &Tensor, trainable: bool) -> Result<Var> {
        let h1 = self.h1.bind(tape, trainable);
        let h2 = self.h2.bind(tape, trainable);
        let xv = tape.constant(x.clone());
        let zhat = h1.forward(tape, xv)?;
        let logits = h2.forward(tape, zhat)?;
        tape.softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_specs() -> NetworkSpecs {
        NetworkSpecs::with_hidden(3, 2, 3, &[8, 8], &[8], &[8], &[4], Activation::Relu)
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_networks(&small_specs(), 4).unwrap();
        let b = init_networks(&small_specs(), 4).unwrap();
        assert_eq!(a, b);
        let c = init_networks(&small_specs(), 5).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let nets = init_networks(&NetworkSpecs::defaults(8, 2, 8), 1).unwrap();
        let out = nets.generate(&Tensor::zeros(&[4, 8])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_near_he_scale() {
        let specs = NetworkSpecs::defaults(8, 2, 8);
        for layer in 0..3 {
            let mut var_sum = 0.0;
            let mut fan_in = 0;
            for seed in 0..10 {
                let nets = init_networks(&specs, seed).unwrap();
                let w = &nets.g.params()[2 * layer];
                fan_in = w.shape()[0];
                let n = w.len() as f64;
                let mean = w.data().iter().sum::<f64>() / n;
                var_sum += w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            }
            let var = var_sum / 10.0;
            let want = 2.0 / fan_in as f64;
            assert!(
                (var / want - 1.0).abs() < 0.2,
                "layer {layer}: {var} vs {want}"
            );
        }
    }

    #[test]
    fn inconsistent_dims_named() {
        let mut specs = small_specs();
        specs.h1 = MlpSpec::new(2, &[8], 4, Activation::Relu, OutputKind::Linear);
        let err = init_networks(&specs, 0).unwrap_err().to_string();
        assert!(
            err.contains("h1 output") && err.contains("h2 input"),
            "{err}"
        );
        let mut specs = small_specs();
        specs.d = MlpSpec::new(5, &[8], 1, Activation::Relu, OutputKind::SigmoidLogit);
        let err = init_networks(&specs, 0).unwrap_err().to_string();
        assert!(err.contains("g output") && err.contains("d input"), "{err}");
    }

    #[test]
    fn posterior_rows_are_simplex() {
        let nets = init_networks(&small_specs(), 2).unwrap();
        let x = Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5], [-0.2, 0.1]]).unwrap();
        let p = nets.posterior(&x).unwrap();
        for row in p.iter_rows() {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let d = nets.d_logits(&x).unwrap();
        assert_eq!(d.shape(), &[3, 1]);
        assert!(d.is_finite());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut nets = init_networks(&small_specs(), 2).unwrap();
        nets.g.params_mut()[0].data_mut()[0] = 1e300;
        let z = Tensor::full(&[1, 3], 1e10);
        let err = nets.generate(&z).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteActivation { ref net, layer: 0 } if net == "g"),
            "{err}"
        );
    }
}
