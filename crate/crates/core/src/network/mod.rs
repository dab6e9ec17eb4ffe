//! Sequential MLPs with Structural Dropout layers.

mod checkpoint;
mod spec;

use std::collections::HashMap;

use rand::Rng;

pub use checkpoint::{from_bytes, load, save, to_bytes, FORMAT_VERSION, MAGIC};
pub use spec::{Activation, DropoutSettings, LayerSpec, ModelSpec, PrunedFrom};

use crate::error::{Error, Result};
use crate::sd::{sample_decision, SdDecision};
use crate::tape::{NodeId, Tape};
use crate::data::Dataset;
use crate::tensor::{argmax_columns, softmax_cross_entropy, Tensor};

/// Weight `[out x in]` and optional bias `[out x 1]` of one linear layer.
/// Also used to carry gradients of the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn zeros_like(&self) -> Self {
        LinearParams {
            weight: Tensor::zeros(self.weight.rows(), self.weight.cols()),
            bias: self.bias.as_ref().map(|b| Tensor::zeros(b.rows(), 1)),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Widths to evaluate dropout layers at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Widths {
    /// One width for every dropout layer.
    Shared(usize),
    /// One width per dropout layer, in layer order.
    PerLayer(Vec<usize>),
}

impl Widths {
    /// Expands to one validated width per dropout layer of `spec`.
    pub fn resolve(&self, spec: &ModelSpec) -> Result<Vec<usize>> {
        let layers: Vec<_> = spec.sd_layers().collect();
        let widths = match self {
            Widths::Shared(k) => {
                if layers.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "model {:?} has no structural dropout layers to set a width on",
                        spec.name
                    )));
                }
                vec![*k; layers.len()]
            }
            Widths::PerLayer(ws) => {
                if ws.len() != layers.len() {
                    return Err(Error::WidthCount {
                        expected: layers.len(),
                        got: ws.len(),
                    });
                }
                ws.clone()
            }
        };
        for (layer, (cfg, &k)) in layers.iter().zip(&widths).enumerate() {
            cfg.check_width(k, layer)?;
            if !cfg.is_admissible(k) {
                log::warn!(
                    "width {k} for dropout layer {layer} was never sampled during training (group size {})",
                    cfg.group()
                );
            }
        }
        Ok(widths)
    }
}

/// Tape nodes holding one linear layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct Pass {
    pub tape: Tape,
    pub logits: NodeId,
    pub params: Vec<ParamNodes>,
    pub decisions: Vec<SdDecision>,
}

impl Pass {
    /// Appends the cross-entropy loss, runs backward and returns the loss
    /// with gradients for every linear layer.
    pub fn backward(mut self, labels: &[usize]) -> Result<(f64, Vec<LinearParams>)> {
        let loss_node = self.tape.cross_entropy(self.logits, labels)?;
        let loss = self.tape.value(loss_node).data()[0];
        let mut grads = self.tape.backward(loss_node)?;
        let tape = &self.tape;
        let out = self
            .params
            .iter()
            .map(|p| LinearParams {
                weight: grads.take(p.weight).unwrap_or_else(|| zeros_of(tape, p.weight)),
                bias: p
                    .bias
                    .map(|b| grads.take(b).unwrap_or_else(|| zeros_of(tape, b))),
            })
            .collect();
        Ok((loss, out))
    }
}

fn zeros_of(tape: &Tape, id: NodeId) -> Tensor {
    let (r, c) = tape.value(id).shape();
    Tensor::zeros(r, c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    params: Vec<LinearParams>,
}

/// Columns per chunk when evaluating large batches without gradients.
const EVAL_CHUNK: usize = 1024;

impl Network {
    /// Fan-in uniform initialization: `W ~ U(-s, s)` with `s = sqrt(1 / in)`,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for layer in &spec.layers {
            if let LayerSpec::Linear {
                input,
                output,
                bias,
            } = *layer
            {
                let s = (1.0 / input as f64).sqrt();
                let data = (0..input * output).map(|_| rng.random_range(-s..s)).collect();
                params.push(LinearParams {
                    weight: Tensor::from_vec(output, input, data)?,
                    bias: bias.then(|| Tensor::zeros(output, 1)),
                });
            }
        }
        Ok(Network { spec, params })
    }

    /// Wraps existing parameters, checking them against the spec.
    pub fn from_parts(spec: ModelSpec, params: Vec<LinearParams>) -> Result<Self> {
        spec.validate()?;
        let shapes: Vec<_> = spec
            .layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Linear {
                    input,
                    output,
                    bias,
                } => Some((output, input, bias)),
                _ => None,
            })
            .collect();
        if shapes.len() != params.len() {
            return Err(Error::InvalidSpec(format!(
                "spec has {} linear layers but {} parameter sets were given",
                shapes.len(),
                params.len()
            )));
        }
        for (i, ((out, inp, bias), p)) in shapes.iter().zip(&params).enumerate() {
            let bias_ok = match &p.bias {
                Some(b) => *bias && b.shape() == (*out, 1),
                None => !*bias,
            };
            if p.weight.shape() != (*out, *inp) || !bias_ok {
                return Err(Error::InvalidSpec(format!(
                    "linear layer {i}: parameters {:?} do not match [{out} x {inp}] (bias: {bias})",
                    p.weight.shape()
                )));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LinearParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LinearParams] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(LinearParams::len).sum()
    }

    /// Records a forward pass with the given per-layer decisions.
    pub fn forward_with_decisions(&self, x: &Tensor, decisions: &[SdDecision]) -> Result<Pass> {
        let widths: Vec<usize> = self.spec.sd_layers().map(|c| c.width()).collect();
        if decisions.len() != widths.len() {
            return Err(Error::WidthCount {
                expected: widths.len(),
                got: decisions.len(),
            });
        }
        for (layer, (d, &n)) in decisions.iter().zip(&widths).enumerate() {
            if !d.full_pass && (d.cutoff == 0 || d.cutoff > n) {
                return Err(Error::WidthOutOfRange {
                    layer,
                    width: d.cutoff,
                    min: 1,
                    max: n,
                });
            }
        }
        let masks: Vec<(usize, f64)> = decisions
            .iter()
            .zip(&widths)
            .map(|(d, &n)| d.keep_and_scale(n))
            .collect();
        let mut tape = Tape::new();
        let (logits, params) = self.record(&mut tape, x, &masks)?;
        Ok(Pass {
            tape,
            logits,
            params,
            decisions: decisions.to_vec(),
        })
    }

    /// Training-mode forward pass: every dropout layer draws its own
    /// decision from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Pass> {
        let decisions = self.sample_decisions(rng);
        self.forward_with_decisions(x, &decisions)
    }

    pub fn sample_decisions<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<SdDecision> {
        self.spec.sd_layers().map(|c| sample_decision(c, rng)).collect()
    }

    /// Deterministic forward pass with every dropout layer truncated to its
    /// assigned width.
    pub fn forward_eval(&self, x: &Tensor, widths: &Widths) -> Result<Tensor> {
        let ks = widths.resolve(&self.spec)?;
        let masks: Vec<(usize, f64)> = self
            .spec
            .sd_layers()
            .zip(&ks)
            .map(|(c, &k)| (k, c.width() as f64 / k as f64))
            .collect();
        self.eval_masked(x, &masks)
    }

    /// Full-width forward pass (dropout layers are the identity).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let masks: Vec<(usize, f64)> = self.spec.sd_layers().map(|c| (c.width(), 1.0)).collect();
        self.eval_masked(x, &masks)
    }

    fn eval_masked(&self, x: &Tensor, masks: &[(usize, f64)]) -> Result<Tensor> {
        self.check_input(x)?;
        let b = x.cols();
        if b <= EVAL_CHUNK {
            let mut tape = Tape::new();
            let (out, _) = self.record(&mut tape, x, masks)?;
            return Ok(tape.value(out).clone());
        }
        let mut logits = Tensor::zeros(self.spec.output_width, b);
        for start in (0..b).step_by(EVAL_CHUNK) {
            let cols: Vec<usize> = (start..(start + EVAL_CHUNK).min(b)).collect();
            let mut tape = Tape::new();
            let (out, _) = self.record(&mut tape, &x.select_cols(&cols), masks)?;
            let chunk = tape.value(out);
            for r in 0..chunk.rows() {
                logits.row_mut(r)[start..start + cols.len()].copy_from_slice(chunk.row(r));
            }
        }
        Ok(logits)
    }

    /// Accuracy and mean cross-entropy on `data`, at full width when
    /// `widths` is `None`.
    pub fn evaluate(&self, data: &Dataset, widths: Option<&Widths>) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty dataset".into()));
        }
        let logits = match widths {
            Some(w) => self.forward_eval(data.inputs(), w)?,
            None => self.forward(data.inputs())?,
        };
        let correct = argmax_columns(&logits)
            .iter()
            .zip(data.labels())
            .filter(|(p, l)| p == l)
            .count();
        Ok(Evaluation {
            accuracy: correct as f64 / data.len() as f64,
            loss: softmax_cross_entropy(&logits, data.labels())?,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rows() != self.spec.input_width {
            return Err(Error::Shape {
                op: "network input",
                left: x.shape(),
                right: (self.spec.input_width, x.cols()),
            });
        }
        Ok(())
    }

    /// Records the network on `tape`. `masks` holds `(keep, scale)` for
    /// each dropout layer in order.
    fn record(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        masks: &[(usize, f64)],
    ) -> Result<(NodeId, Vec<ParamNodes>)> {
        self.check_input(x)?;
        let mut cur = tape.constant(x.clone());
        let mut nodes = Vec::with_capacity(self.params.len());
        let mut linear = 0;
        let mut sd = 0;
        let mut saved: HashMap<&str, NodeId> = HashMap::new();
        for layer in &self.spec.layers {
            match layer {
                LayerSpec::Linear { .. } => {
                    let p = &self.params[linear];
                    let w = tape.leaf(p.weight.clone());
                    cur = tape.matmul(w, cur)?;
                    let b = match &p.bias {
                        Some(bias) => {
                            let b = tape.leaf(bias.clone());
                            cur = tape.add_bias(cur, b)?;
                            Some(b)
                        }
                        None => None,
                    };
                    nodes.push(ParamNodes { weight: w, bias: b });
                    linear += 1;
                }
                LayerSpec::Activation { activation } => {
                    cur = match activation {
                        Activation::Relu => tape.relu(cur),
                        Activation::LeakyRelu { slope } => tape.leaky_relu(cur, *slope),
                    };
                }
                LayerSpec::StructuralDropout(cfg) => {
                    let (keep, scale) = masks[sd];
                    if !(keep == cfg.width() && scale == 1.0) {
                        cur = tape.prefix_scale(cur, keep, scale)?;
                    }
                    sd += 1;
                }
                LayerSpec::SkipSource { tag } => {
                    saved.insert(tag, cur);
                }
                LayerSpec::SkipMerge { tags } => {
                    let mut inputs = vec![cur];
                    inputs.extend(tags.iter().map(|t| saved[t.as_str()]));
                    cur = tape.interleave(&inputs)?;
                }
            }
        }
        Ok((cur, nodes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(p: f64) -> ModelSpec {
        ModelSpec::mlp(
            "tiny",
            3,
            &[6, 5],
            4,
            Activation::Relu,
            Some(DropoutSettings::with_p(p)),
        )
        .unwrap()
    }

    fn input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn init_shapes_and_bounds() {
        let spec = ModelSpec::mlp("s", 2, &[], 3, Activation::Relu, None).unwrap();
        let net = Network::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = &net.params()[0];
        assert_eq!(p.weight.shape(), (3, 2));
        assert_eq!(p.bias.as_ref().unwrap(), &Tensor::zeros(3, 1));
        let s = 0.5f64.sqrt();
        assert!(p.weight.data().iter().all(|w| w.abs() < s));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Network::init(tiny(0.5), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Network::init(tiny(0.5), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_variance_matches_uniform_moment() {
        // one 400 x 250 layer gives 1e5 draws; Var U(-s, s) = s^2 / 3
        let spec = ModelSpec::mlp("v", 400, &[], 250, Activation::Relu, None).unwrap();
        let net = Network::init(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = net.params()[0].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expect = (1.0 / 400.0) / 3.0;
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn p_zero_training_equals_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(tiny(0.0), &mut rng).unwrap();
        let x = input(&mut rng, 3, 7);
        let pass = net.forward_train(&x, &mut rng).unwrap();
        assert!(pass.decisions.iter().all(|d| d.full_pass));
        let plain = ModelSpec::mlp("plain", 3, &[6, 5], 4, Activation::Relu, None).unwrap();
        let plain = Network::from_parts(plain, net.params().to_vec()).unwrap();
        assert_eq!(pass.tape.value(pass.logits), &plain.forward(&x).unwrap());
    }

    #[test]
    fn training_forward_is_reproducible() {
        let net = Network::init(tiny(0.5), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = input(&mut ChaCha8Rng::seed_from_u64(4), 3, 5);
        let a = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.tape.value(a.logits), b.tape.value(b.logits));
    }

    #[test]
    fn eval_matches_fixed_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Network::init(tiny(0.5), &mut rng).unwrap();
        let x = input(&mut rng, 3, 4);
        for k in 1..=5 {
            let eval = net.forward_eval(&x, &Widths::Shared(k)).unwrap();
            let pass = net
                .forward_with_decisions(&x, &[SdDecision::truncate(k), SdDecision::truncate(k)])
                .unwrap();
            assert_eq!(&eval, pass.tape.value(pass.logits));
        }
        assert_eq!(net.forward_eval(&x, &Widths::PerLayer(vec![6, 5])).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn eval_rejects_bad_widths() {
        let net = Network::init(tiny(0.5), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let x = Tensor::zeros(3, 1);
        assert!(matches!(net.forward_eval(&x, &Widths::Shared(6)), Err(Error::WidthOutOfRange { layer: 1, .. })));
        assert!(matches!(net.forward_eval(&x, &Widths::Shared(0)), Err(Error::WidthOutOfRange { .. })));
        assert!(matches!(net.forward_eval(&x, &Widths::PerLayer(vec![2])), Err(Error::WidthCount { .. })));
        assert!(net.forward_eval(&Tensor::zeros(2, 1), &Widths::Shared(2)).is_err());
    }

    #[test]
    fn chunked_eval_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::init(tiny(0.5), &mut rng).unwrap();
        let x = input(&mut rng, 3, EVAL_CHUNK + 37);
        let all = net.forward_eval(&x, &Widths::Shared(3)).unwrap();
        let tail: Vec<usize> = (EVAL_CHUNK..EVAL_CHUNK + 37).collect();
        let part = net.forward_eval(&x.select_cols(&tail), &Widths::Shared(3)).unwrap();
        assert_eq!(all.select_cols(&(EVAL_CHUNK..EVAL_CHUNK + 37).collect::<Vec<_>>()), part);
    }

    #[test]
    fn decisions_are_independent_across_layers() {
        let spec = ModelSpec::mlp(
            "two",
            2,
            &[32, 32],
            2,
            Activation::Relu,
            Some(DropoutSettings::with_p(1.0)),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = Network::init(spec, &mut rng).unwrap();
        let draws: Vec<(f64, f64)> = (0..10_000)
            .map(|_| {
                let d = net.sample_decisions(&mut rng);
                (d[0].cutoff as f64, d[1].cutoff as f64)
            })
            .collect();
        let n = draws.len() as f64;
        let (ma, mb) = draws.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
        let cov: f64 = draws.iter().map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = draws.iter().map(|(x, _)| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = draws.iter().map(|(_, y)| (y - mb).powi(2)).sum::<f64>() / n;
        let r = cov / (va * vb).sqrt();
        assert!(r.abs() < 0.05, "r = {r}");
    }

    #[test]
    fn from_parts_checks_shapes() {
        let net = Network::init(tiny(0.5), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mut params = net.params().to_vec();
        params[1].bias = None;
        assert!(Network::from_parts(tiny(0.5), params).is_err());
        assert!(Network::from_parts(tiny(0.5), net.params()[..2].to_vec()).is_err());
    }

    #[test]
    fn sd_free_network_rejects_shared_width() {
        let spec = ModelSpec::mlp("plain", 2, &[3], 2, Activation::Relu, None).unwrap();
        let net = Network::init(spec, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert!(matches!(
            net.forward_eval(&Tensor::zeros(2, 1), &Widths::Shared(1)),
            Err(Error::InvalidConfig(_))
        ));
    }
}
