//! Turning a Structural Dropout network into a physically smaller one.
//!
//! At width `k` every feature past `k` is exactly zero, so the linear layer
//! producing the features only needs its first `k` rows and the layer
//! consuming them only its first `k` columns:
//!
//! ```text
//! A · SD_test(B x, k) = A[:, :k] · ((N / k) · B[:k, :] x)
//! ```
//!
//! The `N / k` factor is folded into the producer's rows and bias. That is
//! exact only when every activation between the producer and the dropout
//! layer is positively homogeneous, which the slicer checks.
//!
//! Skip merges interleave their inputs, so the live features of a merge are
//! a strided index set rather than a prefix; consumers of a merge are sliced
//! by that index set.

use crate::error::{Error, Result};
use crate::network::{LayerSpec, LinearParams, ModelSpec, Network, PrunedFrom, Widths};
use crate::sd::interleave_positions;

/// Per-dropout-layer widths to prune to.
pub type PruneWidth = Widths;

/// What survives of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearSlice {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub scale: f64,
}

impl LinearSlice {
    fn full(rows: usize, cols: Vec<usize>) -> Self {
        LinearSlice {
            rows: (0..rows).collect(),
            cols,
            scale: 1.0,
        }
    }
}

/// Slices for every linear layer of a spec at fixed per-layer widths.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SlicePlan {
    pub linears: Vec<LinearSlice>,
    /// Layer list of the pruned model, dropout layers removed.
    pub layers: Vec<LayerSpec>,
}

fn is_prefix(live: &[usize]) -> bool {
    live.iter().enumerate().all(|(i, &v)| i == v)
}

/// Walks the spec tracking which feature indices can be nonzero.
pub(crate) fn slice_plan(spec: &ModelSpec, widths: &[usize]) -> Result<SlicePlan> {
    let sd_count = spec.sd_count();
    if widths.len() != sd_count {
        return Err(Error::WidthCount {
            expected: sd_count,
            got: widths.len(),
        });
    }
    let mut live: Vec<usize> = (0..spec.input_width).collect();
    let mut linears: Vec<LinearSlice> = Vec::new();
    let mut layers = Vec::new();
    // linear layer whose (activated) output is the current vector
    let mut producer: Option<usize> = None;
    let mut saved: Vec<(&str, Vec<usize>, usize)> = Vec::new();
    let mut full_width = spec.input_width;
    let mut sd = 0;

    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Linear { output, bias, .. } => {
                linears.push(LinearSlice::full(*output, live.clone()));
                layers.push(LayerSpec::Linear {
                    input: live.len(),
                    output: *output,
                    bias: *bias,
                });
                live = (0..*output).collect();
                full_width = *output;
                producer = Some(linears.len() - 1);
            }
            LayerSpec::Activation { activation } => {
                if !activation.is_positively_homogeneous() {
                    producer = None;
                }
                layers.push(layer.clone());
            }
            LayerSpec::StructuralDropout(cfg) => {
                let k = widths[sd];
                cfg.check_width(k, sd)?;
                let Some(p) = producer else {
                    return Err(Error::UnsupportedPrune(format!(
                        "dropout layer {sd} (spec layer {i}) is not preceded by a linear layer \
                         and positively homogeneous activations only"
                    )));
                };
                live.retain(|&f| f < k);
                let slice = &mut linears[p];
                slice.rows.retain(|&r| r < k);
                slice.scale *= cfg.width() as f64 / k as f64;
                sd += 1;
            }
            LayerSpec::SkipSource { tag } => {
                saved.push((tag, live.clone(), full_width));
                producer = None;
                layers.push(layer.clone());
            }
            LayerSpec::SkipMerge { tags } => {
                let mut inputs = vec![(live.clone(), full_width)];
                for tag in tags {
                    let (_, l, w) = saved
                        .iter()
                        .find(|(t, ..)| t == tag)
                        .expect("validated spec");
                    inputs.push((l.clone(), *w));
                }
                if let Some((bad, _)) = inputs.iter().find(|(l, _)| !is_prefix(l)) {
                    return Err(Error::UnsupportedPrune(format!(
                        "skip merge at spec layer {i} has an input whose live features {bad:?} \
                         are not a prefix"
                    )));
                }
                let full: Vec<usize> = inputs.iter().map(|(_, w)| *w).collect();
                let positions = interleave_positions(&full);
                let mut merged: Vec<usize> = inputs
                    .iter()
                    .zip(&positions)
                    .flat_map(|((l, _), pos)| pos[..l.len()].iter().copied())
                    .collect();
                merged.sort_unstable();
                live = merged;
                full_width = full.iter().sum();
                producer = None;
                layers.push(layer.clone());
            }
        }
    }
    if !is_prefix(&live) || live.len() != spec.output_width {
        return Err(Error::UnsupportedPrune(
            "network output is truncated by a dropout layer".into(),
        ));
    }
    // dropout layers may have cut rows after their producer was emitted
    let mut slices = linears.iter();
    for layer in &mut layers {
        if let LayerSpec::Linear { output, .. } = layer {
            *output = slices.next().expect("one slice per linear").rows.len();
        }
    }
    Ok(SlicePlan { linears, layers })
}

impl SlicePlan {
    fn materialize(&self, params: &[LinearParams]) -> Vec<LinearParams> {
        self.linears
            .iter()
            .zip(params)
            .map(|(s, p)| LinearParams {
                weight: p.weight.select(&s.rows, &s.cols).scale(s.scale),
                bias: p
                    .bias
                    .as_ref()
                    .map(|b| b.select(&s.rows, &[0]).scale(s.scale)),
            })
            .collect()
    }

    fn param_count(&self, spec: &ModelSpec) -> usize {
        self.linears
            .iter()
            .zip(biases(spec))
            .map(|(s, bias)| s.rows.len() * s.cols.len() + if bias { s.rows.len() } else { 0 })
            .sum()
    }

    fn macs(&self) -> usize {
        self.linears.iter().map(|s| s.rows.len() * s.cols.len()).sum()
    }
}

fn biases(spec: &ModelSpec) -> impl Iterator<Item = bool> + '_ {
    spec.layers.iter().filter_map(|l| match l {
        LayerSpec::Linear { bias, .. } => Some(*bias),
        _ => None,
    })
}

/// An SD-free network whose forward pass equals the parent's
/// [`Network::forward_eval`] at the widths it was pruned to.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedNetwork {
    network: Network,
}

impl PrunedNetwork {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn widths(&self) -> &[usize] {
        &self
            .network
            .spec()
            .pruned
            .as_ref()
            .expect("pruned spec")
            .widths
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }
}

/// Slices `net` down to `widths`, folding the dropout normalization into
/// the producing linear layers.
pub fn prune(net: &Network, widths: &PruneWidth) -> Result<PrunedNetwork> {
    let ks = widths.resolve(net.spec())?;
    Ok(PrunedNetwork {
        network: prune_resolved(net, &ks)?,
    })
}

pub(crate) fn prune_resolved(net: &Network, ks: &[usize]) -> Result<Network> {
    let (network, _) = prune_with_plan(net, ks)?;
    Ok(network)
}

pub(crate) fn prune_with_plan(net: &Network, ks: &[usize]) -> Result<(Network, SlicePlan)> {
    let spec = net.spec();
    let plan = slice_plan(spec, ks)?;
    let pruned_spec = ModelSpec {
        name: format!("{}-pruned", spec.name),
        input_width: spec.input_width,
        output_width: spec.output_width,
        layers: plan.layers.clone(),
        pruned: Some(PrunedFrom {
            parent: spec.name.clone(),
            widths: ks.to_vec(),
        }),
    };
    let network = Network::from_parts(pruned_spec, plan.materialize(net.params()))?;
    Ok((network, plan))
}

/// Exact parameter count (weights plus biases) of the network pruned to
/// `widths`.
pub fn param_count(spec: &ModelSpec, widths: &PruneWidth) -> Result<usize> {
    let ks = widths.resolve(spec)?;
    Ok(slice_plan(spec, &ks)?.param_count(spec))
}

/// Multiply-accumulates per sample for one forward pass of the network
/// pruned to `widths`.
pub fn flop_estimate(spec: &ModelSpec, widths: &PruneWidth) -> Result<usize> {
    let ks = widths.resolve(spec)?;
    Ok(slice_plan(spec, &ks)?.macs())
}
