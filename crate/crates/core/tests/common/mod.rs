#![allow(dead_code)]

use rand::Rng;
use structdrop::network::{LayerSpec, ModelSpec, Network};
use structdrop::sd::SdConfig;
use structdrop::tensor::Tensor;

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn activation<R: Rng>(rng: &mut R) -> LayerSpec {
    if rng.random_bool(0.7) {
        LayerSpec::relu()
    } else {
        LayerSpec::leaky_relu(rng.random_range(0.01..0.3))
    }
}

/// An MLP with `1..=max_sd` dropout layers of width `widths`, random lower
/// bounds, groups and activations. With `allow_skip` it sometimes adds an
/// interleaved skip merge between the first two hidden layers.
pub fn random_spec<R: Rng>(
    rng: &mut R,
    max_sd: usize,
    widths: std::ops::RangeInclusive<usize>,
    allow_skip: bool,
) -> ModelSpec {
    let input = rng.random_range(2..=8);
    let classes = rng.random_range(2..=5);
    let hidden = rng.random_range(1..=max_sd);
    let skip = allow_skip && hidden >= 2 && rng.random_bool(0.3);
    let mut layers = Vec::new();
    let mut width = input;
    let mut first = 0;
    for h in 0..hidden {
        let n = if skip && h == 1 { first } else { rng.random_range(widths.clone()) };
        layers.push(LayerSpec::linear(width, n));
        layers.push(activation(rng));
        let lb = rng.random_range(1..=n.min(4));
        let group = rng.random_range(1..=3);
        let p = rng.random_range(0.0..=1.0);
        layers.push(LayerSpec::StructuralDropout(SdConfig::new(n, p, lb, group).unwrap()));
        width = n;
        if skip && h == 0 {
            first = n;
            layers.push(LayerSpec::SkipSource { tag: "s0".into() });
        }
        if skip && h == 1 {
            layers.push(LayerSpec::SkipMerge { tags: vec!["s0".into()] });
            width = 2 * n;
        }
    }
    layers.push(LayerSpec::linear(width, classes));
    let spec = ModelSpec {
        name: "random".into(),
        input_width: input,
        output_width: classes,
        layers,
        pruned: None,
    };
    spec.validate().unwrap();
    spec
}

pub fn random_net<R: Rng>(
    rng: &mut R,
    max_sd: usize,
    widths: std::ops::RangeInclusive<usize>,
    allow_skip: bool,
) -> Network {
    let spec = random_spec(rng, max_sd, widths, allow_skip);
    let mut net = Network::init(spec, rng).unwrap();
    // nonzero biases so bias slicing is exercised
    for p in net.params_mut() {
        if let Some(b) = &mut p.bias {
            for v in b.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    net
}

/// Shared widths every dropout layer accepts.
pub fn shared_range(spec: &ModelSpec) -> std::ops::RangeInclusive<usize> {
    let lo = spec.sd_layers().map(|c| c.lower_bound()).max().unwrap();
    let hi = spec.sd_layers().map(|c| c.width()).min().unwrap();
    lo..=hi
}

/// Random per-layer widths, each within its own layer's range.
pub fn random_widths<R: Rng>(rng: &mut R, spec: &ModelSpec) -> Vec<usize> {
    spec.sd_layers().map(|c| rng.random_range(c.lower_bound()..=c.width())).collect()
}

/// Parameter count of a plain chain of linear layers at per-layer widths,
/// counted by walking every weight and bias entry and keeping those whose
/// input and output features are both live.
pub fn enumerate_live_params(spec: &ModelSpec, ks: &[usize]) -> usize {
    fn close(open: &mut Option<(Vec<bool>, bool)>, out_live: &[bool]) -> usize {
        let Some((in_live, bias)) = open.take() else { return 0 };
        let mut count = 0;
        for &r in out_live {
            for &c in &in_live {
                count += usize::from(r && c);
            }
            count += usize::from(bias && r);
        }
        count
    }
    let mut live = vec![true; spec.input_width];
    let mut open = None;
    let mut count = 0;
    let mut sd = 0;
    for layer in &spec.layers {
        match layer {
            LayerSpec::Linear { output, bias, .. } => {
                count += close(&mut open, &live);
                open = Some((live.clone(), *bias));
                live = vec![true; *output];
            }
            LayerSpec::StructuralDropout(_) => {
                for (f, l) in live.iter_mut().enumerate() {
                    *l &= f < ks[sd];
                }
                sd += 1;
            }
            LayerSpec::Activation { .. } => {}
            other => panic!("enumeration oracle handles plain chains only, got {other:?}"),
        }
    }
    count + close(&mut open, &live)
}
