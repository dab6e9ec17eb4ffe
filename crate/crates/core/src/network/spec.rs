use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sd::SdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    /// `f(c * x) = c * f(x)` for every `c > 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        match self {
            Activation::Relu => true,
            Activation::LeakyRelu { slope } => slope.is_finite(),
        }
    }
}

/// One step of a sequential model.
///
/// `SkipSource` stores the current activations under a tag and passes them
/// through; `SkipMerge` interleaves the current activations with the
/// tagged ones (current first, then the tags in order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        #[serde(rename = "in")]
        input: usize,
        #[serde(rename = "out")]
        output: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Activation {
        #[serde(flatten)]
        activation: Activation,
    },
    StructuralDropout(SdConfig),
    SkipSource {
        tag: String,
    },
    SkipMerge {
        tags: Vec<String>,
    },
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn linear(input: usize, output: usize) -> Self {
        LayerSpec::Linear {
            input,
            output,
            bias: true,
        }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation {
            activation: Activation::Relu,
        }
    }

    pub fn leaky_relu(slope: f64) -> Self {
        LayerSpec::Activation {
            activation: Activation::LeakyRelu { slope },
        }
    }
}

/// Marks a spec produced by pruning; such specs contain no dropout layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedFrom {
    pub parent: String,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_width: usize,
    pub output_width: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned: Option<PrunedFrom>,
}

/// Dropout settings applied to every hidden layer of a preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSettings {
    pub p: f64,
    pub lower_bound: usize,
    pub group: usize,
}

impl DropoutSettings {
    pub fn with_p(p: f64) -> Self {
        DropoutSettings {
            p,
            lower_bound: 1,
            group: 1,
        }
    }
}

impl ModelSpec {
    /// `Linear -> activation -> SD` for each hidden width, then a linear
    /// classifier head.
    pub fn mlp(
        name: &str,
        input: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        dropout: Option<DropoutSettings>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(LayerSpec::linear(width, h));
            layers.push(LayerSpec::Activation { activation });
            if let Some(d) = dropout {
                layers.push(LayerSpec::StructuralDropout(SdConfig::new(
                    h,
                    d.p,
                    d.lower_bound,
                    d.group,
                )?));
            }
            width = h;
        }
        layers.push(LayerSpec::linear(width, classes));
        let spec = ModelSpec {
            name: name.to_string(),
            input_width: input,
            output_width: classes,
            layers,
            pruned: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 784 -> 256 -> 256 -> 10 with dropout after both hidden activations.
    pub fn mnist(p: f64) -> Self {
        Self::mlp(
            "mnist",
            784,
            &[256, 256],
            10,
            Activation::Relu,
            Some(DropoutSettings::with_p(p)),
        )
        .expect("preset is well formed")
    }

    pub fn sd_layers(&self) -> impl Iterator<Item = &SdConfig> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::StructuralDropout(cfg) => Some(cfg),
            _ => None,
        })
    }

    pub fn sd_count(&self) -> usize {
        self.sd_layers().count()
    }

    pub fn linear_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Linear { .. }))
            .count()
    }

    /// Checks width chaining, dropout widths, skip tags and the output
    /// width.
    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, msg: String| Err(Error::InvalidSpec(format!("layer {i}: {msg}")));
        if self.input_width == 0 || self.output_width == 0 {
            return Err(Error::InvalidSpec("input and output widths must be positive".into()));
        }
        let mut width = self.input_width;
        let mut saved: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear { input, output, .. } => {
                    if *input != width {
                        return bad(i, format!("linear expects {input} inputs but receives {width}"));
                    }
                    if *output == 0 {
                        return bad(i, "linear layer with zero outputs".into());
                    }
                    width = *output;
                }
                LayerSpec::Activation { activation } => {
                    if let Activation::LeakyRelu { slope } = activation {
                        if !slope.is_finite() {
                            return bad(i, "leaky relu slope must be finite".into());
                        }
                    }
                }
                LayerSpec::StructuralDropout(cfg) => {
                    if self.pruned.is_some() {
                        return bad(i, "pruned specs cannot contain structural dropout".into());
                    }
                    if cfg.width() != width {
                        return bad(
                            i,
                            format!("dropout width {} but incoming width {width}", cfg.width()),
                        );
                    }
                }
                LayerSpec::SkipSource { tag } => {
                    if saved.insert(tag, width).is_some() {
                        return bad(i, format!("skip tag {tag:?} defined twice"));
                    }
                }
                LayerSpec::SkipMerge { tags } => {
                    if tags.is_empty() {
                        return bad(i, "skip merge without sources".into());
                    }
                    let mut total = width;
                    for tag in tags {
                        match saved.get(tag.as_str()) {
                            Some(w) => {
                                // equal widths unless the spec is a pruned one
                                if *w != width && self.pruned.is_none() {
                                    return bad(
                                        i,
                                        format!("skip {tag:?} has width {w}, current width {width}"),
                                    );
                                }
                                total += w;
                            }
                            None => return bad(i, format!("unknown skip tag {tag:?}")),
                        }
                    }
                    width = total;
                }
            }
        }
        if width != self.output_width {
            return Err(Error::InvalidSpec(format!(
                "final width {width} does not match output width {}",
                self.output_width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_preset_shape() {
        let spec = ModelSpec::mnist(0.5);
        assert_eq!(spec.sd_count(), 2);
        assert_eq!(spec.linear_count(), 3);
        assert!(spec.sd_layers().all(|c| c.width() == 256 && c.p() == 0.5));
    }

    #[test]
    fn json_round_trip() {
        let mut spec = ModelSpec::mnist(0.25);
        spec.layers.insert(1, LayerSpec::leaky_relu(0.01));
        let json = serde_json::to_string_pretty(&spec).unwrap();
        assert!(json.contains(r#""type": "structural_dropout""#), "{json}");
        assert!(json.contains(r#""kind": "leaky_relu""#), "{json}");
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn rejects_chaining_violations() {
        let mut spec = ModelSpec::mnist(0.5);
        spec.layers[2] = LayerSpec::linear(128, 256);
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::mnist(0.5);
        spec.layers[2] = LayerSpec::StructuralDropout(SdConfig::with_width(128).unwrap());
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::mnist(0.5);
        spec.output_width = 9;
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::mnist(0.5);
        spec.layers.insert(3, LayerSpec::SkipMerge { tags: vec!["nope".into()] });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn skip_merge_doubles_width() {
        let spec = ModelSpec {
            name: "skip".into(),
            input_width: 3,
            output_width: 2,
            layers: vec![
                LayerSpec::linear(3, 4),
                LayerSpec::relu(),
                LayerSpec::StructuralDropout(SdConfig::with_width(4).unwrap()),
                LayerSpec::SkipSource { tag: "a".into() },
                LayerSpec::linear(4, 4),
                LayerSpec::relu(),
                LayerSpec::StructuralDropout(SdConfig::with_width(4).unwrap()),
                LayerSpec::SkipMerge { tags: vec!["a".into()] },
                LayerSpec::linear(8, 2),
            ],
            pruned: None,
        };
        spec.validate().unwrap();
    }
}
