//! Structural Dropout.
//!
//! During training each layer draws a cutoff `i` and keeps only the first
//! `i` features, rescaled by `N / i`; with probability `1 - p` the layer is
//! the identity instead. At inference the cutoff is fixed to a chosen width
//! `k`. Because the zeros always form a trailing block, the layers on either
//! side can be sliced rather than masked (see [`crate::prune`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of one Structural Dropout layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct SdConfig {
    width: usize,
    p: f64,
    lower_bound: usize,
    group: usize,
    admissible: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawConfig {
    width: usize,
    #[serde(default = "default_p")]
    p: f64,
    #[serde(default = "one")]
    lower_bound: usize,
    #[serde(default = "one")]
    group: usize,
}

fn default_p() -> f64 {
    0.5
}

fn one() -> usize {
    1
}

impl TryFrom<RawConfig> for SdConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        SdConfig::new(raw.width, raw.p, raw.lower_bound, raw.group)
    }
}

impl From<SdConfig> for RawConfig {
    fn from(cfg: SdConfig) -> Self {
        RawConfig {
            width: cfg.width,
            p: cfg.p,
            lower_bound: cfg.lower_bound,
            group: cfg.group,
        }
    }
}

impl SdConfig {
    pub fn new(width: usize, p: f64, lower_bound: usize, group: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("dropout width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability {p} not in [0, 1]")));
        }
        if lower_bound == 0 || lower_bound > width {
            return Err(Error::InvalidConfig(format!(
                "lower bound {lower_bound} not in [1, {width}]"
            )));
        }
        if group == 0 || group > width {
            return Err(Error::InvalidConfig(format!("group size {group} not in [1, {width}]")));
        }
        let mut admissible: Vec<usize> = (1..=width / group)
            .map(|m| m * group)
            .filter(|&c| c >= lower_bound)
            .collect();
        if !width.is_multiple_of(group) {
            admissible.push(width);
        }
        Ok(SdConfig {
            width,
            p,
            lower_bound,
            group,
            admissible,
        })
    }

    /// `p = 0.5`, `lb = 1`, `n = 1`.
    pub fn with_width(width: usize) -> Result<Self> {
        Self::new(width, 0.5, 1, 1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lower_bound(&self) -> usize {
        self.lower_bound
    }

    pub fn group(&self) -> usize {
        self.group
    }

    /// Cutoffs the sampler can produce, ascending. Always ends with the
    /// full width.
    pub fn admissible(&self) -> &[usize] {
        &self.admissible
    }

    pub fn is_admissible(&self, k: usize) -> bool {
        self.admissible.binary_search(&k).is_ok()
    }

    pub fn check_width(&self, k: usize, layer: usize) -> Result<()> {
        if k < self.lower_bound || k > self.width {
            return Err(Error::WidthOutOfRange {
                layer,
                width: k,
                min: self.lower_bound,
                max: self.width,
            });
        }
        Ok(())
    }
}

/// The cutoff drawn for one layer in one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdDecision {
    pub cutoff: usize,
    pub full_pass: bool,
}

impl SdDecision {
    pub fn full(width: usize) -> Self {
        SdDecision {
            cutoff: width,
            full_pass: true,
        }
    }

    pub fn truncate(cutoff: usize) -> Self {
        SdDecision {
            cutoff,
            full_pass: false,
        }
    }

    /// Number of leading features kept and their scale for a layer of
    /// `width` features.
    pub fn keep_and_scale(&self, width: usize) -> (usize, f64) {
        if self.full_pass {
            (width, 1.0)
        } else {
            (self.cutoff, width as f64 / self.cutoff as f64)
        }
    }
}

pub fn sample_decision<R: Rng + ?Sized>(cfg: &SdConfig, rng: &mut R) -> SdDecision {
    // p = 0 and p = 1 consume no coin flip so that p = 0 networks draw
    // nothing from the stream at all.
    let dropped = cfg.p >= 1.0 || (cfg.p > 0.0 && rng.random_bool(cfg.p));
    if !dropped {
        return SdDecision::full(cfg.width);
    }
    let idx = rng.random_range(0..cfg.admissible.len());
    SdDecision::truncate(cfg.admissible[idx])
}

/// Scales rows `..keep` of `x` by `scale` and zeroes the remaining rows.
pub(crate) fn prefix_scale(x: &Tensor, keep: usize, scale: f64) -> Result<Tensor> {
    if keep > x.rows() {
        return Err(Error::Shape {
            op: "prefix_scale",
            left: x.shape(),
            right: (keep, x.cols()),
        });
    }
    if keep == x.rows() && scale == 1.0 {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let live = keep * x.cols();
    for (o, v) in out.data_mut()[..live].iter_mut().zip(&x.data()[..live]) {
        *o = v * scale;
    }
    Ok(out)
}

/// Training-mode transform for a fixed decision.
pub fn apply_train(x: &Tensor, decision: &SdDecision, cfg: &SdConfig) -> Result<Tensor> {
    if x.rows() != cfg.width {
        return Err(Error::Shape {
            op: "apply_train",
            left: x.shape(),
            right: (cfg.width, x.cols()),
        });
    }
    let (keep, scale) = decision.keep_and_scale(cfg.width);
    prefix_scale(x, keep, scale)
}

/// Inference-mode transform at width `k`.
pub fn apply_test(x: &Tensor, k: usize, width: usize) -> Result<Tensor> {
    if x.rows() != width {
        return Err(Error::Shape {
            op: "apply_test",
            left: x.shape(),
            right: (width, x.cols()),
        });
    }
    if k == 0 || k > width {
        return Err(Error::WidthOutOfRange {
            layer: 0,
            width: k,
            min: 1,
            max: width,
        });
    }
    prefix_scale(x, k, width as f64 / k as f64)
}

/// Output row of element `j` of input `t` when inputs of the given row
/// counts are merged round-robin by feature index.
///
/// For equal lengths `M` across `n` inputs this is `j * n + t`. Shorter
/// inputs simply drop out of the rotation once exhausted.
pub(crate) fn interleave_positions(rows: &[usize]) -> Vec<Vec<usize>> {
    let mut positions: Vec<Vec<usize>> = rows.iter().map(|&r| Vec::with_capacity(r)).collect();
    let longest = rows.iter().copied().max().unwrap_or(0);
    let mut next = 0;
    for j in 0..longest {
        for (t, &r) in rows.iter().enumerate() {
            if j < r {
                positions[t].push(next);
                next += 1;
            }
        }
    }
    positions
}

/// Round-robin merge of inputs that may differ in row count.
pub(crate) fn interleave_ragged(xs: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        return Err(Error::InvalidConfig("interleave needs at least one input".into()));
    };
    let cols = first.cols();
    if let Some(bad) = xs.iter().find(|x| x.cols() != cols) {
        return Err(Error::Shape {
            op: "interleave",
            left: first.shape(),
            right: bad.shape(),
        });
    }
    let rows: Vec<usize> = xs.iter().map(|x| x.rows()).collect();
    let total = rows.iter().sum();
    let mut out = Tensor::zeros(total, cols);
    for (x, pos) in xs.iter().zip(interleave_positions(&rows)) {
        for (j, &p) in pos.iter().enumerate() {
            out.row_mut(p).copy_from_slice(x.row(j));
        }
    }
    Ok(out)
}

/// Interleaves equally shaped inputs: output row `j * len + t` holds row
/// `j` of input `t`. A prefix-sparse set of inputs stays prefix-sparse.
pub fn interleave(xs: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = xs.iter().collect();
    if let Some(first) = refs.first() {
        if let Some(bad) = refs.iter().find(|x| x.shape() != first.shape()) {
            return Err(Error::Shape {
                op: "interleave",
                left: first.shape(),
                right: bad.shape(),
            });
        }
    }
    interleave_ragged(&refs)
}
