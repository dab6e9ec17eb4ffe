//! Evaluating one trained network at many shared widths and picking one.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ModelSpec, Network, Widths};
use crate::prune::{flop_estimate, param_count, prune};

/// Shared widths to evaluate, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepPlan {
    widths: Vec<usize>,
    stride: usize,
}

/// Smallest and largest width every dropout layer accepts.
fn shared_range(spec: &ModelSpec) -> Result<(usize, usize)> {
    let lo = spec.sd_layers().map(|c| c.lower_bound()).max();
    let hi = spec.sd_layers().map(|c| c.width()).min();
    match (lo, hi) {
        (Some(lo), Some(hi)) if lo <= hi => Ok((lo, hi)),
        (Some(lo), Some(hi)) => Err(Error::InvalidConfig(format!(
            "no shared width fits every dropout layer (lower bound {lo} > width {hi})"
        ))),
        _ => Err(Error::InvalidConfig(format!(
            "model {:?} has no structural dropout layers to sweep",
            spec.name
        ))),
    }
}

impl SweepPlan {
    /// Every `stride`-th width counting down from the largest shared width,
    /// so the full-width model is always included.
    pub fn strided(spec: &ModelSpec, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("sweep stride must be at least 1".into()));
        }
        let (lo, hi) = shared_range(spec)?;
        let mut widths: Vec<usize> = (lo..=hi).rev().step_by(stride).collect();
        widths.reverse();
        Ok(SweepPlan { widths, stride })
    }

    pub fn full(spec: &ModelSpec) -> Result<Self> {
        Self::strided(spec, 1)
    }

    /// An explicit width list; it must be strictly increasing and in range.
    pub fn explicit(spec: &ModelSpec, widths: Vec<usize>) -> Result<Self> {
        let (lo, hi) = shared_range(spec)?;
        if widths.is_empty() {
            return Err(Error::InvalidConfig("sweep plan has no widths".into()));
        }
        if widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("sweep widths must be strictly increasing".into()));
        }
        for &k in &widths {
            if k < lo || k > hi {
                return Err(Error::WidthOutOfRange {
                    layer: 0,
                    width: k,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(SweepPlan { widths, stride: 1 })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// One row of the size/accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub width: usize,
    pub params: usize,
    /// Multiply-accumulates per sample.
    pub flops: usize,
    /// Accuracy of the pruned network.
    pub metric: f64,
    pub seconds: f64,
}

impl SweepRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &SweepRecord) -> bool {
        self.width == other.width
            && self.params == other.params
            && self.flops == other.flops
            && self.metric == other.metric
    }
}

/// Prunes `net` to each width of `plan` and measures accuracy on `data`.
/// Widths run in parallel; records come back in width order.
pub fn sweep(net: &Network, data: &Dataset, plan: &SweepPlan) -> Result<Vec<SweepRecord>> {
    let spec = net.spec();
    plan.widths
        .par_iter()
        .map(|&k| {
            let started = Instant::now();
            let widths = Widths::Shared(k);
            let pruned = prune(net, &widths)?;
            let metric = pruned.network().evaluate(data, None)?.accuracy;
            let record = SweepRecord {
                width: k,
                params: param_count(spec, &widths)?,
                flops: flop_estimate(spec, &widths)?,
                metric,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::debug!("width {k}: accuracy {metric:.4}");
            Ok(record)
        })
        .collect()
}

/// How to choose a width from sweep records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectPolicy {
    BestMetric,
    /// Smallest width whose metric is at least `best - eps`.
    SmallestWithin(f64),
    /// Best metric among records with at most this many parameters.
    MaxParams(usize),
}

impl fmt::Display for SelectPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectPolicy::BestMetric => write!(f, "best"),
            SelectPolicy::SmallestWithin(eps) => write!(f, "smallest_within:{eps}"),
            SelectPolicy::MaxParams(n) => write!(f, "max_params:{n}"),
        }
    }
}

impl FromStr for SelectPolicy {
    type Err = Error;

    /// `best`, `smallest_within:EPS` or `max_params:N`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown policy {s:?} (use best, smallest_within:EPS or max_params:N)"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("best" | "best_metric", None) => Ok(SelectPolicy::BestMetric),
            ("smallest_within", Some(a)) => {
                let eps: f64 = a.parse().map_err(|_| bad())?;
                if !(eps >= 0.0 && eps.is_finite()) {
                    return Err(bad());
                }
                Ok(SelectPolicy::SmallestWithin(eps))
            }
            ("max_params", Some(a)) => Ok(SelectPolicy::MaxParams(a.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Highest metric, smallest width on ties.
fn best<'a>(records: impl Iterator<Item = &'a SweepRecord>) -> Option<&'a SweepRecord> {
    records.fold(None, |acc: Option<&SweepRecord>, r| match acc {
        Some(a) if a.metric > r.metric || (a.metric == r.metric && a.width < r.width) => Some(a),
        _ => Some(r),
    })
}

/// Picks a record according to `policy`. Ties go to the smaller width.
pub fn select_width<'a>(records: &'a [SweepRecord], policy: &SelectPolicy) -> Result<&'a SweepRecord> {
    let top = best(records.iter()).ok_or_else(|| Error::Policy("no sweep records to select from".into()))?;
    match *policy {
        SelectPolicy::BestMetric => Ok(top),
        SelectPolicy::SmallestWithin(eps) => Ok(records
            .iter()
            .filter(|r| r.metric >= top.metric - eps)
            .min_by_key(|r| r.width)
            .expect("the best record qualifies")),
        SelectPolicy::MaxParams(budget) => match best(records.iter().filter(|r| r.params <= budget)) {
            Some(r) => Ok(r),
            None => {
                let closest = records.iter().min_by_key(|r| (r.params, r.width)).expect("non-empty");
                Err(Error::Infeasible {
                    width: closest.width,
                    params: closest.params,
                })
            }
        },
    }
}

fn sorted(records: &[SweepRecord]) -> Vec<&SweepRecord> {
    let mut rows: Vec<_> = records.iter().collect();
    rows.sort_by_key(|r| r.width);
    rows
}

/// Writes `width,params,flops,metric,seconds`, one row per record in
/// ascending width order.
pub fn write_csv(records: &[SweepRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in sorted(records) {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Line plot of accuracy against parameter count.
pub fn render_svg(records: &[SweepRecord]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let rows = sorted(records);
    let max_params = rows.iter().map(|r| r.params).max().unwrap_or(1).max(1) as f64;
    let x = |p: usize| PAD + (W - 2.0 * PAD) * p as f64 / max_params;
    let y = |m: f64| H - PAD - (H - 2.0 * PAD) * m.clamp(0.0, 1.0);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{tx}" y="{ty}" text-anchor="end">{tick:.2}</text>"#,
            tx = PAD - 6.0,
            ty = y(tick) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{cx}" y="{ty}" text-anchor="middle">parameters (max {max_params})</text>"#,
        cx = W / 2.0,
        ty = H - PAD / 3.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{cy}" transform="rotate(-90 14 {cy})" text-anchor="middle">accuracy</text>"#,
        cy = H / 2.0
    );
    let points: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", x(r.params), y(r.metric))).collect();
    let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, points.join(" "));
    for r in &rows {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"><title>k={} params={} acc={:.4}</title></circle>"#,
            x(r.params),
            y(r.metric),
            r.width,
            r.params,
            r.metric
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn report(records: &[SweepRecord], dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(records, dir.join(format!("{stem}.csv")))?;
    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg_path, render_svg(records)).map_err(|e| Error::io(&svg_path, e))
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
/// Returns `None` when either side is constant or lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
