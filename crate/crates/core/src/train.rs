//! Mini-batch training with Adam and per-step dropout decisions.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{save, LinearParams, Network};
use crate::prune::{prune_with_plan, slice_plan};
use crate::sd::SdDecision;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 8e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<LinearParams>,
    v: Vec<LinearParams>,
}

impl AdamState {
    pub fn new(params: &[LinearParams]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(LinearParams::zeros_like).collect(),
            v: params.iter().map(LinearParams::zeros_like).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn adam_tensor(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, cfg: &AdamConfig, c1: f64, c2: f64) {
    let it = p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
    for ((p, &g), (m, v)) in it {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [LinearParams],
    grads: &[LinearParams],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let shape_err = |a: &Tensor, b: &Tensor| Error::Shape {
        op: "adam_step",
        left: a.shape(),
        right: b.shape(),
    };
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.weight.shape() != g.weight.shape() || p.weight.shape() != m.weight.shape() {
            return Err(shape_err(&p.weight, &g.weight));
        }
        match (&p.bias, &g.bias) {
            (Some(pb), Some(gb)) if pb.shape() == gb.shape() => {}
            (None, None) => {}
            (Some(pb), Some(gb)) => return Err(shape_err(pb, gb)),
            _ => return Err(Error::InvalidConfig("bias presence differs between params and grads".into())),
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        adam_tensor(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight, cfg, c1, c2);
        if let (Some(pb), Some(gb), Some(mb), Some(vb)) = (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias) {
            adam_tensor(pb, gb, mb, vb, cfg, c1, c2);
        }
    }
    Ok(())
}

/// Loss and parameter gradients with the dropout masks applied to full
/// width activations.
pub fn step_dense(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    decisions: &[SdDecision],
) -> Result<(f64, Vec<LinearParams>)> {
    net.forward_with_decisions(x, decisions)?.backward(labels)
}

/// Same result as [`step_dense`], computed on the sliced network: only the
/// live rows and columns of each linear layer take part in the forward and
/// backward pass. Gradients of dropped rows and columns are exactly zero.
pub fn step_fast(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    decisions: &[SdDecision],
) -> Result<(f64, Vec<LinearParams>)> {
    let widths: Vec<usize> = net.spec().sd_layers().map(|c| c.width()).collect();
    if decisions.len() != widths.len() {
        return Err(Error::WidthCount {
            expected: widths.len(),
            got: decisions.len(),
        });
    }
    let ks: Vec<usize> = decisions
        .iter()
        .zip(&widths)
        .map(|(d, &n)| if d.full_pass { n } else { d.cutoff })
        .collect();
    let (sliced, plan) = prune_with_plan(net, &ks)?;
    let (loss, sliced_grads) = sliced.forward_with_decisions(x, &[])?.backward(labels)?;

    let grads = net
        .params()
        .iter()
        .zip(&plan.linears)
        .zip(sliced_grads)
        .map(|((full, slice), g)| {
            // the sliced weights are scale * W[rows, cols]
            let mut out = full.zeros_like();
            for (ri, &r) in slice.rows.iter().enumerate() {
                let src = g.weight.row(ri);
                let dst = out.weight.row_mut(r);
                for (ci, &c) in slice.cols.iter().enumerate() {
                    dst[c] = slice.scale * src[ci];
                }
            }
            if let (Some(ob), Some(gb)) = (&mut out.bias, &g.bias) {
                for (ri, &r) in slice.rows.iter().enumerate() {
                    ob.data_mut()[r] = slice.scale * gb.data()[ri];
                }
            }
            out
        })
        .collect();
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
    /// Run each step on the sliced network instead of masking.
    pub sd_fast_path: bool,
    /// Write `epoch-NNN.sdn` into `checkpoint_dir` every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
            sd_fast_path: false,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.adam.learning_rate
            )));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::InvalidConfig("checkpoint interval given without a directory".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub decisions: Vec<SdDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Full-width validation accuracy.
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    /// One row per step: `step,epoch,loss,cut_0,full_0,cut_1,full_1,...`.
    pub fn write_steps_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let layers = self.steps.first().map_or(0, |s| s.decisions.len());
        let mut header = vec!["step".to_string(), "epoch".into(), "loss".into()];
        for l in 0..layers {
            header.push(format!("cut_{l}"));
            header.push(format!("full_{l}"));
        }
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), s.epoch.to_string(), s.loss.to_string()];
            for d in &s.decisions {
                row.push(d.cutoff.to_string());
                row.push(u8::from(d.full_pass).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One row per epoch: `epoch,mean_loss,val_accuracy,val_loss,seconds`.
    pub fn write_epochs_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mean_loss", "val_accuracy", "val_loss", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.mean_loss.to_string(),
                opt(e.val_accuracy),
                opt(e.val_loss),
                e.seconds.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains `net` on `train` and returns the updated network with its log.
///
/// All randomness (shuffling and dropout decisions) comes from one stream
/// seeded with `cfg.seed`.
pub fn train(
    mut net: Network,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunLog)> {
    cfg.validate()?;
    let spec = net.spec();
    for ds in std::iter::once(train).chain(validation) {
        if ds.input_width() != spec.input_width {
            return Err(Error::Shape {
                op: "train (dataset width)",
                left: (ds.input_width(), ds.len()),
                right: (spec.input_width, ds.len()),
            });
        }
        if ds.classes() > spec.output_width {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes, model outputs {}",
                ds.classes(),
                spec.output_width
            )));
        }
    }
    if cfg.sd_fast_path {
        let full: Vec<usize> = spec.sd_layers().map(|c| c.width()).collect();
        slice_plan(spec, &full)?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(net.params());
    let mut log = RunLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut total = 0.0;
        let mut batches = 0;
        let order: Vec<_> = Batches::new(train, cfg.batch_size, cfg.shuffle, &mut rng)?.collect();
        for batch in order {
            let decisions = net.sample_decisions(&mut rng);
            let (loss, grads) = if cfg.sd_fast_path {
                step_fast(&net, &batch.inputs, &batch.labels, &decisions)?
            } else {
                step_dense(&net, &batch.inputs, &batch.labels, &decisions)?
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            adam_step(net.params_mut(), &grads, &mut state, &cfg.adam)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                decisions,
            });
            total += loss;
            batches += 1;
            step += 1;
        }
        let (val_accuracy, val_loss) = match validation {
            Some(v) => {
                let e = net.evaluate(v, None)?;
                (Some(e.accuracy), Some(e.loss))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            mean_loss: total / batches as f64,
            val_accuracy,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val_acc {} ({:.1}s)",
            record.mean_loss,
            opt(val_accuracy),
            record.seconds
        );
        log.epochs.push(record);
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                save(&net, dir.join(format!("epoch-{:03}.sdn", epoch + 1)))?;
            }
        }
    }
    Ok((net, log))
}
