//! The training loop behind `train`.

use std::io::Write;

use docsegtr_core::model::{batch_loss_and_grads, init_params, targets_for};
use docsegtr_core::params::ParamStore;
use docsegtr_core::synthdoc::LayoutSample;
use docsegtr_core::training::{quantize_f32, sgd_step, GridTargets, OptimizerState};
use docsegtr_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};

pub const LOG_HEADER: &str = "iter,total_loss,focal,dice,lr";

/// One optimizer step as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
    pub lr: f64,
}

impl LogRow {
    /// CSV line; floats use the shortest representation that round-trips.
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.total, self.focal, self.dice, self.lr
        )
    }
}

/// Parameters and optimizer state between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub opt: OptimizerState,
}

impl TrainState {
    /// Fresh parameters from `cfg.seed`, rounded to `f32` like every later step.
    pub fn fresh(cfg: &RunConfig) -> AppResult<Self> {
        cfg.validate()?;
        let mut params = init_params(&cfg.model, cfg.seed)?;
        let mut opt = cfg.optimizer();
        quantize_f32(&mut params, &mut opt);
        Ok(Self { params, opt })
    }

    /// State stored in a checkpoint; the step counter restarts at 0 when the
    /// checkpoint carries no optimizer state.
    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> AppResult<Self> {
        cfg.validate()?;
        let reference = init_params(&cfg.model, cfg.seed)?;
        let params = ck.params(&reference)?;
        let mut opt = cfg.optimizer();
        ck.restore_optimizer(&params, &mut opt)?;
        Ok(Self { params, opt })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.params, Some(&self.opt))
    }
}

/// Images and grid targets of a training set.
pub struct TrainSet {
    items: Vec<(Tensor, GridTargets)>,
}

impl TrainSet {
    pub fn new(cfg: &RunConfig, samples: &[LayoutSample]) -> AppResult<Self> {
        let m = &cfg.model;
        if samples.is_empty() {
            return Err(AppError::Usage("the dataset is empty".into()));
        }
        let mut items = Vec::with_capacity(samples.len());
        for s in samples {
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            if (h, w) != (m.input_h, m.input_w) {
                return Err(AppError::Usage(format!(
                    "dataset images are {w}x{h} but the model expects {}x{}",
                    m.input_w, m.input_h
                )));
            }
            items.push((s.image.clone(), targets_for(m, &s.instances)?));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Runs steps until `state.opt.iter == iters`, calling `on_step` after each.
///
/// Step `t` uses samples `(t·batch + k) mod count`, `k < batch`.
pub fn train(
    cfg: &RunConfig,
    set: &TrainSet,
    state: &mut TrainState,
    iters: u64,
    mut on_step: impl FnMut(&LogRow) -> AppResult<()>,
) -> AppResult<()> {
    let bs = cfg.batch_size as u64;
    let count = set.len() as u64;
    while state.opt.iter < iters {
        let iter = state.opt.iter;
        let batch: Vec<(&Tensor, &GridTargets)> = (0..bs)
            .map(|k| {
                let (img, t) = &set.items[((iter * bs + k) % count) as usize];
                (img, t)
            })
            .collect();
        let out = match batch_loss_and_grads(&state.params, &cfg.model, &cfg.loss, &batch) {
            Err(docsegtr_core::Error::Numeric(msg)) => {
                log::error!("iteration {iter}: {msg}");
                return Err(AppError::NonFinite { iter });
            }
            r => r?,
        };
        let finite =
            out.total.is_finite() && out.grads.values().all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(AppError::NonFinite { iter });
        }
        let lr = sgd_step(&mut state.params, &out.grads, &mut state.opt)?;
        quantize_f32(&mut state.params, &mut state.opt);
        let row = LogRow {
            iter,
            total: out.total,
            focal: out.focal,
            dice: out.dice,
            lr,
        };
        if iter % 100 == 0 || iter + 1 == iters {
            log::info!(
                "iter {iter} loss {:.4} focal {:.4} dice {:.4} lr {lr}",
                row.total,
                row.focal,
                row.dice
            );
        }
        on_step(&row)?;
    }
    Ok(())
}

/// Writes the CSV header and then one line per step.
pub struct CsvLog<W: Write> {
    out: W,
}

impl<W: Write> CsvLog<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(Self { out })
    }

    pub fn row(&mut self, r: &LogRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", r.csv())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Parses a CSV training log back into rows.
pub fn parse_log(text: &str) -> Result<Vec<LogRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(format!("log must start with {LOG_HEADER:?}"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| {
                f.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or(format!("bad log line {l:?}"))
            };
            Ok(LogRow {
                iter: f[0].parse().map_err(|_| format!("bad log line {l:?}"))?,
                total: num(1)?,
                focal: num(2)?,
                dice: num(3)?,
                lr: num(4)?,
            })
        })
        .collect()
}
