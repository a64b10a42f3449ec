use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;

use super::config::TrainConfig;
use super::dataset::{ShapesDataset, N_CLASSES, TRAIN_DOMAIN};
use super::encoder::Encoder;
use super::schedule::{lr_at, Sgd};
use super::step::{backward_batch, forward_batch, objective, plan_step};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub l_ce: f64,
    pub l_pa: f64,
    pub total: f64,
    pub err_px_per_class: Vec<u64>,
}

/// State captured when a loss turns non-finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iter: usize,
    pub lr: f64,
    pub report: LossReport,
    pub err_px_per_class: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: Encoder<f32>,
    pub log: Vec<LogRecord>,
    /// Loss report of the final iteration.
    pub last_report: LossReport,
}

pub enum TrainError {
    /// Non-finite loss; training stopped at `diagnostics.iter`.
    NonFinite {
        diagnostics: Diagnostics,
        log: Vec<LogRecord>,
    },
    Other(Error),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Other(e)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { diagnostics, .. } => Error::Numeric(format!(
                "non-finite loss at iteration {} (l_ce={}, l_pa={})",
                diagnostics.iter, diagnostics.report.l_ce, diagnostics.report.l_pa
            )),
            TrainError::Other(e) => e,
        }
    }
}

/// Runs the full loop. Batch `t` holds training samples `t*B .. t*B+B-1`.
/// `on_iter` sees each log record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&LogRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let data = ShapesDataset::new(
        cfg.seed,
        TRAIN_DOMAIN,
        cfg.height,
        cfg.width,
        cfg.sigma as f32,
    )?;
    let mut enc = Encoder::<f32>::init(N_CLASSES, cfg.seed);
    let mut opt = Sgd::new(cfg.momentum as f32, &enc.tensors);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut last_report = LossReport::default();
    for it in 0..cfg.iterations {
        let start = (it * cfg.batch_size) as u64;
        let samples = data.samples(start, cfg.batch_size);
        let images: Vec<&[f32]> = samples.iter().map(|s| &s.image[..]).collect();
        let labels: Vec<_> = samples.iter().map(|s| &s.labels).collect();
        let caches = forward_batch(&enc, &images, cfg.height, cfg.width)?;
        let plan = plan_step(&caches, &labels, cfg, it)?;
        let obj = objective(&caches, &labels, &plan, cfg)?;
        let lr = lr_at(it, cfg.iterations, cfg.base_lr, cfg.power)?;
        let record = LogRecord {
            iter: it,
            lr,
            l_ce: obj.report.l_ce,
            l_pa: obj.report.l_pa,
            total: obj.report.total,
            err_px_per_class: plan.error_pixels.clone(),
        };
        if !obj.report.total.is_finite() {
            log::error!("non-finite loss at iteration {it}");
            return Err(TrainError::NonFinite {
                diagnostics: Diagnostics {
                    iter: it,
                    lr,
                    report: obj.report,
                    err_px_per_class: plan.error_pixels,
                },
                log,
            });
        }
        let grads = backward_batch(&enc, &caches, &obj)?;
        opt.step(&mut enc.tensors, &grads, lr as f32);
        on_iter(&record);
        log.push(record);
        last_report = obj.report;
    }
    Ok(TrainOutcome {
        encoder: enc,
        log,
        last_report,
    })
}

/// JSON lines, one record per iteration.
pub fn log_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
