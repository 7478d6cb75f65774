//! The masked-reconstruction training loop, metrics logging and resume.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::C2eConfig;
use crate::data::LabeledImages;
use crate::error::{C2eError, Result};
use crate::model::{C2eModel, STREAM_TRAIN};
use crate::nn::Graph;
use crate::optim::AdamW;
use crate::patch::{plan_mask, MaskPlan};
use crate::rng::Rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.c2e";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    /// `H(Z_i)` for `i = 0..depth`, `Z_0` being the encoder output.
    pub entropies: Vec<f64>,
    pub kt_mean: f64,
    pub grad_norm: f64,
    pub ms: f64,
}

impl MetricsRow {
    pub fn header(depth: usize) -> Vec<String> {
        let mut h = vec!["step".to_string(), "loss".to_string()];
        h.extend((0..depth).map(|i| format!("H_{i}")));
        h.extend(["kT_mean", "grad_norm", "ms"].map(String::from));
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string(), self.loss.to_string()];
        r.extend(self.entropies.iter().map(f64::to_string));
        r.extend([self.kt_mean, self.grad_norm, self.ms].map(|v| v.to_string()));
        r
    }
}

/// Appends rows to a metrics CSV, writing the header when the file is new.
pub struct MetricsWriter {
    inner: csv::Writer<fs::File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: &Path, depth: usize) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| C2eError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            inner.write_record(MetricsRow::header(depth))?;
        }
        Ok(MetricsWriter {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.record())?;
        self.inner.flush().map_err(|e| C2eError::io(&self.path, e))
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Record wall time per step; when off the `ms` column is `0` so the CSV
    /// is byte-identical across runs.
    pub record_time: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

pub struct Trainer {
    pub model: C2eModel,
    pub opt: AdamW,
    pub rng: Rng,
    /// Number of updates applied so far.
    pub step: u64,
}

pub struct StepOutput {
    pub loss: f64,
    pub grad_norm: f64,
    pub entropies: Vec<f64>,
    pub kt_mean: f64,
}

impl Trainer {
    pub fn new(cfg: &C2eConfig) -> Result<Self> {
        let model = C2eModel::new(cfg)?;
        let opt = AdamW::new(&cfg.optimizer, &model.params, cfg.steps);
        Ok(Trainer {
            model,
            opt,
            rng: Rng::with_stream(cfg.seed, STREAM_TRAIN),
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let state = ck
            .state
            .as_ref()
            .ok_or_else(|| C2eError::Format("checkpoint carries no training state".into()))?;
        let opt = ck.optimizer(&model).expect("state present");
        Ok(Trainer {
            opt,
            rng: Rng::from_state(state.rng),
            step: state.step,
            model,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            Some(TrainState {
                step: self.step,
                rng: self.rng.state(),
                opt_t: self.opt.t,
                m: self.opt.m.clone(),
                v: self.opt.v.clone(),
            }),
        )
    }

    /// Draws a batch (without replacement when the set is large enough) and one
    /// mask plan per image.
    fn sample_batch(&mut self, data: &LabeledImages) -> Result<(Vec<usize>, Vec<MaskPlan>)> {
        let cfg = &self.model.cfg;
        let b = cfg.batch_size;
        let idx = if data.len() >= b {
            self.rng.choose_k(data.len(), b)
        } else {
            (0..b).map(|_| self.rng.below(data.len())).collect()
        };
        let n = cfg.num_patches();
        let ratio = cfg.mask_ratio;
        let plans = (0..b).map(|_| plan_mask(n, ratio, &mut self.rng)).collect::<Result<_>>()?;
        Ok((idx, plans))
    }

    /// One AdamW update on a freshly sampled batch.
    pub fn train_step(&mut self, data: &LabeledImages) -> Result<StepOutput> {
        if data.is_empty() {
            return Err(C2eError::EmptyInput("training set is empty"));
        }
        let (idx, plans) = self.sample_batch(data)?;
        let batch = self.model.patchify(&data.select(&idx))?;
        let noise = self.model.cfg.noise;
        let (loss, grads, entropies, kt_mean) = {
            let mut g = Graph::new(&self.model.params);
            let rng = noise.then_some(&mut self.rng);
            let step = self.step;
            let out = self.model.forward(&mut g, &batch, &plans, rng).map_err(|e| match e {
                C2eError::Divergence { step: None, layer, detail } => C2eError::Divergence {
                    step: Some(step),
                    layer,
                    detail,
                },
                other => other,
            })?;
            let loss = g.value(out.loss).item();
            let entropies: Vec<f64> = match self.model.entropies(&g, &out.enc) {
                Ok(r) => r.iter().map(|e| e.entropy).collect(),
                Err(e) => {
                    return Err(C2eError::Divergence {
                        step: Some(self.step),
                        layer: None,
                        detail: format!("loss {loss}, layer entropy failed: {e}"),
                    })
                }
            };
            let kt = g.value(out.dec.ctx.kt);
            let kt_mean = kt.sum() / kt.len() as f64;
            if !loss.is_finite() || entropies.iter().any(|h| !h.is_finite()) {
                return Err(C2eError::Divergence {
                    step: Some(self.step),
                    layer: entropies.iter().position(|h| !h.is_finite()),
                    detail: format!("loss {loss}, layer entropies {entropies:?}"),
                });
            }
            let grads = g.tape.backward(out.loss);
            (loss, g.param_grads(&grads), entropies, kt_mean)
        };
        let grad_norm = AdamW::grad_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(C2eError::Divergence {
                step: Some(self.step),
                layer: None,
                detail: format!("gradient norm {grad_norm}, layer entropies {entropies:?}"),
            });
        }
        let lr = self.opt.lr_at(self.step);
        self.opt.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        Ok(StepOutput {
            loss,
            grad_norm,
            entropies,
            kt_mean,
        })
    }

    /// Runs until `self.step == cfg.steps`, logging every `log_every` steps
    /// (plus the first and last) and checkpointing on interval and at the end.
    pub fn run(&mut self, data: &LabeledImages, opts: &RunOptions) -> Result<TrainSummary> {
        let cfg = self.model.cfg.clone();
        let mut writer = match &opts.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| C2eError::io(dir, e))?;
                let cfg_path = dir.join(CONFIG_FILE);
                fs::write(&cfg_path, cfg.to_json()).map_err(|e| C2eError::io(&cfg_path, e))?;
                Some(MetricsWriter::open(&dir.join(METRICS_FILE), cfg.depth)?)
            }
            None => None,
        };
        let mut first_loss = None;
        let mut last_loss = None;
        while self.step < cfg.steps {
            let step = self.step;
            let t0 = Instant::now();
            let out = self.train_step(data)?;
            let ms = if opts.record_time { t0.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
            first_loss.get_or_insert(out.loss);
            last_loss = Some(out.loss);
            let log_every = cfg.log_every.max(1);
            if step % log_every == 0 || self.step == cfg.steps {
                if let Some(w) = writer.as_mut() {
                    w.write(&MetricsRow {
                        step,
                        loss: out.loss,
                        entropies: out.entropies,
                        kt_mean: out.kt_mean,
                        grad_norm: out.grad_norm,
                        ms,
                    })?;
                }
            }
            if let Some(dir) = &opts.out_dir {
                if cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0 && self.step < cfg.steps {
                    self.checkpoint().save(&dir.join(format!("checkpoint_{:06}.c2e", self.step)))?;
                }
            }
        }
        let checkpoint = match &opts.out_dir {
            Some(dir) => {
                let p = dir.join(CHECKPOINT_FILE);
                self.checkpoint().save(&p)?;
                Some(p)
            }
            None => None,
        };
        Ok(TrainSummary {
            steps: self.step,
            first_loss,
            last_loss,
            checkpoint,
            metrics: opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind};

    fn tiny(steps: u64) -> C2eConfig {
        C2eConfig {
            depth: 2,
            width: 16,
            reduction: 4,
            heads: 2,
            temperature_dim: 4,
            batch_size: 4,
            steps,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let data = synth_dataset(SynthKind::Textures, 8, 0).unwrap();
        let mut t = Trainer::new(&tiny(0)).unwrap();
        let s = t.run(&data, &RunOptions::default()).unwrap();
        assert_eq!(s.steps, 0);
        assert_eq!(t.model.params, C2eModel::new(&tiny(0)).unwrap().params);
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = synth_dataset(SynthKind::Textures, 8, 0).unwrap();
        let mut full = Trainer::new(&tiny(6)).unwrap();
        full.run(&data, &RunOptions::default()).unwrap();

        let mut half = Trainer::new(&tiny(6)).unwrap();
        for _ in 0..3 {
            half.train_step(&data).unwrap();
        }
        let bytes = half.checkpoint().to_bytes();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.run(&data, &RunOptions::default()).unwrap();
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.rng.state(), full.rng.state());
    }
}
