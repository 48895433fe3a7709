//! Training loop: supervised loss on the original tangent set, optionally
//! a second (augmented) tangent set sharing the same weights plus the
//! consistency term, AdamW updates, early stopping on validation KLD.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Augmentation;
use crate::io::{clip_windows, ClipData, IoError};
use crate::losses::{self, LossError, SupervisedConfig, VacConfig};
use crate::model::{Encoded, Instrument, ModelError, Params, SalVit, TangentSet};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}; parameters left at the last finite step")]
    Diverged { step: usize },
    #[error("no training samples")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    File(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub window_stride: usize,
    pub supervised: SupervisedConfig,
    pub vac: VacConfig,
    /// Apply the supervised loss to the augmented branch as well.
    pub supervise_augmented: bool,
    pub augmentation: Augmentation,
    pub seed: u64,
    /// Worker threads for per-sample passes; 0 reads `SALVIT_THREADS`.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamWConfig::default(),
            batch_size: 16,
            epochs: 5,
            patience: 1,
            max_steps: None,
            window_stride: 1,
            supervised: SupervisedConfig::default(),
            vac: VacConfig::default(),
            supervise_augmented: true,
            augmentation: Augmentation::Shift { deg: 18.0 },
            seed: 0,
            threads: 0,
        }
    }
}

/// Worker count: `requested` if nonzero, else `SALVIT_THREADS`, else 1.
pub fn thread_count(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::env::var("SALVIT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// One training window with its frozen-encoder features.
#[derive(Clone, Debug)]
pub struct Sample {
    pub enc: Encoded,
    pub enc_aug: Option<Encoded>,
    /// Last frame's density (H, W).
    pub density: Tensor,
    /// Last frame's fixations (H, W).
    pub fixations: Tensor,
}

/// Windows every clip and encodes each window for both tangent sets.
pub fn build_samples(
    model: &SalVit,
    clips: &[ClipData],
    stride: usize,
    set: &TangentSet,
    aug: Option<&TangentSet>,
) -> Result<Vec<Sample>> {
    let f = model.config.frames;
    let mut out = Vec::new();
    for clip in clips {
        for r in clip_windows(clip.len(), f, stride)? {
            let frames = &clip.frames[r.clone()];
            let last = r.end - 1;
            let (h, w) = (clip.density[last].height(), clip.density[last].width());
            let mut density = clip.density[last].channel(0).to_vec();
            let s: f64 = density.iter().sum();
            if s > 0.0 {
                density.iter_mut().for_each(|v| *v /= s);
            }
            out.push(Sample {
                enc: model.encode_clip(frames, set)?,
                enc_aug: aug.map(|a| model.encode_clip(frames, a)).transpose()?,
                density: Tensor::new(vec![h, w], density)?,
                fixations: Tensor::new(vec![h, w], clip.fixations[last].channel(0).to_vec())?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VacLog {
    pub sup_aug: f64,
    pub vac_kld: f64,
    pub vac_cc: f64,
    pub vac: f64,
}

/// Batch-mean loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub kld: f64,
    pub cc: f64,
    pub smse: f64,
    pub supervised: f64,
    pub vac: Option<VacLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_kld: f64,
    pub stopped_early: bool,
    pub val_history: Vec<f64>,
}

struct SampleOut {
    grads: Vec<Tensor>,
    log: StepLog,
}

pub struct Trainer<'a> {
    pub model: &'a mut SalVit,
    pub config: TrainConfig,
    set: &'a TangentSet,
    aug: Option<&'a TangentSet>,
    mask: Tensor,
    opt: AdamW,
    log: Vec<StepLog>,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// `aug` is required when the consistency term is enabled.
    pub fn new(model: &'a mut SalVit, config: TrainConfig, set: &'a TangentSet, aug: Option<&'a TangentSet>) -> Result<Self> {
        if config.vac.enabled && aug.is_none() {
            return Err(TrainError::Model(ModelError::Config(
                "consistency training needs an augmented tangent set".into(),
            )));
        }
        let mask = losses::vac_mask(&set.inverse, config.vac.mask).reshape(&[set.erp_h, set.erp_w])?;
        let opt = AdamW::new(config.optim, model.params.values());
        Ok(Self {
            model,
            config,
            set,
            aug,
            mask,
            opt,
            log: Vec::new(),
            step: 0,
        })
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn vac_on(&self) -> bool {
        self.config.vac.enabled
    }

    fn sample_pass(&self, s: &Sample, scale: f64) -> Result<SampleOut> {
        let model = &*self.model;
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, true);
        let mut instr = Instrument::default();
        let p = model.forward(&mut g, &b, &s.enc, self.set, &mut instr)?;
        let dens = g.constant(s.density.clone());
        let sup = losses::supervised_loss(&mut g, p, dens, &s.fixations, self.config.supervised)?;
        let mut total = sup.total;
        let mut vac_log = None;
        if self.vac_on() {
            let aug = self.aug.expect("checked in new");
            let enc_aug = s.enc_aug.as_ref().ok_or_else(|| {
                TrainError::Model(ModelError::Config("sample lacks augmented encoding".into()))
            })?;
            let p2 = model.forward(&mut g, &b, enc_aug, aug, &mut instr)?;
            let sup2 = losses::supervised_loss(&mut g, p2, dens, &s.fixations, self.config.supervised)?;
            let w = g.constant(self.mask.clone());
            let vac = losses::vac_loss(&mut g, p, p2, w, &self.config.vac)?;
            let weighted = g.mul_scalar(vac.total, self.config.vac.lambda);
            if self.config.supervise_augmented {
                total = g.add(total, sup2.total)?;
            }
            total = g.add(total, weighted)?;
            vac_log = Some(VacLog {
                sup_aug: g.value(sup2.total).item(),
                vac_kld: g.value(vac.kld).item(),
                vac_cc: g.value(vac.cc).item(),
                vac: g.value(vac.total).item(),
            });
        }
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: self.step + 1 });
        }
        let scaled = g.mul_scalar(total, scale);
        g.backward(scaled)?;
        Ok(SampleOut {
            grads: model.params.grads(&g, &b),
            log: StepLog {
                step: 0,
                epoch: 0,
                loss,
                kld: g.value(sup.kld).item(),
                cc: g.value(sup.cc).item(),
                smse: g.value(sup.smse).item(),
                supervised: g.value(sup.total).item(),
                vac: vac_log,
            },
        })
    }

    fn batch_passes(&self, batch: &[&Sample]) -> Result<Vec<SampleOut>> {
        let scale = 1.0 / batch.len() as f64;
        let threads = thread_count(self.config.threads).min(batch.len());
        if threads <= 1 {
            return batch.iter().map(|s| self.sample_pass(s, scale)).collect();
        }
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|sc| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| sc.spawn(move || part.iter().map(|s| self.sample_pass(s, scale)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("worker panicked")?);
            }
            Ok(out)
        })
    }

    /// One optimizer step on `batch`; gradients are summed in batch order.
    pub fn step(&mut self, batch: &[&Sample], epoch: usize) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(TrainError::Empty);
        }
        let outs = self.batch_passes(batch)?;
        let mut grads: Vec<Tensor> = self.model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for o in &outs {
            for (acc, g) in grads.iter_mut().zip(&o.grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { step: self.step + 1 });
        }
        self.opt.step(self.model.params.values_mut(), &grads)?;
        self.step += 1;
        let n = outs.len() as f64;
        let mean = |f: &dyn Fn(&StepLog) -> f64| outs.iter().map(|o| f(&o.log)).sum::<f64>() / n;
        let vac = self.vac_on().then(|| {
            let v = |f: &dyn Fn(&VacLog) -> f64| mean(&|l: &StepLog| f(&l.vac.expect("vac on")));
            VacLog {
                sup_aug: v(&|x| x.sup_aug),
                vac_kld: v(&|x| x.vac_kld),
                vac_cc: v(&|x| x.vac_cc),
                vac: v(&|x| x.vac),
            }
        });
        let entry = StepLog {
            step: self.step,
            epoch,
            loss: mean(&|l| l.loss),
            kld: mean(&|l| l.kld),
            cc: mean(&|l| l.cc),
            smse: mean(&|l| l.smse),
            supervised: mean(&|l| l.supervised),
            vac,
        };
        log::debug!("step {} loss {:.6}", entry.step, entry.loss);
        self.log.push(entry);
        Ok(entry)
    }

    /// Mean KLD of original-set predictions against sample densities.
    pub fn validation_kld(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(TrainError::Empty);
        }
        let mut total = 0.0;
        for s in samples {
            let pred = self.model.predict_encoded(&s.enc, self.set)?;
            let mut g = Graph::new();
            let p = g.constant(Tensor::new(vec![pred.erp.height(), pred.erp.width()], pred.erp.into_data())?);
            let q = g.constant(s.density.clone());
            let k = losses::kld_loss(&mut g, p, q, self.config.supervised.eps)?;
            total += g.value(k).item();
        }
        Ok(total / samples.len() as f64)
    }

    /// Epoch loop with shuffled batches and early stopping; parameters end
    /// at the best validation epoch.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample]) -> Result<FitReport> {
        if train.is_empty() {
            return Err(TrainError::Empty);
        }
        let mut best: Option<(f64, usize, Params)> = None;
        let mut history = Vec::new();
        let mut since_best = 0;
        let mut stopped_early = false;
        let mut epochs_run = 0;
        let mut order: Vec<usize> = (0..train.len()).collect();
        'epochs: for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size.max(1)) {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                // a failed step leaves the parameters untouched
                if let Err(e) = self.step(&batch, epoch) {
                    return Err(e);
                }
            }
            epochs_run += 1;
            let score = if val.is_empty() {
                self.log.last().map_or(f64::INFINITY, |l| l.kld)
            } else {
                self.validation_kld(val)?
            };
            history.push(score);
            log::info!("epoch {epoch}: validation kld {score:.6}");
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, epoch, self.model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.config.patience.max(1) {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
        }
        let (best_val_kld, best_epoch, params) = best.ok_or(TrainError::Empty)?;
        self.model.params = params;
        Ok(FitReport {
            epochs_run,
            best_epoch,
            best_val_kld,
            stopped_early,
            val_history: history,
        })
    }

    /// Per-step CSV; the consistency columns appear only when enabled.
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| TrainError::File(std::io::Error::other(e));
        let mut header = vec!["step", "epoch", "loss", "kld", "cc", "smse", "supervised"];
        if self.vac_on() {
            header.extend(["supervised_aug", "vac_kld", "vac_cc", "vac"]);
        }
        out.write_record(&header).map_err(csv_err)?;
        for l in &self.log {
            let mut rec = vec![
                l.step.to_string(),
                l.epoch.to_string(),
                l.loss.to_string(),
                l.kld.to_string(),
                l.cc.to_string(),
                l.smse.to_string(),
                l.supervised.to_string(),
            ];
            if let Some(v) = l.vac {
                rec.extend([v.sup_aug, v.vac_kld, v.vac_cc, v.vac].map(|x| x.to_string()));
            }
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}
