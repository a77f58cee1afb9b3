//! Training loop, evaluation and the per-epoch log.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::encoders::{FramePair, Vocabulary};
use crate::error::{Error, Result};
use crate::loss::training_loss;
use crate::metrics::{EvalReport, Mask};
use crate::model::Model;
use crate::nn::{Adam, AdamConfig, GradAccumulator, ParamStore};
use crate::synth::{Dataset, LoadedSample, ManifestEntry, Split};
use crate::tensor::{Tape, Tensor};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

/// A sample converted to model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub entry: ManifestEntry,
    pub pair: FramePair<f32>,
    pub tokens: Vec<usize>,
    pub mask: Tensor<f32>,
    pub prev_mask: Tensor<f32>,
}

impl Prepared {
    pub fn new(s: &LoadedSample, vocab: &Vocabulary, delta: usize) -> Self {
        Self {
            entry: s.entry.clone(),
            pair: FramePair {
                target: s.sample.target.clone(),
                reference: s.sample.reference.clone(),
                delta,
            },
            tokens: s.sample.tokens.iter().map(|w| vocab.id(w)).collect(),
            mask: s.sample.mask.clone(),
            prev_mask: s.sample.prev_mask.clone(),
        }
    }
}

/// Loads a dataset and checks it against the run configuration.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<Prepared>, Vec<Prepared>, Vocabulary)> {
    let ds = Dataset::load(&cfg.data_dir)?;
    if (ds.config.height, ds.config.width) != (cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "dataset frames are {}×{}, config expects {}×{}",
            ds.config.height, ds.config.width, cfg.height, cfg.width
        )));
    }
    if ds.config.delta != cfg.delta {
        return Err(Error::Config(format!(
            "dataset was rendered with delta {}, config has {}",
            ds.config.delta, cfg.delta
        )));
    }
    let prep = |split| {
        ds.split(split)
            .iter()
            .map(|s| Prepared::new(s, &ds.vocab, cfg.delta))
            .collect::<Vec<_>>()
    };
    let (train, val) = (prep(Split::Train), prep(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("dataset too small for a train/val split".into()));
    }
    Ok((train, val, ds.vocab.clone()))
}

/// Forward-only mean loss over `samples`.
pub fn mean_loss(model: &Model, params: &ParamStore<f32>, samples: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::no_grad();
        let out = model.forward(&mut tape, params, &s.pair, &s.tokens)?;
        let l = training_loss(&mut tape, out.prob, &s.mask)?;
        total += tape.data(l.total)[0] as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Thresholded predictions and their report.
pub fn evaluate(model: &Model, params: &ParamStore<f32>, samples: &[Prepared]) -> Result<(EvalReport, Vec<Mask>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(params, &s.pair, &s.tokens)?;
        preds.push(Mask::from_tensor(&p)?);
        gts.push(Mask::from_tensor(&s.mask)?);
    }
    Ok((EvalReport::compute(&preds, &gts)?, preds))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub initial_loss: Option<f64>,
    pub val: EvalReport,
}

impl EpochLog {
    pub fn to_json(&self, cfg: &RunConfig) -> String {
        let mut s = format!(
            "{{\"epoch\": {}, \"lr\": {:e}, \"train_loss\": {:.6}",
            self.epoch, self.lr, self.train_loss
        );
        if let Some(l) = self.initial_loss {
            s.push_str(&format!(", \"initial_loss\": {l:.6}"));
        }
        s.push_str(&format!(", \"val\": {}, \"config\": {}}}", self.val.to_json(), cfg.to_json()));
        s
    }
}

pub struct Trainer {
    pub model: Model,
    pub state: Checkpoint,
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, train: Vec<Prepared>, val: Vec<Prepared>, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(vocab_size)?)?;
        let params = model.init(cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let adam = Adam::new(AdamConfig {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        });
        Ok(Self {
            model,
            state: Checkpoint {
                config: cfg.clone(),
                epoch: 0,
                best_mean_iou: f64::NEG_INFINITY,
                params,
                adam,
                rng,
            },
            train,
            val,
        })
    }

    pub fn resume(state: Checkpoint, train: Vec<Prepared>, val: Vec<Prepared>, vocab_size: usize) -> Result<Self> {
        let model = Model::new(state.config.model_config(vocab_size)?)?;
        for name in model.init::<f32>(0).names() {
            if !state.params.contains(name) {
                return Err(Error::Config(format!("checkpoint lacks parameter {name}")));
            }
        }
        Ok(Self {
            model,
            state,
            train,
            val,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.state.config
    }

    /// One pass over the shuffled training split; returns the mean sample loss.
    pub fn run_epoch(&mut self) -> Result<(usize, f64, f64)> {
        let epoch = self.state.epoch + 1;
        let lr = self.state.config.lr_at(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.state.config.batch_size).enumerate() {
            let mut acc = GradAccumulator::new();
            for &i in batch {
                let s = &self.train[i];
                let mut tape = Tape::new();
                let out = self.model.forward(&mut tape, &self.state.params, &s.pair, &s.tokens)?;
                let l = training_loss(&mut tape, out.prob, &s.mask)?;
                let v = tape.data(l.total)[0];
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                total += v as f64;
                tape.backward(l.total)?;
                acc.add_tape(&tape);
            }
            let grads = acc.mean();
            self.state.adam.update(&mut self.state.params, &grads, lr);
        }
        self.state.epoch = epoch;
        Ok((epoch, lr, total / self.train.len() as f64))
    }

    /// Trains the remaining epochs, writing checkpoints and the log into `out_dir`.
    pub fn fit(&mut self, out_dir: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let cfg_path = out_dir.join(CONFIG_FILE);
        fs::write(&cfg_path, self.config().to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = out_dir.join(TRAIN_LOG);
        let mut log_text = if self.state.epoch == 0 {
            String::new()
        } else {
            fs::read_to_string(&log_path).unwrap_or_default()
        };
        let initial = if self.state.epoch == 0 {
            Some(mean_loss(&self.model, &self.state.params, &self.train)?)
        } else {
            None
        };
        let mut logs = Vec::new();
        let mut best = None;
        while self.state.epoch < self.config().epochs {
            let (epoch, lr, train_loss) = self.run_epoch()?;
            let (val, _) = evaluate(&self.model, &self.state.params, &self.val)?;
            let log = EpochLog {
                epoch,
                lr,
                train_loss,
                initial_loss: if epoch == 1 { initial } else { None },
                val,
            };
            log_text.push_str(&log.to_json(self.config()));
            log_text.push('\n');
            fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
            if log.val.mean_iou > self.state.best_mean_iou {
                self.state.best_mean_iou = log.val.mean_iou;
                self.state.save(&out_dir.join(BEST_CHECKPOINT))?;
                best = Some(log.val.clone());
            }
            self.state.save(&out_dir.join(LAST_CHECKPOINT))?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(TrainOutcome {
            out_dir: out_dir.to_path_buf(),
            logs,
            best_report: best,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub logs: Vec<EpochLog>,
    /// Validation report of the best epoch seen in this call.
    pub best_report: Option<EvalReport>,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.out_dir.join(BEST_CHECKPOINT)
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.out_dir.join(LAST_CHECKPOINT)
    }
}

/// Loads the dataset named by `cfg` and trains from scratch.
pub fn train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let (train, val, vocab) = load_splits(cfg)?;
    let mut trainer = Trainer::new(cfg, train, val, vocab.len())?;
    trainer.fit(&cfg.out_dir, on_epoch)
}
