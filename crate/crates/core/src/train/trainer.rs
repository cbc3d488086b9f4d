use std::borrow::Borrow;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    classification_loss, composite_loss, group_learning_rates, ntp_loss, History, TrainConfig, TrainError, TrainMode,
};
use crate::eval::{compute_metrics, evaluate, RoutingStats};
use crate::model::{forward, Mode, ModelParams, RoutingTrace};
use crate::tensor::{AdamW, AdamWConfig, Graph};
use crate::token::TokenSequence;
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub task: f64,
    pub aux: Option<f64>,
    pub trace: RoutingTrace,
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub loss: f64,
    pub task: f64,
    pub aux: Option<f64>,
    pub steps: usize,
    pub routing: RoutingStats,
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer<T: Scalar> {
    pub params: ModelParams<T>,
    pub config: TrainConfig,
    optimizer: AdamW<T>,
    rates: Vec<f64>,
    rng: ChaCha8Rng,
    steps: usize,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Pretraining uses one constant rate; fine-tuning decays it per layer.
    pub fn new(params: ModelParams<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if config.mode == TrainMode::Finetune && params.config.num_classes.is_none() {
            return Err(TrainError::Config("fine-tuning needs a model with num_classes".into()));
        }
        let layers = params.config.layers;
        let rates = match config.mode {
            TrainMode::Pretrain => vec![config.lr; params.len()],
            TrainMode::Finetune => group_learning_rates(&params.groups, layers, config.lr, config.llrd_decay),
        };
        Ok(Self {
            optimizer: AdamW::new(&params.tensors, AdamWConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            rates,
            steps: 0,
            epoch: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn learning_rates(&self) -> &[f64] {
        &self.rates
    }

    fn mode(&self) -> Mode {
        match self.config.mode {
            TrainMode::Pretrain => Mode::Lm,
            TrainMode::Finetune => Mode::Classify,
        }
    }

    /// One forward, backward and optimizer update on a batch.
    pub fn step<S: Borrow<TokenSequence>>(&mut self, batch: &[S]) -> Result<StepReport, TrainError> {
        let mode = self.mode();
        let labels: Vec<usize> = match mode {
            Mode::Lm => Vec::new(),
            Mode::Classify => batch
                .iter()
                .map(|s| s.borrow().label.map(|l| l as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| TrainError::Data("fine-tuning batch contains an unlabeled sequence".into()))?,
        };
        let (report, grads) = {
            let mut g = Graph::new();
            let out = forward(&mut g, &self.params, batch, mode)?;
            let task = match mode {
                Mode::Lm => ntp_loss(&mut g, out.logits, batch)?,
                Mode::Classify => classification_loss(&mut g, out.logits, &labels)?,
            };
            let loss = composite_loss(&mut g, task, out.aux, self.config.aux_weight)?;
            let value = g.value(loss).item().f64();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: self.epoch,
                    step: self.steps,
                    loss: value,
                });
            }
            g.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = out.param_vars.iter().map(|&v| g.grad(v).map(<[T]>::to_vec)).collect();
            let report = StepReport {
                loss: value,
                task: g.value(task).item().f64(),
                aux: out.aux.map(|a| g.value(a).item().f64()),
                trace: out.trace,
            };
            (report, grads)
        };
        for (i, grad) in grads.iter().enumerate() {
            let wd = if self.params.decays(i) { self.config.weight_decay } else { 0.0 };
            self.optimizer
                .update(i, &mut self.params.tensors[i], grad.as_deref(), self.rates[i], wd);
        }
        self.steps += 1;
        Ok(report)
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.steps < m)
    }

    /// One seeded shuffled pass over `data`, stopping early at `max_steps`.
    pub fn epoch(&mut self, data: &[TokenSequence]) -> Result<EpochReport, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Data("no training sequences".into()));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss, mut task, mut aux, mut steps) = (0.0, 0.0, 0.0, 0usize);
        let mut any_aux = false;
        let mut routing = RoutingStats::default();
        for chunk in order.chunks(self.config.batch_size) {
            if !self.budget_left() {
                break;
            }
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.step(&batch)?;
            loss += r.loss;
            task += r.task;
            if let Some(a) = r.aux {
                aux += a;
                any_aux = true;
            }
            routing.add(&r.trace);
            steps += 1;
        }
        let n = steps.max(1) as f64;
        Ok(EpochReport {
            loss: loss / n,
            task: task / n,
            aux: any_aux.then_some(aux / n),
            steps,
            routing,
        })
    }
}

/// Result of a full run: the selected and final parameters plus history.
pub struct TrainOutcome<T> {
    pub best: ModelParams<T>,
    pub last: ModelParams<T>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: usize,
    pub history: History,
}

struct RunDir<'p> {
    path: Option<&'p Path>,
}

impl RunDir<'_> {
    fn create(&self, params_cfg: &str, train_cfg: &TrainConfig) -> Result<(), TrainError> {
        if let Some(p) = self.path {
            std::fs::create_dir_all(p.join("routing"))?;
            let text = format!("[model]\n{params_cfg}\n[train]\n{}", train_cfg.to_toml());
            std::fs::write(p.join("config.txt"), text)?;
        }
        Ok(())
    }

    fn epoch_files(&self, epoch: usize, routing: &RoutingStats, history: &History) -> Result<(), TrainError> {
        if let Some(p) = self.path {
            if routing.num_layers() > 0 {
                routing.write_tsv(BufWriter::new(File::create(p.join("routing").join(format!("epoch{epoch}.tsv")))?))?;
            }
            history.write_tsv(BufWriter::new(File::create(p.join("history.tsv"))?))?;
        }
        Ok(())
    }

    fn checkpoints<T: Scalar>(&self, best: &ModelParams<T>, last: &ModelParams<T>) -> Result<(), TrainError> {
        if let Some(p) = self.path {
            best.save(&p.join("best.ckpt"))?;
            last.save(&p.join("last.ckpt"))?;
        }
        Ok(())
    }
}

fn record_epoch(history: &mut History, epoch: usize, r: &EpochReport, task_name: &str) {
    history.push(epoch, "train", "loss", r.loss);
    history.push(epoch, "train", task_name, r.task);
    if let Some(a) = r.aux {
        history.push(epoch, "train", "aux", a);
    }
    if r.routing.num_layers() > 0 {
        history.push(epoch, "train", "load_variance", r.routing.load_variance());
    }
}

/// Minimizes next-token loss plus the weighted balance loss for
/// `cfg.epochs` epochs; the epoch with the lowest mean training loss is best.
pub fn pretrain<T: Scalar>(
    params: ModelParams<T>,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    let cfg = TrainConfig {
        mode: TrainMode::Pretrain,
        ..cfg.clone()
    };
    let run = RunDir { path: run_dir };
    run.create(&params.config.to_toml(), &cfg)?;
    let mut trainer = Trainer::new(params, cfg.clone())?;
    let mut history = History::default();
    let mut best = (f64::INFINITY, 0, trainer.params.clone());
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        if !trainer.budget_left() {
            break;
        }
        let r = trainer.epoch(data)?;
        epochs_run = epoch;
        record_epoch(&mut history, epoch, &r, "ntp");
        if r.loss < best.0 {
            best = (r.loss, epoch, trainer.params.clone());
        }
        run.epoch_files(epoch, &r.routing, &history)?;
    }
    run.checkpoints(&best.2, &trainer.params)?;
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        epochs_run,
        steps: trainer.steps(),
        last: trainer.params,
        history,
    })
}

/// Minimizes classification loss plus the weighted balance loss with
/// layer-wise rate decay. Stops once validation macro-F1 has not improved
/// for `patience` epochs and returns the best-validation parameters; ties
/// keep the earlier epoch. An empty validation set falls back to `train`.
pub fn finetune<T: Scalar>(
    params: ModelParams<T>,
    train: &[TokenSequence],
    val: &[TokenSequence],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    let cfg = TrainConfig {
        mode: TrainMode::Finetune,
        ..cfg.clone()
    };
    let run = RunDir { path: run_dir };
    run.create(&params.config.to_toml(), &cfg)?;
    let val = if val.is_empty() {
        log::warn!("empty validation set; selecting on the training set");
        train
    } else {
        val
    };
    let mut trainer = Trainer::new(params, cfg.clone())?;
    let mut history = History::default();
    let mut best = (f64::NEG_INFINITY, 0, trainer.params.clone());
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        if !trainer.budget_left() {
            break;
        }
        let r = trainer.epoch(train)?;
        epochs_run = epoch;
        record_epoch(&mut history, epoch, &r, "classification");
        let (cm, preds) = evaluate(&trainer.params, val, cfg.batch_size)?;
        let m = compute_metrics(&cm);
        history.push(epoch, "val", "macro_f1", m.macro_f1);
        history.push(epoch, "val", "accuracy", m.accuracy);
        if let Some(l) = preds.loss {
            history.push(epoch, "val", "loss", l);
        }
        if m.macro_f1 > best.0 {
            best = (m.macro_f1, epoch, trainer.params.clone());
        }
        run.epoch_files(epoch, &r.routing, &history)?;
        if epoch - best.1 >= cfg.patience {
            log::info!("early stop at epoch {epoch}; best epoch {}", best.1);
            break;
        }
    }
    run.checkpoints(&best.2, &trainer.params)?;
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        epochs_run,
        steps: trainer.steps(),
        last: trainer.params,
        history,
    })
}
