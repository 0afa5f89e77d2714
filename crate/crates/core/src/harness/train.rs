use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DatasetKind, TrainConfig};
use super::records::{dump_gate_trace, export_metrics_csv, write_text, EpochMetrics, GateTraceRecord, TraceMode};
use crate::data::{
    augment_and_normalize, batch_indices, load_cifar10_dir, load_mnist_dir, normalize, AugmentConfig, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::gating::GateDecision;
use crate::losses::{
    consistency_loss, flops_loss, mean_gate, prog_schedule, skip_pct, total_loss, LossBreakdown,
};
use crate::model::{GateOverride, GatedNetwork};
use crate::nn::cross_entropy;
use crate::optim::SgdState;
use crate::tensor::{Tape, Tensor};

/// Offset that separates the data/noise stream from weight initialization.
const STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Epoch-averaged training statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub train_acc: f64,
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Hard-gate evaluation summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_gate_hard: f64,
    pub skip_pct: f64,
    /// Skip percentage of each block.
    pub per_block_skip: Vec<f64>,
}

fn argmax_hits(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count()
}

fn trace_records(epoch: usize, batch: usize, mode: TraceMode, decisions: &[GateDecision]) -> Vec<GateTraceRecord> {
    decisions
        .iter()
        .enumerate()
        .map(|(block, d)| GateTraceRecord {
            epoch,
            batch,
            block,
            mode,
            cir: d.cir.clone(),
            gate: d.applied().to_vec(),
        })
        .collect()
}

fn describe_decisions(decisions: &[GateDecision]) -> String {
    let stats = |v: &[f64]| {
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        format!("min {min:.4} mean {mean:.4} max {max:.4}")
    };
    let mut s = String::new();
    for (i, d) in decisions.iter().enumerate() {
        let _ = writeln!(
            s,
            "block {i}: cir [{}] ctrl [{}] logit [{}] gate [{}]",
            stats(&d.cir),
            stats(&d.controller),
            stats(&d.logit),
            stats(d.applied())
        );
    }
    s
}

/// Owns the model, optimizer and random stream of one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: GatedNetwork,
    pub opt: SgdState,
    pub augment: AugmentConfig,
    /// Gate override for the training forward; anything but `Sampled`
    /// leaves the gate parameters without gradients, which are then skipped.
    pub gate_override: GateOverride,
    /// Where the diagnostic dump goes if the loss becomes non-finite.
    pub dump_dir: Option<PathBuf>,
    rng: ChaCha8Rng,
    /// (epoch, batch) of the step in progress, for diagnostics.
    position: (usize, usize),
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = GatedNetwork::new(cfg.dataset.topology(), &cfg.gate_config(), cfg.seed)?;
        Self::with_network(cfg, net)
    }

    pub fn with_network(cfg: TrainConfig, net: GatedNetwork) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            opt: SgdState::new(cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.epochs)?,
            augment: cfg.dataset.augment(),
            gate_override: GateOverride::Sampled,
            dump_dir: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM_SALT),
            position: (0, 0),
            net,
            cfg,
        })
    }

    /// One optimization step on a raw `[0, 1]` batch. Returns the loss
    /// components, the number of correct predictions and the gate decisions.
    pub fn train_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        prog: f64,
        tau: f64,
    ) -> Result<(LossBreakdown, usize, Vec<GateDecision>)> {
        let x = augment_and_normalize(images, &self.augment, true, &mut self.rng)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.net.forward_train(&mut tape, xv, tau, self.gate_override, &mut self.rng)?;
        let ce = cross_entropy(&mut tape, out.logits, labels)?;
        let cons = consistency_loss(&mut tape, &out.full_outputs, &out.gated_outputs, self.cfg.eps_norm)?;
        let g_bar = mean_gate(&mut tape, &out.decisions)?;
        let flops = flops_loss(&mut tape, g_bar, self.cfg.tau_target, prog)?;
        let total = total_loss(&mut tape, ce, cons, flops, self.cfg.lambda_cons, self.cfg.lambda_flops)?;
        let breakdown = LossBreakdown {
            ce: tape.value(ce).item() as f64,
            cons: tape.value(cons).item() as f64,
            flops: tape.value(flops).item() as f64,
            total: tape.value(total).item() as f64,
            mean_gate: tape.value(g_bar).item() as f64,
            prog,
        };
        if !breakdown.total.is_finite() {
            return Err(self.non_finite(&breakdown, &out.decisions));
        }
        let hits = argmax_hits(tape.value(out.logits), labels);
        tape.backward(total)?;
        match self.gate_override {
            GateOverride::Sampled => self.opt.step(&mut self.net.store, &tape)?,
            GateOverride::Fixed(_) => {
                self.opt.step_available(&mut self.net.store, &tape);
            }
        }
        Ok((breakdown, hits, out.decisions))
    }

    fn non_finite(&self, loss: &LossBreakdown, decisions: &[GateDecision]) -> Error {
        let (epoch, batch) = self.position;
        let mut detail = format!(
            "epoch {epoch} batch {batch}: ce {} cons {} flops {} mean gate {}\n{}",
            loss.ce,
            loss.cons,
            loss.flops,
            loss.mean_gate,
            describe_decisions(decisions)
        );
        if let Some(dir) = &self.dump_dir {
            let trace = dir.join("nan_batch_trace.csv");
            let text = dir.join("nan_batch.txt");
            let written = dump_gate_trace(&trace_records(epoch, batch, TraceMode::Train, decisions), &trace)
                .and_then(|_| write_text(&text, &detail));
            match written {
                Ok(()) => {
                    let _ = write!(detail, "gate decisions dumped to {}", trace.display());
                }
                Err(e) => {
                    let _ = write!(detail, "could not write dump: {e}");
                }
            }
        }
        Error::NonFinite {
            what: "total loss".into(),
            detail,
        }
    }

    /// Trains one epoch (0-based). The learning rate follows the cosine
    /// schedule per epoch and `prog` uses completed epochs.
    pub fn train_epoch(
        &mut self,
        ds: &Dataset,
        epoch: usize,
        mut trace: Option<&mut Vec<GateTraceRecord>>,
    ) -> Result<TrainStats> {
        self.opt.set_epoch(epoch);
        let prog = prog_schedule(epoch, self.cfg.warmup);
        let tau = self.cfg.gate_config().temperature_at(epoch, self.cfg.epochs);
        let batches = batch_indices(ds.len(), self.cfg.batch_size, true, &mut self.rng)?;
        let mut sum = LossBreakdown::default();
        let mut hits = 0usize;
        for (b, idx) in batches.iter().enumerate() {
            let (images, labels) = ds.gather(idx)?;
            self.position = (epoch, b);
            let (loss, h, decisions) = self.train_step(&images, &labels, prog, tau)?;
            let w = idx.len() as f64;
            sum.ce += loss.ce * w;
            sum.cons += loss.cons * w;
            sum.flops += loss.flops * w;
            sum.total += loss.total * w;
            sum.mean_gate += loss.mean_gate * w;
            hits += h;
            if let Some(t) = trace.as_deref_mut() {
                t.extend(trace_records(epoch, b, TraceMode::Train, &decisions));
            }
        }
        let n = ds.len().max(1) as f64;
        Ok(TrainStats {
            train_acc: 100.0 * hits as f64 / n,
            loss: LossBreakdown {
                ce: sum.ce / n,
                cons: sum.cons / n,
                flops: sum.flops / n,
                total: sum.total / n,
                mean_gate: sum.mean_gate / n,
                prog,
            },
            lr: self.opt.lr,
        })
    }
}

/// Deterministic evaluation with hard gates.
pub fn evaluate(
    net: &GatedNetwork,
    ds: &Dataset,
    augment: &AugmentConfig,
    batch_size: usize,
    epoch: usize,
    mut trace: Option<&mut Vec<GateTraceRecord>>,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let blocks = net.num_blocks();
    let mut hits = 0usize;
    let mut open = vec![0.0f64; blocks];
    let order: Vec<usize> = (0..ds.len()).collect();
    for (b, idx) in order.chunks(batch_size).enumerate() {
        let (images, labels) = ds.gather(idx)?;
        let x = normalize(&images, &augment.mean, &augment.std)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let out = net.forward_eval(&mut tape, xv)?;
        hits += argmax_hits(tape.value(out.logits), &labels);
        for (acc, d) in open.iter_mut().zip(&out.decisions) {
            *acc += d.hard.iter().sum::<f64>();
        }
        if let Some(t) = trace.as_deref_mut() {
            t.extend(trace_records(epoch, b, TraceMode::Eval, &out.decisions));
        }
    }
    let n = ds.len().max(1) as f64;
    let per_block_skip: Vec<f64> = open.iter().map(|&o| skip_pct(o / n)).collect();
    let mean_gate_hard = open.iter().sum::<f64>() / (n * blocks.max(1) as f64);
    Ok(EvalReport {
        accuracy: 100.0 * hits as f64 / n,
        mean_gate_hard,
        skip_pct: skip_pct(mean_gate_hard),
        per_block_skip,
    })
}

/// Loads the train and test splits for `kind` from `dir`, capped to the
/// requested subset sizes.
pub fn load_datasets(
    kind: DatasetKind,
    dir: impl AsRef<Path>,
    subset_train: Option<usize>,
    subset_test: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let load = |split| match kind {
        DatasetKind::Mnist => load_mnist_dir(dir, split),
        DatasetKind::Cifar10 => load_cifar10_dir(dir, split),
    };
    let mut train = load(Split::Train)?;
    let mut test = load(Split::Test)?;
    if let Some(n) = subset_train {
        train = train.subset(n)?;
    }
    if let Some(n) = subset_test {
        test = test.subset(n)?;
    }
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<EpochMetrics>,
    pub final_eval: EvalReport,
    pub best_epoch: usize,
    pub best_test_acc: f64,
}

/// Full training run. With an output directory, the metrics CSV is
/// rewritten after every epoch and `best.cgv1` / `final.cgv1` checkpoints
/// are kept; `gate_trace.csv` is written when tracing.
pub fn run_training(
    trainer: &mut Trainer,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    trace: bool,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trainer.dump_dir = Some(dir.to_path_buf());
    }
    let mut records = Vec::new();
    let mut metrics = Vec::with_capacity(trainer.cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut last = EvalReport::default();
    for epoch in 0..trainer.cfg.epochs {
        let stats = trainer.train_epoch(train, epoch, trace.then_some(&mut records))?;
        last = evaluate(
            &trainer.net,
            test,
            &trainer.augment,
            trainer.cfg.batch_size,
            epoch,
            trace.then_some(&mut records),
        )?;
        let m = EpochMetrics {
            epoch,
            train_acc: stats.train_acc,
            test_acc: last.accuracy,
            ce: stats.loss.ce,
            cons: stats.loss.cons,
            flops: stats.loss.flops,
            total: stats.loss.total,
            mean_gate: stats.loss.mean_gate,
            skip_pct: skip_pct(stats.loss.mean_gate),
            lr: stats.lr,
            prog: stats.loss.prog,
        };
        on_epoch(&m);
        metrics.push(m);
        if let Some(dir) = out_dir {
            export_metrics_csv(&metrics, dir.join("metrics.csv"))?;
            if last.accuracy > best.1 {
                trainer.net.save_checkpoint(dir.join("best.cgv1"))?;
            }
        }
        if last.accuracy > best.1 {
            best = (epoch, last.accuracy);
        }
    }
    if let Some(dir) = out_dir {
        trainer.net.save_checkpoint(dir.join("final.cgv1"))?;
        if trace {
            dump_gate_trace(&records, dir.join("gate_trace.csv"))?;
        }
    }
    Ok(RunOutput {
        metrics,
        final_eval: last,
        best_epoch: best.0,
        best_test_acc: best.1,
    })
}

/// Loads data for `cfg.dataset` from `data_dir` and trains.
pub fn run_config(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path, trace: bool) -> Result<RunOutput> {
    let (train, test) = load_datasets(cfg.dataset, data_dir, cfg.subset_train, cfg.subset_test)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    run_training(&mut trainer, &train, &test, Some(out_dir), trace, |_| {})
}
