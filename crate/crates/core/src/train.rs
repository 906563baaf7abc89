//! End-to-end training and evaluation over the paired dataset layout.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::events::{load_dataset, EventError, PairedSample, Split};
use crate::fusion::{FusionMode, STRATEGIES};
use crate::head::{one_hot, topk_accuracy};
use crate::model::apply_bn_updates;
use crate::net::{Classifier, StreamMask};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch} batch {batch} (loss {loss}, grad norm {grad_norm}, param norm {param_norm})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        grad_norm: f64,
        param_norm: f64,
    },
    #[error("dataset {0}: no usable samples")]
    EmptyDataset(String),
    #[error("checkpoint has {checkpoint} classes but dataset has {dataset}")]
    ClassMismatch { checkpoint: usize, dataset: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
    pub val_topk: f64,
    pub route_hist: [usize; STRATEGIES],
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub stats: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct ClassAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub per_class: Vec<ClassAccuracy>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
    pub route_hist: [usize; STRATEGIES],
    pub n: usize,
}

impl EvalResult {
    pub fn per_class_table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>8} {:>8}\n", "class", "correct", "total", "acc");
        for c in &self.per_class {
            let acc = if c.total > 0 {
                c.correct as f64 / c.total as f64
            } else {
                0.0
            };
            s.push_str(&format!("{:<24} {:>8} {:>8} {:>8.4}\n", c.name, c.correct, c.total, acc));
        }
        s
    }

    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("true\\pred");
        for n in class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&class_names[i]);
            for &v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn stack_batch<T: Element>(
    samples: &[PairedSample<T>],
    idxs: &[usize],
) -> TrainResult<(Tensor<T>, Tensor<T>, Vec<usize>)> {
    let first = &samples[idxs[0]];
    let mut rgb = Vec::with_capacity(idxs.len() * first.rgb.len());
    let mut evt = Vec::with_capacity(idxs.len() * first.events.len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let s = &samples[i];
        if s.rgb.shape() != first.rgb.shape() || s.events.shape() != first.events.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "stack_batch",
                left: first.rgb.shape().to_vec(),
                right: s.rgb.shape().to_vec(),
            }
            .into());
        }
        rgb.extend_from_slice(s.rgb.data());
        evt.extend_from_slice(s.events.data());
        labels.push(s.label);
    }
    let mut shape = vec![idxs.len()];
    shape.extend_from_slice(first.rgb.shape());
    Ok((
        Tensor::new(shape.clone(), rgb)?,
        Tensor::new(shape, evt)?,
        labels,
    ))
}

/// Batched inference over in-memory samples.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_samples<T: Element>(
    net: &Classifier,
    store: &crate::autodiff::ParamStore<T>,
    samples: &[PairedSample<T>],
    class_names: &[String],
    mode: FusionMode,
    batch_size: usize,
    mask: StreamMask,
    seed: u64,
) -> TrainResult<EvalResult> {
    let classes = class_names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let k = 5.min(classes);
    let mut correct1 = 0usize;
    let mut correctk = 0.0;
    let mut per_class: Vec<ClassAccuracy> = class_names
        .iter()
        .map(|n| ClassAccuracy {
            name: n.clone(),
            correct: 0,
            total: 0,
        })
        .collect();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut route_hist = [0usize; STRATEGIES];
    let idxs: Vec<usize> = (0..samples.len()).collect();
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (rgb, evt, labels) = stack_batch(samples, chunk)?;
        let (pred, bundle) = net.infer(store, &rgb, &evt, mode, Some(&mut rng), mask)?;
        let h = bundle.histogram();
        for i in 0..STRATEGIES {
            route_hist[i] += h[i];
        }
        correctk += topk_accuracy(&pred.logits, &labels, k)? * labels.len() as f64;
        let c = pred.logits.dim(1);
        for (b, &label) in labels.iter().enumerate() {
            let row = &pred.logits.data()[b * c..(b + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            per_class[label].total += 1;
            confusion[label][best] += 1;
            if best == label {
                correct1 += 1;
                per_class[label].correct += 1;
            }
        }
    }
    let n = samples.len();
    Ok(EvalResult {
        top1: correct1 as f64 / n as f64,
        topk: correctk / n as f64,
        k,
        per_class,
        confusion,
        route_hist,
        n,
    })
}

fn top1_count<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.dim(1);
    labels
        .iter()
        .enumerate()
        .filter(|(b, &label)| {
            let row = &logits.data()[b * c..(b + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Trains per the config against `root/train` and `root/val`, logging one
/// CSV row per epoch and keeping the best-validation checkpoint.
pub fn train<T: Element>(cfg: &RunConfig, data_root: &Path, out_dir: &Path) -> TrainResult<TrainOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_threads())
        .build()
        .expect("thread pool");
    pool.install(|| train_inner::<T>(cfg, data_root, out_dir))
}

fn train_inner<T: Element>(cfg: &RunConfig, data_root: &Path, out_dir: &Path) -> TrainResult<TrainOutcome> {
    let train_ds = load_dataset(data_root, Split::Train)?;
    let val_ds = load_dataset(data_root, Split::Val)?;
    if train_ds.is_empty() {
        return Err(TrainError::EmptyDataset(format!("{}/train", data_root.display())));
    }
    let train_samples: Vec<PairedSample<T>> = train_ds.load_all();
    let val_samples: Vec<PairedSample<T>> = val_ds.load_all();
    if train_samples.is_empty() {
        return Err(TrainError::EmptyDataset(format!("{}/train", data_root.display())));
    }

    let mut cfg = cfg.clone();
    if cfg.num_classes != train_ds.classes.len() {
        eprintln!(
            "config num_classes {} adjusted to dataset's {}",
            cfg.num_classes,
            train_ds.classes.len()
        );
        cfg.num_classes = train_ds.classes.len();
    }

    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = crate::autodiff::ParamStore::<T>::new();
    let net = Classifier::build(&mut store, &mut model_rng, &cfg.model_spec())?;
    let mut run_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_rng.set_stream(1);

    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path)?;
    writeln!(
        metrics,
        "epoch,train_loss,val_top1,val_top5,route_mcf,route_mdf,route_msf"
    )?;

    let checkpoint_path = out_dir.join("best.ckpt");
    let mut stats = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut high_train_streak = 0usize;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut run_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut train_correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (rgb, evt, labels) = stack_batch(&train_samples, chunk)?;
            let targets = one_hot::<T>(&labels, cfg.num_classes);
            let fwd = net.train_forward(
                &store,
                &rgb,
                &evt,
                &targets,
                cfg.fusion,
                cfg.loss,
                &mut run_rng,
                StreamMask::default(),
            )?;
            let loss = fwd.graph.value(fwd.loss).item().to_f64();
            let grads = fwd.graph.backward(fwd.loss)?;
            if !loss.is_finite() {
                let grad_norm = grads
                    .params()
                    .iter()
                    .map(|(_, g)| {
                        let n = g.l2_norm();
                        n * n
                    })
                    .sum::<f64>()
                    .sqrt();
                let param_norm = store
                    .iter()
                    .map(|(_, p)| {
                        let n = p.value.l2_norm();
                        n * n
                    })
                    .sum::<f64>()
                    .sqrt();
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    loss,
                    grad_norm,
                    param_norm,
                });
            }
            train_correct += top1_count(fwd.graph.value(fwd.logits), &labels);
            grads.apply_to(&mut store);
            apply_bn_updates(&mut store, &fwd.bn_updates);
            store.sgd_step(cfg.lr, cfg.weight_decay);
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
            step += 1;
        }
        let train_loss = loss_sum / seen as f64;
        let train_top1 = train_correct as f64 / seen as f64;

        let (val_top1, val_topk, route_hist) = if val_samples.is_empty() {
            (train_top1, train_top1, [0usize; STRATEGIES])
        } else {
            let r = evaluate_samples(
                &net,
                &store,
                &val_samples,
                &train_ds.classes,
                cfg.fusion,
                cfg.batch_size,
                StreamMask::default(),
                cfg.seed,
            )?;
            (r.top1, r.topk, r.route_hist)
        };
        writeln!(
            metrics,
            "{epoch},{train_loss},{val_top1},{val_topk},{},{},{}",
            route_hist[0], route_hist[1], route_hist[2]
        )?;
        metrics.flush()?;
        eprintln!(
            "epoch {epoch}: loss {train_loss:.4} train@1 {train_top1:.4} val@1 {val_top1:.4} routes {route_hist:?}"
        );
        stats.push(EpochStats {
            epoch,
            train_loss,
            train_top1,
            val_top1,
            val_topk,
            route_hist,
        });
        if val_top1 > best_val {
            best_val = val_top1;
            best_epoch = epoch;
            Checkpoint::capture(&cfg, &store, step, &run_rng).save(&checkpoint_path)?;
        }
        if cfg.early_stop_train_top1 > 0.0 && train_top1 >= cfg.early_stop_train_top1 {
            high_train_streak += 1;
            if high_train_streak >= 2 {
                eprintln!("early stop: train top-1 held >= {} for 2 epochs", cfg.early_stop_train_top1);
                break;
            }
        } else {
            high_train_streak = 0;
        }
    }
    Ok(TrainOutcome {
        stats,
        best_epoch,
        best_val_top1: best_val,
        checkpoint_path,
        metrics_path,
        config: cfg,
    })
}

/// Options for checkpoint evaluation.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: Split,
    pub mask: StreamMask,
    pub fusion_override: Option<FusionMode>,
    /// When set, the checkpoint's stored config must hash-match this one
    /// unless `force_config` is passed.
    pub expect_config: Option<RunConfig>,
    pub force_config: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            mask: StreamMask::default(),
            fusion_override: None,
            expect_config: None,
            force_config: false,
            out_dir: None,
        }
    }
}

/// Loads a checkpoint and evaluates it on a dataset split; optionally writes
/// the per-class table and confusion-matrix CSV.
pub fn evaluate_checkpoint<T: Element>(
    ckpt_path: &Path,
    data_root: &Path,
    opts: &EvalOptions,
) -> TrainResult<EvalResult> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    if let Some(expected) = &opts.expect_config {
        ckpt.check_config(expected, opts.force_config)?;
    }
    let cfg = ckpt.config.clone();
    let ds = load_dataset(data_root, opts.split)?;
    if ds.classes.len() != cfg.num_classes {
        return Err(TrainError::ClassMismatch {
            checkpoint: cfg.num_classes,
            dataset: ds.classes.len(),
        });
    }
    let samples: Vec<PairedSample<T>> = ds.load_all();
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset(format!(
            "{}/{}",
            data_root.display(),
            opts.split.dir()
        )));
    }
    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = crate::autodiff::ParamStore::<T>::new();
    let net = Classifier::build(&mut store, &mut model_rng, &cfg.model_spec())?;
    ckpt.apply_to(&mut store)?;
    let mode = opts.fusion_override.unwrap_or(cfg.fusion);
    let result = evaluate_samples(
        &net,
        &store,
        &samples,
        &ds.classes,
        mode,
        cfg.batch_size,
        opts.mask,
        cfg.seed,
    )?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("per_class.txt"), result.per_class_table())?;
        fs::write(dir.join("confusion.csv"), result.confusion_csv(&ds.classes))?;
    }
    Ok(result)
}
