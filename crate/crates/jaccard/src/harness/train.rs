//! Desk-scale training loop: SGD with momentum and polynomial decay over a
//! per-pixel patch MLP, with the supervised, label-smoothing, distillation
//! and semi-supervised objectives.
//!
//! Everything is driven by one seeded generator, so (config, seed) fully
//! determines every emitted artifact. The step sequence is single-threaded;
//! validation accumulates per-image confusion counts and calibration bins
//! and merges them, the supported parallel pattern.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::{ExperimentConfig, Technique};
use super::model::PatchModel;
use super::ptf::write_ptf_file;
use super::synth::{flip_horizontal, generate_synthetic, SyntheticDataset, SyntheticImage};
use super::HarnessError;
use crate::autodiff::{Bindings, ExprGraph, Tensor};
use crate::compositions::{ema_update, kd_objective, ls_objective, ssl_objective, BatchImage, KdImage};
use crate::labels::{boundary_mask, one_hot, smooth_labels, LabelMap};
use crate::losses::ActiveClassMode;
use crate::metrics::{
    miou_dataset, miou_image, write_bins_csv, write_per_class_iou_csv, BinRow, CalibrationBins,
    ConfusionAccumulator,
};

/// One validation snapshot.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub accuracy: f64,
    pub miou_dataset: f64,
    pub miou_image: f64,
    pub ece: f64,
    pub bece: f64,
}

/// Metric history of one training run (teachers nest their own).
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub technique: Technique,
    pub seed: u64,
    pub history: Vec<EvalRecord>,
    pub final_metrics: EvalRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<Box<TrainReport>>,
}

/// Report plus the artifacts needed for dumps and downstream analysis.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: PatchModel,
    pub val_probs: Vec<Tensor>,
    pub val_labels: Vec<LabelMap>,
    pub per_class_iou: Vec<Option<f64>>,
    pub ece_bins: Vec<BinRow>,
    pub bece_bins: Vec<BinRow>,
    pub config: ExperimentConfig,
}

struct Prepared {
    /// `(F, P)` features per training image.
    feats: Vec<Tensor>,
    /// `(C, P)` label fields per training image (smoothed per technique).
    fields: Vec<Tensor>,
    /// Hard one-hot fields (for distillation's label terms).
    hard_fields: Vec<Tensor>,
}

fn flatten_field(field: &crate::labels::SoftLabelField) -> Tensor {
    field.flattened()
}

fn prepare(
    cfg: &ExperimentConfig,
    images: &[SyntheticImage],
    patch: usize,
    smooth: bool,
) -> Result<Prepared, HarnessError> {
    let classes = cfg.dataset.classes;
    let mut feats = Vec::with_capacity(images.len());
    let mut fields = Vec::with_capacity(images.len());
    let mut hard_fields = Vec::with_capacity(images.len());
    for image in images {
        feats.push(PatchModel::features(&image.channels, patch));
        let onehot = one_hot(&image.labels, classes)?;
        hard_fields.push(flatten_field(&onehot));
        let field = if smooth {
            let smoothed = smooth_labels(
                &onehot,
                cfg.smoothing.epsilon,
                cfg.smoothing.mode,
                cfg.smoothing.kernel,
            )?;
            flatten_field(&smoothed)
        } else {
            flatten_field(&onehot)
        };
        fields.push(field);
    }
    Ok(Prepared { feats, fields, hard_fields })
}

fn sample_batch(rng: &mut ChaCha8Rng, population: usize, batch: usize) -> Vec<usize> {
    if batch >= population {
        return (0..population).collect();
    }
    // Partial Fisher-Yates over the index pool.
    let mut pool: Vec<usize> = (0..population).collect();
    for slot in 0..batch {
        let pick = rng.gen_range(slot..population);
        pool.swap(slot, pick);
    }
    pool.truncate(batch);
    pool
}

fn sgd_step(
    model: &mut PatchModel,
    velocity: &mut [Tensor],
    grads: &[Tensor],
    learning_rate: f64,
    momentum: f64,
) {
    for ((param, vel), grad) in model.params.iter_mut().zip(velocity).zip(grads) {
        for ((p, v), g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
            *v = momentum * *v + g;
            *p -= learning_rate * *v;
        }
    }
}

fn argmax_labels(probs: &Tensor, height: usize, width: usize) -> LabelMap {
    let classes = probs.shape()[0];
    let pixels = height * width;
    let mut data = vec![0u32; pixels];
    for pixel in 0..pixels {
        let mut best = probs.data()[pixel];
        let mut arg = 0usize;
        for c in 1..classes {
            let v = probs.data()[c * pixels + pixel];
            if v > best {
                best = v;
                arg = c;
            }
        }
        data[pixel] = arg as u32;
    }
    LabelMap::new(height, width, data, None).expect("same geometry")
}

struct Validation {
    accuracy: f64,
    miou_dataset: f64,
    miou_image: f64,
    ece: f64,
    bece: f64,
    probs: Vec<Tensor>,
    per_class: Vec<Option<f64>>,
    ece_bins: Vec<BinRow>,
    bece_bins: Vec<BinRow>,
}

fn validate_model(
    cfg: &ExperimentConfig,
    model: &PatchModel,
    val_feats: &[Tensor],
    val_images: &[SyntheticImage],
) -> Result<Validation, HarnessError> {
    let classes = cfg.dataset.classes;
    let (h, w) = (cfg.dataset.height, cfg.dataset.width);
    let mut pooled = ConfusionAccumulator::new(classes);
    let mut per_image = Vec::with_capacity(val_images.len());
    let mut ece_bins = CalibrationBins::new(cfg.calibration_bins)?;
    let mut bece_bins = CalibrationBins::new(cfg.calibration_bins)?;
    let mut probs_out = Vec::with_capacity(val_images.len());

    for (feats, image) in val_feats.iter().zip(val_images) {
        let probs = model.predict(feats)?;
        let pred = argmax_labels(&probs, h, w);
        let mut acc = ConfusionAccumulator::new(classes);
        acc.accumulate(&pred, &image.labels)?;
        pooled.merge(&acc)?;
        per_image.push(acc);

        let boundary = boundary_mask(&image.labels, cfg.boundary_metric_kernel)?;
        let pixels = h * w;
        for pixel in 0..pixels {
            let mut best = probs.data()[pixel];
            let mut arg = 0usize;
            for c in 1..classes {
                let v = probs.data()[c * pixels + pixel];
                if v > best {
                    best = v;
                    arg = c;
                }
            }
            let correct = arg as u32 == image.labels.class_at(pixel);
            ece_bins.push(best, correct);
            if boundary.get(pixel) {
                bece_bins.push(best, correct);
            }
        }
        probs_out.push(probs.reshaped(&[classes, h, w]).expect("same length"));
    }

    let dataset_report = miou_dataset(&pooled)?;
    let image_report = miou_image(&per_image)?;
    Ok(Validation {
        accuracy: pooled.accuracy()?,
        miou_dataset: dataset_report.miou,
        miou_image: image_report.miou,
        ece: ece_bins.weighted_gap(ece_bins.scored()),
        bece: bece_bins.weighted_gap(bece_bins.scored()),
        probs: probs_out,
        per_class: dataset_report.per_class,
        ece_bins: ece_bins.rows(),
        bece_bins: bece_bins.rows(),
    })
}

/// Runs one training configuration end to end.
///
/// Knowledge distillation first trains a teacher (same architecture at
/// `teacher_hidden_scale` times the hidden widths) with the
/// boundary-smoothed objective, then distills into the student.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let dataset = generate_synthetic(&cfg.dataset, cfg.seed)?;
    match cfg.technique {
        Technique::KnowledgeDistillation => {
            // The teacher shares the architecture at scaled hidden widths
            // and trains on hard labels with the plain CE+JML objective; at
            // desk scale that yields the strongest teacher.
            let mut teacher_cfg = cfg.clone();
            teacher_cfg.technique = Technique::Supervised;
            teacher_cfg.loss.policy = crate::losses::ActiveClassPolicy::present();
            teacher_cfg.model.hidden =
                cfg.model.hidden.iter().map(|&h| h * cfg.kd.teacher_hidden_scale).collect();
            let teacher = train_on_dataset(&teacher_cfg, &dataset, 0x7ea)?;
            let mut outcome = train_on_dataset_kd(cfg, &dataset, &teacher.model)?;
            outcome.report.teacher = Some(Box::new(teacher.report));
            Ok(outcome)
        }
        _ => train_on_dataset(cfg, &dataset, 0),
    }
}

fn poly_lr(cfg: &ExperimentConfig, iter: usize) -> f64 {
    let total = cfg.optimizer.iterations as f64;
    cfg.optimizer.learning_rate * (1.0 - iter as f64 / total).powf(cfg.optimizer.poly_power)
}

fn divergence(iteration: usize) -> impl FnOnce(crate::autodiff::GraphError) -> HarnessError {
    move |e| HarnessError::Divergence { iteration, detail: e.to_string() }
}

fn needs_student_values(mode: ActiveClassMode) -> bool {
    matches!(mode, ActiveClassMode::Prob | ActiveClassMode::Both)
}

fn train_on_dataset(
    cfg: &ExperimentConfig,
    dataset: &SyntheticDataset,
    seed_salt: u64,
) -> Result<TrainOutcome, HarnessError> {
    match cfg.technique {
        Technique::Supervised => train_plain(cfg, dataset, seed_salt, false),
        Technique::LabelSmoothing | Technique::BoundaryLabelSmoothing => {
            train_plain(cfg, dataset, seed_salt, true)
        }
        Technique::SemiSupervised => train_ssl(cfg, dataset, seed_salt),
        Technique::KnowledgeDistillation => unreachable!("handled by train()"),
    }
}

fn finish(
    cfg: &ExperimentConfig,
    model: PatchModel,
    history: Vec<EvalRecord>,
    validation: Validation,
    dataset: &SyntheticDataset,
) -> TrainOutcome {
    let final_metrics = history.last().expect("at least the final record").clone();
    TrainOutcome {
        report: TrainReport {
            technique: cfg.technique,
            seed: cfg.seed,
            history,
            final_metrics,
            teacher: None,
        },
        model,
        val_probs: validation.probs,
        val_labels: dataset.val.iter().map(|i| i.labels.clone()).collect(),
        per_class_iou: validation.per_class,
        ece_bins: validation.ece_bins,
        bece_bins: validation.bece_bins,
        config: cfg.clone(),
    }
}

fn train_plain(
    cfg: &ExperimentConfig,
    dataset: &SyntheticDataset,
    seed_salt: u64,
    smooth: bool,
) -> Result<TrainOutcome, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ seed_salt ^ 0x5eed);
    let prepared = prepare(cfg, &dataset.train, cfg.model.patch, smooth)?;
    let val_feats: Vec<Tensor> =
        dataset.val.iter().map(|i| PatchModel::features(&i.channels, cfg.model.patch)).collect();
    let mut model = PatchModel::init(
        cfg.model.patch,
        super::synth::CHANNELS,
        cfg.dataset.classes,
        &cfg.model.hidden,
        &mut rng,
    );
    let mut velocity: Vec<Tensor> =
        model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let names = model.param_names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let pixels = cfg.dataset.height * cfg.dataset.width;

    let mut history = Vec::new();
    let mut last_validation: Option<Validation> = None;
    let total = cfg.optimizer.iterations;
    for iter in 0..total {
        let lr = poly_lr(cfg, iter);
        let batch = sample_batch(&mut rng, dataset.train.len(), cfg.optimizer.batch_size);

        let mut g = ExprGraph::new();
        let params = model.param_inputs(&mut g);
        let mut student_values = Vec::new();
        if needs_student_values(cfg.loss.policy.mode) {
            for &idx in &batch {
                student_values.push(model.predict(&prepared.feats[idx])?);
            }
        }
        let mut images = Vec::with_capacity(batch.len());
        for (slot, &idx) in batch.iter().enumerate() {
            let feats = g.constant(prepared.feats[idx].clone());
            let probs = model.forward(&mut g, feats, &params, pixels);
            images.push(BatchImage {
                probs,
                probs_values: student_values.get(slot),
                labels: &prepared.fields[idx],
                valid_mask: None,
                scored_pixels: pixels,
            });
        }
        let root = ls_objective(&mut g, &images, &cfg.weights, &cfg.loss)?;

        let mut bindings = Bindings::new();
        model.bind_params(&mut bindings);
        let (loss, grads) =
            g.value_and_gradients(root, &bindings, &wrt).map_err(divergence(iter))?;
        sgd_step(&mut model, &mut velocity, &grads, lr, cfg.optimizer.momentum);

        if (iter + 1) % cfg.eval_every == 0 || iter + 1 == total {
            let validation = validate_model(cfg, &model, &val_feats, &dataset.val)?;
            history.push(EvalRecord {
                iteration: iter + 1,
                learning_rate: lr,
                train_loss: loss,
                accuracy: validation.accuracy,
                miou_dataset: validation.miou_dataset,
                miou_image: validation.miou_image,
                ece: validation.ece,
                bece: validation.bece,
            });
            last_validation = Some(validation);
        }
    }
    Ok(finish(cfg, model, history, last_validation.expect("final validation"), dataset))
}

fn train_on_dataset_kd(
    cfg: &ExperimentConfig,
    dataset: &SyntheticDataset,
    teacher: &PatchModel,
) -> Result<TrainOutcome, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let prepared = prepare(cfg, &dataset.train, cfg.model.patch, false)?;
    let val_feats: Vec<Tensor> =
        dataset.val.iter().map(|i| PatchModel::features(&i.channels, cfg.model.patch)).collect();
    // The teacher is fixed; its target fields are computed once.
    let teacher_fields: Vec<Tensor> = prepared
        .feats
        .iter()
        .map(|f| teacher.predict(f))
        .collect::<Result<Vec<_>, _>>()?;

    let mut model = PatchModel::init(
        cfg.model.patch,
        super::synth::CHANNELS,
        cfg.dataset.classes,
        &cfg.model.hidden,
        &mut rng,
    );
    let mut velocity: Vec<Tensor> =
        model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let names = model.param_names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let pixels = cfg.dataset.height * cfg.dataset.width;

    let mut history = Vec::new();
    let mut last_validation: Option<Validation> = None;
    let total = cfg.optimizer.iterations;
    for iter in 0..total {
        let lr = poly_lr(cfg, iter);
        let batch = sample_batch(&mut rng, dataset.train.len(), cfg.optimizer.batch_size);

        let mut g = ExprGraph::new();
        let params = model.param_inputs(&mut g);
        let needs_values = needs_student_values(cfg.loss.policy.mode)
            || needs_student_values(cfg.kd.teacher_policy.mode);
        let mut student_values = Vec::new();
        if needs_values {
            for &idx in &batch {
                student_values.push(model.predict(&prepared.feats[idx])?);
            }
        }
        let mut images = Vec::with_capacity(batch.len());
        for (slot, &idx) in batch.iter().enumerate() {
            let feats = g.constant(prepared.feats[idx].clone());
            let probs = model.forward(&mut g, feats, &params, pixels);
            images.push(KdImage {
                probs,
                probs_values: student_values.get(slot),
                hard_labels: &prepared.hard_fields[idx],
                teacher: &teacher_fields[idx],
                valid_mask: None,
                scored_pixels: pixels,
            });
        }
        let root = kd_objective(&mut g, &images, &cfg.weights, &cfg.loss, cfg.kd.teacher_policy)?;

        let mut bindings = Bindings::new();
        model.bind_params(&mut bindings);
        let (loss, grads) =
            g.value_and_gradients(root, &bindings, &wrt).map_err(divergence(iter))?;
        sgd_step(&mut model, &mut velocity, &grads, lr, cfg.optimizer.momentum);

        if (iter + 1) % cfg.eval_every == 0 || iter + 1 == total {
            let validation = validate_model(cfg, &model, &val_feats, &dataset.val)?;
            history.push(EvalRecord {
                iteration: iter + 1,
                learning_rate: lr,
                train_loss: loss,
                accuracy: validation.accuracy,
                miou_dataset: validation.miou_dataset,
                miou_image: validation.miou_image,
                ece: validation.ece,
                bece: validation.bece,
            });
            last_validation = Some(validation);
        }
    }
    Ok(finish(cfg, model, history, last_validation.expect("final validation"), dataset))
}

fn train_ssl(
    cfg: &ExperimentConfig,
    dataset: &SyntheticDataset,
    seed_salt: u64,
) -> Result<TrainOutcome, HarnessError> {
    let n = dataset.train.len();
    let labeled_count = ((cfg.ssl.labeled_fraction * n as f64).ceil() as usize).clamp(1, n);
    if labeled_count == n {
        return Err(HarnessError::Config {
            detail: "semi-supervised training needs at least one unlabeled image".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ seed_salt ^ 0x55e1);
    // Both orientations are precomputed; each step picks one per image.
    let flipped: Vec<SyntheticImage> = dataset.train.iter().map(flip_horizontal).collect();
    let straight = prepare(cfg, &dataset.train, cfg.model.patch, true)?;
    let mirrored = prepare(cfg, &flipped, cfg.model.patch, true)?;
    let val_feats: Vec<Tensor> =
        dataset.val.iter().map(|i| PatchModel::features(&i.channels, cfg.model.patch)).collect();

    let mut model = PatchModel::init(
        cfg.model.patch,
        super::synth::CHANNELS,
        cfg.dataset.classes,
        &cfg.model.hidden,
        &mut rng,
    );
    let mut velocity: Vec<Tensor> =
        model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut ema_params = model.params.clone();
    let names = model.param_names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let pixels = cfg.dataset.height * cfg.dataset.width;
    let noise = Normal::new(0.0, cfg.ssl.feature_noise.max(1e-12)).map_err(|e| {
        HarnessError::Config { detail: format!("bad feature noise: {e}") }
    })?;

    let mut history = Vec::new();
    let mut last_validation: Option<Validation> = None;
    let total = cfg.optimizer.iterations;
    for iter in 0..total {
        let lr = poly_lr(cfg, iter);
        let lab_batch = sample_batch(&mut rng, labeled_count, cfg.optimizer.batch_size);
        let unlab_pool = n - labeled_count;
        let unlab_batch: Vec<usize> = sample_batch(&mut rng, unlab_pool, cfg.optimizer.batch_size)
            .into_iter()
            .map(|i| labeled_count + i)
            .collect();

        let mut g = ExprGraph::new();
        let params = model.param_inputs(&mut g);

        // Supervised branch: flip augmentation, smoothed labels.
        let mut sup_refs: Vec<(usize, bool)> = Vec::new();
        for &idx in &lab_batch {
            sup_refs.push((idx, rng.gen::<bool>()));
        }
        let mut sup_images = Vec::with_capacity(sup_refs.len());
        for &(idx, flip) in &sup_refs {
            let side = if flip { &mirrored } else { &straight };
            let feats = g.constant(side.feats[idx].clone());
            let probs = model.forward(&mut g, feats, &params, pixels);
            sup_images.push(BatchImage {
                probs,
                probs_values: None,
                labels: &side.fields[idx],
                valid_mask: None,
                scored_pixels: pixels,
            });
        }

        // Unsupervised branch: the EMA teacher scores the clean view, the
        // student sees the same view with extra feature noise.
        let ema_model = PatchModel { params: ema_params.clone(), ..model.clone() };
        let mut teacher_targets = Vec::with_capacity(unlab_batch.len());
        let mut unsup_feats = Vec::with_capacity(unlab_batch.len());
        for &idx in &unlab_batch {
            let flip = rng.gen::<bool>();
            let side = if flip { &mirrored } else { &straight };
            teacher_targets.push(ema_model.predict(&side.feats[idx])?);
            let mut noisy = side.feats[idx].clone();
            for v in noisy.data_mut() {
                *v += noise.sample(&mut rng);
            }
            unsup_feats.push(noisy);
        }
        let mut unsup_images = Vec::with_capacity(unlab_batch.len());
        for (feats, target) in unsup_feats.iter().zip(&teacher_targets) {
            let fnode = g.constant(feats.clone());
            let probs = model.forward(&mut g, fnode, &params, pixels);
            unsup_images.push(BatchImage {
                probs,
                probs_values: None,
                labels: target,
                valid_mask: None,
                scored_pixels: pixels,
            });
        }

        let root = ssl_objective(&mut g, &sup_images, &unsup_images, &cfg.weights, &cfg.loss)?;
        let mut bindings = Bindings::new();
        model.bind_params(&mut bindings);
        let (loss, grads) =
            g.value_and_gradients(root, &bindings, &wrt).map_err(divergence(iter))?;
        sgd_step(&mut model, &mut velocity, &grads, lr, cfg.optimizer.momentum);
        ema_update(&mut ema_params, &model.params, cfg.ssl.ema_decay)?;

        if (iter + 1) % cfg.eval_every == 0 || iter + 1 == total {
            let validation = validate_model(cfg, &model, &val_feats, &dataset.val)?;
            history.push(EvalRecord {
                iteration: iter + 1,
                learning_rate: lr,
                train_loss: loss,
                accuracy: validation.accuracy,
                miou_dataset: validation.miou_dataset,
                miou_image: validation.miou_image,
                ece: validation.ece,
                bece: validation.bece,
            });
            last_validation = Some(validation);
        }
    }
    Ok(finish(cfg, model, history, last_validation.expect("final validation"), dataset))
}

fn write_history_csv(path: &Path, history: &[EvalRecord]) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str("iteration,learning_rate,train_loss,accuracy,miou_dataset,miou_image,ece,bece\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.learning_rate,
            r.train_loss,
            r.accuracy,
            r.miou_dataset,
            r.miou_image,
            r.ece,
            r.bece
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes every artifact of a finished run: metric history, final
/// reliability tables, per-class IoU, validation prediction dumps, and the
/// echoed config. No timestamps, so identical runs produce identical bytes.
pub fn write_outputs(outcome: &TrainOutcome, out_dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir)?;
    write_history_csv(&out_dir.join("history.csv"), &outcome.report.history)?;
    if let Some(teacher) = &outcome.report.teacher {
        write_history_csv(&out_dir.join("teacher_history.csv"), &teacher.history)?;
    }

    let mut buf = Vec::new();
    write_per_class_iou_csv(&mut buf, &outcome.per_class_iou)?;
    fs::write(out_dir.join("per_class_iou.csv"), buf)?;

    let mut buf = Vec::new();
    write_bins_csv(&mut buf, &outcome.ece_bins)?;
    fs::write(out_dir.join("reliability_ece.csv"), buf)?;
    let mut buf = Vec::new();
    write_bins_csv(&mut buf, &outcome.bece_bins)?;
    fs::write(out_dir.join("reliability_bece.csv"), buf)?;

    for (i, (probs, labels)) in
        outcome.val_probs.iter().zip(&outcome.val_labels).enumerate()
    {
        write_ptf_file(out_dir.join(format!("val_{i:03}_probs.ptf")), probs)?;
        let data: Vec<f64> = labels.data().iter().map(|&c| c as f64).collect();
        let label_tensor =
            Tensor::new(vec![labels.height(), labels.width()], data).expect("finite labels");
        write_ptf_file(out_dir.join(format!("val_{i:03}_labels.ptf")), &label_tensor)?;
    }

    let mut file = fs::File::create(out_dir.join("report.json"))?;
    file.write_all(serde_json::to_string_pretty(&outcome.report).expect("serializable").as_bytes())?;
    file.write_all(b"\n")?;

    let mut file = fs::File::create(out_dir.join("config.json"))?;
    file.write_all(serde_json::to_string_pretty(&outcome.config).expect("serializable").as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DatasetSpec, ModelSpec, OptimizerSpec};

    fn tiny_config(technique: Technique) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_technique(technique);
        cfg.dataset = DatasetSpec {
            width: 10,
            height: 10,
            classes: 3,
            train_images: 4,
            val_images: 2,
            shape_density: 0.7,
            noise: 0.3,
            boundary_jitter: 0.3,
        };
        cfg.model = ModelSpec { patch: 3, hidden: vec![6] };
        cfg.optimizer = OptimizerSpec {
            learning_rate: 0.05,
            momentum: 0.9,
            poly_power: 0.9,
            iterations: 12,
            batch_size: 2,
        };
        cfg.eval_every = 6;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn supervised_smoke_run_reports_all_metrics() {
        let outcome = train(&tiny_config(Technique::Supervised)).unwrap();
        assert_eq!(outcome.report.history.len(), 2);
        let last = &outcome.report.final_metrics;
        assert!(last.train_loss.is_finite());
        assert!((0.0..=1.0).contains(&last.accuracy));
        assert!((0.0..=1.0).contains(&last.miou_dataset));
        assert!((0.0..=1.0).contains(&last.miou_image));
        assert!((0.0..=1.0).contains(&last.ece));
        assert!((0.0..=1.0).contains(&last.bece));
        assert_eq!(outcome.val_probs.len(), 2);
    }

    #[test]
    fn identical_config_and_seed_reproduce_history() {
        let cfg = tiny_config(Technique::BoundaryLabelSmoothing);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        for (x, y) in a.val_probs.iter().zip(&b.val_probs) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn kd_trains_teacher_then_student() {
        let mut cfg = tiny_config(Technique::KnowledgeDistillation);
        cfg.kd.teacher_hidden_scale = 2;
        let outcome = train(&cfg).unwrap();
        let teacher = outcome.report.teacher.as_ref().expect("teacher report");
        assert_eq!(teacher.technique, Technique::BoundaryLabelSmoothing);
        assert!(outcome.report.final_metrics.train_loss.is_finite());
    }

    #[test]
    fn ssl_runs_with_ema_teacher() {
        let mut cfg = tiny_config(Technique::SemiSupervised);
        cfg.ssl.labeled_fraction = 0.5;
        cfg.ssl.ema_decay = 0.9;
        let outcome = train(&cfg).unwrap();
        assert!(outcome.report.final_metrics.train_loss.is_finite());
    }

    #[test]
    fn ssl_needs_an_unlabeled_image() {
        let mut cfg = tiny_config(Technique::SemiSupervised);
        cfg.ssl.labeled_fraction = 1.0;
        assert!(matches!(train(&cfg), Err(HarnessError::Config { .. })));
    }

    #[test]
    fn outputs_are_written_and_deterministic() {
        let cfg = tiny_config(Technique::Supervised);
        let outcome = train(&cfg).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        write_outputs(&outcome, dir_a.path()).unwrap();
        for name in
            ["history.csv", "per_class_iou.csv", "reliability_ece.csv", "val_000_probs.ptf"]
        {
            assert!(dir_a.path().join(name).exists(), "{name} missing");
        }
        let outcome_b = train(&cfg).unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_outputs(&outcome_b, dir_b.path()).unwrap();
        let a = fs::read(dir_a.path().join("history.csv")).unwrap();
        let b = fs::read(dir_b.path().join("history.csv")).unwrap();
        assert_eq!(a, b);
        let a = fs::read(dir_a.path().join("val_000_probs.ptf")).unwrap();
        let b = fs::read(dir_b.path().join("val_000_probs.ptf")).unwrap();
        assert_eq!(a, b);
    }
}
