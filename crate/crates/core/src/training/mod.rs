//! Experiment orchestration: batch assembly, the joint optimization loop,
//! best-epoch selection, contrastive pretraining followed by finetuning, and
//! seeded replicates.

mod config;
mod data;
mod history;
mod optim;

pub use config::{ablation_schedule, ExperimentConfig, ModelVariant, OptimizerConfig, VariantSpec};
pub use data::{assemble_step_batches, Datasets, DomainAccess, PairPool, PoolRole, SplitName, StepBatches, TrainingData};
pub use history::{EpochRecord, Phase, TrainHistory};
pub use optim::Adam;

use std::collections::BTreeMap;

use crate::batch::SliceBatch;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, mean_dice};
use crate::losses::{dice_loss, negative_cosine_stopgrad, ntxent_loss, ContrastiveKind, LossConfig, ProjectionBatch};
use crate::model::{build_model_with, ModelState};
use crate::pairing::PairBatch;
use crate::rng::{stream, tag, Rng};
use crate::tensor::{Real, Tensor};

/// Model at the selected epoch and the full training history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub history: TrainHistory,
}

#[derive(Clone, Copy, Debug)]
struct StepLosses {
    sup: Option<f64>,
    total: f64,
}

/// Per-phase settings of the optimization loop.
struct LoopSpec<'c> {
    phase: Phase,
    epochs: usize,
    loss: &'c LossConfig,
    kind: ContrastiveKind,
    supervised: bool,
    contrastive_weight: f64,
    select: bool,
    threshold: f64,
}

/// Trains one model. Contrastive variants optimize
/// `w · mean_d L_con,d + λ · L_sup` per step; the baseline optimizes the
/// supervised term alone. The pretrain variants dispatch to
/// [`pretrain_finetune`].
pub fn train(config: &ExperimentConfig, datasets: &Datasets, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if config.model_variant.is_pretrain() {
        return pretrain_finetune(config, datasets, seed);
    }
    let data = TrainingData::prepare(datasets, config, seed)?;
    let mut model = build_model_with(&config.effective_arch(), seed, config.components())?;
    let spec = LoopSpec {
        phase: Phase::Joint,
        epochs: config.epochs,
        loss: &config.loss,
        kind: config.contrastive_kind(),
        supervised: true,
        contrastive_weight: if config.model_variant.is_contrastive() { config.loss.contrastive_weight } else { 0.0 },
        select: true,
        threshold: config.threshold,
    };
    let mut history = TrainHistory::default();
    let best = run_loop(&mut model, &data, config, seed, &spec, &mut history)?;
    Ok(TrainOutcome {
        model: best.unwrap_or(model),
        history,
    })
}

/// Phase 1 optimizes only the contrastive loss on target-domain pairs; phase
/// 2 restarts the optimizer from the phase-1 backbone, drops the head, and
/// optimizes only the supervised loss on the labeled source.
pub fn pretrain_finetune(config: &ExperimentConfig, datasets: &Datasets, seed: u64) -> Result<TrainOutcome> {
    let phase1 = pretrain(config, datasets, seed)?;
    finetune(config, datasets, seed, phase1)
}

/// Contrastive-only training on the unlabeled target pools. The returned
/// model keeps its head; no validation or selection takes place.
pub fn pretrain(config: &ExperimentConfig, datasets: &Datasets, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if !config.model_variant.is_contrastive() {
        return Err(Error::validation("model_variant", "pretraining needs a contrastive variant"));
    }
    let pretrain_epochs = config.pretrain_epochs.unwrap_or(config.epochs);
    let mut history = TrainHistory {
        pretrain_epochs,
        ..TrainHistory::default()
    };
    let data = TrainingData::prepare_pretrain(datasets, config, seed)?;
    let mut model = build_model_with(&config.effective_arch(), seed, config.components())?;
    let spec = LoopSpec {
        phase: Phase::Pretrain,
        epochs: pretrain_epochs,
        loss: &config.loss,
        kind: config.contrastive_kind(),
        supervised: false,
        contrastive_weight: 1.0,
        select: false,
        threshold: config.threshold,
    };
    run_loop(&mut model, &data, config, seed, &spec, &mut history)?;
    Ok(TrainOutcome { model, history })
}

/// Supervised-only training of `phase1`'s backbone on the labeled source,
/// with a fresh optimizer and the usual best-epoch selection.
pub fn finetune(config: &ExperimentConfig, datasets: &Datasets, seed: u64, phase1: TrainOutcome) -> Result<TrainOutcome> {
    let TrainOutcome { model, mut history } = phase1;
    if model.arch != config.effective_arch() {
        return Err(Error::Shape("pretrained backbone architecture differs from the configuration".into()));
    }
    let finetune_config = ExperimentConfig {
        model_variant: ModelVariant::BaselineUnet,
        ..config.clone()
    };
    let data = TrainingData::prepare(datasets, &finetune_config, seed)?;
    let mut model = model.into_inference();
    history.finetune_epochs = config.epochs;
    let spec = LoopSpec {
        phase: Phase::Finetune,
        epochs: config.epochs,
        loss: &config.loss,
        kind: config.contrastive_kind(),
        supervised: true,
        contrastive_weight: 0.0,
        select: true,
        threshold: config.threshold,
    };
    let best = run_loop(&mut model, &data, config, seed, &spec, &mut history)?;
    Ok(TrainOutcome {
        model: best.unwrap_or(model),
        history,
    })
}

/// Independent [`train`] per seed, in the order given.
pub fn run_replicates(config: &ExperimentConfig, datasets: &Datasets) -> Result<Vec<(u64, TrainOutcome)>> {
    config
        .seeds
        .iter()
        .map(|&seed| {
            train(config, datasets, seed)
                .map(|o| (seed, o))
                .map_err(|e| Error::Seed {
                    seed,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Validation mean Dice across classes, or `None` without validation volumes.
pub fn validation_dice(model: &ModelState, volumes: &[&crate::synthdata::Volume], threshold: f64) -> Result<Option<f64>> {
    if volumes.is_empty() {
        return Ok(None);
    }
    let records = evaluate_model(model, volumes.iter().copied(), threshold, "val", 0)?;
    Ok(mean_dice(&records))
}

fn run_loop(
    model: &mut ModelState,
    data: &TrainingData<'_>,
    config: &ExperimentConfig,
    seed: u64,
    spec: &LoopSpec<'_>,
    history: &mut TrainHistory,
) -> Result<Option<ModelState>> {
    let mut opt = Adam::new(&config.optimizer, model);
    let mut order_rng = stream(seed, tag::SUPERVISED_ORDER);
    let mut pair_rng = stream(seed, tag::PAIRS);
    let mut dropout_rng = stream(seed, tag::DROPOUT);
    let mut best: Option<(f64, ModelState)> = None;
    let mut warned_no_val = false;
    for epoch in 1..=spec.epochs {
        let plan: Vec<Option<Vec<usize>>> = if spec.supervised {
            data.epoch_batches(&mut order_rng).into_iter().map(Some).collect()
        } else {
            vec![None; data.pretrain_steps_per_epoch()]
        };
        let mut sup_sum = 0.0;
        let mut total_sum = 0.0;
        let mut con_sum: BTreeMap<String, f64> = BTreeMap::new();
        for (step, ids) in plan.iter().enumerate() {
            let sup = ids.as_ref().map(|ids| data.supervised_batch(ids)).transpose()?;
            let (src, tgt) = data.pair_batches(&mut pair_rng);
            let mut con_terms = Vec::new();
            let losses = optimizer_step(
                model,
                &mut opt,
                sup.as_ref(),
                src.iter().chain(&tgt),
                spec,
                &mut dropout_rng,
                &mut con_terms,
            );
            let losses = match losses {
                Ok(l) => l,
                Err(StepError::Fail(e)) => return Err(e),
                Err(StepError::NonFinite { sup, con }) => {
                    let pick = |role: PoolRole| {
                        data.pools
                            .iter()
                            .zip(&con)
                            .find(|(p, _)| p.role == role)
                            .map(|(_, &v)| v)
                    };
                    return Err(Error::Diverged {
                        epoch,
                        step: step + 1,
                        sup: sup.unwrap_or(f64::NAN),
                        con_source: pick(PoolRole::Source),
                        con_target: pick(PoolRole::Target),
                    });
                }
            };
            sup_sum += losses.sup.unwrap_or(0.0);
            total_sum += losses.total;
            for (pool, v) in data.pools.iter().zip(&con_terms) {
                *con_sum.entry(pool.domain_id.clone()).or_default() += v;
            }
        }
        let steps = plan.len();
        let val_dice = if spec.select {
            validation_dice(model, &data.val, spec.threshold)?
        } else {
            None
        };
        log::info!(
            "{:?} epoch {epoch}/{}: total {:.4}, val dice {}",
            spec.phase,
            spec.epochs,
            total_sum / steps as f64,
            val_dice.map_or("-".to_string(), |d| format!("{d:.2}"))
        );
        history.records.push(EpochRecord {
            epoch,
            phase: spec.phase,
            steps,
            sup_loss: spec.supervised.then(|| sup_sum / steps as f64),
            con_loss: con_sum.into_iter().map(|(k, v)| (k, v / steps as f64)).collect(),
            total_loss: total_sum / steps as f64,
            val_dice,
        });
        if spec.select {
            match val_dice {
                Some(d) => {
                    if best.as_ref().map_or(true, |(b, _)| d > *b) {
                        best = Some((d, model.clone()));
                        history.best_epoch = Some(epoch);
                        history.best_val_dice = Some(d);
                    }
                }
                None => {
                    if !warned_no_val {
                        log::warn!("no validation volumes; the final epoch is returned");
                        warned_no_val = true;
                    }
                    history.best_epoch = Some(epoch);
                }
            }
        }
    }
    Ok(best.map(|(_, m)| m))
}

enum StepError {
    Fail(Error),
    NonFinite { sup: Option<f64>, con: Vec<f64> },
}

impl From<Error> for StepError {
    fn from(e: Error) -> Self {
        StepError::Fail(e)
    }
}

/// Loss terms of one joint step. `con` holds the unweighted contrastive loss
/// per pair batch, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLosses {
    pub sup: Option<f64>,
    pub con: Vec<f64>,
    pub total: f64,
}

impl JointLosses {
    pub fn is_finite(&self) -> bool {
        self.sup.is_none_or(f64::is_finite) && self.con.iter().all(|c| c.is_finite())
    }
}

/// Zeroes and then accumulates into `model` the gradient of
/// `weight · mean(con) + λ · L_sup`, with one contrastive term per pair
/// batch and the supervised term only when `sup` is given. Dropout is drawn
/// from `dropout` when present. Stops at the first non-finite term.
#[allow(clippy::too_many_arguments)]
pub fn joint_gradients<R: Real>(
    model: &mut ModelState<R>,
    sup: Option<&SliceBatch>,
    pairs: &[&PairBatch],
    loss: &LossConfig,
    kind: ContrastiveKind,
    weight: f64,
    dropout: Option<&mut Rng>,
) -> Result<JointLosses> {
    model.zero_grad();
    let lambda = loss.lambda_sup;
    let mut out = JointLosses {
        sup: None,
        con: Vec::new(),
        total: f64::NAN,
    };
    if let Some(batch) = sup {
        model.check_batch(batch)?;
        let x: Tensor<R> = batch.to_tensor();
        let y: Tensor<R> = batch.labels_tensor().ok_or_else(|| Error::Missing("labels of supervised batch".into()))?;
        let trace = model.backbone.forward_trace(&x, dropout);
        let (l, mut grad) = dice_loss(&trace.probs, &y, &batch.class_mask, loss.epsilon, loss.dice_reduction)?;
        out.sup = Some(l);
        if !l.is_finite() {
            return Ok(out);
        }
        let s = R::of(lambda);
        grad.data.iter_mut().for_each(|g| *g *= s);
        model.backbone.backward_segment(&trace, &grad);
    }
    if !pairs.is_empty() {
        let scale = R::of(weight / pairs.len() as f64);
        for pb in pairs {
            let l = contrastive_backward(model, pb, loss, kind, scale)?;
            out.con.push(l);
            if !l.is_finite() {
                return Ok(out);
            }
        }
    }
    let con_mean = if out.con.is_empty() {
        0.0
    } else {
        out.con.iter().sum::<f64>() / out.con.len() as f64
    };
    out.total = weight * con_mean + out.sup.map_or(0.0, |l| lambda * l);
    Ok(out)
}

/// Accumulates the gradients of one joint objective and applies one update.
/// `con_terms` receives the unweighted contrastive loss per pair batch.
fn optimizer_step<'b>(
    model: &mut ModelState,
    opt: &mut Adam,
    sup: Option<&SliceBatch>,
    pairs: impl Iterator<Item = &'b PairBatch>,
    spec: &LoopSpec<'_>,
    dropout_rng: &mut Rng,
    con_terms: &mut Vec<f64>,
) -> std::result::Result<StepLosses, StepError> {
    let pairs: Vec<&PairBatch> = pairs.collect();
    let losses = joint_gradients(model, sup, &pairs, spec.loss, spec.kind, spec.contrastive_weight, Some(dropout_rng))?;
    *con_terms = losses.con.clone();
    let non_finite = || StepError::NonFinite {
        sup: losses.sup,
        con: losses.con.clone(),
    };
    if !losses.is_finite() {
        return Err(non_finite());
    }
    let mut finite = true;
    model.visit(&mut |p| finite &= p.grad.iter().all(|g| g.is_finite()));
    if !finite {
        log::error!("non-finite gradient; aborting");
        return Err(non_finite());
    }
    opt.step(model);
    Ok(StepLosses {
        sup: losses.sup,
        total: losses.total,
    })
}

fn contrastive_backward<R: Real>(
    model: &mut ModelState<R>,
    pb: &PairBatch,
    loss: &LossConfig,
    kind: ContrastiveKind,
    scale: R,
) -> Result<f64> {
    let n = pb.len();
    let domain = pb.domain_id.first().cloned().unwrap_or_default();
    model.check_batch(&pb.view_a)?;
    let x = Tensor::concat_batch(&pb.view_a.to_tensor(), &pb.view_b.to_tensor());
    let trace = model.backbone.encode_trace(&x);
    let head = model.head.as_mut().ok_or_else(|| Error::Missing("projection head".into()))?;
    let (z, head_cache) = head.forward(trace.features());
    let (z_a, z_b) = z.split_batch(n);
    let (value, dz) = match kind {
        ContrastiveKind::Ntxent => {
            let out = ntxent_loss(&ProjectionBatch::single(z_a, z_b, &domain)?, loss.tau, loss.include_positive)?;
            let mut dz = Tensor::concat_batch(&out.dz_a, &out.dz_b);
            dz.data.iter_mut().for_each(|g| *g *= scale);
            (out.loss, dz)
        }
        ContrastiveKind::Simsiam => {
            let pred = model.predictor.as_mut().ok_or_else(|| Error::Missing("predictor".into()))?;
            let (q_a, ca) = pred.forward(&z_a);
            let (q_b, cb) = pred.forward(&z_b);
            let (l, mut dq_a, mut dq_b) = negative_cosine_stopgrad(&q_a, &q_b, &z_a, &z_b)?;
            dq_a.data.iter_mut().chain(dq_b.data.iter_mut()).for_each(|g| *g *= scale);
            let dz_a = pred.backward(&ca, &dq_a);
            let dz_b = pred.backward(&cb, &dq_b);
            (l, Tensor::concat_batch(&dz_a, &dz_b))
        }
    };
    let dh = model.head.as_mut().expect("checked above").backward(&head_cache, &dz);
    model.backbone.backward_features(&trace, &dh);
    Ok(value)
}

#[cfg(test)]
mod tests;
