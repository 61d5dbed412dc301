use super::*;
use crate::losses::ContrastiveKind;
use crate::model::{build_model, ParamMode};
use crate::synthdata::{generate_domain, split_dataset, DomainSpec};

fn domain(id: &str, gain: f64) -> DomainSpec {
    let mut d = DomainSpec::desk(id, 5);
    d.slice_shape = (16, 16);
    d.slices_per_volume = 4;
    d.content.lesion_scale = 3.0;
    d.appearance.contrast_gain = gain;
    d
}

fn datasets(specs: &[DomainSpec]) -> Datasets {
    Datasets::in_memory(specs.iter().map(|s| {
        let vols = generate_domain(s, 7).unwrap();
        (s.domain_id.clone(), split_dataset(vols, (0.6, 0.2, 0.2), 7).unwrap())
    }))
}

fn config(variant: ModelVariant, target: &[&str]) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk("t", variant, &["S"], target);
    c.domains = vec![domain("S", 1.0), domain("T", 0.6)];
    c.arch.input_shape = (16, 16);
    c.arch.base_channels = 4;
    c.arch.mlp_units = 16;
    c.epochs = 2;
    c.batch_size_sup = 4;
    c.batch_size_con = 3;
    c
}

fn setup(variant: ModelVariant, target: &[&str]) -> (ExperimentConfig, Datasets) {
    let c = config(variant, target);
    let d = datasets(&c.domains);
    (c, d)
}

fn param_values(m: &ModelState) -> Vec<Vec<f32>> {
    m.params().iter().map(|p| p.value.clone()).collect()
}

fn backbone_values(m: &ModelState) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    m.backbone.visit(&mut |p| out.push(p.value.clone()));
    out
}

#[test]
fn baseline_never_touches_the_target_domain() {
    let (c, d) = setup(ModelVariant::BaselineUnet, &["T"]);
    let out = train(&c, &d, 0).unwrap();
    assert!(d.access("T").is_untouched(), "{:?}", d.access("T"));
    assert!(d.access("S").label_reads > 0);
    assert!(out.model.head.is_none());
    assert_eq!(out.history.records.len(), 2);
    assert!(out.history.records.iter().all(|r| r.con_loss.is_empty()));
}

#[test]
fn domain_generalization_touches_no_target_data() {
    let (mut c, d) = setup(ModelVariant::Segclr, &["T"]);
    c.unlabeled_fraction = 0.0;
    let out = train(&c, &d, 0).unwrap();
    assert!(d.access("T").is_untouched());
    // The source still feeds the contrastive branch.
    assert!(out.history.records.iter().all(|r| r.con_loss.contains_key("S")));
}

#[test]
fn segclr_logs_both_contrastive_terms_nonzero() {
    let (c, d) = setup(ModelVariant::Segclr, &["T"]);
    let out = train(&c, &d, 0).unwrap();
    for r in &out.history.records {
        assert_eq!(r.con_loss.len(), 2);
        assert!(r.con_loss.values().all(|v| *v != 0.0 && v.is_finite()), "{:?}", r.con_loss);
        assert!(r.sup_loss.unwrap() > 0.0);
    }
    assert_eq!(d.access("T").label_reads, 0);
    assert!(d.access("T").image_reads > 0);
}

#[test]
fn zero_contrastive_weight_reproduces_the_baseline_backbone() {
    let (c, d) = setup(ModelVariant::BaselineUnet, &["T"]);
    let base = train(&c, &d, 3).unwrap();
    let mut s = c.clone();
    s.model_variant = ModelVariant::Segclr;
    s.loss.contrastive_weight = 0.0;
    let seg = train(&s, &d, 3).unwrap();
    assert_eq!(backbone_values(&base.model), backbone_values(&seg.model));
    let vb: Vec<_> = base.history.records.iter().map(|r| r.val_dice).collect();
    let vs: Vec<_> = seg.history.records.iter().map(|r| r.val_dice).collect();
    assert_eq!(vb, vs);
}

#[test]
fn training_is_deterministic() {
    let (c, d) = setup(ModelVariant::Segclr, &["T"]);
    let a = train(&c, &d, 5).unwrap();
    let b = train(&c, &d, 5).unwrap();
    assert_eq!(param_values(&a.model), param_values(&b.model));
    assert_eq!(a.history, b.history);
    let other = train(&c, &d, 6).unwrap();
    assert_ne!(param_values(&a.model), param_values(&other.model));
}

#[test]
fn returned_model_is_the_best_logged_epoch() {
    let (mut c, d) = setup(ModelVariant::BaselineUnet, &[]);
    c.epochs = 4;
    let out = train(&c, &d, 1).unwrap();
    let best = out.history.best_val_dice.unwrap();
    assert!(out.history.records.iter().all(|r| r.val_dice.unwrap() <= best));
    let first = out.history.records.iter().position(|r| r.val_dice == Some(best)).unwrap() + 1;
    assert_eq!(out.history.best_epoch, Some(first));
    let val: Vec<&crate::synthdata::Volume> = d.split("S", SplitName::Val).unwrap().iter().collect();
    assert_eq!(validation_dice(&out.model, &val, c.threshold).unwrap(), Some(best));
}

#[test]
fn simsiam_variant_trains_the_predictor() {
    let (mut c, d) = setup(ModelVariant::Segclr, &["T"]);
    c.loss.contrastive_kind = ContrastiveKind::Simsiam;
    c.batch_size_con = 1;
    let out = train(&c, &d, 0).unwrap();
    let init = build_model_with::<f32>(&c.effective_arch(), 0, c.components()).unwrap();
    assert_ne!(out.model.predictor, init.predictor);
    for r in &out.history.records {
        assert!(r.con_loss.values().all(|v| (-2.0..=2.0).contains(v) && *v != 0.0));
    }
}

#[test]
fn pretrain_reads_no_labels_and_hands_over_its_backbone() {
    let (mut c, d) = setup(ModelVariant::SimclrPretrain, &["T"]);
    c.pretrain_epochs = Some(1);
    let phase1 = pretrain(&c, &d, 2).unwrap();
    let log = d.access_log();
    assert!(log.values().all(|a| a.label_reads == 0), "{log:?}");
    assert!(d.access("S").is_untouched());
    assert_eq!(phase1.history.records.len(), 1);
    assert!(phase1.history.records[0].sup_loss.is_none());
    assert_eq!(phase1.history.records[0].phase, Phase::Pretrain);

    let composed = pretrain_finetune(&c, &d, 2).unwrap();
    let phase1_backbone = backbone_values(&phase1.model);
    let manual = finetune(&c, &d, 2, phase1).unwrap();
    assert_eq!(param_values(&composed.model), param_values(&manual.model));
    assert_eq!(composed.history.pretrain_epochs, 1);
    assert_eq!(composed.history.finetune_epochs, 2);
    assert_eq!(composed.history.epochs(Phase::Pretrain).count(), 1);
    assert_eq!(composed.history.epochs(Phase::Finetune).count(), 2);
    assert!(composed.model.head.is_none());

    // With a zero learning rate the finetuned model is the phase-1 backbone.
    let mut frozen = c.clone();
    frozen.optimizer.lr = 1e-30;
    let p1 = pretrain(&c, &d, 2).unwrap();
    let ft = finetune(&frozen, &d, 2, p1).unwrap();
    for (a, b) in backbone_values(&ft.model).iter().zip(&phase1_backbone) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-20, "{x} vs {y}");
        }
    }
}

#[test]
fn pretrain_requires_target_data() {
    let (mut c, d) = setup(ModelVariant::SimsiamPretrain, &["T"]);
    c.unlabeled_fraction = 0.0;
    assert!(train(&c, &d, 0).unwrap_err().is_validation());
}

#[test]
fn replicates_match_individual_runs_in_seed_order() {
    let (mut c, d) = setup(ModelVariant::BaselineUnet, &[]);
    c.epochs = 1;
    c.seeds = vec![4, 1];
    let reps = run_replicates(&c, &d).unwrap();
    assert_eq!(reps.iter().map(|r| r.0).collect::<Vec<_>>(), vec![4, 1]);
    let single = train(&c, &d, 1).unwrap();
    assert_eq!(param_values(&reps[1].1.model), param_values(&single.model));
    c.seeds = vec![1, 4];
    let swapped = run_replicates(&c, &d).unwrap();
    assert_eq!(param_values(&swapped[0].1.model), param_values(&reps[1].1.model));
    assert_eq!(param_values(&swapped[1].1.model), param_values(&reps[0].1.model));
}

#[test]
fn replicate_failures_carry_the_seed() {
    let (mut c, _) = setup(ModelVariant::BaselineUnet, &[]);
    c.seeds = vec![9];
    let empty = Datasets::in_memory(Vec::new());
    match run_replicates(&c, &empty).unwrap_err() {
        Error::Seed { seed, source } => {
            assert_eq!(seed, 9);
            assert!(matches!(*source, Error::Missing(_)));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn non_finite_input_aborts_with_diagnostics() {
    let c = config(ModelVariant::BaselineUnet, &[]);
    let mut split = split_dataset(generate_domain(&c.domains[0], 7).unwrap(), (0.6, 0.2, 0.2), 7).unwrap();
    split.train.iter_mut().for_each(|v| v.voxels.iter_mut().step_by(7).for_each(|x| *x = f32::NAN));
    let d = Datasets::in_memory([("S".to_string(), split)]);
    match train(&c, &d, 0).unwrap_err() {
        Error::Diverged { epoch, step, .. } => assert_eq!((epoch, step), (1, 1)),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn step_batches_honor_sizes_and_roles() {
    let (c, d) = setup(ModelVariant::Segclr, &["T"]);
    let data = TrainingData::prepare(&d, &c, 0).unwrap();
    let ids = data.epoch_batches(&mut stream(0, tag::SUPERVISED_ORDER));
    assert_eq!(ids.len(), data.steps_per_epoch());
    assert!(ids.iter().all(|b| b.len() == c.batch_size_sup));
    let a = assemble_step_batches(&data, &ids[0], &mut stream(0, tag::PAIRS)).unwrap();
    let b = assemble_step_batches(&data, &ids[0], &mut stream(0, tag::PAIRS)).unwrap();
    assert_eq!(a.sup, b.sup);
    assert_eq!(a.source_pairs, b.source_pairs);
    assert_eq!(a.target_pairs, b.target_pairs);
    assert_eq!(a.sup.len(), 4);
    assert_eq!(a.sup.class_mask.len(), 4 * 2);
    assert_eq!(a.source_pairs.len(), 1);
    assert_eq!(a.target_pairs.len(), 1);
    assert!(a.pair_batches().all(|p| p.len() == 3));
    assert!(a.target_pairs[0].domain_id.iter().all(|x| x == "T"));

    let (c, d) = setup(ModelVariant::Segclr, &[]);
    let data = TrainingData::prepare(&d, &c, 0).unwrap();
    let s = assemble_step_batches(&data, &[0, 1], &mut stream(0, tag::PAIRS)).unwrap();
    assert!(s.target_pairs.is_empty());
    assert_eq!(s.source_pairs.len(), 1);
}

#[test]
fn epoch_covers_every_labeled_slice() {
    let (c, d) = setup(ModelVariant::BaselineUnet, &[]);
    let data = TrainingData::prepare(&d, &c, 0).unwrap();
    let mut rng = stream(0, tag::SUPERVISED_ORDER);
    let batches = data.epoch_batches(&mut rng);
    let mut seen: Vec<usize> = batches.concat();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen, (0..data.labeled.len()).collect::<Vec<_>>());
}

#[test]
fn mixed_class_sets_mask_missing_classes() {
    let mut c = config(ModelVariant::BaselineUnet, &[]);
    let mut other = domain("U", 1.0);
    other.class_set = vec!["PED".into()];
    c.domains.push(other);
    c.source_domains = vec!["S".into(), "U".into()];
    assert_eq!(c.class_axis(), vec!["IRF", "SRF", "PED"]);
    let d = datasets(&c.domains);
    let data = TrainingData::prepare(&d, &c, 0).unwrap();
    let all: Vec<usize> = (0..data.labeled.len()).collect();
    let batch = data.supervised_batch(&all).unwrap();
    for (i, p) in batch.provenance.iter().enumerate() {
        let mask = &batch.class_mask[i * 3..(i + 1) * 3];
        if p.domain_id == "U" {
            assert_eq!(mask, &[false, false, true]);
        } else {
            assert_eq!(mask, &[true, true, false]);
        }
    }
    let out = train(&c, &d, 0).unwrap();
    assert_eq!(out.model.arch.n_classes, 3);
}

#[test]
fn ablation_schedule_varies_only_the_fraction() {
    let c = config(ModelVariant::Segclr, &["T"]);
    let cs = ablation_schedule(&c, &[1.0, 0.1, 0.01, 0.0]).unwrap();
    assert_eq!(cs.len(), 4);
    for (x, f) in cs.iter().zip([1.0, 0.1, 0.01, 0.0]) {
        assert_eq!(x.unlabeled_fraction, f);
        assert_eq!(
            ExperimentConfig {
                unlabeled_fraction: c.unlabeled_fraction,
                ..x.clone()
            },
            c
        );
    }
    assert!(!cs[3].uses_target_data());
    assert!(ablation_schedule(&c, &[1.5]).is_err());

    let d = datasets(&c.domains);
    let data = TrainingData::prepare(&d, &cs[3], 0).unwrap();
    assert!(data.pools.iter().all(|p| p.role == PoolRole::Source));
    let data = TrainingData::prepare(&d, &cs[2], 0).unwrap();
    let target = data.pools.iter().find(|p| p.role == PoolRole::Target).unwrap();
    assert_eq!(target.volumes.len(), 1);
}

#[test]
fn inference_parameter_count_matches_the_baseline() {
    let (c, d) = setup(ModelVariant::Segclr, &["T"]);
    let seg = train(&c, &d, 0).unwrap().model;
    let base: ModelState = build_model(&c.effective_arch(), 0).unwrap();
    assert_eq!(seg.count_params(ParamMode::Inference), base.count_params(ParamMode::Inference));
    assert!(seg.count_params(ParamMode::Training) > base.count_params(ParamMode::Training));
}

#[test]
fn config_round_trips_through_toml() {
    let c = config(ModelVariant::Segclr, &["T"]);
    let text = c.to_toml_string();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
}

#[test]
fn config_errors_name_the_field() {
    let err = ExperimentConfig::from_toml_str("name = \"x\"\nmodel_variant = \"segclr\"\nseeds = [0]\n").unwrap_err();
    match err {
        Error::Validation { field, .. } => assert_eq!(field, "source_domains"),
        e => panic!("{e}"),
    }
    let err = ExperimentConfig::from_toml_str(
        "name = \"x\"\nmodel_variant = \"segclr\"\nsource_domains = [\"S\"]\nseeds = []\n",
    )
    .unwrap_err();
    assert!(matches!(err, Error::Validation { ref field, .. } if field == "seeds"));
    let err = ExperimentConfig::from_toml_str(
        "name = \"x\"\nmodel_variant = \"segclr\"\nsource_domains = [\"S\"]\nseeds = [0]\nbogus = 1\n",
    )
    .unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
    let mut c = config(ModelVariant::Segclr, &["S"]);
    c.target_domains = vec!["S".into()];
    assert!(c.validate().is_err());
}

#[test]
fn variants_resolve_with_overrides() {
    let mut c = config(ModelVariant::BaselineUnet, &["T"]);
    c.variants = vec![
        VariantSpec {
            name: "baseline".into(),
            ..VariantSpec::default()
        },
        VariantSpec {
            name: "segclr_pa_ch".into(),
            model_variant: Some(ModelVariant::Segclr),
            ..VariantSpec::default()
        },
    ];
    let vs = c.resolve_variants().unwrap();
    assert_eq!(vs.len(), 2);
    assert_eq!(vs[1].0, "segclr_pa_ch");
    assert_eq!(vs[1].1.model_variant, ModelVariant::Segclr);
    assert!(vs[1].1.variants.is_empty());
    c.variants[1].name = "baseline".into();
    assert!(c.validate().is_err());
}
