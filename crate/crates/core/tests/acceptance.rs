//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test --release -p segclr-core --test acceptance`; pass criterion
//! numbers as arguments to run a subset.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use segclr::cli::{cmd_evaluate, cmd_generate, cmd_train, TrainArgs, MANIFEST_NAME};
use segclr::evaluation::{
    dice_score, evaluate_model, mean_dice, paired_ttest_one_sided, rank_models, uvd, Alternative, MetricRecord,
};
use segclr::losses::{
    dice_loss, negative_cosine_stopgrad, ntxent_loss, simsiam_backward, simsiam_loss, ContrastiveKind, DiceReduction,
    ProjectionBatch,
};
use segclr::model::{build_model, build_model_with, ArchitectureSpec, Components, HeadKind, ModelState, ParamMode, Predictor};
use segclr::pairing::{sample_slice_index, PairBatch, SlicePairingParams};
use segclr::rng::{stream, Rng};
use segclr::synthdata::{generate_domain, split_dataset, DomainSpec, Mask};
use segclr::tensor::Tensor;
use segclr::training::{
    assemble_step_batches, joint_gradients, train, Datasets, ExperimentConfig, ModelVariant, SplitName, TrainingData,
};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> Rng {
    stream(seed, 0xacce)
}

fn random_tensor(n: usize, c: usize, h: usize, w: usize, lo: f64, hi: f64, r: &mut Rng) -> Tensor<f64> {
    Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| r.gen_range(lo..hi)).collect())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Central differences of `f` over every coordinate of `x`.
fn fd(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.data.len())
        .map(|i| {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- fixtures

fn tiny_domain(id: &str, gain: f64) -> DomainSpec {
    let mut d = DomainSpec::desk(id, 5);
    d.slice_shape = (16, 16);
    d.slices_per_volume = 4;
    d.content.lesion_scale = 3.0;
    d.appearance.contrast_gain = gain;
    d
}

fn in_memory(specs: &[DomainSpec], split: (f64, f64, f64), seed: u64) -> Datasets {
    Datasets::in_memory(specs.iter().map(|s| {
        let vols = generate_domain(s, seed).expect("generate");
        (s.domain_id.clone(), split_dataset(vols, split, seed).expect("split"))
    }))
}

fn tiny_config(variant: ModelVariant) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk("acc", variant, &["S"], &["T"]);
    c.domains = vec![tiny_domain("S", 1.0), tiny_domain("T", 0.6)];
    c.arch.input_shape = (16, 16);
    c.arch.base_channels = 4;
    c.arch.mlp_units = 16;
    c.batch_size_sup = 4;
    c.batch_size_con = 4;
    c.epochs = 1;
    c
}

fn visit_values(m: &mut ModelState<f64>, f: &mut dyn FnMut(&mut Vec<f64>)) {
    m.visit_mut(&mut |p| f(&mut p.value));
}

fn flat_grads(m: &ModelState<f64>) -> Vec<f64> {
    let mut g = Vec::new();
    m.visit(&mut |p| g.extend_from_slice(&p.grad));
    g
}

fn perturbed(m: &ModelState<f64>, index: usize, delta: f64) -> ModelState<f64> {
    let mut out = m.clone();
    let mut seen = 0;
    visit_values(&mut out, &mut |v| {
        if index >= seen && index < seen + v.len() {
            v[index - seen] += delta;
        }
        seen += v.len();
    });
    out
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Check {
    let mut r = rng(1);
    let h = 1e-6;
    let mut report = Vec::new();

    // Log-Dice, both reductions, with a per-sample class mask.
    let mut w = 0.0f64;
    for reduction in [DiceReduction::Pooled, DiceReduction::PerImage] {
        let p = random_tensor(3, 2, 8, 8, 0.01, 0.99, &mut r);
        let y = Tensor::from_vec(3, 2, 8, 8, (0..384).map(|_| f64::from(r.gen_bool(0.3) as u8)).collect());
        let mask = [true, true, false, true, true, true];
        let (_, g) = dice_loss(&p, &y, &mask, 1e-12, reduction).map_err(|e| e.to_string())?;
        let num = fd(&p, h, |q| dice_loss(q, &y, &mask, 1e-12, reduction).unwrap().0);
        w = w.max(worst(&g.data, &num));
    }
    ensure(w <= 1e-4, || format!("dice rel err {w:.2e}"))?;
    report.push(format!("dice {w:.1e}"));

    // NT-Xent, both denominators, one and two domains.
    let mut w = 0.0f64;
    for (include_positive, split) in [(false, false), (true, false), (false, true)] {
        let za = random_tensor(6, 8, 1, 1, -1.0, 1.0, &mut r);
        let zb = random_tensor(6, 8, 1, 1, -1.0, 1.0, &mut r);
        let ids: Vec<String> = (0..6).map(|i| if split && i % 2 == 1 { "T".into() } else { "S".into() }).collect();
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            ntxent_loss(&ProjectionBatch::new(a.clone(), b.clone(), ids.clone()).unwrap(), 0.5, include_positive)
                .unwrap()
                .loss
        };
        let out = ntxent_loss(&ProjectionBatch::new(za.clone(), zb.clone(), ids.clone()).unwrap(), 0.5, include_positive)
            .map_err(|e| e.to_string())?;
        w = w.max(worst(&out.dz_a.data, &fd(&za, h, |a| loss(a, &zb))));
        w = w.max(worst(&out.dz_b.data, &fd(&zb, h, |b| loss(&za, b))));
    }
    ensure(w <= 1e-4, || format!("ntxent rel err {w:.2e}"))?;
    report.push(format!("ntxent {w:.1e}"));

    // SimSiam: predictor parameters see the whole loss; projections see it
    // with the stopped targets held fixed.
    let za = random_tensor(5, 8, 1, 1, -1.0, 1.0, &mut r);
    let zb = random_tensor(5, 8, 1, 1, -1.0, 1.0, &mut r);
    let batch = ProjectionBatch::single(za.clone(), zb.clone(), "S").unwrap();
    let mut pred: Predictor<f64> = Predictor::new(8, &mut r);
    let out = simsiam_backward(&batch, &mut pred).map_err(|e| e.to_string())?;
    let mut analytic = Vec::new();
    pred.visit(&mut |p| analytic.extend_from_slice(&p.grad));
    let n_params = analytic.len();
    let mut numeric = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let eval = |delta: f64| {
            let mut q = pred.clone();
            let mut seen = 0;
            q.visit_mut(&mut |p| {
                if i >= seen && i < seen + p.value.len() {
                    p.value[i - seen] += delta;
                }
                seen += p.value.len();
            });
            simsiam_loss(&batch, Some(&q)).unwrap()
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    let mut w = worst(&analytic, &numeric);
    let frozen = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let (qa, _) = pred.forward(a);
        let (qb, _) = pred.forward(b);
        negative_cosine_stopgrad(&qa, &qb, &za, &zb).unwrap().0
    };
    w = w.max(worst(&out.dz_a.data, &fd(&za, h, |a| frozen(a, &zb))));
    w = w.max(worst(&out.dz_b.data, &fd(&zb, h, |b| frozen(&za, b))));
    ensure(w <= 1e-4, || format!("simsiam rel err {w:.2e}"))?;
    report.push(format!("simsiam {w:.1e}"));

    // Joint objective through the whole network, two contrastive pools.
    let c = tiny_config(ModelVariant::Segclr);
    let ds = in_memory(&c.domains, c.split, 3);
    let data = TrainingData::prepare(&ds, &c, 0).map_err(|e| e.to_string())?;
    let sb = assemble_step_batches(&data, &[0, 1, 2, 3], &mut rng(2)).map_err(|e| e.to_string())?;
    let pairs: Vec<&PairBatch> = sb.pair_batches().collect();
    ensure(pairs.len() == 2, || format!("{} pair batches", pairs.len()))?;
    let mut model: ModelState<f64> = build_model_with(&c.effective_arch(), 4, c.components()).map_err(|e| e.to_string())?;
    let total = |m: &ModelState<f64>| {
        let mut m = m.clone();
        joint_gradients(&mut m, Some(&sb.sup), &pairs, &c.loss, ContrastiveKind::Ntxent, 1.0, None).unwrap().total
    };
    joint_gradients(&mut model, Some(&sb.sup), &pairs, &c.loss, ContrastiveKind::Ntxent, 1.0, None)
        .map_err(|e| e.to_string())?;
    let grads = flat_grads(&model);
    let mut idx: Vec<usize> = (0..60).map(|_| r.gen_range(0..grads.len())).collect();
    let mut names = Vec::new();
    model.visit(&mut |p| names.push((p.name.clone(), p.len())));
    let mut start = 0;
    for (_, len) in &names {
        idx.push(start + len / 2);
        start += len;
    }
    // Biases feeding a group norm have exactly zero gradient; there the
    // difference quotient is pure roundoff and only an absolute bound applies.
    let mut w = 0.0f64;
    let mut arg = 0;
    let mut vanishing = 0;
    for &i in &idx {
        let num = (total(&perturbed(&model, i, h)) - total(&perturbed(&model, i, -h))) / (2.0 * h);
        if grads[i].abs().max(num.abs()) < 1e-7 {
            vanishing += 1;
            ensure((grads[i] - num).abs() < 1e-8, || format!("coordinate {i}: {} vs {num}", grads[i]))?;
            continue;
        }
        let e = rel_err(grads[i], num);
        if e > w {
            w = e;
            arg = i;
        }
    }
    ensure(w <= 1e-4, || format!("joint rel err {w:.2e} at coordinate {arg}"))?;
    report.push(format!("joint {w:.1e} over {} coordinates ({vanishing} vanishing)", idx.len()));
    Ok(report.join(", "))
}

// ---------------------------------------------------------------- 2

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Term by term: anchor `z_i'` against its positive `z_i''`, denominator
/// over both views of the other pairs of the same domain.
fn ntxent_brute_force(za: &Tensor<f64>, zb: &Tensor<f64>, ids: &[String], tau: f64) -> f64 {
    let n = za.n;
    let views: Vec<(usize, &[f64])> = (0..n).map(|i| (i, za.sample(i))).chain((0..n).map(|i| (i, zb.sample(i)))).collect();
    let mut total = 0.0;
    for (x, &(pair, zx)) in views.iter().enumerate() {
        let pos = if x < n { zb.sample(pair) } else { za.sample(pair) };
        let num = (cos(zx, pos) / tau).exp();
        let mut den = 0.0;
        for &(other, zk) in &views {
            if other != pair && ids[other] == ids[pair] {
                den += (cos(zx, zk) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / (2 * n) as f64
}

fn ntxent_oracle() -> Check {
    let mut r = rng(2);
    let mut worst_abs = 0.0f64;
    for b in 0..100 {
        let n = r.gen_range(2..=8);
        let d = r.gen_range(1..=16);
        let tau = r.gen_range(0.1..1.0);
        let za = random_tensor(n, d, 1, 1, -2.0, 2.0, &mut r);
        let zb = random_tensor(n, d, 1, 1, -2.0, 2.0, &mut r);
        // Every other batch has two domains of at least two pairs each.
        let ids: Vec<String> = if b % 2 == 1 && n >= 4 {
            (0..n).map(|i| if i < n / 2 { "a".into() } else { "b".into() }).collect()
        } else {
            vec!["a".into(); n]
        };
        let got = ntxent_loss(&ProjectionBatch::new(za.clone(), zb.clone(), ids.clone()).unwrap(), tau, false)
            .map_err(|e| e.to_string())?
            .loss;
        worst_abs = worst_abs.max((got - ntxent_brute_force(&za, &zb, &ids, tau)).abs());
    }
    ensure(worst_abs <= 1e-10, || format!("max |loss - oracle| = {worst_abs:.2e}"))?;
    let mut worst_collapse = 0.0f64;
    for n in 2..=8usize {
        let row: Vec<f64> = (0..7).map(|_| r.gen_range(-1.0..1.0)).collect();
        let za = Tensor::from_vec(n, 7, 1, 1, row.iter().cycle().take(n * 7).copied().collect());
        let zb = Tensor::from_vec(n, 7, 1, 1, row.iter().cycle().take(n * 7).map(|v| 3.0 * v).collect());
        let got = ntxent_loss(&ProjectionBatch::single(za, zb, "a").unwrap(), 0.5, false).unwrap().loss;
        worst_collapse = worst_collapse.max((got - ((2 * n - 2) as f64).ln()).abs());
    }
    ensure(worst_collapse <= 1e-9, || format!("collapse error {worst_collapse:.2e}"))?;
    Ok(format!("100 batches max abs err {worst_abs:.1e}; collapse err {worst_collapse:.1e}"))
}

// ---------------------------------------------------------------- 3

fn stop_gradient() -> Check {
    let mut c = tiny_config(ModelVariant::Segclr);
    c.loss.contrastive_kind = ContrastiveKind::Simsiam;
    let ds = in_memory(&c.domains, c.split, 5);
    let data = TrainingData::prepare(&ds, &c, 0).map_err(|e| e.to_string())?;
    let sb = assemble_step_batches(&data, &[0, 1, 2], &mut rng(3)).map_err(|e| e.to_string())?;
    let pb = &sb.source_pairs[0];
    let arch = c.effective_arch();
    let parts = Components {
        head: true,
        predictor: true,
    };
    let mut online: ModelState<f64> = build_model_with(&arch, 6, parts).map_err(|e| e.to_string())?;
    let base = online.clone();

    // Library step, contrastive term only.
    joint_gradients(&mut online, None, &[pb], &c.loss, ContrastiveKind::Simsiam, 1.0, None).map_err(|e| e.to_string())?;
    let library = flat_grads(&online);

    // The same loss with the stopped branch evaluated by a separate copy: the
    // copy's parameters are reachable only through the stopped arguments.
    let mut student = base.clone();
    let mut teacher = base.clone();
    student.zero_grad();
    teacher.zero_grad();
    let x = Tensor::concat_batch(&pb.view_a.to_tensor(), &pb.view_b.to_tensor());
    let n = pb.len();
    let s_trace = student.backbone.encode_trace(&x);
    let (z, s_cache) = student.head.as_ref().unwrap().forward(s_trace.features());
    let t_trace = teacher.backbone.encode_trace(&x);
    let (t, _) = teacher.head.as_ref().unwrap().forward(t_trace.features());
    let (z_a, z_b) = z.split_batch(n);
    let (t_a, t_b) = t.split_batch(n);
    let pred = student.predictor.as_mut().unwrap();
    let (q_a, ca) = pred.forward(&z_a);
    let (q_b, cb) = pred.forward(&z_b);
    let (_, dq_a, dq_b) = negative_cosine_stopgrad(&q_a, &q_b, &t_a, &t_b).map_err(|e| e.to_string())?;
    let dz = Tensor::concat_batch(&pred.backward(&ca, &dq_a), &pred.backward(&cb, &dq_b));
    let dh = student.head.as_mut().unwrap().backward(&s_cache, &dz);
    student.backbone.backward_features(&s_trace, &dh);

    let mut nonzero_teacher = Vec::new();
    teacher.visit(&mut |p| {
        if p.grad.iter().any(|g| *g != 0.0) {
            nonzero_teacher.push(p.name.clone());
        }
    });
    ensure(nonzero_teacher.is_empty(), || format!("stopped parameters with gradient: {nonzero_teacher:?}"))?;
    let mut n_stopped = 0;
    teacher.visit(&mut |_| n_stopped += 1);

    let explicit = flat_grads(&student);
    let max_diff = library.iter().zip(&explicit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(max_diff <= 1e-12, || format!("library vs online-only gradient differ by {max_diff:.2e}"))?;

    // The stopped path would carry gradient if it were not cut.
    let unstopped = |m: &ModelState<f64>| simsiam_loss_through(m, pb, None);
    let frozen = |m: &ModelState<f64>| simsiam_loss_through(m, pb, Some(&base));
    let mut r = rng(33);
    let mut worst_frozen = 0.0f64;
    let mut max_gap = 0.0f64;
    let h = 1e-6;
    let mut seen = 0;
    let mut encoder_range = 0..0;
    base.visit(&mut |p| {
        if p.name.starts_with("enc0.conv1.weight") {
            encoder_range = seen..seen + p.len();
        }
        seen += p.len();
    });
    for _ in 0..12 {
        let i = r.gen_range(encoder_range.clone());
        let f = (frozen(&perturbed(&base, i, h)) - frozen(&perturbed(&base, i, -h))) / (2.0 * h);
        let u = (unstopped(&perturbed(&base, i, h)) - unstopped(&perturbed(&base, i, -h))) / (2.0 * h);
        worst_frozen = worst_frozen.max(rel_err(library[i], f));
        max_gap = max_gap.max(rel_err(library[i], u));
    }
    ensure(worst_frozen <= 1e-4, || format!("frozen-target FD mismatch {worst_frozen:.2e}"))?;
    ensure(max_gap > 1e-3, || "stopped path carries no gradient in this setup; check is vacuous".into())?;
    Ok(format!(
        "{n_stopped} stopped parameter tensors all exactly zero; online gradient matches frozen-target FD ({worst_frozen:.1e})"
    ))
}

/// SimSiam loss of `m` on `pb`; targets from `target_model` when given.
fn simsiam_loss_through(m: &ModelState<f64>, pb: &PairBatch, target_model: Option<&ModelState<f64>>) -> f64 {
    let project = |m: &ModelState<f64>| {
        let x = Tensor::concat_batch(&pb.view_a.to_tensor(), &pb.view_b.to_tensor());
        let trace = m.backbone.encode_trace(&x);
        m.head.as_ref().unwrap().forward(trace.features()).0.split_batch(pb.len())
    };
    let (z_a, z_b) = project(m);
    let (t_a, t_b) = project(target_model.unwrap_or(m));
    let pred = m.predictor.as_ref().unwrap();
    negative_cosine_stopgrad(&pred.forward(&z_a).0, &pred.forward(&z_b).0, &t_a, &t_b).unwrap().0
}

// ---------------------------------------------------------------- 4

fn slice_sampler() -> Check {
    let params = SlicePairingParams {
        sigma_um: 250.0,
        slice_spacing_um: 111.0,
    };
    let sigma = params.sigma_slices();
    ensure((sigma - 250.0 / 111.0).abs() < 1e-12, || format!("sigma {sigma}"))?;
    let draws = 100_000usize;
    let n_slices = 2_000_001usize;
    let centre = n_slices / 2;
    let mut r = rng(4);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for _ in 0..draws {
        let idx = sample_slice_index(centre, &params, n_slices, &mut r);
        *counts.entry(idx as i64 - centre as i64).or_default() += 1;
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let p = |k: i64| normal.cdf(k as f64 + 0.5) - normal.cdf(k as f64 - 0.5);
    // Bins -K..=K with the tails folded into the end bins.
    let k_max = 7i64;
    let mut stat = 0.0;
    for k in -k_max..=k_max {
        let (observed, expected) = if k == -k_max {
            let o: usize = counts.range(..=k).map(|(_, c)| c).sum();
            (o, normal.cdf(k as f64 + 0.5))
        } else if k == k_max {
            let o: usize = counts.range(k..).map(|(_, c)| c).sum();
            (o, 1.0 - normal.cdf(k as f64 - 0.5))
        } else {
            (counts.get(&k).copied().unwrap_or(0), p(k))
        };
        let e = expected * draws as f64;
        stat += (observed as f64 - e).powi(2) / e;
    }
    let df = (2 * k_max) as f64;
    let p_value = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
    ensure(p_value > 0.01, || format!("chi2 {stat:.2}, df {df}, p {p_value:.4}"))?;
    Ok(format!("chi2 {stat:.2} on {df} df, p = {p_value:.3}"))
}

// ---------------------------------------------------------------- 5

fn metric_oracles() -> Check {
    let mut r = rng(5);
    let (area, spacing) = (32.0 * 80.0, 111.0);
    for case in 0..1000 {
        let h = r.gen_range(1..=24);
        let w = r.gen_range(1..=24);
        let (pa, pb) = match case % 4 {
            0 => (0.0, 0.0),
            1 => (0.0, r.gen_range(0.0..0.5)),
            _ => (r.gen_range(0.0..0.6), r.gen_range(0.0..0.6)),
        };
        let mut mask = |p: f64| Mask {
            height: h,
            width: w,
            data: (0..h * w).map(|_| u8::from(r.gen_bool(p))).collect(),
        };
        let (a, b) = (mask(pa), mask(pb));
        let set = |m: &Mask| -> HashSet<usize> { m.data.iter().enumerate().filter(|(_, v)| **v != 0).map(|(i, _)| i).collect() };
        let (sa, sb) = (set(&a), set(&b));
        let inter = sa.intersection(&sb).count();
        let sym = sa.symmetric_difference(&sb).count();
        let size = sa.len() + sb.len();
        let dice_oracle = if size == 0 { 100.0 } else { 100.0 * (2 * inter) as f64 / size as f64 };
        let uvd_oracle = sym as f64 * area * spacing;
        let d = dice_score(&a, &b).map_err(|e| e.to_string())?;
        let u = uvd(&a, &b, area, spacing).map_err(|e| e.to_string())?;
        let u_rev = uvd(&b, &a, area, spacing).map_err(|e| e.to_string())?;
        ensure(d == dice_oracle, || format!("case {case}: dice {d} vs {dice_oracle}"))?;
        ensure(u == uvd_oracle, || format!("case {case}: uvd {u} vs {uvd_oracle}"))?;
        ensure(u == u_rev, || format!("case {case}: uvd asymmetric {u} vs {u_rev}"))?;
        if size == 0 {
            ensure(d == 100.0, || format!("case {case}: both-empty dice {d}"))?;
        }
    }
    Ok("1000 mask pairs exact; both-empty Dice 100; UVD symmetric".into())
}

// ---------------------------------------------------------------- 6

fn records_for(cells: &[((u64, &str), [f64; 3], [f64; 3])]) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for &((seed, volume), dice, uvd) in cells {
        for (k, model) in ["A", "B", "C"].iter().enumerate() {
            // Two slices per cell whose means are the tabulated values.
            for (slice, (dd, uf)) in [(5.0, 1.5), (-5.0, 0.5)].iter().enumerate() {
                out.push(MetricRecord {
                    model_id: model.to_string(),
                    seed,
                    domain_id: "D".into(),
                    volume_id: volume.into(),
                    slice_index: slice,
                    class_name: "IRF".into(),
                    dice: dice[k] + dd,
                    uvd: uvd[k] * uf,
                });
            }
        }
    }
    out
}

fn ranking_oracle() -> Check {
    let table = records_for(&[
        ((0, "v0"), [80.0, 70.0, 60.0], [5.0, 3.0, 9.0]),
        ((0, "v1"), [70.0, 70.0, 50.0], [4.0, 4.0, 4.0]),
        ((1, "v0"), [60.0, 80.0, 70.0], [2.0, 6.0, 4.0]),
        ((1, "v1"), [90.0, 85.0, 95.0], [1.0, 2.0, 3.0]),
    ]);
    let t = rank_models(&table).map_err(|e| e.to_string())?;
    let expect = [("A", 1.875, 1.5, 1.6875), ("B", 1.875, 2.0, 1.9375), ("C", 2.25, 2.5, 2.375)];
    for (m, d, u, all) in expect {
        let e = t.get(m).ok_or(format!("model {m} missing"))?;
        ensure((e.dice_rank, e.uvd_rank, e.rank) == (d, u, all), || {
            format!("{m}: got ({}, {}, {}), want ({d}, {u}, {all})", e.dice_rank, e.uvd_rank, e.rank)
        })?;
    }
    // A wins every Dice comparison, B every UVD one.
    let split = records_for(&[
        ((0, "v0"), [80.0, 70.0, 60.0], [5.0, 3.0, 9.0]),
        ((0, "v1"), [75.0, 72.0, 10.0], [6.0, 2.0, 8.0]),
        ((1, "v0"), [66.0, 65.0, 20.0], [3.0, 1.0, 7.0]),
        ((1, "v1"), [90.0, 85.0, 30.0], [4.0, 2.5, 9.5]),
    ]);
    let t2 = rank_models(&split).map_err(|e| e.to_string())?;
    let got: Vec<f64> = ["A", "B", "C"].iter().map(|m| t2.get(m).unwrap().rank).collect();
    ensure(got == vec![1.5, 1.5, 3.0], || format!("split-dominance ranks {got:?}"))?;
    ensure((t.n_seeds, t.n_volumes) == (2, 2), || format!("{} seeds, {} volumes", t.n_seeds, t.n_volumes))?;
    Ok("hand-computed table reproduced; split dominance ties at 1.5/1.5".into())
}

// ---------------------------------------------------------------- 7

fn parameter_accounting() -> Check {
    let arch = ArchitectureSpec::full();
    let baseline: ModelState = build_model(&arch, 0).map_err(|e| e.to_string())?;
    let segclr: ModelState = build_model_with(
        &arch,
        0,
        Components {
            head: true,
            predictor: false,
        },
    )
    .map_err(|e| e.to_string())?;
    let backbone = baseline.count_params(ParamMode::Inference);
    ensure(segclr.count_params(ParamMode::Inference) == backbone, || "inference counts differ".into())?;
    ensure(segclr.clone().into_inference().count_params(ParamMode::Training) == backbone, || {
        "inference export keeps extra parameters".into()
    })?;
    let head = segclr.head.as_ref().unwrap();
    ensure(head.kind == HeadKind::Ch, || "default head is not C_ch".into())?;
    let channels = arch.bottleneck_channels();
    ensure(head.aggregation_params() == channels + 1, || {
        format!("aggregation {} vs channels+1 = {}", head.aggregation_params(), channels + 1)
    })?;
    let head_total = segclr.count_params(ParamMode::Training) - backbone;
    let ratio = head_total as f64 / backbone as f64;
    ensure(ratio < 0.01, || format!("head {head_total} is {:.3}% of {backbone}", 100.0 * ratio))?;

    // Trained at desk scale, the exported models match too.
    let c = tiny_config(ModelVariant::Segclr);
    let ds = in_memory(&c.domains, c.split, 7);
    let seg = train(&c, &ds, 0).map_err(|e| e.to_string())?.model;
    let mut cb = c.clone();
    cb.model_variant = ModelVariant::BaselineUnet;
    let base = train(&cb, &ds, 0).map_err(|e| e.to_string())?.model;
    ensure(seg.count_params(ParamMode::Inference) == base.count_params(ParamMode::Inference), || {
        "trained inference counts differ".into()
    })?;
    Ok(format!(
        "backbone {backbone}, C_ch head {head_total} ({:.3}%), aggregation {} = channels + 1",
        100.0 * ratio,
        head.aggregation_params()
    ))
}

// ---------------------------------------------------------------- 8-10

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn preset(file: &str) -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(file);
    ExperimentConfig::load(&path).map_err(|e| e.to_string())
}

fn variant(c: &ExperimentConfig, name: &str) -> Result<ExperimentConfig, String> {
    c.resolve_variants()
        .map_err(|e| e.to_string())?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v)
        .ok_or_else(|| format!("preset has no model {name}"))
}

fn preset_data(c: &ExperimentConfig) -> Datasets {
    in_memory(&c.domains, c.split, c.data_seed)
}

fn test_dice(model: &ModelState, ds: &Datasets, domain: &str, seed: u64) -> Result<f64, String> {
    let vols = ds.split(domain, SplitName::Test).map_err(|e| e.to_string())?;
    let recs = evaluate_model(model, vols, 0.5, "m", seed).map_err(|e| e.to_string())?;
    mean_dice(&recs).ok_or_else(|| format!("no records on {domain}"))
}

/// Per seed: (target, source) test Dice of each of baseline, UDA and DG.
struct ShiftRuns {
    base: Vec<(f64, f64)>,
    uda: Vec<(f64, f64)>,
    dg: Vec<(f64, f64)>,
}

/// The device-shift preset: baseline, SegCLR with unlabeled target slices,
/// and the same SegCLR with none.
fn shift_runs() -> Result<ShiftRuns, String> {
    let c = preset("uda_device.toml")?;
    let ds = preset_data(&c);
    let (src, tgt) = (c.source_domains[0].clone(), c.target_domains[0].clone());
    let base = variant(&c, "baseline")?;
    let uda = variant(&c, "segclr_sa_ch")?;
    let mut dg = uda.clone();
    dg.unlabeled_fraction = 0.0;
    let mut out = ShiftRuns {
        base: Vec::new(),
        uda: Vec::new(),
        dg: Vec::new(),
    };
    for &seed in &SEEDS {
        for (cfg, slot) in [(&base, 0), (&uda, 1), (&dg, 2)] {
            let m = train(cfg, &ds, seed).map_err(|e| e.to_string())?.model;
            let scores = (test_dice(&m, &ds, &tgt, seed)?, test_dice(&m, &ds, &src, seed)?);
            [&mut out.base, &mut out.uda, &mut out.dg][slot].push(scores);
        }
        eprintln!(
            "  seed {seed}: target base {:.2} uda {:.2} dg {:.2}",
            out.base.last().unwrap().0,
            out.uda.last().unwrap().0,
            out.dg.last().unwrap().0
        );
    }
    Ok(out)
}

fn column(v: &[(f64, f64)], target: bool) -> Vec<f64> {
    v.iter().map(|p| if target { p.0 } else { p.1 }).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn uda_replication(runs: &Result<ShiftRuns, String>) -> Check {
    let runs = runs.as_ref().map_err(|e| e.clone())?;
    let (ut, bt) = (column(&runs.uda, true), column(&runs.base, true));
    let (us, bs) = (column(&runs.uda, false), column(&runs.base, false));
    let gain = paired_ttest_one_sided(&ut, &bt, Alternative::Greater).map_err(|e| e.to_string())?;
    let loss = paired_ttest_one_sided(&us, &bs, Alternative::Less).map_err(|e| e.to_string())?;
    let detail = format!(
        "target {:.2} vs {:.2} (p = {:.4}); source {:.2} vs {:.2} (degradation p = {:.3})",
        mean(&ut),
        mean(&bt),
        gain.p_value,
        mean(&us),
        mean(&bs),
        loss.p_value
    );
    ensure(gain.p_value <= 0.05 && loss.p_value > 0.05, || detail.clone())?;
    Ok(detail)
}

fn dg_replication(runs: &Result<ShiftRuns, String>) -> Check {
    let runs = runs.as_ref().map_err(|e| e.clone())?;
    let (dt, bt) = (column(&runs.dg, true), column(&runs.base, true));
    let t = paired_ttest_one_sided(&dt, &bt, Alternative::Greater).map_err(|e| e.to_string())?;
    let detail = format!("unseen target {:.2} vs {:.2} (p = {:.4})", mean(&dt), mean(&bt), t.p_value);
    ensure(t.p_value <= 0.05, || detail.clone())?;
    Ok(detail)
}

fn multi_domain() -> Check {
    let c = preset("multi_domain.toml")?;
    let ds = preset_data(&c);
    let union_cfg = variant(&c, "segclr_union")?;
    let ids = c.source_domains.clone();
    let mut union: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut single: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &SEEDS {
        let mu = train(&union_cfg, &ds, seed).map_err(|e| e.to_string())?.model;
        for d in &ids {
            union.entry(d.clone()).or_default().push(test_dice(&mu, &ds, d, seed)?);
            let cs = variant(&c, &format!("segclr_{d}"))?;
            let ms = train(&cs, &ds, seed).map_err(|e| e.to_string())?.model;
            single.entry(d.clone()).or_default().push(test_dice(&ms, &ds, d, seed)?);
        }
        eprintln!(
            "  seed {seed}: {}",
            ids.iter()
                .map(|d| format!("{d} union {:.2} single {:.2}", union[d].last().unwrap(), single[d].last().unwrap()))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    let mut parts = Vec::new();
    let mut ok = true;
    for d in &ids {
        let (u, s) = (mean(&union[d]), mean(&single[d]));
        ok &= u >= s - 1.0;
        parts.push(format!("{d} union {u:.2} vs single {s:.2}"));
    }
    let detail = parts.join("; ");
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 11

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = tiny_config(ModelVariant::Segclr);
    c.epochs = 2;
    c.seeds = vec![0, 1];
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, c.to_toml_string()).map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    cmd_generate(&cfg, &data, false).map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(std::path::PathBuf, Vec<u8>), String> {
        let out = tmp.path().join(name);
        let args = TrainArgs {
            config: cfg.clone(),
            data: data.clone(),
            out: out.clone(),
            seeds: None,
            models: None,
            force: false,
        };
        cmd_train(&args).map_err(|e| e.to_string())?;
        let csv = out.join("metrics.csv");
        cmd_evaluate(&out.join(MANIFEST_NAME), &data, &csv, None, SplitName::Test, false).map_err(|e| e.to_string())?;
        Ok((out, std::fs::read(&csv).map_err(|e| e.to_string())?))
    };
    let (a, csv_a) = run("a")?;
    let (b, csv_b) = run("b")?;
    let listing = |root: &Path| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut m = BTreeMap::new();
        for seed in &c.seeds {
            for f in ["model.ckpt", "history.jsonl"] {
                let rel = format!("acc/seed_{seed}/{f}");
                m.insert(rel.clone(), std::fs::read(root.join(&rel)).map_err(|e| format!("{rel}: {e}"))?);
            }
        }
        Ok(m)
    };
    let (la, lb) = (listing(&a)?, listing(&b)?);
    let differing: Vec<&String> = la.keys().filter(|k| la[*k] != lb[*k]).collect();
    ensure(differing.is_empty(), || format!("differing artifacts: {differing:?}"))?;
    ensure(csv_a == csv_b, || "metric CSVs differ".into())?;
    ensure(!csv_a.is_empty(), || "empty metric CSV".into())?;
    let ma = std::fs::read(a.join(MANIFEST_NAME)).map_err(|e| e.to_string())?;
    let mb = std::fs::read(b.join(MANIFEST_NAME)).map_err(|e| e.to_string())?;
    ensure(ma == mb, || "manifests differ in deterministic mode".into())?;
    Ok(format!("{} checkpoints/histories, metric CSV and manifest bit-identical", la.len()))
}

// ---------------------------------------------------------------- driver

fn main() {
    std::env::set_var("SEGCLR_DETERMINISTIC", "1");
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let shift = if run(8) || run(9) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(shift_runs)).unwrap_or_else(|_| Err("panic in shift runs".into()));
        eprintln!("  shift runs: {:.0}s", t.elapsed().as_secs_f64());
        r
    } else {
        Err("not run".into())
    };
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "gradient fidelity", Box::new(gradient_fidelity)),
        (2, "NT-Xent oracle equivalence", Box::new(ntxent_oracle)),
        (3, "stop-gradient contract", Box::new(stop_gradient)),
        (4, "slice sampler distribution", Box::new(slice_sampler)),
        (5, "metric oracles", Box::new(metric_oracles)),
        (6, "ranking oracle", Box::new(ranking_oracle)),
        (7, "parameter accounting", Box::new(parameter_accounting)),
        (8, "directional UDA replication", Box::new(|| uda_replication(&shift))),
        (9, "domain-generalization replication", Box::new(|| dg_replication(&shift))),
        (10, "multi-domain replication", Box::new(multi_domain)),
        (11, "determinism", Box::new(determinism)),
    ];
    // 8 to 10 are experimental outcomes: a FAIL there is reported but only
    // fails the run under SEGCLR_ACCEPTANCE_STRICT.
    let strict = std::env::var_os("SEGCLR_ACCEPTANCE_STRICT").is_some();
    let mut failed = Vec::new();
    for (n, name, check) in &criteria {
        if !run(*n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed.push(*n);
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if !failed.is_empty() {
        println!("failed: {failed:?}");
    }
    if failed.iter().any(|n| strict || !(8..=10).contains(n)) {
        std::process::exit(1);
    }
}
