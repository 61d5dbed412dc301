//! Training objectives: log-Dice supervision, NT-Xent with out-of-pair
//! negatives, SimSiam negative cosine with stop-gradient, and their weighted
//! combination.
//!
//! Every loss returns its value together with the gradient with respect to
//! its differentiable inputs. Sums are accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveKind {
    Ntxent,
    Simsiam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// Overlap sums pooled over the pixels of all samples in the batch.
    #[default]
    Pooled,
    /// One log-ratio per sample, averaged over samples.
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub tau: f64,
    pub lambda_sup: f64,
    pub contrastive_kind: ContrastiveKind,
    /// Add the positive pair to the NT-Xent denominator (standard SimCLR form).
    pub include_positive: bool,
    /// Multiplier on the contrastive term; zero reduces training to the
    /// supervised objective.
    pub contrastive_weight: f64,
    pub dice_reduction: DiceReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-12,
            tau: 0.5,
            lambda_sup: 20.0,
            contrastive_kind: ContrastiveKind::Ntxent,
            include_positive: false,
            contrastive_weight: 1.0,
            dice_reduction: DiceReduction::Pooled,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation("loss.epsilon", "must be > 0"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation("loss.tau", "must be > 0"));
        }
        if !(self.lambda_sup >= 0.0 && self.lambda_sup.is_finite()) {
            return Err(Error::validation("loss.lambda_sup", "must be >= 0"));
        }
        if !(self.contrastive_weight >= 0.0 && self.contrastive_weight.is_finite()) {
            return Err(Error::validation("loss.contrastive_weight", "must be >= 0"));
        }
        Ok(())
    }
}

/// Log-Dice loss and its gradient with respect to `p`.
///
/// `mask` is `[n, C]` (per-sample availability) or `[C]` (shared by all
/// samples). Classes without any available sample are skipped; the loss is
/// the mean over the remaining classes.
pub fn dice_loss<R: Real>(
    p: &Tensor<R>,
    y: &Tensor<R>,
    mask: &[bool],
    epsilon: f64,
    reduction: DiceReduction,
) -> Result<(f64, Tensor<R>)> {
    if !p.same_shape(y) {
        return Err(Error::Shape(format!("dice: p {:?} vs y {:?}", p.dims(), y.dims())));
    }
    let (n, c, plane) = (p.n, p.c, p.plane());
    let available = |i: usize, k: usize| -> Result<bool> {
        if mask.len() == c {
            Ok(mask[k])
        } else if mask.len() == n * c {
            Ok(mask[i * c + k])
        } else {
            Err(Error::Shape(format!("dice: mask of length {} for {n} samples x {c} classes", mask.len())))
        }
    };
    let offset = |i: usize, k: usize| (i * c + k) * plane;
    let sums = |i: usize, k: usize| {
        let (ps, ys) = (&p.data[offset(i, k)..][..plane], &y.data[offset(i, k)..][..plane]);
        let mut s = (0.0, 0.0, 0.0);
        for (pv, yv) in ps.iter().zip(ys) {
            let (pv, yv) = (pv.f64(), yv.f64());
            s.0 += yv * pv;
            s.1 += yv;
            s.2 += pv;
        }
        s
    };

    let mut grad = Tensor::zeros(n, c, p.h, p.w);
    let mut total = 0.0;
    let mut classes = 0usize;
    for k in 0..c {
        let members: Vec<usize> = (0..n).filter_map(|i| available(i, k).map(|a| a.then_some(i)).transpose()).collect::<Result<_>>()?;
        if members.is_empty() {
            continue;
        }
        classes += 1;
        // Each group is one log-ratio with weight `w`; pooled has a single group.
        let groups: Vec<(Vec<usize>, f64)> = match reduction {
            DiceReduction::Pooled => vec![(members.clone(), 1.0)],
            DiceReduction::PerImage => members.iter().map(|&i| (vec![i], 1.0 / members.len() as f64)).collect(),
        };
        for (group, w) in groups {
            let (mut inter, mut ysum, mut psum) = (0.0, 0.0, 0.0);
            for &i in &group {
                let s = sums(i, k);
                inter += s.0;
                ysum += s.1;
                psum += s.2;
            }
            let num = 2.0 * inter + epsilon;
            let den = epsilon + ysum + psum;
            total += w * (den.ln() - num.ln());
            for &i in &group {
                let off = offset(i, k);
                for j in 0..plane {
                    let yv = y.data[off + j].f64();
                    grad.data[off + j] = R::of(w * (1.0 / den - 2.0 * yv / num));
                }
            }
        }
    }
    if classes == 0 {
        return Err(Error::validation("class_mask", "every class is masked out"));
    }
    let scale = 1.0 / classes as f64;
    grad.data.iter_mut().for_each(|g| *g *= R::of(scale));
    Ok((total * scale, grad))
}

/// Cosine similarity; a zero vector yields 0 (with a warning).
pub fn cosine_similarity<R: Real>(u: &[R], v: &[R]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine of unequal lengths");
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a.f64(), b.f64());
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        log::warn!("cosine similarity of a zero vector, taken as 0");
        return 0.0;
    }
    uv / (uu.sqrt() * vv.sqrt())
}

/// Two aligned views of projections, `[n, d]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBatch<R> {
    pub z_a: Tensor<R>,
    pub z_b: Tensor<R>,
    pub domain_id: Vec<String>,
}

impl<R: Real> ProjectionBatch<R> {
    pub fn new(z_a: Tensor<R>, z_b: Tensor<R>, domain_id: Vec<String>) -> Result<Self> {
        if !z_a.same_shape(&z_b) || domain_id.len() != z_a.n {
            return Err(Error::Shape(format!(
                "projections {:?} / {:?} with {} domain ids",
                z_a.dims(),
                z_b.dims(),
                domain_id.len()
            )));
        }
        if !z_a.all_finite() || !z_b.all_finite() {
            return Err(Error::validation("projections", "must be finite"));
        }
        Ok(Self { z_a, z_b, domain_id })
    }

    /// All rows from a single domain.
    pub fn single(z_a: Tensor<R>, z_b: Tensor<R>, domain: &str) -> Result<Self> {
        let n = z_a.n;
        Self::new(z_a, z_b, vec![domain.to_string(); n])
    }

    pub fn len(&self) -> usize {
        self.z_a.n
    }

    pub fn is_empty(&self) -> bool {
        self.z_a.n == 0
    }

    /// Row indices per domain, in first-appearance order.
    fn groups(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, d) in self.domain_id.iter().enumerate() {
            match order.iter().position(|o| o == d) {
                Some(g) => groups[g].push(i),
                None => {
                    order.push(d);
                    groups.push(vec![i]);
                }
            }
        }
        groups
    }
}

/// Loss value and gradients with respect to both projection views.
#[derive(Clone, Debug)]
pub struct ContrastiveOutput<R> {
    pub loss: f64,
    pub dz_a: Tensor<R>,
    pub dz_b: Tensor<R>,
}

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| x / norm).collect(), norm)
    }
}

/// `dL/du` from `dL/dû` for `û = u / |u|`.
fn denormalize_grad(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; g.len()];
    }
    let dot: f64 = g.iter().zip(unit).map(|(a, b)| a * b).sum();
    g.iter().zip(unit).map(|(gi, ui)| (gi - dot * ui) / norm).collect()
}

fn rows<R: Real>(t: &Tensor<R>) -> Vec<Vec<f64>> {
    (0..t.n).map(|i| t.sample(i).iter().map(|v| v.f64()).collect()).collect()
}

fn to_tensor<R: Real>(like: &Tensor<R>, rows: &[Vec<f64>]) -> Tensor<R> {
    Tensor::from_vec(like.n, like.c, like.h, like.w, rows.iter().flatten().map(|&v| R::of(v)).collect())
}

/// NT-Xent over each domain's sub-batch. For anchor `z_i'` with positive
/// `z_i''`, the denominator runs over both views of every other pair of the
/// same domain (plus the positive when `include_positive`). The value is the
/// mean over all `2N` anchor terms.
pub fn ntxent_loss<R: Real>(batch: &ProjectionBatch<R>, tau: f64, include_positive: bool) -> Result<ContrastiveOutput<R>> {
    let n = batch.len();
    let groups = batch.groups();
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::validation(
            "batch_size_con",
            format!("domain `{}` contributes a single pair; NT-Xent needs >= 2", batch.domain_id[g[0]]),
        ));
    }
    let (ra, rb) = (rows(&batch.z_a), rows(&batch.z_b));
    let d = batch.z_a.sample_len();
    let mut grad_a = vec![vec![0.0; d]; n];
    let mut grad_b = vec![vec![0.0; d]; n];
    let mut total = 0.0;
    for group in &groups {
        let m = group.len();
        // Local index: views a at 0..m, views b at m..2m.
        let mut units = Vec::with_capacity(2 * m);
        let mut norms = Vec::with_capacity(2 * m);
        for &i in group {
            let (u, s) = normalize(&ra[i]);
            units.push(u);
            norms.push(s);
        }
        for &i in group {
            let (u, s) = normalize(&rb[i]);
            units.push(u);
            norms.push(s);
        }
        let sim = |x: usize, y: usize| units[x].iter().zip(&units[y]).map(|(a, b)| a * b).sum::<f64>();
        let mut gunit = vec![vec![0.0; d]; 2 * m];
        for x in 0..2 * m {
            let pair = x % m;
            let pos = if x < m { x + m } else { x - m };
            let mut den: Vec<usize> = (0..2 * m).filter(|&k| k % m != pair).collect();
            if include_positive {
                den.push(pos);
            }
            let logits: Vec<f64> = den.iter().map(|&k| sim(x, k) / tau).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            let s_pos = sim(x, pos);
            total += -s_pos / tau + lse;
            // d l / d s_xk
            let mut coeff: Vec<(usize, f64)> = vec![(pos, -1.0 / tau)];
            for (&k, l) in den.iter().zip(&logits) {
                coeff.push((k, (l - lse).exp() / tau));
            }
            for (k, c) in coeff {
                for j in 0..d {
                    gunit[x][j] += c * units[k][j];
                    gunit[k][j] += c * units[x][j];
                }
            }
        }
        for (local, &i) in group.iter().enumerate() {
            grad_a[i] = denormalize_grad(&gunit[local], &units[local], norms[local]);
            grad_b[i] = denormalize_grad(&gunit[local + m], &units[local + m], norms[local + m]);
        }
    }
    let scale = 1.0 / (2 * n) as f64;
    for g in grad_a.iter_mut().chain(grad_b.iter_mut()) {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(ContrastiveOutput {
        loss: total * scale,
        dz_a: to_tensor(&batch.z_a, &grad_a),
        dz_b: to_tensor(&batch.z_b, &grad_b),
    })
}

/// `-(1/N) Σ_i [d(q_a_i, sg(t_b_i)) + d(q_b_i, sg(t_a_i))]`, returning the
/// gradients with respect to the predictions only; the stopped targets get
/// none.
pub fn negative_cosine_stopgrad<R: Real>(
    q_a: &Tensor<R>,
    q_b: &Tensor<R>,
    t_a: &Tensor<R>,
    t_b: &Tensor<R>,
) -> Result<(f64, Tensor<R>, Tensor<R>)> {
    if !(q_a.same_shape(q_b) && q_a.same_shape(t_a) && q_a.same_shape(t_b)) {
        return Err(Error::Shape("simsiam: predictions and targets differ in shape".into()));
    }
    let n = q_a.n;
    let (qa, qb, ta, tb) = (rows(q_a), rows(q_b), rows(t_a), rows(t_b));
    let mut total = 0.0;
    let term = |q: &[f64], t: &[f64]| -> (f64, Vec<f64>) {
        let (uq, nq) = normalize(q);
        let (ut, _) = normalize(t);
        let s: f64 = uq.iter().zip(&ut).map(|(a, b)| a * b).sum();
        let g: Vec<f64> = ut.iter().map(|v| -v / n as f64).collect();
        (s, denormalize_grad(&g, &uq, nq))
    };
    let mut ga = Vec::with_capacity(n);
    let mut gb = Vec::with_capacity(n);
    for i in 0..n {
        let (s1, g1) = term(&qa[i], &tb[i]);
        let (s2, g2) = term(&qb[i], &ta[i]);
        total -= s1 + s2;
        ga.push(g1);
        gb.push(g2);
    }
    Ok((total / n as f64, to_tensor(q_a, &ga), to_tensor(q_b, &gb)))
}

/// SimSiam loss value for a projection batch.
pub fn simsiam_loss<R: Real>(batch: &ProjectionBatch<R>, predictor: Option<&Predictor<R>>) -> Result<f64> {
    let q = predictor.ok_or_else(|| Error::Missing("predictor".into()))?;
    let (qa, _) = q.forward(&batch.z_a);
    let (qb, _) = q.forward(&batch.z_b);
    Ok(negative_cosine_stopgrad(&qa, &qb, &batch.z_a, &batch.z_b)?.0)
}

/// SimSiam loss with backward: predictor gradients accumulate in place and
/// the returned projection gradients flow only through the predictor path.
pub fn simsiam_backward<R: Real>(batch: &ProjectionBatch<R>, predictor: &mut Predictor<R>) -> Result<ContrastiveOutput<R>> {
    let (qa, ca) = predictor.forward(&batch.z_a);
    let (qb, cb) = predictor.forward(&batch.z_b);
    let (loss, dqa, dqb) = negative_cosine_stopgrad(&qa, &qb, &batch.z_a, &batch.z_b)?;
    let dz_a = predictor.backward(&ca, &dqa);
    let dz_b = predictor.backward(&cb, &dqb);
    Ok(ContrastiveOutput { loss, dz_a, dz_b })
}

/// `½(L_s + L_t) + λ·L_sup`, or `L_s + λ·L_sup` without a target domain.
pub fn joint_loss(l_con_source: f64, l_con_target: Option<f64>, l_sup: f64, lambda_sup: f64) -> f64 {
    let con = match l_con_target {
        Some(t) => 0.5 * (l_con_source + t),
        None => l_con_source,
    };
    con + lambda_sup * l_sup
}

/// Generalization to any number of per-domain contrastive terms: their mean,
/// scaled by `weight`, plus `λ·L_sup`.
pub fn joint_loss_domains(l_con: &[f64], l_sup: f64, lambda_sup: f64, weight: f64) -> f64 {
    let con = if l_con.is_empty() {
        0.0
    } else {
        l_con.iter().sum::<f64>() / l_con.len() as f64
    };
    weight * con + lambda_sup * l_sup
}
