use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ContrastiveKind, LossConfig};
use crate::model::{ArchitectureSpec, Components, HeadKind};
use crate::pairing::{AugmentParams, PairGenerator, PairingStrategy, SlicePairingParams};
use crate::synthdata::{DomainSpec, GLOBAL_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    BaselineUnet,
    Segclr,
    SimclrPretrain,
    SimsiamPretrain,
}

impl ModelVariant {
    pub fn is_contrastive(self) -> bool {
        self != Self::BaselineUnet
    }

    pub fn is_pretrain(self) -> bool {
        matches!(self, Self::SimclrPretrain | Self::SimsiamPretrain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "adam")]
    pub name: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

fn adam() -> String {
    "adam".into()
}
fn default_lr() -> f64 {
    1e-3
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: adam(),
            lr: default_lr(),
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Named override of selected experiment fields; each variant is trained as
/// its own model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub model_variant: Option<ModelVariant>,
    pub pairing: Option<PairingStrategy>,
    pub head: Option<HeadKind>,
    pub unlabeled_fraction: Option<f64>,
    pub source_domains: Option<Vec<String>>,
    pub target_domains: Option<Vec<String>>,
    pub contrastive_kind: Option<ContrastiveKind>,
    pub contrastive_weight: Option<f64>,
    pub lambda_sup: Option<f64>,
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub source_domains: Vec<String>,
    #[serde(default)]
    pub target_domains: Vec<String>,
    #[serde(default = "one")]
    pub unlabeled_fraction: f64,
    pub model_variant: ModelVariant,
    #[serde(default = "default_pairing")]
    pub pairing: PairingStrategy,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Contrastive phase length for the pretrain variants; defaults to `epochs`.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size_sup: usize,
    #[serde(default = "default_batch")]
    pub batch_size_con: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_arch")]
    pub arch: ArchitectureSpec,
    #[serde(default)]
    pub augment: AugmentParams,
    #[serde(default)]
    pub slice_pairing: SlicePairingParams,
    #[serde(default = "half")]
    pub threshold: f64,
    /// Seed of dataset generation and the train/val/test split.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    /// Domains whose test split is evaluated; defaults to sources and targets.
    #[serde(default)]
    pub eval_domains: Vec<String>,
    #[serde(default)]
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn default_pairing() -> PairingStrategy {
    PairingStrategy::Augment
}
fn default_head() -> HeadKind {
    HeadKind::Ch
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    8
}
fn default_arch() -> ArchitectureSpec {
    ArchitectureSpec::desk(2)
}
fn default_split() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

impl ExperimentConfig {
    /// Desk-scale single-source configuration without domains attached.
    pub fn desk(name: &str, variant: ModelVariant, source: &[&str], target: &[&str]) -> Self {
        Self {
            name: name.into(),
            source_domains: source.iter().map(|s| s.to_string()).collect(),
            target_domains: target.iter().map(|s| s.to_string()).collect(),
            unlabeled_fraction: 1.0,
            model_variant: variant,
            pairing: default_pairing(),
            head: default_head(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: default_epochs(),
            pretrain_epochs: None,
            batch_size_sup: default_batch(),
            batch_size_con: default_batch(),
            seeds: vec![0],
            arch: default_arch(),
            augment: AugmentParams::default(),
            slice_pairing: SlicePairingParams::default(),
            threshold: 0.5,
            data_seed: 0,
            split: default_split(),
            eval_domains: Vec::new(),
            domains: Vec::new(),
            variants: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = missing_field(&msg).unwrap_or_else(|| "config".to_string());
            Error::validation(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Classes of the domains in play, in global order.
    pub fn class_axis(&self) -> Vec<String> {
        if !self.arch.class_names.is_empty() {
            return self.arch.class_names.clone();
        }
        let used: BTreeSet<&str> = self
            .domains
            .iter()
            .filter(|d| self.source_domains.contains(&d.domain_id) || self.target_domains.contains(&d.domain_id) || self.eval_domains.contains(&d.domain_id))
            .flat_map(|d| d.class_set.iter().map(|s| s.as_str()))
            .collect();
        if used.is_empty() {
            return GLOBAL_CLASSES[..self.arch.n_classes.min(GLOBAL_CLASSES.len())]
                .iter()
                .map(|s| s.to_string())
                .collect();
        }
        GLOBAL_CLASSES.iter().filter(|c| used.contains(*c)).map(|s| s.to_string()).collect()
    }

    /// Architecture with the class axis and projection head resolved.
    pub fn effective_arch(&self) -> ArchitectureSpec {
        let classes = self.class_axis();
        ArchitectureSpec {
            n_classes: classes.len(),
            class_names: classes,
            head_kind: self.head,
            ..self.arch.clone()
        }
    }

    pub fn components(&self) -> Components {
        let simsiam = match self.model_variant {
            ModelVariant::BaselineUnet => false,
            ModelVariant::SimsiamPretrain => true,
            ModelVariant::SimclrPretrain => false,
            ModelVariant::Segclr => self.loss.contrastive_kind == ContrastiveKind::Simsiam,
        };
        Components {
            head: self.model_variant.is_contrastive(),
            predictor: simsiam,
        }
    }

    /// Contrastive objective actually optimized, after the variant's override.
    pub fn contrastive_kind(&self) -> ContrastiveKind {
        match self.model_variant {
            ModelVariant::SimclrPretrain => ContrastiveKind::Ntxent,
            ModelVariant::SimsiamPretrain => ContrastiveKind::Simsiam,
            _ => self.loss.contrastive_kind,
        }
    }

    /// Whether training reads target-domain images at all.
    pub fn uses_target_data(&self) -> bool {
        self.model_variant.is_contrastive() && self.unlabeled_fraction > 0.0 && !self.target_domains.is_empty()
    }

    pub fn pair_generator(&self) -> PairGenerator {
        PairGenerator {
            strategy: self.pairing,
            augment: self.augment,
            slice: self.slice_pairing,
        }
    }

    pub fn evaluated_domains(&self) -> Vec<String> {
        if !self.eval_domains.is_empty() {
            return self.eval_domains.clone();
        }
        let mut out = self.source_domains.clone();
        out.extend(self.target_domains.iter().filter(|t| !out.contains(t)).cloned().collect::<Vec<_>>());
        out
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.domain_id == id)
    }

    /// One `(model_id, config)` per variant, or the config itself under its
    /// name when no variants are declared.
    pub fn resolve_variants(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let base = ExperimentConfig {
            variants: Vec::new(),
            ..self.clone()
        };
        if self.variants.is_empty() {
            return Ok(vec![(self.name.clone(), base)]);
        }
        let mut out = Vec::new();
        for v in &self.variants {
            let mut c = base.clone();
            if let Some(x) = v.model_variant {
                c.model_variant = x;
            }
            if let Some(x) = v.pairing {
                c.pairing = x;
            }
            if let Some(x) = v.head {
                c.head = x;
            }
            if let Some(x) = v.unlabeled_fraction {
                c.unlabeled_fraction = x;
            }
            if let Some(x) = &v.source_domains {
                c.source_domains = x.clone();
            }
            if let Some(x) = &v.target_domains {
                c.target_domains = x.clone();
            }
            if let Some(x) = v.contrastive_kind {
                c.loss.contrastive_kind = x;
            }
            if let Some(x) = v.contrastive_weight {
                c.loss.contrastive_weight = x;
            }
            if let Some(x) = v.lambda_sup {
                c.loss.lambda_sup = x;
            }
            if let Some(x) = v.epochs {
                c.epochs = x;
            }
            c.validate_single().map_err(|e| match e {
                Error::Validation { field, message } => Error::validation(format!("variants[{}].{field}", v.name), message),
                other => other,
            })?;
            out.push((v.name.clone(), c));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_single()?;
        let mut names = BTreeSet::new();
        for v in &self.variants {
            if !valid_id(&v.name) {
                return Err(Error::validation("variants.name", format!("`{}` must be a non-empty [A-Za-z0-9_.+-] string", v.name)));
            }
            if !names.insert(v.name.as_str()) {
                return Err(Error::validation("variants.name", format!("duplicate variant `{}`", v.name)));
            }
        }
        self.resolve_variants().map(|_| ())
    }

    fn validate_single(&self) -> Result<()> {
        if !valid_id(&self.name) {
            return Err(Error::validation("name", "must be a non-empty [A-Za-z0-9_.+-] string"));
        }
        if self.source_domains.is_empty() {
            return Err(Error::validation("source_domains", "at least one labeled source domain is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "must be non-empty"));
        }
        let seeds: BTreeSet<_> = self.seeds.iter().collect();
        if seeds.len() != self.seeds.len() {
            return Err(Error::validation("seeds", "must not repeat"));
        }
        for t in &self.target_domains {
            if self.source_domains.contains(t) {
                return Err(Error::validation("target_domains", format!("`{t}` is also a source domain")));
            }
        }
        if !self.domains.is_empty() {
            let mut ids = BTreeSet::new();
            for d in &self.domains {
                d.validate()?;
                if !ids.insert(d.domain_id.as_str()) {
                    return Err(Error::validation("domains", format!("duplicate domain `{}`", d.domain_id)));
                }
                if d.slice_shape != self.arch.input_shape {
                    return Err(Error::validation(
                        format!("domains[{}].slice_shape", d.domain_id),
                        format!("{:?} differs from arch.input_shape {:?}", d.slice_shape, self.arch.input_shape),
                    ));
                }
            }
            for (field, list) in [
                ("source_domains", &self.source_domains),
                ("target_domains", &self.target_domains),
                ("eval_domains", &self.eval_domains),
            ] {
                if let Some(id) = list.iter().find(|id| !ids.contains(id.as_str())) {
                    return Err(Error::validation(field, format!("unknown domain `{id}`")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::validation("unlabeled_fraction", "must lie in [0, 1]"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be >= 1"));
        }
        if self.pretrain_epochs == Some(0) {
            return Err(Error::validation("pretrain_epochs", "must be >= 1"));
        }
        if self.batch_size_sup == 0 {
            return Err(Error::validation("batch_size_sup", "must be >= 1"));
        }
        if self.model_variant.is_contrastive() && self.batch_size_con < 2 && self.contrastive_kind() == ContrastiveKind::Ntxent {
            return Err(Error::validation("batch_size_con", "NT-Xent needs >= 2 pairs per domain"));
        }
        if self.batch_size_con == 0 {
            return Err(Error::validation("batch_size_con", "must be >= 1"));
        }
        if self.model_variant.is_pretrain() && !self.uses_target_data() {
            return Err(Error::validation(
                "target_domains",
                "pretrain variants need unlabeled target data (non-empty targets, unlabeled_fraction > 0)",
            ));
        }
        if self.optimizer.name != "adam" {
            return Err(Error::validation("optimizer.name", format!("unsupported optimizer `{}`", self.optimizer.name)));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::validation("optimizer.lr", "must be > 0"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::validation("optimizer", "betas must lie in [0, 1) and eps must be > 0"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation("threshold", "must lie in (0, 1)"));
        }
        let (a, b, c) = self.split;
        if !(a > 0.0 && b >= 0.0 && c >= 0.0 && ((a + b + c) - 1.0).abs() < 1e-9) {
            return Err(Error::validation("split", "fractions must be non-negative, train > 0, and sum to 1"));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.slice_pairing.validate()?;
        self.effective_arch().validate()?;
        Ok(())
    }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "_-.+".contains(c))
}

/// Extracts the field name from serde's "missing field `x`" message.
fn missing_field(msg: &str) -> Option<String> {
    let rest = msg.split("missing field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

/// One config per fraction, identical except for `unlabeled_fraction`.
pub fn ablation_schedule(base: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<ExperimentConfig>> {
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::validation("unlabeled_fraction", format!("{f} is outside [0, 1]")));
            }
            Ok(ExperimentConfig {
                unlabeled_fraction: f,
                ..base.clone()
            })
        })
        .collect()
}
