//! End-to-end orchestration: configuration, dataset generation and
//! self-certification, policy training, evaluation and report tables.

use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{heuristic_grasp, random_grasp, BaselineConfig};
use crate::demo_synth::{synth_demo, DemoSpec, GraspStyle};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::hand::HandDescription;
use crate::policy::{
    evaluate, evaluate_grasps, train, Approach, EvalReport, PointFeatures, PolicyNet, TrainConfig, TrainOutcome, TrainSample, FEATURE_DIM,
};
use crate::refinement::{check_draws, refine, PhysicsDraw, RefineOptions};
use crate::retarget::{retarget, DemoRecord, RetargetOptions, RetargetWeights};
use crate::seeding::{derive_seed, rng_for, stage};
use crate::shape::instance::{LATENT_SIGMA, SCALE_ADAPT};
use crate::shape::{FieldParams, InstanceSpec, LatentVector, ShapeInstance, TemplateShape, LATENT_DIM};
use crate::stability::OracleConfig;
use crate::transfer::{build_context, transfer_grasp, Grasp, DEFAULT_REFERENCES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub templates: Vec<TemplateShape>,
    /// One demonstration per style and template.
    pub styles: Vec<GraspStyle>,
    /// Keypoint jitter of the synthetic demonstrations, m.
    pub demo_jitter: f64,
    /// Deformed instances per source grasp.
    pub augmentations: usize,
    /// Surface samples per instance.
    pub samples: usize,
    pub surface_seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            templates: default_templates(),
            styles: GraspStyle::ALL.to_vec(),
            demo_jitter: 0.002,
            augmentations: 20,
            samples: crate::shape::instance::DEFAULT_SAMPLES,
            surface_seed: 17,
        }
    }
}

/// The desk suite: four graspable primitives of 7–10 cm.
pub fn default_templates() -> Vec<TemplateShape> {
    vec![
        TemplateShape::Sphere { radius: 0.04 },
        TemplateShape::Cylinder { radius: 0.035, half_height: 0.05 },
        TemplateShape::RoundedBox {
            half_extents: [0.035, 0.045, 0.05],
            radius: 0.008,
        },
        TemplateShape::Superellipsoid {
            radii: [0.045, 0.04, 0.035],
            e1: 0.5,
            e2: 0.7,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    /// Must equal the compiled latent dimension; present so the document
    /// records it.
    pub latent_dim: usize,
    pub latent_sigma: f64,
    pub scale_adapt: f64,
    pub field: FieldParams,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            latent_sigma: LATENT_SIGMA,
            scale_adapt: SCALE_ADAPT,
            field: FieldParams::default(),
        }
    }
}

impl ShapeConfig {
    pub fn sigma(&self) -> f64 {
        self.latent_sigma * self.scale_adapt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargetConfig {
    pub weights: RetargetWeights,
    /// `seed` is replaced per demonstration from the master seed.
    pub options: RetargetOptions,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self {
            weights: RetargetWeights::default(),
            options: RetargetOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub references: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            references: DEFAULT_REFERENCES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub points: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            points: crate::policy::NUM_POINTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fresh deformations per training template in the held-out set.
    pub instances_per_template: usize,
    /// Templates never seen in training, evaluated as extra columns.
    pub novel_templates: Vec<TemplateShape>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            instances_per_template: 5,
            novel_templates: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Hand description file; the built-in hand when absent. Relative paths
    /// resolve against the config file.
    pub hand: Option<PathBuf>,
    pub suite: SuiteConfig,
    pub shape: ShapeConfig,
    pub retarget: RetargetConfig,
    pub transfer: TransferConfig,
    pub refine: RefineOptions,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub baselines: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hand: None,
            suite: SuiteConfig::default(),
            shape: ShapeConfig::default(),
            retarget: RetargetConfig::default(),
            transfer: TransferConfig::default(),
            refine: RefineOptions::default(),
            features: FeatureConfig::default(),
            train: desk_train_config(),
            eval: EvalConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

/// The desk dataset holds a few hundred records; at the reference batch of
/// 256 an epoch is a single optimizer step, so the desk suite uses 16.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        batch: 16,
        ..TrainConfig::default()
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(hand), Some(dir)) = (&cfg.hand, path.parent()) {
            if hand.is_relative() {
                cfg.hand = Some(dir.join(hand));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.shape.latent_dim != LATENT_DIM {
            return bad(format!("shape.latent_dim must be {LATENT_DIM}"));
        }
        if !(self.shape.sigma() >= 0.0) || !self.shape.sigma().is_finite() {
            return bad("shape.latent_sigma and shape.scale_adapt must be finite and >= 0".into());
        }
        if self.suite.templates.is_empty() || self.suite.styles.is_empty() {
            return bad("suite needs at least one template and one style".into());
        }
        if !(self.suite.demo_jitter >= 0.0) {
            return bad("suite.demo_jitter must be >= 0".into());
        }
        if self.suite.samples < crate::shape::instance::MIN_SAMPLES {
            return bad(format!("suite.samples must be at least {}", crate::shape::instance::MIN_SAMPLES));
        }
        if self.features.points == 0 || self.features.points > self.suite.samples {
            return bad("features.points must be in 1..=suite.samples".into());
        }
        if self.transfer.references == 0 {
            return bad("transfer.references must be >= 1".into());
        }
        for t in self.suite.templates.iter().chain(&self.eval.novel_templates) {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.retarget.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.refine.validate()?;
        self.train.validate()?;
        self.baselines.validate()?;
        Ok(())
    }

    pub fn hand_description(&self) -> Result<HandDescription> {
        match &self.hand {
            Some(p) => HandDescription::load(p).map_err(|e| Error::Config(format!("hand {}: {e}", p.display()))),
            None => Ok(HandDescription::default()),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[stage::TRAIN]),
            ..self.train.clone()
        }
    }
}

/// Features as stored on disk: little-endian f64 rows, base64 encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureBlock {
    pub count: usize,
    pub center: [f64; 3],
    pub data: String,
}

impl FeatureBlock {
    pub fn encode(f: &PointFeatures) -> Self {
        let bytes: Vec<u8> = f.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        FeatureBlock {
            count: f.count(),
            center: [f.center.x, f.center.y, f.center.z],
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<PointFeatures> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Dataset(format!("feature block: {e}")))?;
        if bytes.len() != self.count * FEATURE_DIM * 8 {
            return Err(Error::Dataset(format!("feature block holds {} bytes for {} points", bytes.len(), self.count)));
        }
        let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Ok(PointFeatures {
            values,
            center: Vec3::from(self.center),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub template: usize,
    pub style: GraspStyle,
    /// `None` for the grasp on the undeformed template.
    pub augmentation: Option<usize>,
    /// Refinement trial that produced the grasp (0 = unperturbed seed).
    pub refine_trial: usize,
    pub feature_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub instance: InstanceSpec,
    /// Hand directions the features are conditioned on.
    pub approach: Approach,
    pub features: FeatureBlock,
    pub grasp: Grasp,
    /// The randomized physics draws the grasp passed.
    pub draws: Vec<PhysicsDraw>,
    pub oracle: OracleConfig,
    pub provenance: Provenance,
}

impl DatasetRecord {
    pub fn train_sample(&self) -> Result<TrainSample> {
        Ok(TrainSample {
            features: self.features.decode()?,
            label: self.grasp,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub instance_rebuilt: bool,
    pub features_match: bool,
    pub draws_pass: bool,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.instance_rebuilt && self.features_match && self.draws_pass
    }
}

/// Rebuilds the record's instance and features and replays its draws.
pub fn verify_record(desc: &HandDescription, rec: &DatasetRecord) -> Result<Verification> {
    let inst = match ShapeInstance::build(rec.instance.clone()) {
        Ok(i) => i,
        Err(_) => {
            return Ok(Verification {
                instance_rebuilt: false,
                features_match: false,
                draws_pass: false,
            })
        }
    };
    let features = rec.approach.features(&inst, rec.features.count, rec.provenance.feature_seed)?;
    let features_match = FeatureBlock::encode(&features) == rec.features;
    let draws_pass = !rec.draws.is_empty() && check_draws(desc, &inst, &rec.grasp, &rec.draws, &rec.oracle)?.is_none();
    Ok(Verification {
        instance_rebuilt: true,
        features_match,
        draws_pass,
    })
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub demos_requested: usize,
    pub demos_synthesized: usize,
    pub sources_refined: usize,
    pub transfers_attempted: usize,
    pub transfers_refined: usize,
    /// Records written, source grasps included.
    pub records_written: usize,
}

impl StageCounts {
    /// `demos × augmentations ≥ transfers attempted ≥ transfer records`.
    pub fn conserved(&self, augmentations: usize) -> bool {
        let transfer_records = self.records_written - self.sources_refined.min(self.records_written);
        self.demos_requested * augmentations >= self.transfers_attempted
            && self.transfers_attempted >= transfer_records
            && self.transfers_refined == transfer_records
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub attempted: usize,
    pub refined: usize,
    pub rate: Option<f64>,
}

impl RateSummary {
    pub fn new(attempted: usize, refined: usize) -> Self {
        Self {
            attempted,
            refined,
            rate: (attempted > 0).then(|| refined as f64 / attempted as f64),
        }
    }
}

/// A target instance a source grasp was transferred to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetKey {
    pub template: usize,
    pub style: usize,
    pub augmentation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub records: Vec<DatasetRecord>,
    pub counts: StageCounts,
    pub source: RateSummary,
    pub transfer: RateSummary,
    pub targets: Vec<TargetKey>,
}

/// One synthesized demonstration and its retargeted robot grasp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDemo {
    pub template: usize,
    pub style: GraspStyle,
    pub demo: DemoRecord,
    pub grasp: Grasp,
    pub objective: f64,
}

fn source_spec(cfg: &PipelineConfig, template: usize) -> InstanceSpec {
    InstanceSpec {
        template: cfg.suite.templates[template].clone(),
        latent: LatentVector::zeros(),
        field: cfg.shape.field.clone(),
        surface_seed: cfg.suite.surface_seed,
        samples: cfg.suite.samples,
    }
}

fn latent_spec(cfg: &PipelineConfig, template: &TemplateShape, key: &[u64]) -> InstanceSpec {
    let mut rng = rng_for(cfg.seed, key);
    InstanceSpec {
        template: template.clone(),
        latent: LatentVector::sample(&mut rng, cfg.shape.sigma()),
        field: cfg.shape.field.clone(),
        surface_seed: cfg.suite.surface_seed,
        samples: cfg.suite.samples,
    }
}

/// Deformed instance `a` for the demonstration `(template, style)`.
pub fn augmented_spec(cfg: &PipelineConfig, key: TargetKey) -> InstanceSpec {
    let t = &cfg.suite.templates[key.template];
    latent_spec(cfg, t, &[stage::AUGMENT, key.template as u64, key.style as u64, key.augmentation as u64])
}

/// Synthesizes one demonstration per template and style; infeasible
/// combinations are skipped with a log line.
pub fn synthesize_demos(cfg: &PipelineConfig) -> Result<Vec<(usize, usize, DemoRecord)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (t, template) in cfg.suite.templates.iter().enumerate() {
        for (s, &style) in cfg.suite.styles.iter().enumerate() {
            let spec = DemoSpec {
                template: template.clone(),
                style,
                jitter: cfg.suite.demo_jitter,
            };
            match synth_demo(&spec, derive_seed(cfg.seed, &[stage::DEMO, t as u64, s as u64])) {
                Ok(d) => out.push((t, s, d)),
                Err(Error::InfeasibleStyle(msg)) => log::warn!("template {t} ({}): {msg}", template.kind_name()),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub fn retarget_demos(cfg: &PipelineConfig, desc: &HandDescription, demos: &[(usize, usize, DemoRecord)]) -> Result<Vec<SourceDemo>> {
    demos
        .iter()
        .map(|(t, s, demo)| {
            let options = RetargetOptions {
                seed: derive_seed(cfg.seed, &[stage::RETARGET, *t as u64, *s as u64]),
                ..cfg.retarget.options.clone()
            };
            let r = retarget(desc, demo, &cfg.retarget.weights, &options)?;
            Ok(SourceDemo {
                template: *t,
                style: cfg.suite.styles[*s],
                demo: demo.clone(),
                grasp: r.pose.into(),
                objective: r.objective,
            })
        })
        .collect()
}

/// Nominal hand directions of a style on a template: the palm axes of its
/// noise-free demonstration.
pub fn style_approach(template: &TemplateShape, style: GraspStyle) -> Result<Approach> {
    let demo = synth_demo(
        &DemoSpec {
            template: template.clone(),
            style,
            jitter: 0.0,
        },
        0,
    )?;
    Ok(Approach {
        facing: demo.human_palm.z_axis(),
        pointing: demo.human_palm.x_axis(),
    })
}

fn style_index(cfg: &PipelineConfig, style: GraspStyle) -> usize {
    cfg.suite.styles.iter().position(|s| *s == style).expect("style from config")
}

fn make_record(
    cfg: &PipelineConfig,
    inst: &ShapeInstance,
    grasp: Grasp,
    draws: Vec<PhysicsDraw>,
    provenance_key: (usize, GraspStyle, Option<usize>, usize),
    feature_seed: u64,
) -> Result<DatasetRecord> {
    let (template, style, augmentation, refine_trial) = provenance_key;
    let approach = style_approach(&cfg.suite.templates[template], style)?;
    let features = approach.features(inst, cfg.features.points, feature_seed)?;
    Ok(DatasetRecord {
        instance: inst.spec.clone(),
        approach,
        features: FeatureBlock::encode(&features),
        grasp,
        draws,
        oracle: cfg.refine.oracle.clone(),
        provenance: Provenance {
            template,
            style,
            augmentation,
            refine_trial,
            feature_seed,
        },
    })
}

/// A transferred grasp awaiting refinement on its target instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub key: TargetKey,
    pub style: GraspStyle,
    pub instance: InstanceSpec,
    pub grasp: Grasp,
}

/// Output of the augmentation stage: refined source grasps and the
/// transferred candidates, grouped by source in suite order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmented {
    pub sources: Vec<DatasetRecord>,
    pub candidates: Vec<Candidate>,
    pub counts: StageCounts,
}

/// Refines every source grasp on its undeformed template, then transfers
/// each survivor onto `augmentations` deformed instances.
pub fn augment(cfg: &PipelineConfig, desc: &HandDescription, sources: &[SourceDemo]) -> Result<Augmented> {
    let mut counts = StageCounts {
        demos_requested: cfg.suite.templates.len() * cfg.suite.styles.len(),
        demos_synthesized: sources.len(),
        ..StageCounts::default()
    };
    let mut records = Vec::new();
    let mut candidates = Vec::new();
    for src in sources {
        let t = src.template;
        let s = style_index(cfg, src.style);
        let source_inst = ShapeInstance::build(source_spec(cfg, t))?;
        let seed = derive_seed(cfg.seed, &[stage::SOURCE_REFINE, t as u64, s as u64]);
        let refined = refine(desc, &source_inst, &src.grasp, &cfg.refine, seed)?;
        let Some(source_grasp) = refined.grasp else {
            log::info!("template {t} {}: source grasp not refined", src.style.name());
            continue;
        };
        counts.sources_refined += 1;
        let fseed = derive_seed(cfg.seed, &[stage::FEATURES, t as u64, s as u64, u64::MAX]);
        records.push(make_record(cfg, &source_inst, source_grasp, refined.draws, (t, src.style, None, refined.trials - 1), fseed)?);

        let ctx = build_context(&source_inst, &source_grasp, cfg.transfer.references)?;
        let transferred: Vec<Result<Candidate>> = (0..cfg.suite.augmentations)
            .into_par_iter()
            .map(|a| {
                let key = TargetKey {
                    template: t,
                    style: s,
                    augmentation: a,
                };
                let target = ShapeInstance::build(augmented_spec(cfg, key))?;
                let grasp = transfer_grasp(&ctx, &source_inst, &target, &source_grasp)?;
                Ok(Candidate {
                    key,
                    style: src.style,
                    instance: target.spec.clone(),
                    grasp,
                })
            })
            .collect();
        for c in transferred {
            candidates.push(c?);
        }
    }
    counts.transfers_attempted = candidates.len();
    log::info!("{} source grasps refined, {} transfers proposed", counts.sources_refined, candidates.len());
    Ok(Augmented {
        sources: records,
        candidates,
        counts,
    })
}

/// Refines the transferred candidates and assembles the dataset: each
/// source record followed by its accepted transfers.
pub fn refine_candidates(cfg: &PipelineConfig, desc: &HandDescription, aug: &Augmented) -> Result<Generation> {
    let outcomes: Vec<Result<Option<DatasetRecord>>> = aug
        .candidates
        .par_iter()
        .map(|c| {
            let k = c.key;
            let target = ShapeInstance::build(c.instance.clone())?;
            let path = [k.template as u64, k.style as u64, k.augmentation as u64];
            let out = refine(desc, &target, &c.grasp, &cfg.refine, derive_seed(cfg.seed, &[stage::TRANSFER_REFINE, path[0], path[1], path[2]]))?;
            match out.grasp {
                Some(g) => {
                    let fseed = derive_seed(cfg.seed, &[stage::FEATURES, path[0], path[1], path[2]]);
                    Ok(Some(make_record(cfg, &target, g, out.draws, (k.template, c.style, Some(k.augmentation), out.trials - 1), fseed)?))
                }
                None => Ok(None),
            }
        })
        .collect();
    let mut counts = aug.counts;
    let mut accepted = Vec::new();
    for o in outcomes {
        accepted.push(o?);
    }
    let mut records = Vec::new();
    for src in &aug.sources {
        let (t, style) = (src.provenance.template, src.provenance.style);
        records.push(src.clone());
        for (c, r) in aug.candidates.iter().zip(&accepted) {
            if c.key.template == t && c.style == style {
                if let Some(r) = r {
                    records.push(r.clone());
                }
            }
        }
    }
    counts.transfers_refined = accepted.iter().filter(|r| r.is_some()).count();
    counts.records_written = records.len();
    log::info!("{}/{} transferred grasps refined", counts.transfers_refined, counts.transfers_attempted);
    Ok(Generation {
        source: RateSummary::new(counts.demos_synthesized, counts.sources_refined),
        transfer: RateSummary::new(counts.transfers_attempted, counts.transfers_refined),
        records,
        counts,
        targets: aug.candidates.iter().map(|c| c.key).collect(),
    })
}

/// Demonstrations → retargeting → source refinement → augmentation →
/// transfer → refinement → features. Deterministic for a given config.
pub fn generate_dataset(cfg: &PipelineConfig, desc: &HandDescription) -> Result<Generation> {
    let demos = synthesize_demos(cfg)?;
    let sources = retarget_demos(cfg, desc, &demos)?;
    let aug = augment(cfg, desc, &sources)?;
    refine_candidates(cfg, desc, &aug)
}

/// Refinement rate when the same target instances are seeded with random
/// grasps instead of transferred ones.
pub fn random_seed_refinement(cfg: &PipelineConfig, desc: &HandDescription, targets: &[TargetKey]) -> Result<RateSummary> {
    let refined: Vec<Result<bool>> = targets
        .par_iter()
        .map(|&key| {
            let target = ShapeInstance::build(augmented_spec(cfg, key))?;
            let path = [stage::RANDOM_SEED_ABLATION, key.template as u64, key.style as u64, key.augmentation as u64];
            let g = random_grasp(desc, &target, &cfg.baselines, derive_seed(cfg.seed, &path));
            let out = refine(desc, &target, &g, &cfg.refine, derive_seed(cfg.seed, &[path[0], path[1], path[2], path[3], 1]))?;
            Ok(out.grasp.is_some())
        })
        .collect();
    let mut n = 0;
    for r in refined {
        n += r? as usize;
    }
    Ok(RateSummary::new(targets.len(), n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementComparison {
    pub correspondence: RateSummary,
    pub random: RateSummary,
}

impl RefinementComparison {
    /// Correspondence minus random rate, percentage points.
    pub fn gap_pp(&self) -> Option<f64> {
        Some(100.0 * (self.correspondence.rate? - self.random.rate?))
    }
}

pub fn compare_refinement(cfg: &PipelineConfig, desc: &HandDescription, generation: &Generation) -> Result<RefinementComparison> {
    Ok(RefinementComparison {
        correspondence: generation.transfer,
        random: random_seed_refinement(cfg, desc, &generation.targets)?,
    })
}

pub fn train_policy(cfg: &PipelineConfig, records: &[DatasetRecord]) -> Result<TrainOutcome> {
    let samples = records.iter().map(|r| r.train_sample()).collect::<Result<Vec<_>>>()?;
    train(&samples, &cfg.train_config())
}

/// One held-out query: an instance and the approach requested for it.
#[derive(Clone, Debug)]
pub struct EvalItem {
    /// Table column: the template kind, `*` marking templates absent from
    /// training.
    pub column: String,
    pub instance: ShapeInstance,
    pub approach: Approach,
}

/// Fresh deformations of every training template plus any novel templates,
/// each queried once per feasible style.
pub fn eval_instances(cfg: &PipelineConfig) -> Result<Vec<EvalItem>> {
    let mut specs = Vec::new();
    let all = cfg.suite.templates.iter().map(|t| (t, false)).chain(cfg.eval.novel_templates.iter().map(|t| (t, true)));
    for (t, (template, novel)) in all.enumerate() {
        let name = format!("{}{}", template.kind_name(), if novel { "*" } else { "" });
        let approaches: Vec<Approach> = cfg.suite.styles.iter().filter_map(|&s| style_approach(template, s).ok()).collect();
        for k in 0..cfg.eval.instances_per_template {
            for a in &approaches {
                specs.push((name.clone(), latent_spec(cfg, template, &[stage::EVAL, t as u64, k as u64]), *a));
            }
        }
    }
    if specs.is_empty() {
        return Err(Error::InvalidInput("held-out set is empty".into()));
    }
    specs
        .into_par_iter()
        .map(|(column, spec, approach)| {
            Ok(EvalItem {
                column,
                instance: ShapeInstance::build(spec)?,
                approach,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    /// One entry per column of the table.
    pub cells: Vec<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub columns: Vec<String>,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn rate(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method)?.cells.last()?.rate
    }
}

fn per_column<F>(items: &[EvalItem], run: F) -> Vec<EvalReport>
where
    F: Fn(&[EvalItem]) -> EvalReport,
{
    let columns = columns_of(items);
    let mut cells: Vec<EvalReport> = columns[..columns.len() - 1]
        .iter()
        .map(|c| {
            let subset: Vec<EvalItem> = items.iter().filter(|it| &it.column == c).cloned().collect();
            run(&subset)
        })
        .collect();
    let s: usize = cells.iter().map(|c| c.successes).sum();
    let n: usize = cells.iter().map(|c| c.trials).sum();
    cells.push(EvalReport {
        successes: s,
        trials: n,
        rate: (n > 0).then(|| s as f64 / n as f64),
    });
    cells
}

/// Column names in first-seen order followed by `all`.
pub fn columns_of(items: &[EvalItem]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for it in items {
        if !cols.contains(&it.column) {
            cols.push(it.column.clone());
        }
    }
    cols.push("all".into());
    cols
}

fn eval_seed(cfg: &PipelineConfig, column: &[EvalItem]) -> u64 {
    let name = column.first().map_or("", |it| it.column.as_str());
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    derive_seed(cfg.seed, &[stage::EVAL, 1, tag])
}

pub fn baseline_row(cfg: &PipelineConfig, desc: &HandDescription, items: &[EvalItem], kind: BaselineKind) -> EvalRow {
    let cells = per_column(items, |subset| {
        let seed = eval_seed(cfg, subset);
        let instances: Vec<ShapeInstance> = subset.iter().map(|it| it.instance.clone()).collect();
        evaluate_grasps(desc, &instances, &cfg.refine.oracle, seed, |i, inst| {
            Ok(match kind {
                BaselineKind::Random => random_grasp(desc, inst, &cfg.baselines, derive_seed(seed, &[stage::BASELINE, i as u64])),
                BaselineKind::Heuristic => heuristic_grasp(desc, inst, &cfg.baselines),
            })
        })
    });
    EvalRow {
        method: kind.name().into(),
        cells,
    }
}

pub fn policy_row(cfg: &PipelineConfig, desc: &HandDescription, items: &[EvalItem], net: &PolicyNet) -> EvalRow {
    let cells = per_column(items, |subset| {
        let instances: Vec<ShapeInstance> = subset.iter().map(|it| it.instance.clone()).collect();
        let approaches: Vec<Approach> = subset.iter().map(|it| it.approach).collect();
        evaluate(net, desc, &instances, &approaches, &cfg.refine.oracle, eval_seed(cfg, subset))
    });
    EvalRow {
        method: "policy".into(),
        cells,
    }
}

/// Policy, Random and Heuristic rows on the held-out set.
pub fn run_eval(cfg: &PipelineConfig, desc: &HandDescription, net: &PolicyNet) -> Result<EvalTable> {
    let instances = eval_instances(cfg)?;
    Ok(EvalTable {
        columns: columns_of(&instances),
        rows: vec![
            policy_row(cfg, desc, &instances, net),
            baseline_row(cfg, desc, &instances, BaselineKind::Random),
            baseline_row(cfg, desc, &instances, BaselineKind::Heuristic),
        ],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Random,
    Heuristic,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Heuristic => "heuristic",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineKind::Random),
            "heuristic" => Ok(BaselineKind::Heuristic),
            other => Err(Error::Config(format!("unknown baseline kind `{other}`"))),
        }
    }
}

/// Success-rate table with one row per method and one column per held-out
/// group; `*` marks templates absent from training.
pub fn render_eval_table(table: &EvalTable) -> String {
    let width = table.columns.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "method");
    for c in &table.columns {
        let _ = write!(out, " | {c:>width$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(10 + table.columns.len() * (width + 3)));
    out.push('\n');
    for row in &table.rows {
        let _ = write!(out, "{:<10}", row.method);
        for cell in &row.cells {
            let v = cell.rate.map_or("-".to_string(), |r| format!("{r:.2}"));
            let _ = write!(out, " | {v:>width$}");
        }
        out.push('\n');
    }
    out
}

pub fn render_refinement(cmp: &RefinementComparison, counts: &StageCounts) -> String {
    let pct = |r: &RateSummary| r.rate.map_or("-".into(), |v| format!("{:.1}%", 100.0 * v));
    let mut out = String::new();
    let _ = writeln!(out, "seed source     | refined / attempted | rate");
    let _ = writeln!(out, "----------------+---------------------+-------");
    let _ = writeln!(
        out,
        "correspondence  | {:>8} / {:<8} | {}",
        cmp.correspondence.refined,
        cmp.correspondence.attempted,
        pct(&cmp.correspondence)
    );
    let _ = writeln!(out, "random          | {:>8} / {:<8} | {}", cmp.random.refined, cmp.random.attempted, pct(&cmp.random));
    let _ = writeln!(
        out,
        "stages: demos {}/{}, sources refined {}, transfers {}/{}, records {}",
        counts.demos_synthesized,
        counts.demos_requested,
        counts.sources_refined,
        counts.transfers_refined,
        counts.transfers_attempted,
        counts.records_written
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = PipelineConfig::from_toml("[refine]\ndraws = 5\nfoo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        assert!(PipelineConfig::from_toml("[shape]\nlatent_dim = 64\n").is_err());
    }

    #[test]
    fn feature_blocks_round_trip_bitwise() {
        let f = PointFeatures {
            values: (0..FEATURE_DIM * 3).map(|i| (i as f64).sin() / 7.0).collect(),
            center: Vec3::new(0.1, -0.2, 1.0 / 3.0),
        };
        let back = FeatureBlock::encode(&f).decode().unwrap();
        assert!(back.values.iter().zip(&f.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.center, f.center);
        let mut bad = FeatureBlock::encode(&f);
        bad.count = 4;
        assert!(bad.decode().is_err());
    }
}
