//! Experiment configuration and the cross-validated train/evaluate driver.
//!
//! Every patient (volume) is assigned to one fold. For each fold and run a
//! model is trained on the supervoxels of all volumes outside the fold, then
//! the fold's support patient segments the fold's remaining patients.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::EncoderConfig;
use crate::episodes::{SamplerConfig, TransformSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, curve_csv, make_cv_splits, protocol_registry, results_csv, score_query, summary_json,
    threshold_line_search, CurvePoint, DiceRecord, ScoredCase, SplitPlan, Summary, TrackedLabels,
};
use crate::head::{HeadConfig, LossTerms, Model};
use crate::numerics::SgdConfig;
use crate::registry::Registry;
use crate::supervoxel::{generate_supervoxels, SupervoxelParams};
use crate::synth::{generate_synthetic_dataset, SyntheticSpec};
use crate::train::{log_to_jsonl, train, TrainConfig, TrainRecord, TrainVolume};
use crate::volume::{
    clip_top_percentile, crop_or_pad, crop_or_pad_labels, load_labels, load_volume, standardize, LabelVolume, Volume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Directory with `images/<name>.rvf.*` and `labels/<name>.rvf.*`.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocess {
    /// Fraction of the brightest voxels clipped per volume.
    pub clip_pct: f64,
    /// Slice size (H, W) after center crop / zero pad; `null` keeps the input size.
    pub crop: Option<[usize; 2]>,
    /// Zero-mean, unit-variance intensities per volume (after clipping).
    pub standardize: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            clip_pct: 0.005,
            crop: Some([64, 64]),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub preprocess: Preprocess,
    /// `null` scales `rho` to the volume size.
    pub supervoxel: Option<SupervoxelParams>,
    pub sampler: SamplerConfig,
    pub transform: TransformSpec,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub sgd: SgdConfig,
    pub iterations: u64,
    pub loss_terms: LossTerms,
    pub protocol: String,
    pub split_seed: u64,
    pub n_folds: usize,
    pub runs_per_fold: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    /// The desk-scale reference configuration.
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            preprocess: Preprocess::default(),
            supervoxel: None,
            sampler: SamplerConfig::default(),
            transform: TransformSpec::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            sgd: SgdConfig {
                lr: 1e-2,
                ..SgdConfig::default()
            },
            iterations: 2000,
            loss_terms: LossTerms::default(),
            protocol: "ep2".into(),
            split_seed: 0,
            n_folds: 5,
            runs_per_fold: 3,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        if !(0.0..1.0).contains(&self.preprocess.clip_pct) {
            return Err(Error::Invalid("clip_pct must be in [0, 1)".into()));
        }
        if self.preprocess.crop.is_some_and(|c| c.contains(&0)) {
            return Err(Error::Invalid("crop size must be >= 1".into()));
        }
        if let Some(sv) = &self.supervoxel {
            sv.validate()?;
        }
        self.sampler.validate()?;
        self.transform.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        self.sgd.validate()?;
        protocol_registry().create(&self.protocol)?;
        if self.n_folds == 0 || self.runs_per_fold == 0 {
            return Err(Error::Invalid("n_folds and runs_per_fold must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            sgd: self.sgd,
            sampler: self.sampler.clone(),
            transform: self.transform.clone(),
            loss_terms: self.loss_terms,
            seed,
        }
    }
}

/// SplitMix64 finalizer over a seed and a tag list; gives every arm its own stream.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

// ---------------------------------------------------------------------------
// Data

/// Preprocessed volumes, class labels and supervoxels, indexed by patient id.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub images: Vec<Volume>,
    pub labels: Vec<LabelVolume>,
    pub supervoxels: Vec<LabelVolume>,
    pub classes: Vec<u32>,
    pub supervoxel_params: SupervoxelParams,
}

pub fn load_dataset(source: &DatasetSource) -> Result<(Vec<String>, Vec<Volume>, Vec<LabelVolume>)> {
    match source {
        DatasetSource::Synthetic(spec) => {
            let data = generate_synthetic_dataset(spec)?;
            let names = (0..data.len()).map(|i| format!("case_{i:03}")).collect();
            let (images, labels) = data.into_iter().unzip();
            Ok((names, images, labels))
        }
        DatasetSource::Dir(dir) => {
            let names = list_rvf(&dir.join("images"))?;
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for n in &names {
                let v = load_volume(&dir.join("images").join(n))?;
                let l = load_labels(&dir.join("labels").join(n))?;
                if v.dims() != l.dims() {
                    return Err(Error::Shape(format!(
                        "{n}: image {:?} vs labels {:?}",
                        v.dims(),
                        l.dims()
                    )));
                }
                images.push(v);
                labels.push(l);
            }
            Ok((names, images, labels))
        }
    }
}

/// Sorted base names of the RVF volumes in `dir`.
pub fn list_rvf(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".rvf.json").map(str::to_string))
        .collect();
    names.sort();
    Ok(names)
}

pub fn preprocess(pre: &Preprocess, image: &Volume, labels: &LabelVolume) -> Result<(Volume, LabelVolume)> {
    let mut v = clip_top_percentile(image, pre.clip_pct)?;
    if pre.standardize {
        v = standardize(&v);
    }
    let mut l = labels.clone();
    if let Some([h, w]) = pre.crop {
        v = crop_or_pad(&v, (h, w))?;
        l = crop_or_pad_labels(&l, (h, w))?;
    }
    Ok((v, l))
}

pub fn supervoxel_params(config: &ExperimentConfig, image: &Volume) -> SupervoxelParams {
    config
        .supervoxel
        .unwrap_or_else(|| SupervoxelParams::for_voxels(image.len()))
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (_, raw_images, raw_labels) = load_dataset(&config.dataset)?;
    if raw_images.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    let mut images = Vec::with_capacity(raw_images.len());
    let mut labels = Vec::with_capacity(raw_images.len());
    for (v, l) in raw_images.iter().zip(&raw_labels) {
        let (v, l) = preprocess(&config.preprocess, v, l)?;
        images.push(v);
        labels.push(l);
    }
    let params = supervoxel_params(config, &images[0]);
    let supervoxels = images
        .par_iter()
        .map(|v| generate_supervoxels(v, &params))
        .collect::<Result<Vec<_>>>()?;
    let max = labels.iter().map(LabelVolume::max_label).max().unwrap_or(0);
    Ok(Prepared {
        images,
        labels,
        supervoxels,
        classes: (1..=max).collect(),
        supervoxel_params: params,
    })
}

// ---------------------------------------------------------------------------
// Driver

/// One trained (or untrained) model of a fold and run.
#[derive(Debug, Clone)]
pub struct Arm {
    pub fold: usize,
    pub run: usize,
    pub model: Model,
    pub log: Vec<TrainRecord>,
}

impl Arm {
    pub fn stem(&self) -> String {
        arm_stem(self.fold, self.run)
    }
}

pub fn arm_stem(fold: usize, run: usize) -> String {
    format!("fold{fold}_run{run}")
}

pub fn plan(config: &ExperimentConfig, prepared: &Prepared) -> Result<SplitPlan> {
    let ids: Vec<usize> = (0..prepared.images.len()).collect();
    make_cv_splits(&ids, config.n_folds, config.runs_per_fold, config.split_seed)
}

fn arms(plan: &SplitPlan) -> Vec<(usize, usize)> {
    (0..plan.folds.len())
        .flat_map(|f| (0..plan.runs_per_fold).map(move |r| (f, r)))
        .collect()
}

/// Initializes and (when `iterations > 0`) trains one model per (fold, run).
pub fn train_arms(config: &ExperimentConfig, prepared: &Prepared, plan: &SplitPlan) -> Result<Vec<Arm>> {
    arms(plan)
        .par_iter()
        .map(|&(fold, run)| {
            let init_seed = derive_seed(config.seed, &[fold as u64, run as u64, 0]);
            let model = Model::init(&config.encoder, &config.head, init_seed)?;
            let data: Vec<TrainVolume<'_>> = plan
                .training(fold)
                .into_iter()
                .map(|id| TrainVolume {
                    id,
                    image: &prepared.images[id],
                    supervoxels: &prepared.supervoxels[id],
                })
                .collect();
            let seed = derive_seed(config.seed, &[fold as u64, run as u64, 1]);
            let (model, log) = train(&model, &data, &config.train_config(seed))?;
            Ok(Arm { fold, run, model, log })
        })
        .collect()
}

/// Scores every (query, class) of each arm's fold with the configured protocol.
pub fn evaluate_arms(
    config: &ExperimentConfig,
    prepared: &Prepared,
    plan: &SplitPlan,
    arms: &[Arm],
) -> Result<Vec<ScoredCase>> {
    let registry = protocol_registry();
    registry.create(&config.protocol)?;
    let nested = arms
        .par_iter()
        .map(|arm| {
            let protocol = registry.create(&config.protocol)?;
            let s = plan.support[arm.fold];
            let mut cases = Vec::new();
            for q in plan.queries(arm.fold) {
                let tracked = TrackedLabels::new(&prepared.labels[q]);
                let scored = score_query(
                    protocol.as_ref(),
                    &arm.model,
                    (&prepared.images[s], &prepared.labels[s]),
                    (&prepared.images[q], &tracked),
                    &prepared.classes,
                )?;
                for (class, scores, truth) in scored {
                    cases.push(ScoredCase {
                        fold: arm.fold,
                        run: arm.run,
                        class,
                        query_id: q,
                        learned_t: arm.model.head.threshold,
                        scores,
                        truth,
                    });
                }
            }
            Ok(cases)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

pub fn dice_records(protocol: &str, cases: &[ScoredCase]) -> Result<Vec<DiceRecord>> {
    cases
        .iter()
        .map(|c| {
            Ok(DiceRecord {
                protocol: protocol.to_string(),
                fold: c.fold,
                run: c.run,
                class: c.class,
                query_id: c.query_id,
                dice: c.dice_at(c.learned_t)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub plan: SplitPlan,
    pub arms: Vec<Arm>,
    pub cases: Vec<ScoredCase>,
    pub records: Vec<DiceRecord>,
    pub summary: Summary,
}

pub fn run_experiment(config: &ExperimentConfig, prepared: &Prepared) -> Result<ExperimentOutput> {
    let plan = plan(config, prepared)?;
    let arms = train_arms(config, prepared, &plan)?;
    finish(config, prepared, plan, arms)
}

fn finish(config: &ExperimentConfig, prepared: &Prepared, plan: SplitPlan, arms: Vec<Arm>) -> Result<ExperimentOutput> {
    let cases = evaluate_arms(config, prepared, &plan, &arms)?;
    let records = dice_records(&config.protocol.to_lowercase(), &cases)?;
    let summary = aggregate(&records);
    Ok(ExperimentOutput {
        plan,
        arms,
        cases,
        records,
        summary,
    })
}

/// Evaluates checkpoints written by [`write_training`] from `dir/checkpoints`.
pub fn evaluate_checkpoints(config: &ExperimentConfig, prepared: &Prepared, dir: &Path) -> Result<ExperimentOutput> {
    let plan = plan(config, prepared)?;
    let mut arms = Vec::new();
    for (fold, run) in self::arms(&plan) {
        let path = dir.join("checkpoints").join(format!("{}.ckpt", arm_stem(fold, run)));
        arms.push(Arm {
            fold,
            run,
            model: Model::load(&path)?,
            log: Vec::new(),
        });
    }
    finish(config, prepared, plan, arms)
}

// ---------------------------------------------------------------------------
// Outputs

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    write_file(&dir.join("config.json"), config.to_json())
}

/// Checkpoints and JSONL logs, one per arm.
pub fn write_training(dir: &Path, config: &ExperimentConfig, arms: &[Arm]) -> Result<()> {
    for arm in arms {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("fold".into(), Value::from(arm.fold));
        meta.insert("run".into(), Value::from(arm.run));
        meta.insert("iterations".into(), Value::from(config.iterations));
        meta.insert("seed".into(), Value::from(config.seed));
        let path = dir.join("checkpoints").join(format!("{}.ckpt", arm.stem()));
        write_file(&path, arm.model.to_checkpoint(meta).to_bytes())?;
        write_file(
            &dir.join("logs").join(format!("{}.jsonl", arm.stem())),
            log_to_jsonl(&arm.log),
        )?;
    }
    Ok(())
}

pub fn write_results(dir: &Path, output: &ExperimentOutput) -> Result<()> {
    write_file(&dir.join("results.csv"), results_csv(&output.records))?;
    write_file(&dir.join("summary.json"), summary_json(&output.summary))
}

pub fn write_curve(dir: &Path, curve: &[CurvePoint]) -> Result<()> {
    write_file(&dir.join("linesearch.csv"), curve_csv(curve))
}

pub fn line_search(output: &ExperimentOutput, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    threshold_line_search(&output.cases, grid)
}

// ---------------------------------------------------------------------------
// Sweeps

/// A config knob that a sensitivity sweep varies.
pub trait SweepParam: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, config: &mut ExperimentConfig, value: f64) -> Result<()>;
}

struct Rho;

impl SweepParam for Rho {
    fn name(&self) -> &'static str {
        "rho"
    }

    fn apply(&self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        if !(value >= 1.0 && value.fract() == 0.0) {
            return Err(Error::Invalid(format!("rho must be a positive integer, got {value}")));
        }
        let base = config.supervoxel.unwrap_or_default();
        config.supervoxel = Some(SupervoxelParams {
            rho: value as usize,
            ..base
        });
        Ok(())
    }
}

struct Kappa;

impl SweepParam for Kappa {
    fn name(&self) -> &'static str {
        "kappa"
    }

    fn apply(&self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        config.head.kappa = value;
        config.head.validate()
    }
}

pub fn sweep_registry() -> Registry<dyn SweepParam> {
    let mut r: Registry<dyn SweepParam> = Registry::new("sweep parameter");
    r.register("rho", || Box::new(Rho));
    r.register("kappa", || Box::new(Kappa));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub summary: Summary,
    /// Supervoxel parameters the arm trained on (provenance for rho sweeps).
    pub supervoxel: SupervoxelParams,
}

/// Sweep table: one row per value, per-class dice and the overall mean ± std.
pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let classes: Vec<u32> = rows
        .first()
        .map(|r| r.summary.per_class.keys().copied().collect())
        .unwrap_or_default();
    let mut out = param.to_string();
    for c in &classes {
        out.push_str(&format!(",class{c}_mean,class{c}_std"));
    }
    out.push_str(",mean,std\n");
    for r in rows {
        out.push_str(&r.value.to_string());
        for c in &classes {
            let s = r.summary.per_class.get(c);
            out.push_str(&format!(
                ",{},{}",
                s.map_or(f64::NAN, |s| s.mean),
                s.map_or(f64::NAN, |s| s.std)
            ));
        }
        out.push_str(&format!(",{},{}\n", r.summary.overall.mean, r.summary.overall.std));
    }
    out
}
