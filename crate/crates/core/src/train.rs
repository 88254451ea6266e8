//! Episodic self-supervised training on supervoxel pseudo-labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode, SamplerConfig, SupervoxelIndex, TransformSpec};
use crate::error::{Error, Result};
use crate::head::{episode_loss, LossTerms, Model};
use crate::numerics::{sgd_step, SgdConfig, SgdState, Tape, Tensor, Var};
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub sgd: SgdConfig,
    pub sampler: SamplerConfig,
    pub transform: TransformSpec,
    pub loss_terms: LossTerms,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            sgd: SgdConfig::default(),
            sampler: SamplerConfig::default(),
            transform: TransformSpec::default(),
            loss_terms: LossTerms::default(),
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iteration: u64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_T")]
    pub l_t: f64,
    #[serde(rename = "L_PAR")]
    pub l_par: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub lr: f64,
    pub loss: f64,
    pub par_skipped: bool,
    pub volume: usize,
    pub supervoxel: u32,
    pub support_z: usize,
    pub query_z: usize,
}

/// A training volume with its precomputed supervoxels.
#[derive(Debug, Clone, Copy)]
pub struct TrainVolume<'a> {
    pub id: usize,
    pub image: &'a Volume,
    pub supervoxels: &'a LabelVolume,
}

/// Runs `config.iterations` SGD steps on {encoder, T}; returns the trained
/// model and the per-iteration log.
pub fn train(model: &Model, data: &[TrainVolume<'_>], config: &TrainConfig) -> Result<(Model, Vec<TrainRecord>)> {
    config.sgd.validate()?;
    config.sampler.validate()?;
    config.transform.validate()?;
    let mut model = model.clone();
    if config.iterations == 0 {
        return Ok((model, Vec::new()));
    }
    let indexed: Vec<(TrainVolume<'_>, SupervoxelIndex)> = data
        .iter()
        .map(|v| (*v, SupervoxelIndex::new(v.supervoxels, config.sampler.min_pixels)))
        .filter(|(_, idx)| !idx.is_empty())
        .collect();
    if indexed.is_empty() {
        return Err(Error::Sampling(format!(
            "none of {} training volumes has a supervoxel with two slices of >= {} pixels",
            data.len(),
            config.sampler.min_pixels
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: Vec<Tensor<f32>> = model.params.tensors.clone();
    params.push(Tensor::scalar(model.head.threshold));
    let mut state = SgdState::new(&params);
    let mut log = Vec::with_capacity(config.iterations as usize);

    for it in 0..config.iterations {
        let (tv, index) = &indexed[rng.random_range(0..indexed.len())];
        let episode = sample_episode(
            tv.id,
            tv.image,
            tv.supervoxels,
            index,
            &config.sampler,
            &config.transform,
            &mut rng,
        )?;
        let mut tape: Tape<f32> = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect::<Result<_>>()?;
        let (enc, t) = vars.split_at(vars.len() - 1);
        let graph = episode_loss(
            &mut tape,
            &model.encoder,
            enc,
            t[0],
            model.head.alpha,
            model.head.kappa,
            &episode,
            config.loss_terms,
        )?;
        tape.backward(graph.loss)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(&params)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        sgd_step(&mut params, &grads, &mut state, &config.sgd, it)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("sgd_step"));
        }
        let b = graph.breakdown;
        let p = episode.provenance;
        log.push(TrainRecord {
            iteration: it,
            l_s: b.l_s,
            l_t: b.l_t,
            l_par: b.l_par,
            t: b.t,
            lr: config.sgd.lr_at(it),
            loss: b.total,
            par_skipped: b.par_skipped,
            volume: p.volume,
            supervoxel: p.supervoxel,
            support_z: p.support_z,
            query_z: p.query_z,
        });
    }

    model.head.threshold = params.pop().expect("threshold").item();
    model.params.tensors = params;
    Ok((model, log))
}

/// Line-delimited JSON, one record per iteration.
pub fn log_to_jsonl(log: &[TrainRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
