//! Anomaly-scoring segmentation head with a learned threshold.
//!
//! A single foreground prototype is pooled from the support features; every
//! query position is scored `S = -alpha * cos(F, p)` and turned into a
//! foreground probability `1 - sigmoid(kappa * (S - T))`. Scores are upsampled
//! to image size before thresholding, so the hard decision `S < T` and the
//! probability always agree on the same grid.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{encode, init_encoder, EncoderConfig, EncoderParams};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Scalar, Tape, Tensor, Var};

pub const W_FG: f64 = 1.0;
pub const W_BG: f64 = 0.1;
pub const THRESHOLD_NAME: &str = "head.threshold";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub alpha: f64,
    pub kappa: f64,
    /// Initial threshold; `-alpha / 2` when absent.
    pub t_init: Option<f64>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            alpha: 20.0,
            kappa: 0.5,
            t_init: None,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Invalid(format!(
                "alpha and kappa must be > 0, got {} and {}",
                self.alpha, self.kappa
            )));
        }
        if self.t_init.is_some_and(|t| !t.is_finite()) {
            return Err(Error::Invalid("t_init must be finite".into()));
        }
        Ok(())
    }

    pub fn initial_threshold(&self) -> f64 {
        self.t_init.unwrap_or(-self.alpha / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyHead {
    pub threshold: f32,
    pub alpha: f64,
    pub kappa: f64,
}

impl AnomalyHead {
    pub fn new(config: &HeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(AnomalyHead {
            threshold: config.initial_threshold() as f32,
            alpha: config.alpha,
            kappa: config.kappa,
        })
    }
}

// ---------------------------------------------------------------------------
// Differentiable building blocks

/// Mean feature over masked positions of `features` [d, H, W].
pub fn masked_average_pool<F: Scalar>(tape: &mut Tape<F>, features: Var, mask: &[u8]) -> Result<Var> {
    masked_average_pool_multi(tape, &[(features, mask)])
}

/// One prototype from several (features, mask) pairs: the sum of all masked
/// features over the total mask count.
pub fn masked_average_pool_multi<F: Scalar>(tape: &mut Tape<F>, items: &[(Var, &[u8])]) -> Result<Var> {
    let mut total = None;
    let mut count = 0usize;
    for &(features, mask) in items {
        count += mask.iter().filter(|&&m| m != 0).count();
        let s = tape.masked_sum(features, mask)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.ok_or(Error::EmptyMask("no support pairs"))?;
    if count == 0 {
        return Err(Error::EmptyMask("prototype mask"));
    }
    tape.scale(total, 1.0 / count as f64)
}

/// `S = -alpha * cos(F, p)` over `features` [d, h, w].
pub fn anomaly_scores<F: Scalar>(tape: &mut Tape<F>, features: Var, prototype: Var, alpha: f64) -> Result<Var> {
    let cos = tape.cosine_similarity_map(features, prototype)?;
    tape.scale(cos, -alpha)
}

/// Foreground probability `1 - sigmoid(kappa * (S - T))`, computed as
/// `sigmoid(kappa * (T - S))`.
pub fn soft_threshold<F: Scalar>(tape: &mut Tape<F>, scores: Var, threshold: Var, kappa: f64) -> Result<Var> {
    let shifted = tape.sub_scalar(scores, threshold)?;
    let flipped = tape.scale(shifted, -1.0)?;
    tape.sigmoid_kappa(flipped, kappa)
}

pub fn segmentation_loss<F: Scalar>(tape: &mut Tape<F>, pred_fg: Var, target: &[u8]) -> Result<Var> {
    tape.weighted_bce(pred_fg, target, W_FG, W_BG)
}

/// `T / alpha`.
pub fn threshold_loss<F: Scalar>(tape: &mut Tape<F>, threshold: Var, alpha: f64) -> Result<Var> {
    tape.scale(threshold, 1.0 / alpha)
}

/// Hard decision on a score map: foreground where `S < T`, ties background.
pub fn decide(scores: &[f32], threshold: f32) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s < threshold)).collect()
}

/// Scores of `query` features [d, h, w] against `prototype`, upsampled to `size`.
pub fn upsampled_scores<F: Scalar>(
    tape: &mut Tape<F>,
    query_features: Var,
    prototype: Var,
    alpha: f64,
    size: (usize, usize),
) -> Result<Var> {
    let s = anomaly_scores(tape, query_features, prototype, alpha)?;
    let [h, w] = [tape.shape(s)[0], tape.shape(s)[1]];
    let s3 = tape.reshape(s, &[1, h, w])?;
    let up = tape.bilinear_resize(s3, size)?;
    tape.reshape(up, &[size.0, size.1])
}

/// Which optional terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub threshold: bool,
    pub par: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            threshold: true,
            par: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_par: f64,
    /// Set when the predicted query foreground was empty and PAR was skipped.
    pub par_skipped: bool,
    pub t: f64,
}

/// Variables of one forward pass.
pub struct EpisodeGraph {
    pub loss: Var,
    pub l_s: Var,
    pub l_t: Option<Var>,
    pub l_par: Option<Var>,
    pub query_scores: Var,
    pub query_prob: Var,
    pub breakdown: LossBreakdown,
}

fn image_var<F: Scalar>(tape: &mut Tape<F>, data: &[f32], h: usize, w: usize) -> Result<Var> {
    tape.constant(Tensor::from_f32(&[1, 1, h, w], data)?)
}

fn resize_features<F: Scalar>(tape: &mut Tape<F>, f: Var, size: (usize, usize)) -> Result<Var> {
    if tape.shape(f)[1..] == [size.0, size.1] {
        return Ok(f);
    }
    tape.bilinear_resize(f, size)
}

/// Records the full episode loss `L_S (+ L_T) (+ L_PAR)` on `tape`.
///
/// `enc` are the encoder parameter variables in layout order and `t` the
/// threshold variable; either may be parameters or constants.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss<F: Scalar>(
    tape: &mut Tape<F>,
    encoder: &EncoderConfig,
    enc: &[Var],
    t: Var,
    alpha: f64,
    kappa: f64,
    episode: &Episode,
    terms: LossTerms,
) -> Result<EpisodeGraph> {
    episode.validate()?;
    let (h, w) = (episode.height, episode.width);
    let xs = image_var(tape, &episode.support_image, h, w)?;
    let xq = image_var(tape, &episode.query_image, h, w)?;
    let fs = encode(tape, encoder, enc, xs)?;
    let fq = encode(tape, encoder, enc, xq)?;

    let fs_up = resize_features(tape, fs, (h, w))?;
    let p = masked_average_pool(tape, fs_up, &episode.support_mask)?;
    let sq = upsampled_scores(tape, fq, p, alpha, (h, w))?;
    let prob_q = soft_threshold(tape, sq, t, kappa)?;
    let l_s = segmentation_loss(tape, prob_q, &episode.query_mask)?;
    let mut loss = l_s;

    let t_value = tape.value(t).item().as_f64();
    let mut l_t = None;
    if terms.threshold {
        let v = threshold_loss(tape, t, alpha)?;
        loss = tape.add(loss, v)?;
        l_t = Some(v);
    }

    let mut l_par = None;
    let mut par_skipped = false;
    if terms.par {
        let tv = tape.value(t).item();
        let predicted: Vec<u8> = tape.value(sq).data().iter().map(|&s| u8::from(s < tv)).collect();
        if predicted.contains(&1) {
            let fq_up = resize_features(tape, fq, (h, w))?;
            let pq = masked_average_pool(tape, fq_up, &predicted)?;
            let ss = upsampled_scores(tape, fs, pq, alpha, (h, w))?;
            let prob_s = soft_threshold(tape, ss, t, kappa)?;
            let v = segmentation_loss(tape, prob_s, &episode.support_mask)?;
            loss = tape.add(loss, v)?;
            l_par = Some(v);
        } else {
            par_skipped = true;
        }
    }

    let item = |tape: &Tape<F>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let breakdown = LossBreakdown {
        total: tape.value(loss).item().as_f64(),
        l_s: tape.value(l_s).item().as_f64(),
        l_t: item(tape, l_t),
        l_par: item(tape, l_par),
        par_skipped,
        t: t_value,
    };
    Ok(EpisodeGraph {
        loss,
        l_s,
        l_t,
        l_par,
        query_scores: sq,
        query_prob: prob_q,
        breakdown,
    })
}

// ---------------------------------------------------------------------------
// Model

/// Encoder parameters plus head: the full trainable set {theta, T}.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub params: EncoderParams,
    pub head: AnomalyHead,
}

impl Model {
    pub fn init(encoder: &EncoderConfig, head: &HeadConfig, seed: u64) -> Result<Self> {
        Ok(Model {
            encoder: encoder.clone(),
            params: init_encoder(encoder, seed)?,
            head: AnomalyHead::new(head)?,
        })
    }

    pub fn with_threshold(&self, t: f32) -> Model {
        let mut m = self.clone();
        m.head.threshold = t;
        m
    }

    pub fn to_checkpoint(&self, extra: BTreeMap<String, Value>) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .params
            .names
            .iter()
            .cloned()
            .zip(self.params.tensors.iter().cloned())
            .collect();
        tensors.push((THRESHOLD_NAME.into(), Tensor::scalar(self.head.threshold)));
        let mut meta = extra;
        meta.insert(
            "encoder".into(),
            serde_json::to_value(&self.encoder).expect("config serializes"),
        );
        meta.insert("alpha".into(), Value::from(self.head.alpha));
        meta.insert("kappa".into(), Value::from(self.head.kappa));
        Checkpoint { tensors, meta }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{k}`")))
        };
        let encoder: EncoderConfig =
            serde_json::from_value(field("encoder")?.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let num = |k: &str| {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::Config(format!("`{k}` is not a number")))
        };
        let head = AnomalyHead {
            threshold: ck
                .get(THRESHOLD_NAME)
                .ok_or_else(|| Error::Config("checkpoint lacks the threshold".into()))?
                .item(),
            alpha: num("alpha")?,
            kappa: num("kappa")?,
        };
        let layout = encoder.layout();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, _) in layout {
            let t = ck
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            names.push(name);
            tensors.push(t.clone());
        }
        let params = EncoderParams { names, tensors };
        params.check(&encoder)?;
        Ok(Model { encoder, params, head })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Puts the encoder tensors on `tape` as constants.
    fn constants<F: Scalar>(&self, tape: &mut Tape<F>) -> Result<Vec<Var>> {
        self.params.tensors.iter().map(|t| tape.constant(t.cast())).collect()
    }
}

/// Per-slice inference output at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction {
    pub mask: Vec<u8>,
    pub prob: Vec<f64>,
    pub scores: Vec<f32>,
}

/// A support set pooled into one prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype(pub Vec<f32>);

/// Multi-slice masked average pooling over `(image, mask)` support pairs.
pub fn support_prototype(
    model: &Model,
    supports: &[(&[f32], &[u8])],
    height: usize,
    width: usize,
) -> Result<Prototype> {
    if supports.is_empty() {
        return Err(Error::EmptyMask("no support pairs"));
    }
    let mut tape: Tape<f32> = Tape::new();
    let enc = model.constants(&mut tape)?;
    let mut items = Vec::with_capacity(supports.len());
    for (img, mask) in supports {
        if !mask.contains(&1) {
            return Err(Error::EmptyMask("support"));
        }
        let x = image_var(&mut tape, img, height, width)?;
        let f = encode(&mut tape, &model.encoder, &enc, x)?;
        items.push((resize_features(&mut tape, f, (height, width))?, *mask));
    }
    let p = masked_average_pool_multi(&mut tape, &items)?;
    Ok(Prototype(tape.value(p).data().to_vec()))
}

/// Upsampled anomaly scores of one query slice.
pub fn score_slice(
    model: &Model,
    prototype: &Prototype,
    query: &[f32],
    height: usize,
    width: usize,
) -> Result<Vec<f32>> {
    let mut tape: Tape<f32> = Tape::new();
    let enc = model.constants(&mut tape)?;
    let x = image_var(&mut tape, query, height, width)?;
    let f = encode(&mut tape, &model.encoder, &enc, x)?;
    let p = tape.constant(Tensor::new(&[prototype.0.len()], prototype.0.clone())?)?;
    let s = upsampled_scores(&mut tape, f, p, model.head.alpha, (height, width))?;
    Ok(tape.value(s).data().to_vec())
}

/// Probability map for given scores under a threshold. Kept in f64 so that
/// `p > 0.5` agrees with `S < T` for every pair of distinct f32 values.
pub fn probabilities(scores: &[f32], threshold: f32, kappa: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| crate::numerics::tape::logistic(kappa * (threshold as f64 - s as f64)))
        .collect()
}

/// Segments one query slice from one or more labelled support slices.
pub fn infer_slice(
    model: &Model,
    supports: &[(&[f32], &[u8])],
    query: &[f32],
    height: usize,
    width: usize,
) -> Result<SlicePrediction> {
    let proto = support_prototype(model, supports, height, width)?;
    let scores = score_slice(model, &proto, query, height, width)?;
    Ok(SlicePrediction {
        mask: decide(&scores, model.head.threshold),
        prob: probabilities(&scores, model.head.threshold, model.head.kappa),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_defaults() {
        let h = AnomalyHead::new(&HeadConfig::default()).unwrap();
        assert_eq!(h.threshold, -10.0);
        assert_eq!((h.alpha, h.kappa), (20.0, 0.5));
        assert!(HeadConfig {
            kappa: 0.0,
            ..HeadConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ties_are_background() {
        assert_eq!(decide(&[-11.0, -10.0, -9.0], -10.0), vec![1, 0, 0]);
        let p = probabilities(&[-10.0], -10.0, 0.5);
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(&EncoderConfig::tiny(), &HeadConfig::default(), 3).unwrap();
        let ck = m.to_checkpoint(BTreeMap::new());
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes(), Path::new("m")).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
