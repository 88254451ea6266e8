//! Dice, cross-validation plans, the two inference protocols, threshold
//! line search and result tables.
//!
//! Protocols produce an upsampled anomaly-score volume; slices a protocol
//! does not segment hold `+inf`, so they are background under every
//! threshold. Any threshold can then be applied without re-running the
//! encoder, which is what the line search relies on.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::{score_slice, support_prototype, Model};
use crate::registry::Registry;
use crate::volume::{LabelVolume, Volume};

/// `2|A∩B| / (|A|+|B|) * 100`; two empty masks score 100.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("dice: {} vs {} voxels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += u64::from(x && y);
        na += u64::from(x);
        nb += u64::from(y);
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (na + nb) as f64)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitPlan {
    /// Patient ids per fold.
    pub folds: Vec<Vec<usize>>,
    /// Support patient of each fold (its first member).
    pub support: Vec<usize>,
    pub runs_per_fold: usize,
}

impl SplitPlan {
    pub fn fold_of(&self, patient: usize) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&patient))
    }

    /// Fold members other than the support patient.
    pub fn queries(&self, fold: usize) -> Vec<usize> {
        self.folds[fold]
            .iter()
            .copied()
            .filter(|&p| p != self.support[fold])
            .collect()
    }

    /// Every patient outside `fold`, in id order.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, ps)| ps.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Seeded shuffle, then contiguous folds (earlier folds take the remainder).
pub fn make_cv_splits(patients: &[usize], n_folds: usize, runs_per_fold: usize, seed: u64) -> Result<SplitPlan> {
    if n_folds == 0 || patients.len() < n_folds {
        return Err(Error::Invalid(format!(
            "{} patients cannot fill {n_folds} folds",
            patients.len()
        )));
    }
    if runs_per_fold == 0 {
        return Err(Error::Invalid("runs_per_fold must be >= 1".into()));
    }
    let mut order = patients.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / n_folds, order.len() % n_folds);
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0;
    for f in 0..n_folds {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    let support = folds.iter().map(|f| f[0]).collect();
    Ok(SplitPlan {
        folds,
        support,
        runs_per_fold,
    })
}

// ---------------------------------------------------------------------------
// Query label access tracking

/// What a protocol may learn about the query's labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Access {
    /// Slice range of a class (weak label).
    ClassRange,
    /// Full voxel mask (ground truth).
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Inference,
    Scoring,
}

/// Query labels behind a read log, so a run can prove which phase touched them.
pub struct TrackedLabels<'a> {
    labels: &'a LabelVolume,
    phase: RefCell<Phase>,
    reads: RefCell<Vec<(Phase, Access)>>,
}

impl<'a> TrackedLabels<'a> {
    pub fn new(labels: &'a LabelVolume) -> Self {
        TrackedLabels {
            labels,
            phase: RefCell::new(Phase::Inference),
            reads: RefCell::new(Vec::new()),
        }
    }

    pub fn set_phase(&self, phase: Phase) {
        *self.phase.borrow_mut() = phase;
    }

    fn note(&self, access: Access) {
        let phase = *self.phase.borrow();
        self.reads.borrow_mut().push((phase, access));
    }

    pub fn class_range(&self, class: u32) -> Option<(usize, usize)> {
        self.note(Access::ClassRange);
        self.labels.slice_range(class)
    }

    pub fn mask(&self, class: u32) -> Vec<u8> {
        self.note(Access::Mask);
        self.labels.labels().iter().map(|&l| u8::from(l == class)).collect()
    }

    pub fn reads(&self) -> Vec<(Phase, Access)> {
        self.reads.borrow().clone()
    }
}

// ---------------------------------------------------------------------------
// Protocols

/// Score volume for one (query, class) pair plus the support slices used.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    pub scores: Vec<f32>,
    pub support_slices: Vec<usize>,
}

impl ScoreVolume {
    pub fn mask(&self, threshold: f32) -> Vec<u8> {
        crate::head::decide(&self.scores, threshold)
    }
}

pub trait Protocol: Send + Sync {
    fn name(&self) -> &'static str;

    fn score(
        &self,
        model: &Model,
        support: (&Volume, &LabelVolume),
        query: (&Volume, &TrackedLabels<'_>),
        class: u32,
    ) -> Result<ScoreVolume>;
}

pub fn protocol_registry() -> Registry<dyn Protocol> {
    let mut r: Registry<dyn Protocol> = Registry::new("protocol");
    r.register("ep1", || Box::new(Ep1));
    r.register("ep2", || Box::new(Ep2));
    r
}

fn support_slice(volume: &Volume, labels: &LabelVolume, z: usize, class: u32) -> (Vec<f32>, Vec<u8>) {
    (volume.slice(z).to_vec(), labels.slice_mask(z, class))
}

fn score_slices(
    model: &Model,
    support: (&Volume, &LabelVolume),
    support_z: usize,
    class: u32,
    query: &Volume,
    slices: impl Iterator<Item = usize>,
    out: &mut [f32],
) -> Result<()> {
    let [_, h, w] = query.dims();
    let (img, mask) = support_slice(support.0, support.1, support_z, class);
    let proto = support_prototype(model, &[(&img, &mask)], h, w)?;
    for z in slices {
        let s = score_slice(model, &proto, query.slice(z), h, w)?;
        out[z * h * w..(z + 1) * h * w].copy_from_slice(&s);
    }
    Ok(())
}

fn check_pair(support: &Volume, query: &Volume) -> Result<()> {
    let (s, q) = (support.dims(), query.dims());
    if s[1..] != q[1..] {
        return Err(Error::Shape(format!("support slices {s:?} vs query slices {q:?}")));
    }
    Ok(())
}

/// Splits `[first, last]` into three contiguous chunks, remainder to the
/// earlier chunks; empty chunks are possible for ranges shorter than 3.
pub fn sub_chunks(first: usize, last: usize) -> [(usize, usize); 3] {
    let len = last + 1 - first;
    let (base, extra) = (len / 3, len % 3);
    let mut out = [(0, 0); 3];
    let mut start = first;
    for (i, c) in out.iter_mut().enumerate() {
        let n = base + usize::from(i < extra);
        *c = (start, n);
        start += n;
    }
    out
}

/// Three support slices, one per sub-chunk of the class range; needs the
/// query's class range (weak label).
pub struct Ep1;

impl Protocol for Ep1 {
    fn name(&self) -> &'static str {
        "ep1"
    }

    fn score(
        &self,
        model: &Model,
        support: (&Volume, &LabelVolume),
        query: (&Volume, &TrackedLabels<'_>),
        class: u32,
    ) -> Result<ScoreVolume> {
        check_pair(support.0, query.0)?;
        let (sa, sb) = support
            .1
            .slice_range(class)
            .ok_or_else(|| Error::Invalid(format!("class {class} absent from support volume")))?;
        let (qa, qb) = query
            .1
            .class_range(class)
            .ok_or_else(|| Error::Invalid(format!("class {class} absent from query volume")))?;
        let mut scores = vec![f32::INFINITY; query.0.len()];
        let s_chunks = sub_chunks(sa, sb);
        let q_chunks = sub_chunks(qa, qb);
        let mut used = Vec::new();
        for (i, &(qs, qn)) in q_chunks.iter().enumerate() {
            if qn == 0 {
                continue;
            }
            // a short support range may leave this chunk empty; fall back to the nearest earlier one
            let (ss, sn) = s_chunks[..=i]
                .iter()
                .rev()
                .find(|c| c.1 > 0)
                .copied()
                .expect("first chunk nonempty");
            let z = ss + sn / 2;
            used.push(z);
            score_slices(model, support, z, class, query.0, qs..qs + qn, &mut scores)?;
        }
        Ok(ScoreVolume {
            scores,
            support_slices: used,
        })
    }
}

/// One support slice (middle of the class range) segments the whole query.
pub struct Ep2;

impl Protocol for Ep2 {
    fn name(&self) -> &'static str {
        "ep2"
    }

    fn score(
        &self,
        model: &Model,
        support: (&Volume, &LabelVolume),
        query: (&Volume, &TrackedLabels<'_>),
        class: u32,
    ) -> Result<ScoreVolume> {
        check_pair(support.0, query.0)?;
        let (a, b) = support
            .1
            .slice_range(class)
            .ok_or_else(|| Error::Invalid(format!("class {class} absent from support volume")))?;
        let z = (a + b) / 2;
        let mut scores = vec![f32::INFINITY; query.0.len()];
        score_slices(model, support, z, class, query.0, 0..query.0.dims()[0], &mut scores)?;
        Ok(ScoreVolume {
            scores,
            support_slices: vec![z],
        })
    }
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiceRecord {
    pub protocol: String,
    pub fold: usize,
    pub run: usize,
    pub class: u32,
    pub query_id: usize,
    pub dice: f64,
}

/// A scored (query, class) pair whose score volume can be re-thresholded.
#[derive(Debug, Clone)]
pub struct ScoredCase {
    pub fold: usize,
    pub run: usize,
    pub class: u32,
    pub query_id: usize,
    pub learned_t: f32,
    pub scores: ScoreVolume,
    pub truth: Vec<u8>,
}

impl ScoredCase {
    pub fn dice_at(&self, threshold: f32) -> Result<f64> {
        dice(&self.scores.mask(threshold), &self.truth)
    }
}

/// Scores every class of one query against the support volume. Query labels
/// are read only after all inference for the query is done.
pub fn score_query(
    protocol: &dyn Protocol,
    model: &Model,
    support: (&Volume, &LabelVolume),
    query: (&Volume, &TrackedLabels<'_>),
    classes: &[u32],
) -> Result<Vec<(u32, ScoreVolume, Vec<u8>)>> {
    query.1.set_phase(Phase::Inference);
    let scored = classes
        .iter()
        .map(|&c| protocol.score(model, support, query, c).map(|s| (c, s)))
        .collect::<Result<Vec<_>>>()?;
    query.1.set_phase(Phase::Scoring);
    Ok(scored
        .into_iter()
        .map(|(c, s)| {
            let truth = query.1.mask(c);
            (c, s, truth)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation.
pub fn stats(values: &[f64]) -> Stats {
    if values.is_empty() {
        return Stats {
            mean: f64::NAN,
            std: f64::NAN,
            n: 0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stats {
        mean,
        std: var.sqrt(),
        n: values.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub per_class: BTreeMap<u32, Stats>,
    pub overall: Stats,
}

pub fn aggregate(records: &[DiceRecord]) -> Summary {
    let mut by_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class).or_default().push(r.dice);
    }
    let all: Vec<f64> = records.iter().map(|r| r.dice).collect();
    Summary {
        per_class: by_class.iter().map(|(&c, v)| (c, stats(v))).collect(),
        overall: stats(&all),
    }
}

pub fn results_csv(records: &[DiceRecord]) -> String {
    let mut out = String::from("protocol,fold,run,class,query_id,dice\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.protocol, r.fold, r.run, r.class, r.query_id, r.dice
        ));
    }
    out
}

pub fn summary_json(summary: &Summary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes") + "\n"
}

// ---------------------------------------------------------------------------
// Threshold line search

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
}

/// Inclusive grid `start, start + step, ...` up to `end` (within step/1e6).
pub fn threshold_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(end >= start) || !start.is_finite() || !end.is_finite() {
        return Err(Error::Invalid(format!(
            "empty threshold range [{start}, {end}] step {step}"
        )));
    }
    let n = ((end - start) / step + 1e-6).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Mean/std dice over all cases at each grid threshold.
pub fn threshold_line_search(cases: &[ScoredCase], grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if grid.is_empty() || cases.is_empty() {
        return Err(Error::Invalid(
            "line search needs a nonempty grid and evaluation set".into(),
        ));
    }
    grid.iter()
        .map(|&t| {
            let d = cases.iter().map(|c| c.dice_at(t as f32)).collect::<Result<Vec<_>>>()?;
            let s = stats(&d);
            Ok(CurvePoint {
                threshold: t,
                mean: s.mean,
                std: s.std,
            })
        })
        .collect()
}

/// Mean dice of every case at its own learned threshold.
pub fn learned_threshold_dice(cases: &[ScoredCase]) -> Result<Stats> {
    let d = cases
        .iter()
        .map(|c| c.dice_at(c.learned_t))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats(&d))
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,mean_dice,std_dice\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.mean, p.std));
    }
    out
}
