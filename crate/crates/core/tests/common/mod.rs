//! Shared oracles for the integration tests and the acceptance target.

#![allow(dead_code)]

use adnet::encoder::{init_encoder, EncoderConfig};
use adnet::episodes::{Episode, Provenance};
use adnet::head::{episode_loss, LossTerms};
use adnet::numerics::{grad_check, GradReport, Tape, Tensor, Var};
use adnet::supervoxel::SupervoxelParams;
use adnet::volume::{LabelVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Quadratic reference of the supervoxel engine: explicit pair enumeration,
/// a comparison sort, and relabel-everything merges.
pub fn brute_supervoxels(volume: &Volume, params: &SupervoxelParams) -> Vec<u32> {
    let [d, h, w] = volume.dims();
    let sp = volume.spacing();
    let data = volume.data();
    let n = d * h * w;
    let coord = |i: usize| (i / (h * w), (i / w) % h, i % w);
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (za, ya, xa) = coord(a);
            let (zb, yb, xb) = coord(b);
            let (dz, dy, dx) = (za.abs_diff(zb), ya.abs_diff(yb), xa.abs_diff(xb));
            if dz.max(dy).max(dx) != 1 {
                continue;
            }
            let factor = if dz == 0 {
                1.0
            } else {
                let c = |k: usize, s: f64| (k as f64 * s).powi(2);
                let full = (c(dz, sp[0]) + c(dy, sp[1]) + c(dx, sp[2])).sqrt();
                let planar = (c(dy, sp[1]) + c(dx, sp[2])).sqrt();
                if planar > 0.0 {
                    full / planar
                } else {
                    full / sp[1].min(sp[2])
                }
            };
            edges.push(((data[a] - data[b]).abs() as f64 * factor, a, b));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut comp: Vec<usize> = (0..n).collect();
    let mut internal = vec![0.0f64; n];
    let size = |comp: &[usize], c: usize| comp.iter().filter(|&&x| x == c).count();
    let merge = |comp: &mut Vec<usize>, internal: &mut Vec<f64>, keep: usize, gone: usize, weight: f64| {
        for x in comp.iter_mut() {
            if *x == gone {
                *x = keep;
            }
        }
        internal[keep] = weight;
    };
    for &(wt, a, b) in &edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca == cb {
            continue;
        }
        let ta = internal[ca] + params.scale_k / size(&comp, ca) as f64;
        let tb = internal[cb] + params.scale_k / size(&comp, cb) as f64;
        if wt <= ta.min(tb) {
            merge(&mut comp, &mut internal, ca, cb, wt);
        }
    }
    if params.rho > 1 {
        for &(wt, a, b) in &edges {
            let (ca, cb) = (comp[a], comp[b]);
            if ca != cb && (size(&comp, ca) < params.rho || size(&comp, cb) < params.rho) {
                let weight = internal[ca].max(internal[cb]).max(wt);
                merge(&mut comp, &mut internal, ca, cb, weight);
            }
        }
    }
    let mut map = std::collections::HashMap::new();
    comp.iter()
        .map(|c| {
            let next = map.len() as u32 + 1;
            *map.entry(*c).or_insert(next)
        })
        .collect()
}

/// Number of 26-connected regions of equal label, found in one flood-fill pass.
pub fn same_label_regions(labels: &LabelVolume) -> usize {
    let [d, h, w] = labels.dims();
    let lab = labels.labels();
    let mut seen = vec![false; lab.len()];
    let mut regions = 0;
    let mut stack = Vec::new();
    for start in 0..lab.len() {
        if seen[start] {
            continue;
        }
        regions += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (z, y, x) = ((p / (h * w)) as isize, ((p / w) % h) as isize, (p % w) as isize);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let q = (nz as usize * h + ny as usize) * w + nx as usize;
                        if !seen[q] && lab[q] == lab[p] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
    }
    regions
}

/// Supervoxel invariants: dense labels 1..=L, one connected region per
/// label, and every supervoxel at least `min(rho, N)` voxels.
pub fn supervoxel_invariants(labels: &LabelVolume, rho: usize) -> Result<usize, String> {
    let lab = labels.labels();
    let l = labels.max_label() as usize;
    let mut sizes = vec![0usize; l + 1];
    for &x in lab {
        if x == 0 || x as usize > l {
            return Err(format!("label {x} outside 1..={l}"));
        }
        sizes[x as usize] += 1;
    }
    if let Some(k) = (1..=l).find(|&k| sizes[k] == 0) {
        return Err(format!("label {k} unused"));
    }
    let regions = same_label_regions(labels);
    if regions != l {
        return Err(format!("{regions} connected regions for {l} labels"));
    }
    let floor = rho.min(lab.len());
    if let Some(k) = (1..=l).find(|&k| sizes[k] < floor) {
        return Err(format!("supervoxel {k} has {} < {floor} voxels", sizes[k]));
    }
    Ok(l)
}

/// Dice by explicit set operations on foreground index sets.
pub fn set_dice(a: &[u8], b: &[u8]) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<usize> = (0..a.len()).filter(|&i| a[i] == 1).collect();
    let sb: BTreeSet<usize> = (0..b.len()).filter(|&i| b[i] == 1).collect();
    if sa.is_empty() && sb.is_empty() {
        return 100.0;
    }
    200.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn block_mask(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<u8> {
    (0..h * w)
        .map(|i| u8::from((y0..y0 + side).contains(&(i / w)) && (x0..x0 + side).contains(&(i % w))))
        .collect()
}

/// A random `size` x `size` episode with square foreground blocks.
pub fn random_episode(seed: u64, size: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let side = size / 2;
    let mut image =
        |mask: &[u8]| -> Vec<f32> { mask.iter().map(|&m| m as f32 + rng.random_range(-0.5..0.5)).collect() };
    let support_mask = block_mask(size, size, 1, 1, side);
    let query_mask = block_mask(size, size, size - side - 1, 2, side);
    let support_image = image(&support_mask);
    let query_image = image(&query_mask);
    assert_eq!(support_image.len(), n);
    Episode {
        height: size,
        width: size,
        support_image,
        support_mask,
        query_image,
        query_mask,
        provenance: Provenance {
            volume: 0,
            supervoxel: 1,
            support_z: 0,
            query_z: 1,
        },
    }
}

/// Finite-difference check of the full episode loss (all terms) over every
/// encoder parameter and T in f64. Encoder biases are randomized so their
/// gradients are exercised away from zero, and T is placed in the widest gap
/// of the query scores so the constant PAR mask cannot flip under the probe.
pub fn full_loss_grad_check(seed: u64, step: f64) -> GradReport {
    let encoder = EncoderConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params: Vec<Tensor<f64>> = init_encoder(&encoder, seed)
        .expect("init")
        .tensors
        .iter()
        .map(|t| t.cast::<f64>())
        .collect();
    for (p, (name, _)) in params.iter_mut().zip(encoder.layout()) {
        if name.ends_with("bias") {
            p.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
    }
    let episode = random_episode(seed, 8);
    let (alpha, kappa) = (20.0, 0.5);

    let mut tape: Tape<f64> = Tape::new();
    let enc: Vec<Var> = params.iter().map(|p| tape.constant(p.clone()).unwrap()).collect();
    let t0 = tape.constant(Tensor::scalar(-10.0)).unwrap();
    let terms = LossTerms {
        threshold: true,
        par: false,
    };
    let g = episode_loss(&mut tape, &encoder, &enc, t0, alpha, kappa, &episode, terms).unwrap();
    let mut scores: Vec<f64> = tape.value(g.query_scores).data().to_vec();
    scores.sort_by(f64::total_cmp);
    let lower = &scores[..scores.len() / 2];
    let (gap, i) = lower
        .windows(2)
        .enumerate()
        .map(|(i, w)| (w[1] - w[0], i))
        .fold((f64::MIN, 0), |best, x| if x.0 > best.0 { x } else { best });
    assert!(gap > 1e-2, "no usable score gap");
    let t = 0.5 * (lower[i] + lower[i + 1]);

    let mut inputs = params;
    inputs.push(Tensor::scalar(t));
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let (enc, t) = v.split_at(v.len() - 1);
        let g = episode_loss(tape, &encoder, enc, t[0], alpha, kappa, &episode, LossTerms::default())?;
        assert!(!g.breakdown.par_skipped);
        Ok(g.loss)
    };
    grad_check(f, &inputs, step).expect("grad check")
}
