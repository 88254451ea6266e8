//! 3D graph-based supervoxels.
//!
//! Voxels are graph nodes joined to their 26 neighbours. Edge weight is the
//! absolute intensity difference, scaled for edges that cross slices by the
//! ratio of the physical offset length to its in-plane part, so that thick
//! slices resist merging. Components are merged greedily in edge order with
//! the Felzenszwalb–Huttenlocher predicate, then a second pass absorbs every
//! component smaller than `rho`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Smaller linear voxel index.
    pub a: u32,
    /// Larger linear voxel index.
    pub b: u32,
    pub weight: f64,
}

impl Edge {
    /// Weight order with lexicographic endpoint tie-break.
    pub fn order(&self, other: &Edge) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervoxelParams {
    pub rho: usize,
    pub scale_k: f64,
    #[serde(default)]
    pub presmooth_sigma: f64,
}

impl Default for SupervoxelParams {
    fn default() -> Self {
        SupervoxelParams {
            rho: 1000,
            scale_k: 1.0,
            presmooth_sigma: 0.0,
        }
    }
}

impl SupervoxelParams {
    /// Synthetic-data default: `rho` scaled to one two-hundredth of the volume.
    pub fn for_voxels(voxels: usize) -> Self {
        SupervoxelParams {
            rho: (voxels / 200).max(1),
            ..SupervoxelParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho < 1 {
            return Err(Error::Invalid("rho must be >= 1".into()));
        }
        if !(self.scale_k > 0.0 && self.scale_k.is_finite()) {
            return Err(Error::Invalid(format!("scale_k must be > 0, got {}", self.scale_k)));
        }
        if !(self.presmooth_sigma >= 0.0 && self.presmooth_sigma.is_finite()) {
            return Err(Error::Invalid("presmooth_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// The 13 neighbour offsets (dz, dy, dx) that are lexicographically positive;
/// together with their negations they form the 26-neighbourhood.
pub const FORWARD_OFFSETS: [[isize; 3]; 13] = [
    [0, 0, 1],
    [0, 1, -1],
    [0, 1, 0],
    [0, 1, 1],
    [1, -1, -1],
    [1, -1, 0],
    [1, -1, 1],
    [1, 0, -1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, -1],
    [1, 1, 0],
    [1, 1, 1],
];

/// Weight multiplier for a neighbour offset under the given spacing.
///
/// In-plane offsets are unscaled. Offsets with a z component are scaled by
/// physical length over the length with z zeroed; a pure-z offset has no
/// in-plane part, so it is measured against the finer in-plane pitch.
pub fn anisotropy_factor(offset: [isize; 3], spacing: Spacing) -> f64 {
    if offset[0] == 0 {
        return 1.0;
    }
    let comp = |a: usize| (offset[a] as f64 * spacing[a]).powi(2);
    let full = (comp(0) + comp(1) + comp(2)).sqrt();
    let planar = (comp(1) + comp(2)).sqrt();
    if planar > 0.0 {
        full / planar
    } else {
        full / spacing[1].min(spacing[2])
    }
}

pub fn build_adjacency_edges(volume: &Volume) -> Vec<Edge> {
    build_edges_from(volume.data(), volume.dims(), volume.spacing())
}

fn build_edges_from(data: &[f32], dims: [usize; 3], spacing: Spacing) -> Vec<Edge> {
    let [d, h, w] = dims;
    let factors: Vec<f64> = FORWARD_OFFSETS.iter().map(|&o| anisotropy_factor(o, spacing)).collect();
    let mut edges = Vec::with_capacity(d * h * w * 13);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = (z * h + y) * w + x;
                for (o, factor) in FORWARD_OFFSETS.iter().zip(&factors) {
                    let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 {
                        continue;
                    }
                    let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                    if nz >= d || ny >= h || nx >= w {
                        continue;
                    }
                    let q = (nz * h + ny) * w + nx;
                    let diff = (data[p] - data[q]).abs() as f64;
                    edges.push(Edge {
                        a: p.min(q) as u32,
                        b: p.max(q) as u32,
                        weight: diff * factor,
                    });
                }
            }
        }
    }
    edges
}

/// Union-find over voxels with per-component size and internal difference.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
    size: Vec<u32>,
    internal: Vec<f64>,
    components: usize,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
            size: vec![1; n],
            internal: vec![0.0; n],
            components: n,
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] as usize != root {
            root = self.parent[root] as usize;
        }
        let mut cur = x;
        while self.parent[cur] as usize != root {
            let next = self.parent[cur] as usize;
            self.parent[cur] = root as u32;
            cur = next;
        }
        root
    }

    /// Size of the component whose root is `root`.
    pub fn size(&self, root: usize) -> usize {
        self.size[root] as usize
    }

    pub fn internal_difference(&self, root: usize) -> f64 {
        self.internal[root]
    }

    /// Joins two roots; the merged internal difference becomes `weight`.
    fn union_roots(&mut self, ra: usize, rb: usize, weight: f64) -> usize {
        let (big, small) = if self.rank[ra] >= self.rank[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big as u32;
        if self.rank[big] == self.rank[small] {
            self.rank[big] += 1;
        }
        self.size[big] += self.size[small];
        self.internal[big] = weight;
        self.components -= 1;
        big
    }

    /// Component sizes keyed by root, in root order.
    pub fn component_sizes(&mut self) -> Vec<usize> {
        let roots: Vec<usize> = (0..self.len()).filter(|&i| self.find(i) == i).collect();
        roots.into_iter().map(|r| self.size(r)).collect()
    }
}

fn sorted(edges: &[Edge]) -> Vec<Edge> {
    let mut out = edges.to_vec();
    if !out.windows(2).all(|w| w[0].order(&w[1]) != Ordering::Greater) {
        out.sort_unstable_by(Edge::order);
    }
    out
}

/// Felzenszwalb–Huttenlocher merging with threshold `scale_k / |C|`.
pub fn segment_graph(edges: &[Edge], num_voxels: usize, params: &SupervoxelParams) -> DisjointSet {
    let mut ds = DisjointSet::new(num_voxels);
    for e in sorted(edges) {
        let ra = ds.find(e.a as usize);
        let rb = ds.find(e.b as usize);
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra] + params.scale_k / ds.size(ra) as f64;
        let tb = ds.internal[rb] + params.scale_k / ds.size(rb) as f64;
        if e.weight <= ta.min(tb) {
            ds.union_roots(ra, rb, e.weight);
        }
    }
    ds
}

/// Second pass in edge order merging any pair where either side is below `rho`.
pub fn enforce_min_size(mut ds: DisjointSet, edges: &[Edge], rho: usize) -> DisjointSet {
    if rho <= 1 {
        return ds;
    }
    for e in sorted(edges) {
        let ra = ds.find(e.a as usize);
        let rb = ds.find(e.b as usize);
        if ra != rb && (ds.size(ra) < rho || ds.size(rb) < rho) {
            let weight = ds.internal[ra].max(ds.internal[rb]).max(e.weight);
            ds.union_roots(ra, rb, weight);
        }
    }
    ds
}

/// Dense labels 1..=L in order of each component's first voxel.
pub fn relabel(ds: &mut DisjointSet) -> Vec<u32> {
    let n = ds.len();
    let mut map = vec![0u32; n];
    let mut next = 0u32;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r = ds.find(i);
        if map[r] == 0 {
            next += 1;
            map[r] = next;
        }
        out.push(map[r]);
    }
    out
}

/// Separable in-plane Gaussian blur with replicated borders.
pub fn presmooth(volume: &Volume, sigma: f64) -> Result<Volume> {
    if sigma <= 0.0 {
        return Ok(volume.clone());
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let [d, h, w] = volume.dims();
    let src = volume.data();
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                        c * src[(z * h + y) * w + xx] as f64
                    })
                    .sum();
                tmp[(z * h + y) * w + x] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                        c * tmp[(z * h + yy) * w + x] as f64
                    })
                    .sum();
                out[(z * h + y) * w + x] = acc as f32;
            }
        }
    }
    Volume::new(volume.dims(), volume.spacing(), out)
}

pub fn generate_supervoxels(volume: &Volume, params: &SupervoxelParams) -> Result<LabelVolume> {
    params.validate()?;
    let smoothed = presmooth(volume, params.presmooth_sigma)?;
    let edges = sorted(&build_adjacency_edges(&smoothed));
    let ds = segment_graph(&edges, volume.len(), params);
    let mut ds = enforce_min_size(ds, &edges, params.rho);
    LabelVolume::new(volume.dims(), volume.spacing(), relabel(&mut ds))
}

/// Number of 26-connected components of the voxels carrying `label`.
pub fn count_connected(labels: &LabelVolume, label: u32) -> usize {
    let [d, h, w] = labels.dims();
    let lab = labels.labels();
    let mut seen = vec![false; lab.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..lab.len() {
        if lab[start] != label || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (z, y, x) = (p / (h * w), (p / w) % h, p % w);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let q = (nz as usize * h + ny as usize) * w + nx as usize;
                        if lab[q] == label && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], spacing: Spacing, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut data = Vec::new();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume::new(dims, spacing, data).unwrap()
    }

    #[test]
    fn single_voxel_has_no_edges() {
        assert!(build_adjacency_edges(&vol([1, 1, 1], [1.0; 3], |_, _, _| 0.0)).is_empty());
    }

    #[test]
    fn cube_of_eight_has_all_pairs() {
        let edges = build_adjacency_edges(&vol([2, 2, 2], [1.0; 3], |_, _, _| 0.0));
        // every pair of the 8 corners differs by at most one per axis
        let mut brute = 0;
        for p in 0..8usize {
            for q in p + 1..8 {
                let (pz, py, px) = (p / 4, (p / 2) % 2, p % 2);
                let (qz, qy, qx) = (q / 4, (q / 2) % 2, q % 2);
                if pz.abs_diff(qz) <= 1 && py.abs_diff(qy) <= 1 && px.abs_diff(qx) <= 1 {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 28);
        assert_eq!(edges.len(), brute);
    }

    #[test]
    fn anisotropy_factors() {
        assert_eq!(anisotropy_factor([1, 0, 0], [1.0, 1.0, 1.0]), 1.0);
        assert_eq!(anisotropy_factor([1, 0, 0], [3.0, 1.0, 1.0]), 3.0);
        assert!((anisotropy_factor([1, 0, 1], [3.0, 1.0, 1.0]) - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(anisotropy_factor([0, 1, 1], [3.0, 1.0, 1.0]), 1.0);
        let xyz = anisotropy_factor([1, 1, 1], [3.0, 1.0, 1.0]);
        assert!((xyz - (11f64 / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn in_slice_edges_are_unscaled() {
        let v = vol([2, 1, 2], [5.0, 1.0, 1.0], |z, _, x| (z * 10 + x) as f32);
        for e in build_adjacency_edges(&v) {
            let same_slice = e.a / 2 == e.b / 2;
            if same_slice {
                assert_eq!(e.weight, 1.0);
            } else {
                assert!(e.weight > 10.0 - 1.0);
            }
        }
    }

    #[test]
    fn zero_weights_give_one_component() {
        let v = vol([3, 3, 3], [1.0; 3], |_, _, _| 4.0);
        let edges = build_adjacency_edges(&v);
        let ds = segment_graph(
            &edges,
            v.len(),
            &SupervoxelParams {
                rho: 1,
                scale_k: 0.1,
                presmooth_sigma: 0.0,
            },
        );
        assert_eq!(ds.components(), 1);
    }

    #[test]
    fn empty_edge_list_leaves_singletons() {
        let ds = segment_graph(&[], 5, &SupervoxelParams::default());
        assert_eq!(ds.components(), 5);
    }

    #[test]
    fn rho_one_changes_nothing() {
        let v = vol([2, 3, 3], [1.0; 3], |z, y, x| ((z * 7 + y * 3 + x) % 5) as f32);
        let edges = build_adjacency_edges(&v);
        let params = SupervoxelParams {
            rho: 1,
            scale_k: 0.5,
            presmooth_sigma: 0.0,
        };
        let before = segment_graph(&edges, v.len(), &params);
        let after = enforce_min_size(before.clone(), &edges, 1);
        assert_eq!(before.components(), after.components());
    }

    #[test]
    fn huge_rho_collapses_to_one() {
        let v = vol([3, 3, 3], [1.0; 3], |z, y, x| ((z * 7 + y * 3 + x) % 5) as f32 * 10.0);
        let labels = generate_supervoxels(
            &v,
            &SupervoxelParams {
                rho: 27,
                scale_k: 0.1,
                presmooth_sigma: 0.0,
            },
        )
        .unwrap();
        assert_eq!(labels.max_label(), 1);
    }

    #[test]
    fn constant_volume_is_one_supervoxel() {
        let v = vol([4, 5, 6], [2.0, 1.0, 1.0], |_, _, _| 3.0);
        assert_eq!(
            generate_supervoxels(&v, &SupervoxelParams::default())
                .unwrap()
                .max_label(),
            1
        );
    }

    #[test]
    fn small_block_merges_into_neighbour() {
        // 2x2x2 bright corner inside a 4x4x4 dark cube: sizes 8 and 56
        let v = vol(
            [4, 4, 4],
            [1.0; 3],
            |z, y, x| if z < 2 && y < 2 && x < 2 { 10.0 } else { 0.0 },
        );
        let edges = build_adjacency_edges(&v);
        let params = SupervoxelParams {
            rho: 10,
            scale_k: 1.0,
            presmooth_sigma: 0.0,
        };
        let mut ds = segment_graph(&edges, 64, &params);
        let mut sizes = ds.component_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![8, 56]);
        let mut ds = enforce_min_size(ds, &edges, 10);
        assert_eq!(ds.component_sizes(), vec![64]);
    }

    #[test]
    fn labels_are_dense_in_first_appearance_order() {
        let v = vol([1, 2, 4], [1.0; 3], |_, _, x| if x >= 2 { 100.0 } else { 0.0 });
        let labels = generate_supervoxels(
            &v,
            &SupervoxelParams {
                rho: 1,
                scale_k: 1.0,
                presmooth_sigma: 0.0,
            },
        )
        .unwrap();
        assert_eq!(labels.labels(), &[1, 1, 2, 2, 1, 1, 2, 2]);
    }

    #[test]
    fn thick_slices_stop_merging_across_a_weak_step() {
        let make = |sz: f64| vol([4, 4, 4], [sz, 1.0, 1.0], |z, _, _| if z < 2 { 0.0 } else { 0.02 });
        let params = SupervoxelParams {
            rho: 1,
            scale_k: 1.0,
            presmooth_sigma: 0.0,
        };
        assert_eq!(generate_supervoxels(&make(1.0), &params).unwrap().max_label(), 1);
        assert_eq!(generate_supervoxels(&make(4.0), &params).unwrap().max_label(), 2);
    }

    #[test]
    fn presmooth_preserves_constants() {
        let v = vol([2, 6, 6], [1.0; 3], |_, _, _| 2.0);
        let s = presmooth(&v, 1.5).unwrap();
        assert!(s.data().iter().all(|&x| (x - 2.0).abs() < 1e-5));
    }

    #[test]
    fn connectivity_counter() {
        let lv = LabelVolume::new([1, 1, 5], [1.0; 3], vec![1, 1, 0, 1, 0]).unwrap();
        assert_eq!(count_connected(&lv, 1), 2);
        let lv = LabelVolume::new([2, 2, 2], [1.0; 3], vec![1, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        assert_eq!(count_connected(&lv, 1), 1);
    }
}
