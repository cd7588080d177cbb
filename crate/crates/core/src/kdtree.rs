//! Exact k-nearest-neighbor search over 3D coordinates.
//!
//! The tree is a balanced median split on the axis of widest spread. Nodes
//! are stored in preorder: the left child of node `i` is `i + 1` and the
//! right child index is recorded in the node. A subtree covering `n` points
//! hands `n / 2` to its left child, so leaf ranges are recovered while
//! descending and never stored.
//!
//! Distances are squared Euclidean in `f64`. Results are ordered by
//! `(distance, index)`, which makes ties at the k-th distance resolve to the
//! smaller point index.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::timing::{fnv1a, median_millis, TimingRow};

pub const DEFAULT_LEAF_SIZE: usize = 32;

// subtrees smaller than this are built on the calling thread
const PAR_BUILD_MIN: usize = 4096;
const PAR_BUILD_DEPTH: usize = 10;

const LEAF: u8 = 3;

#[derive(Clone, Copy, Debug)]
struct Node {
    split: f32,
    axis: u8,
    right: u32,
}

#[derive(Clone, Debug)]
pub struct KdTree {
    coords: Vec<[f32; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

/// K neighbors per query, flattened query-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub k: usize,
    pub indices: Vec<u32>,
    /// Squared Euclidean distances, ascending within each query.
    pub distances: Vec<f64>,
}

impl KnnResult {
    pub fn queries(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn neighbors(&self, q: usize) -> &[u32] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn distances_of(&self, q: usize) -> &[f64] {
        &self.distances[q * self.k..(q + 1) * self.k]
    }

    /// Order-sensitive hash of indices and distance bits.
    pub fn checksum(&self) -> u64 {
        let mut h = fnv1a(0xcbf2_9ce4_8422_2325, self.indices.iter().flat_map(|i| i.to_le_bytes()));
        h = fnv1a(h, self.distances.iter().flat_map(|d| d.to_bits().to_le_bytes()));
        h
    }
}

#[inline]
pub fn squared_distance(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

fn node_count(n: usize, leaf_size: usize) -> usize {
    if n <= leaf_size {
        1
    } else {
        1 + node_count(n / 2, leaf_size) + node_count(n - n / 2, leaf_size)
    }
}

impl KdTree {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::with_leaf_size(cloud.points().iter().map(|p| p.xyz()).collect(), DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(coords: Vec<[f32; 3]>, leaf_size: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if coords.len() > u32::MAX as usize {
            return Err(Error::Config("kd-tree supports at most 2^32-1 points".into()));
        }
        let leaf_size = leaf_size.max(1);
        let mut order: Vec<u32> = (0..coords.len() as u32).collect();
        let mut nodes = vec![
            Node {
                split: 0.0,
                axis: LEAF,
                right: 0
            };
            node_count(coords.len(), leaf_size)
        ];
        build_subtree(&coords, &mut order, &mut nodes, 0, leaf_size, 0);
        Ok(KdTree {
            coords,
            order,
            nodes,
            leaf_size,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn rec(t: &KdTree, node: usize) -> usize {
            let n = t.nodes[node];
            if n.axis == LEAF {
                0
            } else {
                1 + rec(t, node + 1).max(rec(t, n.right as usize))
            }
        }
        rec(self, 0)
    }

    /// Walks the tree and checks the structural invariants: every point sits
    /// in exactly one leaf, leaves hold at most `leaf_size` points, and each
    /// split separates its subtrees.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let mut seen = vec![false; self.coords.len()];
        let mut next_node = 0usize;
        self.audit_rec(0, 0, self.coords.len(), &mut seen, &mut next_node)?;
        if next_node != self.nodes.len() {
            return Err(format!("visited {next_node} of {} nodes", self.nodes.len()));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("point {i} is in no leaf"));
        }
        Ok(())
    }

    fn audit_rec(
        &self,
        node: usize,
        start: usize,
        len: usize,
        seen: &mut [bool],
        next_node: &mut usize,
    ) -> std::result::Result<(), String> {
        if node != *next_node {
            return Err(format!("node {node} out of preorder (expected {next_node})"));
        }
        *next_node += 1;
        let n = self.nodes[node];
        if n.axis == LEAF {
            if len > self.leaf_size {
                return Err(format!("leaf {node} holds {len} > {} points", self.leaf_size));
            }
            for &i in &self.order[start..start + len] {
                let i = i as usize;
                if std::mem::replace(&mut seen[i], true) {
                    return Err(format!("point {i} appears in two leaves"));
                }
            }
            return Ok(());
        }
        if len <= self.leaf_size {
            return Err(format!("internal node {node} covers only {len} points"));
        }
        let half = len / 2;
        let axis = n.axis as usize;
        for &i in &self.order[start..start + half] {
            if self.coords[i as usize][axis] > n.split {
                return Err(format!("left point {i} above split of node {node}"));
            }
        }
        for &i in &self.order[start + half..start + len] {
            if self.coords[i as usize][axis] < n.split {
                return Err(format!("right point {i} below split of node {node}"));
            }
        }
        let right = n.right as usize;
        if right != node + 1 + node_count(half, self.leaf_size) {
            return Err(format!("node {node} right child index {right} inconsistent"));
        }
        self.audit_rec(node + 1, start, half, seen, next_node)?;
        self.audit_rec(right, start + half, len - half, seen, next_node)
    }

    /// Exact k nearest indexed points for each query.
    pub fn query_knn(&self, queries: &[[f32; 3]], k: usize) -> Result<KnnResult> {
        self.query(queries.len(), |q| queries[q], false, k)
    }

    /// Queries every indexed point against the tree. With `include_self`
    /// false, a point never appears among its own neighbors.
    pub fn query_knn_indexed(&self, k: usize, include_self: bool) -> Result<KnnResult> {
        if !include_self && k >= self.coords.len() {
            return Err(Error::InvalidK {
                k,
                n: self.coords.len().saturating_sub(1),
            });
        }
        self.query(self.coords.len(), |q| self.coords[q], !include_self, k)
    }

    fn query<F>(&self, count: usize, query_at: F, exclude_self: bool, k: usize) -> Result<KnnResult>
    where
        F: Fn(usize) -> [f32; 3] + Sync,
    {
        if k == 0 || k > self.coords.len() {
            return Err(Error::InvalidK {
                k,
                n: self.coords.len(),
            });
        }
        let mut indices = vec![0u32; count * k];
        let mut distances = vec![0f64; count * k];
        indices
            .par_chunks_mut(k)
            .zip(distances.par_chunks_mut(k))
            .enumerate()
            .for_each_init(
                || Candidates::with_capacity(k),
                |cands, (q, (idx_out, dist_out))| {
                    cands.reset(k);
                    let skip = exclude_self.then_some(q as u32);
                    self.search(0, 0, self.coords.len(), query_at(q), skip, cands);
                    for (slot, (d, i)) in cands.items.iter().enumerate() {
                        idx_out[slot] = *i;
                        dist_out[slot] = *d;
                    }
                },
            );
        Ok(KnnResult { k, indices, distances })
    }

    fn search(&self, node: usize, start: usize, len: usize, q: [f32; 3], skip: Option<u32>, cands: &mut Candidates) {
        let n = self.nodes[node];
        if n.axis == LEAF {
            for &i in &self.order[start..start + len] {
                if Some(i) == skip {
                    continue;
                }
                cands.offer(squared_distance(q, self.coords[i as usize]), i);
            }
            return;
        }
        let half = len / 2;
        let diff = q[n.axis as usize] as f64 - n.split as f64;
        let (near, far) = if diff <= 0.0 {
            ((node + 1, start, half), (n.right as usize, start + half, len - half))
        } else {
            ((n.right as usize, start + half, len - half), (node + 1, start, half))
        };
        self.search(near.0, near.1, near.2, q, skip, cands);
        // `<=`: a far point at exactly the worst distance may still win the index tie-break
        if diff * diff <= cands.worst() {
            self.search(far.0, far.1, far.2, q, skip, cands);
        }
    }
}

// `nodes` is the preorder slice of this subtree; `base` is its offset in the full array.
fn build_subtree(
    coords: &[[f32; 3]],
    order: &mut [u32],
    nodes: &mut [Node],
    base: usize,
    leaf_size: usize,
    depth: usize,
) {
    let len = order.len();
    if len <= leaf_size {
        nodes[0] = Node {
            split: 0.0,
            axis: LEAF,
            right: 0,
        };
        return;
    }
    let axis = widest_axis(coords, order);
    let half = len / 2;
    order.select_nth_unstable_by(half, |&a, &b| {
        coords[a as usize][axis]
            .total_cmp(&coords[b as usize][axis])
            .then(a.cmp(&b))
    });
    let split = coords[order[half] as usize][axis];
    let left_nodes = node_count(half, leaf_size);
    let (head, rest) = nodes.split_at_mut(1);
    let (left, right) = rest.split_at_mut(left_nodes);
    let right_base = base + 1 + left_nodes;
    head[0] = Node {
        split,
        axis: axis as u8,
        right: right_base as u32,
    };
    let (lo, hi) = order.split_at_mut(half);
    if len >= PAR_BUILD_MIN && depth < PAR_BUILD_DEPTH {
        rayon::join(
            || build_subtree(coords, lo, left, base + 1, leaf_size, depth + 1),
            || build_subtree(coords, hi, right, right_base, leaf_size, depth + 1),
        );
    } else {
        build_subtree(coords, lo, left, base + 1, leaf_size, depth + 1);
        build_subtree(coords, hi, right, right_base, leaf_size, depth + 1);
    }
}

fn widest_axis(coords: &[[f32; 3]], order: &[u32]) -> usize {
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for &i in order {
        let c = coords[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let spread = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut best = 0;
    for a in 1..3 {
        if spread[a] > spread[best] {
            best = a;
        }
    }
    best
}

/// Bounded list of the best `(distance, index)` pairs, kept sorted.
struct Candidates {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl Candidates {
    fn with_capacity(k: usize) -> Self {
        Candidates {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn reset(&mut self, k: usize) {
        self.k = k;
        self.items.clear();
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, d: f64, i: u32) {
        if self.items.len() == self.k {
            let (wd, wi) = self.items[self.k - 1];
            if cmp_pair((d, i), (wd, wi)) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|&p| cmp_pair(p, (d, i)) == Ordering::Less);
        self.items.insert(pos, (d, i));
    }
}

#[inline]
fn cmp_pair(a: (f64, u32), b: (f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Timings of one build-and-query benchmark.
#[derive(Clone, Debug)]
pub struct KnnBenchReport {
    pub rows: Vec<TimingRow>,
    /// Result checksum for each thread count, in row order.
    pub checksums: Vec<(usize, u64)>,
    /// Whether every thread count produced the same neighbors.
    pub identical: bool,
}

impl KnnBenchReport {
    /// Plain-text `phase,threads,millis` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,threads,millis\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.3}\n", r.label, r.threads, r.millis));
        }
        s
    }

    pub fn millis(&self, phase: &str, threads: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == phase && r.threads == threads)
            .map(|r| r.millis)
    }
}

/// Times build and batched self-query at 1 worker and at `threads` workers.
/// `warmup` leading repetitions are discarded and the median of the next
/// `reps` is reported.
pub fn bench_build_query(
    cloud: &PointCloud,
    k: usize,
    threads: usize,
    warmup: usize,
    reps: usize,
) -> Result<KnnBenchReport> {
    if threads == 0 {
        return Err(Error::Config("threads must be >= 1".into()));
    }
    let coords: Vec<[f32; 3]> = cloud.points().iter().map(|p| p.xyz()).collect();
    let mut thread_counts = vec![1];
    if threads != 1 {
        thread_counts.push(threads);
    }
    let mut rows = Vec::new();
    let mut checksums = Vec::new();
    let mut reference: Option<KnnResult> = None;
    let mut identical = true;
    for &t in &thread_counts {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let (build_ms, query_ms, result) = pool.install(|| -> Result<_> {
            let mut build_ms = Vec::new();
            let mut query_ms = Vec::new();
            let mut last = None;
            for _ in 0..warmup + reps.max(1) {
                let t0 = Instant::now();
                let tree = KdTree::with_leaf_size(coords.clone(), DEFAULT_LEAF_SIZE)?;
                let t1 = Instant::now();
                let res = tree.query_knn_indexed(k, true)?;
                let t2 = Instant::now();
                build_ms.push((t1 - t0).as_secs_f64() * 1e3);
                query_ms.push((t2 - t1).as_secs_f64() * 1e3);
                last = Some(res);
            }
            Ok((
                median_millis(&build_ms[warmup.min(build_ms.len() - 1)..]),
                median_millis(&query_ms[warmup.min(query_ms.len() - 1)..]),
                last.unwrap(),
            ))
        })?;
        rows.push(TimingRow::new("build", t, build_ms));
        rows.push(TimingRow::new("query", t, query_ms));
        checksums.push((t, result.checksum()));
        match &reference {
            None => reference = Some(result),
            Some(r) => identical &= *r == result,
        }
    }
    Ok(KnnBenchReport {
        rows,
        checksums,
        identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_coords(seed: u64, n: usize) -> Vec<[f32; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-2.0..2.0)])
            .collect()
    }

    /// O(N²) scan with the same `(distance, index)` order.
    fn brute_force(coords: &[[f32; 3]], q: [f32; 3], k: usize) -> Vec<(f64, u32)> {
        let mut all: Vec<(f64, u32)> = coords
            .iter()
            .enumerate()
            .map(|(i, &c)| (squared_distance(q, c), i as u32))
            .collect();
        all.sort_by(|a, b| cmp_pair(*a, *b));
        all.truncate(k);
        all
    }

    fn assert_matches_brute(coords: &[[f32; 3]], leaf: usize, k: usize) {
        let tree = KdTree::with_leaf_size(coords.to_vec(), leaf).unwrap();
        let res = tree.query_knn(coords, k).unwrap();
        for (q, &c) in coords.iter().enumerate() {
            let expect = brute_force(coords, c, k);
            let idx: Vec<u32> = expect.iter().map(|e| e.1).collect();
            let dist: Vec<f64> = expect.iter().map(|e| e.0).collect();
            assert_eq!(res.neighbors(q), &idx[..], "query {q}");
            assert_eq!(res.distances_of(q), &dist[..], "query {q}");
        }
    }

    #[test]
    fn single_point_is_a_leaf() {
        let tree = KdTree::with_leaf_size(vec![[1.0, 2.0, 3.0]], 1).unwrap();
        assert_eq!(tree.depth(), 0);
        tree.audit().unwrap();
        let r = tree.query_knn(&[[0.0; 3]], 1).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.distances, vec![14.0]);
    }

    #[test]
    fn eight_collinear_points_have_depth_three() {
        let coords: Vec<[f32; 3]> = (0..8).map(|i| [i as f32, 0.0, 0.0]).collect();
        let tree = KdTree::with_leaf_size(coords, 1).unwrap();
        assert_eq!(tree.depth(), 3);
        tree.audit().unwrap();
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(KdTree::build(&PointCloud::default()), Err(Error::EmptyCloud)));
    }

    #[test]
    fn large_random_tree_audits_clean() {
        let tree = KdTree::with_leaf_size(random_coords(1, 10_000), DEFAULT_LEAF_SIZE).unwrap();
        tree.audit().unwrap();
        let tree = KdTree::with_leaf_size(random_coords(2, 10_000), 1).unwrap();
        tree.audit().unwrap();
    }

    #[test]
    fn self_match_at_distance_zero() {
        let coords = random_coords(3, 500);
        let tree = KdTree::with_leaf_size(coords.clone(), 8).unwrap();
        let r = tree.query_knn(&[coords[42]], 1).unwrap();
        assert_eq!(r.indices, vec![42]);
        assert_eq!(r.distances, vec![0.0]);
    }

    #[test]
    fn line_geometry() {
        let coords = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let tree = KdTree::with_leaf_size(coords, 1).unwrap();
        let r = tree.query_knn(&[[2.0, 0.0, 0.0]], 2).unwrap();
        assert_eq!(r.indices, vec![2, 1]);
        assert_eq!(r.distances, vec![0.0, 1.0]);
    }

    #[test]
    fn ties_prefer_smaller_index() {
        // 1 and 3 are equidistant from the query at x=2
        let coords = vec![[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [9.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let tree = KdTree::with_leaf_size(coords, 1).unwrap();
        let r = tree.query_knn(&[[2.0, 0.0, 0.0]], 2).unwrap();
        assert_eq!(r.indices, vec![3, 0]);
        // on a grid every query has many ties
        let grid: Vec<[f32; 3]> = (0..6)
            .flat_map(|x| (0..6).flat_map(move |y| (0..3).map(move |z| [x as f32, y as f32, z as f32])))
            .collect();
        assert_matches_brute(&grid, 2, 7);
    }

    #[test]
    fn k_out_of_range() {
        let tree = KdTree::with_leaf_size(random_coords(4, 10), 4).unwrap();
        assert!(matches!(tree.query_knn(&[[0.0; 3]], 11), Err(Error::InvalidK { k: 11, n: 10 })));
        assert!(tree.query_knn(&[[0.0; 3]], 0).is_err());
        assert!(tree.query_knn_indexed(10, false).is_err());
    }

    #[test]
    fn exclude_self_drops_own_index() {
        let coords = random_coords(5, 300);
        let tree = KdTree::with_leaf_size(coords.clone(), 8).unwrap();
        let r = tree.query_knn_indexed(4, false).unwrap();
        for q in 0..coords.len() {
            assert!(!r.neighbors(q).contains(&(q as u32)));
            let expect: Vec<u32> = brute_force(&coords, coords[q], 5)
                .into_iter()
                .map(|e| e.1)
                .filter(|&i| i != q as u32)
                .take(4)
                .collect();
            assert_eq!(r.neighbors(q), &expect[..]);
        }
    }

    #[test]
    fn random_matches_brute_force() {
        assert_matches_brute(&random_coords(6, 2000), DEFAULT_LEAF_SIZE, 16);
    }

    #[test]
    fn bench_report_is_consistent_across_thread_counts() {
        let pts = random_coords(8, 3000)
            .into_iter()
            .map(|c| Point::new(c[0], c[1], c[2], 0.0))
            .collect();
        let cloud = PointCloud::new(pts);
        let r = bench_build_query(&cloud, 8, 1, 0, 1).unwrap();
        assert!(r.identical);
        assert_eq!(r.rows.len(), 2);
        let r = bench_build_query(&cloud, 8, 3, 0, 1).unwrap();
        assert!(r.identical);
        assert_eq!(r.checksums[0].1, r.checksums[1].1);
        assert!(r.to_csv().starts_with("phase,threads,millis\nbuild,1,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn exact_for_small_clouds(seed in any::<u64>(), n in 1usize..400, k in 1usize..33, leaf in 1usize..40) {
            let coords = random_coords(seed, n);
            let k = k.min(n);
            let tree = KdTree::with_leaf_size(coords.clone(), leaf).unwrap();
            prop_assert!(tree.audit().is_ok());
            let res = tree.query_knn(&coords, k).unwrap();
            for q in 0..n {
                let expect: Vec<u32> = brute_force(&coords, coords[q], k).into_iter().map(|e| e.1).collect();
                prop_assert_eq!(res.neighbors(q), &expect[..]);
                let d = res.distances_of(q);
                prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
                for (slot, &i) in res.neighbors(q).iter().enumerate() {
                    let recomputed = squared_distance(coords[q], coords[i as usize]);
                    prop_assert!((recomputed - d[slot]).abs() <= 1e-9);
                }
            }
        }
    }
}
