//! HDBSCAN* fixation denoising.
//!
//! Core distance is the distance to the `min_samples`-th nearest *other* point
//! (duplicates count). Clusters are extracted from the condensed tree by
//! excess of mass; the root is never selected, so a cloud with no density
//! split is reported as noise.

use serde::{Deserialize, Serialize};

use crate::saliency::FixationRecord;

pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 5;
pub const DEFAULT_MIN_SAMPLES: usize = 3;

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self {
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabeling {
    pub labels: Vec<i32>,
    pub n_clusters: usize,
}

impl ClusterLabeling {
    fn all_noise(n: usize) -> Self {
        Self {
            labels: vec![NOISE; n],
            n_clusters: 0,
        }
    }

    pub fn is_member(&self, i: usize) -> bool {
        self.labels[i] >= 0
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }
}

/// Drops fixations HDBSCAN labels as noise, preserving the order of the rest.
pub fn denoise_fixations(
    fixations: &[FixationRecord],
    params: HdbscanParams,
) -> (Vec<FixationRecord>, ClusterLabeling) {
    let points: Vec<[f64; 2]> = fixations.iter().map(|f| [f.x, f.y]).collect();
    let labeling = hdbscan(&points, params);
    let kept = fixations
        .iter()
        .zip(&labeling.labels)
        .filter(|(_, &l)| l >= 0)
        .map(|(f, _)| f.clone())
        .collect();
    (kept, labeling)
}

/// Labels 2-D points; `-1` is noise, cluster ids are dense from 0.
pub fn hdbscan(points: &[[f64; 2]], params: HdbscanParams) -> ClusterLabeling {
    let n = points.len();
    let min_cluster_size = params.min_cluster_size.max(2);
    if n < min_cluster_size || n < 2 {
        return ClusterLabeling::all_noise(n);
    }
    let k = params.min_samples.max(1).min(n - 1);

    let dist = pairwise_distances(points);
    let core = core_distances(&dist, n, k);
    let mst = mutual_reachability_mst(&dist, &core, n);
    let linkage = single_linkage(&mst, n);
    let condensed = condense_tree(&linkage, n, min_cluster_size);
    let selected = select_clusters_eom(&condensed, n);
    label_points(&condensed, &selected, n)
}

fn pairwise_distances(points: &[[f64; 2]]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let v = (dx * dx + dy * dy).sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn core_distances(dist: &[f64], n: usize, k: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    a: usize,
    b: usize,
    weight: f64,
}

/// Dense Prim's algorithm grown from point 0. Candidates are scanned in index
/// order and the first strictly smaller weight wins, so equal-weight edges keep
/// their discovery order through the stable sort that follows.
fn mutual_reachability_mst(dist: &[f64], core: &[f64], n: usize) -> Vec<Edge> {
    let mr = |a: usize, b: usize| dist[a * n + b].max(core[a]).max(core[b]);
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut source = vec![0usize; n];
    let mut mst = Vec::with_capacity(n - 1);
    let mut current = 0;
    for _ in 0..n - 1 {
        in_tree[current] = true;
        let mut next_weight = f64::INFINITY;
        let mut next = usize::MAX;
        let mut from = 0;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let w = mr(current, j);
            if w < best[j] {
                best[j] = w;
                source[j] = current;
            }
            if best[j] < next_weight || next == usize::MAX {
                next_weight = best[j];
                next = j;
                from = source[j];
            }
        }
        mst.push(Edge {
            a: from,
            b: next,
            weight: next_weight,
        });
        current = next;
    }
    mst.sort_by(|x, y| x.weight.total_cmp(&y.weight));
    mst
}

#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

/// Dendrogram: node ids `0..n` are points, `n + i` is the i-th merge.
fn single_linkage(mst: &[Edge], n: usize) -> Vec<Merge> {
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    let mut size = vec![1usize; 2 * n - 1];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(n - 1);
    for (i, e) in mst.iter().enumerate() {
        let ra = find(&mut parent, e.a);
        let rb = find(&mut parent, e.b);
        let node = n + i;
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push(Merge {
            left: ra,
            right: rb,
            distance: e.weight,
            size: size[node],
        });
    }
    merges
}

#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    child: usize,
    lambda: f64,
    child_size: usize,
}

/// Condensed cluster tree. Cluster ids start at `n` (the root); point ids are `< n`.
struct CondensedTree {
    edges: Vec<CondensedEdge>,
    n_clusters: usize,
}

fn lambda_of(distance: f64) -> f64 {
    if distance > 0.0 {
        1.0 / distance
    } else {
        f64::INFINITY
    }
}

fn condense_tree(merges: &[Merge], n: usize, min_cluster_size: usize) -> CondensedTree {
    let root = 2 * n - 2;
    let node_size = |node: usize| if node < n { 1 } else { merges[node - n].size };

    let leaves_of = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = merges[x - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        out
    };

    let mut edges = Vec::new();
    let mut next_label = n + 1;
    // (dendrogram node, cluster label it belongs to)
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((root, n));
    while let Some((node, label)) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let lambda = lambda_of(m.distance);
        let (ls, rs) = (node_size(m.left), node_size(m.right));
        let left_big = ls >= min_cluster_size;
        let right_big = rs >= min_cluster_size;
        match (left_big, right_big) {
            (true, true) => {
                for (child, size) in [(m.left, ls), (m.right, rs)] {
                    let child_label = next_label;
                    next_label += 1;
                    edges.push(CondensedEdge {
                        parent: label,
                        child: child_label,
                        lambda,
                        child_size: size,
                    });
                    queue.push_back((child, child_label));
                }
            }
            (false, false) => {
                for child in [m.left, m.right] {
                    for p in leaves_of(child) {
                        edges.push(CondensedEdge {
                            parent: label,
                            child: p,
                            lambda,
                            child_size: 1,
                        });
                    }
                }
            }
            (false, true) | (true, false) => {
                let (small, big) = if left_big {
                    (m.right, m.left)
                } else {
                    (m.left, m.right)
                };
                for p in leaves_of(small) {
                    edges.push(CondensedEdge {
                        parent: label,
                        child: p,
                        lambda,
                        child_size: 1,
                    });
                }
                queue.push_back((big, label));
            }
        }
    }
    CondensedTree {
        edges,
        n_clusters: next_label - n,
    }
}

/// Excess-of-mass selection; returns a flag per cluster (index = label − n).
fn select_clusters_eom(tree: &CondensedTree, n: usize) -> Vec<bool> {
    let k = tree.n_clusters;
    let mut birth = vec![0.0f64; k];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); k];
    for e in &tree.edges {
        if e.child >= n {
            birth[e.child - n] = e.lambda;
            children[e.parent - n].push(e.child - n);
        }
    }
    let mut stability = vec![0.0f64; k];
    for e in &tree.edges {
        let p = e.parent - n;
        let contrib = (e.lambda - birth[p]) * e.child_size as f64;
        if contrib.is_finite() {
            stability[p] += contrib;
        } else {
            stability[p] = f64::INFINITY;
        }
    }

    let mut selected = vec![false; k];
    for (c, kids) in children.iter().enumerate() {
        if kids.is_empty() {
            selected[c] = true;
        }
    }
    // Children always carry larger labels than their parent, so descending order is bottom-up.
    for c in (1..k).rev() {
        if children[c].is_empty() {
            continue;
        }
        let subtree: f64 = children[c].iter().map(|&ch| stability[ch]).sum();
        if subtree > stability[c] {
            selected[c] = false;
            stability[c] = subtree;
        } else {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(d) = stack.pop() {
                selected[d] = false;
                stack.extend(children[d].iter().copied());
            }
        }
    }
    selected[0] = false;
    selected
}

fn label_points(tree: &CondensedTree, selected: &[bool], n: usize) -> ClusterLabeling {
    let k = tree.n_clusters;
    let mut cluster_parent = vec![usize::MAX; k];
    let mut point_parent = vec![usize::MAX; n];
    for e in &tree.edges {
        if e.child >= n {
            cluster_parent[e.child - n] = e.parent - n;
        } else {
            point_parent[e.child] = e.parent - n;
        }
    }
    let mut dense = vec![-1i32; k];
    let mut next = 0;
    for c in 0..k {
        if selected[c] {
            dense[c] = next;
            next += 1;
        }
    }
    let labels = point_parent
        .iter()
        .map(|&start| {
            let mut c = start;
            while c != usize::MAX {
                if selected[c] {
                    return dense[c];
                }
                c = cluster_parent[c];
            }
            NOISE
        })
        .collect();
    ClusterLabeling {
        labels,
        n_clusters: next as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blob(rng: &mut ChaCha8Rng, cx: f64, cy: f64, sd: f64, n: usize) -> Vec<[f64; 2]> {
        let nd = Normal::new(0.0, sd).unwrap();
        (0..n)
            .map(|_| [cx + nd.sample(rng), cy + nd.sample(rng)])
            .collect()
    }

    #[test]
    fn below_min_cluster_size_is_all_noise() {
        let pts = [[0.1, 0.1], [0.1, 0.1001], [0.5, 0.5], [0.9, 0.2]];
        let l = hdbscan(&pts, HdbscanParams::default());
        assert_eq!(l.labels, vec![-1; 4]);
        assert_eq!(l.n_clusters, 0);
    }

    #[test]
    fn two_blobs_and_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts = blob(&mut rng, 0.3, 0.3, 0.01, 20);
        pts.extend(blob(&mut rng, 0.7, 0.7, 0.01, 20));
        pts.extend([[0.02, 0.98], [0.98, 0.02], [0.03, 0.97]]);
        let l = hdbscan(&pts, HdbscanParams::default());
        assert_eq!(l.n_clusters, 2);
        assert!(l.labels[40..].iter().all(|&x| x == NOISE));
        // each blob is (mostly) one cluster and the blobs differ
        assert_ne!(l.labels[0], l.labels[20]);
    }

    #[test]
    fn cluster_sizes_respect_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.gen_range(0..60);
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
            let l = hdbscan(&pts, HdbscanParams::default());
            assert_eq!(l.labels.len(), n);
            for c in 0..l.n_clusters as i32 {
                assert!(l.labels.iter().filter(|&&x| x == c).count() >= 5);
            }
        }
    }

    #[test]
    fn duplicates_are_allowed() {
        let mut pts = vec![[0.4, 0.4]; 6];
        pts.extend(vec![[0.6, 0.6]; 6]);
        pts.push([0.0, 1.0]);
        let l = hdbscan(&pts, HdbscanParams::default());
        assert_eq!(l.n_clusters, 2);
        assert_eq!(l.labels[12], NOISE);
    }
}

