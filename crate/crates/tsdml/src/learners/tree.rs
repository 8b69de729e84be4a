//! The shared tree-growing engine.
//!
//! One grower serves every learner in this crate, because all of them reduce
//! to the same primitive: a binary regression tree on weighted, possibly
//! multi-output targets, split to maximize the weighted sum-of-squares
//! reduction
//!
//! ```text
//! gain = sum_k [ S_Lk^2/W_L + S_Rk^2/W_R - S_k^2/W ]
//! ```
//!
//! where `S` is the weighted target sum and `W` the weight sum of a node.
//!
//! * Regression forests: weights are bootstrap counts, one output.
//! * Classification forests: one-hot targets; the gain above equals the Gini
//!   improvement, and leaf means are per-class frequencies.
//! * Boosted trees: weight = hessian `h`, target = `-g/h`; leaf means are the
//!   Newton step `-G/H` and the gain is the usual `G^2/H` form.
//!
//! Growth is level-order over presorted feature columns: each level costs one
//! pass over every column, with per-node running sums, instead of re-sorting
//! inside every node. Depth is capped, so the worst case is
//! `max_depth * n_features * n_rows` regardless of tree shape.

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

const LEAF: u32 = u32::MAX;
const INACTIVE: u32 = u32::MAX;
const NO_FEATURE: u32 = u32::MAX;

/// Features in column-major order, so split scans and sort construction walk
/// contiguous memory.
pub(crate) struct ColMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl ColMatrix {
    pub fn from_rows(x: ArrayView2<'_, f64>) -> Self {
        let (n_rows, n_cols) = x.dim();
        let mut data = vec![0.0; n_rows * n_cols];
        for (j, col) in x.columns().into_iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                data[j * n_rows + i] = *v;
            }
        }
        Self { data, n_rows, n_cols }
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.n_rows + row]
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }
}

/// Per-column argsort of the training matrix, shared read-only by every tree
/// grown on the same data.
pub(crate) struct SortedColumns {
    order: Vec<u32>,
    n_rows: usize,
}

impl SortedColumns {
    pub fn build(x: &ColMatrix) -> Self {
        let n = x.n_rows();
        let mut order = Vec::with_capacity(n * x.n_cols());
        let mut idx: Vec<u32> = Vec::with_capacity(n);
        for j in 0..x.n_cols() {
            let col = x.col(j);
            idx.clear();
            idx.extend(0..n as u32);
            idx.sort_unstable_by(|&a, &b| {
                col[a as usize]
                    .total_cmp(&col[b as usize])
                    .then(a.cmp(&b))
            });
            order.extend_from_slice(&idx);
        }
        Self { order, n_rows: n }
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[u32] {
        &self.order[j * self.n_rows..(j + 1) * self.n_rows]
    }
}

#[derive(Clone, Debug)]
struct Node {
    /// Split feature, or `LEAF`; a leaf stores its value offset in `left`.
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
}

/// A fitted binary tree. Interior nodes route `x[feature] <= threshold` to
/// the left child; leaves hold `n_out` values.
#[derive(Clone, Debug)]
pub(crate) struct Tree {
    nodes: Vec<Node>,
    values: Vec<f64>,
    n_out: usize,
}

impl Tree {
    /// Leaf values for one input row.
    #[inline]
    pub fn leaf(&self, x: &[f64]) -> &[f64] {
        let mut id = 0usize;
        loop {
            let node = &self.nodes[id];
            if node.feature == LEAF {
                let off = node.left as usize;
                return &self.values[off..off + self.n_out];
            }
            id = if x[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    /// Adds `scale * leaf(x)` onto `out`.
    #[inline]
    pub fn accumulate(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(self.leaf(x)) {
            *o += scale * v;
        }
    }

    /// Leaf values for one row of a column-major matrix (training-time
    /// prediction without materializing row slices).
    #[inline]
    pub fn leaf_for_row(&self, x: &ColMatrix, row: usize) -> &[f64] {
        let mut id = 0usize;
        loop {
            let node = &self.nodes[id];
            if node.feature == LEAF {
                let off = node.left as usize;
                return &self.values[off..off + self.n_out];
            }
            id = if x.get(row, node.feature as usize) <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    #[cfg(test)]
    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }
}

pub(crate) struct GrowParams {
    /// Number of split levels below the root (0 forces a single leaf).
    pub max_depth: u32,
    /// Minimum weight-sum either child must keep for a split to be legal.
    pub min_child_weight: f64,
    /// Candidate features drawn (without replacement) per node.
    pub mtry: usize,
}

/// One level of the tree under construction: per-node aggregates plus the
/// best split found so far. Stored as parallel flat arrays so the scan stays
/// in contiguous memory.
struct Level {
    node_id: Vec<u32>,
    weight: Vec<f64>,
    count: Vec<u32>,
    /// Weighted target sums, `n_slots * n_out`.
    sum: Vec<f64>,
    /// Weighted sum of squared targets (impurity scale / purity test).
    sum_sq: Vec<f64>,
    /// `sum_k S_k^2 / W` for gain baselines.
    score: Vec<f64>,
    splittable: Vec<bool>,
    best_gain: Vec<f64>,
    best_feature: Vec<u32>,
    best_threshold: Vec<f64>,
}

impl Level {
    fn with_slots(n_slots: usize, n_out: usize) -> Self {
        Self {
            node_id: vec![0; n_slots],
            weight: vec![0.0; n_slots],
            count: vec![0; n_slots],
            sum: vec![0.0; n_slots * n_out],
            sum_sq: vec![0.0; n_slots],
            score: vec![0.0; n_slots],
            splittable: vec![false; n_slots],
            best_gain: vec![0.0; n_slots],
            best_feature: vec![NO_FEATURE; n_slots],
            best_threshold: vec![0.0; n_slots],
        }
    }

    fn len(&self) -> usize {
        self.node_id.len()
    }
}

/// Grows one tree. `y` is row-major `n_rows * n_out`; rows with zero weight
/// are ignored. `features` is the candidate pool (a tree-level subsample for
/// boosting, all columns for forests); `mtry` of them are drawn per node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn grow_tree(
    x: &ColMatrix,
    sorted: &SortedColumns,
    y: &[f64],
    n_out: usize,
    weight: &[f64],
    features: &[u32],
    params: &GrowParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let n = x.n_rows();
    debug_assert_eq!(y.len(), n * n_out);
    debug_assert_eq!(weight.len(), n);
    debug_assert!(!features.is_empty() && params.mtry >= 1);

    let mut tree = Tree {
        nodes: vec![Node { feature: LEAF, threshold: 0.0, left: 0, right: 0 }],
        values: Vec::new(),
        n_out,
    };

    // Root aggregates; rows with zero weight never enter a level.
    let mut position: Vec<u32> = vec![INACTIVE; n];
    let mut level = Level::with_slots(1, n_out);
    for (r, &w) in weight.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        position[r] = 0;
        level.weight[0] += w;
        level.count[0] += 1;
        let mut sq = 0.0;
        for k in 0..n_out {
            let v = y[r * n_out + k];
            level.sum[k] += w * v;
            sq += v * v;
        }
        level.sum_sq[0] += w * sq;
    }

    let use_masks = params.mtry < features.len();
    let mask_words = if use_masks { (x.n_cols() + 63) / 64 } else { 0 };
    let mut masks: Vec<u64> = Vec::new();

    // Scan state, one slot per node in the level; reused across features.
    let mut left_w: Vec<f64> = Vec::new();
    let mut left_count: Vec<u32> = Vec::new();
    let mut left_sum: Vec<f64> = Vec::new();
    let mut last_x: Vec<f64> = Vec::new();

    let mut depth = 0u32;
    loop {
        let n_slots = level.len();
        let mut any_splittable = false;
        for sl in 0..n_slots {
            let w = level.weight[sl];
            let mut score = 0.0;
            if w > 0.0 {
                for k in 0..n_out {
                    let s = level.sum[sl * n_out + k];
                    score += s * s / w;
                }
            }
            level.score[sl] = score;
            // Purity: the within-node sum of squares, measured against the
            // raw second-moment scale to absorb rounding noise.
            let sse = level.sum_sq[sl] - score;
            let tol = 1e-12 * level.sum_sq[sl].max(1e-300);
            level.splittable[sl] = depth < params.max_depth
                && level.count[sl] >= 2
                && w >= 2.0 * params.min_child_weight
                && sse > tol;
            level.best_gain[sl] = tol;
            any_splittable |= level.splittable[sl];
        }

        if any_splittable {
            if use_masks {
                masks.clear();
                masks.resize(n_slots * mask_words, 0);
                for sl in 0..n_slots {
                    if !level.splittable[sl] {
                        continue;
                    }
                    for pos in sample(rng, features.len(), params.mtry) {
                        let f = features[pos] as usize;
                        masks[sl * mask_words + f / 64] |= 1u64 << (f % 64);
                    }
                }
            }

            left_w.clear();
            left_w.resize(n_slots, 0.0);
            left_count.clear();
            left_count.resize(n_slots, 0);
            left_sum.clear();
            left_sum.resize(n_slots * n_out, 0.0);
            last_x.clear();
            last_x.resize(n_slots, 0.0);

            for &j in features {
                let j = j as usize;
                left_w.iter_mut().for_each(|v| *v = 0.0);
                left_count.iter_mut().for_each(|v| *v = 0);
                left_sum.iter_mut().for_each(|v| *v = 0.0);
                let col = x.col(j);
                let (word, bit) = (j / 64, 1u64 << (j % 64));
                for &r in sorted.col(j) {
                    let slot = position[r as usize];
                    if slot == INACTIVE {
                        continue;
                    }
                    let sl = slot as usize;
                    if !level.splittable[sl] {
                        continue;
                    }
                    if use_masks && masks[sl * mask_words + word] & bit == 0 {
                        continue;
                    }
                    let xv = col[r as usize];
                    if left_count[sl] > 0 && xv > last_x[sl] {
                        let lw = left_w[sl];
                        let rw = level.weight[sl] - lw;
                        if lw >= params.min_child_weight && rw >= params.min_child_weight {
                            let mut split_score = 0.0;
                            for k in 0..n_out {
                                let ls = left_sum[sl * n_out + k];
                                let rs = level.sum[sl * n_out + k] - ls;
                                split_score += ls * ls / lw + rs * rs / rw;
                            }
                            let gain = split_score - level.score[sl];
                            if gain > level.best_gain[sl] {
                                // Midpoint threshold; fall back to the lower
                                // value if rounding would push it onto xv.
                                let mut thr = last_x[sl] + 0.5 * (xv - last_x[sl]);
                                if thr >= xv {
                                    thr = last_x[sl];
                                }
                                level.best_gain[sl] = gain;
                                level.best_feature[sl] = j as u32;
                                level.best_threshold[sl] = thr;
                            }
                        }
                    }
                    let wr = weight[r as usize];
                    left_count[sl] += 1;
                    left_w[sl] += wr;
                    for k in 0..n_out {
                        left_sum[sl * n_out + k] += wr * y[r as usize * n_out + k];
                    }
                    last_x[sl] = xv;
                }
            }
        }

        // Finalize leaves; open children for the nodes that split.
        let mut child_slot: Vec<u32> = vec![INACTIVE; n_slots];
        let mut next_slots = 0usize;
        for sl in 0..n_slots {
            let split = level.splittable[sl] && level.best_feature[sl] != NO_FEATURE;
            if split {
                let left_id = tree.nodes.len() as u32;
                tree.nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0 });
                tree.nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0 });
                tree.nodes[level.node_id[sl] as usize] = Node {
                    feature: level.best_feature[sl],
                    threshold: level.best_threshold[sl],
                    left: left_id,
                    right: left_id + 1,
                };
                child_slot[sl] = next_slots as u32;
                next_slots += 2;
            } else {
                let off = tree.values.len() as u32;
                let w = level.weight[sl];
                for k in 0..n_out {
                    let s = level.sum[sl * n_out + k];
                    tree.values.push(if w > 0.0 { s / w } else { 0.0 });
                }
                let id = level.node_id[sl] as usize;
                tree.nodes[id].feature = LEAF;
                tree.nodes[id].left = off;
            }
        }

        if next_slots == 0 {
            break;
        }

        // Route rows to their child and rebuild aggregates from scratch, so
        // child statistics never inherit accumulated rounding error.
        let mut next = Level::with_slots(next_slots, n_out);
        for sl in 0..n_slots {
            if child_slot[sl] == INACTIVE {
                continue;
            }
            let base = child_slot[sl] as usize;
            let node = &tree.nodes[level.node_id[sl] as usize];
            next.node_id[base] = node.left;
            next.node_id[base + 1] = node.right;
        }
        for r in 0..n {
            let slot = position[r];
            if slot == INACTIVE {
                continue;
            }
            let sl = slot as usize;
            if child_slot[sl] == INACTIVE {
                position[r] = INACTIVE;
                continue;
            }
            let node = &tree.nodes[level.node_id[sl] as usize];
            let side = usize::from(x.get(r, node.feature as usize) > node.threshold);
            let dst = child_slot[sl] as usize + side;
            position[r] = dst as u32;
            let w = weight[r];
            next.weight[dst] += w;
            next.count[dst] += 1;
            let mut sq = 0.0;
            for k in 0..n_out {
                let v = y[r * n_out + k];
                next.sum[dst * n_out + k] += w * v;
                sq += v * v;
            }
            next.sum_sq[dst] += w * sq;
        }

        level = next;
        depth += 1;
    }

    tree
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn cols(rows: &[&[f64]]) -> (ColMatrix, SortedColumns) {
        let n = rows.len();
        let f = rows[0].len();
        let a = Array2::from_shape_fn((n, f), |(i, j)| rows[i][j]);
        let x = ColMatrix::from_rows(a.view());
        let s = SortedColumns::build(&x);
        (x, s)
    }

    fn grow(
        x: &ColMatrix,
        s: &SortedColumns,
        y: &[f64],
        w: &[f64],
        params: &GrowParams,
    ) -> Tree {
        let features: Vec<u32> = (0..x.n_cols() as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        grow_tree(x, s, y, 1, w, &features, params, &mut rng)
    }

    fn deep() -> GrowParams {
        GrowParams { max_depth: 50, min_child_weight: 1.0, mtry: 1 }
    }

    #[test]
    fn constant_target_stays_a_single_leaf() {
        let (x, s) = cols(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let t = grow(&x, &s, &[5.5; 4], &[1.0; 4], &deep());
        assert_eq!(t.n_leaves(), 1);
        assert_eq!(t.leaf(&[9.0]), &[5.5]);
    }

    #[test]
    fn distinct_targets_grow_to_pure_leaves() {
        let (x, s) = cols(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let y = [10.0, -3.0, 4.0, 8.0];
        let t = grow(&x, &s, &y, &[1.0; 4], &deep());
        for (i, want) in y.iter().enumerate() {
            assert_eq!(t.leaf(&[i as f64])[0], *want);
        }
    }

    #[test]
    fn threshold_is_the_midpoint_between_adjacent_values() {
        let (x, s) = cols(&[&[0.0], &[0.0], &[2.0], &[2.0]]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let t = grow(&x, &s, &y, &[1.0; 4], &deep());
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.leaf(&[1.0])[0], 0.0); // 1.0 <= midpoint 1.0
        assert_eq!(t.leaf(&[1.0001])[0], 1.0);
    }

    #[test]
    fn min_child_weight_blocks_unbalanced_splits() {
        let (x, s) = cols(&[&[1.0], &[2.0], &[3.0]]);
        let y = [1.0, 2.0, 3.0];
        let params = GrowParams { max_depth: 50, min_child_weight: 2.0, mtry: 1 };
        let t = grow(&x, &s, &y, &[1.0; 3], &params);
        // Any split leaves one side with weight 1 < 2, so the root is a leaf.
        assert_eq!(t.n_leaves(), 1);
        assert_eq!(t.leaf(&[1.0])[0], 2.0);
    }

    #[test]
    fn depth_zero_forces_the_mean() {
        let (x, s) = cols(&[&[0.0], &[1.0]]);
        let params = GrowParams { max_depth: 0, min_child_weight: 1.0, mtry: 1 };
        let t = grow(&x, &s, &[2.0, 4.0], &[1.0; 2], &params);
        assert_eq!(t.n_leaves(), 1);
        assert_eq!(t.leaf(&[0.0])[0], 3.0);
    }

    #[test]
    fn zero_weight_rows_are_invisible() {
        let (x, s) = cols(&[&[0.0], &[1.0], &[2.0]]);
        let y = [1.0, 100.0, 3.0];
        let t = grow(&x, &s, &y, &[1.0, 0.0, 1.0], &deep());
        // The weight-0 middle row must not influence any leaf.
        assert_eq!(t.leaf(&[0.0])[0], 1.0);
        assert_eq!(t.leaf(&[2.0])[0], 3.0);
        assert_eq!(t.n_leaves(), 2);
    }

    #[test]
    fn integer_weights_match_row_duplication() {
        let (x2, s2) = cols(&[&[0.0], &[1.0], &[1.0], &[2.0]]);
        let dup = grow(&x2, &s2, &[1.0, 5.0, 5.0, 0.0], &[1.0; 4], &deep());
        let (x1, s1) = cols(&[&[0.0], &[1.0], &[2.0]]);
        let weighted = grow(&x1, &s1, &[1.0, 5.0, 0.0], &[1.0, 2.0, 1.0], &deep());
        for q in [-1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
            assert!((dup.leaf(&[q])[0] - weighted.leaf(&[q])[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_output_leaves_hold_per_output_means() {
        let (x, s) = cols(&[&[0.0], &[0.0], &[5.0], &[5.0]]);
        // Two outputs: one-hot-ish targets.
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let features = [0u32];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = grow_tree(
            &x,
            &s,
            &y,
            2,
            &[1.0; 4],
            &features,
            &GrowParams { max_depth: 50, min_child_weight: 1.0, mtry: 1 },
            &mut rng,
        );
        assert_eq!(t.leaf(&[0.0]), &[1.0, 0.0]);
        assert_eq!(t.leaf(&[5.0]), &[0.0, 1.0]);
    }
}
