//! Clustering-accuracy protocol and non-parametric baselines.
//!
//! Accuracy is computed under one optimal cluster-to-class matching
//! (Hungarian assignment on the confusion matrix, exact in integer
//! arithmetic); the grouped report derives old-class and new-class
//! accuracies from that single global matching rather than re-matching
//! per subset. Semi-supervised k-means forces labeled instances into
//! their class's cluster during the assignment step and seeds the
//! remaining centroids with k-means++.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::rng;

/// Clustering accuracies under a single Hungarian matching.
#[derive(Debug, Clone)]
pub struct AccReport {
    pub acc_all: f64,
    /// Absent when the evaluated set has no old-class instances.
    pub acc_old: Option<f64>,
    /// Absent when the evaluated set has no new-class instances.
    pub acc_new: Option<f64>,
    /// matching[cluster] = matched true-class index (into `class_order`).
    pub matching: Vec<usize>,
    /// Distinct true classes, ascending; index space of the matching.
    pub class_order: Vec<ClassId>,
    /// Per true class: (correctly matched, total) instance counts.
    pub per_class_counts: BTreeMap<ClassId, (usize, usize)>,
}

/// Exact solution of the assignment problem (minimum cost, square
/// matrix) via the O(n^3) potentials algorithm. Returns row_of_col.
fn hungarian_min(cost: &Array2<i64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    const INF: i64 = i64::MAX / 4;
    // 1-indexed work arrays; p[j] = row currently matched to column j
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_of_col = vec![0usize; n];
    for j in 1..=n {
        row_of_col[j - 1] = p[j] - 1;
    }
    row_of_col
}

/// Hungarian-matched clustering accuracy.
///
/// Builds the cluster-by-class confusion matrix over `num_classes`
/// indices, finds the trace-maximizing permutation exactly, and returns
/// the matched accuracy plus `matching[cluster] = class`.
pub fn hungarian_acc(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<(f64, Vec<usize>)> {
    if y_true.is_empty() {
        return Err(Error::invalid_argument("empty evaluation set"));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid_argument(
            "label and prediction lengths differ",
        ));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&v| v >= num_classes) {
        return Err(Error::invalid_argument(format!(
            "index {bad} out of range for {num_classes} classes"
        )));
    }
    let k = num_classes;
    let mut confusion = Array2::<i64>::zeros((k, k));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[(p, t)] += 1;
    }
    // maximize the matched trace: minimize the negated confusion
    let neg = confusion.mapv(|v| -v);
    // hungarian_min assigns a row (cluster) to each column (class);
    // invert the bijection to index per cluster
    let cluster_of_class = hungarian_min(&neg);
    let mut matching = vec![0usize; k];
    for (class, &cluster) in cluster_of_class.iter().enumerate() {
        matching[cluster] = class;
    }
    let correct: i64 = (0..k)
        .map(|cluster| confusion[(cluster, matching[cluster])])
        .sum();
    Ok((correct as f64 / y_true.len() as f64, matching))
}

/// Grouped accuracy protocol: one matching over all instances, then
/// old/new subset accuracies under that same matching.
pub fn grouped_acc(
    y_true: &[ClassId],
    y_pred: &[usize],
    old_classes: &BTreeSet<ClassId>,
) -> Result<AccReport> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::invalid_argument(
            "need matching non-empty labels and predictions",
        ));
    }
    let class_order: Vec<ClassId> = y_true
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index_of: BTreeMap<ClassId, usize> = class_order
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let max_pred = y_pred.iter().copied().max().unwrap_or(0);
    let k = class_order.len().max(max_pred + 1);
    let true_idx: Vec<usize> = y_true.iter().map(|c| index_of[c]).collect();
    let (acc_all, matching) = hungarian_acc(&true_idx, y_pred, k)?;

    let mut per_class_counts: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    let mut old_hits = (0usize, 0usize);
    let mut new_hits = (0usize, 0usize);
    for i in 0..y_true.len() {
        let correct = matching[y_pred[i]] == true_idx[i];
        let entry = per_class_counts.entry(y_true[i]).or_insert((0, 0));
        entry.1 += 1;
        if correct {
            entry.0 += 1;
        }
        let bucket = if old_classes.contains(&y_true[i]) {
            &mut old_hits
        } else {
            &mut new_hits
        };
        bucket.1 += 1;
        if correct {
            bucket.0 += 1;
        }
    }
    let ratio = |(hit, total): (usize, usize)| (total > 0).then(|| hit as f64 / total as f64);
    Ok(AccReport {
        acc_all,
        acc_old: ratio(old_hits),
        acc_new: ratio(new_hits),
        matching,
        class_order,
        per_class_counts,
    })
}

/// Result of (semi-supervised) k-means.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    /// Cluster index per input row.
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Final sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step, for convergence checks.
    pub inertia_trace: Vec<f64>,
    /// Labeled classes in ascending order; class `labeled_class_order[i]`
    /// is pinned to cluster i.
    pub labeled_class_order: Vec<usize>,
}

const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITER: usize = 300;

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Semi-supervised k-means.
///
/// `labeled` maps a row index to its class; the distinct labeled classes
/// (ascending) are pinned to the first clusters, whose centroids start
/// at the labeled class means. Remaining centroids are seeded with
/// k-means++ over all rows. The assignment step forces labeled rows to
/// their class's cluster; unlabeled rows take the nearest centroid.
pub fn ss_kmeans(
    features: &Array2<f64>,
    labeled: &BTreeMap<usize, usize>,
    k: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = features.nrows();
    let d = features.ncols();
    if n == 0 || k == 0 {
        return Err(Error::invalid_argument("need data and at least 1 cluster"));
    }
    if k > n {
        return Err(Error::invalid_argument(format!(
            "k = {k} exceeds the {n} data points"
        )));
    }
    if let Some((&row, _)) = labeled.iter().find(|(&row, _)| row >= n) {
        return Err(Error::invalid_argument(format!(
            "labeled row {row} out of range"
        )));
    }
    let labeled_class_order: Vec<usize> = labeled
        .values()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let num_labeled_classes = labeled_class_order.len();
    if k < num_labeled_classes {
        return Err(Error::invalid_argument(format!(
            "k = {k} below the {num_labeled_classes} labeled classes"
        )));
    }
    let cluster_of_class: BTreeMap<usize, usize> = labeled_class_order
        .iter()
        .enumerate()
        .map(|(cluster, &class)| (class, cluster))
        .collect();

    // labeled class means first
    let mut centroids = Array2::zeros((k, d));
    for (cluster, &class) in labeled_class_order.iter().enumerate() {
        let rows: Vec<usize> = labeled
            .iter()
            .filter(|(_, &c)| c == class)
            .map(|(&r, _)| r)
            .collect();
        for &r in &rows {
            for j in 0..d {
                centroids[(cluster, j)] += features[(r, j)] / rows.len() as f64;
            }
        }
    }
    // k-means++ for the remainder
    let mut stream = rng::stream(seed, 0x60);
    let mut placed = num_labeled_classes;
    if placed == 0 {
        let first = stream.gen_range(0..n);
        centroids.row_mut(0).assign(&features.row(first));
        placed = 1;
    }
    while placed < k {
        let mut d2: Vec<f64> = Vec::with_capacity(n);
        let mut total = 0.0;
        for r in 0..n {
            let best = (0..placed)
                .map(|c| squared_distance(features.row(r), centroids.row(c)))
                .fold(f64::INFINITY, f64::min);
            d2.push(best);
            total += best;
        }
        let pick = if total <= 0.0 {
            stream.gen_range(0..n)
        } else {
            let target = stream.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (r, &w) in d2.iter().enumerate() {
                acc += w;
                if target < acc {
                    pick = r;
                    break;
                }
            }
            pick
        };
        centroids.row_mut(placed).assign(&features.row(pick));
        placed += 1;
    }

    let mut assignment = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0usize;
    for _iter in 0..KMEANS_MAX_ITER {
        iterations += 1;
        // assignment step: labeled rows are pinned to their class cluster
        for (r, slot) in assignment.iter_mut().enumerate() {
            *slot = match labeled.get(&r) {
                Some(class) => cluster_of_class[class],
                None => {
                    let mut best = (f64::INFINITY, 0usize);
                    for c in 0..k {
                        let dist = squared_distance(features.row(r), centroids.row(c));
                        if dist < best.0 {
                            best = (dist, c);
                        }
                    }
                    best.1
                }
            };
        }
        // empty-cluster rescue: move the centroid onto the point farthest
        // from its current centroid (strictly decreases inertia)
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        let mut stolen: BTreeSet<usize> = BTreeSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (f64::NEG_INFINITY, usize::MAX);
            for r in 0..n {
                if labeled.contains_key(&r) || stolen.contains(&r) || counts[assignment[r]] <= 1 {
                    continue;
                }
                let dist = squared_distance(features.row(r), centroids.row(assignment[r]));
                if dist > far.0 {
                    far = (dist, r);
                }
            }
            if far.1 != usize::MAX {
                counts[assignment[far.1]] -= 1;
                assignment[far.1] = c;
                counts[c] = 1;
                centroids.row_mut(c).assign(&features.row(far.1));
                stolen.insert(far.1);
            }
        }
        let inertia: f64 = (0..n)
            .map(|r| squared_distance(features.row(r), centroids.row(assignment[r])))
            .sum();
        inertia_trace.push(inertia);

        // update step
        let mut next = Array2::zeros((k, d));
        let mut counts = vec![0usize; k];
        for r in 0..n {
            counts[assignment[r]] += 1;
            for j in 0..d {
                next[(assignment[r], j)] += features[(r, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    next[(c, j)] /= counts[c] as f64;
                }
            } else {
                next.row_mut(c).assign(&centroids.row(c));
            }
        }
        let shift = (0..k)
            .map(|c| squared_distance(centroids.row(c), next.row(c)))
            .fold(0.0f64, f64::max);
        centroids = next;
        if shift.sqrt() < KMEANS_TOL {
            break;
        }
    }
    let inertia: f64 = (0..n)
        .map(|r| squared_distance(features.row(r), centroids.row(assignment[r])))
        .sum();
    Ok(ClusterAssignment {
        assignment,
        centroids,
        inertia,
        iterations,
        inertia_trace,
        labeled_class_order,
    })
}

/// Normalizes each part row-wise, concatenates along the feature axis,
/// then normalizes the result.
pub fn concat_features(z_v: &Array2<f64>, z_t: &Array2<f64>) -> Result<Array2<f64>> {
    if z_v.nrows() != z_t.nrows() {
        return Err(Error::invalid_argument(format!(
            "row mismatch: {} visual vs {} text",
            z_v.nrows(),
            z_t.nrows()
        )));
    }
    let n = z_v.nrows();
    let (dv, dt) = (z_v.ncols(), z_t.ncols());
    let mut out = Array2::zeros((n, dv + dt));
    for i in 0..n {
        let nv = z_v.row(i).dot(&z_v.row(i)).sqrt().max(1e-12);
        for j in 0..dv {
            out[(i, j)] = z_v[(i, j)] / nv;
        }
        let nt = z_t.row(i).dot(&z_t.row(i)).sqrt().max(1e-12);
        for j in 0..dt {
            out[(i, dv + j)] = z_t[(i, j)] / nt;
        }
        let total = out.row(i).dot(&out.row(i)).sqrt().max(1e-12);
        let mut row = out.row_mut(i);
        row /= total;
    }
    Ok(out)
}

/// Outcome of class-number estimation.
#[derive(Debug, Clone)]
pub struct KEstimate {
    pub k_hat: usize,
    /// (k, held-out labeled accuracy) per candidate, ascending k.
    pub scores: Vec<(usize, f64)>,
}

/// Estimates the class count by scanning `k_range`.
///
/// For each k, half of the labeled rows (per class, seeded) constrain a
/// semi-supervised k-means run over all features; the matched accuracy
/// on the held-out labeled half scores that k. Ties resolve to the
/// smallest k.
pub fn estimate_class_number(
    features: &Array2<f64>,
    labeled: &BTreeMap<usize, usize>,
    k_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<KEstimate> {
    if k_range.is_empty() {
        return Err(Error::invalid_argument("empty k range"));
    }
    let classes: BTreeSet<usize> = labeled.values().copied().collect();
    if classes.is_empty() {
        return Err(Error::invalid_argument(
            "class estimation needs labeled instances for scoring",
        ));
    }
    if *k_range.start() < classes.len() || *k_range.end() > features.nrows() {
        return Err(Error::invalid_argument(format!(
            "k range must lie within [{}, {}]",
            classes.len(),
            features.nrows()
        )));
    }

    // split each class's labeled rows into constraint and probe halves
    let mut constraints: BTreeMap<usize, usize> = BTreeMap::new();
    let mut probe: Vec<(usize, usize)> = Vec::new();
    for &class in &classes {
        let mut rows: Vec<usize> = labeled
            .iter()
            .filter(|(_, &c)| c == class)
            .map(|(&r, _)| r)
            .collect();
        let mut stream = rng::stream(seed, 0x70 + class as u64);
        rng::shuffle(&mut rows, &mut stream);
        let keep = rows.len().div_ceil(2);
        for (i, &r) in rows.iter().enumerate() {
            if i < keep {
                constraints.insert(r, class);
            } else {
                probe.push((r, class));
            }
        }
    }
    if probe.is_empty() {
        return Err(Error::invalid_argument(
            "too few labeled instances to hold out a scoring half",
        ));
    }

    let class_index: BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for k in k_range {
        let clustering = ss_kmeans(features, &constraints, k, seed)?;
        let y_true: Vec<usize> = probe.iter().map(|&(_, c)| class_index[&c]).collect();
        let y_pred: Vec<usize> = probe
            .iter()
            .map(|&(r, _)| clustering.assignment[r])
            .collect();
        let num = k.max(classes.len());
        let (acc, _) = hungarian_acc(&y_true, &y_pred, num)?;
        scores.push((k, acc));
        let better = match best {
            None => true,
            Some((_, best_acc)) => acc > best_acc,
        };
        if better {
            best = Some((k, acc));
        }
    }
    let (k_hat, _) = best.expect("non-empty range");
    Ok(KEstimate { k_hat, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // -- hungarian ----------------------------------------------------------

    /// Factorial brute force over all cluster-to-class permutations.
    fn brute_force_acc(y_true: &[usize], y_pred: &[usize], k: usize) -> f64 {
        fn permutations(k: usize) -> Vec<Vec<usize>> {
            if k == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(k - 1) {
                for slot in 0..k {
                    let mut q: Vec<usize> = p
                        .iter()
                        .map(|&v| if v >= slot { v + 1 } else { v })
                        .collect();
                    q.push(slot);
                    out.push(q);
                }
            }
            out
        }
        let mut best = 0usize;
        for perm in permutations(k) {
            let correct = y_true
                .iter()
                .zip(y_pred)
                .filter(|&(&t, &p)| perm[p] == t)
                .count();
            best = best.max(correct);
        }
        best as f64 / y_true.len() as f64
    }

    #[test]
    fn hungarian_swap_case() {
        let (acc, _) = hungarian_acc(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn hungarian_half_case() {
        let (acc, _) = hungarian_acc(&[0, 1], &[0, 0], 2).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        assert!(hungarian_acc(&[], &[], 2).is_err());
        assert!(hungarian_acc(&[0, 1], &[0], 2).is_err());
        assert!(hungarian_acc(&[0, 5], &[0, 1], 2).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut r = rng::stream(80, 1);
        for _ in 0..60 {
            let k = r.gen_range(2..=6usize);
            let n = r.gen_range(1..=40usize);
            let y_true: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let (acc, _) = hungarian_acc(&y_true, &y_pred, k).unwrap();
            let expect = brute_force_acc(&y_true, &y_pred, k);
            assert_eq!(acc, expect, "k={k} n={n}");
        }
    }

    #[test]
    fn hungarian_invariant_under_prediction_relabeling() {
        let mut r = rng::stream(81, 1);
        let k = 5;
        let y_true: Vec<usize> = (0..30).map(|_| r.gen_range(0..k)).collect();
        let y_pred: Vec<usize> = (0..30).map(|_| r.gen_range(0..k)).collect();
        let (base, _) = hungarian_acc(&y_true, &y_pred, k).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let relabeled: Vec<usize> = y_pred.iter().map(|&p| perm[p]).collect();
        let (acc, _) = hungarian_acc(&y_true, &relabeled, k).unwrap();
        assert_eq!(acc, base);
    }

    // -- grouped accuracy ----------------------------------------------------

    #[test]
    fn grouped_perfect_predictions() {
        let y_true: Vec<ClassId> = vec![0, 0, 1, 1, 2, 2];
        let y_pred = vec![2, 2, 0, 0, 1, 1];
        let old: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let report = grouped_acc(&y_true, &y_pred, &old).unwrap();
        assert_eq!(report.acc_all, 1.0);
        assert_eq!(report.acc_old, Some(1.0));
        assert_eq!(report.acc_new, Some(1.0));
    }

    #[test]
    fn grouped_accounting_old_right_new_wrong() {
        // old classes land in their own clusters; new classes collapse
        // into the old clusters and can never be matched correctly
        let y_true: Vec<ClassId> = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let y_pred = vec![0, 0, 1, 1, 0, 1, 1, 0];
        let old: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let report = grouped_acc(&y_true, &y_pred, &old).unwrap();
        assert_eq!(report.acc_old, Some(1.0));
        assert_eq!(report.acc_new, Some(0.0));
        assert_eq!(report.acc_all, 0.5);
    }

    #[test]
    fn grouped_absent_subsets_are_none() {
        let y_true: Vec<ClassId> = vec![0, 1];
        let y_pred = vec![0, 1];
        let all_old: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let report = grouped_acc(&y_true, &y_pred, &all_old).unwrap();
        assert_eq!(report.acc_new, None);
        let none_old: BTreeSet<ClassId> = BTreeSet::new();
        let report = grouped_acc(&y_true, &y_pred, &none_old).unwrap();
        assert_eq!(report.acc_old, None);
    }

    #[test]
    fn grouped_uses_one_global_matching() {
        // Crafted so a subset-local matching would beat the global one:
        // globally cluster 0 must bind to class 0 (3 hits), costing the
        // new subset its local optimum of pairing cluster 0 with class 2.
        let y_true: Vec<ClassId> = vec![0, 0, 0, 2, 2];
        let y_pred = vec![0, 0, 0, 0, 1];
        let old: BTreeSet<ClassId> = [0].into_iter().collect();
        let report = grouped_acc(&y_true, &y_pred, &old).unwrap();
        assert_eq!(report.acc_old, Some(1.0));
        assert_eq!(report.acc_new, Some(0.5));
        assert_eq!(report.acc_all, 0.8);
        // independent recount from the returned matching
        let idx_of: BTreeMap<ClassId, usize> = report
            .class_order
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        let recount = y_true
            .iter()
            .zip(&y_pred)
            .filter(|&(t, &p)| report.matching[p] == idx_of[t])
            .count();
        assert_eq!(recount, 4);
    }

    #[test]
    fn grouped_hand_case_with_manual_recount() {
        // 12 instances, 4 classes (2 old, 2 new), imperfect clustering.
        let y_true: Vec<ClassId> = vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3];
        let y_pred = vec![0, 0, 1, 1, 1, 1, 2, 2, 3, 3, 3, 2];
        let old: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let report = grouped_acc(&y_true, &y_pred, &old).unwrap();
        // identity matching is optimal here; hand recount:
        // old correct: rows 0,1 (class 0) + rows 3,4,5 (class 1) = 5 of 6
        // new correct: rows 6,7 (class 2) + rows 9,10 (class 3) = 4 of 6
        assert_eq!(report.acc_old, Some(5.0 / 6.0));
        assert_eq!(report.acc_new, Some(4.0 / 6.0));
        assert_eq!(report.acc_all, 9.0 / 12.0);
        assert_eq!(report.per_class_counts[&0], (2, 3));
        assert_eq!(report.per_class_counts[&3], (2, 3));
    }

    // -- ss k-means -----------------------------------------------------------

    fn blobs(k: usize, per: usize, d: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = rng::stream(seed, 0x99);
        let mut centers = Array2::zeros((k, d));
        for c in 0..k {
            for j in 0..d {
                centers[(c, j)] = r.gen_range(-10.0..10.0);
            }
        }
        let mut x = Array2::zeros((k * per, d));
        let mut y = Vec::with_capacity(k * per);
        for c in 0..k {
            for i in 0..per {
                for j in 0..d {
                    x[(c * per + i, j)] = centers[(c, j)] + r.gen_range(-spread..spread);
                }
            }
            y.extend(std::iter::repeat_n(c, per));
        }
        (x, y)
    }

    #[test]
    fn kmeans_fully_labeled_is_a_fixpoint() {
        let (x, y) = blobs(3, 8, 4, 0.5, 1);
        let labeled: BTreeMap<usize, usize> = y.iter().copied().enumerate().collect();
        let result = ss_kmeans(&x, &labeled, 3, 0).unwrap();
        assert_eq!(result.assignment, y);
        // centroids are exactly the class means
        for c in 0..3 {
            let rows: Vec<usize> = (0..24).filter(|&r| y[r] == c).collect();
            for j in 0..4 {
                let mean: f64 = rows.iter().map(|&r| x[(r, j)]).sum::<f64>() / rows.len() as f64;
                assert!((result.centroids[(c, j)] - mean).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn kmeans_unconstrained_assigns_nearest() {
        let (x, _) = blobs(3, 10, 4, 0.5, 2);
        let result = ss_kmeans(&x, &BTreeMap::new(), 3, 7).unwrap();
        for r in 0..x.nrows() {
            let own = squared_distance(x.row(r), result.centroids.row(result.assignment[r]));
            for c in 0..3 {
                assert!(own <= squared_distance(x.row(r), result.centroids.row(c)) + 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_separable_blobs_recover_labels() {
        let (x, y) = blobs(4, 15, 6, 0.3, 3);
        // label half of classes 0 and 1
        let labeled: BTreeMap<usize, usize> = (0..60)
            .filter(|&r| y[r] < 2 && r % 2 == 0)
            .map(|r| (r, y[r]))
            .collect();
        let result = ss_kmeans(&x, &labeled, 4, 11).unwrap();
        let (acc, _) = hungarian_acc(&y, &result.assignment, 4).unwrap();
        assert_eq!(acc, 1.0, "separable blobs must cluster perfectly");
    }

    #[test]
    fn kmeans_inertia_never_increases() {
        let (x, y) = blobs(5, 12, 5, 2.5, 4);
        let labeled: BTreeMap<usize, usize> = (0..60).step_by(7).map(|r| (r, y[r] % 3)).collect();
        let result = ss_kmeans(&x, &labeled, 6, 13).unwrap();
        for w in result.inertia_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "inertia increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn kmeans_argument_validation() {
        let (x, y) = blobs(2, 5, 3, 0.5, 5);
        let labeled: BTreeMap<usize, usize> = y.iter().copied().enumerate().collect();
        // k below the labeled class count
        assert!(ss_kmeans(&x, &labeled, 1, 0).is_err());
        // k above the point count
        assert!(ss_kmeans(&x, &BTreeMap::new(), 11, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (x, _) = blobs(3, 10, 4, 1.0, 6);
        let a = ss_kmeans(&x, &BTreeMap::new(), 5, 21).unwrap();
        let b = ss_kmeans(&x, &BTreeMap::new(), 5, 21).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.inertia, b.inertia);
    }

    // -- concat ---------------------------------------------------------------

    #[test]
    fn concat_dims_and_normalization() {
        let mut r = rng::stream(82, 1);
        let a = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0));
        let joint = concat_features(&a, &b).unwrap();
        assert_eq!(joint.dim(), (5, 10));
        for row in joint.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() <= 1e-9);
        }
        let short = Array2::zeros((4, 6));
        assert!(concat_features(&a, &short).is_err());
    }

    #[test]
    fn concat_with_self_preserves_cosines() {
        let mut r = rng::stream(83, 1);
        let a = Array2::from_shape_fn((6, 5), |_| r.gen_range(-1.0..1.0));
        let joint = concat_features(&a, &a).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let na = a.row(i).dot(&a.row(i)).sqrt();
                let nb = a.row(j).dot(&a.row(j)).sqrt();
                let cos_a = a.row(i).dot(&a.row(j)) / (na * nb);
                let cos_joint = joint.row(i).dot(&joint.row(j));
                assert!((cos_a - cos_joint).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn concat_zero_text_keeps_visual_ranking() {
        let mut r = rng::stream(84, 1);
        let a = Array2::from_shape_fn((6, 5), |_| r.gen_range(-1.0..1.0));
        let zeros = Array2::zeros((6, 3));
        let joint = concat_features(&a, &zeros).unwrap();
        // cosine ranking against row 0 must match the visual-only ranking
        let rank = |m: &Array2<f64>| -> Vec<usize> {
            let mut idx: Vec<usize> = (1..6).collect();
            let cos = |i: usize| {
                let ni = m.row(i).dot(&m.row(i)).sqrt();
                let n0 = m.row(0).dot(&m.row(0)).sqrt();
                m.row(0).dot(&m.row(i)) / (ni * n0)
            };
            idx.sort_by(|&i, &j| cos(j).partial_cmp(&cos(i)).unwrap());
            idx
        };
        assert_eq!(rank(&a), rank(&joint));
    }

    // -- class number estimation ------------------------------------------------

    /// Labeled classes form a tight group; unlabeled classes sit far out,
    /// so starving k of centroids makes them invade and drag the labeled
    /// clusters. This is the regime where held-out labeled accuracy
    /// carries a class-count signal.
    fn invasion_set(seed: u64, per: usize) -> (Array2<f64>, Vec<usize>) {
        let d = 6;
        let mut r = rng::stream(seed, 0x99);
        let mut centers = Array2::zeros((4, d));
        centers[(0, 0)] = -1.5;
        centers[(1, 0)] = 1.5;
        centers[(2, 1)] = 10.0;
        centers[(3, 2)] = -10.0;
        let mut x = Array2::zeros((4 * per, d));
        let mut y = Vec::new();
        for c in 0..4 {
            for i in 0..per {
                for j in 0..d {
                    x[(c * per + i, j)] = centers[(c, j)] + r.gen_range(-1.0..1.0);
                }
            }
            y.extend(std::iter::repeat_n(c, per));
        }
        (x, y)
    }

    #[test]
    fn estimate_recovers_blob_count() {
        for seed in [7u64, 8, 9, 10, 11] {
            let (x, y) = invasion_set(seed, 16);
            // classes 0 and 1 are "old": label half of each
            let labeled: BTreeMap<usize, usize> = (0..64)
                .filter(|&r| y[r] < 2 && r % 2 == 0)
                .map(|r| (r, y[r]))
                .collect();
            let estimate = estimate_class_number(&x, &labeled, 2..=8, 31).unwrap();
            assert_eq!(
                estimate.k_hat, 4,
                "seed {seed} scores: {:?}",
                estimate.scores
            );
            assert_eq!(estimate.scores.len(), 7);
        }
    }

    #[test]
    fn estimate_singleton_range_echoes() {
        let (x, y) = blobs(3, 10, 4, 0.4, 8);
        let labeled: BTreeMap<usize, usize> = (0..30)
            .filter(|&r| y[r] < 2 && r % 2 == 0)
            .map(|r| (r, y[r]))
            .collect();
        let estimate = estimate_class_number(&x, &labeled, 3..=3, 5).unwrap();
        assert_eq!(estimate.k_hat, 3);
        assert_eq!(estimate.scores.len(), 1);
    }

    #[test]
    fn estimate_validates_range() {
        let (x, y) = blobs(3, 4, 4, 0.4, 9);
        let labeled: BTreeMap<usize, usize> = y.iter().copied().enumerate().collect();
        assert!(estimate_class_number(&x, &labeled, 1..=4, 0).is_err());
        assert!(estimate_class_number(&x, &labeled, 3..=200, 0).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert!(estimate_class_number(&x, &labeled, empty, 0).is_err());
    }
}
