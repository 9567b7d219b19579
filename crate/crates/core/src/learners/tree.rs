//! Axis-aligned CART used by the forest (Gini) and the booster (squared error).
//!
//! Each node keeps one index list per feature, sorted by that feature, and a
//! split partitions all lists stably, so no node ever re-sorts. Split
//! thresholds are observed training values with the rule `x <= threshold`
//! going left; predictions therefore depend only on the order of feature
//! values, not on their spacing.

use rand::Rng;

/// Column-major copy of a row matrix.
#[derive(Debug, Clone)]
pub struct Columns {
    cols: Vec<Vec<f64>>,
    n: usize,
}

impl Columns {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let cols = (0..d).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Self {
            cols,
            n: rows.len(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.cols.len()
    }

    fn value(&self, feature: usize, row: usize) -> f64 {
        self.cols[feature][row]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Leaf(T),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Copy> Tree<T> {
    pub fn predict(&self, row: &[f64]) -> T {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn walk<T>(nodes: &[Node<T>], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// What a tree is fitted to: class counts for Gini, residual sums for
/// squared error.
pub trait Objective {
    type Stats: Clone;
    type Leaf: Copy;

    fn empty(&self) -> Self::Stats;
    fn add(&self, stats: &mut Self::Stats, row: usize);
    fn remove(&self, stats: &mut Self::Stats, row: usize);
    /// Larger is better; summed over both children.
    fn score(&self, stats: &Self::Stats, count: usize) -> f64;
    fn is_pure(&self, stats: &Self::Stats, count: usize) -> bool;
    fn leaf(&self, stats: &Self::Stats, count: usize) -> Self::Leaf;
}

pub struct Gini<'a> {
    pub labels: &'a [u8],
    pub classes: usize,
}

impl Objective for Gini<'_> {
    type Stats = Vec<usize>;
    type Leaf = u8;

    fn empty(&self) -> Vec<usize> {
        vec![0; self.classes]
    }

    fn add(&self, s: &mut Vec<usize>, row: usize) {
        s[self.labels[row] as usize] += 1;
    }

    fn remove(&self, s: &mut Vec<usize>, row: usize) {
        s[self.labels[row] as usize] -= 1;
    }

    /// `sum_c n_c^2 / n`; maximising the children's total minimises the
    /// size-weighted Gini impurity.
    fn score(&self, s: &Vec<usize>, count: usize) -> f64 {
        let sq: usize = s.iter().map(|c| c * c).sum();
        sq as f64 / count as f64
    }

    fn is_pure(&self, s: &Vec<usize>, count: usize) -> bool {
        s.iter().any(|&c| c == count)
    }

    /// Majority class, ties to the lowest code.
    fn leaf(&self, s: &Vec<usize>, _count: usize) -> u8 {
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        best as u8
    }
}

pub struct SquaredError<'a> {
    pub targets: &'a [f64],
}

impl Objective for SquaredError<'_> {
    type Stats = f64;
    type Leaf = f64;

    fn empty(&self) -> f64 {
        0.0
    }

    fn add(&self, s: &mut f64, row: usize) {
        *s += self.targets[row];
    }

    fn remove(&self, s: &mut f64, row: usize) {
        *s -= self.targets[row];
    }

    fn score(&self, s: &f64, count: usize) -> f64 {
        s * s / count as f64
    }

    fn is_pure(&self, _s: &f64, _count: usize) -> bool {
        false
    }

    fn leaf(&self, s: &f64, count: usize) -> f64 {
        s / count as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features drawn per node; `None` evaluates every feature.
    pub mtry: Option<usize>,
}

struct Builder<'a, O: Objective, R: Rng> {
    x: &'a Columns,
    objective: &'a O,
    params: TreeParams,
    rng: Option<&'a mut R>,
    nodes: Vec<Node<O::Leaf>>,
    goes_left: Vec<bool>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl<O: Objective, R: Rng> Builder<'_, O, R> {
    fn stats_of(&self, rows: &[u32]) -> O::Stats {
        let mut s = self.objective.empty();
        for &r in rows {
            self.objective.add(&mut s, r as usize);
        }
        s
    }

    /// Best `x <= v` split on one feature; ties keep the smaller threshold.
    fn best_on_feature(&self, feature: usize, sorted: &[u32], total: &O::Stats) -> Option<Candidate> {
        let m = sorted.len();
        let min_leaf = self.params.min_leaf;
        let mut left = self.objective.empty();
        let mut right = total.clone();
        let mut best: Option<Candidate> = None;
        for p in 0..m - 1 {
            let row = sorted[p] as usize;
            self.objective.add(&mut left, row);
            self.objective.remove(&mut right, row);
            let v = self.x.value(feature, row);
            let next = self.x.value(feature, sorted[p + 1] as usize);
            if !(v < next) {
                continue;
            }
            let (nl, nr) = (p + 1, m - p - 1);
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let score = self.objective.score(&left, nl) + self.objective.score(&right, nr);
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(Candidate {
                    feature,
                    threshold: v,
                    score,
                });
            }
        }
        best
    }

    fn feature_order(&mut self) -> Vec<usize> {
        let d = self.x.d();
        let mut order: Vec<usize> = (0..d).collect();
        if let (Some(_), Some(rng)) = (self.params.mtry, self.rng.as_deref_mut()) {
            for i in 0..d.saturating_sub(1) {
                let j = rng.random_range(i..d);
                order.swap(i, j);
            }
        }
        order
    }

    fn choose_split(&mut self, lists: &[Vec<u32>], total: &O::Stats) -> Option<Candidate> {
        let order = self.feature_order();
        let batch = self.params.mtry.unwrap_or(order.len()).clamp(1, order.len());
        // Draw `mtry` features; if none of them can split, keep drawing one
        // at a time until one can or the features run out.
        let mut start = 0;
        let mut end = batch;
        while start < order.len() {
            let mut chosen: Vec<usize> = order[start..end].to_vec();
            chosen.sort_unstable();
            let mut best: Option<Candidate> = None;
            for f in chosen {
                if let Some(c) = self.best_on_feature(f, &lists[f], total) {
                    if best.as_ref().is_none_or(|b| c.score > b.score) {
                        best = Some(c);
                    }
                }
            }
            if best.is_some() {
                return best;
            }
            start = end;
            end = (end + 1).min(order.len());
        }
        None
    }

    fn build(&mut self, lists: Vec<Vec<u32>>, depth: usize) -> usize {
        let id = self.nodes.len();
        let m = lists[0].len();
        let total = self.stats_of(&lists[0]);
        let leaf = self.objective.leaf(&total, m);
        self.nodes.push(Node::Leaf(leaf));

        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || m < 2 * self.params.min_leaf.max(1) || self.objective.is_pure(&total, m) {
            return id;
        }
        let Some(split) = self.choose_split(&lists, &total) else {
            return id;
        };

        for &r in &lists[0] {
            self.goes_left[r as usize] = self.x.value(split.feature, r as usize) <= split.threshold;
        }
        let mut left_lists = Vec::with_capacity(lists.len());
        let mut right_lists = Vec::with_capacity(lists.len());
        for list in lists {
            let (l, r): (Vec<u32>, Vec<u32>) =
                list.into_iter().partition(|&i| self.goes_left[i as usize]);
            left_lists.push(l);
            right_lists.push(r);
        }
        let left = self.build(left_lists, depth + 1);
        let right = self.build(right_lists, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

/// Grows one tree on `sample` (row indices into `x`, repeats allowed).
pub fn grow<O: Objective, R: Rng>(
    x: &Columns,
    sample: &[u32],
    objective: &O,
    params: TreeParams,
    rng: Option<&mut R>,
) -> Tree<O::Leaf> {
    assert!(!sample.is_empty(), "cannot grow a tree on no rows");
    let lists: Vec<Vec<u32>> = (0..x.d().max(1))
        .map(|f| {
            let mut l = sample.to_vec();
            if f < x.d() {
                l.sort_by(|&a, &b| {
                    x.value(f, a as usize)
                        .total_cmp(&x.value(f, b as usize))
                        .then(a.cmp(&b))
                });
            }
            l
        })
        .collect();
    let mut b = Builder {
        x,
        objective,
        params,
        rng,
        nodes: Vec::new(),
        goes_left: vec![false; x.n()],
    };
    if x.d() == 0 {
        let total = b.stats_of(sample);
        return Tree {
            nodes: vec![Node::Leaf(objective.leaf(&total, sample.len()))],
        };
    }
    b.build(lists, 0);
    Tree { nodes: b.nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn no_rng() -> Option<&'static mut ChaCha8Rng> {
        None
    }

    #[test]
    fn stump_picks_clean_split() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let labels: Vec<u8> = (0..10).map(|i| if i < 4 { 0 } else { 2 }).collect();
        let x = Columns::from_rows(&rows);
        let sample: Vec<u32> = (0..10).collect();
        let obj = Gini {
            labels: &labels,
            classes: 3,
        };
        let params = TreeParams {
            max_depth: Some(1),
            min_leaf: 1,
            mtry: None,
        };
        let t = grow(&x, &sample, &obj, params, no_rng());
        assert_eq!(
            t.nodes[0],
            Node::Split {
                feature: 0,
                threshold: 3.0,
                left: 1,
                right: 2
            }
        );
        for (r, &l) in rows.iter().zip(&labels) {
            assert_eq!(t.predict(r), l);
        }
    }

    #[test]
    fn equal_gain_prefers_lower_feature() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64]).collect();
        let labels = vec![0u8, 0, 0, 1, 1, 1];
        let x = Columns::from_rows(&rows);
        let sample: Vec<u32> = (0..6).collect();
        let obj = Gini {
            labels: &labels,
            classes: 3,
        };
        let params = TreeParams {
            max_depth: None,
            min_leaf: 1,
            mtry: None,
        };
        let t = grow(&x, &sample, &obj, params, no_rng());
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn unlimited_depth_fits_distinct_points() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![((i * 17) % 23) as f64, ((i * 7) % 11) as f64 + i as f64 * 0.001])
            .collect();
        let labels: Vec<u8> = (0..50).map(|i| ((i * 5 + i / 3) % 3) as u8).collect();
        let x = Columns::from_rows(&rows);
        let sample: Vec<u32> = (0..50).collect();
        let obj = Gini {
            labels: &labels,
            classes: 3,
        };
        let params = TreeParams {
            max_depth: None,
            min_leaf: 1,
            mtry: None,
        };
        let t = grow(&x, &sample, &obj, params, no_rng());
        for (r, &l) in rows.iter().zip(&labels) {
            assert_eq!(t.predict(r), l);
        }
    }

    #[test]
    fn regression_leaf_is_mean() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let y = vec![1.0, 1.0, 5.0, 7.0];
        let x = Columns::from_rows(&rows);
        let sample: Vec<u32> = (0..4).collect();
        let params = TreeParams {
            max_depth: Some(1),
            min_leaf: 1,
            mtry: None,
        };
        let t = grow(&x, &sample, &SquaredError { targets: &y }, params, no_rng());
        assert_eq!(t.predict(&[0.5]), 1.0);
        assert_eq!(t.predict(&[3.0]), 6.0);
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn constant_features_make_a_leaf() {
        let rows = vec![vec![1.0]; 5];
        let labels = vec![0u8, 1, 1, 2, 2];
        let x = Columns::from_rows(&rows);
        let sample: Vec<u32> = (0..5).collect();
        let obj = Gini {
            labels: &labels,
            classes: 3,
        };
        let params = TreeParams {
            max_depth: None,
            min_leaf: 1,
            mtry: None,
        };
        let t = grow(&x, &sample, &obj, params, no_rng());
        assert_eq!(t.node_count(), 1);
        assert_eq!(t.predict(&[1.0]), 1);
    }
}
