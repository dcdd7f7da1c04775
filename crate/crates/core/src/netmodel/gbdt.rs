//! Gradient-boosted regression trees with second-order (Newton) leaf values
//! and histogram split search over per-feature cut points.
//!
//! Trees are stored as flat node arrays so the trained ensemble serializes to
//! plain JSON that any language can walk.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Loss {
    Squared,
    /// Pseudo-Huber with transition scale `delta`.
    PseudoHuber {
        delta: f64,
    },
}

impl Loss {
    /// First and second derivative of the loss with respect to the prediction.
    fn grad_hess(&self, pred: f64, target: f64) -> (f64, f64) {
        let r = pred - target;
        match *self {
            Loss::Squared => (r, 1.0),
            Loss::PseudoHuber { delta } => {
                let q = 1.0 + (r / delta).powi(2);
                let s = q.sqrt();
                (r / s, 1.0 / (q * s))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub max_bins: usize,
    pub loss: Loss,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            learning_rate: 0.2,
            max_depth: 6,
            min_samples_leaf: 1,
            lambda: 1e-6,
            max_bins: 128,
            loss: Loss::Squared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

impl Gbdt {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Candidate thresholds per feature: midpoints between adjacent distinct
/// values, thinned evenly to at most `max_bins - 1` cuts.
fn cut_points(rows: &[Vec<f64>], feature: usize, max_bins: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = rows.iter().map(|r| r[feature]).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mids: Vec<f64> = vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let limit = max_bins.max(2) - 1;
    if mids.len() <= limit {
        return mids;
    }
    (0..limit).map(|k| mids[(k * mids.len()) / limit]).collect()
}

struct Binned {
    cuts: Vec<Vec<f64>>,
    /// bins[row][feature] = number of cuts strictly below the value.
    bins: Vec<Vec<u16>>,
}

fn bin_rows(rows: &[Vec<f64>], n_features: usize, max_bins: usize) -> Binned {
    let cuts: Vec<Vec<f64>> = (0..n_features).map(|f| cut_points(rows, f, max_bins)).collect();
    let bins = rows
        .iter()
        .map(|r| {
            (0..n_features)
                .map(|f| cuts[f].partition_point(|c| *c < r[f]) as u16)
                .collect()
        })
        .collect();
    Binned { cuts, bins }
}

struct Builder<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    cut: usize,
    gain: f64,
}

impl Builder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let step = -g / (h + self.params.lambda);
        let step = match self.params.loss {
            Loss::Squared => step,
            // far from the minimum the pseudo-Huber hessian vanishes and a
            // raw Newton step overshoots
            Loss::PseudoHuber { delta } => step.clamp(-delta, delta),
        };
        step * self.params.learning_rate
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let (g, h) = rows
            .iter()
            .fold((0.0, 0.0), |(g, h), &r| (g + self.grad[r], h + self.hess[r]));
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.leaf_value(g, h),
        });
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_samples_leaf.max(1) {
            return id;
        }
        let Some(best) = self.best_split(rows, g, h) else {
            return id;
        };
        let cut = best.cut as u16;
        let feature = best.feature;
        // stable partition keeps row order deterministic
        let (left, right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| self.binned.bins[r][feature] <= cut);
        let threshold = self.binned.cuts[feature][best.cut];
        let l = self.build(&left, depth + 1);
        let r = self.build(&right, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left: l,
            right: r,
        };
        id
    }

    fn best_split(&self, rows: &[usize], g: f64, h: f64) -> Option<BestSplit> {
        let lambda = self.params.lambda;
        let parent = g * g / (h + lambda);
        let sq: f64 = rows.iter().map(|&r| self.grad[r] * self.grad[r]).sum();
        let min_gain = 1e-24 * sq.max(f64::MIN_POSITIVE);
        let min_leaf = self.params.min_samples_leaf.max(1);
        let mut best: Option<BestSplit> = None;
        for (f, cuts) in self.binned.cuts.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let n_bins = cuts.len() + 1;
            let mut gs = vec![0.0; n_bins];
            let mut hs = vec![0.0; n_bins];
            let mut ns = vec![0usize; n_bins];
            for &r in rows {
                let b = self.binned.bins[r][f] as usize;
                gs[b] += self.grad[r];
                hs[b] += self.hess[r];
                ns[b] += 1;
            }
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            for cut in 0..cuts.len() {
                gl += gs[cut];
                hl += hs[cut];
                nl += ns[cut];
                let nr = rows.len() - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let gr = g - gl;
                let hr = h - hl;
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > min_gain && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit { feature: f, cut, gain });
                }
            }
        }
        best
    }
}

fn weighted_median(y: &[f64], w: &[f64]) -> f64 {
    let mut pairs: Vec<(f64, f64)> = y.iter().copied().zip(w.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = 0.5 * w.iter().sum::<f64>();
    let mut acc = 0.0;
    for (v, wt) in &pairs {
        acc += wt;
        if acc >= half {
            return *v;
        }
    }
    pairs.last().map_or(0.0, |p| p.0)
}

fn weighted_mean(y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    if sw > 0.0 {
        y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
    } else {
        0.0
    }
}

/// Trains an ensemble on row-major features `x`, targets `y` and sample
/// weights `w`. Fully deterministic.
pub fn fit(x: &[Vec<f64>], y: &[f64], w: &[f64], params: &GbdtParams) -> Gbdt {
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), w.len());
    let n_features = x.first().map_or(0, |r| r.len());
    let base_score = match params.loss {
        Loss::Squared => weighted_mean(y, w),
        Loss::PseudoHuber { .. } => weighted_median(y, w),
    };
    let mut model = Gbdt {
        n_features,
        base_score,
        trees: Vec::with_capacity(params.n_trees),
    };
    if x.is_empty() {
        return model;
    }
    let binned = bin_rows(x, n_features, params.max_bins);
    let mut pred = vec![base_score; x.len()];
    let mut grad = vec![0.0; x.len()];
    let mut hess = vec![0.0; x.len()];
    let rows: Vec<usize> = (0..x.len()).collect();
    for _ in 0..params.n_trees {
        for i in 0..x.len() {
            let (g, h) = params.loss.grad_hess(pred[i], y[i]);
            grad[i] = g * w[i];
            hess[i] = h * w[i];
        }
        let mut builder = Builder {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            params,
            nodes: Vec::new(),
        };
        builder.build(&rows, 0);
        let tree = Tree { nodes: builder.nodes };
        for (i, p) in pred.iter_mut().enumerate() {
            *p += tree.predict(&x[i]);
        }
        model.trees.push(tree);
    }
    model
}
