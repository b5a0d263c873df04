//! Second-order gradient boosted trees on the logistic loss with quantile
//! histograms, in the style of XGBoost's `hist` method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub n_trees: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub min_child_weight: f64,
    /// Weight applied to positive examples.
    pub scale_pos_weight: f64,
    pub max_bins: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            max_depth: 6,
            learning_rate: 0.3,
            n_trees: 100,
            lambda: 1.0,
            min_child_weight: 1.0,
            scale_pos_weight: 1.0,
            max_bins: 64,
        }
    }
}

/// Features quantized to at most `max_bins` bins. A value falls in bin
/// `b` when it exceeds exactly `b` of the feature's thresholds, so
/// `bin <= b` is equivalent to `x <= thresholds[b]`.
#[derive(Debug, Clone)]
pub struct BinnedData {
    n_rows: usize,
    thresholds: Vec<Vec<f64>>,
    /// Column major, `bins[f * n_rows + i]`.
    bins: Vec<u8>,
}

fn cut_points(values: &mut [f64], max_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut uniq: Vec<f64> = Vec::new();
    for &v in values.iter() {
        if uniq.last() != Some(&v) {
            uniq.push(v);
        }
    }
    if uniq.len() <= max_bins {
        return uniq
            .windows(2)
            .map(|w| w[0] + (w[1] - w[0]) / 2.0)
            .collect();
    }
    let n = values.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for k in 1..max_bins {
        let v = values[(k * n / max_bins).min(n - 1)];
        if cuts.last() != Some(&v) && v < uniq[uniq.len() - 1] {
            cuts.push(v);
        }
    }
    cuts
}

fn bin_of(thresholds: &[f64], x: f64) -> u8 {
    thresholds.partition_point(|&t| t < x) as u8
}

impl BinnedData {
    pub fn from_rows(x: &[Vec<f64>], max_bins: usize) -> Result<Self> {
        let max_bins = max_bins.clamp(2, 256);
        let n_rows = x.len();
        let n_features = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != n_features) {
            return Err(Error::Training("ragged feature matrix".into()));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite feature value".into()));
        }
        let mut thresholds = Vec::with_capacity(n_features);
        let mut bins = vec![0u8; n_rows * n_features];
        let mut column = vec![0.0; n_rows];
        for f in 0..n_features {
            for (c, row) in column.iter_mut().zip(x) {
                *c = row[f];
            }
            let t = cut_points(&mut column, max_bins);
            for (i, row) in x.iter().enumerate() {
                bins[f * n_rows + i] = bin_of(&t, row[f]);
            }
            thresholds.push(t);
        }
        Ok(Self {
            n_rows,
            thresholds,
            bins,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.thresholds.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        gain: f64,
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
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[feature as usize] <= threshold {
                        left
                    } else {
                        right
                    } as usize;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub params: GbdtParams,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

struct Builder<'a> {
    data: &'a BinnedData,
    params: &'a GbdtParams,
    grad: &'a [f64],
    hess: &'a [f64],
    /// Histogram width per feature.
    nb: usize,
    nodes: Vec<Node>,
    importance: &'a mut [f64],
}

struct Candidate {
    feature: usize,
    bin: usize,
    gain: f64,
}

impl Builder<'_> {
    fn hist(&self, rows: &[u32]) -> Vec<f64> {
        let n = self.data.n_rows;
        let nb = self.nb;
        let mut h = vec![0.0; self.data.n_features() * nb * 2];
        for f in 0..self.data.n_features() {
            let col = &self.data.bins[f * n..(f + 1) * n];
            let out = &mut h[f * nb * 2..(f + 1) * nb * 2];
            for &r in rows {
                let r = r as usize;
                let b = col[r] as usize * 2;
                out[b] += self.grad[r];
                out[b + 1] += self.hess[r];
            }
        }
        h
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn best_split(&self, hist: &[f64], g: f64, h: f64) -> Option<Candidate> {
        let mcw = self.params.min_child_weight;
        let parent = self.score(g, h);
        let mut best: Option<Candidate> = None;
        for (f, t) in self.data.thresholds.iter().enumerate() {
            let hf = &hist[f * self.nb * 2..];
            let (mut gl, mut hl) = (0.0, 0.0);
            for b in 0..t.len() {
                gl += hf[2 * b];
                hl += hf[2 * b + 1];
                let (gr, hr) = (g - gl, h - hl);
                if hl < mcw || hr < mcw {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent);
                if gain > 1e-12 && best.as_ref().is_none_or(|c| gain > c.gain) {
                    best = Some(Candidate {
                        feature: f,
                        bin: b,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn leaf(&mut self, g: f64, h: f64) -> u32 {
        let value = -g / (h + self.params.lambda) * self.params.learning_rate;
        self.nodes.push(Node::Leaf { value });
        (self.nodes.len() - 1) as u32
    }

    /// Grows the subtree over `rows`; returns the node index. Rows are
    /// reordered so that each leaf owns a contiguous range.
    fn grow(&mut self, rows: &mut [u32], hist: Option<Vec<f64>>, depth: usize) -> u32 {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        if depth >= self.params.max_depth || rows.len() < 2 {
            return self.leaf(g, h);
        }
        let hist = hist.unwrap_or_else(|| self.hist(rows));
        let Some(c) = self.best_split(&hist, g, h) else {
            return self.leaf(g, h);
        };
        let n = self.data.n_rows;
        let col = &self.data.bins[c.feature * n..(c.feature + 1) * n];
        let mut split = 0;
        for i in 0..rows.len() {
            if col[rows[i] as usize] as usize <= c.bin {
                rows.swap(i, split);
                split += 1;
            }
        }
        self.importance[c.feature] += c.gain;
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });

        let (lrows, rrows) = rows.split_at_mut(split);
        let (lh, rh) = if depth + 1 < self.params.max_depth {
            let small_left = lrows.len() <= rrows.len();
            let small = self.hist(if small_left { lrows } else { rrows });
            let large: Vec<f64> = hist.iter().zip(&small).map(|(p, s)| p - s).collect();
            if small_left {
                (Some(small), Some(large))
            } else {
                (Some(large), Some(small))
            }
        } else {
            (None, None)
        };
        drop(hist);
        let left = self.grow(lrows, lh, depth + 1);
        let right = self.grow(rrows, rh, depth + 1);
        self.nodes[at] = Node::Split {
            feature: c.feature as u32,
            threshold: self.data.thresholds[c.feature][c.bin],
            left,
            right,
            gain: c.gain,
        };
        at as u32
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Gbdt {
    pub fn fit(x: &[Vec<f64>], y: &[u8], params: &GbdtParams) -> Result<Self> {
        let data = BinnedData::from_rows(x, params.max_bins)?;
        let rows: Vec<u32> = (0..x.len() as u32).collect();
        Ok(Self::fit_binned(&data, y, &rows, params)?.0)
    }

    /// Fits on the subset `rows` of `data`; `y` is indexed by row. Also
    /// returns total split gain per feature.
    pub fn fit_binned(
        data: &BinnedData,
        y: &[u8],
        rows: &[u32],
        params: &GbdtParams,
    ) -> Result<(Self, Vec<f64>)> {
        if y.len() != data.n_rows {
            return Err(Error::Training("label count does not match rows".into()));
        }
        if rows.is_empty() {
            return Err(Error::Training("no training rows".into()));
        }
        if params.max_depth == 0 || params.learning_rate <= 0.0 {
            return Err(Error::Training(
                "max_depth and learning_rate must be positive".into(),
            ));
        }
        let n = data.n_rows;
        let nb = data
            .thresholds
            .iter()
            .map(|t| t.len() + 1)
            .max()
            .unwrap_or(1);
        let mut margin = vec![0.0; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut importance = vec![0.0; data.n_features()];
        let mut trees = Vec::with_capacity(params.n_trees);
        let mut order: Vec<u32> = rows.to_vec();
        for _ in 0..params.n_trees {
            for &r in rows {
                let r = r as usize;
                let p = sigmoid(margin[r]);
                let (w, t) = if y[r] == 1 {
                    (params.scale_pos_weight, 1.0)
                } else {
                    (1.0, 0.0)
                };
                grad[r] = w * (p - t);
                hess[r] = (w * p * (1.0 - p)).max(1e-16);
            }
            // Rows are regrouped per tree; restore the canonical order so
            // float sums do not depend on the previous tree.
            order.copy_from_slice(rows);
            let mut b = Builder {
                data,
                params,
                grad: &grad,
                hess: &hess,
                nb,
                nodes: Vec::new(),
                importance: &mut importance,
            };
            b.grow(&mut order, None, 0);
            let tree = Tree { nodes: b.nodes };
            for &r in rows {
                margin[r as usize] += tree.predict_binned(data, r as usize);
            }
            trees.push(tree);
        }
        Ok((
            Self {
                params: *params,
                n_features: data.n_features(),
                trees,
            },
            importance,
        ))
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum()
    }

    /// Margin using only the first `k` trees.
    pub fn margin_prefix(&self, x: &[f64], k: usize) -> f64 {
        self.trees.iter().take(k).map(|t| t.predict(x)).sum()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }
}

impl Tree {
    fn predict_binned(&self, data: &BinnedData, row: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    let f = feature as usize;
                    let b = data.bins[f * data.n_rows + row] as usize;
                    let go_left =
                        b < data.thresholds[f].len() && data.thresholds[f][b] <= threshold;
                    i = if go_left { left } else { right } as usize;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cut_points_on_few_values_are_midpoints() {
        assert_eq!(cut_points(&mut [3.0, 1.0, 2.0, 1.0], 64), vec![1.5, 2.5]);
        assert!(cut_points(&mut [5.0; 10], 64).is_empty());
        let mut many: Vec<f64> = (0..1000).map(f64::from).collect();
        let c = cut_points(&mut many, 64);
        assert!(c.len() <= 63 && c.len() > 50);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn binned_and_raw_routing_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0..5) as f64])
            .collect();
        let y: Vec<u8> = x.iter().map(|r| u8::from(r[0] + r[1] > 7.0)).collect();
        let data = BinnedData::from_rows(&x, 64).unwrap();
        let rows: Vec<u32> = (0..400).collect();
        let params = GbdtParams {
            max_depth: 4,
            n_trees: 5,
            ..GbdtParams::default()
        };
        let (m, _) = Gbdt::fit_binned(&data, &y, &rows, &params).unwrap();
        for (i, r) in x.iter().enumerate() {
            for t in &m.trees {
                assert_eq!(t.predict(r), t.predict_binned(&data, i));
            }
        }
    }

    #[test]
    fn separable_toy_set_is_ranked_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let y: Vec<u8> = x
            .iter()
            .map(|r| u8::from(r[0] - 0.5 * r[1] > 0.1))
            .collect();
        let m = Gbdt::fit(&x, &y, &GbdtParams::default()).unwrap();
        let scores: Vec<f64> = x.iter().map(|r| m.predict_proba(r)).collect();
        assert_eq!(crate::evalmetrics::rocauc(&scores, &y).unwrap(), 1.0);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn single_leaf_value_is_newton_step() {
        // One tree of depth 1 on a constant feature: leaf = -G/(H+λ)·η with
        // p = 0.5 everywhere, so G = Σ(0.5 - y) and H = n/4.
        let x = vec![vec![1.0]; 10];
        let y = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let params = GbdtParams {
            n_trees: 1,
            learning_rate: 0.5,
            ..GbdtParams::default()
        };
        let m = Gbdt::fit(&x, &y, &params).unwrap();
        let g = 10.0 * 0.5 - 3.0;
        let h = 10.0 * 0.25;
        assert!((m.margin(&[1.0]) - (-g / (h + 1.0) * 0.5)).abs() < 1e-15);
    }
}
