//! Gradient-boosted regression trees with squared-error loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: 100,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 2,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if x[*feature] < *threshold { left } else { right },
            }
        }
    }

    fn add_gains(&self, into: &mut [f64]) {
        if let Node::Split {
            feature,
            gain,
            left,
            right,
            ..
        } = self
        {
            into[*feature] += gain;
            left.add_gains(into);
            right.add_gains(into);
        }
    }
}

/// A fitted ensemble: `base_score + learning_rate * Σ tree(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbtModel {
    pub feature_names: Vec<String>,
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Node>,
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    params: &'a GbtParams,
    num_features: usize,
}

impl Grower<'_> {
    fn grow(&self, rows: &mut [usize], residual: &[f64], depth: usize) -> Node {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| residual[r]).sum();
        let leaf = Node::Leaf { value: total / n as f64 };
        if depth >= self.params.max_depth || n < 2 * self.params.min_samples_leaf {
            return leaf;
        }
        let parent = total * total / n as f64;
        let min_leaf = self.params.min_samples_leaf;
        // (gain, feature, threshold, left count)
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..self.num_features {
            rows.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for i in 0..n - 1 {
                left_sum += residual[rows[i]];
                let (lo, hi) = (self.x[rows[i]][f], self.x[rows[i + 1]][f]);
                let n_left = i + 1;
                if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / (n - n_left) as f64
                    - parent;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, lo + (hi - lo) / 2.0));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else {
            return leaf;
        };
        let scale = residual.iter().map(|r| r * r).sum::<f64>().max(f64::MIN_POSITIVE);
        if gain <= 1e-12 * scale {
            return leaf;
        }
        rows.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]).then(a.cmp(&b)));
        let split = rows.partition_point(|&r| self.x[r][feature] < threshold);
        let (l, r) = rows.split_at_mut(split);
        Node::Split {
            feature,
            threshold,
            gain,
            left: Box::new(self.grow(l, residual, depth + 1)),
            right: Box::new(self.grow(r, residual, depth + 1)),
        }
    }
}

/// Row order that depends only on the multiset of `(features, target)` rows.
pub(crate) fn canonical_order(x: &[Vec<f64>], y: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y[a].total_cmp(&y[b]))
    });
    order
}

impl GbtModel {
    /// Fits `params.n_trees` trees to `(x, y)`.
    ///
    /// Rows are put in a canonical order first, so the fitted model does not
    /// depend on the order in which samples are given.
    pub fn fit(x: &[Vec<f64>], y: &[f64], feature_names: Vec<String>, params: &GbtParams) -> Result<Self> {
        params.validate()?;
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Data(format!("{} feature rows for {} targets", x.len(), y.len())));
        }
        let num_features = feature_names.len();
        if x.iter().any(|row| row.len() != num_features) {
            return Err(Error::Validation(format!("every row must have {num_features} features")));
        }
        if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Data("features and targets must be finite".into()));
        }
        let order = canonical_order(x, y);
        let xs: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

        let base_score = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut pred = vec![base_score; ys.len()];
        let grower = Grower {
            x: &xs,
            params,
            num_features,
        };
        let mut trees = Vec::with_capacity(params.n_trees);
        for _ in 0..params.n_trees {
            let residual: Vec<f64> = ys.iter().zip(&pred).map(|(t, p)| t - p).collect();
            let mut rows: Vec<usize> = (0..ys.len()).collect();
            let tree = grower.grow(&mut rows, &residual, 0);
            for (p, row) in pred.iter_mut().zip(&xs) {
                *p += params.learning_rate * tree.predict(row);
            }
            trees.push(tree);
        }
        Ok(GbtModel {
            feature_names,
            base_score,
            learning_rate: params.learning_rate,
            trees,
        })
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.num_features() {
            return Err(Error::Validation(format!(
                "model expects {} features, got {}",
                self.num_features(),
                x.len()
            )));
        }
        Ok(self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    /// Total split gain per feature, normalized to sum to 1. All zeros when
    /// the ensemble never splits.
    pub fn feature_importance(&self) -> Result<Vec<f64>> {
        if self.trees.is_empty() {
            return Err(Error::State("model has no trees".into()));
        }
        let mut gains = vec![0.0; self.num_features()];
        for t in &self.trees {
            t.add_gains(&mut gains);
        }
        let total: f64 = gains.iter().sum();
        if total > 0.0 {
            gains.iter_mut().for_each(|g| *g /= total);
        }
        Ok(gains)
    }

    /// Whether any tree splits at all.
    pub fn is_constant(&self) -> bool {
        self.trees.iter().all(|t| matches!(t, Node::Leaf { .. }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn constant_targets_give_mean_predictor() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let y = vec![4.25; 30];
        let m = GbtModel::fit(&x, &y, names(2), &GbtParams::default()).unwrap();
        assert!(m.is_constant());
        assert_eq!(m.predict(&[100.0, -3.0]).unwrap(), 4.25);
        assert_eq!(m.feature_importance().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_leaf_model_formula() {
        let m = GbtModel {
            feature_names: names(1),
            base_score: 2.0,
            learning_rate: 0.5,
            trees: vec![Node::Leaf { value: 3.0 }],
        };
        assert_eq!(m.predict(&[123.0]).unwrap(), 3.5);
        assert!(m.predict(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn unfitted_importance_is_state_error() {
        let m = GbtModel {
            feature_names: names(1),
            base_score: 0.0,
            learning_rate: 0.1,
            trees: vec![],
        };
        assert!(matches!(m.feature_importance(), Err(Error::State(_))));
    }

    #[test]
    fn step_function_split_at_midpoint() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| if i < 4 { 0.0 } else { 1.0 }).collect();
        let p = GbtParams {
            n_trees: 1,
            max_depth: 1,
            learning_rate: 1.0,
            min_samples_leaf: 1,
        };
        let m = GbtModel::fit(&x, &y, names(1), &p).unwrap();
        match &m.trees[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 3.5),
            other => panic!("{other:?}"),
        }
        assert!((m.predict(&[0.0]).unwrap()).abs() < 1e-12);
        assert!((m.predict(&[9.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn importance_picks_the_driving_feature() {
        let x: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i * 37 % 11) as f64, (i * 13 % 7) as f64, (i * 29 % 17) as f64, (i % 9) as f64])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| (r[3] - 4.0).powi(2)).collect();
        let m = GbtModel::fit(&x, &y, names(4), &GbtParams::default()).unwrap();
        let imp = m.feature_importance().unwrap();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let argmax = (0..4).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
        assert_eq!(argmax, 3);
    }

    #[test]
    fn json_round_trip() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| (i as f64).sqrt()).collect();
        let m = GbtModel::fit(&x, &y, names(1), &GbtParams::default()).unwrap();
        let back: GbtModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
