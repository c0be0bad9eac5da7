//! Templated shapes, cigar-shape scaling and shape analysis utilities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{DesignSpace, ShapeVector};
use crate::stats::{pearson, spearman};
use crate::supernet::{count_params, layer_params_formula, BackboneConfig, Supernet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeTemplate {
    LowerTriangle,
    UpperTriangle,
    Rectangle,
    Diamond,
    InvertedDiamond,
    Bottle,
    InvertedBottle,
}

impl ShapeTemplate {
    pub const ALL: [ShapeTemplate; 7] = [
        ShapeTemplate::LowerTriangle,
        ShapeTemplate::UpperTriangle,
        ShapeTemplate::Rectangle,
        ShapeTemplate::Diamond,
        ShapeTemplate::InvertedDiamond,
        ShapeTemplate::Bottle,
        ShapeTemplate::InvertedBottle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeTemplate::LowerTriangle => "lower_triangle",
            ShapeTemplate::UpperTriangle => "upper_triangle",
            ShapeTemplate::Rectangle => "rectangle",
            ShapeTemplate::Diamond => "diamond",
            ShapeTemplate::InvertedDiamond => "inverted_diamond",
            ShapeTemplate::Bottle => "bottle",
            ShapeTemplate::InvertedBottle => "inverted_bottle",
        }
    }

    /// Hidden dims of the template on the 12-layer BERT-base space.
    pub fn reference_dims(self) -> [usize; 12] {
        match self {
            ShapeTemplate::LowerTriangle => [120, 120, 240, 240, 360, 360, 360, 480, 540, 540, 600, 768],
            ShapeTemplate::UpperTriangle => [768, 600, 540, 540, 480, 360, 360, 360, 240, 240, 120, 120],
            ShapeTemplate::Rectangle => [360; 12],
            ShapeTemplate::Diamond => [120, 240, 360, 480, 480, 540, 768, 540, 480, 360, 240, 120],
            ShapeTemplate::InvertedDiamond => [768, 600, 360, 240, 240, 120, 120, 240, 240, 360, 600, 768],
            ShapeTemplate::Bottle => [120, 120, 120, 120, 120, 120, 600, 600, 600, 600, 600, 768],
            ShapeTemplate::InvertedBottle => [768, 600, 600, 600, 600, 600, 120, 120, 120, 120, 120, 120],
        }
    }
}

impl fmt::Display for ShapeTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeTemplate::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ShapeTemplate::ALL.iter().map(|t| t.name()).collect();
                Error::Validation(format!("unknown template {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Nearest allowed dim; an exact midpoint goes to the larger one.
pub fn snap_nearest(space: &DesignSpace, x: f64) -> usize {
    let dims = space.allowed_dims();
    let mut best = dims[0];
    for &d in dims {
        if (d as f64 - x).abs() <= (best as f64 - x).abs() {
            best = d;
        }
    }
    best
}

// Tolerance so that a dim scaled by exactly 1 snaps back to itself.
const SNAP_EPS: f64 = 1e-9;

/// Largest allowed dim not above `x`, or the smallest dim.
pub fn snap_down(space: &DesignSpace, x: f64) -> usize {
    let dims = space.allowed_dims();
    dims.iter().rev().copied().find(|&d| d as f64 <= x + SNAP_EPS).unwrap_or(dims[0])
}

/// Smallest allowed dim not below `x`, or the largest dim.
pub fn snap_up(space: &DesignSpace, x: f64) -> usize {
    let dims = space.allowed_dims();
    dims.iter().copied().find(|&d| d as f64 >= x - SNAP_EPS).unwrap_or(*dims.last().unwrap())
}

/// The template over `space`.
///
/// On the 12-layer BERT-base space this is the reference table. Other
/// spaces interpolate it linearly over normalized layer position and
/// normalized dim, then snap to the nearest allowed dim.
pub fn templated_shape(kind: ShapeTemplate, space: &DesignSpace) -> Result<ShapeVector> {
    space.validate()?;
    let reference = DesignSpace::bert_base();
    let (r_lo, r_hi) = (reference.min_dim() as f64, reference.max_dim() as f64);
    let table = kind.reference_dims().map(|d| (d as f64 - r_lo) / (r_hi - r_lo));
    let (lo, hi) = (space.min_dim() as f64, space.max_dim() as f64);
    let l = space.num_layers();
    let dims = (0..l)
        .map(|j| {
            let u = if l == 1 { 0.0 } else { j as f64 * 11.0 / (l - 1) as f64 };
            let i = (u.floor() as usize).min(10);
            let t = u - i as f64;
            let frac = table[i] * (1.0 - t) + table[i + 1] * t;
            snap_nearest(space, lo + frac * (hi - lo))
        })
        .collect();
    Ok(ShapeVector::new(dims))
}

/// Inputs of the cigar-shape scaling algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicSpec {
    pub reference: ShapeVector,
    pub target_params: u64,
    /// 1-based inclusive layer range rounded down; `None` uses
    /// [`early_middle_window`].
    #[serde(default)]
    pub early_middle: Option<(usize, usize)>,
}

/// Layers 2-5 (1-based) of a 12-layer network, mapped proportionally to
/// other depths and kept clear of the first and last layer.
pub fn early_middle_window(num_layers: usize) -> Option<(usize, usize)> {
    if num_layers < 3 {
        return None;
    }
    let scaled = |k: f64| (k * num_layers as f64 / 12.0).round() as usize;
    let start = scaled(2.0).max(2);
    let end = scaled(5.0).min(num_layers - 1).max(start);
    Some((start, end))
}

/// Scales every layer of the reference linearly towards `target_params`,
/// rounding early-middle layers down and the rest up to allowed dims.
///
/// The factor is taken over the shape-dependent part of the count only:
/// `(target - fixed) / (reference - fixed)`, where `fixed` is what remains
/// of the reference count after removing the per-layer formula terms.
/// Embeddings would otherwise dominate the ratio on small backbones.
pub fn cigar_scale(spec: &HeuristicSpec, config: &BackboneConfig) -> Result<ShapeVector> {
    let space = config.design_space()?;
    space.check(&spec.reference)?;
    let reference_params = count_params(config, &spec.reference)?;
    if spec.target_params == 0 {
        return Err(Error::Config("target params must be positive".into()));
    }
    let min = count_params(config, &space.smallest())?;
    let max = count_params(config, &space.largest())?;
    if !(min..=max).contains(&spec.target_params) {
        return Err(Error::Infeasible(format!(
            "target {} params outside the reachable range [{min}, {max}]",
            spec.target_params
        )));
    }
    let window = match spec.early_middle {
        Some((a, b)) if a == 0 || a > b || b > space.num_layers() => {
            return Err(Error::Config(format!("early-middle layers {a}-{b} out of range")));
        }
        Some(w) => Some(w),
        None => early_middle_window(space.num_layers()),
    };
    let dims = config.layer_dims();
    let layer_part: u64 = spec
        .reference
        .dims()
        .iter()
        .map(|&d| layer_params_formula(d as u64, dims.d_attn as u64, dims.d_ff as u64))
        .sum();
    let fixed = reference_params.saturating_sub(layer_part) as f64;
    let factor = (spec.target_params as f64 - fixed) / (reference_params as f64 - fixed);
    let dims = spec
        .reference
        .dims()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let x = d as f64 * factor;
            match window {
                Some((a, b)) if (a..=b).contains(&(i + 1)) => snap_down(&space, x),
                _ => snap_up(&space, x),
            }
        })
        .collect();
    Ok(ShapeVector::new(dims))
}

/// Whether the first and last layers are at least as wide as every layer
/// in the early-middle window.
pub fn is_cigar(shape: &ShapeVector, window: Option<(usize, usize)>) -> bool {
    let d = shape.dims();
    let Some((a, b)) = window else { return true };
    let widest = d[a - 1..b].iter().copied().max().unwrap_or(0);
    d[0] >= widest && d[d.len() - 1] >= widest
}

/// Euclidean norm of the elementwise difference.
pub fn shape_diff(a: &ShapeVector, b: &ShapeVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("shapes of length {} and {}", a.len(), b.len())));
    }
    Ok(a.dims()
        .iter()
        .zip(b.dims())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckSide {
    Input,
    Output,
}

impl BottleneckSide {
    pub fn name(self) -> &'static str {
        match self {
            BottleneckSide::Input => "input",
            BottleneckSide::Output => "output",
        }
    }
}

/// Softmax of each bottleneck's principal diagonal, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalProfile {
    /// `(input, output)` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn diagonal_profile(model: &Supernet) -> DiagonalProfile {
    let diag = |id| {
        let w = model.params().get(id);
        let (r, c) = w.matrix_dims();
        softmax(&(0..r.min(c)).map(|i| w.at(i, i)).collect::<Vec<_>>())
    };
    DiagonalProfile {
        layers: model
            .layers()
            .iter()
            .map(|l| (diag(l.in_bottleneck().weight()), diag(l.out_bottleneck().weight())))
            .collect(),
    }
}

impl DiagonalProfile {
    /// `layer,side,index,weight` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,side,index,weight\n");
        for (l, (inp, out)) in self.layers.iter().enumerate() {
            for (side, v) in [(BottleneckSide::Input, inp), (BottleneckSide::Output, out)] {
                for (i, w) in v.iter().enumerate() {
                    s.push_str(&format!("{l},{},{i},{w}\n", side.name()));
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySample {
    pub shape: ShapeVector,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStudy {
    pub format_version: u32,
    pub n: usize,
    pub spearman: f64,
    pub pearson: f64,
    pub shape_diffs: Vec<f64>,
    pub metric_gaps: Vec<f64>,
}

/// Correlates each sample's distance to `optimal` with its metric gap.
pub fn correlation_study(samples: &[StudySample], optimal: &StudySample) -> Result<CorrelationStudy> {
    if samples.len() < 3 {
        return Err(Error::Validation(format!("{} samples; at least 3 are needed", samples.len())));
    }
    let shape_diffs = samples
        .iter()
        .map(|s| shape_diff(&s.shape, &optimal.shape))
        .collect::<Result<Vec<_>>>()?;
    let metric_gaps: Vec<f64> = samples.iter().map(|s| (s.metric - optimal.metric).abs()).collect();
    Ok(CorrelationStudy {
        format_version: crate::surrogate::FORMAT_VERSION,
        n: samples.len(),
        spearman: spearman(&shape_diffs, &metric_gaps)?,
        pearson: pearson(&shape_diffs, &metric_gaps)?,
        shape_diffs,
        metric_gaps,
    })
}

/// A row of the published templated-shape table: BERT-base shapes with
/// their reported size (millions) and GLUE averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedShape {
    pub name: &'static str,
    pub params_m: f64,
    pub g_direct: f64,
    pub g_scratch: f64,
    pub dims: [usize; 12],
}

/// Fixture for exercising the correlation utilities; not a target.
pub fn published_shapes() -> Vec<PublishedShape> {
    let row = |name, params_m, g_direct, g_scratch, dims| PublishedShape {
        name,
        params_m,
        g_direct,
        g_scratch,
        dims,
    };
    vec![
        row("evo_search_1", 65.0, 6.86, 4.45, [480, 360, 360, 240, 240, 360, 480, 480, 360, 480, 540, 540]),
        row("evo_search_2", 63.0, 7.09, 4.55, [480, 240, 360, 240, 540, 480, 360, 360, 360, 360, 540, 480]),
        row("lower_triangle", 64.0, 7.31, 4.67, ShapeTemplate::LowerTriangle.reference_dims()),
        row("random", 64.0, 7.49, 4.91, [480, 360, 360, 540, 480, 540, 360, 480, 540, 120, 360, 540]),
        row("rectangle", 58.0, 7.5, 4.72, ShapeTemplate::Rectangle.reference_dims()),
        row("inverted_diamond", 65.0, 8.12, 4.93, ShapeTemplate::InvertedDiamond.reference_dims()),
        row("bottle", 64.0, 8.31, 4.9, ShapeTemplate::Bottle.reference_dims()),
        row("diamond", 64.0, 8.36, 5.13, ShapeTemplate::Diamond.reference_dims()),
        row("upper_triangle", 64.0, 8.43, 5.16, ShapeTemplate::UpperTriangle.reference_dims()),
        row("inverted_bottle", 64.0, 9.22, 5.37, ShapeTemplate::InvertedBottle.reference_dims()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(d: &[usize]) -> ShapeVector {
        ShapeVector::new(d.to_vec())
    }

    #[test]
    fn reference_templates_are_exact() {
        let space = DesignSpace::bert_base();
        for t in ShapeTemplate::ALL {
            assert_eq!(templated_shape(t, &space).unwrap().dims(), &t.reference_dims(), "{t}");
        }
    }

    #[test]
    fn desk_templates_are_valid() {
        let space = DesignSpace::new(vec![16, 32, 48, 64], 4).unwrap();
        for t in ShapeTemplate::ALL {
            let s = templated_shape(t, &space).unwrap();
            assert!(space.contains(&s), "{t}: {s}");
        }
        assert_eq!(templated_shape(ShapeTemplate::LowerTriangle, &space).unwrap().dims(), &[16, 32, 48, 64]);
        assert!("cigar".parse::<ShapeTemplate>().is_err());
        assert_eq!("bottle".parse::<ShapeTemplate>().unwrap(), ShapeTemplate::Bottle);
    }

    #[test]
    fn snapping() {
        let space = DesignSpace::new(vec![10, 20, 30], 1).unwrap();
        assert_eq!(snap_up(&space, 11.0), 20);
        assert_eq!(snap_up(&space, 31.0), 30);
        assert_eq!(snap_down(&space, 19.9), 10);
        assert_eq!(snap_down(&space, 5.0), 10);
        assert_eq!(snap_down(&space, 20.0 - 1e-12), 20);
        assert_eq!(snap_nearest(&space, 15.0), 20);
        assert_eq!(snap_nearest(&space, 14.9), 10);
    }

    #[test]
    fn windows() {
        assert_eq!(early_middle_window(12), Some((2, 5)));
        assert_eq!(early_middle_window(4), Some((2, 2)));
        assert_eq!(early_middle_window(2), None);
        assert_eq!(early_middle_window(24), Some((4, 10)));
    }

    #[test]
    fn shape_diff_values() {
        assert_eq!(shape_diff(&sv(&[0, 3]), &sv(&[4, 0])).unwrap(), 5.0);
        assert_eq!(shape_diff(&sv(&[7, 7]), &sv(&[7, 7])).unwrap(), 0.0);
        assert!(shape_diff(&sv(&[1]), &sv(&[1, 2])).is_err());
    }

    #[test]
    fn identity_scaling_stays_close() {
        let cfg = BackboneConfig::bert_base();
        let reference = sv(&[360, 240, 240, 240, 360, 360, 360, 360, 480, 480, 540, 540]);
        let spec = HeuristicSpec {
            target_params: count_params(&cfg, &reference).unwrap(),
            reference: reference.clone(),
            early_middle: None,
        };
        assert_eq!(cigar_scale(&spec, &cfg).unwrap(), reference);
    }

    #[test]
    fn out_of_range_target_is_infeasible() {
        let cfg = BackboneConfig::desk();
        let spec = HeuristicSpec {
            reference: sv(&[32, 16, 32, 64]),
            target_params: 1,
            early_middle: None,
        };
        assert!(matches!(cigar_scale(&spec, &cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn fresh_model_profile_is_uniform() {
        let m = Supernet::build(BackboneConfig::desk(), 3).unwrap();
        let p = diagonal_profile(&m);
        assert_eq!(p.layers.len(), 4);
        for (a, b) in &p.layers {
            for v in [a, b] {
                assert!(v.iter().all(|&x| x == v[0]));
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let csv = p.to_csv();
        assert!(csv.starts_with("layer,side,index,weight\n0,input,0,"));
        assert_eq!(csv.lines().count(), 1 + 4 * 2 * 64);
    }

    #[test]
    fn study_monotone_metric() {
        let opt = StudySample {
            shape: sv(&[16, 16]),
            metric: 1.0,
        };
        let samples: Vec<StudySample> = [[16, 32], [32, 32], [64, 16], [64, 64]]
            .iter()
            .map(|d| {
                let shape = sv(d);
                let m = 1.0 + shape_diff(&shape, &opt.shape).unwrap().powi(3);
                StudySample { shape, metric: m }
            })
            .collect();
        let r = correlation_study(&samples, &opt).unwrap();
        assert!((r.spearman - 1.0).abs() < 1e-12);
        let mut rev = samples.clone();
        rev.reverse();
        let r2 = correlation_study(&rev, &opt).unwrap();
        assert!((r.spearman - r2.spearman).abs() < 1e-12 && (r.pearson - r2.pearson).abs() < 1e-12);
        assert!(correlation_study(&samples[..2], &opt).is_err());
    }
}
