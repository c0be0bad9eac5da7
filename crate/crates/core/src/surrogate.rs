//! Surrogate datasets and fitted perplexity/latency predictors.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbt::{canonical_order, GbtModel, GbtParams};
use crate::space::{DesignSpace, ShapeVector};
use crate::stats::{pearson, r2, spearman};
use crate::supernet::{count_params, Supernet};
use crate::train::{evaluate_perplexity, EvalSet};

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FEATURE: &str = "params";

/// One measured sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSample {
    pub shape: ShapeVector,
    pub params: u64,
    pub target: f64,
}

/// Which columns a predictor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Shape dims only.
    Perplexity,
    /// Shape dims plus total parameter count.
    Latency,
}

impl PredictorKind {
    pub fn feature_names(self, num_layers: usize) -> Vec<String> {
        let mut names: Vec<String> = (0..num_layers).map(|i| format!("shape_{i}")).collect();
        if self == PredictorKind::Latency {
            names.push(PARAMS_FEATURE.to_string());
        }
        names
    }

    pub fn features(self, shape: &ShapeVector, params: u64) -> Vec<f64> {
        let mut f: Vec<f64> = shape.dims().iter().map(|&d| d as f64).collect();
        if self == PredictorKind::Latency {
            f.push(params as f64);
        }
        f
    }
}

/// Features for `model`, chosen by whether its schema ends in `params`.
pub fn model_features(model: &GbtModel, shape: &ShapeVector, params: u64) -> Vec<f64> {
    let kind = if model.feature_names.last().map(String::as_str) == Some(PARAMS_FEATURE) {
        PredictorKind::Latency
    } else {
        PredictorKind::Perplexity
    };
    kind.features(shape, params)
}

/// Writes the `shape_0..shape_{L-1},params,target` CSV.
pub fn write_dataset_csv<W: Write>(samples: &[SurrogateSample], out: W) -> Result<()> {
    let num_layers = samples.first().map_or(0, |s| s.shape.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = PredictorKind::Perplexity.feature_names(num_layers);
    header.push(PARAMS_FEATURE.into());
    header.push("target".into());
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        if s.shape.len() != num_layers {
            return Err(Error::Validation("samples have different layer counts".into()));
        }
        let mut rec: Vec<String> = s.shape.dims().iter().map(usize::to_string).collect();
        rec.push(s.params.to_string());
        rec.push(s.target.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Vec<SurrogateSample>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let n = header.len();
    if n < 3 || &header[n - 2] != PARAMS_FEATURE || &header[n - 1] != "target" {
        return Err(Error::Data("dataset header must be shape_0..shape_{L-1},params,target".into()));
    }
    for (i, h) in header.iter().take(n - 2).enumerate() {
        if h != format!("shape_{i}") {
            return Err(Error::Data(format!("unexpected column {h:?}, expected shape_{i}")));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Data(format!("row {}: bad {what}", line + 2));
        let dims = (0..n - 2)
            .map(|i| rec[i].trim().parse::<usize>().map_err(|_| bad("shape dim")))
            .collect::<Result<Vec<_>>>()?;
        let params = rec[n - 2].trim().parse::<u64>().map_err(|_| bad("params"))?;
        let target = rec[n - 1].trim().parse::<f64>().map_err(|_| bad("target"))?;
        if !target.is_finite() {
            return Err(bad("target (not finite)"));
        }
        out.push(SurrogateSample {
            shape: ShapeVector::new(dims),
            params,
            target,
        });
    }
    Ok(out)
}

/// `n` uniform random shapes with exact params and measured perplexity.
pub fn collect_perplexity_dataset<R: Rng + ?Sized>(
    model: &Supernet,
    space: &DesignSpace,
    n: usize,
    eval: &EvalSet,
    rng: &mut R,
) -> Result<Vec<SurrogateSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|_| {
            let shape = space.sample(rng);
            Ok(SurrogateSample {
                params: count_params(model.config(), &shape)?,
                target: evaluate_perplexity(model, &shape, eval)?,
                shape,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub importance: f64,
}

/// Held-out diagnostics of a fitted predictor. Undefined statistics
/// (constant targets or predictions) are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub format_version: u32,
    pub kind: PredictorKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_r2: Option<f64>,
    pub test_r2: Option<f64>,
    pub test_spearman: Option<f64>,
    pub test_pearson: Option<f64>,
    pub constant_model: bool,
    pub feature_importance: Vec<FeatureImportance>,
}

/// Minimum dataset size accepted by [`fit_predictor`].
pub const MIN_SAMPLES: usize = 20;

/// Fits a GBT predictor on a seeded 80/20 split and reports held-out quality.
pub fn fit_predictor(
    samples: &[SurrogateSample],
    kind: PredictorKind,
    params: &GbtParams,
    seed: u64,
) -> Result<(GbtModel, FitReport)> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::Data(format!(
            "{} samples; at least {MIN_SAMPLES} are needed",
            samples.len()
        )));
    }
    let num_layers = samples[0].shape.len();
    if samples.iter().any(|s| s.shape.len() != num_layers) {
        return Err(Error::Data("samples have different layer counts".into()));
    }
    let x: Vec<Vec<f64>> = samples.iter().map(|s| kind.features(&s.shape, s.params)).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.target).collect();

    // Split from a canonical order so the result ignores input order.
    let mut order = canonical_order(&x, &y);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (samples.len() / 5).max(1);
    let (test, train) = order.split_at(n_test);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
    };
    let (x_train, y_train) = pick(train);
    let (x_test, y_test) = pick(test);

    let model = GbtModel::fit(&x_train, &y_train, kind.feature_names(num_layers), params)?;
    let predict_all = |xs: &[Vec<f64>]| xs.iter().map(|r| model.predict(r)).collect::<Result<Vec<_>>>();
    let p_train = predict_all(&x_train)?;
    let p_test = predict_all(&x_test)?;
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let importance = model.feature_importance()?;
    let report = FitReport {
        format_version: FORMAT_VERSION,
        kind,
        seed,
        n_train: train.len(),
        n_test,
        train_r2: defined(r2(&y_train, &p_train))?,
        test_r2: defined(r2(&y_test, &p_test))?,
        test_spearman: defined(spearman(&y_test, &p_test))?,
        test_pearson: defined(pearson(&y_test, &p_test))?,
        constant_model: model.is_constant(),
        feature_importance: model
            .feature_names
            .iter()
            .zip(importance)
            .map(|(f, i)| FeatureImportance {
                feature: f.clone(),
                importance: i,
            })
            .collect(),
    };
    Ok((model, report))
}

/// Saved predictor: the model plus a format version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorFile {
    pub format_version: u32,
    pub kind: PredictorKind,
    pub model: GbtModel,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize, seed: u64, f: impl Fn(&[usize]) -> f64) -> Vec<SurrogateSample> {
        let space = DesignSpace::new(vec![16, 32, 48, 64], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let shape = space.sample(&mut rng);
                SurrogateSample {
                    params: shape.dims().iter().map(|&d| d as u64 * 100).sum(),
                    target: f(shape.dims()),
                    shape,
                }
            })
            .collect()
    }

    #[test]
    fn csv_round_trip() {
        let s = synthetic(5, 0, |d| d[0] as f64 / 3.0);
        let mut buf = Vec::new();
        write_dataset_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("shape_0,shape_1,shape_2,shape_3,params,target\n"));
        assert_eq!(read_dataset_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn bad_csv_is_data_error() {
        assert!(matches!(read_dataset_csv(&b"a,b\n1,2\n"[..]), Err(Error::Data(_))));
        assert!(matches!(
            read_dataset_csv(&b"shape_0,params,target\nx,1,2\n"[..]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fit_on_first_feature() {
        let s = synthetic(500, 1, |d| d[0] as f64);
        let (_, rep) = fit_predictor(&s, PredictorKind::Perplexity, &GbtParams::default(), 0).unwrap();
        assert!(rep.test_r2.unwrap() >= 0.95);
        assert!(rep.train_r2.unwrap() >= rep.test_r2.unwrap() - 1e-12);
        assert_eq!(rep.n_train + rep.n_test, 500);
    }

    #[test]
    fn too_few_samples() {
        let s = synthetic(10, 1, |d| d[0] as f64);
        assert!(matches!(
            fit_predictor(&s, PredictorKind::Perplexity, &GbtParams::default(), 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn constant_target_is_reported_not_error() {
        let s = synthetic(40, 2, |_| 7.0);
        let (m, rep) = fit_predictor(&s, PredictorKind::Latency, &GbtParams::default(), 0).unwrap();
        assert!(rep.constant_model);
        assert_eq!(rep.test_r2, None);
        assert_eq!(m.predict(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 7.0);
    }

    #[test]
    fn fit_ignores_sample_order() {
        let s = synthetic(60, 3, |d| (d[1] * d[2]) as f64);
        let mut r = s.clone();
        r.reverse();
        let (a, ra) = fit_predictor(&s, PredictorKind::Perplexity, &GbtParams::default(), 9).unwrap();
        let (b, rb) = fit_predictor(&r, PredictorKind::Perplexity, &GbtParams::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
