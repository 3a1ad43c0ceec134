use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::collect::StateSample;
use crate::common::derive_stream;
use crate::dataset::{observation_of, ImageDims, SampleRecord};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Position error threshold in meters.
    pub tau: f64,
    pub lambda: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            tau: 0.02,
            lambda: 1e-3,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.lambda >= 0.0 && self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(
                "probe config: tau > 0, lambda >= 0 and 0 < train_fraction < 1 required",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Test MSE per state dimension `(x, y, z, phi, theta, psi, g)`.
    pub per_dim_mse: [f64; 7],
    pub mean_mse: f64,
    /// Fraction of test samples whose x, y and z errors are all within `tau`.
    pub accuracy: f64,
    pub tau: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Affine map `y = W^T x + b` fitted on centered data.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl RidgeFit {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        (self.weights.transpose() * xv + &self.bias).iter().copied().collect()
    }
}

/// Closed-form ridge regression `W = (Xc^T Xc + lambda I)^-1 Xc^T Yc`; the bias is not penalized.
pub fn fit_ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<RidgeFit> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::invalid("ridge fit needs matching, nonempty inputs"));
    }
    let d = x[0].len();
    let k = y[0].len();
    let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let ym = DMatrix::from_fn(n, k, |i, j| y[i][j]);
    let x_mean = DVector::from_fn(d, |j, _| xm.column(j).mean());
    let y_mean = DVector::from_fn(k, |j, _| ym.column(j).mean());
    let xc = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - x_mean[j]);
    let yc = DMatrix::from_fn(n, k, |i, j| ym[(i, j)] - y_mean[j]);
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda;
    let rhs = xc.transpose() * yc;
    let weights = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::invalid(format!("ridge system is singular: {e}")))?
            * rhs,
    };
    let bias = &y_mean - weights.transpose() * x_mean;
    Ok(RidgeFit { weights, bias })
}

fn split(n: usize, cfg: &ProbeConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_stream(cfg.split_seed, 0).rng());
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Fits and scores a probe on precomputed features.
pub fn probe_features(features: &[Vec<f64>], targets: &[[f64; 7]], cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if features.len() != targets.len() || features.len() < 2 {
        return Err(Error::invalid("probe needs at least two samples with matching targets"));
    }
    let (train, test) = split(features.len(), cfg);
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
    let ys: Vec<Vec<f64>> = train.iter().map(|&i| targets[i].to_vec()).collect();
    let fit = fit_ridge(&xs, &ys, cfg.lambda)?;
    let mut sq = [0.0; 7];
    let mut hits = 0;
    for &i in &test {
        let pred = fit.predict(&features[i]);
        let mut within = true;
        for d in 0..7 {
            let e = pred[d] - targets[i][d];
            sq[d] += e * e;
            if d < 3 && e.abs() > cfg.tau {
                within = false;
            }
        }
        hits += within as usize;
    }
    let nt = test.len() as f64;
    let per_dim_mse = sq.map(|s| s / nt);
    Ok(ProbeReport {
        per_dim_mse,
        mean_mse: per_dim_mse.iter().sum::<f64>() / 7.0,
        accuracy: hits as f64 / nt,
        tau: cfg.tau,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Probes the frozen model's prompt-end hidden state for the robot state.
pub fn linear_probe(model: &Model<f32>, samples: &[StateSample], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let features = samples
        .iter()
        .map(|s| {
            let ids = model.tokenizer.encode_text(&s.instruction)?;
            let h = model.hidden_features(&s.observation, &ids)?;
            Ok(h.into_iter().map(f64::from).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let targets: Vec<[f64; 7]> = samples.iter().map(|s| s.state.to_array()).collect();
    probe_features(&features, &targets, cfg)
}

/// As [`linear_probe`] on corpus records; targets are the bin centers of the stored tokens.
pub fn linear_probe_records(
    model: &Model<f32>,
    records: &[SampleRecord],
    image: &ImageDims,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut features = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        let ids = model.tokenizer.encode_text(&r.instruction)?;
        let h = model.hidden_features(&observation_of(r, image), &ids)?;
        features.push(h.into_iter().map(f64::from).collect());
        targets.push(model.tokenizer.decode_action(&r.target)?.to_array());
    }
    probe_features(&features, &targets, cfg)
}
