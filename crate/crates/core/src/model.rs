//! Logistic choice model fitted by maximum likelihood.
//!
//! `p = σ(β₀ + Σ βⱼ xⱼ)` is the probability that the user forwards the
//! later source (label 1). Fitting maximizes
//! `ln L(β) − (l2/2)‖β‖²` by gradient ascent with an Armijo backtracking
//! line search; the intercept is never penalized. The hour-valued features
//! are z-scored inside the model with statistics taken from the training
//! data, the rest pass through unchanged.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    FeatureGroup, FeatureVector, Grouping, LabeledVector, CONTINUOUS, N_FEATURES,
};
use crate::par;

/// Rows per partial sum. Partials are folded in chunk order, so sums do not
/// depend on how many threads computed them.
const CHUNK_ROWS: usize = 2048;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

/// `ln(1 + e^η)` without overflow.
pub fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleStat {
    pub mean: f64,
    pub std: f64,
    /// Zero-variance column; `std` was replaced by 1.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl ScaleStat {
    fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 && std.is_finite() {
            ScaleStat {
                mean,
                std,
                degenerate: false,
            }
        } else {
            ScaleStat {
                mean,
                std: 1.0,
                degenerate: true,
            }
        }
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub grouping: Grouping,
    /// Groups left out of the model.
    pub excluded: Vec<FeatureGroup>,
    /// Largest tolerated `‖β‖∞` when `l2 == 0`; beyond it the data are
    /// treated as separable.
    pub divergence_bound: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            l2: 0.0,
            tol: 1e-8,
            max_iter: 500,
            grouping: Grouping::table(),
            excluded: Vec::new(),
            divergence_bound: 20.0,
        }
    }
}

impl FitConfig {
    pub fn features(&self) -> Vec<usize> {
        self.grouping.features_without(&self.excluded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientNorm,
    RelativeChange,
    MaxIterations,
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Unpenalized `ln L` at the returned parameters.
    pub log_likelihood: f64,
    /// Penalized objective at the returned parameters.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `∞`-norm of the per-sample objective gradient.
    pub gradient_norm: f64,
    pub stop_reason: StopReason,
    pub n: usize,
    /// Objective after each accepted step, starting from β = 0.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Intercept and weights expressed on the raw (unscaled) feature values.
/// Features absent from the model have weight 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawCoefficients {
    pub intercept: f64,
    pub weights: [f64; N_FEATURES],
}

impl RawCoefficients {
    /// `[β₀, β₁, …, β₁₆]`.
    pub fn as_array(&self) -> [f64; N_FEATURES + 1] {
        let mut out = [0.0; N_FEATURES + 1];
        out[0] = self.intercept;
        out[1..].copy_from_slice(&self.weights);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceModel {
    pub beta0: f64,
    /// One weight per entry of `features`.
    pub beta: Vec<f64>,
    /// 1-based feature indices the model uses, ascending.
    pub features: Vec<usize>,
    /// Scaling for the continuous features present in `features`.
    pub scaler: BTreeMap<usize, ScaleStat>,
    pub grouping: Grouping,
    pub excluded: Vec<FeatureGroup>,
}

impl ChoiceModel {
    /// A model over `features` with every parameter zero and identity
    /// scaling.
    pub fn zeros(features: Vec<usize>) -> Self {
        ChoiceModel {
            beta0: 0.0,
            beta: vec![0.0; features.len()],
            features,
            scaler: BTreeMap::new(),
            grouping: Grouping::table(),
            excluded: Vec::new(),
        }
    }

    /// The full 16-feature model with identity scaling.
    pub fn with_coefficients(beta0: f64, beta: [f64; N_FEATURES]) -> Self {
        let mut m = Self::zeros((1..=N_FEATURES).collect());
        m.beta0 = beta0;
        m.beta = beta.to_vec();
        m
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    fn transform(&self, index: usize, v: f64) -> f64 {
        match self.scaler.get(&index) {
            Some(s) => s.apply(v),
            None => v,
        }
    }

    /// Model inputs for `x`: the selected features with scaling applied.
    pub fn design_row(&self, x: &FeatureVector) -> Vec<f64> {
        self.features
            .iter()
            .map(|&i| self.transform(i, x.get(i)))
            .collect()
    }

    pub fn linear_predictor(&self, x: &FeatureVector) -> f64 {
        self.features
            .iter()
            .zip(&self.beta)
            .fold(self.beta0, |acc, (&i, b)| {
                acc + b * self.transform(i, x.get(i))
            })
    }

    /// Probability of label 1 (forwarding the later source), strictly
    /// inside `(0, 1)`.
    pub fn predict_proba(&self, x: &FeatureVector) -> f64 {
        clamp_open(sigmoid(self.linear_predictor(x)))
    }

    /// `[P(label 0), P(label 1)]`.
    pub fn predict_label_probs(&self, x: &FeatureVector) -> [f64; 2] {
        let p = self.predict_proba(x);
        [1.0 - p, p]
    }

    /// Probability for a vector holding only this model's features, in
    /// `features` order, unscaled.
    pub fn predict_proba_subset(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.dim() {
            return Err(Error::Contract(format!(
                "model expects {} features, got {}",
                self.dim(),
                values.len()
            )));
        }
        let eta = self
            .features
            .iter()
            .zip(&self.beta)
            .zip(values)
            .fold(self.beta0, |acc, ((&i, b), &v)| {
                acc + b * self.transform(i, v)
            });
        Ok(clamp_open(sigmoid(eta)))
    }

    /// 1 iff `predict_proba(x) >= threshold`.
    pub fn classify(&self, x: &FeatureVector, threshold: f64) -> u8 {
        u8::from(self.predict_proba(x) >= threshold)
    }

    pub fn raw_coefficients(&self) -> RawCoefficients {
        let mut intercept = self.beta0;
        let mut weights = [0.0; N_FEATURES];
        for (&i, &b) in self.features.iter().zip(&self.beta) {
            match self.scaler.get(&i) {
                Some(s) => {
                    weights[i - 1] = b / s.std;
                    intercept -= b * s.mean / s.std;
                }
                None => weights[i - 1] = b,
            }
        }
        RawCoefficients { intercept, weights }
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|i| format!("f{i}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            beta0: self.beta0,
            beta: self.beta.clone(),
            feature_names: self.feature_names(),
            scaler: self
                .scaler
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            grouping: self.grouping.clone(),
            excluded_groups: self.excluded.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let features = file
            .feature_names
            .iter()
            .map(|name| {
                name.strip_prefix('f')
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|n| (1..=N_FEATURES).contains(n))
                    .ok_or_else(|| Error::Data(format!("bad feature name {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if features.len() != file.beta.len() {
            return Err(Error::Data(format!(
                "{} feature names for {} weights",
                features.len(),
                file.beta.len()
            )));
        }
        let scaler = file
            .scaler
            .into_iter()
            .map(|(k, v)| {
                let idx = k
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("bad scaler key {k:?}")))?;
                if v.std.is_nan() || v.std <= 0.0 {
                    return Err(Error::Data(format!("scaler std for {k} must be positive")));
                }
                Ok((idx, v))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        file.grouping.validate()?;
        Ok(ChoiceModel {
            beta0: file.beta0,
            beta: file.beta,
            features,
            scaler,
            grouping: file.grouping,
            excluded: file.excluded_groups,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(self.to_json()?.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut text = String::new();
        std::io::Read::read_to_string(
            &mut BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?),
            &mut text,
        )
        .map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn clamp_open(p: f64) -> f64 {
    // largest double below 1
    const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    beta0: f64,
    beta: Vec<f64>,
    feature_names: Vec<String>,
    scaler: BTreeMap<String, ScaleStat>,
    grouping: Grouping,
    #[serde(default)]
    excluded_groups: Vec<FeatureGroup>,
}

/// Scaled design matrix, row-major, plus labels as 0.0/1.0.
struct Design {
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Design {
    fn new(model: &ChoiceModel, data: &[LabeledVector]) -> Self {
        let d = model.dim();
        let mut x = Vec::with_capacity(data.len() * d);
        for row in data {
            x.extend(model.design_row(&row.x));
        }
        Design {
            n: data.len(),
            d,
            x,
            y: data.iter().map(|r| f64::from(r.label)).collect(),
        }
    }

    /// `ln L` and, if asked, its gradient w.r.t. `theta = [β₀, β…]`.
    fn log_likelihood(&self, theta: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let d = self.d;
        let n_chunks = self.n.div_ceil(CHUNK_ROWS);
        let partials = par::map_range(n_chunks, |k| {
            let lo = k * CHUNK_ROWS;
            let hi = (lo + CHUNK_ROWS).min(self.n);
            let mut ll = 0.0;
            let mut grad = if with_grad {
                vec![0.0; d + 1]
            } else {
                Vec::new()
            };
            for i in lo..hi {
                let row = &self.x[i * d..(i + 1) * d];
                let eta = row
                    .iter()
                    .zip(&theta[1..])
                    .fold(theta[0], |acc, (x, b)| acc + x * b);
                let y = self.y[i];
                // y·η − softplus(η), written to avoid cancellation
                ll -= if y > 0.5 {
                    softplus(-eta)
                } else {
                    softplus(eta)
                };
                if with_grad {
                    let r = y - sigmoid(eta);
                    grad[0] += r;
                    for (g, x) in grad[1..].iter_mut().zip(row) {
                        *g += r * x;
                    }
                }
            }
            (ll, grad)
        });
        let mut ll = 0.0;
        let mut grad = if with_grad {
            vec![0.0; d + 1]
        } else {
            Vec::new()
        };
        for (pll, pgrad) in partials {
            ll += pll;
            for (g, p) in grad.iter_mut().zip(pgrad) {
                *g += p;
            }
        }
        (ll, grad)
    }
}

fn theta_of(m: &ChoiceModel) -> Vec<f64> {
    std::iter::once(m.beta0)
        .chain(m.beta.iter().copied())
        .collect()
}

fn check_labels(data: &[LabeledVector]) -> Result<()> {
    if let Some(r) = data.iter().find(|r| r.label > 1) {
        return Err(Error::Data(format!(
            "label must be 0 or 1, got {}",
            r.label
        )));
    }
    Ok(())
}

/// `ln L = Σ yᵢηᵢ − ln(1 + e^ηᵢ)` of `model` on `data`.
pub fn log_likelihood(model: &ChoiceModel, data: &[LabeledVector]) -> Result<f64> {
    check_labels(data)?;
    Ok(Design::new(model, data)
        .log_likelihood(&theta_of(model), false)
        .0)
}

/// Gradient of `ln L` w.r.t. `[β₀, β…]` in the model's own (scaled)
/// parameterization.
pub fn log_likelihood_gradient(model: &ChoiceModel, data: &[LabeledVector]) -> Result<Vec<f64>> {
    check_labels(data)?;
    Ok(Design::new(model, data)
        .log_likelihood(&theta_of(model), true)
        .1)
}

struct Objective<'a> {
    design: &'a Design,
    l2: f64,
    inv_n: f64,
}

impl Objective<'_> {
    /// Per-sample penalized objective and gradient.
    fn eval(&self, theta: &[f64], with_grad: bool) -> (f64, f64, Vec<f64>) {
        let (ll, mut grad) = self.design.log_likelihood(theta, with_grad);
        let penalty = 0.5 * self.l2 * theta[1..].iter().map(|b| b * b).sum::<f64>();
        if with_grad {
            for (g, b) in grad[1..].iter_mut().zip(&theta[1..]) {
                *g -= self.l2 * b;
            }
            for g in &mut grad {
                *g *= self.inv_n;
            }
        }
        (ll, (ll - penalty) * self.inv_n, grad)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits a choice model to labeled feature vectors.
pub fn fit(data: &[LabeledVector], config: &FitConfig) -> Result<(ChoiceModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Contract("cannot fit on an empty dataset".into()));
    }
    if config.l2.is_nan()
        || config.l2 < 0.0
        || config.tol.is_nan()
        || config.tol <= 0.0
        || config.max_iter == 0
    {
        return Err(Error::Config(format!(
            "need l2 >= 0, tol > 0, max_iter >= 1 (got {}, {}, {})",
            config.l2, config.tol, config.max_iter
        )));
    }
    config.grouping.validate()?;
    check_labels(data)?;
    if let Some((row, _)) = data
        .iter()
        .enumerate()
        .find(|(_, r)| r.x.values().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Data(format!(
            "non-finite feature value in row {}",
            row + 1
        )));
    }
    let positives = data.iter().filter(|r| r.label == 1).count();
    if config.l2 == 0.0 && (positives == 0 || positives == data.len()) {
        return Err(Error::NonIdentifiable(format!(
            "all {} training labels are {}; set l2 > 0 to fit anyway",
            data.len(),
            u8::from(positives > 0)
        )));
    }

    let features = config.features();
    let mut model = ChoiceModel::zeros(features.clone());
    model.grouping = config.grouping.clone();
    model.excluded = config.excluded.clone();
    for &i in features.iter().filter(|i| CONTINUOUS.contains(i)) {
        let stat = ScaleStat::fit(data.iter().map(|r| r.x.get(i)));
        if stat.degenerate {
            log::warn!("feature f{i} has zero variance; scaling disabled");
        }
        model.scaler.insert(i, stat);
    }

    let design = Design::new(&model, data);
    let objective = Objective {
        design: &design,
        l2: config.l2,
        inv_n: 1.0 / data.len() as f64,
    };

    let mut theta = vec![0.0; model.dim() + 1];
    let (mut ll, mut f, mut grad) = objective.eval(&theta, true);
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    while iterations < config.max_iter {
        let gnorm = inf_norm(&grad);
        if gnorm < config.tol {
            stop = StopReason::GradientNorm;
            break;
        }
        let gg: f64 = grad.iter().map(|g| g * g).sum();

        let mut t = step;
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(th, g)| th + t * g).collect();
            let (_, fc, _) = objective.eval(&cand, false);
            if fc.is_finite() && fc >= f + ARMIJO_C * t * gg {
                break Some((cand, t));
            }
            t *= 0.5;
            if t < MIN_STEP {
                break None;
            }
        };
        let Some((cand, t)) = accepted else {
            stop = StopReason::LineSearchStalled;
            break;
        };
        iterations += 1;

        let (ll_c, f_c, grad_c) = objective.eval(&cand, true);
        // Barzilai-Borwein step for the next trial, on the minimization form
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let sy: f64 = s
            .iter()
            .zip(grad_c.iter().zip(&grad))
            .map(|(s, (gc, g))| s * (g - gc))
            .sum();
        let ss: f64 = s.iter().map(|x| x * x).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            t * 2.0
        };

        let rel = (f_c - f).abs() / f.abs().max(f64::MIN_POSITIVE);
        theta = cand;
        ll = ll_c;
        f = f_c;
        grad = grad_c;
        trace.push(f);

        if config.l2 == 0.0 && inf_norm(&theta[1..]).max(theta[0].abs()) > config.divergence_bound {
            return Err(Error::NonIdentifiable(format!(
                "coefficients exceed {} after {iterations} iterations; the classes look separable, \
                 set l2 > 0",
                config.divergence_bound
            )));
        }
        if rel < config.tol {
            stop = StopReason::RelativeChange;
            break;
        }
    }
    if stop == StopReason::MaxIterations && inf_norm(&grad) < config.tol {
        stop = StopReason::GradientNorm;
    }

    model.beta0 = theta[0];
    model.beta = theta[1..].to_vec();
    let report = TrainReport {
        log_likelihood: ll,
        objective: f * data.len() as f64,
        iterations,
        converged: matches!(stop, StopReason::GradientNorm | StopReason::RelativeChange),
        gradient_norm: inf_norm(&grad),
        stop_reason: stop,
        n: data.len(),
        trace,
    };
    log::info!(
        "fit: n={} d={} ln L={:.6} iterations={} stop={:?}",
        data.len(),
        model.dim(),
        report.log_likelihood,
        report.iterations,
        report.stop_reason
    );
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn vec16(pairs: &[(usize, f64)]) -> FeatureVector {
        let mut x = FeatureVector::default();
        for &(i, v) in pairs {
            x.set(i, v);
        }
        x
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledVector> {
        (0..n)
            .map(|_| {
                let mut x = FeatureVector::default();
                for i in 1..=N_FEATURES {
                    let v = if CONTINUOUS.contains(&i) {
                        rng.random_range(0.0..5.0)
                    } else {
                        f64::from(u8::from(rng.random_bool(0.5)))
                    };
                    x.set(i, v);
                }
                LabeledVector {
                    x,
                    label: u8::from(rng.random_bool(0.5)),
                }
            })
            .collect()
    }

    #[test]
    fn zero_model_is_half() {
        let m = ChoiceModel::zeros((1..=16).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for row in random_data(&mut rng, 20) {
            assert_eq!(m.predict_proba(&row.x), 0.5);
        }
    }

    #[test]
    fn intercept_monotone() {
        let x = vec16(&[(1, 1.0), (12, 2.5)]);
        let mut last = 0.0;
        for b0 in [-5.0, -1.0, 0.0, 1.0, 5.0, 20.0, 40.0] {
            let mut m = ChoiceModel::zeros((1..=16).collect());
            m.beta0 = b0;
            m.beta[0] = 0.3;
            let p = m.predict_proba(&x);
            assert!(p > last && p < 1.0, "b0={b0} p={p}");
            last = p;
        }
    }

    #[test]
    fn hand_probability() {
        let mut beta = [0.0; 16];
        beta[0] = -2.0;
        let m = ChoiceModel::with_coefficients(1.0, beta);
        let p = m.predict_proba(&vec16(&[(1, 1.0)]));
        // 1 / (1 + e) = 0.2689414213699951
        assert!((p - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn subset_dimension_mismatch() {
        let m = ChoiceModel::zeros(vec![1, 2, 3]);
        assert!(matches!(
            m.predict_proba_subset(&[1.0, 0.0]),
            Err(Error::Contract(_))
        ));
        assert_eq!(m.predict_proba_subset(&[1.0, 0.0, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn zero_model_log_likelihood() {
        let m = ChoiceModel::zeros((1..=16).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_data(&mut rng, 37);
        let ll = log_likelihood(&m, &data).unwrap();
        assert!((ll + 37.0 * std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn confident_correct_prediction_approaches_zero() {
        let data = [LabeledVector {
            x: FeatureVector::default(),
            label: 1,
        }];
        let mut prev = f64::NEG_INFINITY;
        for b0 in [1.0, 5.0, 20.0, 50.0] {
            let mut m = ChoiceModel::zeros(vec![1]);
            m.beta0 = b0;
            let ll = log_likelihood(&m, &data).unwrap();
            assert!(ll < 0.0 && ll > prev);
            prev = ll;
        }
        assert!(prev > -1e-20);
    }

    #[test]
    fn log_likelihood_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..10 {
            let data = random_data(&mut rng, 20);
            let mut m = ChoiceModel::zeros((1..=16).collect());
            m.beta0 = rng.random_range(-1.0..1.0);
            for b in &mut m.beta {
                *b = rng.random_range(-1.0..1.0);
            }
            let naive: f64 = data
                .iter()
                .map(|r| {
                    let mut eta = m.beta0;
                    for i in 1..=16 {
                        eta += m.beta[i - 1] * r.x.get(i);
                    }
                    f64::from(r.label) * eta - (1.0 + eta.exp()).ln()
                })
                .sum();
            let ll = log_likelihood(&m, &data).unwrap();
            assert!(((ll - naive) / naive).abs() < 1e-12, "{ll} vs {naive}");
        }
    }

    #[test]
    fn stable_for_extreme_eta() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        let mut m = ChoiceModel::zeros(vec![1]);
        m.beta0 = 800.0;
        let data = [LabeledVector {
            x: FeatureVector::default(),
            label: 0,
        }];
        assert_eq!(log_likelihood(&m, &data).unwrap(), -800.0);
        let p = m.predict_proba(&FeatureVector::default());
        assert!(p < 1.0 && p > 0.5);
        m.beta0 = -800.0;
        assert!(m.predict_proba(&FeatureVector::default()) > 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..10 {
            let data = random_data(&mut rng, 30);
            let mut m = ChoiceModel::zeros((1..=16).collect());
            m.beta0 = rng.random_range(-1.0..1.0);
            for b in &mut m.beta {
                *b = rng.random_range(-0.5..0.5);
            }
            let grad = log_likelihood_gradient(&m, &data).unwrap();
            for (j, &gj) in grad.iter().enumerate() {
                let shift = |delta: f64| {
                    let mut mm = m.clone();
                    if j == 0 {
                        mm.beta0 += delta;
                    } else {
                        mm.beta[j - 1] += delta;
                    }
                    log_likelihood(&mm, &data).unwrap()
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                let rel = (gj - fd).abs() / gj.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "coord {j}: {} vs {fd}", gj);
            }
        }
    }

    #[test]
    fn independent_balanced_labels_fit_to_zero() {
        // every feature pattern appears once with each label
        let mut data = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for row in random_data(&mut rng, 200) {
            data.push(LabeledVector { x: row.x, label: 0 });
            data.push(LabeledVector { x: row.x, label: 1 });
        }
        let (m, report) = fit(&data, &FitConfig::default()).unwrap();
        assert!(report.converged);
        assert!(m.beta0.abs() < 1e-4);
        assert!(m.beta.iter().all(|b| b.abs() < 1e-4));
        let n = data.len() as f64;
        assert!((report.log_likelihood + n * std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn single_class_needs_regularization() {
        let data = vec![
            LabeledVector {
                x: FeatureVector::default(),
                label: 1
            };
            5
        ];
        assert!(matches!(
            fit(&data, &FitConfig::default()),
            Err(Error::NonIdentifiable(_))
        ));
        let cfg = FitConfig {
            l2: 1.0,
            ..FitConfig::default()
        };
        let (m, _) = fit(&data, &cfg).unwrap();
        assert!(m.beta0 > 0.0);
    }

    #[test]
    fn separable_pair_triggers_divergence_guard() {
        let data = vec![
            LabeledVector {
                x: vec16(&[(1, 0.0)]),
                label: 0,
            },
            LabeledVector {
                x: vec16(&[(1, 1.0)]),
                label: 1,
            },
        ];
        let err = fit(&data, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonIdentifiable(_)), "{err:?}");
        let cfg = FitConfig {
            l2: 0.1,
            ..FitConfig::default()
        };
        let (m, r) = fit(&data, &cfg).unwrap();
        assert!(r.converged);
        assert!(m.predict_proba(&data[1].x) > 0.5);
        assert!(m.predict_proba(&data[0].x) < 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            fit(&[], &FitConfig::default()),
            Err(Error::Contract(_))
        ));
        let mut x = FeatureVector::default();
        x.set(12, f64::NAN);
        let data = vec![
            LabeledVector { x, label: 0 },
            LabeledVector {
                x: FeatureVector::default(),
                label: 1,
            },
        ];
        assert!(matches!(
            fit(&data, &FitConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn objective_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<LabeledVector> = random_data(&mut rng, 2000)
            .into_iter()
            .map(|mut r| {
                let eta: f64 = (1..=16).map(|i| truth[i - 1] * r.x.get(i)).sum::<f64>() - 1.0;
                r.label = u8::from(rng.random_bool(sigmoid(eta)));
                r
            })
            .collect();
        for l2 in [0.0, 5.0] {
            let cfg = FitConfig {
                l2,
                ..FitConfig::default()
            };
            let (_, report) = fit(&data, &cfg).unwrap();
            assert!(report.trace.len() >= 2);
            for w in report.trace.windows(2) {
                assert!(w[1] >= w[0], "{} then {}", w[0], w[1]);
            }
            if report.stop_reason == StopReason::GradientNorm {
                assert!(report.gradient_norm <= cfg.tol);
            }
        }
    }

    #[test]
    fn ablated_model_is_narrower() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_data(&mut rng, 300);
        let cfg = FitConfig {
            excluded: vec![FeatureGroup::Structural],
            ..FitConfig::default()
        };
        let (m, _) = fit(&data, &cfg).unwrap();
        assert_eq!(m.dim(), 9);
        assert!(!m.features.contains(&4));
        assert_eq!(m.raw_coefficients().weights[3], 0.0);
    }

    #[test]
    fn json_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_data(&mut rng, 300);
        let (m, _) = fit(&data, &FitConfig::default()).unwrap();
        let text = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["beta0"].is_f64());
        assert_eq!(v["beta"].as_array().unwrap().len(), 16);
        assert_eq!(v["feature_names"][11], "f12");
        assert!(v["scaler"]["12"]["mean"].is_f64());
        assert!(v["scaler"]["13"]["std"].as_f64().unwrap() > 0.0);
        assert_eq!(v["grouping"]["temporal"], serde_json::json!([11, 12, 13]));
        let back = ChoiceModel::from_json(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn zero_variance_feature_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<LabeledVector> = random_data(&mut rng, 100)
            .into_iter()
            .map(|mut r| {
                r.x.set(13, 2.0);
                r
            })
            .collect();
        let (m, _) = fit(&data, &FitConfig::default()).unwrap();
        let s = m.scaler[&13];
        assert!(s.degenerate);
        assert_eq!(s.std, 1.0);
    }

    #[test]
    fn classify_threshold_rules() {
        let m = ChoiceModel::zeros((1..=16).collect());
        let x = FeatureVector::default();
        assert_eq!(m.classify(&x, 0.5), 1);
        assert_eq!(m.classify(&x, 0.0), 1);
        assert_eq!(m.classify(&x, 1.0 + 1e-9), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = m;
        for b in &mut m.beta {
            *b = rng.random_range(-1.0..1.0);
        }
        for row in random_data(&mut rng, 100) {
            let mut eta = 0.0;
            for i in 1..=16 {
                eta += m.beta[i - 1] * row.x.get(i);
            }
            let p = 1.0 / (1.0 + (-eta).exp());
            let t = rng.random_range(0.2..0.8);
            if (p - t).abs() > 1e-12 {
                assert_eq!(m.classify(&row.x, t), u8::from(p >= t));
            }
        }
    }

    #[test]
    fn rescaling_hours_keeps_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<LabeledVector> = random_data(&mut rng, 500)
            .into_iter()
            .map(|mut r| {
                let eta = 0.8 * r.x.get(12) - 2.0 + r.x.get(4);
                r.label = u8::from(rng.random_bool(sigmoid(eta)));
                r
            })
            .collect();
        let scaled: Vec<LabeledVector> = data
            .iter()
            .map(|r| {
                let mut r = *r;
                r.x.set(12, r.x.get(12) * 60.0);
                r
            })
            .collect();
        let (a, _) = fit(&data, &FitConfig::default()).unwrap();
        let (b, _) = fit(&scaled, &FitConfig::default()).unwrap();
        for (r, s) in data.iter().zip(&scaled) {
            let (pa, pb) = (a.predict_proba(&r.x), b.predict_proba(&s.x));
            if (pa - 0.5).abs() > 1e-9 && (pb - 0.5).abs() > 1e-9 {
                assert_eq!(a.classify(&r.x, 0.5), b.classify(&s.x, 0.5));
            }
        }
    }

    proptest! {
        #[test]
        fn probabilities_are_complementary(b0 in -40.0f64..40.0, b in prop::collection::vec(-3.0f64..3.0, 16), xs in prop::collection::vec(0.0f64..4.0, 16)) {
            let mut arr = [0.0; 16];
            arr.copy_from_slice(&b);
            let m = ChoiceModel::with_coefficients(b0, arr);
            let mut x = [0.0; 16];
            x.copy_from_slice(&xs);
            let x = FeatureVector::new(x);
            let p = m.predict_proba(&x);
            prop_assert!(p > 0.0 && p < 1.0);
            let [p0, p1] = m.predict_label_probs(&x);
            prop_assert_eq!(p0 + p1, 1.0);
        }
    }
}
