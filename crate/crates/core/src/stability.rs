//! Monitoring index: temperature-scaled latent features, least-squares
//! alignment to (λ, V) coordinates, streaming evaluation and collapse-point
//! estimation.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmu::PhasorVector;
use crate::vae::VaeModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub phi: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig { phi: 0.05 }
    }
}

impl TemperatureConfig {
    pub fn new(phi: f64) -> Result<Self> {
        let t = TemperatureConfig { phi };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::Config(format!("temperature {} outside [0, 1]", self.phi)));
        }
        Ok(())
    }
}

/// `σ̂² = φ σ²` elementwise.
pub fn reduce_variance(var: &[f64], phi: f64) -> Vec<f64> {
    var.iter().map(|v| v * phi).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub z_hat: Vec<f64>,
    pub mu: Vec<f64>,
    pub var_reduced: Vec<f64>,
}

/// Sample ẑ ~ N(μ, φσ²) for a raw measurement vector.
pub fn extract_feature<R: Rng + ?Sized>(
    model: &VaeModel,
    x: &[f64],
    temp: &TemperatureConfig,
    rng: &mut R,
) -> Result<Feature> {
    temp.validate()?;
    let dist = model.encode_raw(x)?;
    let var_reduced = reduce_variance(&dist.var, temp.phi);
    let z_hat = dist
        .mu
        .iter()
        .zip(&var_reduced)
        .map(|(m, v)| {
            if *v == 0.0 {
                *m
            } else {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            }
        })
        .collect();
    Ok(Feature {
        z_hat,
        mu: dist.mu,
        var_reduced,
    })
}

/// Linear map from latent features to (λ, V): `[λ̂, v̂] = βᵀ ẑ (+ c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    /// One row per latent feature, columns (λ, V).
    pub beta: Vec<[f64; 2]>,
    /// Constant term, present only when fitted with an intercept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<[f64; 2]>,
}

impl AlignmentMap {
    pub fn identity() -> Self {
        AlignmentMap {
            beta: vec![[1.0, 0.0], [0.0, 1.0]],
            intercept: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .beta
            .iter()
            .flatten()
            .chain(self.intercept.iter().flatten())
            .all(|v| v.is_finite());
        if !finite || self.beta.is_empty() {
            return Err(Error::Config("alignment coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// Least-squares solution of `Z β ≈ C` by Householder QR. Returns β
/// (cols(Z) × cols(C)).
pub fn least_squares(z: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = z.shape();
    if c.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: c.nrows(),
        });
    }
    if n < p.max(2) {
        return Err(Error::EmptyRequest(format!(
            "need at least {} rows to fit, got {n}",
            p.max(2)
        )));
    }
    if z.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("alignment data contains non-finite values".into()));
    }
    let mut r = z.clone();
    let mut qtc = c.clone();
    for j in 0..p {
        let norm = r.view((j, j), (n - j, 1)).norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(j, j)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..n).map(|i| r[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let reflect = |m: &mut DMatrix<f64>, from_col: usize| {
            for col in from_col..m.ncols() {
                let dot: f64 = v.iter().enumerate().map(|(k, vk)| vk * m[(j + k, col)]).sum();
                let f = 2.0 * dot / vnorm2;
                for (k, vk) in v.iter().enumerate() {
                    m[(j + k, col)] -= f * vk;
                }
            }
        };
        reflect(&mut r, j);
        reflect(&mut qtc, 0);
    }
    let diag_max = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if diag_max == 0.0 || (0..p).any(|j| r[(j, j)].abs() <= 1e-10 * diag_max) {
        return Err(Error::RankDeficient);
    }
    let k = c.ncols();
    let mut beta = DMatrix::zeros(p, k);
    for col in 0..k {
        for j in (0..p).rev() {
            let mut s = qtc[(j, col)];
            for l in (j + 1)..p {
                s -= r[(j, l)] * beta[(l, col)];
            }
            beta[(j, col)] = s / r[(j, j)];
        }
    }
    Ok(beta)
}

/// Fit β over stacked feature rows `z` and reference rows `(λ, V)`.
pub fn fit_alignment(z: &[Vec<f64>], c: &[[f64; 2]], intercept: bool) -> Result<AlignmentMap> {
    if z.len() != c.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: c.len(),
        });
    }
    let d = z
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyRequest("no feature rows to fit".into()))?;
    if let Some(bad) = z.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let p = d + usize::from(intercept);
    let zm = DMatrix::from_fn(z.len(), p, |i, j| if j < d { z[i][j] } else { 1.0 });
    let cm = DMatrix::from_fn(c.len(), 2, |i, j| c[i][j]);
    let beta = least_squares(&zm, &cm)?;
    Ok(AlignmentMap {
        beta: (0..d).map(|i| [beta[(i, 0)], beta[(i, 1)]]).collect(),
        intercept: intercept.then(|| [beta[(d, 0)], beta[(d, 1)]]),
    })
}

/// `(λ̂, v̂)` for one feature vector.
pub fn align(map: &AlignmentMap, z_hat: &[f64]) -> Result<(f64, f64)> {
    if z_hat.len() != map.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: map.beta.len(),
            got: z_hat.len(),
        });
    }
    let [mut l, mut v] = map.intercept.unwrap_or([0.0, 0.0]);
    for (z, b) in z_hat.iter().zip(&map.beta) {
        l += z * b[0];
        v += z * b[1];
    }
    Ok((l, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub t: usize,
    pub z: Vec<f64>,
    pub lambda_hat: f64,
    pub v_hat: f64,
}

/// Random stream for tick `t`: depends only on the seed and the tick, so
/// each tick is evaluated independently of the others.
pub fn tick_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// One record per input vector; ticks are numbered from `t_start`. Errors
/// are reported per tick and do not stop the stream.
pub fn monitor_stream(
    model: &VaeModel,
    map: &AlignmentMap,
    temp: &TemperatureConfig,
    stream: &[PhasorVector],
    t_start: usize,
    seed: u64,
) -> Vec<Result<MonitorRecord>> {
    stream
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let t = t_start + k;
            let f = extract_feature(model, x, temp, &mut tick_rng(seed, t))?;
            let (lambda_hat, v_hat) = align(map, &f.z_hat)?;
            Ok(MonitorRecord {
                t,
                z: f.z_hat,
                lambda_hat,
                v_hat,
            })
        })
        .collect()
}

/// CSV with header `t, z1, z2, lambda_hat, v_hat`.
pub fn write_monitor_csv<W: Write>(records: &[MonitorRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = records.first().map_or(2, |r| r.z.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|k| format!("z{k}")));
    header.extend(["lambda_hat".to_string(), "v_hat".to_string()]);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.z.iter().map(f64::to_string));
        row.push(r.lambda_hat.to_string());
        row.push(r.v_hat.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcpEstimate {
    pub lambda_pre: f64,
    pub nose_sample_index: usize,
    pub aligned_curve: Vec<(f64, f64)>,
}

/// The nose of an aligned series: the first sample with the largest λ̂.
pub fn estimate_vcp(series: &[(f64, f64)]) -> Result<VcpEstimate> {
    if series.is_empty() {
        return Err(Error::EmptyRequest("aligned series is empty".into()));
    }
    let mut best = 0;
    for (i, p) in series.iter().enumerate() {
        if p.0 > series[best].0 {
            best = i;
        }
    }
    if best + 1 == series.len() {
        return Err(Error::InsufficientExcursion);
    }
    Ok(VcpEstimate {
        lambda_pre: series[best].0,
        nose_sample_index: best,
        aligned_curve: series.to_vec(),
    })
}

/// Mean absolute percentage error of predicted against actual margins.
pub fn mape(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::EmptyRequest("no experiments to score".into()));
    }
    if let Some(a) = actual.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::ZeroReference(*a));
    }
    let s: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).abs() / a)
        .sum();
    Ok(s / actual.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_reduction_arithmetic() {
        let r = reduce_variance(&[0.04, 0.01], 0.05);
        assert!((r[0] - 0.002).abs() < 1e-18 && (r[1] - 0.0005).abs() < 1e-18);
        assert_eq!(reduce_variance(&[0.04, 0.01], 0.0), vec![0.0, 0.0]);
        assert_eq!(reduce_variance(&[0.04, 0.01], 1.0), vec![0.04, 0.01]);
        assert!(TemperatureConfig::new(1.5).is_err());
    }

    #[test]
    fn identity_and_zero_maps() {
        assert_eq!(align(&AlignmentMap::identity(), &[0.3, -0.2]).unwrap(), (0.3, -0.2));
        let zero = AlignmentMap {
            beta: vec![[0.0; 2]; 2],
            intercept: None,
        };
        assert_eq!(align(&zero, &[0.3, -0.2]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn fit_on_itself_is_identity() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]];
        let c: Vec<[f64; 2]> = z.iter().map(|r| [r[0], r[1]]).collect();
        let m = fit_alignment(&z, &c, false).unwrap();
        for (i, row) in m.beta.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn collinear_features_are_rank_deficient() {
        let z = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let c = vec![[1.0, 0.0]; 3];
        assert!(matches!(fit_alignment(&z, &c, false), Err(Error::RankDeficient)));
    }

    #[test]
    fn vcp_reads_the_first_maximum() {
        let est = estimate_vcp(&[(0.0, 1.0), (1.0, 0.9), (0.8, 0.7)]).unwrap();
        assert_eq!((est.lambda_pre, est.nose_sample_index), (1.0, 1));
        let tie = estimate_vcp(&[(0.0, 1.0), (1.0, 0.9), (1.0, 0.8), (0.5, 0.7)]).unwrap();
        assert_eq!(tie.nose_sample_index, 1);
        assert!(matches!(
            estimate_vcp(&[(0.0, 1.0), (0.5, 0.9), (0.9, 0.8)]),
            Err(Error::InsufficientExcursion)
        ));
    }

    #[test]
    fn mape_arithmetic() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mape(&[1.1, 0.9], &[1.0, 1.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(mape(&[1.0], &[0.0]), Err(Error::ZeroReference(_))));
        assert!(matches!(mape(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }
}
