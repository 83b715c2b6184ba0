//! Closed-form synthetic ensembles with known alignment behaviour.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    derive_seed, gaussian_matrix, haar_frame, ols_loglog, pairwise_sum, seeded_rng, sym_eig,
    FitResult, SymMatrix,
};
use crate::scalar::Real;
use crate::spectral::{commutativity_error, correlation_matrix, mean_offdiag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikedSpec {
    pub dim: usize,
    pub spikes: usize,
    pub sigma2: f64,
    pub bulk: f64,
    pub seed: u64,
}

/// `Q diag(σ² × M, bulk × (D−M)) Qᵀ` for a Haar `Q`.
pub fn spiked_covariance<T: Real>(spec: &SpikedSpec) -> Result<SymMatrix<T>> {
    if spec.spikes == 0 || spec.spikes > spec.dim {
        return Err(Error::InvalidSpikes(format!("M = {} with D = {}", spec.spikes, spec.dim)));
    }
    let f: DMatrix<T> = haar_frame(spec.dim, spec.spikes, spec.seed)?;
    let (s, b) = (T::lit(spec.sigma2), T::lit(spec.bulk));
    let mut c = &f * f.transpose() * (s - b);
    for i in 0..spec.dim {
        c[(i, i)] += b;
    }
    SymMatrix::symmetrize(c)
}

/// `E|R_ij|` of independent spiked draws, one per trial.
pub fn spiked_mean_offdiag(spec: &SpikedSpec, trials: usize) -> Result<Vec<f64>> {
    (0..trials)
        .map(|t| {
            let s = SpikedSpec { seed: derive_seed(spec.seed, &[t as u64]), ..*spec };
            let c = spiked_covariance::<f64>(&s)?;
            mean_offdiag(&correlation_matrix(&c)?.r)
        })
        .collect()
}

/// Normalized commutator of independent spiked pairs, one value per pair.
pub fn spiked_commutator_errors(dim: usize, spikes: usize, pairs: usize, seed: u64) -> Result<Vec<f64>> {
    (0..pairs)
        .map(|t| {
            let spec = |k: u64| SpikedSpec {
                dim,
                spikes,
                sigma2: 1.0,
                bulk: 0.0,
                seed: derive_seed(seed, &[t as u64, k]),
            };
            let a = spiked_covariance::<f64>(&spec(0))?;
            let b = spiked_covariance::<f64>(&spec(1))?;
            commutativity_error(&a, &b)
        })
        .collect()
}

/// Random symmetric PSD matrix `GGᵀ/n` with a wide spectrum.
pub fn random_psd<T: Real>(dim: usize, seed: u64) -> Result<SymMatrix<T>> {
    let g = gaussian_matrix::<T>(dim, dim, &mut seeded_rng(seed));
    SymMatrix::symmetrize(&g * g.transpose() / T::count(dim))
}

#[derive(Clone, Debug)]
pub struct RsmResult<T: Real> {
    pub c: SymMatrix<T>,
    /// Eigenvalues of `H`, descending.
    pub h_diag: DVector<T>,
    /// `C` projected on the eigenvectors of `H`.
    pub c_diag: DVector<T>,
    /// `None` when `H` has a single distinct eigenvalue.
    pub fit: Option<FitResult<T>>,
}

/// Noise `ε = H δw` from isotropic shifts `δw ~ N(0, σ²I)`.
pub fn random_shifts_model<T: Real>(
    h: &SymMatrix<T>,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<RsmResult<T>> {
    if trials < 2 {
        return Err(Error::InsufficientData(format!("{trials} trials")));
    }
    let d = h.dim();
    const CHUNK: usize = 1000;
    let chunks: Vec<usize> = (0..trials.div_ceil(CHUNK)).collect();
    let parts: Vec<DMatrix<T>> = chunks
        .par_iter()
        .map(|&k| {
            let n = CHUNK.min(trials - k * CHUNK);
            let shifts = gaussian_matrix::<T>(d, n, &mut seeded_rng(derive_seed(seed, &[k as u64])))
                * T::lit(sigma);
            let eps = h.as_dense() * shifts;
            &eps * eps.transpose()
        })
        .collect();
    let mut acc = DMatrix::zeros(d, d);
    for p in parts {
        acc += p;
    }
    let c = SymMatrix::symmetrize(acc / T::count(trials))?;
    let eig = sym_eig(h)?;
    let c_diag = crate::spectral::project_diag(&c, &eig.vectors, d)?;
    let fit = ols_loglog(eig.values.as_slice(), c_diag.as_slice()).ok();
    Ok(RsmResult { c, h_diag: eig.values, c_diag, fit })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// `u_m = v_m`, curvature with constant coefficient of variation per mode.
    PerfectAlignment,
    /// i.i.d. curvature, frames jittered away from the reference basis.
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub mode: EnsembleMode,
    /// Ambient dimension (number of reference directions `v_i`).
    pub dim: usize,
    /// Modes per sample.
    pub modes: usize,
    pub samples: usize,
    /// Perfect alignment: smallest and largest mode mean. Degenerate: `mean_hi` is ignored.
    pub mean_lo: f64,
    pub mean_hi: f64,
    /// Coefficient of variation of the curvature law.
    pub spread: f64,
    /// Largest rotation angle, in radians.
    pub jitter_max: f64,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn perfect_alignment(seed: u64) -> Self {
        Self {
            mode: EnsembleMode::PerfectAlignment,
            dim: 40,
            modes: 40,
            samples: 4000,
            mean_lo: 1e-2,
            mean_hi: 1.0,
            spread: 0.5,
            jitter_max: 0.0,
            seed,
        }
    }

    pub fn degenerate(seed: u64) -> Self {
        Self {
            mode: EnsembleMode::Degenerate,
            dim: 60,
            modes: 10,
            samples: 2000,
            mean_lo: 1.0,
            mean_hi: 1.0,
            spread: 0.5,
            jitter_max: 0.1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.samples >= 2
            && self.modes >= 1
            && self.modes <= self.dim
            && self.spread >= 0.0
            && self.jitter_max >= 0.0
            && self.mean_lo > 0.0
            && self.mean_hi >= self.mean_lo;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDimension(format!("invalid ensemble spec {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleResult<T: Real> {
    pub h_diag: DVector<T>,
    /// `E_p Σ_m κ_m² (u_m·v_i)²`, i.e. `C_ii · 2B/σ_w²`.
    pub c_diag: DVector<T>,
    pub fit: FitResult<T>,
    /// Sample `E[κ²]/E[κ]` over every drawn curvature.
    pub moment_ratio: T,
}

/// Log-normal with the given mean and coefficient of variation.
fn lognormal(mean: f64, cv: f64) -> Result<LogNormal<f64>> {
    let s2 = (1.0 + cv * cv).ln();
    LogNormal::new(mean.ln() - s2 / 2.0, s2.sqrt())
        .map_err(|e| Error::InvalidDistribution(e.to_string()))
}

/// Orthonormal `dim × k` frame within angle `theta` of the first `k` axes.
fn jittered_frame<T: Real>(dim: usize, k: usize, theta: f64, rng: &mut impl Rng) -> DMatrix<T> {
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let skew = &g - g.transpose();
    let norm = skew.norm() / std::f64::consts::SQRT_2;
    let step = if norm > 0.0 { skew * (theta / norm) } else { skew };
    let mut m = DMatrix::<f64>::identity(dim, dim) + step;
    m = m.columns(0, k).into_owned();
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.map(T::lit)
}

/// Mode-resolved first and second moments along the reference axes.
pub fn ensemble_covariance<T: Real>(spec: &EnsembleSpec) -> Result<EnsembleResult<T>> {
    spec.validate()?;
    let (d, n) = (spec.dim, spec.modes);
    let means: Vec<f64> = match spec.mode {
        EnsembleMode::PerfectAlignment => (0..n)
            .map(|i| {
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                spec.mean_hi * (spec.mean_lo / spec.mean_hi).powf(t)
            })
            .collect(),
        EnsembleMode::Degenerate => vec![spec.mean_lo; n],
    };
    let laws: Vec<LogNormal<f64>> = means.iter().map(|&m| lognormal(m, spec.spread)).collect::<Result<_>>()?;
    let per: Vec<(DVector<T>, DVector<T>, Vec<f64>)> = (0..spec.samples)
        .into_par_iter()
        .map(|p| {
            let mut rng = seeded_rng(derive_seed(spec.seed, &[p as u64]));
            let kappa: Vec<f64> = laws.iter().map(|l| l.sample(&mut rng)).collect();
            let mut h = DVector::zeros(d);
            let mut c = DVector::zeros(d);
            match spec.mode {
                EnsembleMode::PerfectAlignment => {
                    for m in 0..n {
                        h[m] = T::lit(kappa[m]);
                        c[m] = T::lit(kappa[m] * kappa[m]);
                    }
                }
                EnsembleMode::Degenerate => {
                    let theta = rng.random_range(0.0..=spec.jitter_max);
                    let u: DMatrix<T> = jittered_frame(d, n, theta, &mut rng);
                    for i in 0..d {
                        for m in 0..n {
                            let w = u[(i, m)] * u[(i, m)];
                            h[i] += T::lit(kappa[m]) * w;
                            c[i] += T::lit(kappa[m] * kappa[m]) * w;
                        }
                    }
                }
            }
            (h, c, kappa)
        })
        .collect();
    let mean = |f: &dyn Fn(usize) -> T| -> T {
        let v: Vec<T> = (0..per.len()).map(f).collect();
        pairwise_sum(&v) / T::count(v.len())
    };
    let h_diag = DVector::from_fn(d, |i, _| mean(&|p| per[p].0[i]));
    let c_diag = DVector::from_fn(d, |i, _| mean(&|p| per[p].1[i]));
    let all: Vec<f64> = per.iter().flat_map(|x| x.2.iter().copied()).collect();
    let sq: Vec<f64> = all.iter().map(|k| k * k).collect();
    let moment_ratio = T::lit(pairwise_sum(&sq) / pairwise_sum(&all));
    let fit = ols_loglog(h_diag.as_slice(), c_diag.as_slice())?;
    Ok(EnsembleResult { h_diag, c_diag, fit, moment_ratio })
}

/// Mean `|C_ij|` over mean `C_ii` for the mode-resolved covariance of random
/// Kronecker-structured per-sample eigenbases.
///
/// Each sample has a Haar `d_out × d_out` basis `Û`, a random unit activity
/// direction `â` and log-normal curvatures; modes are `û_m ⊗ â`.
pub fn random_projection_offdiag(
    d_out: usize,
    d_in: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let dim = d_out * d_in;
    let law = lognormal(1.0, 0.5)?;
    let parts: Vec<DMatrix<f64>> = (0..samples)
        .collect::<Vec<_>>()
        .par_chunks(16)
        .map(|chunk| {
            let mut acc = DMatrix::<f64>::zeros(dim, dim);
            for &p in chunk {
                let s = derive_seed(seed, &[p as u64]);
                let u: DMatrix<f64> = haar_frame(d_out, d_out, derive_seed(s, &[0]))?;
                let a: DMatrix<f64> = haar_frame(d_in, 1, derive_seed(s, &[1]))?;
                let mut rng = seeded_rng(derive_seed(s, &[2]));
                let mut modes = DMatrix::<f64>::zeros(dim, d_out);
                for m in 0..d_out {
                    let k = law.sample(&mut rng);
                    let col = u.column(m).kronecker(&a.column(0)) * k;
                    modes.set_column(m, &col);
                }
                acc += &modes * modes.transpose();
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut c = DMatrix::<f64>::zeros(dim, dim);
    for p in parts {
        c += p;
    }
    let mut off = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            if i != j {
                off.push(c[(i, j)].abs());
            }
        }
    }
    let diag: Vec<f64> = (0..dim).map(|i| c[(i, i)]).collect();
    Ok((pairwise_sum(&off) / off.len() as f64) / (pairwise_sum(&diag) / dim as f64))
}
