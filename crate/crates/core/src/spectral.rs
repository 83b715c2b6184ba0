//! Global Hessian, eigenbasis projections and alignment statistics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::awd::ModeProjections;
use crate::error::{Error, Result};
use crate::model::PerSampleHessian;
use crate::numerics::{
    derive_seed, haar_frame, kron_sum, ols_loglog, pairwise_sum, spearman, sym_eig,
    sym_eigenvalues, EigenDecomposition, FitResult, SymMatrix,
};
use crate::scalar::Real;

/// `H = E_p[h_p]` on the focal block with its eigendecomposition.
#[derive(Clone, Debug)]
pub struct GlobalHessian<T: Real> {
    pub h: SymMatrix<T>,
    pub eig: EigenDecomposition<T>,
    pub sample_count: usize,
    pub skipped: usize,
}

impl<T: Real> GlobalHessian<T> {
    pub fn diag_in_basis(&self, top_n: usize) -> DVector<T> {
        self.eig.values.rows(0, top_n.min(self.eig.values.len())).into_owned()
    }
}

/// Dense mean of `H_z ⊗ a aᵀ` over the retained samples.
pub fn assemble_hessian_matrix<T: Real>(
    hessians: &[PerSampleHessian<T>],
    skipped: usize,
) -> Result<SymMatrix<T>> {
    let Some(first) = hessians.first() else {
        log::warn!("no usable samples ({skipped} degenerate)");
        return Err(Error::EmptyHessian);
    };
    let (k, d_in) = (first.d_out(), first.d_in());
    let acts = DMatrix::from_fn(hessians.len(), d_in, |q, c| hessians[q].a[c]);
    let inv = T::one() / T::count(hessians.len());
    kron_sum(k, &acts, |q, r, s| hessians[q].hz.get(r, s) * inv)
}

pub fn assemble_global_hessian<T: Real>(
    hessians: &[PerSampleHessian<T>],
    skipped: usize,
) -> Result<GlobalHessian<T>> {
    let h = assemble_hessian_matrix(hessians, skipped)?;
    let eig = sym_eig(&h)?;
    Ok(GlobalHessian { h, eig, sample_count: hessians.len(), skipped })
}

/// `Vᵀ C V` restricted to the first `top_n` columns of `V`.
pub fn project<T: Real>(c: &SymMatrix<T>, v: &DMatrix<T>, top_n: usize) -> Result<SymMatrix<T>> {
    if v.nrows() != c.dim() || top_n > v.ncols() {
        return Err(Error::ShapeError(format!(
            "C is {0}x{0}, V is {1}x{2}, top_n = {3}",
            c.dim(),
            v.nrows(),
            v.ncols(),
            top_n
        )));
    }
    let vt = v.columns(0, top_n);
    let cv = c.as_dense() * vt;
    SymMatrix::symmetrize(vt.tr_mul(&cv))
}

/// Only the diagonal `v_iᵀ C v_i` of the projection.
pub fn project_diag<T: Real>(c: &SymMatrix<T>, v: &DMatrix<T>, top_n: usize) -> Result<DVector<T>> {
    if v.nrows() != c.dim() || top_n > v.ncols() {
        return Err(Error::ShapeError(format!(
            "C is {0}x{0}, V is {1}x{2}, top_n = {3}",
            c.dim(),
            v.nrows(),
            v.ncols(),
            top_n
        )));
    }
    let vt = v.columns(0, top_n);
    let cv = c.as_dense() * vt;
    Ok(DVector::from_fn(top_n, |i, _| vt.column(i).dot(&cv.column(i))))
}

/// `R_ij = C_ij / √|C_ii C_jj|` over directions with nonzero diagonal.
#[derive(Clone, Debug)]
pub struct Correlation<T: Real> {
    pub r: DMatrix<T>,
    /// Original indices of the rows of `r`.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Off-diagonal entries with `|R_ij| > 1`.
    pub exceeding_one: usize,
}

pub fn correlation_matrix<T: Real>(cp: &SymMatrix<T>) -> Result<Correlation<T>> {
    let n = cp.dim();
    let (kept, dropped): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| cp.get(i, i) != T::zero());
    if kept.is_empty() {
        return Err(Error::DegenerateCovariance("every diagonal entry is zero".into()));
    }
    let k = kept.len();
    let mut r = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            T::one()
        } else {
            let (x, p, q) = (cp.get(kept[a], kept[b]), cp.get(kept[a], kept[a]), cp.get(kept[b], kept[b]));
            T::lit(normalized_ratio(x.as_f64(), p.as_f64().abs(), q.as_f64().abs()))
        }
    });
    // exact symmetry regardless of operation order
    for a in 0..k {
        for b in (a + 1)..k {
            r[(b, a)] = r[(a, b)];
        }
    }
    let exceeding_one = (0..k)
        .flat_map(|a| (0..k).map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && r[(a, b)].abs() > T::one())
        .count();
    Ok(Correlation { r, kept, dropped, exceeding_one })
}

/// `x / √(p q)` rounded from a double-double evaluation, so the result does not
/// depend on a common positive scale of the three inputs.
fn normalized_ratio(x: f64, p: f64, q: f64) -> f64 {
    let two_prod = |a: f64, b: f64| {
        let h = a * b;
        (h, a.mul_add(b, -h))
    };
    let fast_two_sum = |a: f64, b: f64| {
        let s = a + b;
        (s, b - (s - a))
    };
    let (ph, pl) = two_prod(p, q);
    let s = ph.sqrt();
    let (ss, se) = two_prod(s, s);
    let (sh, sl) = fast_two_sum(s, ((ph - ss) - se + pl) / (2.0 * s));
    let q1 = x / sh;
    let rem = (-q1).mul_add(sh, x) - q1 * sl;
    q1 + rem / sh
}

/// `E_{i≠j}|R_ij|`.
pub fn mean_offdiag<T: Real>(r: &DMatrix<T>) -> Result<T> {
    let n = r.nrows();
    if n < 2 || r.ncols() != n {
        return Err(Error::InvalidDimension(format!("need a square matrix of size ≥ 2, got {}x{}", n, r.ncols())));
    }
    let rows: Vec<T> = (0..n)
        .map(|i| {
            let v: Vec<T> = (0..n).filter(|&j| j != i).map(|j| r[(i, j)].abs()).collect();
            pairwise_sum(&v)
        })
        .collect();
    Ok(pairwise_sum(&rows) / T::count(n * (n - 1)))
}

/// Random-rotation baseline for a spectrum.
#[derive(Clone, Debug)]
pub struct RotationBaseline<T: Real> {
    /// Projected rotated covariance of the first trial.
    pub cp: SymMatrix<T>,
    pub r: DMatrix<T>,
    pub mu_trials: Vec<T>,
    pub mu_mean: T,
}

/// Rotates `diag(λ)` by Haar matrices and projects onto `top_n` fixed directions.
///
/// The projection of `QΛQᵀ` onto any fixed orthonormal frame is `FᵀΛF` with `F`
/// a Haar-distributed `D × top_n` frame, so only that frame is drawn.
pub fn rotation_baseline_from_spectrum<T: Real>(
    eigenvalues: &DVector<T>,
    top_n: usize,
    trials: usize,
    seed: u64,
) -> Result<RotationBaseline<T>> {
    if trials == 0 {
        return Err(Error::InvalidDimension("at least one trial is required".into()));
    }
    let d = eigenvalues.len();
    if top_n < 2 || top_n > d {
        return Err(Error::InvalidDimension(format!("top_n = {top_n} with dimension {d}")));
    }
    let out: Vec<(SymMatrix<T>, DMatrix<T>, T)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let f: DMatrix<T> = haar_frame(d, top_n, derive_seed(seed, &[t as u64]))?;
            let mut lf = f.clone();
            for (i, mut row) in lf.row_iter_mut().enumerate() {
                row *= eigenvalues[i];
            }
            let cp = SymMatrix::symmetrize(f.tr_mul(&lf))?;
            let r = correlation_matrix(&cp)?.r;
            let mu = mean_offdiag(&r)?;
            Ok((cp, r, mu))
        })
        .collect::<Result<_>>()?;
    let mu_trials: Vec<T> = out.iter().map(|o| o.2).collect();
    let mu_mean = pairwise_sum(&mu_trials) / T::count(trials);
    let (cp, r, _) = out.into_iter().next().expect("trials >= 1");
    Ok(RotationBaseline { cp, r, mu_trials, mu_mean })
}

pub fn random_rotation_baseline<T: Real>(
    c: &SymMatrix<T>,
    top_n: usize,
    trials: usize,
    seed: u64,
) -> Result<RotationBaseline<T>> {
    rotation_baseline_from_spectrum(&sym_eigenvalues(c)?, top_n, trials, seed)
}

/// `√(2/π)/√M`.
pub fn theoretical_baseline(m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidSpikes("M must be at least 1".into()));
    }
    Ok((2.0 / std::f64::consts::PI).sqrt() / (m as f64).sqrt())
}

/// Relative threshold for counting effective spikes.
pub const DEFAULT_SPIKE_THRESHOLD: f64 = 0.05;

/// Number of eigenvalues at or above `threshold · λ_max`.
pub fn estimate_effective_spikes<T: Real>(eigenvalues: &[T], threshold: f64) -> Result<usize> {
    let Some(&max) = eigenvalues.iter().max_by(|a, b| a.partial_cmp(b).expect("finite")) else {
        return Err(Error::InsufficientData("empty spectrum".into()));
    };
    let cut = max * T::lit(threshold);
    Ok(eigenvalues.iter().filter(|&&l| l >= cut).count())
}

/// How the null mean is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NullMean {
    /// `√(2/π)/√M`.
    Exact,
    /// `0.8/√M`, the rounded constant.
    #[default]
    Rounded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ZScore {
    pub mu_h0: f64,
    pub sigma_single: f64,
    pub se: f64,
    pub z: f64,
    pub p_one_sided: f64,
}

/// One-sided test of `μ_obs` against the random-alignment null.
pub fn z_score(mu_obs: f64, m: usize, dim: usize, null: NullMean) -> Result<ZScore> {
    if m == 0 {
        return Err(Error::InvalidSpikes("M must be at least 1".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidDimension(format!("dimension {dim} < 2")));
    }
    let mf = m as f64;
    let mu_h0 = match null {
        NullMean::Exact => theoretical_baseline(m)?,
        NullMean::Rounded => 0.8 / mf.sqrt(),
    };
    let sigma_single = ((1.0 / mf) * (1.0 - 2.0 / std::f64::consts::PI)).sqrt();
    let se = sigma_single / dim as f64;
    let z = (mu_obs - mu_h0) / se;
    let p_one_sided = Normal::standard().cdf(z);
    Ok(ZScore { mu_h0, sigma_single, se, z, p_one_sided })
}

/// `‖AB − BA‖_F / ‖AB‖_F`; independent random spiked pairs give `≈ √2`.
pub fn commutativity_error<T: Real>(a: &SymMatrix<T>, b: &SymMatrix<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeError(format!("{} vs {}", a.dim(), b.dim())));
    }
    let ab = a.as_dense() * b.as_dense();
    let norm = ab.norm();
    if norm == T::zero() {
        return Err(Error::DegenerateInput("AB = 0".into()));
    }
    let comm = &ab - ab.transpose();
    Ok(comm.norm() / norm)
}

/// Same metric with `B = diag(λ)` already diagonal.
pub fn commutativity_error_diag<T: Real>(cp: &SymMatrix<T>, lambda: &[T]) -> Result<T> {
    let n = cp.dim();
    if lambda.len() != n {
        return Err(Error::ShapeError(format!("{} eigenvalues for dimension {}", lambda.len(), n)));
    }
    let (mut comm, mut prod) = (Vec::with_capacity(n * n), Vec::with_capacity(n * n));
    for i in 0..n {
        for j in 0..n {
            let c2 = cp.get(i, j) * cp.get(i, j);
            let dl = lambda[j] - lambda[i];
            comm.push(c2 * dl * dl);
            prod.push(c2 * lambda[j] * lambda[j]);
        }
    }
    let prod = pairwise_sum(&prod);
    if prod == T::zero() {
        return Err(Error::DegenerateInput("AB = 0".into()));
    }
    Ok((pairwise_sum(&comm) / prod).sqrt())
}

/// `Σ|C_ii| / Σ|C_ij|`.
pub fn alignment_ratio<T: Real>(cp: &SymMatrix<T>) -> Result<T> {
    let m = cp.as_dense();
    let total = pairwise_sum(&m.iter().map(|x| x.abs()).collect::<Vec<_>>());
    if total == T::zero() {
        return Err(Error::DegenerateInput("zero matrix".into()));
    }
    let diag = pairwise_sum(&(0..cp.dim()).map(|i| m[(i, i)].abs()).collect::<Vec<_>>());
    Ok(diag / total)
}

/// Log-log fit of `C_ii` against `H_ii` on the leading `top_n` directions.
pub fn power_law<T: Real>(h_diag: &[T], c_diag: &[T], top_n: usize) -> Result<FitResult<T>> {
    if top_n > h_diag.len() || top_n > c_diag.len() {
        return Err(Error::InsufficientData(format!(
            "top_n = {top_n} but only {} / {} directions",
            h_diag.len(),
            c_diag.len()
        )));
    }
    ols_loglog(&h_diag[..top_n], &c_diag[..top_n])
}

/// `E_p Σ_m κ_m (u_m·v_i)²` per direction.
pub fn first_moment_diag<T: Real>(proj: &ModeProjections<T>) -> DVector<T> {
    proj.weighted_diag(|p, m| proj.kappa[p][m])
}

/// Largest relative gap between `H_ii` and its mode reconstruction.
pub fn first_moment_gap<T: Real>(h_diag: &[T], proj: &ModeProjections<T>) -> T {
    let rec = first_moment_diag(proj);
    let scale = h_diag.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if scale == T::zero() {
        return rec.amax();
    }
    h_diag
        .iter()
        .zip(rec.iter())
        .fold(T::zero(), |m, (h, r)| m.max((*h - *r).abs()))
        / scale
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundRecord {
    pub i: usize,
    pub h_ii: f64,
    pub c_ii: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundsAudit {
    pub records: Vec<BoundRecord>,
    pub kappa_max: f64,
    pub psd_fraction: f64,
    pub pass_rate: f64,
    /// True only when every per-sample Hessian is PSD.
    pub asserted: bool,
}

impl BoundsAudit {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.lower_ok && r.upper_ok)
    }
}

/// Relative slack on both bound inequalities.
pub const BOUND_SLACK: f64 = 1e-9;

/// `(σ_w²/2B)H_ii² ≤ C_ii ≤ (σ_w² κ_max/2B)H_ii` per direction.
pub fn bounds_audit<T: Real>(
    hessians: &[PerSampleHessian<T>],
    c_diag: &[T],
    h_diag: &[T],
    sigma_w2: T,
    batch: usize,
    top_n: usize,
) -> Result<BoundsAudit> {
    let n = top_n.min(c_diag.len()).min(h_diag.len());
    let kappa_max = hessians
        .iter()
        .fold(0.0f64, |m, h| m.max(h.kappa.max().as_f64()));
    let psd = hessians.iter().filter(|h| h.is_psd()).count();
    let psd_fraction = if hessians.is_empty() { 0.0 } else { psd as f64 / hessians.len() as f64 };
    let c = sigma_w2.as_f64() / (2.0 * batch as f64);
    let records: Vec<BoundRecord> = (0..n)
        .map(|i| {
            let (h, ci) = (h_diag[i].as_f64(), c_diag[i].as_f64());
            let lower = c * h * h;
            let upper = c * kappa_max * h;
            BoundRecord {
                i,
                h_ii: h,
                c_ii: ci,
                lower,
                upper,
                lower_ok: lower <= ci + BOUND_SLACK * ci.abs().max(lower.abs()),
                upper_ok: ci <= upper + BOUND_SLACK * ci.abs().max(upper.abs()),
            }
        })
        .collect();
    let pass = records.iter().filter(|r| r.lower_ok && r.upper_ok).count();
    Ok(BoundsAudit {
        pass_rate: if n == 0 { 0.0 } else { pass as f64 / n as f64 },
        records,
        kappa_max,
        psd_fraction,
        asserted: psd == hessians.len() && !hessians.is_empty(),
    })
}

/// Alignment statistics of a covariance against the Hessian eigenbasis.
#[derive(Clone, Debug)]
pub struct AlignmentReport<T: Real> {
    pub r_real: DMatrix<T>,
    pub r_rand: DMatrix<T>,
    pub dropped: Vec<usize>,
    pub mu_real: T,
    pub mu_rand_empirical: T,
    pub mu_rand_theoretical: f64,
    pub m_effective: usize,
    pub z: ZScore,
    pub commutativity_real: T,
    pub commutativity_rand: T,
    pub alignment_ratio: T,
    pub alignment_ratio_rand: T,
    pub spearman_diag: Option<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignmentOptions {
    pub top_n: usize,
    pub trials: usize,
    pub seed: u64,
    pub spike_threshold: f64,
    pub null: NullMean,
}

/// Compares `C` with `H` inside the leading `top_n` eigen-directions of `H`.
pub fn alignment_report<T: Real>(
    c: &SymMatrix<T>,
    h: &GlobalHessian<T>,
    opts: &AlignmentOptions,
) -> Result<AlignmentReport<T>> {
    let top_n = opts.top_n;
    let cp = project(c, &h.eig.vectors, top_n)?;
    let lambda: Vec<T> = h.eig.values.iter().take(top_n).copied().collect();
    let corr = correlation_matrix(&cp)?;
    let mu_real = mean_offdiag(&corr.r)?;
    let c_spec = sym_eigenvalues(c)?;
    let m_effective =
        estimate_effective_spikes(c_spec.as_slice(), opts.spike_threshold)?;
    let rand = rotation_baseline_from_spectrum(&c_spec, top_n, opts.trials, opts.seed)?;
    let diag: Vec<T> = (0..top_n).map(|i| cp.get(i, i)).collect();
    Ok(AlignmentReport {
        z: z_score(mu_real.as_f64(), m_effective, corr.r.nrows(), opts.null)?,
        mu_rand_theoretical: theoretical_baseline(m_effective)?,
        commutativity_real: commutativity_error_diag(&cp, &lambda)?,
        commutativity_rand: commutativity_error_diag(&rand.cp, &lambda)?,
        alignment_ratio: alignment_ratio(&cp)?,
        alignment_ratio_rand: alignment_ratio(&rand.cp)?,
        spearman_diag: spearman(&lambda, &diag).ok(),
        r_real: corr.r,
        r_rand: rand.r,
        dropped: corr.dropped,
        mu_real,
        mu_rand_empirical: rand.mu_mean,
        m_effective,
    })
}
