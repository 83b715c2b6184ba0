//! Per-sample spectrum filtering and stiff-sample homogenization.
//!
//! Each retained sample keeps its eigenvectors; only the eigenvalues are
//! edited, and the global first and second moments are rebuilt from the
//! precomputed mode projections `u_m^{(p)}·v_i`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::awd::ModeProjections;
use crate::data::{balanced_counts, draw_batch, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{ols_loglog, pairwise_sum, seeded_rng, FitResult};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionConfig {
    pub theta: f64,
    pub eps_tail: f64,
    pub eps_bg: f64,
    pub homogenize: bool,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        Self { theta: 0.05, eps_tail: 1e-5, eps_bg: 1e-3, homogenize: true }
    }
}

impl SuppressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidDimension(format!("theta = {} outside [0, 1]", self.theta)));
        }
        if !(self.eps_tail > 0.0 && self.eps_bg > 0.0) {
            return Err(Error::InvalidDimension("suppression scales must be positive".into()));
        }
        Ok(())
    }

    /// No-op edit.
    pub fn identity() -> Self {
        Self { theta: 0.0, eps_tail: 1.0, eps_bg: 1.0, homogenize: false }
    }

    /// Keep only the leading mode of every sample.
    pub fn rank_one(eps_tail: f64) -> Self {
        Self { theta: 0.0, eps_tail, eps_bg: 1.0, homogenize: false }
    }
}

/// Indices (into `kappa`) with `κ₁ > θ · max κ₁`.
pub fn identify_stiff<T: Real>(kappa: &[DVector<T>], theta: f64) -> Vec<usize> {
    let lead: Vec<T> = kappa.iter().map(|k| k[0]).collect();
    let Some(max) = lead.iter().copied().reduce(|a, b| a.max(b)) else {
        return Vec::new();
    };
    let tau = T::lit(theta) * max;
    (0..lead.len()).filter(|&p| lead[p] > tau).collect()
}

#[derive(Clone, Debug)]
pub struct ModifiedSpectrum<T: Real> {
    pub stiff: Vec<usize>,
    pub kappa_bar: Option<T>,
    pub kappa: Vec<DVector<T>>,
}

/// Applies the case table to descending per-sample eigenvalues.
pub fn suppress<T: Real>(kappa: &[DVector<T>], cfg: &SuppressionConfig) -> Result<ModifiedSpectrum<T>> {
    cfg.validate()?;
    let stiff = identify_stiff(kappa, cfg.theta);
    let kappa_bar = if stiff.is_empty() {
        None
    } else {
        let lead: Vec<T> = stiff.iter().map(|&p| kappa[p][0]).collect();
        Some(pairwise_sum(&lead) / T::count(lead.len()))
    };
    if cfg.homogenize && kappa_bar.is_none() {
        return Err(Error::EmptyStiffSet);
    }
    let mut is_stiff = vec![false; kappa.len()];
    for &p in &stiff {
        is_stiff[p] = true;
    }
    let (tail, bg) = (T::lit(cfg.eps_tail), T::lit(cfg.eps_bg));
    let out = kappa
        .iter()
        .enumerate()
        .map(|(p, k)| {
            let mut k = k * tail;
            k[0] = match (is_stiff[p], cfg.homogenize) {
                (true, true) => kappa_bar.expect("checked above"),
                (true, false) => kappa[p][0],
                (false, _) => bg * kappa[p][0],
            };
            k
        })
        .collect();
    Ok(ModifiedSpectrum { stiff, kappa_bar, kappa: out })
}

/// Rebuilt per-direction moments.
#[derive(Clone, Debug)]
pub struct Reconstruction<T: Real> {
    /// `H̃_ii = E_p Σ_m κ̃_m (u_m·v_i)²`.
    pub h: DVector<T>,
    /// `E_p Σ_m κ̃_m² (u_m·v_i)²`, i.e. `C̃_ii · 2B/σ_w²`.
    pub c: DVector<T>,
    /// Mean over directions of the fraction of `c` carried by modes `1..=m`.
    pub cumulative: Vec<T>,
    pub first_mode_fraction: T,
}

pub fn reconstruct<T: Real>(proj: &ModeProjections<T>, kappa: &[DVector<T>]) -> Result<Reconstruction<T>> {
    if kappa.len() != proj.len() {
        return Err(Error::ShapeError(format!(
            "{} spectra for {} projected samples",
            kappa.len(),
            proj.len()
        )));
    }
    let h = proj.weighted_diag(|p, m| kappa[p][m]);
    let c = proj.weighted_diag(|p, m| kappa[p][m] * kappa[p][m]);
    let modes = kappa.iter().map(|k| k.len()).max().unwrap_or(0);
    let per_mode: Vec<DVector<T>> = (0..modes)
        .map(|j| {
            proj.weighted_diag(|p, m| if m == j { kappa[p][m] * kappa[p][m] } else { T::zero() })
        })
        .collect();
    let n = c.len();
    let live: Vec<usize> = (0..n).filter(|&i| c[i] > T::zero()).collect();
    let mut running = vec![T::zero(); n];
    let mut cumulative = Vec::with_capacity(modes);
    for pm in &per_mode {
        let mut fr = Vec::with_capacity(live.len());
        for &i in &live {
            running[i] += pm[i];
            fr.push(running[i] / c[i]);
        }
        cumulative.push(if fr.is_empty() { T::zero() } else { pairwise_sum(&fr) / T::count(fr.len()) });
    }
    let first_mode_fraction = cumulative.first().copied().unwrap_or(T::zero());
    Ok(Reconstruction { h, c, cumulative, first_mode_fraction })
}

#[derive(Clone, Debug)]
pub struct RungResult<T: Real> {
    pub name: &'static str,
    pub config: SuppressionConfig,
    pub stiff_count: usize,
    pub kappa_bar: Option<T>,
    pub fit: FitResult<T>,
    pub delta_gamma: T,
    pub reconstruction: Reconstruction<T>,
}

/// Raw, rank-one, background-suppressed and homogenized rungs.
pub fn suppression_experiment<T: Real>(
    proj: &ModeProjections<T>,
    cfg: &SuppressionConfig,
) -> Result<Vec<RungResult<T>>> {
    let rungs = [
        ("raw", SuppressionConfig::identity()),
        ("rank1", SuppressionConfig::rank_one(cfg.eps_tail)),
        ("background", SuppressionConfig { homogenize: false, ..*cfg }),
        ("homogenized", SuppressionConfig { homogenize: true, ..*cfg }),
    ];
    let mut out: Vec<RungResult<T>> = Vec::with_capacity(rungs.len());
    for (name, rc) in rungs {
        let spec = suppress(&proj.kappa, &rc)?;
        let rec = reconstruct(proj, &spec.kappa)?;
        let fit = ols_loglog(rec.h.as_slice(), rec.c.as_slice())?;
        let base = out.first().map_or(fit.slope, |r| r.fit.slope);
        out.push(RungResult {
            name,
            config: rc,
            stiff_count: spec.stiff.len(),
            kappa_bar: spec.kappa_bar,
            delta_gamma: fit.slope - base,
            fit,
            reconstruction: rec,
        });
    }
    Ok(out)
}

/// Seeded class-balanced evaluation batch.
pub fn experiment_batch<T: Real>(data: &Dataset<T>, size: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seeded_rng(seed);
    let counts = balanced_counts(size, data.class_count(), &mut rng);
    let mut idx = draw_batch(&data.class_indices(), &counts, &mut rng)?.indices;
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PerSampleHessian;
    use crate::numerics::{gaussian_matrix, seeded_rng, sym_eig, SymMatrix};
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn stiff_set_edges() {
        let k = vec![dv(&[3.0, 1.0]), dv(&[2.0, 0.5]), dv(&[1e-3, 0.0])];
        assert_eq!(identify_stiff(&k, 0.0), vec![0, 1, 2]);
        assert!(identify_stiff(&k, 1.0).is_empty());
        assert_eq!(identify_stiff(&k, 0.5), vec![0, 1]);
    }

    #[test]
    fn case_table() {
        let k = vec![dv(&[3.0, 1.0]), dv(&[2.0, 0.5]), dv(&[0.1, 0.2])];
        let id = suppress(&k, &SuppressionConfig::identity()).unwrap();
        assert_eq!(id.kappa, k);

        let cfg = SuppressionConfig { theta: 0.5, eps_tail: 1e-2, eps_bg: 1e-1, homogenize: true };
        let s = suppress(&k, &cfg).unwrap();
        assert_eq!(s.stiff, vec![0, 1]);
        assert_eq!(s.kappa_bar, Some(2.5));
        assert_eq!(s.kappa[0], dv(&[2.5, 1.0 * 1e-2]));
        assert_eq!(s.kappa[1], dv(&[2.5, 0.5 * 1e-2]));
        assert_eq!(s.kappa[2], dv(&[0.1 * 1e-1, 0.2 * 1e-2]));

        let single = SuppressionConfig { theta: 0.9, ..cfg };
        let s = suppress(&k, &single).unwrap();
        assert_eq!(s.stiff, vec![0]);
        assert_eq!(s.kappa[0][0], 3.0);

        let empty = SuppressionConfig { theta: 1.0, ..cfg };
        assert!(matches!(suppress(&k, &empty), Err(Error::EmptyStiffSet)));
        assert!(suppress(&k, &SuppressionConfig { homogenize: false, ..empty }).is_ok());
    }

    fn tiny_projections(seed: u64) -> (Vec<PerSampleHessian<f64>>, DMatrix<f64>, ModeProjections<f64>) {
        let mut rng = seeded_rng(seed);
        let hs: Vec<PerSampleHessian<f64>> = (0..4)
            .map(|p| {
                let g = gaussian_matrix::<f64>(3, 3, &mut rng);
                let hz = SymMatrix::symmetrize(&g * g.transpose()).unwrap();
                let a = gaussian_matrix::<f64>(4, 1, &mut rng).column(0).into_owned();
                PerSampleHessian::from_factors(p, a, hz).unwrap()
            })
            .collect();
        let v = sym_eig(&hs[0].dense()).unwrap().vectors;
        let proj = ModeProjections::compute(&hs, &v).unwrap();
        (hs, v, proj)
    }

    #[test]
    fn reconstruction_matches_dense_rebuild() {
        let (hs, v, proj) = tiny_projections(3);
        let kt: Vec<DVector<f64>> = proj.kappa.iter().map(|k| k.map(|x| x * x + 0.5)).collect();
        let rec = reconstruct(&proj, &kt).unwrap();
        let dim = v.nrows();
        let (mut hd, mut cd) = (DMatrix::zeros(dim, dim), DMatrix::zeros(dim, dim));
        for (p, h) in hs.iter().enumerate() {
            for m in 0..h.d_out() {
                let u = h.eigenvector(m);
                hd += &u * u.transpose() * kt[p][m] / 4.0;
                cd += &u * u.transpose() * kt[p][m].powi(2) / 4.0;
            }
        }
        for i in 0..dim {
            let vi = v.column(i);
            assert!((vi.dot(&(&hd * vi)) - rec.h[i]).abs() < 1e-10);
            assert!((vi.dot(&(&cd * vi)) - rec.c[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn reconstruction_identity_and_zero() {
        let (hs, v, proj) = tiny_projections(5);
        let rec = reconstruct(&proj, &proj.kappa).unwrap();
        let h = crate::spectral::assemble_hessian_matrix(&hs, 0).unwrap();
        let direct = crate::spectral::project_diag(&h, &v, v.ncols()).unwrap();
        assert!((rec.h - direct).amax() < 1e-10);
        let zeros: Vec<DVector<f64>> = proj.kappa.iter().map(|k| k * 0.0).collect();
        let rec = reconstruct(&proj, &zeros).unwrap();
        assert_eq!(rec.h.amax(), 0.0);
        assert_eq!(rec.c.amax(), 0.0);
        assert!(rec.cumulative.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn first_moment_is_linear_in_kappa() {
        let (_, _, proj) = tiny_projections(7);
        let mut rng = seeded_rng(8);
        let split: Vec<DVector<f64>> = proj
            .kappa
            .iter()
            .map(|k| k.map(|x| x * rand::Rng::random::<f64>(&mut rng)))
            .collect();
        let rest: Vec<DVector<f64>> = proj.kappa.iter().zip(&split).map(|(k, s)| k - s).collect();
        let a = reconstruct(&proj, &split).unwrap().h;
        let b = reconstruct(&proj, &rest).unwrap().h;
        let full = reconstruct(&proj, &proj.kappa).unwrap().h;
        assert!((a + b - full).amax() < 1e-12);
    }

    #[test]
    fn cumulative_curve_ends_at_one() {
        let (_, _, proj) = tiny_projections(9);
        let rec = reconstruct(&proj, &proj.kappa).unwrap();
        assert!((rec.cumulative.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(rec.cumulative.windows(2).all(|w| w[1] >= w[0] - 1e-15));
    }
}
