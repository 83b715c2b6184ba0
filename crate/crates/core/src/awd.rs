//! Empirical SGD noise covariance and its activity–weight duality ladder.
//!
//! A sample `p` of batch `ν` is paired with its nearest same-class neighbour
//! `p′` of batch `μ`. The activity shift `Δa = a_{p′} − a_p` at the focal input
//! is traded for the smallest weight change with the same pre-activation
//! effect, `ΔW* = (WΔa)aᵀ/‖a‖²`. The gradient difference between the batches
//! then splits into a Hessian–weight term `h_p Δw_p` and a gradient term
//! `vec(g_z Δaᵀ)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{balanced_counts, draw_batch, match_pairs, stratified_batches, Dataset, MiniBatch};
use crate::error::{Error, Result};
use crate::model::{
    downstream_hessian, focal_delta, forward, kron_vec, LossKind, MlpConfig, MlpParams,
    PerSampleHessian,
};
use crate::numerics::{derive_seed, kron_sum, pairwise_sum, seeded_rng, SymMatrix};
use crate::scalar::Real;

/// Rank-one weight perturbation `ΔW* = left · rightᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AwdPerturbation<T: Real> {
    /// `W Δa`.
    pub left: DVector<T>,
    /// `a / ‖a‖²`.
    pub right: DVector<T>,
    pub delta_a: DVector<T>,
    /// `(p, p′)` when built from a matched pair.
    pub pair: Option<(usize, usize)>,
}

impl<T: Real> AwdPerturbation<T> {
    pub fn matrix(&self) -> DMatrix<T> {
        &self.left * self.right.transpose()
    }

    /// Row-stacked `vec(ΔW*)`.
    pub fn vec(&self) -> DVector<T> {
        kron_vec(&self.left, &self.right)
    }
}

/// Minimum-norm `ΔW` with `ΔW a = W Δa`.
pub fn awd_perturbation<T: Real>(
    w: &DMatrix<T>,
    a: &DVector<T>,
    delta_a: &DVector<T>,
) -> Result<AwdPerturbation<T>> {
    if w.ncols() != a.len() || a.len() != delta_a.len() {
        return Err(Error::ShapeError(format!(
            "W is {}x{}, a has {} entries, Δa has {}",
            w.nrows(),
            w.ncols(),
            a.len(),
            delta_a.len()
        )));
    }
    let n2 = a.norm_squared();
    if n2 <= T::zero() {
        return Err(Error::DegenerateActivity(0));
    }
    Ok(AwdPerturbation {
        left: w * delta_a,
        right: a / n2,
        delta_a: delta_a.clone(),
        pair: None,
    })
}

/// What the noise analysis needs from one sample at the focal layer.
#[derive(Clone, Debug)]
pub struct FocalSample<T: Real> {
    pub index: usize,
    /// Focal input activity.
    pub a: DVector<T>,
    /// `∂ℓ/∂z` at the focal pre-activation.
    pub gz: DVector<T>,
    /// `∂²ℓ/∂z²` at the focal pre-activation.
    pub hz: SymMatrix<T>,
}

impl<T: Real> FocalSample<T> {
    pub fn gradient(&self) -> DVector<T> {
        kron_vec(&self.gz, &self.a)
    }

    pub fn hessian(&self) -> Result<PerSampleHessian<T>> {
        PerSampleHessian::from_factors(self.index, self.a.clone(), self.hz.clone())
    }
}

/// Per-sample focal quantities of a whole dataset at fixed weights.
#[derive(Clone, Debug)]
pub struct FocalCache<T: Real> {
    pub samples: Vec<FocalSample<T>>,
    pub w: DMatrix<T>,
    pub d_out: usize,
    pub d_in: usize,
    pub loss: LossKind,
}

impl<T: Real> FocalCache<T> {
    pub fn build(params: &MlpParams<T>, cfg: &MlpConfig, data: &Dataset<T>) -> Result<Self> {
        params.check(cfg)?;
        let samples = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let t = forward(params, cfg, data.input(i), data.label(i))?;
                Ok(FocalSample {
                    index: i,
                    gz: focal_delta(&t, params, cfg),
                    hz: downstream_hessian(&t, params, cfg)?,
                    a: t.activations[cfg.focal_layer].clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (d_out, d_in) = cfg.focal_shape();
        Ok(Self {
            samples,
            w: params.focal(cfg).clone(),
            d_out,
            d_in,
            loss: cfg.loss,
        })
    }

    pub fn dim(&self) -> usize {
        self.d_out * self.d_in
    }

    /// Per-sample Hessians of the given samples, skipping zero-activity ones.
    pub fn hessians(&self, indices: &[usize]) -> Result<(Vec<PerSampleHessian<T>>, Vec<usize>)> {
        let out: Vec<Result<PerSampleHessian<T>>> = indices
            .par_iter()
            .map(|&i| self.samples[i].hessian())
            .collect();
        let mut kept = Vec::with_capacity(out.len());
        let mut skipped = Vec::new();
        for r in out {
            match r {
                Ok(h) => kept.push(h),
                Err(Error::DegenerateActivity(i)) => skipped.push(i),
                Err(e) => return Err(e),
            }
        }
        Ok((kept, skipped))
    }

    pub fn all_hessians(&self) -> Result<(Vec<PerSampleHessian<T>>, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        self.hessians(&idx)
    }
}

/// Which constant multiplies every covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Covariance of the mini-batch gradient: per-sample covariance over `B`,
    /// which is also `½E[g_{μν}g_{μν}ᵀ]` for independent batches.
    #[default]
    Batch,
    /// Per-sample gradient covariance (no `1/B`).
    Sample,
}

impl Normalization {
    pub fn factor<T: Real>(self, batch: usize) -> T {
        match self {
            Normalization::Batch => T::one(),
            Normalization::Sample => T::count(batch),
        }
    }
}

/// Covariance of the focal per-sample gradients, scaled by `1/B`.
///
/// `centered = false` drops the `g gᵀ` term (second moment instead of covariance).
pub fn covariance_empirical_cached<T: Real>(
    cache: &FocalCache<T>,
    batch: usize,
    centered: bool,
) -> Result<SymMatrix<T>> {
    let n = cache.samples.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let second = gradient_second_moment(cache)?;
    let mut c = second.into_dense();
    if centered {
        let grads: Vec<DVector<T>> = cache.samples.iter().map(FocalSample::gradient).collect();
        let mean = mean_vector(&grads);
        c -= &mean * mean.transpose();
    }
    SymMatrix::symmetrize(c / T::count(batch))
}

pub fn covariance_empirical<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    data: &Dataset<T>,
    batch: usize,
    centered: bool,
) -> Result<SymMatrix<T>> {
    covariance_empirical_cached(&FocalCache::build(params, cfg, data)?, batch, centered)
}

/// `(1/N) Σ ∇ℓ_i ∇ℓ_iᵀ`, assembled through the `g_z gᵀ_z ⊗ a aᵀ` structure.
pub fn gradient_second_moment<T: Real>(cache: &FocalCache<T>) -> Result<SymMatrix<T>> {
    let n = cache.samples.len();
    let acts = DMatrix::from_fn(n, cache.d_in, |q, c| cache.samples[q].a[c]);
    let inv = T::one() / T::count(n.max(1));
    kron_sum(cache.d_out, &acts, |q, r, s| {
        let g = &cache.samples[q].gz;
        g[r] * g[s] * inv
    })
}

fn mean_vector<T: Real>(vs: &[DVector<T>]) -> DVector<T> {
    let dim = vs.first().map_or(0, |v| v.len());
    let n = T::count(vs.len().max(1));
    DVector::from_fn(dim, |k, _| {
        let col: Vec<T> = vs.iter().map(|v| v[k]).collect();
        pairwise_sum(&col) / n
    })
}

/// The two pieces of one batch-pair gradient difference, plus per-sample factors.
#[derive(Clone, Debug)]
pub struct GradDiff<T: Real> {
    /// `(1/B) Σ_p h_p Δw_p`.
    pub term_i: DVector<T>,
    /// `(1/B) Σ_p vec(g_z Δaᵀ)`.
    pub term_ii: DVector<T>,
    /// Per sample `(p, H_z W Δa)`: `h_p Δw_p = vec(x a_pᵀ)`.
    pub hw_factors: Vec<(usize, DVector<T>)>,
    pub perturbations: Vec<AwdPerturbation<T>>,
    pub skipped: usize,
}

/// Term I and Term II of the gradient difference between `mu` and `nu`.
pub fn grad_diff_terms_cached<T: Real>(
    cache: &FocalCache<T>,
    nu: &MiniBatch,
    pairs: &[(usize, usize)],
) -> GradDiff<T> {
    let inv_b = T::one() / T::count(nu.len().max(1));
    let mut term_i = DMatrix::zeros(cache.d_out, cache.d_in);
    let mut term_ii = DMatrix::zeros(cache.d_out, cache.d_in);
    let mut hw_factors = Vec::with_capacity(pairs.len());
    let mut perturbations = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for &(p, q) in pairs {
        let sp = &cache.samples[p];
        let da = &cache.samples[q].a - &sp.a;
        let Ok(mut pert) = awd_perturbation(&cache.w, &sp.a, &da) else {
            skipped += 1;
            continue;
        };
        pert.pair = Some((p, q));
        // h_p vec(ΔW*) = vec(H_z ΔW* a aᵀ) and ΔW* a = W Δa
        let x = sp.hz.as_dense() * &pert.left;
        term_i += &x * sp.a.transpose();
        term_ii += &sp.gz * da.transpose();
        hw_factors.push((p, x));
        perturbations.push(pert);
    }
    GradDiff {
        term_i: row_vec(&term_i) * inv_b,
        term_ii: row_vec(&term_ii) * inv_b,
        hw_factors,
        perturbations,
        skipped,
    }
}

fn row_vec<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    crate::numerics::vec_rows(m)
}

pub fn grad_diff_terms<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    data: &Dataset<T>,
    nu: &MiniBatch,
    mu: &MiniBatch,
) -> Result<GradDiff<T>> {
    let cache = FocalCache::build(params, cfg, data)?;
    let pairing = match_pairs(nu, mu, data)?;
    Ok(grad_diff_terms_cached(&cache, nu, &pairing.pairs))
}

/// How the `(B_μ, B_ν)` batch pairs are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum PairSource {
    /// Each pair is two independent class-balanced draws with identical per-class counts.
    Independent,
    /// Consecutive batches of stratified SGD epochs (`μ` precedes `ν`).
    Sequential,
    /// Caller-supplied `(ν, μ)` pairs.
    Explicit(Vec<(MiniBatch, MiniBatch)>),
}

#[derive(Clone, Debug)]
pub struct AwdOptions {
    pub batch: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub source: PairSource,
    pub normalization: Normalization,
}

/// The AWD approximation ladder.
#[derive(Clone, Debug)]
pub struct AwdLadder<T: Real> {
    pub raw: SymMatrix<T>,
    pub hh: SymMatrix<T>,
    pub hg: SymMatrix<T>,
    pub gg: SymMatrix<T>,
    pub hh_sd: SymMatrix<T>,
    pub pair_count: usize,
    pub skipped: usize,
    pub reused_partners: usize,
    pub mean_pair_distance: f64,
    pub perturbations: Vec<AwdPerturbation<T>>,
}

/// Empirical covariance together with the AWD ladder.
#[derive(Clone, Debug)]
pub struct CovarianceSet<T: Real> {
    pub emp: SymMatrix<T>,
    pub centered: bool,
    pub normalization: Normalization,
    pub ladder: AwdLadder<T>,
}

fn batch_pairs<T: Real>(
    data: &Dataset<T>,
    opts: &AwdOptions,
) -> Result<Vec<(MiniBatch, MiniBatch)>> {
    match &opts.source {
        PairSource::Explicit(v) => Ok(v.clone()),
        PairSource::Independent => {
            let by_class = data.class_indices();
            (0..opts.n_pairs)
                .map(|t| {
                    let mut rng = seeded_rng(derive_seed(opts.seed, &[t as u64]));
                    let counts = balanced_counts(opts.batch, data.class_count(), &mut rng);
                    let nu = draw_batch(&by_class, &counts, &mut rng)?;
                    let mu = draw_batch(&by_class, &counts, &mut rng)?;
                    Ok((nu, mu))
                })
                .collect()
        }
        PairSource::Sequential => {
            let mut out = Vec::with_capacity(opts.n_pairs);
            let mut prev: Option<MiniBatch> = None;
            let mut epoch = 0u64;
            while out.len() < opts.n_pairs {
                let batches = stratified_batches(data, opts.batch, opts.seed, epoch)?;
                if batches.len() < 2 && prev.is_none() && epoch > 0 {
                    return Err(Error::InsufficientPairs(
                        "a single batch per epoch cannot form sequential pairs".into(),
                    ));
                }
                for b in batches {
                    if let Some(mu) = prev.take() {
                        if out.len() < opts.n_pairs {
                            out.push((b.clone(), mu));
                        }
                    }
                    prev = Some(b);
                }
                epoch += 1;
            }
            Ok(out)
        }
    }
}

/// Accumulates `½ E[T Tᵀ]` over batch pairs for the full ladder.
pub fn awd_ladder<T: Real>(
    cache: &FocalCache<T>,
    data: &Dataset<T>,
    opts: &AwdOptions,
) -> Result<AwdLadder<T>> {
    let pairs = batch_pairs(data, opts)?;
    if pairs.is_empty() {
        return Err(Error::InsufficientPairs("no batch pairs requested".into()));
    }
    let diffs: Vec<(GradDiff<T>, usize, Vec<T>)> = pairs
        .par_iter()
        .map(|(nu, mu)| {
            let pairing = match_pairs(nu, mu, data)?;
            let gd = grad_diff_terms_cached(cache, nu, &pairing.pairs);
            Ok((gd, pairing.reused_partners, pairing.distances))
        })
        .collect::<Result<_>>()?;
    let n = diffs.len();
    let dim = cache.dim();
    let t1 = DMatrix::from_fn(n, dim, |t, k| diffs[t].0.term_i[k]);
    let t2 = DMatrix::from_fn(n, dim, |t, k| diffs[t].0.term_ii[k]);
    let scale = T::lit(0.5) / T::count(n) * opts.normalization.factor::<T>(opts.batch);
    let hh_d = t1.tr_mul(&t1);
    let gg_d = t2.tr_mul(&t2);
    let cross = t1.tr_mul(&t2);
    let hg_d = &cross + cross.transpose();
    let tsum = &t1 + &t2;
    let raw_d = tsum.tr_mul(&tsum);

    let factors: Vec<(usize, &DVector<T>)> = diffs
        .iter()
        .flat_map(|d| d.0.hw_factors.iter().map(|(p, x)| (*p, x)))
        .collect();
    let acts = DMatrix::from_fn(factors.len(), cache.d_in, |q, c| cache.samples[factors[q].0].a[c]);
    let inv_b2 = T::one() / T::count(opts.batch * opts.batch);
    let hh_sd = kron_sum(cache.d_out, &acts, |q, r, s| {
        let x = factors[q].1;
        x[r] * x[s] * inv_b2
    })?
    .scaled(scale);

    let distances: Vec<f64> = diffs.iter().flat_map(|d| d.2.iter().map(|v| v.as_f64())).collect();
    Ok(AwdLadder {
        raw: SymMatrix::symmetrize(raw_d * scale)?,
        hh: SymMatrix::symmetrize(hh_d * scale)?,
        hg: SymMatrix::symmetrize(hg_d * scale)?,
        gg: SymMatrix::symmetrize(gg_d * scale)?,
        hh_sd,
        pair_count: n,
        skipped: diffs.iter().map(|d| d.0.skipped).sum(),
        reused_partners: diffs.iter().map(|d| d.1).sum(),
        mean_pair_distance: if distances.is_empty() {
            0.0
        } else {
            pairwise_sum(&distances) / distances.len() as f64
        },
        perturbations: diffs.into_iter().flat_map(|d| d.0.perturbations).collect(),
    })
}

/// Draws `n_pairs` independent balanced batch pairs and builds the ladder.
pub fn covariance_awd<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    data: &Dataset<T>,
    batch: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<AwdLadder<T>> {
    if n_pairs == 0 {
        return Err(Error::InsufficientPairs("n_pairs must be at least 1".into()));
    }
    let cache = FocalCache::build(params, cfg, data)?;
    let opts = AwdOptions {
        batch,
        n_pairs,
        seed,
        source: PairSource::Independent,
        normalization: Normalization::Batch,
    };
    awd_ladder(&cache, data, &opts)
}

/// Perturbation variances in each sample's local eigenbasis.
#[derive(Clone, Debug)]
pub struct PerturbationStats<T: Real> {
    /// `(sample, M_p)` with `M_p` in the `û_m` basis (`d_out × d_out`).
    pub per_sample: Vec<(usize, SymMatrix<T>)>,
    pub sigma_w2: T,
    /// Mean `|M_p,mn|` off the diagonal over mean diagonal, retained modes only.
    pub offdiag_ratio: T,
    /// Coefficient of variation of the retained diagonal entries.
    pub diag_cv: T,
    pub modes_used: usize,
    pub kappa_floor: T,
}

/// Relative floor under which modes are ignored when estimating `σ_w²`.
pub const MODE_FLOOR: f64 = 1e-8;

/// Estimates `M_p` per sample and the isotropic level `σ_w²`.
///
/// `u_mᵀ vec(ΔW*) = (û_mᵀ W Δa)(aᵀ â)/‖a‖²`, so each projection costs `O(d_out·d_in)`.
pub fn perturbation_stats<T: Real>(
    hessians: &[PerSampleHessian<T>],
    perturbations: &[AwdPerturbation<T>],
) -> Result<PerturbationStats<T>> {
    let by_sample: BTreeMap<usize, &PerSampleHessian<T>> =
        hessians.iter().map(|h| (h.sample, h)).collect();
    let mut groups: BTreeMap<usize, Vec<&AwdPerturbation<T>>> = BTreeMap::new();
    for (k, pert) in perturbations.iter().enumerate() {
        let p = pert.pair.map_or(k, |(p, _)| p);
        if by_sample.contains_key(&p) {
            groups.entry(p).or_default().push(pert);
        }
    }
    if groups.is_empty() {
        return Err(Error::InsufficientPairs(
            "no perturbation belongs to a retained sample".into(),
        ));
    }
    let kappa_max = hessians
        .iter()
        .fold(T::zero(), |m, h| m.max(h.kappa.max()));
    let floor = T::lit(MODE_FLOOR) * kappa_max;
    let per_sample: Vec<(usize, SymMatrix<T>)> = groups
        .par_iter()
        .map(|(&p, list)| {
            let h = by_sample[&p];
            let a_unit = h.a_unit();
            let k = h.d_out();
            let mut acc = DMatrix::zeros(k, k);
            for pert in list {
                let proj = h.local_vectors.tr_mul(&pert.left) * pert.right.dot(&a_unit);
                acc += &proj * proj.transpose();
            }
            (p, SymMatrix::symmetrize(acc / T::count(list.len())).expect("finite"))
        })
        .collect();
    let mut diag = Vec::new();
    let mut off = Vec::new();
    for (p, m) in &per_sample {
        let h = by_sample[p];
        let keep: Vec<usize> = (0..h.d_out()).filter(|&i| h.kappa[i] > floor).collect();
        for &i in &keep {
            diag.push(m.get(i, i));
            for &j in &keep {
                if i != j {
                    off.push(m.get(i, j).abs());
                }
            }
        }
    }
    let mean = |v: &[T]| {
        if v.is_empty() {
            T::zero()
        } else {
            pairwise_sum(v) / T::count(v.len())
        }
    };
    let sigma_w2 = mean(&diag);
    let var = mean(&diag.iter().map(|d| (*d - sigma_w2) * (*d - sigma_w2)).collect::<Vec<_>>());
    Ok(PerturbationStats {
        per_sample,
        sigma_w2,
        offdiag_ratio: if sigma_w2 > T::zero() { mean(&off) / sigma_w2 } else { T::zero() },
        diag_cv: if sigma_w2 > T::zero() { var.sqrt() / sigma_w2 } else { T::zero() },
        modes_used: diag.len(),
        kappa_floor: floor,
    })
}

/// `(σ_w²/2B) E_p Σ_m κ_m² (u_m·v_i)(u_m·v_j)` in the basis `V`.
#[derive(Clone, Debug)]
pub struct Theorem1Covariance<T: Real> {
    pub matrix: SymMatrix<T>,
    pub diag: DVector<T>,
}

/// Projections `u_m^{(p)}·v_i` of every per-sample eigenvector onto a basis.
#[derive(Clone, Debug)]
pub struct ModeProjections<T: Real> {
    pub samples: Vec<usize>,
    /// `kappa[p]` are the eigenvalues of sample `p`.
    pub kappa: Vec<DVector<T>>,
    /// `proj[p][(m, i)] = u_m^{(p)} · v_i`.
    pub proj: Vec<DMatrix<T>>,
    pub basis_size: usize,
}

impl<T: Real> ModeProjections<T> {
    /// `V` has `D` rows laid out as `d_out` blocks of `d_in`.
    pub fn compute(hessians: &[PerSampleHessian<T>], v: &DMatrix<T>) -> Result<Self> {
        let n = v.ncols();
        let proj: Vec<DMatrix<T>> = hessians
            .par_iter()
            .map(|h| {
                if v.nrows() != h.dim() {
                    return Err(Error::ShapeError(format!(
                        "basis has {} rows, Hessian dimension is {}",
                        v.nrows(),
                        h.dim()
                    )));
                }
                let (k, d_in) = (h.d_out(), h.d_in());
                let a_unit = h.a_unit();
                // Y[r, i] = Σ_c V[r·d_in + c, i] â_c
                let mut y = DMatrix::zeros(k, n);
                for r in 0..k {
                    let block = v.rows(r * d_in, d_in);
                    y.row_mut(r).copy_from(&a_unit.tr_mul(&block));
                }
                Ok(h.local_vectors.tr_mul(&y))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            samples: hessians.iter().map(|h| h.sample).collect(),
            kappa: hessians.iter().map(|h| h.kappa.clone()).collect(),
            proj,
            basis_size: n,
        })
    }

    pub fn len(&self) -> usize {
        self.proj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proj.is_empty()
    }

    /// `(1/N) Σ_p Σ_m f(p, m) (u_m·v_i)²` per direction.
    pub fn weighted_diag(&self, f: impl Fn(usize, usize) -> T + Sync) -> DVector<T> {
        let n = self.basis_size;
        let per_sample: Vec<DVector<T>> = self
            .proj
            .par_iter()
            .enumerate()
            .map(|(p, pm)| {
                DVector::from_fn(n, |i, _| {
                    let mut s = T::zero();
                    for m in 0..pm.nrows() {
                        let w = f(p, m);
                        if w != T::zero() {
                            s += w * pm[(m, i)] * pm[(m, i)];
                        }
                    }
                    s
                })
            })
            .collect();
        mean_vector(&per_sample)
    }

    /// `(1/N) Σ_p Pᵀ diag(f) P`, accumulated in fixed-size sample chunks.
    pub fn weighted_matrix(&self, f: impl Fn(usize, usize) -> T + Sync) -> Result<SymMatrix<T>> {
        const CHUNK: usize = 32;
        let n = self.basis_size;
        let parts: Vec<DMatrix<T>> = (0..self.proj.len())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|chunk| {
                let rows: usize = chunk.iter().map(|&p| self.proj[p].nrows()).sum();
                let mut z = DMatrix::zeros(rows, n);
                let mut zw = DMatrix::zeros(rows, n);
                let mut at = 0;
                for &p in chunk {
                    let pm = &self.proj[p];
                    for m in 0..pm.nrows() {
                        let w = f(p, m);
                        z.row_mut(at).copy_from(&pm.row(m));
                        zw.row_mut(at).copy_from(&(pm.row(m) * w));
                        at += 1;
                    }
                }
                z.tr_mul(&zw)
            })
            .collect();
        let mut acc = DMatrix::zeros(n, n);
        for part in parts {
            acc += part;
        }
        SymMatrix::symmetrize(acc / T::count(self.proj.len().max(1)))
    }
}

pub fn covariance_theorem1_from<T: Real>(
    proj: &ModeProjections<T>,
    sigma_w2: T,
    batch: usize,
) -> Result<Theorem1Covariance<T>> {
    let c = sigma_w2 / (T::lit(2.0) * T::count(batch));
    let matrix = proj
        .weighted_matrix(|p, m| proj.kappa[p][m] * proj.kappa[p][m])?
        .scaled(c);
    let diag = matrix.diagonal();
    Ok(Theorem1Covariance { matrix, diag })
}

pub fn covariance_theorem1<T: Real>(
    hessians: &[PerSampleHessian<T>],
    sigma_w2: T,
    batch: usize,
    v: &DMatrix<T>,
) -> Result<Theorem1Covariance<T>> {
    covariance_theorem1_from(&ModeProjections::compute(hessians, v)?, sigma_w2, batch)
}

/// Empirical Fisher `(1/N)Σ∇ℓ∇ℓᵀ` against the Hessian.
#[derive(Clone, Debug)]
pub struct FisherDiagnostic<T: Real> {
    pub fisher: SymMatrix<T>,
    pub rel_gap: T,
    /// Set for MSE, where the matrix is only the gradient second moment.
    pub not_a_likelihood: bool,
}

pub fn fisher_gap<T: Real>(fisher: &SymMatrix<T>, h: &SymMatrix<T>) -> T {
    let hn = h.frobenius_norm();
    if hn == T::zero() {
        return T::zero();
    }
    (fisher.as_dense() - h.as_dense()).norm() / hn
}

pub fn fisher_diagnostic<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    data: &Dataset<T>,
) -> Result<FisherDiagnostic<T>> {
    let cache = FocalCache::build(params, cfg, data)?;
    let fisher = gradient_second_moment(&cache)?;
    let (hs, skipped) = cache.all_hessians()?;
    let h = crate::spectral::assemble_hessian_matrix(&hs, skipped.len())?;
    Ok(FisherDiagnostic {
        rel_gap: fisher_gap(&fisher, &h),
        fisher,
        not_a_likelihood: cfg.loss == LossKind::Mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, sym_eig};
    use rand::Rng;

    #[test]
    fn null_and_identity_perturbations() {
        let w = DMatrix::<f64>::identity(2, 2);
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let z = awd_perturbation(&w, &a, &DVector::zeros(2)).unwrap();
        assert_eq!(z.matrix(), DMatrix::zeros(2, 2));
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        let p = awd_perturbation(&w, &a, &e2).unwrap();
        assert_eq!(p.matrix(), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert!(matches!(
            awd_perturbation(&w, &DVector::zeros(2), &e2),
            Err(Error::DegenerateActivity(_))
        ));
    }

    #[test]
    fn perturbation_is_minimal_and_exact() {
        let mut rng = seeded_rng(12);
        for _ in 0..20 {
            let w = gaussian_matrix::<f64>(4, 5, &mut rng);
            let a = gaussian_matrix::<f64>(5, 1, &mut rng).column(0).into_owned();
            let da = gaussian_matrix::<f64>(5, 1, &mut rng).column(0).into_owned();
            let p = awd_perturbation(&w, &a, &da).unwrap();
            let dw = p.matrix();
            let target = &w * &da;
            assert!((&dw * &a - &target).norm() <= 1e-10 * target.norm());
            let sv = dw.clone().singular_values();
            assert!(sv[1] <= 1e-10 * sv[0]);
            // any feasible alternative adds a component Z with Z a = 0
            for _ in 0..100 {
                let r = gaussian_matrix::<f64>(4, 5, &mut rng);
                let z = &r - &r * &a * a.transpose() / a.norm_squared();
                let alt = &dw + z;
                assert!((&alt * &a - &target).norm() <= 1e-9 * target.norm());
                assert!(dw.norm() <= alt.norm());
            }
        }
    }

    fn tiny_setup(loss: LossKind, seed: u64) -> (MlpConfig, MlpParams<f64>, Dataset<f64>) {
        let cfg = MlpConfig::new(vec![3, 4, 3, 2], 1, loss).unwrap();
        let mut rng = seeded_rng(seed);
        let params = MlpParams {
            weights: (0..3)
                .map(|l| gaussian_matrix::<f64>(cfg.layer_dims[l + 1], cfg.layer_dims[l], &mut rng))
                .collect(),
        };
        let inputs: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..1.0)).collect();
        let data = Dataset::new(inputs, 3, vec![0, 0, 1, 1], 2, "tiny").unwrap();
        (cfg, params, data)
    }

    #[test]
    fn term_ii_matches_finite_difference_contraction() {
        let (cfg, params, data) = tiny_setup(LossKind::Ce, 4);
        let cache = FocalCache::build(&params, &cfg, &data).unwrap();
        let (p, q) = (0, 1);
        let sp = &cache.samples[p];
        let da = &cache.samples[q].a - &sp.a;
        let nu = MiniBatch { indices: vec![p] };
        let gd = grad_diff_terms_cached(&cache, &nu, &[(p, q)]);
        // Σ_ij G_ij ∂ΔW*_ij/∂W_mn by central differences in W
        let g = sp.gz.clone() * sp.a.transpose();
        let w0 = cache.w.clone();
        let h = 1e-5;
        let (rows, cols) = w0.shape();
        let mut fd = Vec::new();
        for m in 0..rows {
            for n in 0..cols {
                let mut wp = w0.clone();
                let mut wm = w0.clone();
                wp[(m, n)] += h;
                wm[(m, n)] -= h;
                let dp = awd_perturbation(&wp, &sp.a, &da).unwrap().matrix();
                let dm = awd_perturbation(&wm, &sp.a, &da).unwrap().matrix();
                fd.push(g.dot(&((dp - dm) / (2.0 * h))));
            }
        }
        let fd = DVector::from_vec(fd);
        assert!((&gd.term_ii - &fd).norm() <= 1e-5 * fd.norm());
    }

    #[test]
    fn term_i_matches_dense_hessian() {
        let (cfg, params, data) = tiny_setup(LossKind::Mse, 6);
        let cache = FocalCache::build(&params, &cfg, &data).unwrap();
        let nu = MiniBatch { indices: vec![0, 2] };
        let pairs = [(0, 1), (2, 3)];
        let gd = grad_diff_terms_cached(&cache, &nu, &pairs);
        let mut want = DVector::zeros(cache.dim());
        for &(p, q) in &pairs {
            let h = cache.samples[p].hessian().unwrap().dense();
            let da = &cache.samples[q].a - &cache.samples[p].a;
            let dw = awd_perturbation(&cache.w, &cache.samples[p].a, &da).unwrap().vec();
            want += h.as_dense() * dw / 2.0;
        }
        assert!((&gd.term_i - want).norm() < 1e-12);
    }

    #[test]
    fn self_pairing_gives_zero_noise() {
        let (cfg, params, data) = tiny_setup(LossKind::Ce, 1);
        let cache = FocalCache::build(&params, &cfg, &data).unwrap();
        let b = MiniBatch { indices: vec![0, 2] };
        let opts = AwdOptions {
            batch: 2,
            n_pairs: 3,
            seed: 0,
            source: PairSource::Explicit(vec![(b.clone(), b.clone()); 3]),
            normalization: Normalization::Batch,
        };
        let l = awd_ladder(&cache, &data, &opts).unwrap();
        for m in [&l.raw, &l.hh, &l.hg, &l.gg, &l.hh_sd] {
            assert_eq!(m.max_abs(), 0.0);
        }
    }

    #[test]
    fn ladder_is_additive_and_matches_exhaustive_enumeration() {
        let (cfg, params, data) = tiny_setup(LossKind::Ce, 2);
        let cache = FocalCache::build(&params, &cfg, &data).unwrap();
        let batches: Vec<MiniBatch> = [0, 1]
            .iter()
            .flat_map(|&a| [2, 3].iter().map(move |&b| MiniBatch { indices: vec![a, b] }))
            .collect();
        let mut all = Vec::new();
        for nu in &batches {
            for mu in &batches {
                all.push((nu.clone(), mu.clone()));
            }
        }
        let opts = AwdOptions {
            batch: 2,
            n_pairs: all.len(),
            seed: 0,
            source: PairSource::Explicit(all.clone()),
            normalization: Normalization::Batch,
        };
        let l = awd_ladder(&cache, &data, &opts).unwrap();
        let sum = l.hh.add(&l.hg).unwrap().add(&l.gg).unwrap();
        assert!((sum.as_dense() - l.raw.as_dense()).amax() <= 1e-10 * l.raw.max_abs());

        // brute force with dense per-sample Hessians
        let dim = cache.dim();
        let mut raw = DMatrix::zeros(dim, dim);
        let mut sd = DMatrix::zeros(dim, dim);
        for (nu, mu) in &all {
            let mut g = DVector::zeros(dim);
            for &p in &nu.indices {
                let q = *mu.indices.iter().find(|&&q| data.label(q) == data.label(p)).unwrap();
                let s = &cache.samples[p];
                let da = &cache.samples[q].a - &s.a;
                let dw = awd_perturbation(&cache.w, &s.a, &da).unwrap().vec();
                let hv = s.hessian().unwrap().dense().as_dense() * dw / 2.0;
                g += &hv + kron_vec(&s.gz, &da) / 2.0;
                sd += &hv * hv.transpose();
            }
            raw += &g * g.transpose();
        }
        let n = all.len() as f64;
        raw *= 0.5 / n;
        sd *= 0.5 / n;
        assert!((raw - l.raw.as_dense()).amax() <= 1e-12 * l.raw.max_abs().max(1e-300));
        assert!((sd - l.hh_sd.as_dense()).amax() <= 1e-12 * l.hh_sd.max_abs().max(1e-300));
    }

    #[test]
    fn empirical_covariance_cases() {
        let (cfg, params, data) = tiny_setup(LossKind::Ce, 3);
        let one = data.subset(&[0]);
        let c = covariance_empirical(&params, &cfg, &one, 5, true).unwrap();
        assert!(c.max_abs() < 1e-18);
        let dup = data.subset(&[1, 1, 1]);
        assert!(covariance_empirical(&params, &cfg, &dup, 5, true).unwrap().max_abs() < 1e-16);

        // two samples: centered C = (g1-g2)(g1-g2)ᵀ/(4B) = vvᵀ/B for v = (g1-g2)/2
        let two = data.subset(&[0, 2]);
        let cache = FocalCache::build(&params, &cfg, &two).unwrap();
        let v = (cache.samples[0].gradient() - cache.samples[1].gradient()) / 2.0;
        let c = covariance_empirical_cached(&cache, 3, true).unwrap();
        let want = &v * v.transpose() / 3.0;
        assert!((c.as_dense() - want).amax() < 1e-15);

        let full = FocalCache::build(&params, &cfg, &data).unwrap();
        let emp = covariance_empirical_cached(&full, 4, true).unwrap();
        assert!(crate::numerics::sym_eigenvalues(&emp).unwrap().min() >= -1e-9 * emp.frobenius_norm());
    }

    #[test]
    fn fisher_identity() {
        let (cfg, params, data) = tiny_setup(LossKind::Ce, 5);
        let f = fisher_diagnostic(&params, &cfg, &data).unwrap();
        let unc = covariance_empirical(&params, &cfg, &data, 7, false).unwrap();
        assert!((f.fisher.as_dense() - unc.as_dense() * 7.0).amax() <= 1e-12 * f.fisher.max_abs());
    }

    fn single_mode_hessian() -> PerSampleHessian<f64> {
        // H_z = diag(1, 0), a = e1: only u_1 = e1 ⊗ e1 is curved
        let hz = SymMatrix::from_diagonal(&[1.0, 0.0]);
        PerSampleHessian::from_factors(0, DVector::from_vec(vec![1.0, 0.0]), hz).unwrap()
    }

    #[test]
    fn perturbation_stats_cases() {
        let h = single_mode_hessian();
        let aligned = AwdPerturbation {
            left: DVector::from_vec(vec![1.0, 0.0]),
            right: DVector::from_vec(vec![1.0, 0.0]),
            delta_a: DVector::zeros(2),
            pair: Some((0, 0)),
        };
        let s = perturbation_stats(std::slice::from_ref(&h), &[aligned]).unwrap();
        let m = &s.per_sample[0].1;
        assert!((m.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert!((s.sigma_w2 - 1.0).abs() < 1e-15);

        let orth = AwdPerturbation {
            left: DVector::from_vec(vec![1.0, 1.0]),
            right: DVector::from_vec(vec![0.0, 1.0]),
            delta_a: DVector::zeros(2),
            pair: Some((0, 0)),
        };
        let s = perturbation_stats(std::slice::from_ref(&h), &[orth]).unwrap();
        assert_eq!(s.per_sample[0].1.max_abs(), 0.0);
        assert!(matches!(perturbation_stats(std::slice::from_ref(&h), &[]), Err(Error::InsufficientPairs(_))));
    }

    #[test]
    fn perturbation_stats_match_dense_projection() {
        let (cfg, params, data) = tiny_setup(LossKind::Ce, 9);
        let cache = FocalCache::build(&params, &cfg, &data).unwrap();
        let h = cache.samples[0].hessian().unwrap();
        let perts: Vec<AwdPerturbation<f64>> = [1, 2, 3]
            .iter()
            .map(|&q| {
                let da = &cache.samples[q].a - &cache.samples[0].a;
                let mut p = awd_perturbation(&cache.w, &cache.samples[0].a, &da).unwrap();
                p.pair = Some((0, q));
                p
            })
            .collect();
        let s = perturbation_stats(std::slice::from_ref(&h), &perts).unwrap();
        let u = DMatrix::from_columns(&(0..h.d_out()).map(|m| h.eigenvector(m)).collect::<Vec<_>>());
        let mut want = DMatrix::zeros(h.d_out(), h.d_out());
        for p in &perts {
            let pr = u.tr_mul(&p.vec());
            want += &pr * pr.transpose() / 3.0;
        }
        assert!((s.per_sample[0].1.as_dense() - want).amax() < 1e-12);
    }

    #[test]
    fn theorem1_single_mode_and_dense_oracle() {
        let h = single_mode_hessian();
        let v = DMatrix::<f64>::identity(4, 4);
        let c = covariance_theorem1(std::slice::from_ref(&h), 0.3, 5, &v).unwrap();
        assert!((c.matrix.get(0, 0) - 0.3 / 10.0).abs() < 1e-15);
        assert_eq!(c.matrix.as_dense().iter().filter(|x| **x != 0.0).count(), 1);
        let zero = covariance_theorem1(std::slice::from_ref(&h), 0.0, 5, &v).unwrap();
        assert_eq!(zero.matrix.max_abs(), 0.0);

        let (cfg, params, data) = tiny_setup(LossKind::Mse, 11);
        let cache = FocalCache::build(&params, &cfg, &data).unwrap();
        let (hs, _) = cache.all_hessians().unwrap();
        let basis = sym_eig(&hs[0].dense()).unwrap().vectors;
        let c = covariance_theorem1(&hs, 2.0, 4, &basis).unwrap();
        let dim = cache.dim();
        let mut want = DMatrix::zeros(dim, dim);
        for h in &hs {
            let e = sym_eig(&h.dense()).unwrap();
            for m in 0..dim {
                let u = e.vectors.column(m);
                let pu = basis.tr_mul(&u);
                want += &pu * pu.transpose() * e.values[m].powi(2);
            }
        }
        want *= 2.0 / 8.0 / hs.len() as f64;
        assert!((c.matrix.as_dense() - &want).amax() <= 1e-10 * want.amax());
    }
}
