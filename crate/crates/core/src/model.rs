//! Bias-free ReLU MLP with a softmax head, exact per-sample gradients and
//! Kronecker-factored focal-layer Hessians.
//!
//! Weights are vectorized by stacking rows: entry `(r, c)` of the focal matrix
//! sits at `r·d_in + c`. With that convention the per-sample Hessian of the
//! focal block is `H_z ⊗ a aᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, pairwise_sum, seeded_rng, sym_eig, SymMatrix};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy on the softmax output.
    Ce,
    /// Mean over classes of `(p_k − e_{y,k})²`, softmax applied first.
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Mse => "mse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `[d_0, hidden…, K]`.
    pub layer_dims: Vec<usize>,
    /// Index of the weight matrix under study (`W_focal: d_{f+1} × d_f`).
    pub focal_layer: usize,
    pub loss: LossKind,
}

impl MlpConfig {
    pub fn new(layer_dims: Vec<usize>, focal_layer: usize, loss: LossKind) -> Result<Self> {
        let cfg = Self {
            layer_dims,
            focal_layer,
            loss,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 3 {
            return Err(Error::InvalidDimension(format!(
                "need at least two weight matrices, got layer dims {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidDimension("layer widths must be positive".into()));
        }
        if self.classes() < 2 {
            return Err(Error::InvalidDimension("need at least two classes".into()));
        }
        if self.focal_layer >= self.n_layers() {
            return Err(Error::InvalidDimension(format!(
                "focal layer {} but only {} weight matrices",
                self.focal_layer,
                self.n_layers()
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().unwrap_or(&0)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// `(d_out, d_in)` of the focal matrix.
    pub fn focal_shape(&self) -> (usize, usize) {
        (
            self.layer_dims[self.focal_layer + 1],
            self.layer_dims[self.focal_layer],
        )
    }

    /// Number of focal parameters `D = d_out·d_in`.
    pub fn focal_dim(&self) -> usize {
        let (o, i) = self.focal_shape();
        o * i
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T: Real> {
    pub weights: Vec<DMatrix<T>>,
}

impl<T: Real> MlpParams<T> {
    /// `W_l ~ U(−1/√d_in, 1/√d_in)`, each layer from its own derived stream.
    pub fn init_uniform(cfg: &MlpConfig, seed: u64) -> Self {
        let weights = (0..cfg.n_layers())
            .map(|l| {
                let (rows, cols) = (cfg.layer_dims[l + 1], cfg.layer_dims[l]);
                let bound = 1.0 / (cols as f64).sqrt();
                let mut rng = seeded_rng(derive_seed(seed, &[l as u64]));
                let mut w = DMatrix::zeros(rows, cols);
                // row-major fill so the draw order matches the vec convention
                for r in 0..rows {
                    for c in 0..cols {
                        w[(r, c)] = T::lit(rng.random_range(-bound..bound));
                    }
                }
                w
            })
            .collect();
        Self { weights }
    }

    pub fn zeros(cfg: &MlpConfig) -> Self {
        Self {
            weights: (0..cfg.n_layers())
                .map(|l| DMatrix::zeros(cfg.layer_dims[l + 1], cfg.layer_dims[l]))
                .collect(),
        }
    }

    pub fn check(&self, cfg: &MlpConfig) -> Result<()> {
        if self.weights.len() != cfg.n_layers() {
            return Err(Error::ShapeError(format!(
                "{} weight matrices for {} layers",
                self.weights.len(),
                cfg.n_layers()
            )));
        }
        for (l, w) in self.weights.iter().enumerate() {
            let want = (cfg.layer_dims[l + 1], cfg.layer_dims[l]);
            if w.shape() != want {
                return Err(Error::ShapeError(format!(
                    "layer {l} is {:?}, expected {want:?}",
                    w.shape()
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::NumericalOverflow("non-finite weights".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
    }

    pub fn focal<'a>(&'a self, cfg: &MlpConfig) -> &'a DMatrix<T> {
        &self.weights[cfg.focal_layer]
    }
}

/// Everything the forward pass produced for one sample.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Real> {
    /// `activations[l]` is the input to layer `l` (`activations[0] = x`).
    pub activations: Vec<DVector<T>>,
    /// `pre[l] = W_l activations[l]`; the last entry holds the logits.
    pub pre: Vec<DVector<T>>,
    /// ReLU masks of the hidden pre-activations (`masks[l]` goes with `pre[l]`).
    pub masks: Vec<Vec<bool>>,
    pub probs: DVector<T>,
    pub label: usize,
    pub loss: T,
}

impl<T: Real> ForwardTrace<T> {
    pub fn predicted(&self) -> usize {
        self.probs.argmax().0
    }

    pub fn correct(&self) -> bool {
        self.predicted() == self.label
    }
}

fn softmax<T: Real>(z: &DVector<T>) -> DVector<T> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = pairwise_sum(e.as_slice());
    e / s
}

fn loss_value<T: Real>(p: &DVector<T>, y: usize, kind: LossKind) -> T {
    match kind {
        LossKind::Ce => -p[y].ln(),
        LossKind::Mse => {
            let k = p.len();
            let sq: Vec<T> = (0..k)
                .map(|i| {
                    let e = if i == y { T::one() } else { T::zero() };
                    (p[i] - e) * (p[i] - e)
                })
                .collect();
            pairwise_sum(&sq) / T::count(k)
        }
    }
}

pub fn forward<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    x: &[T],
    y: usize,
) -> Result<ForwardTrace<T>> {
    if x.len() != cfg.input_dim() {
        return Err(Error::ShapeError(format!(
            "input of length {} for a network expecting {}",
            x.len(),
            cfg.input_dim()
        )));
    }
    if y >= cfg.classes() {
        return Err(Error::ShapeError(format!(
            "label {y} for {} classes",
            cfg.classes()
        )));
    }
    let n = cfg.n_layers();
    let mut activations = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n - 1);
    let mut a = DVector::from_column_slice(x);
    for (l, w) in params.weights.iter().enumerate() {
        let z = w * &a;
        activations.push(a);
        if l + 1 < n {
            let mask: Vec<bool> = z.iter().map(|v| *v > T::zero()).collect();
            a = DVector::from_fn(z.len(), |i, _| if mask[i] { z[i] } else { T::zero() });
            masks.push(mask);
        } else {
            a = DVector::zeros(0);
        }
        pre.push(z);
    }
    let logits = pre.last().expect("at least two layers");
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow("non-finite logits".into()));
    }
    let probs = softmax(logits);
    let loss = loss_value(&probs, y, cfg.loss);
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow(format!("loss is {loss}")));
    }
    Ok(ForwardTrace {
        activations,
        pre,
        masks,
        probs,
        label: y,
        loss,
    })
}

/// `∂ℓ/∂logits`.
pub fn logit_gradient<T: Real>(p: &DVector<T>, y: usize, kind: LossKind) -> DVector<T> {
    let k = p.len();
    let mut g = p.clone();
    match kind {
        LossKind::Ce => g[y] -= T::one(),
        LossKind::Mse => {
            let two_over_k = T::lit(2.0) / T::count(k);
            let r = DVector::from_fn(k, |i, _| {
                let e = if i == y { T::one() } else { T::zero() };
                two_over_k * (p[i] - e)
            });
            // J is symmetric: J_ki = p_k(δ_ki − p_i)
            let pr = p.dot(&r);
            g = DVector::from_fn(k, |i, _| p[i] * (r[i] - pr));
        }
    }
    g
}

/// Backpropagated `∂ℓ/∂pre[l]` for every layer.
pub fn backprop_deltas<T: Real>(
    trace: &ForwardTrace<T>,
    params: &MlpParams<T>,
    cfg: &MlpConfig,
) -> Vec<DVector<T>> {
    let n = cfg.n_layers();
    let mut deltas = vec![DVector::zeros(0); n];
    deltas[n - 1] = logit_gradient(&trace.probs, trace.label, cfg.loss);
    for l in (0..n - 1).rev() {
        let mut d = params.weights[l + 1].tr_mul(&deltas[l + 1]);
        for (i, on) in trace.masks[l].iter().enumerate() {
            if !on {
                d[i] = T::zero();
            }
        }
        deltas[l] = d;
    }
    deltas
}

/// Full gradient of the per-sample loss, one matrix per layer.
pub fn layer_gradients<T: Real>(
    trace: &ForwardTrace<T>,
    params: &MlpParams<T>,
    cfg: &MlpConfig,
) -> Vec<DMatrix<T>> {
    backprop_deltas(trace, params, cfg)
        .iter()
        .zip(&trace.activations)
        .map(|(d, a)| d * a.transpose())
        .collect()
}

/// `g_z`: gradient of the loss at the focal pre-activation.
pub fn focal_delta<T: Real>(
    trace: &ForwardTrace<T>,
    params: &MlpParams<T>,
    cfg: &MlpConfig,
) -> DVector<T> {
    backprop_deltas(trace, params, cfg).swap_remove(cfg.focal_layer)
}

/// Row-stacked `vec(g_z aᵀ)` for the focal block.
pub fn per_sample_gradient<T: Real>(
    trace: &ForwardTrace<T>,
    params: &MlpParams<T>,
    cfg: &MlpConfig,
) -> DVector<T> {
    let g = focal_delta(trace, params, cfg);
    let a = &trace.activations[cfg.focal_layer];
    kron_vec(&g, a)
}

/// Row-stacked `vec(x yᵀ)`, i.e. `x ⊗ y`.
pub fn kron_vec<T: Real>(x: &DVector<T>, y: &DVector<T>) -> DVector<T> {
    let n = y.len();
    DVector::from_fn(x.len() * n, |k, _| x[k / n] * y[k % n])
}

/// Hessian of the per-sample loss with respect to the logits.
pub fn logit_hessian<T: Real>(p: &DVector<T>, y: usize, kind: LossKind) -> Result<SymMatrix<T>> {
    let k = p.len();
    let tol = T::lit(1e-9);
    let total = pairwise_sum(p.as_slice());
    if k < 2
        || y >= k
        || p.iter().any(|v| !v.is_finite() || *v < -tol)
        || (total - T::one()).abs() > tol
    {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total} over {k} classes (label {y})"
        )));
    }
    let delta = |i: usize, j: usize| if i == j { T::one() } else { T::zero() };
    // 1 − p_i summed from the other entries: no cancellation when p_i ≈ 1
    let rest: Vec<T> = (0..k)
        .map(|i| {
            let others: Vec<T> = (0..k).filter(|&j| j != i).map(|j| p[j]).collect();
            pairwise_sum(&others)
        })
        .collect();
    // J_ki = ∂p_k/∂z_i = p_k(δ_ki − p_i)
    let jac = |kk: usize, i: usize| if kk == i { p[i] * rest[i] } else { -(p[kk] * p[i]) };
    Ok(match kind {
        LossKind::Ce => SymMatrix::from_fn(k, |i, j| jac(i, j)),
        LossKind::Mse => {
            let two_over_k = T::lit(2.0) / T::count(k);
            let r: Vec<T> = (0..k).map(|i| two_over_k * (p[i] - delta(i, y))).collect();
            SymMatrix::from_fn(k, |i, j| {
                let mut gauss = T::zero();
                let mut curv = T::zero();
                for kk in 0..k {
                    gauss += jac(kk, i) * jac(kk, j);
                    let s = p[kk]
                        * ((delta(kk, i) - p[i]) * (delta(kk, j) - p[j])
                            - p[i] * (delta(i, j) - p[j]));
                    curv += r[kk] * s;
                }
                two_over_k * gauss + curv
            })
        }
    })
}

/// `Π = ∂logits/∂z_focal`, a `K × d_out` matrix: `W_{L−1} D_{L−2} ⋯ W_{f+1} D_f`.
pub fn downstream_jacobian<T: Real>(
    trace: &ForwardTrace<T>,
    params: &MlpParams<T>,
    cfg: &MlpConfig,
) -> DMatrix<T> {
    let f = cfg.focal_layer;
    let n = cfg.n_layers();
    let d_out = cfg.layer_dims[f + 1];
    let mut pi = DMatrix::identity(d_out, d_out);
    for l in f + 1..n {
        // mask of the previous layer's output, then this layer's weights
        let mask = &trace.masks[l - 1];
        for (r, on) in mask.iter().enumerate() {
            if !on {
                pi.row_mut(r).fill(T::zero());
            }
        }
        pi = &params.weights[l] * pi;
    }
    pi
}

/// `H_z = Πᵀ H_logits Π` at the focal pre-activation.
pub fn downstream_hessian<T: Real>(
    trace: &ForwardTrace<T>,
    params: &MlpParams<T>,
    cfg: &MlpConfig,
) -> Result<SymMatrix<T>> {
    let hl = logit_hessian(&trace.probs, trace.label, cfg.loss)?;
    let pi = downstream_jacobian(trace, params, cfg);
    SymMatrix::symmetrize(pi.transpose() * hl.as_dense() * &pi)
}

/// Loss as a function of the focal pre-activation, downstream weights fixed.
pub fn loss_from_focal_pre<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    z: &DVector<T>,
    y: usize,
) -> T {
    let n = cfg.n_layers();
    let mut z = z.clone();
    for l in cfg.focal_layer + 1..n {
        let a = z.map(|v| if v > T::zero() { v } else { T::zero() });
        z = &params.weights[l] * a;
    }
    loss_value(&softmax(&z), y, cfg.loss)
}

/// `∂ℓ/∂z_focal` as a function of the focal pre-activation, downstream weights fixed.
pub fn focal_pre_gradient<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    z: &DVector<T>,
    y: usize,
) -> DVector<T> {
    let n = cfg.n_layers();
    let mut zs = vec![z.clone()];
    for l in cfg.focal_layer + 1..n {
        let a = zs.last().unwrap().map(|v| if v > T::zero() { v } else { T::zero() });
        zs.push(&params.weights[l] * a);
    }
    let mut g = logit_gradient(&softmax(zs.last().unwrap()), y, cfg.loss);
    for (k, l) in (cfg.focal_layer + 1..n).enumerate().rev() {
        g = params.weights[l].tr_mul(&g);
        for (i, v) in zs[k].iter().enumerate() {
            if *v <= T::zero() {
                g[i] = T::zero();
            }
        }
    }
    g
}

/// Per-sample focal Hessian `h_p = H_z ⊗ a aᵀ` with its nonzero eigen-structure.
#[derive(Clone, Debug)]
pub struct PerSampleHessian<T: Real> {
    pub sample: usize,
    /// Focal input activity.
    pub a: DVector<T>,
    pub a_norm2: T,
    pub hz: SymMatrix<T>,
    /// `κ_m = ‖a‖² λ_m(H_z)`, descending.
    pub kappa: DVector<T>,
    /// Columns `û_m`, the eigenvectors of `H_z`; `u_m = û_m ⊗ a/‖a‖`.
    pub local_vectors: DMatrix<T>,
}

impl<T: Real> PerSampleHessian<T> {
    pub fn from_factors(sample: usize, a: DVector<T>, hz: SymMatrix<T>) -> Result<Self> {
        let a_norm2 = a.norm_squared();
        if a_norm2 <= T::zero() || !a_norm2.is_finite() {
            return Err(Error::DegenerateActivity(sample));
        }
        let eig = sym_eig(&hz)?;
        Ok(Self {
            sample,
            kappa: eig.values * a_norm2,
            local_vectors: eig.vectors,
            a,
            a_norm2,
            hz,
        })
    }

    pub fn d_out(&self) -> usize {
        self.hz.dim()
    }

    pub fn d_in(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.d_out() * self.d_in()
    }

    /// `a/‖a‖`.
    pub fn a_unit(&self) -> DVector<T> {
        &self.a / self.a_norm2.sqrt()
    }

    /// Full-length eigenvector `u_m`.
    pub fn eigenvector(&self, m: usize) -> DVector<T> {
        kron_vec(&self.local_vectors.column(m).into_owned(), &self.a_unit())
    }

    pub fn kappa_max_abs(&self) -> T {
        self.kappa.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_psd(&self) -> bool {
        let floor = -T::lit(1e-10) * self.kappa_max_abs();
        self.kappa.iter().all(|k| *k >= floor)
    }

    /// The `D × D` matrix, for tests and small oracles.
    pub fn dense(&self) -> SymMatrix<T> {
        let n = self.d_in();
        SymMatrix::from_fn(self.dim(), |i, j| {
            self.hz.get(i / n, j / n) * self.a[i % n] * self.a[j % n]
        })
    }
}

/// Focal Hessian of the loss of one traced sample.
pub fn per_sample_hessian<T: Real>(
    trace: &ForwardTrace<T>,
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    sample: usize,
) -> Result<PerSampleHessian<T>> {
    let hz = downstream_hessian(trace, params, cfg)?;
    PerSampleHessian::from_factors(sample, trace.activations[cfg.focal_layer].clone(), hz)
}

/// `h_p · dw` through the factors: `vec(H_z ΔW a aᵀ)`.
pub fn hessian_action<T: Real>(h: &PerSampleHessian<T>, dw: &[T]) -> Result<DVector<T>> {
    if dw.len() != h.dim() {
        return Err(Error::ShapeError(format!(
            "vector of length {} for a {}-dim Hessian",
            dw.len(),
            h.dim()
        )));
    }
    let n = h.d_in();
    let s = DVector::from_fn(h.d_out(), |r, _| {
        dw[r * n..(r + 1) * n]
            .iter()
            .zip(h.a.iter())
            .fold(T::zero(), |acc, (w, a)| acc + *w * *a)
    });
    let t = h.hz.as_dense() * s;
    Ok(kron_vec(&t, &h.a))
}

/// Per-sample Hessians of the listed samples; samples with zero focal
/// activity are skipped and returned separately.
pub fn per_sample_hessians<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    data: &Dataset<T>,
    indices: &[usize],
) -> Result<(Vec<PerSampleHessian<T>>, Vec<usize>)> {
    let results: Vec<Result<PerSampleHessian<T>>> = indices
        .par_iter()
        .map(|&i| {
            let trace = forward(params, cfg, data.input(i), data.label(i))?;
            per_sample_hessian(&trace, params, cfg, i)
        })
        .collect();
    let mut kept = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(h) => kept.push(h),
            Err(Error::DegenerateActivity(i)) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    if !skipped.is_empty() {
        log::info!("{} samples with zero focal activity skipped", skipped.len());
    }
    Ok((kept, skipped))
}

/// Mean loss and accuracy over the whole dataset.
pub fn evaluate<T: Real>(params: &MlpParams<T>, cfg: &MlpConfig, data: &Dataset<T>) -> Result<(T, T)> {
    let out: Vec<(T, bool)> = (0..data.len())
        .into_par_iter()
        .map(|i| forward(params, cfg, data.input(i), data.label(i)).map(|t| (t.loss, t.correct())))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Ok((T::zero(), T::zero()));
    }
    let losses: Vec<T> = out.iter().map(|o| o.0).collect();
    let n = T::count(out.len());
    let correct = out.iter().filter(|o| o.1).count();
    Ok((pairwise_sum(&losses) / n, T::count(correct) / n))
}
