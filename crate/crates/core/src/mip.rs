//! Multilinear inner product scoring and its perturbation analysis.
//!
//! For M embeddings of dimension D the multilinear inner product is
//!
//! ```text
//! mip(e_1, ..., e_M) = sum_j  e_1[j] * e_2[j] * ... * e_M[j]
//! ```
//!
//! which reduces to the dot product at M = 2. Retrieval scores multiply the
//! MIP by a learned positive scale `s` and by `D^((M-1)/2)`, which keeps the
//! score variance at 1 for i.i.d. unit-norm coordinates regardless of D.
//!
//! Because the critic `g = mip / tau` is linear in each argument, corrupting
//! one candidate embedding `e_c` by `delta` shifts the score by exactly
//!
//! ```text
//! delta_g = (1/tau) * <a, delta>,   a[j] = e_t[j] * prod_{m != t, c} e_m[j]
//! ```
//!
//! with `a` the residual product vector. Cauchy-Schwarz then bounds the
//! shift by `(1/tau) * ||delta|| * ||a||`, attained exactly when `delta` is
//! parallel to `a`. A gate that contracts the corrupted modality toward a
//! neutral direction with interpolation factor `beta` passes only
//! `beta * delta` through, scaling both the exact shift and the bound by
//! `beta`. [`verify_bounds`] checks all of these identities on random
//! tuples.

use rand::Rng;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Graph, Var};

/// Dimensions of the scoring problem; the normalization scale is always
/// recomputed from these, never cached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MipConfig {
    pub embedding_dim: usize,
    pub num_modalities: usize,
}

impl MipConfig {
    pub fn new(embedding_dim: usize, num_modalities: usize) -> Result<Self> {
        if num_modalities < 2 {
            return Err(Error::config(format!(
                "num_modalities must be at least 2, got {num_modalities}"
            )));
        }
        if embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be positive"));
        }
        Ok(MipConfig { embedding_dim, num_modalities })
    }

    /// `D^((M-1)/2)`: unit-variance correction for D-dimensional scores.
    pub fn normalization_scale(&self) -> f64 {
        (self.embedding_dim as f64).powf((self.num_modalities - 1) as f64 / 2.0)
    }
}

fn check_tuple(embeddings: &[&[f64]]) -> Result<usize> {
    if embeddings.len() < 2 {
        return Err(Error::dim(format!("mip needs at least 2 embeddings, got {}", embeddings.len())));
    }
    let d = embeddings[0].len();
    for (m, e) in embeddings.iter().enumerate() {
        if e.len() != d {
            return Err(Error::dim(format!(
                "embedding {m} has dimension {}, expected {d}",
                e.len()
            )));
        }
    }
    Ok(d)
}

/// Multilinear inner product of M equal-length vectors.
pub fn mip(embeddings: &[&[f64]]) -> Result<f64> {
    let d = check_tuple(embeddings)?;
    let mut total = 0.0;
    for j in 0..d {
        let mut prod = 1.0;
        for e in embeddings {
            prod *= e[j];
        }
        total += prod;
    }
    Ok(total)
}

/// Residual product vector `a`: the coordinatewise product of all
/// embeddings except the corrupted one, i.e. the gradient of the MIP with
/// respect to `e_c`.
pub fn residual_product(
    embeddings: &[&[f64]],
    corrupted: usize,
) -> Result<Vec<f64>> {
    let d = check_tuple(embeddings)?;
    if corrupted >= embeddings.len() {
        return Err(Error::Index(format!(
            "corrupted modality {corrupted} out of {}",
            embeddings.len()
        )));
    }
    let mut a = vec![1.0; d];
    for (m, e) in embeddings.iter().enumerate() {
        if m == corrupted {
            continue;
        }
        for (aj, ej) in a.iter_mut().zip(*e) {
            *aj *= ej;
        }
    }
    Ok(a)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("tau must be a positive finite number, got {tau}")));
    }
    Ok(())
}

/// Closed-form score shift `(1/tau) * <a, delta>` when `e_c` is replaced by
/// `e_c + delta`.
pub fn score_delta_exact(
    embeddings: &[&[f64]],
    corrupted: usize,
    delta: &[f64],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    let a = residual_product(embeddings, corrupted)?;
    if delta.len() != a.len() {
        return Err(Error::dim(format!(
            "delta dimension {} vs embeddings {}",
            delta.len(),
            a.len()
        )));
    }
    Ok(a.iter().zip(delta).map(|(aj, dj)| aj * dj).sum::<f64>() / tau)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Upper bound `(1/tau) * ||delta|| * ||a||` on the absolute score shift.
pub fn cauchy_schwarz_bound(
    embeddings: &[&[f64]],
    corrupted: usize,
    delta: &[f64],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    let a = residual_product(embeddings, corrupted)?;
    if delta.len() != a.len() {
        return Err(Error::dim(format!(
            "delta dimension {} vs embeddings {}",
            delta.len(),
            a.len()
        )));
    }
    Ok(norm(delta) * norm(&a) / tau)
}

/// The perturbation of given norm that attains the Cauchy-Schwarz bound:
/// `delta = target_norm * a / ||a||`.
pub fn worst_case_delta(
    embeddings: &[&[f64]],
    corrupted: usize,
    target_norm: f64,
) -> Result<Vec<f64>> {
    let mut a = residual_product(embeddings, corrupted)?;
    let n = norm(&a);
    if n == 0.0 {
        return Err(Error::numeric("residual product is zero; every delta is score-neutral"));
    }
    a.iter_mut().for_each(|v| *v *= target_norm / n);
    Ok(a)
}

/// Bound on the gated score shift: the gate passes `beta * delta` through,
/// so the shift obeys `(beta/tau) * ||delta|| * ||a_gated||` where
/// `a_gated` is the residual product of the gated embeddings.
pub fn gated_bound(
    gated_embeddings: &[&[f64]],
    corrupted: usize,
    delta: &[f64],
    beta: f64,
    tau: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(beta * cauchy_schwarz_bound(gated_embeddings, corrupted, delta, tau)?)
}

// ── Graph scoring ─────────────────────────────────────────────────────────

/// Differentiable per-row scores `s * D^((M-1)/2) * mip(rows)`.
///
/// `candidate_rows` and every entry of `other_rows` are `[R x D]`; row `r`
/// of each is one scored tuple. `scale` is a one-element node holding the
/// positive logit scale `s` (gradients flow into it).
pub fn normalized_scores(
    g: &mut Graph,
    candidate_rows: Var,
    other_rows: &[Var],
    cfg: &MipConfig,
    scale: Var,
) -> Result<Var> {
    if other_rows.len() + 1 != cfg.num_modalities {
        return Err(Error::dim(format!(
            "{} other modalities for M = {}",
            other_rows.len(),
            cfg.num_modalities
        )));
    }
    let mut prod = candidate_rows;
    for &o in other_rows {
        prod = g.mul(prod, o)?;
    }
    let raw = g.sum(prod, Some(1))?;
    let scaled = g.mul_scalar(raw, scale)?;
    Ok(g.scale(scaled, cfg.normalization_scale()))
}

/// Value-path counterpart of [`normalized_scores`] for one tuple.
pub fn normalized_score_value(embeddings: &[&[f64]], cfg: &MipConfig, s: f64) -> Result<f64> {
    if embeddings.len() != cfg.num_modalities {
        return Err(Error::dim(format!(
            "{} embeddings for M = {}",
            embeddings.len(),
            cfg.num_modalities
        )));
    }
    Ok(s * cfg.normalization_scale() * mip(embeddings)?)
}

// ── Monte-Carlo verification ──────────────────────────────────────────────

/// Outcome of [`verify_bounds`]. Relative errors are measured against
/// `max(|exact|, |reference|, bound)` so that near-orthogonal draws, where
/// the shift itself is microscopic, do not inflate the ratio past float
/// noise.
#[derive(Clone, Debug)]
pub struct BoundCheckReport {
    pub trials: usize,
    /// Worst relative gap between the closed-form shift and the difference
    /// of two explicit MIP evaluations.
    pub max_identity_rel_err: f64,
    /// Trials where |exact shift| exceeded the Cauchy-Schwarz bound.
    pub bound_violations: usize,
    /// Worst shortfall `1 - |shift| / bound` for perturbations aligned with
    /// the residual product (tightness: should be ~0).
    pub max_aligned_gap: f64,
    /// Worst relative error of gated-shift linearity in beta.
    pub max_beta_linearity_err: f64,
    /// Worst relative gap between the exact gated shift and
    /// `beta * closed-form shift` over the gated embeddings.
    pub max_gated_identity_rel_err: f64,
    /// Trials where the gated shift exceeded the gated bound.
    pub gated_bound_violations: usize,
}

/// Acceptance thresholds for [`BoundCheckReport::passed`], public so
/// report printers can annotate each line consistently.
pub const IDENTITY_TOL: f64 = 1e-10;
pub const ALIGNED_GAP_TOL: f64 = 1e-9;
pub const BETA_LINEARITY_TOL: f64 = 1e-8;
pub const GATED_IDENTITY_TOL: f64 = 1e-8;

impl BoundCheckReport {
    pub fn passed(&self) -> bool {
        self.max_identity_rel_err <= IDENTITY_TOL
            && self.bound_violations == 0
            && self.max_aligned_gap <= ALIGNED_GAP_TOL
            && self.max_beta_linearity_err <= BETA_LINEARITY_TOL
            && self.max_gated_identity_rel_err <= GATED_IDENTITY_TOL
            && self.gated_bound_violations == 0
    }
}

struct TrialOutcome {
    identity_rel_err: f64,
    bound_violated: bool,
    aligned_gap: f64,
    beta_linearity_err: f64,
    gated_identity_rel_err: f64,
    gated_bound_violated: bool,
}

fn run_trial(seed: u64, trial: u64) -> TrialOutcome {
    let mut rng = crate::rng::stream(seed, "bound-trial", &[trial]);
    let d = rng.gen_range(2..=64usize);
    let m = 3usize;
    let tau = rng.gen_range(0.05..2.0);

    let embeddings: Vec<Vec<f64>> =
        (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let refs: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
    let corrupted = rng.gen_range(0..m);
    let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // Identity: closed form vs two explicit MIP evaluations.
    let exact = score_delta_exact(&refs, corrupted, &delta, tau).unwrap();
    let mut perturbed = embeddings.clone();
    for (p, dl) in perturbed[corrupted].iter_mut().zip(&delta) {
        *p += dl;
    }
    let prefs: Vec<&[f64]> = perturbed.iter().map(|e| e.as_slice()).collect();
    let brute = (mip(&prefs).unwrap() - mip(&refs).unwrap()) / tau;
    let bound = cauchy_schwarz_bound(&refs, corrupted, &delta, tau).unwrap();
    let denom = exact.abs().max(brute.abs()).max(bound).max(1e-30);
    let identity_rel_err = (exact - brute).abs() / denom;

    let bound_violated = exact.abs() > bound * (1.0 + 1e-12) + 1e-12;

    // Tightness when delta is parallel to the residual product.
    let aligned_gap = match worst_case_delta(&refs, corrupted, norm(&delta)) {
        Ok(aligned) => {
            let shift = score_delta_exact(&refs, corrupted, &aligned, tau).unwrap();
            let b = cauchy_schwarz_bound(&refs, corrupted, &aligned, tau).unwrap();
            if b > 0.0 {
                (1.0 - shift.abs() / b).max(0.0)
            } else {
                0.0
            }
        }
        Err(_) => 0.0, // zero residual product: bound is 0 = shift
    };

    // Gated embeddings: contract each modality toward a neutral direction.
    let betas: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    let gated: Vec<Vec<f64>> = embeddings
        .iter()
        .enumerate()
        .map(|(mi, e)| {
            let n: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            e.iter().zip(&n).map(|(ej, nj)| betas[mi] * ej + (1.0 - betas[mi]) * nj).collect()
        })
        .collect();
    let grefs: Vec<&[f64]> = gated.iter().map(|e| e.as_slice()).collect();
    let beta_c = betas[corrupted];

    // Exact gated shift: the candidate sees beta_c * delta.
    let gated_exact = score_delta_exact(&grefs, corrupted, &delta, tau).unwrap() * beta_c;
    let mut gated_pert = gated.clone();
    for (p, dl) in gated_pert[corrupted].iter_mut().zip(&delta) {
        *p += beta_c * dl;
    }
    let gprefs: Vec<&[f64]> = gated_pert.iter().map(|e| e.as_slice()).collect();
    let gated_brute = (mip(&gprefs).unwrap() - mip(&grefs).unwrap()) / tau;
    let gbound = gated_bound(&grefs, corrupted, &delta, beta_c, tau).unwrap();
    let gdenom = gated_exact.abs().max(gated_brute.abs()).max(gbound).max(1e-30);
    let gated_identity_rel_err = (gated_exact - gated_brute).abs() / gdenom;
    let gated_bound_violated = gated_brute.abs() > gbound * (1.0 + 1e-12) + 1e-12;

    // Linearity in beta: shift(beta) = beta * shift(1).
    let base = score_delta_exact(&grefs, corrupted, &delta, tau).unwrap();
    let mut beta_linearity_err: f64 = 0.0;
    for &b in &[0.0, 0.25, 0.5, 1.0] {
        let scaled_delta: Vec<f64> = delta.iter().map(|x| x * b).collect();
        let shift = score_delta_exact(&grefs, corrupted, &scaled_delta, tau).unwrap();
        let expect = b * base;
        let err = (shift - expect).abs() / expect.abs().max(gbound).max(1e-30);
        beta_linearity_err = beta_linearity_err.max(err);
    }

    TrialOutcome {
        identity_rel_err,
        bound_violated,
        aligned_gap,
        beta_linearity_err,
        gated_identity_rel_err,
        gated_bound_violated,
    }
}

/// Checks the perturbation identities on `trials` random tuples (M = 3,
/// D drawn up to 64, entries in [-1, 1]).
pub fn verify_bounds(trials: usize, seed: u64) -> Result<BoundCheckReport> {
    if trials == 0 {
        return Err(Error::config("verify_bounds: trials must be positive"));
    }
    let outcomes = parallel::par_map_range(trials, |t| run_trial(seed, t as u64));
    let mut report = BoundCheckReport {
        trials,
        max_identity_rel_err: 0.0,
        bound_violations: 0,
        max_aligned_gap: 0.0,
        max_beta_linearity_err: 0.0,
        max_gated_identity_rel_err: 0.0,
        gated_bound_violations: 0,
    };
    for o in outcomes {
        report.max_identity_rel_err = report.max_identity_rel_err.max(o.identity_rel_err);
        report.bound_violations += o.bound_violated as usize;
        report.max_aligned_gap = report.max_aligned_gap.max(o.aligned_gap);
        report.max_beta_linearity_err =
            report.max_beta_linearity_err.max(o.beta_linearity_err);
        report.max_gated_identity_rel_err =
            report.max_gated_identity_rel_err.max(o.gated_identity_rel_err);
        report.gated_bound_violations += o.gated_bound_violated as usize;
    }
    Ok(report)
}
