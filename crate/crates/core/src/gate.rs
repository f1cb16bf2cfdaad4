//! Candidate-conditioned gating of anchor context embeddings.
//!
//! When retrieving modality `t`, each scored tuple pairs one candidate
//! embedding `e_c` with the anchor's other modalities `e_m` (m != t). The
//! gate asks, per context modality, "does this candidate agree with that
//! signal?" and computes a weight `w in [0, 1]`:
//!
//! * attention mode: `w = act(<norm(Q e_c), norm(K_m e_m)> / temp)` where
//!   `act` is a sigmoid per modality or a softmax across modalities plus an
//!   optional NULL category ("trust nothing");
//! * matrix mode (ablation): `w = sigmoid(logit[m] / temp)`, a learned
//!   constant that cannot see the candidate;
//! * the sigmoid path can also multiply by `1 - p_null`, with
//!   `p_null = sigmoid((h e_c + u) / temp)` a candidate-wide abstain head.
//!
//! The context embedding is then pulled toward a neutral direction `n_m`:
//! with gate strength `alpha = sigmoid(alpha_raw)` the effective mix is
//!
//! ```text
//! beta = 1 - alpha + alpha * w          (in [1 - alpha, 1])
//! e_gated = beta * e_m + (1 - beta) * n_m,   then row renormalized.
//! ```
//!
//! The candidate's own modality always passes through unchanged; only
//! context rows are gated. Downweighting a context modality contracts the
//! score shift any corruption of it can cause by exactly `beta` (see
//! [`crate::mip::gated_bound`]).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamId, ParamSet};
use crate::tensor::{sigmoid_scalar, Graph, Tensor, Var};
use crate::NORM_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Attention,
    Matrix,
    /// No gate at all; the model skips construction entirely.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateType {
    Sigmoid,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeutralType {
    RandomTrainable,
    RandomFrozen,
    Ones,
    /// No neutral direction: gating only shrinks the embedding.
    Zero,
}

impl GateMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(GateMode::Attention),
            "matrix" => Ok(GateMode::Matrix),
            "none" => Ok(GateMode::Off),
            other => Err(Error::config(format!("unknown gate_mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GateMode::Attention => "attention",
            GateMode::Matrix => "matrix",
            GateMode::Off => "none",
        }
    }
}

impl GateType {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(GateType::Sigmoid),
            "softmax" => Ok(GateType::Softmax),
            other => Err(Error::config(format!("unknown gate_type '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GateType::Sigmoid => "sigmoid",
            GateType::Softmax => "softmax",
        }
    }
}

impl NeutralType {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random_trainable" => Ok(NeutralType::RandomTrainable),
            "random_frozen" => Ok(NeutralType::RandomFrozen),
            "ones" => Ok(NeutralType::Ones),
            "none" => Ok(NeutralType::Zero),
            other => Err(Error::config(format!("unknown neutral_type '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NeutralType::RandomTrainable => "random_trainable",
            NeutralType::RandomFrozen => "random_frozen",
            NeutralType::Ones => "ones",
            NeutralType::Zero => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateConfig {
    pub gate_mode: GateMode,
    pub gate_type: GateType,
    pub use_null: bool,
    pub neutral_type: NeutralType,
    pub renormalize: bool,
    pub gate_temp: f64,
    pub gate_strength_init: f64,
    pub gate_d_k: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            gate_mode: GateMode::Attention,
            gate_type: GateType::Sigmoid,
            use_null: true,
            neutral_type: NeutralType::RandomTrainable,
            renormalize: true,
            gate_temp: 0.5,
            gate_strength_init: 3.0,
            gate_d_k: 256,
        }
    }
}

/// `beta = 1 - alpha + alpha * w`: the fraction of the original context
/// embedding that survives gating (before renormalization).
pub fn compute_beta(alpha: f64, w: f64) -> f64 {
    1.0 - alpha + alpha * w
}

/// Graph-path gate outputs, keyed by context modality index. All row
/// vectors have one entry per scored tuple.
pub struct GateOutput {
    /// Gated context embeddings, `[R x D]` per modality.
    pub gated: Vec<(usize, Var)>,
    /// Mix before renormalization (equal to `gated` when renormalization is
    /// disabled).
    pub pre_renorm: Vec<(usize, Var)>,
    /// Effective weights after the null head, `[R]`.
    pub weights: Vec<(usize, Var)>,
    /// Weights before null scaling (softmax masses are already final).
    pub raw_weights: Vec<(usize, Var)>,
    /// Effective interpolation factor per modality, `[R]`.
    pub beta: Vec<(usize, Var)>,
    /// Abstain mass, `[R]`, when the null head is active.
    pub p_null: Option<Var>,
    /// Gate strength `sigmoid(alpha_raw)`, a one-element node.
    pub alpha: Var,
}

/// Value-path gate outputs for a single (candidate, anchor) pair.
#[derive(Clone, Debug)]
pub struct GateValueOutput {
    pub gated: Vec<(usize, Vec<f64>)>,
    pub pre_renorm: Vec<(usize, Vec<f64>)>,
    pub weights: Vec<(usize, f64)>,
    pub raw_weights: Vec<(usize, f64)>,
    pub beta: Vec<(usize, f64)>,
    pub p_null: Option<f64>,
    pub alpha: f64,
}

/// Per-candidate projections that do not depend on the anchor, computed
/// once when scoring a candidate against many anchors.
#[derive(Clone, Debug)]
pub struct CandidateProjection {
    /// Normalized query, empty in matrix mode.
    pub q: Vec<f64>,
    /// Temperature-scaled abstain logit, when the null head exists.
    pub null_logit: Option<f64>,
}

pub struct GateModule {
    pub cfg: GateConfig,
    pub target: usize,
    pub num_modalities: usize,
    pub embedding_dim: usize,
    q: Option<(ParamId, ParamId)>,
    keys: Vec<Option<(ParamId, ParamId)>>,
    null_head: Option<(ParamId, ParamId)>,
    neutral: Vec<Option<ParamId>>,
    alpha_raw: ParamId,
    matrix_logits: Option<ParamId>,
}

fn fan_in_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn random_unit_vector(rng: &mut impl Rng, d: usize) -> Tensor {
    let mut data: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = data.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    data.iter_mut().for_each(|x| *x /= norm);
    Tensor::new(vec![d], data).expect("shape matches data")
}

impl GateModule {
    /// Registers gate parameters in `set` (all named `gate.*` and carrying
    /// `lr_mult`) and returns the module. `seed` feeds the deterministic
    /// init streams.
    pub fn build(
        cfg: &GateConfig,
        target: usize,
        num_modalities: usize,
        embedding_dim: usize,
        set: &mut ParamSet,
        lr_mult: f64,
        seed: u64,
    ) -> Result<GateModule> {
        if cfg.gate_mode == GateMode::Off {
            return Err(Error::config("gate_mode 'none' builds no gate module"));
        }
        if num_modalities < 2 {
            return Err(Error::config(format!(
                "gate needs at least 2 modalities, got {num_modalities}"
            )));
        }
        if target >= num_modalities {
            return Err(Error::config(format!(
                "target modality {target} out of {num_modalities}"
            )));
        }
        if !(cfg.gate_temp.is_finite() && cfg.gate_temp > 0.0) {
            return Err(Error::config(format!("gate_temp must be positive, got {}", cfg.gate_temp)));
        }
        if cfg.gate_d_k == 0 {
            return Err(Error::config("gate_d_k must be positive"));
        }

        let d = embedding_dim;
        let dk = cfg.gate_d_k;
        let attention = cfg.gate_mode == GateMode::Attention;

        let q = if attention {
            let mut r = crate::rng::stream(seed, "init/gate/q", &[]);
            let w = set.add("gate.q.weight", fan_in_uniform(&mut r, d, dk), lr_mult, true)?;
            let b = set.add("gate.q.bias", Tensor::zeros(vec![dk]), lr_mult, true)?;
            Some((w, b))
        } else {
            None
        };

        let mut keys = vec![None; num_modalities];
        if attention {
            for m in 0..num_modalities {
                if m == target {
                    continue;
                }
                let mut r = crate::rng::stream(seed, "init/gate/k", &[m as u64]);
                let w = set.add(
                    format!("gate.k.{m}.weight"),
                    fan_in_uniform(&mut r, d, dk),
                    lr_mult,
                    true,
                )?;
                let b = set.add(format!("gate.k.{m}.bias"), Tensor::zeros(vec![dk]), lr_mult, true)?;
                keys[m] = Some((w, b));
            }
        }

        let null_head = if attention && cfg.use_null {
            let mut r = crate::rng::stream(seed, "init/gate/null", &[]);
            let w = set.add("gate.null.weight", fan_in_uniform(&mut r, d, 1), lr_mult, true)?;
            let b = set.add("gate.null.bias", Tensor::zeros(vec![1]), lr_mult, true)?;
            Some((w, b))
        } else {
            None
        };

        let mut neutral = vec![None; num_modalities];
        if cfg.neutral_type != NeutralType::Zero {
            for m in 0..num_modalities {
                if m == target {
                    continue;
                }
                let (value, trainable) = match cfg.neutral_type {
                    NeutralType::Ones => {
                        (Tensor::filled(vec![d], 1.0 / (d as f64).sqrt()), false)
                    }
                    NeutralType::RandomTrainable => {
                        let mut r = crate::rng::stream(seed, "init/gate/neutral", &[m as u64]);
                        (random_unit_vector(&mut r, d), true)
                    }
                    NeutralType::RandomFrozen => {
                        let mut r = crate::rng::stream(seed, "init/gate/neutral", &[m as u64]);
                        (random_unit_vector(&mut r, d), false)
                    }
                    NeutralType::Zero => unreachable!(),
                };
                neutral[m] = Some(set.add(format!("gate.neutral.{m}"), value, lr_mult, trainable)?);
            }
        }

        let alpha_raw = set.add(
            "gate.alpha_raw",
            Tensor::filled(vec![1], cfg.gate_strength_init),
            lr_mult,
            true,
        )?;

        let matrix_logits = if cfg.gate_mode == GateMode::Matrix {
            Some(set.add("gate.matrix_logits", Tensor::zeros(vec![num_modalities]), lr_mult, true)?)
        } else {
            None
        };

        Ok(GateModule {
            cfg: cfg.clone(),
            target,
            num_modalities,
            embedding_dim,
            q,
            keys,
            null_head,
            neutral,
            alpha_raw,
            matrix_logits,
        })
    }

    /// Gate strength as a plain value.
    pub fn alpha_value(&self, params: &ParamSet) -> f64 {
        sigmoid_scalar(params.value(self.alpha_raw).data()[0])
    }

    pub fn neutral_vector<'a>(&self, params: &'a ParamSet, m: usize) -> Option<&'a [f64]> {
        self.neutral.get(m).and_then(|id| id.map(|id| params.value(id).data()))
    }

    fn check_context(&self, context: &[usize]) -> Result<()> {
        let expected: Vec<usize> =
            (0..self.num_modalities).filter(|&m| m != self.target).collect();
        if context != expected.as_slice() {
            return Err(Error::dim(format!(
                "gate context must list modalities {expected:?} in order, got {context:?}"
            )));
        }
        Ok(())
    }

    // ── Graph path ───────────────────────────────────────────────────────

    /// Gates every context row against the candidate row it is paired
    /// with. `candidate_rows` is `[R x D]`; `context_rows` holds one
    /// `[R x D]` node per non-target modality, in ascending modality order.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        candidate_rows: Var,
        context_rows: &[(usize, Var)],
    ) -> Result<GateOutput> {
        let order: Vec<usize> = context_rows.iter().map(|&(m, _)| m).collect();
        self.check_context(&order)?;
        let shape = g.shape(candidate_rows).to_vec();
        if shape.len() != 2 || shape[1] != self.embedding_dim {
            return Err(Error::dim(format!(
                "candidate rows must be [R x {}], got {shape:?}",
                self.embedding_dim
            )));
        }
        let r = shape[0];
        for &(m, v) in context_rows {
            if g.shape(v) != shape.as_slice() {
                return Err(Error::dim(format!(
                    "context modality {m} has shape {:?}, expected {shape:?}",
                    g.shape(v)
                )));
            }
        }

        let alpha = g.sigmoid(binding.var(self.alpha_raw));

        let (weights, raw_weights, p_null) = match self.cfg.gate_mode {
            GateMode::Attention => {
                let (qw, qb) = self.q.expect("attention mode has query params");
                let q = g.linear(candidate_rows, binding.var(qw), binding.var(qb))?;
                let q = g.l2_normalize_rows(q, NORM_EPS)?;

                let mut scores = Vec::with_capacity(context_rows.len());
                for &(m, e) in context_rows {
                    let (kw, kb) = self.keys[m].expect("context modality has key params");
                    let k = g.linear(e, binding.var(kw), binding.var(kb))?;
                    let k = g.l2_normalize_rows(k, NORM_EPS)?;
                    let prod = g.mul(q, k)?;
                    let s = g.sum(prod, Some(1))?;
                    scores.push(g.scale(s, 1.0 / self.cfg.gate_temp));
                }

                let null_logit = match self.null_head {
                    Some((nw, nb)) => {
                        let z = g.linear(candidate_rows, binding.var(nw), binding.var(nb))?;
                        let z = g.reshape(z, vec![r])?;
                        Some(g.scale(z, 1.0 / self.cfg.gate_temp))
                    }
                    None => None,
                };

                match self.cfg.gate_type {
                    GateType::Sigmoid => {
                        let raw: Vec<Var> = scores.iter().map(|&s| g.sigmoid(s)).collect();
                        if let Some(zl) = null_logit {
                            let pn = g.sigmoid(zl);
                            let neg = g.scale(pn, -1.0);
                            let keep = g.add_scalar(neg, 1.0);
                            let mut eff = Vec::with_capacity(raw.len());
                            for &w in &raw {
                                eff.push(g.mul(w, keep)?);
                            }
                            (eff, raw, Some(pn))
                        } else {
                            (raw.clone(), raw, None)
                        }
                    }
                    GateType::Softmax => {
                        let mut cols = scores.clone();
                        if let Some(zl) = null_logit {
                            cols.push(zl);
                        }
                        let stacked = g.stack_cols(&cols)?;
                        let masses = g.softmax_rows(stacked)?;
                        let mut eff = Vec::with_capacity(scores.len());
                        for j in 0..scores.len() {
                            eff.push(g.col(masses, j)?);
                        }
                        let pn = match null_logit {
                            Some(_) => Some(g.col(masses, scores.len())?),
                            None => None,
                        };
                        (eff.clone(), eff, pn)
                    }
                }
            }
            GateMode::Matrix => {
                let ml = binding.var(self.matrix_logits.expect("matrix mode has logits"));
                let mut eff = Vec::with_capacity(context_rows.len());
                for &(m, _) in context_rows {
                    let logit = g.pick(ml, m)?;
                    let scaled = g.scale(logit, 1.0 / self.cfg.gate_temp);
                    let w = g.sigmoid(scaled);
                    eff.push(g.broadcast_scalar(w, r)?);
                }
                (eff.clone(), eff, None)
            }
            GateMode::Off => unreachable!("build rejects gate_mode none"),
        };

        let one_minus_alpha = {
            let na = g.scale(alpha, -1.0);
            g.add_scalar(na, 1.0)
        };
        let oma_rows = g.broadcast_scalar(one_minus_alpha, r)?;

        let mut gated = Vec::with_capacity(context_rows.len());
        let mut pre_renorm = Vec::with_capacity(context_rows.len());
        let mut beta_out = Vec::with_capacity(context_rows.len());
        for (idx, &(m, e)) in context_rows.iter().enumerate() {
            let alpha_w = g.mul_scalar(weights[idx], alpha)?;
            let beta = g.add(oma_rows, alpha_w)?;
            let pre = match self.neutral[m] {
                Some(nid) => {
                    let n_rows = g.tile_rows(binding.var(nid), r)?;
                    g.lerp(e, n_rows, beta)?
                }
                None => g.mul_col(e, beta)?,
            };
            let out = if self.cfg.renormalize { g.l2_normalize_rows(pre, NORM_EPS)? } else { pre };
            beta_out.push((m, beta));
            pre_renorm.push((m, pre));
            gated.push((m, out));
        }

        Ok(GateOutput {
            gated,
            pre_renorm,
            weights: order.iter().copied().zip(weights).collect(),
            raw_weights: order.iter().copied().zip(raw_weights).collect(),
            beta: beta_out,
            p_null,
            alpha,
        })
    }

    // ── Value path ───────────────────────────────────────────────────────

    /// Candidate-side projections, reusable across anchors.
    pub fn project_candidate(
        &self,
        params: &ParamSet,
        candidate: &[f64],
    ) -> Result<CandidateProjection> {
        if candidate.len() != self.embedding_dim {
            return Err(Error::dim(format!(
                "candidate has dimension {}, expected {}",
                candidate.len(),
                self.embedding_dim
            )));
        }
        if self.cfg.gate_mode == GateMode::Matrix {
            return Ok(CandidateProjection { q: Vec::new(), null_logit: None });
        }
        let (qw, qb) = self.q.expect("attention mode has query params");
        let mut q = linear_vec(
            candidate,
            params.value(qw).data(),
            params.value(qb).data(),
            self.cfg.gate_d_k,
        );
        normalize_vec(&mut q);
        let null_logit = self.null_head.map(|(nw, nb)| {
            let z = linear_vec(candidate, params.value(nw).data(), params.value(nb).data(), 1);
            z[0] / self.cfg.gate_temp
        });
        Ok(CandidateProjection { q, null_logit })
    }

    /// Key projection for one context modality.
    pub fn project_key(&self, params: &ParamSet, m: usize, embedding: &[f64]) -> Result<Vec<f64>> {
        if self.cfg.gate_mode == GateMode::Matrix {
            return Ok(Vec::new());
        }
        let (kw, kb) = self.keys.get(m).copied().flatten().ok_or_else(|| {
            Error::Index(format!("no gate key for modality {m} (target {})", self.target))
        })?;
        let mut k = linear_vec(
            embedding,
            params.value(kw).data(),
            params.value(kb).data(),
            self.cfg.gate_d_k,
        );
        normalize_vec(&mut k);
        Ok(k)
    }

    /// Gates one anchor's context against one projected candidate.
    /// `context` entries are `(modality, embedding, projected key)` in
    /// ascending modality order; keys may be empty in matrix mode.
    pub fn apply_projected(
        &self,
        params: &ParamSet,
        proj: &CandidateProjection,
        context: &[(usize, &[f64], &[f64])],
    ) -> Result<GateValueOutput> {
        let order: Vec<usize> = context.iter().map(|&(m, _, _)| m).collect();
        self.check_context(&order)?;
        for &(m, e, _) in context {
            if e.len() != self.embedding_dim {
                return Err(Error::dim(format!(
                    "context modality {m} has dimension {}, expected {}",
                    e.len(),
                    self.embedding_dim
                )));
            }
        }

        let alpha = self.alpha_value(params);

        let (weights, raw_weights, p_null) = match self.cfg.gate_mode {
            GateMode::Attention => {
                let scores: Vec<f64> = context
                    .iter()
                    .map(|&(_, _, k)| dot(&proj.q, k) / self.cfg.gate_temp)
                    .collect();
                match self.cfg.gate_type {
                    GateType::Sigmoid => {
                        let raw: Vec<f64> = scores.iter().map(|&s| sigmoid_scalar(s)).collect();
                        match proj.null_logit {
                            Some(zl) => {
                                let pn = sigmoid_scalar(zl);
                                let eff: Vec<f64> = raw.iter().map(|w| w * (1.0 - pn)).collect();
                                (eff, raw, Some(pn))
                            }
                            None => (raw.clone(), raw, None),
                        }
                    }
                    GateType::Softmax => {
                        let mut logits = scores.clone();
                        if let Some(zl) = proj.null_logit {
                            logits.push(zl);
                        }
                        let masses = softmax_vec(&logits);
                        let eff = masses[..scores.len()].to_vec();
                        let pn = proj.null_logit.map(|_| masses[scores.len()]);
                        (eff.clone(), eff, pn)
                    }
                }
            }
            GateMode::Matrix => {
                let logits = params.value(self.matrix_logits.expect("matrix mode")).data();
                let eff: Vec<f64> = context
                    .iter()
                    .map(|&(m, _, _)| sigmoid_scalar(logits[m] / self.cfg.gate_temp))
                    .collect();
                (eff.clone(), eff, None)
            }
            GateMode::Off => unreachable!("build rejects gate_mode none"),
        };

        let mut gated = Vec::with_capacity(context.len());
        let mut pre_renorm = Vec::with_capacity(context.len());
        let mut beta_out = Vec::with_capacity(context.len());
        for (idx, &(m, e, _)) in context.iter().enumerate() {
            let beta = compute_beta(alpha, weights[idx]);
            let pre: Vec<f64> = match self.neutral[m] {
                Some(nid) => {
                    let n = params.value(nid).data();
                    e.iter().zip(n).map(|(ej, nj)| beta * ej + (1.0 - beta) * nj).collect()
                }
                None => e.iter().map(|ej| beta * ej).collect(),
            };
            let out = if self.cfg.renormalize {
                let mut v = pre.clone();
                normalize_vec(&mut v);
                v
            } else {
                pre.clone()
            };
            beta_out.push((m, beta));
            pre_renorm.push((m, pre));
            gated.push((m, out));
        }

        Ok(GateValueOutput {
            gated,
            pre_renorm,
            weights: order.iter().copied().zip(weights).collect(),
            raw_weights: order.iter().copied().zip(raw_weights).collect(),
            beta: beta_out,
            p_null,
            alpha,
        })
    }

    /// One-shot convenience for a single pair: projects and gates.
    pub fn apply_to_pair(
        &self,
        params: &ParamSet,
        candidate: &[f64],
        context: &[(usize, &[f64])],
    ) -> Result<GateValueOutput> {
        let proj = self.project_candidate(params, candidate)?;
        let keys: Vec<Vec<f64>> = context
            .iter()
            .map(|&(m, e)| self.project_key(params, m, e))
            .collect::<Result<Vec<_>>>()?;
        let full: Vec<(usize, &[f64], &[f64])> = context
            .iter()
            .zip(&keys)
            .map(|(&(m, e), k)| (m, e, k.as_slice()))
            .collect();
        self.apply_projected(params, &proj, &full)
    }
}

fn linear_vec(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    debug_assert_eq!(y.len(), out);
    for (i, &xi) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xi * w[i * out + o];
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_vec(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= norm);
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}
