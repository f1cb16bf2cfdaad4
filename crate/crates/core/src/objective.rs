//! Negative sampling and the contrastive losses.
//!
//! Training scores each anchor against `K + 1` candidates in the target
//! modality: the true positive plus negatives drawn either uniformly from
//! the candidate pool (`pair` sampling, holding the other modalities fixed)
//! or from the rest of the batch (`n` sampling). Scores are
//! `exp(gamma) * D^((M-1)/2) * mip(candidate, context...)`, optionally with
//! the gate rewriting the context per candidate, and the loss is softmax
//! cross entropy against the positive's position, averaged over anchors.
//!
//! The CLIP baseline instead sums symmetric in-batch InfoNCE terms between
//! the target modality and each context modality, and ranks candidates at
//! retrieval time by the sum of pairwise dot products.

use rand::Rng;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gate::{GateModule, GateOutput};
use crate::mip::{self, MipConfig};
use crate::params::ParamBinding;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Clip,
    Symile,
    GatedSymile,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Method::Clip),
            "symile" => Ok(Method::Symile),
            "gated_symile" => Ok(Method::GatedSymile),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Clip => "clip",
            Method::Symile => "symile",
            Method::GatedSymile => "gated_symile",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Pair,
    N,
}

impl SamplingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(SamplingMode::Pair),
            "n" => Ok(SamplingMode::N),
            other => Err(Error::config(format!("unknown negative_sampling '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingMode::Pair => "pair",
            SamplingMode::N => "n",
        }
    }
}

/// How negatives are drawn and how many, shared by training and the
/// sampled-pool evaluator.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveConfig {
    pub sampling: SamplingMode,
    pub num_negatives: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { sampling: SamplingMode::Pair, num_negatives: 128 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::config("num_negatives must be at least 1"));
        }
        Ok(())
    }
}

/// The candidate list scored for one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub anchor_index: usize,
    /// Indices into the target-modality pool; `K + 1` entries.
    pub candidate_indices: Vec<usize>,
    /// Position of the true positive inside `candidate_indices`.
    pub positive_position: usize,
}

/// Uniform negatives without replacement, positive at a random slot.
/// `anchors` are pool positions; each anchor's positive is itself.
pub fn sample_pair_candidates(
    anchors: &[usize],
    pool_size: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CandidateSet>> {
    if k == 0 {
        return Err(Error::config("pair sampling needs at least 1 negative"));
    }
    if pool_size <= k {
        return Err(Error::config(format!(
            "candidate pool of {pool_size} cannot supply {k} distinct negatives"
        )));
    }
    let mut out = Vec::with_capacity(anchors.len());
    for &a in anchors {
        if a >= pool_size {
            return Err(Error::Index(format!("anchor {a} outside pool of {pool_size}")));
        }
        let mut chosen = Vec::with_capacity(k + 1);
        let mut taken: Vec<usize> = Vec::with_capacity(k);
        while taken.len() < k {
            let cand = rng.gen_range(0..pool_size);
            if cand != a && !taken.contains(&cand) {
                taken.push(cand);
            }
        }
        let positive_position = rng.gen_range(0..=k);
        for (slot, &neg) in taken.iter().enumerate() {
            if slot == positive_position {
                chosen.push(a);
            }
            chosen.push(neg);
        }
        if chosen.len() == k {
            chosen.push(a);
        }
        out.push(CandidateSet {
            anchor_index: a,
            candidate_indices: chosen,
            positive_position,
        });
    }
    Ok(out)
}

/// In-batch candidates: every anchor scores all `B` batch targets, with
/// its own row as the positive. No randomness is involved.
pub fn sample_n_candidates(batch_size: usize) -> Result<Vec<CandidateSet>> {
    if batch_size < 2 {
        return Err(Error::config("n sampling needs a batch of at least 2"));
    }
    Ok((0..batch_size)
        .map(|row| CandidateSet {
            anchor_index: row,
            candidate_indices: (0..batch_size).collect(),
            positive_position: row,
        })
        .collect())
}

/// Deduplicates the pool indices referenced by `sets`, returning the
/// unique indices (in first-appearance order) and sets rewritten against
/// the compacted pool. Lets a caller encode only the rows a batch needs.
pub fn remap_candidates(sets: &[CandidateSet]) -> (Vec<usize>, Vec<CandidateSet>) {
    let mut unique = Vec::new();
    let mut position: HashMap<usize, usize> = HashMap::new();
    let remapped = sets
        .iter()
        .map(|s| CandidateSet {
            anchor_index: s.anchor_index,
            positive_position: s.positive_position,
            candidate_indices: s
                .candidate_indices
                .iter()
                .map(|&i| {
                    *position.entry(i).or_insert_with(|| {
                        unique.push(i);
                        unique.len() - 1
                    })
                })
                .collect(),
        })
        .collect();
    (unique, remapped)
}

fn check_sets(sets: &[CandidateSet], pool_rows: usize) -> Result<usize> {
    if sets.is_empty() {
        return Err(Error::dim("no candidate sets"));
    }
    let width = sets[0].candidate_indices.len();
    for (b, s) in sets.iter().enumerate() {
        if s.candidate_indices.len() != width {
            return Err(Error::dim(format!(
                "anchor {b} has {} candidates, expected {width}",
                s.candidate_indices.len()
            )));
        }
        if s.positive_position >= width {
            return Err(Error::Index(format!(
                "anchor {b}: positive position {} out of {width}",
                s.positive_position
            )));
        }
        if let Some(&bad) = s.candidate_indices.iter().find(|&&i| i >= pool_rows) {
            return Err(Error::Index(format!("anchor {b}: pool index {bad} out of {pool_rows}")));
        }
    }
    Ok(width)
}

/// MIP objective outputs: the mean cross entropy, the per-anchor score
/// matrix `[B x (K+1)]`, and the gate trace when a gate ran.
pub struct SymileLossOutput {
    pub loss: Var,
    pub scores: Var,
    pub gate: Option<GateOutput>,
}

/// Cross entropy of gated or ungated MIP scores for a batch of anchors.
///
/// `context` holds the anchors' non-target embeddings (`[B x D]` per
/// modality, ascending modality order), `pool` the candidate embeddings
/// `[P x D]`, and `logit_scale` the gamma leaf (scores use `exp(gamma)`).
pub fn symile_loss(
    g: &mut Graph,
    context: &[(usize, Var)],
    pool: Var,
    sets: &[CandidateSet],
    logit_scale: Var,
    mip_cfg: &MipConfig,
    gate: Option<(&GateModule, &ParamBinding)>,
) -> Result<SymileLossOutput> {
    let (pool_rows, d) = {
        let s = g.shape(pool);
        if s.len() != 2 {
            return Err(Error::dim(format!("pool must be [P x D], got {s:?}")));
        }
        (s[0], s[1])
    };
    if d != mip_cfg.embedding_dim {
        return Err(Error::dim(format!(
            "pool dimension {d} vs configured embedding_dim {}",
            mip_cfg.embedding_dim
        )));
    }
    if context.len() + 1 != mip_cfg.num_modalities {
        return Err(Error::dim(format!(
            "{} context modalities for M = {}",
            context.len(),
            mip_cfg.num_modalities
        )));
    }
    let b = sets.len();
    let width = check_sets(sets, pool_rows)?;

    let mut grid_candidates = Vec::with_capacity(b * width);
    let mut grid_anchor_rows = Vec::with_capacity(b * width);
    let mut targets = Vec::with_capacity(b);
    for (row, s) in sets.iter().enumerate() {
        grid_candidates.extend_from_slice(&s.candidate_indices);
        grid_anchor_rows.extend(std::iter::repeat(row).take(width));
        targets.push(s.positive_position);
    }

    let candidate_rows = g.gather_rows(pool, &grid_candidates)?;
    let context_rows: Vec<(usize, Var)> = context
        .iter()
        .map(|&(m, e)| Ok((m, g.gather_rows(e, &grid_anchor_rows)?)))
        .collect::<Result<Vec<_>>>()?;

    let (scored_context, gate_out) = match gate {
        Some((module, binding)) => {
            let out = module.forward(g, binding, candidate_rows, &context_rows)?;
            (out.gated.clone(), Some(out))
        }
        None => (context_rows, None),
    };

    let scale = g.exp(logit_scale);
    let others: Vec<Var> = scored_context.iter().map(|&(_, v)| v).collect();
    let flat = mip::normalized_scores(g, candidate_rows, &others, mip_cfg, scale)?;
    let scores = g.reshape(flat, vec![b, width])?;
    let loss = g.log_softmax_cross_entropy(scores, &targets)?;
    Ok(SymileLossOutput { loss, scores, gate: gate_out })
}

/// Sum over context modalities of symmetric in-batch InfoNCE between the
/// target embeddings and that modality, all scaled by `exp(gamma)`.
pub fn clip_loss(
    g: &mut Graph,
    target: Var,
    context: &[(usize, Var)],
    logit_scale: Var,
) -> Result<Var> {
    let shape = g.shape(target).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("target batch must be [B x D], got {shape:?}")));
    }
    if context.is_empty() {
        return Err(Error::dim("clip loss needs at least one context modality"));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::config("in-batch contrastive loss needs a batch of at least 2"));
    }
    let diag: Vec<usize> = (0..b).collect();
    let scale = g.exp(logit_scale);

    let mut total = None;
    for &(m, e) in context {
        if g.shape(e) != shape.as_slice() {
            return Err(Error::dim(format!(
                "context modality {m} has shape {:?}, expected {shape:?}",
                g.shape(e)
            )));
        }
        let sims = g.matmul_nt(target, e)?;
        let logits = g.mul_scalar(sims, scale)?;
        let forward = g.log_softmax_cross_entropy(logits, &diag)?;
        let transposed = g.transpose(logits)?;
        let backward = g.log_softmax_cross_entropy(transposed, &diag)?;
        let pair = g.add(forward, backward)?;
        total = Some(match total {
            Some(t) => g.add(t, pair)?,
            None => pair,
        });
    }
    Ok(total.expect("context checked non-empty"))
}

/// Retrieval score of one candidate under the CLIP baseline: the sum of
/// its dot products with the anchor's context embeddings.
pub fn clip_retrieval_score(candidate: &[f64], context: &[&[f64]]) -> f64 {
    context
        .iter()
        .map(|e| candidate.iter().zip(*e).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}
