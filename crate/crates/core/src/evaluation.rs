//! Retrieval metrics, gate diagnostics, and the experiment sweep drivers.
//!
//! Evaluation never builds graphs: it encodes a split once per modality,
//! then scores candidates with the gradient-free value paths. Candidate
//! pools are either the whole split or per-query sampled sets drawn from
//! fixed substreams of the evaluation seed, so every number here is a pure
//! function of (params, data, seed).

use rand::Rng;

use crate::config::{ExperimentConfig, KMode};
use crate::error::{Error, Result};
use crate::mip;
use crate::model::Model;
use crate::objective::{self, Method};
use crate::parallel;
use crate::rng;
use crate::synthetic_xnor::{Dataset, Misalignment};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Every split row is a candidate for every query.
    Full,
    /// Per query: the positive plus this many sampled negatives.
    Sampled(usize),
}

impl PoolMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolMode::Full => "full",
            PoolMode::Sampled(_) => "sampled",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalReport {
    pub method: Method,
    pub top1_accuracy: f64,
    pub num_queries: usize,
    pub candidate_pool_size: usize,
    pub pool: PoolMode,
}

/// One split's embeddings for all modalities, row-aligned with `indices`.
pub struct EmbeddedSplit {
    pub indices: Vec<usize>,
    pub dim: usize,
    emb: Vec<Vec<f64>>,
}

impl EmbeddedSplit {
    pub fn row(&self, modality: usize, i: usize) -> &[f64] {
        &self.emb[modality][i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn embed_split(model: &Model, data: &Dataset, indices: &[usize]) -> Result<EmbeddedSplit> {
    let emb = (0..model.config.num_modalities)
        .map(|m| {
            let batch = model.encode_values(m, &data.gather(m, indices), indices.len())?;
            Ok(batch.values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddedSplit { indices: indices.to_vec(), dim: model.embedding_dim(), emb })
}

/// Scores one query's candidate list; returns the winning pool row, or
/// `None` when the maximum is tied (ties count as retrieval failures).
fn best_candidate(
    model: &Model,
    split: &EmbeddedSplit,
    context: &[(usize, &[f64])],
    keys: &[Vec<f64>],
    candidates: &[usize],
) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for &c in candidates {
        let cand = split.row(model.config.target_modality, c);
        let score = match (&model.gate, model.config.method) {
            (_, Method::Clip) => {
                let ctx: Vec<&[f64]> = context.iter().map(|&(_, e)| e).collect();
                objective::clip_retrieval_score(cand, &ctx)
            }
            (Some(gate), _) => {
                let proj = gate.project_candidate(&model.params, cand)?;
                let full: Vec<(usize, &[f64], &[f64])> = context
                    .iter()
                    .zip(keys)
                    .map(|(&(m, e), k)| (m, e, k.as_slice()))
                    .collect();
                let out = gate.apply_projected(&model.params, &proj, &full)?;
                let mut rows: Vec<&[f64]> = vec![cand];
                rows.extend(out.gated.iter().map(|(_, e)| e.as_slice()));
                mip::mip(&rows)?
            }
            (None, _) => {
                let mut rows: Vec<&[f64]> = vec![cand];
                rows.extend(context.iter().map(|&(_, e)| e));
                mip::mip(&rows)?
            }
        };
        match best {
            None => best = Some((c, score)),
            Some((_, s)) if score > s => {
                best = Some((c, score));
                tied = false;
            }
            Some((_, s)) if score == s => tied = true,
            _ => {}
        }
    }
    Ok(if tied { None } else { best.map(|(c, _)| c) })
}

/// Top-1 retrieval accuracy of `model` over the given split rows.
///
/// Sampled pools draw per-query negatives from `eval_seed` substreams
/// keyed by query position, so repeated calls see identical pools.
pub fn top1_retrieval(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    pool: PoolMode,
    eval_seed: u64,
) -> Result<RetrievalReport> {
    if indices.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    let n = indices.len();
    if let PoolMode::Sampled(k) = pool {
        if k == 0 {
            return Err(Error::config("sampled pool needs at least 1 negative"));
        }
        if k >= n {
            return Err(Error::config(format!(
                "sampled pool of {k} negatives needs a split larger than {k}"
            )));
        }
    }
    let split = embed_split(model, data, indices)?;
    let target = model.config.target_modality;
    let others: Vec<usize> =
        (0..model.config.num_modalities).filter(|&m| m != target).collect();

    let correct_flags = parallel::par_map_range(n, |qi| -> Result<bool> {
        let context: Vec<(usize, &[f64])> =
            others.iter().map(|&m| (m, split.row(m, qi))).collect();
        let keys: Vec<Vec<f64>> = match &model.gate {
            Some(gate) => context
                .iter()
                .map(|&(m, e)| gate.project_key(&model.params, m, e))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let candidates: Vec<usize> = match pool {
            PoolMode::Full => (0..n).collect(),
            PoolMode::Sampled(k) => {
                let mut r = rng::stream(eval_seed, "eval-pool", &[qi as u64]);
                let mut negs: Vec<usize> = Vec::with_capacity(k);
                while negs.len() < k {
                    let c = r.gen_range(0..n);
                    if c != qi && !negs.contains(&c) {
                        negs.push(c);
                    }
                }
                let at = r.gen_range(0..=k);
                negs.insert(at, qi);
                negs
            }
        };
        Ok(best_candidate(model, &split, &context, &keys, &candidates)? == Some(qi))
    });

    let mut correct = 0usize;
    for flag in correct_flags {
        if flag? {
            correct += 1;
        }
    }
    let pool_size = match pool {
        PoolMode::Full => n,
        PoolMode::Sampled(k) => k + 1,
    };
    Ok(RetrievalReport {
        method: model.config.method,
        top1_accuracy: correct as f64 / n as f64,
        num_queries: n,
        candidate_pool_size: pool_size,
        pool,
    })
}

/// Mean and standard error of the per-sample gate-weight difference
/// between the two non-target modalities, conditioned on which modality
/// the dataset actually corrupted.
#[derive(Clone, Debug)]
pub struct WeightDeltaBin {
    pub misaligned_modality: usize,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Cosine statistics restricted to one alignment condition.
#[derive(Clone, Debug)]
pub struct CondCosStats {
    pub mean_cos_original: f64,
    pub mean_cos_neutral: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct ModalityStats {
    pub modality: usize,
    pub mean_weight: f64,
    pub mean_raw_weight: f64,
    pub mean_cos_gated_original: f64,
    /// Absent when the gate has no neutral vector (shrink-only mode).
    pub mean_cos_gated_neutral: Option<f64>,
    /// Same cosines over only the rows where THIS modality was corrupted;
    /// `None` when no such rows exist in the split (e.g. p = 0).
    pub when_misaligned: Option<CondCosStats>,
    /// Complement rows (this modality intact, any other may be corrupted).
    pub when_aligned: Option<CondCosStats>,
}

#[derive(Clone, Debug)]
pub struct GateDiagnostics {
    pub per_modality: Vec<ModalityStats>,
    pub weight_deltas: Vec<WeightDeltaBin>,
    pub mean_p_null: Option<f64>,
    pub alpha: f64,
    pub num_samples: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(crate::NORM_EPS)
}

/// Runs the gate over positive tuples of the split and aggregates weight
/// and embedding-edit statistics.
pub fn gate_diagnostics(model: &Model, data: &Dataset, indices: &[usize]) -> Result<GateDiagnostics> {
    let gate = model
        .gate
        .as_ref()
        .ok_or_else(|| Error::config("gate diagnostics need a gated model"))?;
    if indices.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    let split = embed_split(model, data, indices)?;
    let n = indices.len();
    let target = model.config.target_modality;
    let others: Vec<usize> =
        (0..model.config.num_modalities).filter(|&m| m != target).collect();

    struct SampleTrace {
        weights: Vec<f64>,
        raw_weights: Vec<f64>,
        cos_original: Vec<f64>,
        cos_neutral: Vec<Option<f64>>,
        p_null: Option<f64>,
    }

    let traces = parallel::par_map_range(n, |qi| -> Result<SampleTrace> {
        let cand = split.row(target, qi);
        let context: Vec<(usize, &[f64])> =
            others.iter().map(|&m| (m, split.row(m, qi))).collect();
        let out = gate.apply_to_pair(&model.params, cand, &context)?;
        let cos_original = context
            .iter()
            .zip(&out.gated)
            .map(|(&(_, e), (_, ge))| cosine(ge, e))
            .collect();
        let cos_neutral = out
            .gated
            .iter()
            .map(|(m, ge)| gate.neutral_vector(&model.params, *m).map(|nv| cosine(ge, nv)))
            .collect();
        Ok(SampleTrace {
            weights: out.weights.iter().map(|&(_, w)| w).collect(),
            raw_weights: out.raw_weights.iter().map(|&(_, w)| w).collect(),
            cos_original,
            cos_neutral,
            p_null: out.p_null,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let per_modality = others
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let mean = |f: &dyn Fn(&SampleTrace) -> f64| {
                traces.iter().map(|t| f(t)).sum::<f64>() / n as f64
            };
            let neutral_present = traces[0].cos_neutral[j].is_some();
            let cond = |corrupted: bool| -> Option<CondCosStats> {
                let rows: Vec<&SampleTrace> = indices
                    .iter()
                    .zip(&traces)
                    .filter(|&(&row, _)| (data.misaligned[row].modality() == Some(m)) == corrupted)
                    .map(|(_, t)| t)
                    .collect();
                let c = rows.len();
                if c == 0 {
                    return None;
                }
                Some(CondCosStats {
                    mean_cos_original: rows.iter().map(|t| t.cos_original[j]).sum::<f64>()
                        / c as f64,
                    mean_cos_neutral: neutral_present.then(|| {
                        rows.iter().map(|t| t.cos_neutral[j].unwrap()).sum::<f64>() / c as f64
                    }),
                    count: c,
                })
            };
            ModalityStats {
                modality: m,
                mean_weight: mean(&|t| t.weights[j]),
                mean_raw_weight: mean(&|t| t.raw_weights[j]),
                mean_cos_gated_original: mean(&|t| t.cos_original[j]),
                mean_cos_gated_neutral: neutral_present
                    .then(|| mean(&|t| t.cos_neutral[j].unwrap())),
                when_misaligned: cond(true),
                when_aligned: cond(false),
            }
        })
        .collect();

    // w(first non-target) - w(second non-target), binned by the corrupted
    // modality; only defined for the three-modality layout.
    let mut weight_deltas = Vec::new();
    if others.len() == 2 {
        for bin in [Misalignment::B, Misalignment::C] {
            let modality = bin.modality().expect("B/C bins carry a modality");
            let deltas: Vec<f64> = indices
                .iter()
                .zip(&traces)
                .filter(|&(&row, _)| data.misaligned[row] == bin)
                .map(|(_, t)| t.weights[0] - t.weights[1])
                .collect();
            if deltas.is_empty() {
                continue;
            }
            let count = deltas.len();
            let mean = deltas.iter().sum::<f64>() / count as f64;
            let var = if count > 1 {
                deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (count - 1) as f64
            } else {
                0.0
            };
            weight_deltas.push(WeightDeltaBin {
                misaligned_modality: modality,
                mean,
                stderr: (var / count as f64).sqrt(),
                count,
            });
        }
    }

    let mean_p_null = traces[0]
        .p_null
        .is_some()
        .then(|| traces.iter().map(|t| t.p_null.unwrap()).sum::<f64>() / n as f64);

    Ok(GateDiagnostics {
        per_modality,
        weight_deltas,
        mean_p_null,
        alpha: gate.alpha_value(&model.params),
        num_samples: n,
    })
}

impl GateDiagnostics {
    /// Long-format CSV keyed by (modality, statistic).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,statistic,value,count\n");
        let mut push = |modality: String, stat: &str, value: f64, count: usize| {
            out.push_str(&format!("{modality},{stat},{value:.12},{count}\n"));
        };
        for s in &self.per_modality {
            let m = s.modality.to_string();
            push(m.clone(), "mean_weight", s.mean_weight, self.num_samples);
            push(m.clone(), "mean_raw_weight", s.mean_raw_weight, self.num_samples);
            push(m.clone(), "mean_cos_gated_original", s.mean_cos_gated_original, self.num_samples);
            if let Some(v) = s.mean_cos_gated_neutral {
                push(m.clone(), "mean_cos_gated_neutral", v, self.num_samples);
            }
            for (tag, cond) in
                [("misaligned", &s.when_misaligned), ("aligned", &s.when_aligned)]
            {
                if let Some(c) = cond {
                    push(m.clone(), &format!("mean_cos_gated_original_{tag}"), c.mean_cos_original, c.count);
                    if let Some(v) = c.mean_cos_neutral {
                        push(m.clone(), &format!("mean_cos_gated_neutral_{tag}"), v, c.count);
                    }
                }
            }
        }
        for d in &self.weight_deltas {
            let m = d.misaligned_modality.to_string();
            push(m.clone(), "weight_delta_mean", d.mean, d.count);
            push(m, "weight_delta_stderr", d.stderr, d.count);
        }
        if let Some(p) = self.mean_p_null {
            push("-".into(), "mean_p_null", p, self.num_samples);
        }
        push("-".into(), "alpha", self.alpha, self.num_samples);
        out
    }
}

/// One experiment cell in the long-format results table. `method` is a
/// free string so ablation variants ("no_null", "matrix", ...) can share
/// the table with the plain methods.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub method: String,
    pub p: f64,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub seed: u64,
    pub top1: f64,
    pub pool: String,
    pub runtime_s: f64,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("method,p,B,K,seed,top1,pool,runtime_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{:.3}\n",
            r.method,
            r.p,
            r.batch_size,
            r.num_negatives,
            r.seed,
            r.top1,
            r.pool,
            r.runtime_s
        ));
    }
    out
}

/// The same table nested by method, as a JSON object. Runtime is kept out
/// so the file is identical across reruns of the same (config, seed).
pub fn results_json(rows: &[ResultRow]) -> String {
    let mut by_method: Vec<(&str, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        match by_method.iter_mut().find(|(m, _)| *m == r.method) {
            Some((_, list)) => list.push(r),
            None => by_method.push((&r.method, vec![r])),
        }
    }
    let mut out = String::from("{\n");
    for (i, (method, list)) in by_method.iter().enumerate() {
        out.push_str(&format!("  \"{}\": [\n", method));
        for (j, r) in list.iter().enumerate() {
            out.push_str(&format!(
                "    {{\"p\": {}, \"B\": {}, \"K\": {}, \"seed\": {}, \"top1\": {:.6}, \"pool\": \"{}\"}}{}\n",
                r.p,
                r.batch_size,
                r.num_negatives,
                r.seed,
                r.top1,
                r.pool,
                if j + 1 == list.len() { "" } else { "," }
            ));
        }
        out.push_str(&format!("  ]{}\n", if i + 1 == by_method.len() { "" } else { "," }));
    }
    out.push_str("}\n");
    out
}

/// Parses a table produced by [`results_csv`]; used to pick up finished
/// cells when a sweep resumes.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty results table".into()))?;
    if header != "method,p,B,K,seed,top1,pool,runtime_s" {
        return Err(Error::Data(format!("unexpected results header '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Data(format!("results row {}: expected 8 fields", i + 2)));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| Error::Data(format!("results row {}: bad number '{}'", i + 2, fields[j])))
        };
        rows.push(ResultRow {
            method: fields[0].into(),
            p: num(1)?,
            batch_size: num(2)? as usize,
            num_negatives: num(3)? as usize,
            seed: num(4)? as u64,
            top1: num(5)?,
            pool: fields[6].into(),
            runtime_s: num(7)?,
        });
    }
    Ok(rows)
}

/// One fully resolved experiment cell. `label` keys per-cell output files
/// (and resume checks); `method_name` fills the results method column,
/// which for ablation cells is the variant name rather than the method.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub label: String,
    pub method_name: String,
    pub config: ExperimentConfig,
}

fn make_cell(
    mut cfg: ExperimentConfig,
    method_name: &str,
    label: String,
    seed: u64,
) -> Result<SweepCell> {
    cfg.seed = seed;
    cfg.finalize()?;
    Ok(SweepCell { label, method_name: method_name.into(), config: cfg })
}

/// Methods x misalignment grid x seeds.
pub fn misalignment_cells(base: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &method in &base.sweep.methods {
        for &p in &base.sweep.p_grid {
            for &seed in &base.sweep.seeds {
                let mut cfg = base.clone();
                cfg.model.method = method;
                cfg.data.misalignment_prob = p;
                let label = format!("method={}_p={p}_seed={seed}", method.as_str());
                cells.push(make_cell(cfg, method.as_str(), label, seed)?);
            }
        }
    }
    Ok(cells)
}

/// Methods x batch-size grid x misalignment grid x seeds. In joint mode
/// the per-anchor candidate count follows the batch size; in fixed mode it
/// stays at the configured value.
pub fn scaling_cells(base: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &method in &base.sweep.methods {
        for &b in &base.sweep.b_grid {
            for &p in &base.sweep.p_grid {
                for &seed in &base.sweep.seeds {
                    let mut cfg = base.clone();
                    cfg.model.method = method;
                    cfg.train.batch_size = b;
                    cfg.data.misalignment_prob = p;
                    if cfg.sweep.k_mode == KMode::Joint {
                        cfg.objective.num_negatives = b;
                    }
                    let label = format!(
                        "method={}_B={b}_K={}_p={p}_seed={seed}",
                        method.as_str(),
                        cfg.objective.num_negatives
                    );
                    cells.push(make_cell(cfg, method.as_str(), label, seed)?);
                }
            }
        }
    }
    Ok(cells)
}

/// Gate ablation grid at the base misalignment level. Each variant starts
/// from the base gated model and changes the named knobs; the two ungated
/// rows drop the gate and differ only in candidate sampling.
pub fn ablation_cells(base: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    use crate::gate::{GateMode, GateType, NeutralType};
    use crate::objective::SamplingMode;

    let variants: Vec<(&str, Box<dyn Fn(&mut ExperimentConfig)>)> = vec![
        ("full", Box::new(|_: &mut ExperimentConfig| {})),
        ("neutral_ones", Box::new(|c| c.model.gate.neutral_type = NeutralType::Ones)),
        ("no_null", Box::new(|c| c.model.gate.use_null = false)),
        ("frozen_neutral", Box::new(|c| c.model.gate.neutral_type = NeutralType::RandomFrozen)),
        ("softmax", Box::new(|c| c.model.gate.gate_type = GateType::Softmax)),
        ("no_renorm", Box::new(|c| c.model.gate.renormalize = false)),
        ("ungated_pair", Box::new(|c| {
            c.model.method = Method::Symile;
            c.objective.sampling = SamplingMode::Pair;
        })),
        ("matrix", Box::new(|c| c.model.gate.gate_mode = GateMode::Matrix)),
        ("ungated_n", Box::new(|c| {
            c.model.method = Method::Symile;
            c.objective.sampling = SamplingMode::N;
        })),
        ("no_neutral_no_renorm", Box::new(|c| {
            c.model.gate.neutral_type = NeutralType::Zero;
            c.model.gate.renormalize = false;
        })),
    ];

    let mut cells = Vec::new();
    for (name, mutate) in &variants {
        for &seed in &base.sweep.seeds {
            let mut cfg = base.clone();
            cfg.model.method = Method::GatedSymile;
            mutate(&mut cfg);
            let label = format!("variant={name}_seed={seed}");
            cells.push(make_cell(cfg, name, label, seed)?);
        }
    }
    Ok(cells)
}

/// Everything a finished cell produces; the caller decides what to persist.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: ResultRow,
    pub diagnostics: Option<GateDiagnostics>,
    pub metrics_csv: String,
    pub effective_config: String,
    pub best_val_top1: Option<f64>,
}

/// Generates the cell's dataset, trains from scratch, and scores test-set
/// retrieval. The dataset is regenerated rather than cached across cells:
/// generation is cheap next to training and holding one copy per
/// (p, seed) pair would dominate memory.
pub fn run_cell(cell: &SweepCell) -> Result<CellOutcome> {
    let cfg = &cell.config;
    let started = std::time::Instant::now();

    let data = crate::synthetic_xnor::generate(&cfg.data)?;
    let splits = crate::synthetic_xnor::split(&data, cfg.split_fractions(), cfg.seed)?;
    let outcome = crate::trainer::train(&cfg.model, &cfg.objective, &cfg.train, &data, &splits)?;

    let pool = match cfg.eval_pool() {
        PoolMode::Sampled(k) => PoolMode::Sampled(k.min(splits.test.len().saturating_sub(1))),
        PoolMode::Full => PoolMode::Full,
    };
    let report = top1_retrieval(&outcome.model, &data, &splits.test, pool, cfg.seed)?;
    let diagnostics = if outcome.model.gate.is_some() {
        Some(gate_diagnostics(&outcome.model, &data, &splits.test)?)
    } else {
        None
    };

    Ok(CellOutcome {
        row: ResultRow {
            method: cell.method_name.clone(),
            p: cfg.data.misalignment_prob,
            batch_size: cfg.train.batch_size,
            num_negatives: cfg.objective.num_negatives,
            seed: cfg.seed,
            top1: report.top1_accuracy,
            pool: report.pool.as_str().into(),
            runtime_s: started.elapsed().as_secs_f64(),
        },
        diagnostics,
        metrics_csv: outcome.history.to_csv(),
        effective_config: cfg.to_flat(),
        best_val_top1: outcome.best_val_top1,
    })
}

/// Runs cells in order. `skip` lets a resumed sweep substitute rows for
/// cells that already finished; a failing cell is reported through
/// `on_cell` and counted, but does not stop the rest of the sweep.
pub fn run_sweep(
    cells: &[SweepCell],
    mut skip: impl FnMut(&SweepCell) -> Option<ResultRow>,
    mut on_cell: impl FnMut(&SweepCell, &Result<CellOutcome>),
) -> (Vec<ResultRow>, usize) {
    let mut rows = Vec::new();
    let mut failures = 0;
    for cell in cells {
        if let Some(row) = skip(cell) {
            rows.push(row);
            continue;
        }
        let result = run_cell(cell);
        match &result {
            Ok(outcome) => rows.push(outcome.row.clone()),
            Err(_) => failures += 1,
        }
        on_cell(cell, &result);
    }
    (rows, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::MlpEncoderConfig;
    use crate::gate::GateConfig;
    use crate::model::ModelConfig;
    use crate::synthetic_xnor::{self, XnorConfig};

    fn tiny_dataset(p: f64, n: usize, seed: u64) -> Dataset {
        let cfg = XnorConfig {
            bit_length: 4,
            input_dim: 16,
            num_samples: n,
            misalignment_prob: p,
            seed,
            ..XnorConfig::default()
        };
        synthetic_xnor::generate(&cfg).unwrap()
    }

    fn tiny_model(method: Method, seed: u64) -> Model {
        let cfg = ModelConfig {
            method,
            encoder: MlpEncoderConfig {
                input_dim: 16,
                hidden_dims: vec![12],
                hidden_dropouts: vec![0.0],
                embedding_dim: 6,
                normalize_output: true,
            },
            gate: GateConfig { gate_d_k: 6, ..GateConfig::default() },
            ..ModelConfig::default()
        };
        Model::build(&cfg, seed, 5.0).unwrap()
    }

    #[test]
    fn single_candidate_pool_is_always_correct() {
        let data = tiny_dataset(0.0, 12, 3);
        for method in [Method::Clip, Method::Symile, Method::GatedSymile] {
            let model = tiny_model(method, 4);
            let report = top1_retrieval(&model, &data, &[5], PoolMode::Full, 0).unwrap();
            assert_eq!(report.top1_accuracy, 1.0, "{method:?}: pool of one");
            assert_eq!(report.candidate_pool_size, 1);
        }
    }

    #[test]
    fn untrained_model_near_chance_on_sampled_pools() {
        let data = tiny_dataset(0.0, 400, 5);
        let idx: Vec<usize> = (0..400).collect();
        let model = tiny_model(Method::Symile, 6);
        let k = 7;
        let report = top1_retrieval(&model, &data, &idx, PoolMode::Sampled(k), 11).unwrap();
        assert_eq!(report.candidate_pool_size, k + 1);
        // an untrained random scorer is right about 1/(k+1) of the time;
        // allow 5 binomial standard errors
        let p = 1.0 / (k + 1) as f64;
        let se = (p * (1.0 - p) / 400.0).sqrt();
        assert!(
            (report.top1_accuracy - p).abs() <= 5.0 * se,
            "accuracy {} vs chance {p}",
            report.top1_accuracy
        );
    }

    #[test]
    fn duplicate_positive_ties_count_incorrect() {
        // two identical rows in the pool tie exactly; the query must fail
        let data = tiny_dataset(0.0, 6, 7);
        let model = tiny_model(Method::Symile, 8);
        // duplicate row 2's inputs by evaluating indices [2, 2, 3]: rows
        // 0 and 1 of the split are identical candidates
        let report = top1_retrieval(&model, &data, &[2, 2, 3], PoolMode::Full, 0).unwrap();
        // queries 0 and 1 tie between the twin candidates; query 2 is free
        // to succeed or fail on its own
        assert!(report.top1_accuracy <= 1.0 / 3.0 + 1e-12);
    }

    #[test]
    fn retrieval_is_deterministic() {
        let data = tiny_dataset(0.3, 60, 9);
        let idx: Vec<usize> = (0..60).collect();
        let model = tiny_model(Method::GatedSymile, 10);
        let a = top1_retrieval(&model, &data, &idx, PoolMode::Sampled(8), 21).unwrap();
        let b = top1_retrieval(&model, &data, &idx, PoolMode::Sampled(8), 21).unwrap();
        assert_eq!(a.top1_accuracy, b.top1_accuracy);
        let c = top1_retrieval(&model, &data, &idx, PoolMode::Sampled(8), 22).unwrap();
        // different eval seed may change the pools; only check it runs
        assert!(c.top1_accuracy >= 0.0);
    }

    #[test]
    fn pool_size_errors() {
        let data = tiny_dataset(0.0, 10, 1);
        let model = tiny_model(Method::Symile, 2);
        let idx: Vec<usize> = (0..10).collect();
        assert!(top1_retrieval(&model, &data, &[], PoolMode::Full, 0).is_err());
        assert!(top1_retrieval(&model, &data, &idx, PoolMode::Sampled(10), 0).is_err());
        assert!(top1_retrieval(&model, &data, &idx, PoolMode::Sampled(0), 0).is_err());
    }

    #[test]
    fn diagnostics_require_gate_and_report_bins() {
        let data = tiny_dataset(1.0, 80, 13);
        let idx: Vec<usize> = (0..80).collect();
        let ungated = tiny_model(Method::Symile, 14);
        assert!(gate_diagnostics(&ungated, &data, &idx).is_err());

        let model = tiny_model(Method::GatedSymile, 14);
        let diag = gate_diagnostics(&model, &data, &idx).unwrap();
        assert_eq!(diag.per_modality.len(), 2);
        for s in &diag.per_modality {
            assert!(s.mean_weight >= 0.0 && s.mean_weight <= 1.0);
            assert!(s.mean_cos_gated_original.abs() <= 1.0 + 1e-12);
            let cn = s.mean_cos_gated_neutral.expect("trainable neutral present");
            assert!(cn.abs() <= 1.0 + 1e-12);
            // p=1: every row corrupts B or C, so each modality sees both
            // its own corruptions and the other modality's as "aligned"
            let mis = s.when_misaligned.as_ref().expect("corrupted rows exist");
            let ali = s.when_aligned.as_ref().expect("other modality's rows");
            assert_eq!(mis.count + ali.count, 80);
            assert!(mis.mean_cos_neutral.is_some());
            let all = (mis.mean_cos_original * mis.count as f64
                + ali.mean_cos_original * ali.count as f64)
                / 80.0;
            assert!((all - s.mean_cos_gated_original).abs() < 1e-12);
        }
        // p=1 corrupts every sample, so both conditional bins are present
        assert_eq!(diag.weight_deltas.len(), 2);
        assert_eq!(
            diag.weight_deltas.iter().map(|d| d.count).sum::<usize>(),
            80,
            "every sample lands in exactly one bin at p=1"
        );
        assert!(diag.mean_p_null.is_some());
        assert!(diag.alpha > 0.0 && diag.alpha < 1.0);

        let csv = diag.to_csv();
        assert!(csv.starts_with("modality,statistic,value,count\n"));
        assert!(csv.contains("weight_delta_mean"));
        assert!(csv.contains("mean_p_null"));
    }

    #[test]
    fn clean_data_has_no_delta_bins() {
        let data = tiny_dataset(0.0, 40, 15);
        let idx: Vec<usize> = (0..40).collect();
        let model = tiny_model(Method::GatedSymile, 16);
        let diag = gate_diagnostics(&model, &data, &idx).unwrap();
        assert!(diag.weight_deltas.is_empty(), "p=0 leaves both bins empty");
    }

    #[test]
    fn results_tables_round_and_nest() {
        let rows = vec![
            ResultRow {
                method: "clip".into(),
                p: 0.5,
                batch_size: 128,
                num_negatives: 128,
                seed: 0,
                top1: 0.25,
                pool: "sampled".into(),
                runtime_s: 1.25,
            },
            ResultRow {
                method: "gated_symile".into(),
                p: 0.5,
                batch_size: 128,
                num_negatives: 128,
                seed: 0,
                top1: 0.875,
                pool: "sampled".into(),
                runtime_s: 2.5,
            },
            ResultRow {
                method: "gated_symile".into(),
                p: 1.0,
                batch_size: 128,
                num_negatives: 128,
                seed: 1,
                top1: 0.75,
                pool: "full".into(),
                runtime_s: 3.0,
            },
        ];
        let csv = results_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,p,B,K,seed,top1,pool,runtime_s");
        assert_eq!(lines.next().unwrap(), "clip,0.5,128,128,0,0.250000,sampled,1.250");
        assert_eq!(csv.lines().count(), 4);

        let json = results_json(&rows);
        assert!(json.contains("\"gated_symile\": ["));
        // two gated rows nest under one key, in insertion order
        let gated_section = json.split("\"gated_symile\"").nth(1).unwrap();
        assert_eq!(gated_section.matches("\"top1\"").count(), 2);
        assert!(!json.contains("runtime"));

        let parsed = parse_results_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[0].method, "clip");
        assert_eq!(parsed[2].seed, 1);
        assert_eq!(parsed[2].pool, "full");
        assert_eq!(results_csv(&parsed), csv, "parse inverts formatting");
        assert!(parse_results_csv("top1\n").is_err());
        assert!(parse_results_csv("method,p,B,K,seed,top1,pool,runtime_s\n1,2\n").is_err());
    }

    fn tiny_experiment() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("data.bit_length", "4"),
            ("data.input_dim", "16"),
            ("data.num_samples", "120"),
            ("modelname.emb_dim", "8"),
            ("modelname.hidden_dims", "16"),
            ("modelname.hidden_dropouts", "0"),
            ("modelname.gate_d_k", "8"),
            ("objective.num_negatives", "8"),
            ("optimizer.batch_size", "16"),
            ("optimizer.max_epochs", "1"),
            ("optimizer.warmup_steps", "0"),
            ("optimizer.eval_every", "5"),
            ("eval.num_negatives", "8"),
            ("sweep.p_grid", "0,1"),
            ("sweep.seeds", "0,1"),
            ("sweep.b_grid", "16"),
            ("sweep.methods", "symile,gated_symile"),
        ] {
            cfg.apply(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn misalignment_cells_enumerate_the_grid() {
        let cells = misalignment_cells(&tiny_experiment()).unwrap();
        // 2 methods x 2 p x 2 seeds
        assert_eq!(cells.len(), 8);
        let labels: std::collections::HashSet<_> = cells.iter().map(|c| &c.label).collect();
        assert_eq!(labels.len(), 8, "labels must be unique");
        let first = &cells[0];
        assert_eq!(first.method_name, "symile");
        assert_eq!(first.config.data.seed, first.config.seed, "finalize ran");
        assert!(cells.iter().any(|c| c.config.data.misalignment_prob == 1.0));
    }

    #[test]
    fn scaling_cells_couple_k_only_in_joint_mode() {
        let mut base = tiny_experiment();
        base.apply("sweep.b_grid", "16,32").unwrap();
        base.apply("sweep.p_grid", "0").unwrap();
        base.apply("sweep.seeds", "0").unwrap();
        let joint = scaling_cells(&base).unwrap();
        assert_eq!(joint.len(), 4);
        for c in &joint {
            assert_eq!(c.config.objective.num_negatives, c.config.train.batch_size);
        }
        base.apply("sweep.k_mode", "fixed").unwrap();
        let fixed = scaling_cells(&base).unwrap();
        for c in &fixed {
            assert_eq!(c.config.objective.num_negatives, 8);
        }
    }

    #[test]
    fn ablation_grid_covers_the_ten_variants() {
        let mut base = tiny_experiment();
        base.apply("sweep.seeds", "3").unwrap();
        let cells = ablation_cells(&base).unwrap();
        assert_eq!(cells.len(), 10);
        let by_name = |n: &str| cells.iter().find(|c| c.method_name == n).unwrap();

        let full = by_name("full");
        assert_eq!(full.config.model.method, Method::GatedSymile);
        assert!(full.config.model.gate.use_null);

        assert!(!by_name("no_null").config.model.gate.use_null);
        assert_eq!(
            by_name("matrix").config.model.gate.gate_mode,
            crate::gate::GateMode::Matrix
        );
        assert_eq!(by_name("ungated_pair").config.model.method, Method::Symile);
        assert_eq!(
            by_name("ungated_n").config.objective.sampling,
            crate::objective::SamplingMode::N
        );
        let combo = by_name("no_neutral_no_renorm");
        assert!(!combo.config.model.gate.renormalize);
        assert_eq!(combo.config.model.gate.neutral_type, crate::gate::NeutralType::Zero);
        // every variant except the ungated rows keeps the gate on
        assert_eq!(
            cells.iter().filter(|c| c.config.model.method == Method::GatedSymile).count(),
            8
        );
    }

    #[test]
    fn run_cell_trains_and_reports() {
        let mut base = tiny_experiment();
        base.apply("method", "gated_symile").unwrap();
        let cells = misalignment_cells(&base).unwrap();
        let cell = cells
            .iter()
            .find(|c| c.method_name == "gated_symile" && c.config.data.misalignment_prob == 0.0)
            .unwrap();
        let out = run_cell(cell).unwrap();
        assert_eq!(out.row.method, "gated_symile");
        assert_eq!(out.row.batch_size, 16);
        assert_eq!(out.row.num_negatives, 8);
        assert!(out.row.top1 >= 0.0 && out.row.top1 <= 1.0);
        assert!(out.row.runtime_s > 0.0);
        assert_eq!(out.row.pool, "sampled");
        assert!(out.diagnostics.is_some(), "gated cell reports gate stats");
        assert!(out.metrics_csv.starts_with("step,epoch,train_loss"));
        assert!(out.effective_config.contains("modelname.method = gated_symile"));
        assert!(out.best_val_top1.is_some());
    }

    #[test]
    fn run_sweep_skips_finished_cells_and_survives_failures() {
        let base = tiny_experiment();
        let mut cells = misalignment_cells(&base).unwrap();
        cells.truncate(3);
        // cell 1 cannot fill a batch: 96 train rows < 200
        cells[1].config.train.batch_size = 200;

        let done_label = cells[0].label.clone();
        let mut ran = Vec::new();
        let (rows, failures) = run_sweep(
            &cells,
            |cell| {
                (cell.label == done_label).then(|| ResultRow {
                    method: cell.method_name.clone(),
                    p: cell.config.data.misalignment_prob,
                    batch_size: cell.config.train.batch_size,
                    num_negatives: cell.config.objective.num_negatives,
                    seed: cell.config.seed,
                    top1: 0.5,
                    pool: "sampled".into(),
                    runtime_s: 0.0,
                })
            },
            |cell, result| ran.push((cell.label.clone(), result.is_ok())),
        );
        assert_eq!(rows.len(), 2, "skipped row plus one fresh success");
        assert_eq!(failures, 1);
        assert_eq!(rows[0].top1, 0.5, "resume row used as-is");
        assert_eq!(ran.len(), 2, "skipped cell never executes");
        assert!(!ran[0].1 && ran[1].1);
    }
}
