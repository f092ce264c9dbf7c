//! Product-key memory retrieval with over-parameterized sub-keys, weighted
//! aggregation, and memory-gated fusion.
//!
//! Forward (per input vector):
//!   u               = W_q x_in + b_q                      (query network)
//!   q_row, q_col    = LN?(u[..d_key]), LN?(u[d_key..])
//!   kappa_i         = LN?(K[i])                   per sub-key row
//!   ktilde_i        = Theta · kappa_i             when over-param is on
//!   s_row[i]        = <ktilde_row_i, q_row>,  s_col likewise
//!   I, J            = per-subspace top-k of s_row, s_col
//!   pairs           = top-k of { s_row[i] + s_col[j] : (i,j) in I×J }
//!   flat_t          = sqrt_n · i_t + j_t
//!   w               = softmax(raw) or raw / Σ raw         (weight mode)
//!   v_o             = Σ_t w_t · V[flat_t]                 (fused gather)
//!   x_tilde         = x_in ⊙ g(v_o)                       (memory gate)
//!
//! The backward pass treats the selected indices as fixed: gradient flows
//! through the scores of selected pairs only. Value rows that were not
//! selected receive exactly zero gradient; with over-param on, the shared
//! transform still receives a dense gradient, so even never-selected keys'
//! effective representations move on the next step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{fused_gather_backward, fused_gather_sum, partial_topk, GatherPlan};
use crate::numerics::{
    dot, grad_layernorm, grad_matvec, grad_softmax, layernorm, matvec, outer, sigmoid, softmax,
    vecmat, DenseMatrix, DenseVector, LayerNormParams,
};

// ── Configuration ────────────────────────────────────────────────────

/// How raw pair scores become aggregation weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    /// softmax over the k raw scores (default)
    #[serde(rename = "softmax")]
    Softmax,
    /// raw scores divided by their sum; can produce weights outside [0,1]
    /// and fails when the sum is near zero
    #[serde(rename = "linear-normalized")]
    LinearNormalized,
}

/// Gating nonlinearity for memory-input fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingFn {
    Tanh,
    Sigmoid,
    Identity,
}

impl GatingFn {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            GatingFn::Tanh => v.tanh(),
            GatingFn::Sigmoid => sigmoid(v),
            GatingFn::Identity => v,
        }
    }

    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            GatingFn::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            GatingFn::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            GatingFn::Identity => 1.0,
        }
    }
}

/// Memory layer configuration. `n` must be a perfect square; retrieval
/// selects `k` of the `sqrt_n × sqrt_n` index grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// total memory slots
    pub n: usize,
    /// query-network input dimension
    pub d_in: usize,
    /// sub-key / query dimension
    pub d_key: usize,
    /// value dimension
    pub d_value: usize,
    /// retrieval size, 1 ≤ k ≤ √n
    pub k: usize,
    pub weight_mode: WeightMode,
    pub gating_fn: GatingFn,
    pub over_param: bool,
    pub layernorm_qk: bool,
}

impl MemoryConfig {
    /// Defaults: softmax weights, tanh gating, over-param and query/key
    /// LayerNorm enabled.
    pub fn new(n: usize, d_in: usize, d_key: usize, d_value: usize, k: usize) -> Result<Self> {
        let cfg = MemoryConfig {
            n,
            d_in,
            d_key,
            d_value,
            k,
            weight_mode: WeightMode::Softmax,
            gating_fn: GatingFn::Tanh,
            over_param: true,
            layernorm_qk: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sqrt_n(&self) -> usize {
        (self.n as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let sqrt_n = self.sqrt_n();
        if sqrt_n * sqrt_n != self.n || self.n == 0 {
            return Err(Error::InvalidConfig(format!(
                "memory size n = {} is not a perfect square",
                self.n
            )));
        }
        if self.k == 0 || self.k > sqrt_n {
            return Err(Error::InvalidConfig(format!(
                "retrieval size k = {} out of range [1, {}]",
                self.k, sqrt_n
            )));
        }
        if self.d_in == 0 || self.d_key == 0 || self.d_value == 0 {
            return Err(Error::InvalidConfig(
                "d_in, d_key, d_value must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// Per-input-stream memory parameters: the query network, both sub-key
/// tables, the shared over-param transforms, and the query/key LayerNorms.
/// The value table lives outside so it can be shared across token streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryHead {
    /// query network weight, (2·d_key) × d_in
    pub query_w: DenseMatrix,
    /// query network bias, 2·d_key
    pub query_b: DenseVector,
    /// row sub-keys, √n × d_key
    pub key_row: DenseMatrix,
    /// column sub-keys, √n × d_key
    pub key_col: DenseMatrix,
    /// shared row-subspace transform, d_key × d_key
    pub theta_row: DenseMatrix,
    /// shared column-subspace transform, d_key × d_key
    pub theta_col: DenseMatrix,
    /// LayerNorm applied to each query after the split
    pub ln_q: LayerNormParams,
    /// LayerNorm applied to each sub-key row before the transform
    pub ln_k: LayerNormParams,
}

impl MemoryHead {
    /// Random keys and query net, transforms at identity so initial scores
    /// match the plain parameterization.
    pub fn init(cfg: &MemoryConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let sqrt_n = cfg.sqrt_n();
        let key_scale = 1.0 / (cfg.d_key as f64).sqrt();
        let query_scale = (2.0 / (cfg.d_in + 2 * cfg.d_key) as f64).sqrt();
        let mut rand_matrix = |rows: usize, cols: usize, scale: f64| {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            DenseMatrix::from_vec(rows, cols, data)
        };
        Ok(MemoryHead {
            query_w: rand_matrix(2 * cfg.d_key, cfg.d_in, query_scale)?,
            query_b: DenseVector::zeros(2 * cfg.d_key),
            key_row: rand_matrix(sqrt_n, cfg.d_key, key_scale)?,
            key_col: rand_matrix(sqrt_n, cfg.d_key, key_scale)?,
            theta_row: DenseMatrix::identity(cfg.d_key),
            theta_col: DenseMatrix::identity(cfg.d_key),
            ln_q: LayerNormParams::unit(cfg.d_key),
            ln_k: LayerNormParams::unit(cfg.d_key),
        })
    }

    pub fn validate(&self, cfg: &MemoryConfig) -> Result<()> {
        let sqrt_n = cfg.sqrt_n();
        let ok = self.query_w.rows() == 2 * cfg.d_key
            && self.query_w.cols() == cfg.d_in
            && self.query_b.dim() == 2 * cfg.d_key
            && self.key_row.rows() == sqrt_n
            && self.key_row.cols() == cfg.d_key
            && self.key_col.rows() == sqrt_n
            && self.key_col.cols() == cfg.d_key
            && self.theta_row.rows() == cfg.d_key
            && self.theta_row.cols() == cfg.d_key
            && self.theta_col.rows() == cfg.d_key
            && self.theta_col.cols() == cfg.d_key
            && self.ln_q.dim() == cfg.d_key
            && self.ln_k.dim() == cfg.d_key;
        if !ok {
            return Err(Error::InvalidConfig(
                "memory head dims inconsistent with config".to_string(),
            ));
        }
        Ok(())
    }
}

/// The full sparse parameter store: value table plus retrieval head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBlock {
    /// value table, n × d_value
    pub values: DenseMatrix,
    pub head: MemoryHead,
}

/// Standard deviation used for value-table initialization.
pub const VALUE_INIT_STD: f64 = 1.0;

impl MemoryBlock {
    pub fn init(cfg: &MemoryConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let head = MemoryHead::init(cfg, rng)?;
        let values = init_values(cfg, rng)?;
        Ok(MemoryBlock { values, head })
    }

    pub fn validate(&self, cfg: &MemoryConfig) -> Result<()> {
        self.head.validate(cfg)?;
        if self.values.rows() != cfg.n || self.values.cols() != cfg.d_value {
            return Err(Error::InvalidConfig(
                "value table dims inconsistent with config".to_string(),
            ));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        x_in: &DenseVector,
        cfg: &MemoryConfig,
    ) -> Result<(DenseVector, RetrievalResult, MemoryTape)> {
        memory_forward(x_in, &self.head, &self.values, cfg)
    }

    pub fn backward(
        &self,
        tape: &MemoryTape,
        d_out: &DenseVector,
        cfg: &MemoryConfig,
    ) -> Result<(DenseVector, MemoryGradients)> {
        let mut grads = MemoryGradients::zeros(cfg);
        let d_x = memory_backward_acc(&self.head, &self.values, cfg, tape, d_out, &mut grads)?;
        Ok((d_x, grads))
    }
}

pub fn init_values(cfg: &MemoryConfig, rng: &mut impl rand::Rng) -> Result<DenseMatrix> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, VALUE_INIT_STD).expect("valid normal");
    let data: Vec<f64> = (0..cfg.n * cfg.d_value)
        .map(|_| normal.sample(rng))
        .collect();
    DenseMatrix::from_vec(cfg.n, cfg.d_value, data)
}

// ── Gradients ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormGrads {
    pub gamma: DenseVector,
    pub beta: DenseVector,
}

impl LayerNormGrads {
    pub fn zeros(dim: usize) -> Self {
        LayerNormGrads {
            gamma: DenseVector::zeros(dim),
            beta: DenseVector::zeros(dim),
        }
    }
}

/// One gradient buffer per memory head parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryHeadGradients {
    pub query_w: DenseMatrix,
    pub query_b: DenseVector,
    pub key_row: DenseMatrix,
    pub key_col: DenseMatrix,
    pub theta_row: DenseMatrix,
    pub theta_col: DenseMatrix,
    pub ln_q: LayerNormGrads,
    pub ln_k: LayerNormGrads,
}

impl MemoryHeadGradients {
    pub fn zeros(cfg: &MemoryConfig) -> Self {
        let sqrt_n = cfg.sqrt_n();
        MemoryHeadGradients {
            query_w: DenseMatrix::zeros(2 * cfg.d_key, cfg.d_in),
            query_b: DenseVector::zeros(2 * cfg.d_key),
            key_row: DenseMatrix::zeros(sqrt_n, cfg.d_key),
            key_col: DenseMatrix::zeros(sqrt_n, cfg.d_key),
            theta_row: DenseMatrix::zeros(cfg.d_key, cfg.d_key),
            theta_col: DenseMatrix::zeros(cfg.d_key, cfg.d_key),
            ln_q: LayerNormGrads::zeros(cfg.d_key),
            ln_k: LayerNormGrads::zeros(cfg.d_key),
        }
    }
}

/// Mirror of `MemoryBlock`: a dense buffer per parameter. Only the k
/// selected value rows are ever nonzero per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryGradients {
    pub values: DenseMatrix,
    pub head: MemoryHeadGradients,
}

impl MemoryGradients {
    pub fn zeros(cfg: &MemoryConfig) -> Self {
        MemoryGradients {
            values: DenseMatrix::zeros(cfg.n, cfg.d_value),
            head: MemoryHeadGradients::zeros(cfg),
        }
    }
}

// ── Retrieval data ───────────────────────────────────────────────────

/// A selected (row, col) sub-index pair and its raw score sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Outcome of one retrieval: selected pairs and their aggregation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// k selected (row, col) pairs, descending score
    pub pairs: Vec<(usize, usize)>,
    /// flat indices √n·row + col, pairwise distinct
    pub flat_indices: Vec<usize>,
    /// raw score sums s_row[i] + s_col[j]
    pub raw_scores: Vec<f64>,
    /// aggregation weights; sum to 1 within 1e-6 in softmax mode
    pub weights: Vec<f64>,
}

// ── Operations ───────────────────────────────────────────────────────

/// Run the query network and split its output into the two subspace
/// queries, LayerNorm-applied when configured.
pub fn query_split(
    x_in: &DenseVector,
    head: &MemoryHead,
    cfg: &MemoryConfig,
) -> Result<(DenseVector, DenseVector)> {
    let (_, q_row, q_col) = query_split_with_pre(x_in, head, cfg)?;
    Ok((q_row, q_col))
}

fn query_split_with_pre(
    x_in: &DenseVector,
    head: &MemoryHead,
    cfg: &MemoryConfig,
) -> Result<(DenseVector, DenseVector, DenseVector)> {
    if x_in.dim() != cfg.d_in {
        return Err(Error::DimMismatch {
            op: "query_split",
            left: format!("x_in dim {}", x_in.dim()),
            right: format!("d_in {}", cfg.d_in),
        });
    }
    let mut u = matvec(&head.query_w, x_in)?;
    for i in 0..u.dim() {
        u.set(i, u.get(i) + head.query_b.get(i));
    }
    let half = |lo: usize| -> Result<DenseVector> {
        let raw = DenseVector::from_vec(u.as_slice()[lo..lo + cfg.d_key].to_vec())?;
        if cfg.layernorm_qk {
            layernorm(&raw, &head.ln_q)
        } else {
            Ok(raw)
        }
    };
    let q_row = half(0)?;
    let q_col = half(cfg.d_key)?;
    Ok((u, q_row, q_col))
}

/// Score a query against every sub-key row: score[i] = <ktilde_i, q> with
/// ktilde_i = theta · LN?(keys[i]) when over-param is on.
pub fn score_subkeys(
    q: &DenseVector,
    keys: &DenseMatrix,
    theta: &DenseMatrix,
    ln_k: &LayerNormParams,
    over_param: bool,
    layernorm_qk: bool,
) -> Result<DenseVector> {
    if q.dim() != keys.cols() {
        return Err(Error::DimMismatch {
            op: "score_subkeys",
            left: format!("q dim {}", q.dim()),
            right: format!("key dim {}", keys.cols()),
        });
    }
    let mut scores = DenseVector::zeros(keys.rows());
    for i in 0..keys.rows() {
        let ktilde = transform_key(keys.row(i), theta, ln_k, over_param, layernorm_qk)?;
        scores.set(i, dot(ktilde.as_slice(), q.as_slice()));
    }
    Ok(scores)
}

/// LN?(key) followed by the theta transform, as used in scoring.
fn transform_key(
    key: &[f64],
    theta: &DenseMatrix,
    ln_k: &LayerNormParams,
    over_param: bool,
    layernorm_qk: bool,
) -> Result<DenseVector> {
    let kappa = normalize_key(key, ln_k, layernorm_qk)?;
    if over_param {
        matvec(theta, &kappa)
    } else {
        Ok(kappa)
    }
}

fn normalize_key(key: &[f64], ln_k: &LayerNormParams, layernorm_qk: bool) -> Result<DenseVector> {
    let raw = DenseVector::from_vec(key.to_vec())?;
    if layernorm_qk {
        layernorm(&raw, ln_k)
    } else {
        Ok(raw)
    }
}

/// The effective representation a query is scored against for sub-key `i`:
/// theta · key (or the raw key with over-param off). Used to probe whether
/// never-selected keys still move under training.
pub fn effective_key(
    keys: &DenseMatrix,
    theta: &DenseMatrix,
    i: usize,
    over_param: bool,
) -> Result<DenseVector> {
    if i >= keys.rows() {
        return Err(Error::IndexOutOfRange {
            op: "effective_key",
            index: i,
            bound: keys.rows(),
        });
    }
    let raw = DenseVector::from_vec(keys.row(i).to_vec())?;
    if over_param {
        matvec(theta, &raw)
    } else {
        Ok(raw)
    }
}

/// Per-subspace top-k followed by top-k over the k² Cartesian candidates.
///
/// Ties inside a subspace go to the lower index; ties among pair sums go to
/// the lexicographically smaller (i, j). Output is sorted by descending
/// score.
pub fn combine_topk(
    s_row: &DenseVector,
    s_col: &DenseVector,
    k: usize,
) -> Result<Vec<ScoredPair>> {
    if s_row.dim() != s_col.dim() {
        return Err(Error::DimMismatch {
            op: "combine_topk",
            left: format!("s_row dim {}", s_row.dim()),
            right: format!("s_col dim {}", s_col.dim()),
        });
    }
    if k == 0 || k > s_row.dim() {
        return Err(Error::IndexOutOfRange {
            op: "combine_topk",
            index: k,
            bound: s_row.dim(),
        });
    }
    let rows = partial_topk(s_row.as_slice(), k)?;
    let cols = partial_topk(s_col.as_slice(), k)?;

    let mut candidates = Vec::with_capacity(k * k);
    for (&i, &si) in rows.indices.iter().zip(&rows.scores) {
        for (&j, &sj) in cols.indices.iter().zip(&cols.scores) {
            candidates.push(ScoredPair {
                row: i,
                col: j,
                score: si + sj,
            });
        }
    }
    candidates.sort_unstable_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.row, a.col).cmp(&(b.row, b.col)))
    });
    candidates.truncate(k);
    Ok(candidates)
}

/// Row-major flat index √n·i + j; bijective onto [0, n).
pub fn flat_index(i: usize, j: usize, sqrt_n: usize) -> Result<usize> {
    if i >= sqrt_n {
        return Err(Error::IndexOutOfRange {
            op: "flat_index",
            index: i,
            bound: sqrt_n,
        });
    }
    if j >= sqrt_n {
        return Err(Error::IndexOutOfRange {
            op: "flat_index",
            index: j,
            bound: sqrt_n,
        });
    }
    Ok(sqrt_n * i + j)
}

/// Turn selected pairs into weights and the weighted value sum.
pub fn aggregate_values(
    pairs: &[ScoredPair],
    values: &DenseMatrix,
    weight_mode: WeightMode,
) -> Result<(DenseVector, RetrievalResult)> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig(
            "aggregate_values requires at least one pair".to_string(),
        ));
    }
    let sqrt_n = (values.rows() as f64).sqrt().round() as usize;
    if sqrt_n * sqrt_n != values.rows() {
        return Err(Error::InvalidConfig(format!(
            "value table rows {} is not a perfect square",
            values.rows()
        )));
    }
    let raw_scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let weights = weights_from_scores(&raw_scores, weight_mode)?;
    let mut flat_indices = Vec::with_capacity(pairs.len());
    for p in pairs {
        flat_indices.push(flat_index(p.row, p.col, sqrt_n)?);
    }
    let plan = GatherPlan {
        indices: flat_indices.clone(),
        weights: weights.clone(),
    };
    let v_o = fused_gather_sum(&plan, values)?;
    let result = RetrievalResult {
        pairs: pairs.iter().map(|p| (p.row, p.col)).collect(),
        flat_indices,
        raw_scores,
        weights,
    };
    Ok((v_o, result))
}

fn weights_from_scores(raw: &[f64], mode: WeightMode) -> Result<Vec<f64>> {
    match mode {
        WeightMode::Softmax => Ok(softmax(raw)),
        WeightMode::LinearNormalized => {
            let sum: f64 = raw.iter().sum();
            if sum.abs() < 1e-12 {
                return Err(Error::DegenerateNormalization { sum });
            }
            Ok(raw.iter().map(|s| s / sum).collect())
        }
    }
}

// ── Forward / backward ───────────────────────────────────────────────

/// Per-subspace record of the selected rows' intermediates.
#[derive(Clone, Debug)]
struct SubspaceTape {
    /// distinct sub-indices that appear in the selected pairs
    indices: Vec<usize>,
    /// LN?(key) per selected index
    kappa: Vec<DenseVector>,
    /// theta · kappa per selected index (equals kappa with over-param off)
    ktilde: Vec<DenseVector>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct MemoryTape {
    x_in: DenseVector,
    /// query network output before any LayerNorm, length 2·d_key
    query_pre: DenseVector,
    q_row: DenseVector,
    q_col: DenseVector,
    row: SubspaceTape,
    col: SubspaceTape,
    pairs: Vec<ScoredPair>,
    flat_indices: Vec<usize>,
    weights: Vec<f64>,
    weight_mode: WeightMode,
}

impl MemoryTape {
    pub fn retrieval(&self) -> RetrievalResult {
        RetrievalResult {
            pairs: self.pairs.iter().map(|p| (p.row, p.col)).collect(),
            flat_indices: self.flat_indices.clone(),
            raw_scores: self.pairs.iter().map(|p| p.score).collect(),
            weights: self.weights.clone(),
        }
    }
}

fn subspace_tape(
    pairs: &[ScoredPair],
    pick_row: bool,
    keys: &DenseMatrix,
    theta: &DenseMatrix,
    ln_k: &LayerNormParams,
    cfg: &MemoryConfig,
) -> Result<SubspaceTape> {
    let mut indices: Vec<usize> = pairs
        .iter()
        .map(|p| if pick_row { p.row } else { p.col })
        .collect();
    indices.sort_unstable();
    indices.dedup();
    let mut kappa = Vec::with_capacity(indices.len());
    let mut ktilde = Vec::with_capacity(indices.len());
    for &i in &indices {
        let norm = normalize_key(keys.row(i), ln_k, cfg.layernorm_qk)?;
        let transformed = if cfg.over_param {
            matvec(theta, &norm)?
        } else {
            norm.clone()
        };
        kappa.push(norm);
        ktilde.push(transformed);
    }
    Ok(SubspaceTape {
        indices,
        kappa,
        ktilde,
    })
}

/// Full retrieval: query split, subspace scoring, Cartesian top-k, weighted
/// aggregation. Returns the memory output, the retrieval record, and the
/// tape for backward.
pub fn memory_forward(
    x_in: &DenseVector,
    head: &MemoryHead,
    values: &DenseMatrix,
    cfg: &MemoryConfig,
) -> Result<(DenseVector, RetrievalResult, MemoryTape)> {
    head.validate(cfg)?;
    if values.rows() != cfg.n || values.cols() != cfg.d_value {
        return Err(Error::DimMismatch {
            op: "memory_forward",
            left: format!("values {}x{}", values.rows(), values.cols()),
            right: format!("config {}x{}", cfg.n, cfg.d_value),
        });
    }
    let (query_pre, q_row, q_col) = query_split_with_pre(x_in, head, cfg)?;
    let s_row = score_subkeys(
        &q_row,
        &head.key_row,
        &head.theta_row,
        &head.ln_k,
        cfg.over_param,
        cfg.layernorm_qk,
    )?;
    let s_col = score_subkeys(
        &q_col,
        &head.key_col,
        &head.theta_col,
        &head.ln_k,
        cfg.over_param,
        cfg.layernorm_qk,
    )?;
    let pairs = combine_topk(&s_row, &s_col, cfg.k)?;
    let (v_o, result) = aggregate_values(&pairs, values, cfg.weight_mode)?;

    let row = subspace_tape(&pairs, true, &head.key_row, &head.theta_row, &head.ln_k, cfg)?;
    let col = subspace_tape(&pairs, false, &head.key_col, &head.theta_col, &head.ln_k, cfg)?;
    let tape = MemoryTape {
        x_in: x_in.clone(),
        query_pre,
        q_row,
        q_col,
        row,
        col,
        pairs,
        flat_indices: result.flat_indices.clone(),
        weights: result.weights.clone(),
        weight_mode: cfg.weight_mode,
    };
    Ok((v_o, result, tape))
}

/// Backward through one subspace: score gradients for the selected distinct
/// indices flow into the query, the sub-key rows, the shared transform, and
/// the key LayerNorm.
#[allow(clippy::too_many_arguments)]
fn subspace_backward(
    tape: &SubspaceTape,
    d_scores: &[f64],
    q: &DenseVector,
    keys: &DenseMatrix,
    theta: &DenseMatrix,
    ln_k: &LayerNormParams,
    cfg: &MemoryConfig,
    d_q: &mut DenseVector,
    d_keys: &mut DenseMatrix,
    d_theta: &mut DenseMatrix,
    d_ln_k: &mut LayerNormGrads,
) -> Result<()> {
    for (pos, &i) in tape.indices.iter().enumerate() {
        let g = d_scores[pos];
        if g == 0.0 {
            continue;
        }
        // score = <ktilde, q>
        d_q.axpy(g, &tape.ktilde[pos]);
        let mut d_ktilde = q.clone();
        for v in d_ktilde.as_mut_slice() {
            *v *= g;
        }
        let d_kappa = if cfg.over_param {
            let (d_theta_i, d_kappa) = grad_matvec(theta, &tape.kappa[pos], &d_ktilde)?;
            for (dst, src) in d_theta.as_mut_slice().iter_mut().zip(d_theta_i.as_slice()) {
                *dst += src;
            }
            d_kappa
        } else {
            d_ktilde
        };
        let d_key_raw = if cfg.layernorm_qk {
            let raw = DenseVector::from_vec(keys.row(i).to_vec())?;
            let (d_raw, d_gamma, d_beta) = grad_layernorm(&raw, ln_k, &d_kappa)?;
            d_ln_k.gamma.axpy(1.0, &d_gamma);
            d_ln_k.beta.axpy(1.0, &d_beta);
            d_raw
        } else {
            d_kappa
        };
        for (dst, src) in d_keys.row_mut(i).iter_mut().zip(d_key_raw.as_slice()) {
            *dst += src;
        }
    }
    Ok(())
}

/// Backward pass accumulating into `grads`. Returns the input gradient
/// (query-network path only; the gate contributes separately).
pub fn memory_backward_acc(
    head: &MemoryHead,
    values: &DenseMatrix,
    cfg: &MemoryConfig,
    tape: &MemoryTape,
    d_out: &DenseVector,
    grads: &mut MemoryGradients,
) -> Result<DenseVector> {
    if d_out.dim() != cfg.d_value {
        return Err(Error::TapeMismatch(format!(
            "d_out dim {} does not match d_value {}",
            d_out.dim(),
            cfg.d_value
        )));
    }
    if tape.pairs.len() != cfg.k || tape.x_in.dim() != cfg.d_in {
        return Err(Error::TapeMismatch(
            "tape does not match the config it is replayed against".to_string(),
        ));
    }

    // value rows and weight gradients, one fused pass
    let plan = GatherPlan {
        indices: tape.flat_indices.clone(),
        weights: tape.weights.clone(),
    };
    let (d_value_rows, d_weights) = fused_gather_backward(&plan, values, d_out)?;
    for (idx, row_grad) in &d_value_rows {
        for (dst, src) in grads.values.row_mut(*idx).iter_mut().zip(row_grad) {
            *dst += src;
        }
    }

    // weights -> raw pair scores
    let d_raw: Vec<f64> = match tape.weight_mode {
        WeightMode::Softmax => grad_softmax(&tape.weights, &d_weights),
        WeightMode::LinearNormalized => {
            let total: f64 = tape.pairs.iter().map(|p| p.score).sum();
            let inner: f64 = d_weights
                .iter()
                .zip(&tape.weights)
                .map(|(d, w)| d * w)
                .sum();
            d_weights.iter().map(|d| (d - inner) / total).collect()
        }
    };

    // raw pair scores -> per-subspace score gradients on selected indices
    let mut d_s_row = vec![0.0; tape.row.indices.len()];
    let mut d_s_col = vec![0.0; tape.col.indices.len()];
    for (pair, &g) in tape.pairs.iter().zip(&d_raw) {
        let rpos = tape
            .row
            .indices
            .binary_search(&pair.row)
            .map_err(|_| Error::TapeMismatch("selected row missing from tape".to_string()))?;
        let cpos = tape
            .col
            .indices
            .binary_search(&pair.col)
            .map_err(|_| Error::TapeMismatch("selected col missing from tape".to_string()))?;
        d_s_row[rpos] += g;
        d_s_col[cpos] += g;
    }

    let mut d_q_row = DenseVector::zeros(cfg.d_key);
    let mut d_q_col = DenseVector::zeros(cfg.d_key);
    subspace_backward(
        &tape.row,
        &d_s_row,
        &tape.q_row,
        &head.key_row,
        &head.theta_row,
        &head.ln_k,
        cfg,
        &mut d_q_row,
        &mut grads.head.key_row,
        &mut grads.head.theta_row,
        &mut grads.head.ln_k,
    )?;
    subspace_backward(
        &tape.col,
        &d_s_col,
        &tape.q_col,
        &head.key_col,
        &head.theta_col,
        &head.ln_k,
        cfg,
        &mut d_q_col,
        &mut grads.head.key_col,
        &mut grads.head.theta_col,
        &mut grads.head.ln_k,
    )?;

    // query LayerNorm backward on each half, shared ln_q params
    let halves = [(0, &d_q_row), (cfg.d_key, &d_q_col)];
    let mut d_u = DenseVector::zeros(2 * cfg.d_key);
    for (lo, d_q) in halves {
        if cfg.layernorm_qk {
            let pre = DenseVector::from_vec(tape.query_pre.as_slice()[lo..lo + cfg.d_key].to_vec())?;
            let (d_pre, d_gamma, d_beta) = grad_layernorm(&pre, &head.ln_q, d_q)?;
            grads.head.ln_q.gamma.axpy(1.0, &d_gamma);
            grads.head.ln_q.beta.axpy(1.0, &d_beta);
            for i in 0..cfg.d_key {
                d_u.set(lo + i, d_pre.get(i));
            }
        } else {
            for i in 0..cfg.d_key {
                d_u.set(lo + i, d_q.get(i));
            }
        }
    }

    // query network: u = W x + b
    let (d_query_w, d_x) = grad_matvec(&head.query_w, &tape.x_in, &d_u)?;
    for (dst, src) in grads
        .head
        .query_w
        .as_mut_slice()
        .iter_mut()
        .zip(d_query_w.as_slice())
    {
        *dst += src;
    }
    grads.head.query_b.axpy(1.0, &d_u);
    Ok(d_x)
}

/// Backward pass with fresh gradient buffers.
pub fn memory_backward(
    head: &MemoryHead,
    values: &DenseMatrix,
    cfg: &MemoryConfig,
    tape: &MemoryTape,
    d_out: &DenseVector,
) -> Result<(DenseVector, MemoryGradients)> {
    let mut grads = MemoryGradients::zeros(cfg);
    let d_x = memory_backward_acc(head, values, cfg, tape, d_out, &mut grads)?;
    Ok((d_x, grads))
}

// ── Memory-gated fusion ──────────────────────────────────────────────

/// x_tilde[i] = x_in[i] · g(v_o[i])
pub fn memory_gate(
    x_in: &DenseVector,
    v_o: &DenseVector,
    gating_fn: GatingFn,
) -> Result<DenseVector> {
    if x_in.dim() != v_o.dim() {
        return Err(Error::DimMismatch {
            op: "memory_gate",
            left: format!("x_in dim {}", x_in.dim()),
            right: format!("v_o dim {}", v_o.dim()),
        });
    }
    let mut out = DenseVector::zeros(x_in.dim());
    for i in 0..x_in.dim() {
        out.set(i, x_in.get(i) * gating_fn.apply(v_o.get(i)));
    }
    Ok(out)
}

/// Backward of the gate. Returns (d_x_in, d_v_o).
pub fn memory_gate_backward(
    x_in: &DenseVector,
    v_o: &DenseVector,
    gating_fn: GatingFn,
    d_out: &DenseVector,
) -> Result<(DenseVector, DenseVector)> {
    if x_in.dim() != v_o.dim() || d_out.dim() != x_in.dim() {
        return Err(Error::DimMismatch {
            op: "memory_gate_backward",
            left: format!("x_in dim {}", x_in.dim()),
            right: format!("v_o dim {}, d_out dim {}", v_o.dim(), d_out.dim()),
        });
    }
    let mut d_x = DenseVector::zeros(x_in.dim());
    let mut d_v = DenseVector::zeros(x_in.dim());
    for i in 0..x_in.dim() {
        let g = gating_fn.apply(v_o.get(i));
        d_x.set(i, d_out.get(i) * g);
        d_v.set(i, d_out.get(i) * x_in.get(i) * gating_fn.derivative(v_o.get(i)));
    }
    Ok((d_x, d_v))
}

// lightweight helpers used by higher layers

/// Flattened parameter slices in a stable order, paired by the matching
/// gradient accessor below. Order: query_w, query_b, key_row, key_col,
/// theta_row, theta_col, ln_q.gamma, ln_q.beta, ln_k.gamma, ln_k.beta.
impl MemoryHead {
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.query_w.as_mut_slice(),
            self.query_b.as_mut_slice(),
            self.key_row.as_mut_slice(),
            self.key_col.as_mut_slice(),
            self.theta_row.as_mut_slice(),
            self.theta_col.as_mut_slice(),
            self.ln_q.gamma.as_mut_slice(),
            self.ln_q.beta.as_mut_slice(),
            self.ln_k.gamma.as_mut_slice(),
            self.ln_k.beta.as_mut_slice(),
        ]
    }
}

impl MemoryHeadGradients {
    pub fn grad_slices(&self) -> Vec<&[f64]> {
        vec![
            self.query_w.as_slice(),
            self.query_b.as_slice(),
            self.key_row.as_slice(),
            self.key_col.as_slice(),
            self.theta_row.as_slice(),
            self.theta_col.as_slice(),
            self.ln_q.gamma.as_slice(),
            self.ln_q.beta.as_slice(),
            self.ln_k.gamma.as_slice(),
            self.ln_k.beta.as_slice(),
        ]
    }
}
