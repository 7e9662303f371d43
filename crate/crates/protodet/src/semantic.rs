//! The semantic side of the detector: project queries into the prototype
//! space, assign them over the pool, aggregate prototype knowledge, predict
//! categories, and score the distillation losses.
//!
//! The pool matrix enters every graph as a detached constant — prototypes are
//! momentum-updated, never gradient-updated — and all parameters created here
//! carry the SEM partition label.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::pool::ConceptPool;
use crate::teacher::TeacherBank;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{glorot, ParamSet, Partition, Tensor};

/// Floor for logarithms inside the distillation losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Two affine layers with a tanh between, then row normalization onto the
/// unit sphere of the semantic space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub in_width: usize,
    pub out_width: usize,
}

impl ProjectionHead {
    /// Starts as a selector of the token layout's content block (first `d`
    /// query coordinates), small enough to keep the tanh in its linear
    /// regime; normalization cancels the scale. With few base categories the
    /// inverse token map is unidentifiable off the base span, so this
    /// structural starting point is what keeps novel embeddings reachable;
    /// training refines it freely from here.
    pub fn init(params: &mut ParamSet, c: usize, d: usize, rng: &mut ChaCha12Rng) -> Self {
        let selector_scale = 0.1;
        let mut w1 = Tensor::zeros(vec![c, d]);
        for i in 0..d.min(c) {
            w1.data_mut()[i * d + i] = selector_scale;
        }
        let mut w2 = glorot(d, d, rng);
        for v in w2.data_mut().iter_mut() {
            *v *= 0.05;
        }
        for i in 0..d {
            w2.data_mut()[i * d + i] += 1.0;
        }
        Self {
            w1: params.push("proj.w1", Partition::Sem, w1),
            b1: params.push("proj.b1", Partition::Sem, Tensor::zeros(vec![d])),
            w2: params.push("proj.w2", Partition::Sem, w2),
            b2: params.push("proj.b2", Partition::Sem, Tensor::zeros(vec![d])),
            in_width: c,
            out_width: d,
        }
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], queries: Var<'t>) -> Result<Var<'t>> {
        let (_, c) = queries.value().dims2()?;
        if c != self.in_width {
            return Err(Error::Dimension(format!(
                "projection expects query width {}, got {c}",
                self.in_width
            )));
        }
        let hidden = queries.matmul(bound[self.w1])?.add_row(bound[self.b1])?.tanh();
        let out = hidden.matmul(bound[self.w2])?.add_row(bound[self.b2])?;
        out.normalize_rows()
    }
}

/// Maps projected queries into the shared space: `q̂ = h_θ(q)`, rows unit-norm.
pub fn project_queries<'t>(
    bound: &[Var<'t>],
    head: &ProjectionHead,
    queries: Var<'t>,
) -> Result<Var<'t>> {
    head.forward(bound, queries)
}

/// Residual MLP over the projected query (two affine layers, tanh between).
#[derive(Debug, Clone)]
pub struct AggregatorMlp {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub width: usize,
}

impl AggregatorMlp {
    /// Zero-initialized second affine: the residual starts silent and the
    /// aggregation is the pure prototype sum until training needs more.
    pub fn init(params: &mut ParamSet, d: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            w1: params.push("agg.w1", Partition::Sem, glorot(d, d, rng)),
            b1: params.push("agg.b1", Partition::Sem, Tensor::zeros(vec![d])),
            w2: params.push("agg.w2", Partition::Sem, Tensor::zeros(vec![d, d])),
            b2: params.push("agg.b2", Partition::Sem, Tensor::zeros(vec![d])),
            width: d,
        }
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let hidden = x.matmul(bound[self.w1])?.add_row(bound[self.b1])?.tanh();
        hidden.matmul(bound[self.w2])?.add_row(bound[self.b2])
    }
}

/// Cross-attention over a learnable category-embedding table plus an affine
/// onto category logits.
///
/// The table and the output affine start from the teacher's category anchors
/// — the one-time distillation that lets novel categories stay reachable
/// after the teacher is gone — and train freely from there.
#[derive(Debug, Clone)]
pub struct SemanticPredictor {
    pub table: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub d: usize,
    pub num_categories: usize,
}

impl SemanticPredictor {
    pub fn init(params: &mut ParamSet, bank: &TeacherBank) -> Self {
        let d = bank.dim();
        let k = bank.num_categories();
        let mut table = Vec::with_capacity(k * d);
        for anchor in bank.anchors() {
            table.extend_from_slice(anchor.as_slice());
        }
        let scale = 1.0 / bank.teacher_tau;
        let mut w_out = vec![0.0; d * k];
        for (c, anchor) in bank.anchors().iter().enumerate() {
            for (row, &v) in anchor.as_slice().iter().enumerate() {
                w_out[row * k + c] = v * scale;
            }
        }
        Self {
            table: params.push(
                "pred.table",
                Partition::Sem,
                Tensor::from_parts(vec![k, d], table),
            ),
            w_out: params.push(
                "pred.w_out",
                Partition::Sem,
                Tensor::from_parts(vec![d, k], w_out),
            ),
            b_out: params.push("pred.b_out", Partition::Sem, Tensor::zeros(vec![k])),
            d,
            num_categories: k,
        }
    }

    /// Placeholder init (all zeros); used when a checkpoint will overwrite
    /// every value right after construction.
    pub fn init_raw(params: &mut ParamSet, d: usize, num_categories: usize) -> Self {
        Self {
            table: params.push(
                "pred.table",
                Partition::Sem,
                Tensor::zeros(vec![num_categories, d]),
            ),
            w_out: params.push(
                "pred.w_out",
                Partition::Sem,
                Tensor::zeros(vec![d, num_categories]),
            ),
            b_out: params.push("pred.b_out", Partition::Sem, Tensor::zeros(vec![num_categories])),
            d,
            num_categories,
        }
    }

    /// Category logits for semantic-enhanced queries `r` (`N×d` → `N×|C|`).
    pub fn forward<'t>(&self, bound: &[Var<'t>], r: Var<'t>) -> Result<Var<'t>> {
        let table = bound[self.table];
        let scores = r.matmul(table.transpose()?)?;
        let attn = scores.softmax_rows((self.d as f64).sqrt())?;
        let context = attn.matmul(table)?;
        let u = r.add(context)?;
        u.matmul(bound[self.w_out])?.add_row(bound[self.b_out])
    }
}

/// Loss weights of the distillation objective.
#[derive(Debug, Clone, Copy)]
pub struct DpaWeights {
    pub alpha: f64,
    pub lambda_kl: f64,
    pub lambda_align: f64,
}

impl DpaWeights {
    pub fn new(alpha: f64, lambda_kl: f64, lambda_align: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::Parameter("alpha must be positive".into()));
        }
        if lambda_kl < 0.0 || lambda_align < 0.0 {
            return Err(Error::Parameter("loss weights must be nonnegative".into()));
        }
        Ok(Self { alpha, lambda_kl, lambda_align })
    }
}

/// Row-stochastic assignment of projected queries over the pool at
/// temperature `alpha`. Rows are re-normalized first, so the argmax is
/// invariant to positive rescaling of any input row.
pub fn prototype_assign<'t>(
    tape: &'t Tape,
    q_hat: Var<'t>,
    pool_matrix: &Tensor,
    alpha: f64,
) -> Result<Var<'t>> {
    if alpha <= 0.0 {
        return Err(Error::Parameter("alpha must be positive".into()));
    }
    if pool_matrix.numel() == 0 {
        return Err(Error::State("prototype_assign against an empty pool".into()));
    }
    let a = tape.constant(pool_matrix.clone());
    let cosines = q_hat.normalize_rows()?.matmul(a.transpose()?)?;
    cosines.softmax_rows(alpha)
}

/// `r = w·A + MLP(q̂)`: prototype aggregation with a residual that preserves
/// the query's own visual information. `A` stays constant under gradients.
pub fn aggregate_semantics<'t>(
    tape: &'t Tape,
    bound: &[Var<'t>],
    mlp: &AggregatorMlp,
    q_hat: Var<'t>,
    w: Var<'t>,
    pool_matrix: &Tensor,
) -> Result<Var<'t>> {
    let a = tape.constant(pool_matrix.clone());
    let pooled = w.matmul(a)?;
    let residual = mlp.forward(bound, q_hat)?;
    pooled.add(residual)
}

fn check_row_stochastic(t: &Tensor, what: &str) -> Result<()> {
    let (rows, cols) = t.dims2()?;
    for i in 0..rows {
        let sum: f64 = t.data()[i * cols..(i + 1) * cols].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "{what} row {i} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// `Σ_n Σ_j w_{n,j}·(ln w_{n,j} − ln w̃_{n,j})`, logs floored at [`LOG_FLOOR`].
pub fn kl_distill_loss<'t>(tape: &'t Tape, w: Var<'t>, w_teacher: &Tensor) -> Result<Var<'t>> {
    let wv = w.value();
    if wv.shape() != w_teacher.shape() {
        return Err(Error::Dimension(format!(
            "KL shapes disagree: {:?} vs {:?}",
            wv.shape(),
            w_teacher.shape()
        )));
    }
    check_row_stochastic(&wv, "student assignment")?;
    check_row_stochastic(w_teacher, "teacher assignment")?;
    let ln_teacher: Vec<f64> =
        w_teacher.data().iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
    let ln_teacher = tape.constant(Tensor::from_parts(w_teacher.shape().to_vec(), ln_teacher));
    let diff = w.ln_clamped(LOG_FLOOR)?.sub(ln_teacher)?;
    Ok(w.mul(diff)?.sum())
}

/// Soft cross-entropy over the matched queries: mean of `−Σ_c target·ln t`.
/// Scenes with no matched queries contribute zero (logged once).
pub fn align_loss<'t>(
    tape: &'t Tape,
    t: Var<'t>,
    matched_rows: &[usize],
    targets: &Tensor,
) -> Result<Var<'t>> {
    if matched_rows.is_empty() {
        log::debug!("align_loss skipped: no matched queries");
        return Ok(tape.scalar(0.0));
    }
    let tv = t.value();
    let (_, num_categories) = tv.dims2()?;
    let (k, tc) = targets.dims2()?;
    if k != matched_rows.len() || tc != num_categories {
        return Err(Error::Dimension(format!(
            "align targets are {k}×{tc}, expected {}×{num_categories}",
            matched_rows.len()
        )));
    }
    check_row_stochastic(&tv, "predictor distribution")?;
    check_row_stochastic(targets, "alignment targets")?;
    let picked = t.gather_rows(matched_rows)?;
    let target_const = tape.constant(targets.clone());
    let ce = picked
        .ln_clamped(LOG_FLOOR)?
        .mul(target_const)?
        .sum()
        .neg();
    ce.scale(1.0 / matched_rows.len() as f64)
}

/// `L = l_det + λ_KL·KL + λ_align·l_align`.
pub fn dpa_loss<'t>(
    l_det: Var<'t>,
    kl: Var<'t>,
    l_align: Var<'t>,
    weights: &DpaWeights,
) -> Result<Var<'t>> {
    l_det
        .add(kl.scale(weights.lambda_kl)?)?
        .add(l_align.scale(weights.lambda_align)?)
}

/// The SEM-side modules bundled.
#[derive(Debug, Clone)]
pub struct SemanticModules {
    pub head: ProjectionHead,
    pub mlp: AggregatorMlp,
    pub predictor: SemanticPredictor,
}

/// Everything the semantic stream produces for one scene.
pub struct SemanticStream<'t> {
    pub q_hat: Var<'t>,
    pub w: Var<'t>,
    pub r: Var<'t>,
    /// Row-stochastic category distribution per query.
    pub t: Var<'t>,
}

/// Runs the semantic stream over decoder queries.
///
/// With `isolate` set (the trained configuration) the queries pass through a
/// stop-gradient first, so no semantic loss can reach a DET parameter.
pub fn semantic_stream<'t>(
    tape: &'t Tape,
    bound: &[Var<'t>],
    modules: &SemanticModules,
    pool: &ConceptPool,
    alpha: f64,
    queries: Var<'t>,
    isolate: bool,
) -> Result<SemanticStream<'t>> {
    let source = if isolate { queries.stop_gradient() } else { queries };
    let pool_matrix = pool.matrix();
    let q_hat = project_queries(bound, &modules.head, source)?;
    let w = prototype_assign(tape, q_hat, &pool_matrix, alpha)?;
    let r = aggregate_semantics(tape, bound, &modules.mlp, q_hat, w, &pool_matrix)?;
    let logits = modules.predictor.forward(bound, r)?;
    let t = logits.softmax_rows(1.0)?;
    Ok(SemanticStream { q_hat, w, r, t })
}
