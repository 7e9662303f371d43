//! Dual-stream training: Hungarian-matched detection on the DET partition,
//! stop-gradient semantic distillation on the SEM partition, a cosine-annealed
//! alignment weight, online pool refinement, and teacher-free inference.

use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::config::{KlSchedule, RunConfig};
use crate::detector::{
    decode_queries, detection_cost, detection_loss, DetectionHead, LossWeights, ToyDecoder,
};
use crate::error::{Error, Result};
use crate::hungarian::hungarian_match;
use crate::io::{atomic_write, Reader, Writer};
use crate::metrics::{evaluate_predictions, Detection, EvalReport};
use crate::pool::{ConceptPool, Embedding};
use crate::rng::{stream, stream_rng};
use crate::scene::Scene;
use crate::schedule::{lambda_schedule, Direction, ScheduleConfig};
use crate::semantic::{
    align_loss, dpa_loss, kl_distill_loss, semantic_stream, AggregatorMlp, DpaWeights,
    ProjectionHead, SemanticModules, SemanticPredictor,
};
use crate::teacher::TeacherBank;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ParamSet, Partition, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
const CHECKPOINT_VERSION: u32 = 1;

/// All network components, as indices into one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Model {
    pub decoder: ToyDecoder,
    pub det_head: DetectionHead,
    pub semantic: SemanticModules,
}

impl Model {
    /// Fresh init. The semantic predictor distills the teacher's anchors into
    /// its category table and output affine.
    pub fn init(params: &mut ParamSet, cfg: &RunConfig, bank: &TeacherBank) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, stream::INIT);
        let decoder = ToyDecoder::init(
            params,
            cfg.queries,
            cfg.c,
            cfg.d,
            cfg.decoder_layers,
            cfg.decoder_heads,
            &mut rng,
        )?;
        let det_head = DetectionHead::init(params, cfg.c, cfg.num_base, &mut rng);
        let semantic = SemanticModules {
            head: ProjectionHead::init(params, cfg.c, cfg.d, &mut rng),
            mlp: AggregatorMlp::init(params, cfg.d, &mut rng),
            predictor: SemanticPredictor::init(params, bank),
        };
        Ok(Self { decoder, det_head, semantic })
    }

    /// Zero-valued skeleton in the canonical parameter order; a checkpoint
    /// loader overwrites every value.
    pub fn init_skeleton(params: &mut ParamSet, cfg: &RunConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, stream::INIT);
        let decoder = ToyDecoder::init(
            params,
            cfg.queries,
            cfg.c,
            cfg.d,
            cfg.decoder_layers,
            cfg.decoder_heads,
            &mut rng,
        )?;
        let det_head = DetectionHead::init(params, cfg.c, cfg.num_base, &mut rng);
        let semantic = SemanticModules {
            head: ProjectionHead::init(params, cfg.c, cfg.d, &mut rng),
            mlp: AggregatorMlp::init(params, cfg.d, &mut rng),
            predictor: SemanticPredictor::init_raw(params, cfg.d, cfg.num_categories()),
        };
        Ok(Self { decoder, det_head, semantic })
    }
}

/// Scalar diagnostics of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub l_det: f64,
    pub l_kl: f64,
    pub l_align: f64,
    pub lambda_t: f64,
}

/// One JSON line in the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub l_det: f64,
    pub l_kl: f64,
    pub l_align: f64,
    pub lambda_t: f64,
    pub ap50_base: f64,
    pub ap50_novel: f64,
}

/// Parameters, optimizer moments, schedule clock, RNG, pool snapshot, and
/// (during training) the teacher bank.
pub struct TrainerState {
    pub config: RunConfig,
    pub params: ParamSet,
    moments: Vec<Vec<f64>>,
    second_moments: Vec<Vec<f64>>,
    pub step: u64,
    rng: ChaCha12Rng,
    pub pool: ConceptPool,
    pub bank: Option<TeacherBank>,
    pub model: Model,
}

/// Gradients of both backward passes over the full parameter list.
pub struct StreamGradients {
    pub det_backward: Vec<Tensor>,
    pub sem_backward: Vec<Tensor>,
}

/// Frozen per-scene quantities: the Hungarian match, the teacher
/// distribution, the alignment targets, and the decoder queries as seen
/// through the stop-gradient. Everything the optimized loss treats as
/// constant is pinned here, so finite differences check exactly the function
/// the optimizer descends.
pub struct FrozenBatch {
    matchings: Vec<Vec<(usize, usize)>>,
    teacher_rows: Vec<Tensor>,
    targets: Vec<Tensor>,
    matched_rows: Vec<Vec<usize>>,
    queries: Vec<Tensor>,
}

impl FrozenBatch {
    pub fn matchings(&self) -> &[Vec<(usize, usize)>] {
        &self.matchings
    }
}

/// Where the semantic stream's queries come from when building a batch graph.
#[derive(Clone, Copy, PartialEq, Eq)]
enum SemSource {
    /// Live decoder queries behind a stop-gradient (the trained configuration).
    LiveIsolated,
    /// Live decoder queries with gradients flowing back into the decoder
    /// (the no-isolation ablation).
    LiveJoint,
    /// The frozen center-point queries as constants (finite-difference mode).
    FrozenQueries,
}

/// Which loss a gradient check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Det,
    Kl,
    Align,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Det, LossKind::Kl, LossKind::Align, LossKind::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Det => "det",
            LossKind::Kl => "kl",
            LossKind::Align => "align",
            LossKind::Total => "total",
        }
    }
}

struct BatchGraph<'t> {
    l_det: Var<'t>,
    l_kl: Var<'t>,
    l_align: Var<'t>,
    matched_q_hat: Vec<Embedding>,
}

impl TrainerState {
    pub fn new(config: RunConfig, pool: ConceptPool, bank: TeacherBank) -> Result<Self> {
        config.validate()?;
        if pool.dim() != config.d {
            return Err(Error::State(format!(
                "pool dimension {} does not match config d = {}",
                pool.dim(),
                config.d
            )));
        }
        if bank.num_categories() != config.num_categories() {
            return Err(Error::State(format!(
                "bank has {} categories, config wants {}",
                bank.num_categories(),
                config.num_categories()
            )));
        }
        bank.check_pairing(&pool)?;
        let mut params = ParamSet::new();
        let model = Model::init(&mut params, &config, &bank)?;
        let moments: Vec<Vec<f64>> =
            params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let second_moments = moments.clone();
        let rng = stream_rng(config.seed, stream::TRAIN);
        Ok(Self {
            config,
            params,
            moments,
            second_moments,
            step: 0,
            rng,
            pool,
            bank: Some(bank),
            model,
        })
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            total_steps: self.config.steps.max(1),
            lambda_max: self.config.lambda_max,
            direction: self.config.schedule_direction,
        }
    }

    pub fn lambda_align_at(&self, t: u64) -> f64 {
        lambda_schedule(t, &self.schedule())
    }

    pub fn lambda_kl_at(&self, t: u64) -> f64 {
        let base = ScheduleConfig {
            total_steps: self.config.steps.max(1),
            lambda_max: self.config.lambda_kl,
            direction: Direction::Up,
        };
        match self.config.lambda_kl_schedule {
            KlSchedule::Constant => self.config.lambda_kl,
            KlSchedule::Up => lambda_schedule(t, &base),
            KlSchedule::Down => lambda_schedule(
                t,
                &ScheduleConfig { direction: Direction::Down, ..base },
            ),
        }
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cost_class: self.config.cost_class,
            cost_box: self.config.cost_box,
            cost_giou: self.config.cost_giou,
            w_box: self.config.w_box,
            w_giou: self.config.w_giou,
            w_noobj: self.config.w_noobj,
        }
    }

    fn bank(&self) -> Result<&TeacherBank> {
        self.bank
            .as_ref()
            .ok_or_else(|| Error::State("training requires the teacher bank".into()))
    }

    fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    fn bind_const<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Deterministic batch sampling from the trainer RNG.
    pub fn next_batch_indices(&mut self, num_scenes: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..num_scenes))
            .collect()
    }

    fn tokens_tensor(scene: &Scene) -> Result<Tensor> {
        Tensor::from_rows(&scene.tokens)
    }

    /// Computes the Hungarian matchings and the frozen teacher quantities for
    /// a batch at the current parameters.
    pub fn freeze_batch(&self, scenes: &[&Scene]) -> Result<FrozenBatch> {
        let bank = self.bank()?;
        let weights = self.loss_weights();
        let tape = Tape::new();
        let bound = self.bind_const(&tape);
        let mut matchings = Vec::with_capacity(scenes.len());
        let mut teacher_rows = Vec::with_capacity(scenes.len());
        let mut targets = Vec::with_capacity(scenes.len());
        let mut matched_rows = Vec::with_capacity(scenes.len());
        let mut frozen_queries = Vec::with_capacity(scenes.len());
        for scene in scenes {
            scene.validate()?;
            let tokens = Self::tokens_tensor(scene)?;
            let (queries, _) = decode_queries(&tape, &bound, &self.model.decoder, &tokens)?;
            frozen_queries.push(queries.value());
            let (boxes, logits) = self.model.det_head.forward(&bound, queries)?;
            let cost =
                detection_cost(&boxes.value(), &logits.value(), &scene.ground_truth, &weights)?;
            let matching = hungarian_match(&cost)?;

            let s = semantic_stream(
                &tape,
                &bound,
                &self.model.semantic,
                &self.pool,
                self.config.alpha,
                queries,
                true,
            )?;
            let q_hat = s.q_hat.value();
            let mut rows = Vec::with_capacity(self.config.queries);
            for i in 0..self.config.queries {
                rows.push(bank.teacher_distribution(q_hat.row(i))?);
            }
            teacher_rows.push(Tensor::from_rows(&rows)?);

            let mut target_rows = Vec::with_capacity(matching.len());
            let mut matched = Vec::with_capacity(matching.len());
            for &(q, g) in &matching {
                target_rows.push(bank.category_targets(&scene.ground_truth[g].region_embedding)?);
                matched.push(q);
            }
            targets.push(if target_rows.is_empty() {
                Tensor::zeros(vec![0, bank.num_categories()])
            } else {
                Tensor::from_rows(&target_rows)?
            });
            matched_rows.push(matched);
            matchings.push(matching);
        }
        Ok(FrozenBatch { matchings, teacher_rows, targets, matched_rows, queries: frozen_queries })
    }

    fn build_batch_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        scenes: &[&Scene],
        frozen: &FrozenBatch,
        source: SemSource,
    ) -> Result<BatchGraph<'t>> {
        let weights = self.loss_weights();
        let scale = 1.0 / scenes.len() as f64;
        let mut l_det = tape.scalar(0.0);
        let mut l_kl = tape.scalar(0.0);
        let mut l_align = tape.scalar(0.0);
        let mut matched_q_hat = Vec::new();
        for (i, scene) in scenes.iter().enumerate() {
            let tokens = Self::tokens_tensor(scene)?;
            let (queries, _) = decode_queries(tape, bound, &self.model.decoder, &tokens)?;
            let (boxes, logits) = self.model.det_head.forward(bound, queries)?;
            let scene_det = detection_loss(
                tape,
                boxes,
                logits,
                &scene.ground_truth,
                &frozen.matchings[i],
                &self.model.det_head,
                &weights,
            )?;
            l_det = l_det.add(scene_det.scale(scale)?)?;

            let (sem_queries, isolate) = match source {
                SemSource::LiveIsolated => (queries, true),
                SemSource::LiveJoint => (queries, false),
                SemSource::FrozenQueries => (tape.constant(frozen.queries[i].clone()), false),
            };
            let s = semantic_stream(
                tape,
                bound,
                &self.model.semantic,
                &self.pool,
                self.config.alpha,
                sem_queries,
                isolate,
            )?;
            let scene_kl = kl_distill_loss(tape, s.w, &frozen.teacher_rows[i])?;
            l_kl = l_kl.add(scene_kl.scale(scale)?)?;
            let scene_align =
                align_loss(tape, s.t, &frozen.matched_rows[i], &frozen.targets[i])?;
            l_align = l_align.add(scene_align.scale(scale)?)?;

            let q_hat = s.q_hat.value();
            for &q in &frozen.matched_rows[i] {
                matched_q_hat.push(Embedding::from_unnormalized(q_hat.row(q))?);
            }
        }
        Ok(BatchGraph { l_det, l_kl, l_align, matched_q_hat })
    }

    /// One optimization step over a batch of scenes.
    ///
    /// Forward both streams, backward the detection loss into DET parameters
    /// and the semantic losses into SEM parameters (or one joint backward
    /// when gradient isolation is configured off), step each partition's
    /// SGD+momentum, refresh the pool from the stop-gradded matched
    /// projections, advance the clock. A non-finite loss aborts with the
    /// state untouched.
    pub fn train_step(&mut self, scenes: &[&Scene]) -> Result<StepMetrics> {
        if scenes.is_empty() {
            return Err(Error::Contract("train_step needs a non-empty batch".into()));
        }
        let lambda_t = self.lambda_align_at(self.step);
        let lambda_kl_t = self.lambda_kl_at(self.step);
        let isolate = self.config.gradient_isolation;

        let frozen = self.freeze_batch(scenes)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let source = if isolate { SemSource::LiveIsolated } else { SemSource::LiveJoint };
        let graph = self.build_batch_graph(&tape, &bound, scenes, &frozen, source)?;

        let metrics = StepMetrics {
            step: self.step + 1,
            l_det: graph.l_det.value().item(),
            l_kl: graph.l_kl.value().item(),
            l_align: graph.l_align.value().item(),
            lambda_t,
        };
        if !(metrics.l_det.is_finite() && metrics.l_kl.is_finite() && metrics.l_align.is_finite()) {
            return Err(Error::Numeric("non-finite loss; step aborted".into()));
        }

        if isolate {
            tape.backward(graph.l_det)?;
            let det_grads: Vec<Tensor> = bound.iter().map(|v| v.grad()).collect();
            tape.zero_grads();
            let sem_total = graph
                .l_kl
                .scale(lambda_kl_t)?
                .add(graph.l_align.scale(lambda_t)?)?;
            tape.backward(sem_total)?;
            let sem_grads: Vec<Tensor> = bound.iter().map(|v| v.grad()).collect();
            self.apply_partition(&det_grads, Partition::Det, self.config.lr_det);
            self.apply_partition(&sem_grads, Partition::Sem, self.config.lr_sem);
        } else {
            let weights = DpaWeights::new(self.config.alpha, lambda_kl_t, lambda_t)?;
            let total = dpa_loss(graph.l_det, graph.l_kl, graph.l_align, &weights)?;
            tape.backward(total)?;
            let grads: Vec<Tensor> = bound.iter().map(|v| v.grad()).collect();
            self.apply_partition(&grads, Partition::Det, self.config.lr_det);
            self.apply_partition(&grads, Partition::Sem, self.config.lr_sem);
        }

        self.pool = self.pool.momentum_update(&graph.matched_q_hat)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Adam update restricted to one partition. Both partitions share the
    /// step counter, so bias correction uses the post-increment step.
    fn apply_partition(&mut self, grads: &[Tensor], partition: Partition, lr: f64) {
        let b1 = self.config.adam_beta1;
        let b2 = self.config.adam_beta2;
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        const ADAM_EPS: f64 = 1e-8;
        for idx in 0..self.params.len() {
            if self.params.get(idx).partition != partition {
                continue;
            }
            let g = grads[idx].data();
            let m = &mut self.moments[idx];
            let v = &mut self.second_moments[idx];
            let value = self.params.get_mut(idx).value.data_mut();
            for (((vi, mi), vvi), gi) in
                value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g)
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vvi = b2 * *vvi + (1.0 - b2) * gi * gi;
                *vi -= lr * (*mi / c1) / ((*vvi / c2).sqrt() + ADAM_EPS);
            }
        }
    }

    /// Both backward passes without mutating any state; used by the gradient
    /// partition checks.
    pub fn stream_gradients(&self, scenes: &[&Scene]) -> Result<StreamGradients> {
        let frozen = self.freeze_batch(scenes)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let graph =
            self.build_batch_graph(&tape, &bound, scenes, &frozen, SemSource::LiveIsolated)?;
        tape.backward(graph.l_det)?;
        let det_backward: Vec<Tensor> = bound.iter().map(|v| v.grad()).collect();
        tape.zero_grads();
        let lambda_t = self.lambda_align_at(self.step).max(1e-3);
        let lambda_kl_t = self.lambda_kl_at(self.step).max(1e-3);
        let sem_total = graph
            .l_kl
            .scale(lambda_kl_t)?
            .add(graph.l_align.scale(lambda_t)?)?;
        tape.backward(sem_total)?;
        let sem_backward: Vec<Tensor> = bound.iter().map(|v| v.grad()).collect();
        Ok(StreamGradients { det_backward, sem_backward })
    }

    /// Loss value under a parameter override, with the batch quantities
    /// frozen; the finite-difference oracle drives this.
    pub fn frozen_loss_value(
        &self,
        scenes: &[&Scene],
        frozen: &FrozenBatch,
        kind: LossKind,
        values: &[Tensor],
    ) -> Result<f64> {
        let tape = Tape::new();
        let bound: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = self.frozen_loss(&tape, &bound, scenes, frozen, kind)?;
        Ok(loss.value().item())
    }

    /// Builds one of the named losses over an already-frozen batch. The
    /// semantic stream consumes the frozen center-point queries, mirroring
    /// what the stop-gradient makes constant during optimization.
    pub fn frozen_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        scenes: &[&Scene],
        frozen: &FrozenBatch,
        kind: LossKind,
    ) -> Result<Var<'t>> {
        let graph =
            self.build_batch_graph(tape, bound, scenes, frozen, SemSource::FrozenQueries)?;
        match kind {
            LossKind::Det => Ok(graph.l_det),
            LossKind::Kl => Ok(graph.l_kl),
            LossKind::Align => Ok(graph.l_align),
            LossKind::Total => {
                let weights = DpaWeights::new(
                    self.config.alpha,
                    self.lambda_kl_at(self.step).max(1e-3),
                    self.lambda_align_at(self.step).max(1e-3),
                )?;
                dpa_loss(graph.l_det, graph.l_kl, graph.l_align, &weights)
            }
        }
    }

    /// Teacher-free single-pass inference over one scene's tokens.
    ///
    /// Boxes and objectness come from the detection head; the category is the
    /// semantic stream's argmax over all base and novel categories; the score
    /// is objectness times the winning semantic mass.
    pub fn infer_tokens(&self, tokens: &Tensor) -> Result<Vec<Detection>> {
        if self.pool.is_empty() {
            return Err(Error::State("inference requires a loaded pool".into()));
        }
        let tape = Tape::new();
        let bound = self.bind_const(&tape);
        let (queries, _) = decode_queries(&tape, &bound, &self.model.decoder, tokens)?;
        let (boxes, logits) = self.model.det_head.forward(&bound, queries)?;
        let s = semantic_stream(
            &tape,
            &bound,
            &self.model.semantic,
            &self.pool,
            self.config.alpha,
            queries,
            true,
        )?;
        let boxes = boxes.value();
        let logits = logits.value();
        let t = s.t.value();
        let noobj = self.model.det_head.no_object_class();
        let mut out = Vec::with_capacity(self.config.queries);
        for i in 0..self.config.queries {
            let probs = crate::tensor::softmax_t(logits.row(i), 1.0)?;
            let objectness = 1.0 - probs[noobj];
            let (category, t_max) = t
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, v)| (c, *v))
                .expect("nonempty category row");
            let b = boxes.row(i);
            out.push(Detection {
                bbox: crate::boxes::BoxCxcywh {
                    cx: b[0],
                    cy: b[1],
                    w: b[2].max(1e-9),
                    h: b[3].max(1e-9),
                },
                category,
                score: (objectness * t_max).clamp(0.0, 1.0),
            });
        }
        Ok(out)
    }

    pub fn infer_scene(&self, scene: &Scene) -> Result<Vec<Detection>> {
        self.infer_tokens(&Self::tokens_tensor(scene)?)
    }

    /// Runs inference over every scene and aggregates AP metrics.
    pub fn evaluate(&self, scenes: &[Scene]) -> Result<EvalReport> {
        let started = Instant::now();
        let predictions: Vec<Vec<Detection>> = scenes
            .iter()
            .map(|s| self.infer_scene(s))
            .collect::<Result<_>>()?;
        let per_scene_ms = if scenes.is_empty() {
            0.0
        } else {
            started.elapsed().as_secs_f64() * 1000.0 / scenes.len() as f64
        };
        evaluate_predictions(&predictions, scenes, per_scene_ms)
    }

    /// Drops the teacher; the resulting state (and its checkpoints) can still
    /// run inference and evaluation but no longer train.
    pub fn strip_teacher(&mut self) {
        self.bank = None;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(self.bank.is_some() as u8);
        w.u64(self.step);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        let cfg_text = self.config.to_text();
        w.u32(cfg_text.len() as u32);
        w.bytes(cfg_text.as_bytes());
        w.u32(self.params.len() as u32);
        for (idx, p) in self.params.iter().enumerate() {
            let name = p.name.as_bytes();
            w.u32(name.len() as u32);
            w.bytes(name);
            w.u8(p.partition.to_byte());
            w.u8(p.value.shape().len() as u8);
            for &dim in p.value.shape() {
                w.u32(dim as u32);
            }
            for &v in p.value.data() {
                w.f64(v);
            }
            for &m in &self.moments[idx] {
                w.f64(m);
            }
            for &m in &self.second_moments[idx] {
                w.f64(m);
            }
        }
        let pool_bytes = self.pool.to_bytes();
        w.u32(pool_bytes.len() as u32);
        w.bytes(&pool_bytes);
        if let Some(bank) = &self.bank {
            let bank_bytes = bank.to_bytes();
            w.u32(bank_bytes.len() as u32);
            w.bytes(&bank_bytes);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.bytes(4, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic (expected \"PDCK\")".into()));
        }
        let version = r.u32("checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let has_bank = r.u8("bank flag")? != 0;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.bytes(32, "rng seed")?.try_into().unwrap();
        let rng_stream = r.u64("rng stream")?;
        let word_pos = r.u128("rng word position")?;
        let cfg_len = r.u32("config length")? as usize;
        let cfg_text = std::str::from_utf8(r.bytes(cfg_len, "config text")?)
            .map_err(|e| Error::Format(format!("config text: {e}")))?;
        let (config, _) = crate::config::RunConfig::parse(cfg_text)
            .map_err(|e| Error::Format(format!("embedded config: {e}")))?;

        let mut params = ParamSet::new();
        let model = Model::init_skeleton(&mut params, &config)
            .map_err(|e| Error::Format(format!("rebuilding model: {e}")))?;
        let mut moments: Vec<Vec<f64>> =
            params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let mut second_moments = moments.clone();

        let count = r.u32("parameter count")? as usize;
        if count != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameters, model expects {}",
                params.len()
            )));
        }
        let mut filled = vec![false; params.len()];
        for _ in 0..count {
            let name_len = r.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(r.bytes(name_len, "parameter name")?)
                .map_err(|e| Error::Format(format!("parameter name: {e}")))?
                .to_string();
            let partition = Partition::from_byte(r.u8(&format!("{name} partition"))?)?;
            let ndims = r.u8(&format!("{name} rank"))? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u32(&format!("{name} shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f64(&format!("{name} values"))?);
            }
            let mut moment = Vec::with_capacity(numel);
            for _ in 0..numel {
                moment.push(r.f64(&format!("{name} moments"))?);
            }
            let mut second_moment = Vec::with_capacity(numel);
            for _ in 0..numel {
                second_moment.push(r.f64(&format!("{name} second moments"))?);
            }
            let idx = params
                .index_of(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
            let p = params.get_mut(idx);
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {shape:?}, model expects {:?}",
                    p.value.shape()
                )));
            }
            if p.partition != partition {
                return Err(Error::Format(format!("parameter {name:?} has wrong partition")));
            }
            p.value = Tensor::new(shape, values)
                .map_err(|e| Error::Format(format!("parameter {name:?}: {e}")))?
                .with_requires_grad(true);
            moments[idx] = moment;
            second_moments[idx] = second_moment;
            filled[idx] = true;
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(Error::Format(format!(
                "checkpoint missing parameter {:?}",
                params.get(missing).name
            )));
        }

        let pool_len = r.u32("pool length")? as usize;
        let pool = ConceptPool::from_bytes(r.bytes(pool_len, "pool bytes")?)?;
        let bank = if has_bank {
            let bank_len = r.u32("bank length")? as usize;
            Some(TeacherBank::from_bytes(r.bytes(bank_len, "bank bytes")?)?)
        } else {
            None
        };
        r.expect_eof("checkpoint")?;

        if pool.dim() != config.d {
            return Err(Error::Format("pool dimension disagrees with config".into()));
        }
        if let Some(b) = &bank {
            b.check_pairing(&pool)
                .map_err(|e| Error::Format(format!("teacher/pool pairing: {e}")))?;
        }

        let mut rng = ChaCha12Rng::from_seed(seed);
        rng.set_stream(rng_stream);
        rng.set_word_pos(word_pos);

        Ok(Self { config, params, moments, second_moments, step, rng, pool, bank, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Runs `steps` training steps, emitting a metrics record (with a fresh eval
/// pass) and a checkpoint callback every `log_interval` steps.
pub fn train_loop(
    state: &mut TrainerState,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(&TrainerState) -> Result<()>,
) -> Result<()> {
    if train_scenes.is_empty() && state.config.steps > state.step {
        return Err(Error::Contract("training requires at least one scene".into()));
    }
    while state.step < state.config.steps {
        let indices = state.next_batch_indices(train_scenes.len());
        let batch: Vec<&Scene> = indices.iter().map(|&i| &train_scenes[i]).collect();
        let m = state.train_step(&batch)?;
        if m.step % state.config.log_interval == 0 || m.step == state.config.steps {
            let report = state.evaluate(eval_scenes)?;
            let record = MetricsRecord {
                step: m.step,
                l_det: m.l_det,
                l_kl: m.l_kl,
                l_align: m.l_align,
                lambda_t: m.lambda_t,
                ap50_base: report.ap50_base.ok_or_else(|| {
                    Error::UndefinedMetric("eval set has no base ground truth".into())
                })?,
                ap50_novel: report.ap50_novel.ok_or_else(|| {
                    Error::UndefinedMetric("eval set has no novel ground truth".into())
                })?,
            };
            on_record(&record)?;
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

/// Worst relative finite-difference error per loss plus the partition check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub losses: Vec<GradCheckRow>,
    pub partition_violations: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub loss: String,
    pub worst_rel_error: f64,
    pub pass: bool,
}

/// Bit-exactness audit of the two backward streams against the partition
/// labels. Returns one line per violating parameter.
pub fn partition_violations(params: &ParamSet, grads: &StreamGradients) -> Vec<String> {
    let mut violations = Vec::new();
    for (idx, p) in params.iter().enumerate() {
        match p.partition {
            Partition::Sem => {
                if grads.det_backward[idx].data().iter().any(|&g| g != 0.0) {
                    violations.push(format!(
                        "SEM parameter {:?} receives nonzero gradient from the detection loss",
                        p.name
                    ));
                }
            }
            Partition::Det => {
                if grads.sem_backward[idx].data().iter().any(|&g| g != 0.0) {
                    violations.push(format!(
                        "DET parameter {:?} receives nonzero gradient from the semantic losses",
                        p.name
                    ));
                }
            }
        }
    }
    violations
}

/// End-to-end gradient audit on a small synthetic instance: finite
/// differences for every loss, plus the partition check. `inject_mislabel`
/// deliberately flips one partition label to prove the check can fail.
pub fn run_gradcheck(cfg: &RunConfig, seed: u64, inject_mislabel: bool) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    // Shrink to a gradcheck-sized instance.
    cfg.num_base = cfg.num_base.min(4).max(2);
    cfg.num_novel = cfg.num_novel.min(2).max(1);
    cfg.m1 = cfg.m1.min(4);
    cfg.m2_cap = cfg.m2_cap.min(8);
    cfg.pairs_per_category = cfg.pairs_per_category.min(24);
    cfg.queries = cfg.queries.min(6).max(cfg.max_objects.min(4));
    cfg.max_objects = cfg.max_objects.min(4);
    cfg.min_objects = cfg.min_objects.min(cfg.max_objects);
    cfg.train_scenes = 2;
    cfg.eval_scenes = 8;
    cfg.steps = cfg.steps.max(1);
    cfg.validate()?;

    let prepared = crate::pipeline::prepare_pool(&cfg)?;
    let spec = crate::scene::DatasetSpec {
        num_base: cfg.num_base,
        num_novel: cfg.num_novel,
        train_scenes: cfg.train_scenes,
        eval_scenes: cfg.eval_scenes,
        min_objects: cfg.min_objects,
        max_objects: cfg.max_objects,
        distractors: cfg.distractors,
        novel_fraction: cfg.novel_fraction,
        token_width: cfg.c,
        sigma_token: cfg.sigma_token,
        seed: cfg.seed,
    };
    let (train, _) = crate::scene::generate_dataset(&spec, &prepared.bank)?;
    let mut state = TrainerState::new(cfg, prepared.pool, prepared.bank)?;
    if inject_mislabel {
        let idx = state
            .params
            .index_of("dec.queries")
            .expect("decoder queries always exist");
        state.params.get_mut(idx).partition = Partition::Sem;
    }
    let scenes: Vec<&Scene> = train.iter().collect();

    // Finite differences per loss over sampled parameter coordinates.
    let frozen = state.freeze_batch(&scenes)?;
    let inputs: Vec<Tensor> = state.params.iter().map(|p| p.value.clone()).collect();
    let mut fd_rng = stream_rng(seed, stream::GRADCHECK);
    let mut losses = Vec::new();
    for kind in LossKind::ALL {
        let worst = crate::gradcheck::check_grad_fn_sampled(
            &inputs,
            |tape, vars| {
                state
                    .frozen_loss(tape, vars, &scenes, &frozen, kind)
                    .expect("frozen loss builds")
            },
            24,
            &mut fd_rng,
        );
        losses.push(GradCheckRow {
            loss: kind.as_str().to_string(),
            worst_rel_error: worst,
            pass: worst < crate::gradcheck::FD_TOLERANCE,
        });
    }

    let grads = state.stream_gradients(&scenes)?;
    let partition_violations = partition_violations(&state.params, &grads);
    let pass = losses.iter().all(|row| row.pass) && partition_violations.is_empty();
    Ok(GradCheckReport { losses, partition_violations, pass })
}
