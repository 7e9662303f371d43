//! Localization stream: a small cross-attention decoder over scene tokens,
//! the detection head, and the Hungarian-matched detection loss.
//!
//! Every parameter created here carries the DET partition label.

use rand_chacha::ChaCha12Rng;

use crate::boxes::BoxCxcywh;
use crate::error::{Error, Result};
use crate::scene::BoxAnnotation;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{glorot, softmax_t, ParamSet, Partition, Tensor};

/// One decoder block: multi-head cross-attention (queries attend to scene
/// tokens) followed by a feed-forward layer, both residual.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: usize,
    pub bo: usize,
    pub wf1: usize,
    pub bf1: usize,
    pub wf2: usize,
    pub bf2: usize,
}

/// Learnable query seeds plus `L` decoder blocks.
#[derive(Debug, Clone)]
pub struct ToyDecoder {
    pub query_seeds: usize,
    pub layers: Vec<DecoderLayer>,
    pub num_queries: usize,
    pub width: usize,
    pub heads: usize,
}

/// Attention query/key init scale; with identity-slice projections this makes
/// the initial attention a sharp positional matching kernel.
const ATTN_INIT_SCALE: f64 = 8.0;

/// Queries start as position codes of a coarse anchor grid over the unit
/// square (content block zeroed), so each one is born attending near its own
/// region regardless of object category.
fn anchor_grid_seeds(num_queries: usize, width: usize, content_width: usize) -> Tensor {
    let grid = (num_queries as f64).sqrt().ceil() as usize;
    let mut rows = Vec::with_capacity(num_queries);
    'outer: for gy in 0..grid {
        for gx in 0..grid {
            let anchor = BoxCxcywh {
                cx: (gx as f64 + 0.5) / grid as f64,
                cy: (gy as f64 + 0.5) / grid as f64,
                w: 0.25,
                h: 0.25,
            };
            let mut row = vec![0.0; content_width];
            row.extend(crate::scene::position_code(&anchor, width - content_width));
            rows.push(row);
            if rows.len() == num_queries {
                break 'outer;
            }
        }
    }
    Tensor::from_rows(&rows).expect("grid seeds")
}

/// Identity column-slice `C×dh` picking out one head's coordinate block.
fn identity_slice(width: usize, dh: usize, head: usize, scale: f64) -> Tensor {
    let mut data = vec![0.0; width * dh];
    for c in 0..dh {
        data[(head * dh + c) * dh + c] = scale;
    }
    Tensor::from_parts(vec![width, dh], data)
}

fn identity_square(width: usize) -> Tensor {
    let mut data = vec![0.0; width * width];
    for c in 0..width {
        data[c * width + c] = 1.0;
    }
    Tensor::from_parts(vec![width, width], data)
}

impl ToyDecoder {
    pub fn init(
        params: &mut ParamSet,
        num_queries: usize,
        width: usize,
        content_width: usize,
        num_layers: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if width % heads != 0 {
            return Err(Error::Parameter(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if content_width >= width || (width - content_width) % 8 != 0 {
            return Err(Error::Parameter(
                "decoder width must exceed the content width by a multiple of 8".into(),
            ));
        }
        let dh = width / heads;
        let ff = 2 * width;
        let query_seeds = params.push(
            "dec.queries",
            Partition::Det,
            anchor_grid_seeds(num_queries, width, content_width),
        );
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut wq = Vec::with_capacity(heads);
            let mut wk = Vec::with_capacity(heads);
            let mut wv = Vec::with_capacity(heads);
            for h in 0..heads {
                // Queries/keys start as a scaled positional matching kernel;
                // values and the output projection start as a plain copy of
                // the attended token. The block is then free to train.
                wq.push(params.push(
                    format!("dec.l{l}.h{h}.wq"),
                    Partition::Det,
                    identity_slice(width, dh, h, ATTN_INIT_SCALE),
                ));
                wk.push(params.push(
                    format!("dec.l{l}.h{h}.wk"),
                    Partition::Det,
                    identity_slice(width, dh, h, ATTN_INIT_SCALE),
                ));
                wv.push(params.push(
                    format!("dec.l{l}.h{h}.wv"),
                    Partition::Det,
                    identity_slice(width, dh, h, 1.0),
                ));
            }
            layers.push(DecoderLayer {
                wq,
                wk,
                wv,
                wo: params.push(format!("dec.l{l}.wo"), Partition::Det, identity_square(width)),
                bo: params.push(format!("dec.l{l}.bo"), Partition::Det, Tensor::zeros(vec![width])),
                wf1: params.push(format!("dec.l{l}.wf1"), Partition::Det, glorot(width, ff, rng)),
                bf1: params.push(format!("dec.l{l}.bf1"), Partition::Det, Tensor::zeros(vec![ff])),
                // Zero-init of the second FFN affine keeps each block an
                // exact token-copy at step 0.
                wf2: params.push(format!("dec.l{l}.wf2"), Partition::Det, Tensor::zeros(vec![ff, width])),
                bf2: params.push(format!("dec.l{l}.bf2"), Partition::Det, Tensor::zeros(vec![width])),
            });
        }
        Ok(Self { query_seeds, layers, num_queries, width, heads })
    }
}

/// Decoder forward pass. Also returns the per-layer, per-head attention
/// matrices (each row sums to 1).
pub fn decode_queries<'t>(
    tape: &'t Tape,
    bound: &[Var<'t>],
    decoder: &ToyDecoder,
    tokens: &Tensor,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let (_, token_width) = tokens.dims2()?;
    if token_width != decoder.width {
        return Err(Error::Dimension(format!(
            "decoder width {} but tokens have width {token_width}",
            decoder.width
        )));
    }
    let tok = tape.constant(tokens.clone());
    let dh = decoder.width / decoder.heads;
    let temp = (dh as f64).sqrt();
    let mut x = bound[decoder.query_seeds];
    let mut attention_maps = Vec::new();
    for layer in &decoder.layers {
        let mut head_outputs = Vec::with_capacity(decoder.heads);
        for h in 0..decoder.heads {
            let q = x.matmul(bound[layer.wq[h]])?;
            let k = tok.matmul(bound[layer.wk[h]])?;
            let v = tok.matmul(bound[layer.wv[h]])?;
            let attn = q.matmul(k.transpose()?)?.softmax_rows(temp)?;
            attention_maps.push(attn);
            head_outputs.push(attn.matmul(v)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        let attn_out = merged.matmul(bound[layer.wo])?.add_row(bound[layer.bo])?;
        x = x.add(attn_out)?;
        let ff = x
            .matmul(bound[layer.wf1])?
            .add_row(bound[layer.bf1])?
            .tanh()
            .matmul(bound[layer.wf2])?
            .add_row(bound[layer.bf2])?;
        x = x.add(ff)?;
    }
    Ok((x, attention_maps))
}

/// Box regressor and class/objectness logits with a trailing no-object slot.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub w_box: usize,
    pub b_box: usize,
    pub w_cls: usize,
    pub b_cls: usize,
    pub num_base: usize,
}

impl DetectionHead {
    pub fn init(params: &mut ParamSet, width: usize, num_base: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            w_box: params.push("det.w_box", Partition::Det, glorot(width, 4, rng)),
            b_box: params.push("det.b_box", Partition::Det, Tensor::zeros(vec![4])),
            w_cls: params.push("det.w_cls", Partition::Det, glorot(width, num_base + 1, rng)),
            b_cls: params.push("det.b_cls", Partition::Det, Tensor::zeros(vec![num_base + 1])),
            num_base,
        }
    }

    pub fn no_object_class(&self) -> usize {
        self.num_base
    }

    /// `(boxes, class_logits)`: boxes are sigmoid-bounded center-size rows.
    pub fn forward<'t>(&self, bound: &[Var<'t>], queries: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let boxes = queries
            .matmul(bound[self.w_box])?
            .add_row(bound[self.b_box])?
            .sigmoid();
        let logits = queries.matmul(bound[self.w_cls])?.add_row(bound[self.b_cls])?;
        Ok((boxes, logits))
    }
}

/// Weights of the matching cost and the detection loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub cost_class: f64,
    pub cost_box: f64,
    pub cost_giou: f64,
    pub w_box: f64,
    pub w_giou: f64,
    pub w_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cost_class: 2.0, cost_box: 5.0, cost_giou: 2.0, w_box: 5.0, w_giou: 2.0, w_noobj: 0.1 }
    }
}

/// Matching cost matrix (plain values; the match itself is not differentiated):
/// `cost[n][k] = cost_class·(1 − p_n(c_k)) + cost_box·L1 + cost_giou·(1 − GIoU)`.
pub fn detection_cost(
    boxes: &Tensor,
    class_logits: &Tensor,
    ground_truth: &[BoxAnnotation],
    weights: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let (n, _) = boxes.dims2()?;
    let mut cost = vec![vec![0.0; ground_truth.len()]; n];
    for i in 0..n {
        let prob = softmax_t(class_logits.row(i), 1.0)?;
        let pred = row_to_box(boxes.row(i));
        for (k, ann) in ground_truth.iter().enumerate() {
            let l1: f64 = boxes.row(i)
                .iter()
                .zip(&<[f64; 4]>::from(ann.bbox))
                .map(|(a, b)| (a - b).abs())
                .sum();
            let g = crate::boxes::giou(&pred.to_xyxy(), &ann.bbox.to_xyxy())?;
            let p = prob.get(ann.category).copied().ok_or_else(|| {
                Error::Contract(format!("ground-truth category {} out of head range", ann.category))
            })?;
            cost[i][k] = weights.cost_class * (1.0 - p)
                + weights.cost_box * l1
                + weights.cost_giou * (1.0 - g);
        }
    }
    Ok(cost)
}

fn row_to_box(row: &[f64]) -> BoxCxcywh {
    // Sigmoid output can underflow to an exact zero extent; keep the box
    // usable for IoU as a sliver instead.
    BoxCxcywh { cx: row[0], cy: row[1], w: row[2].max(1e-9), h: row[3].max(1e-9) }
}

/// Differentiable GIoU per matched pair: predicted boxes `K×4` (center-size)
/// against constant ground-truth boxes.
fn giou_terms<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    gt: &[BoxAnnotation],
) -> Result<Var<'t>> {
    let k = gt.len();
    let col_consts = |f: fn(&BoxCxcywh) -> f64| -> Var<'t> {
        tape.constant(Tensor::vector(gt.iter().map(|a| f(&a.bbox)).collect()))
    };
    let gx1 = col_consts(|b| b.cx - b.w / 2.0);
    let gy1 = col_consts(|b| b.cy - b.h / 2.0);
    let gx2 = col_consts(|b| b.cx + b.w / 2.0);
    let gy2 = col_consts(|b| b.cy + b.h / 2.0);
    let garea = tape.constant(Tensor::vector(gt.iter().map(|a| a.bbox.w * a.bbox.h).collect()));

    let pcx = pred.column(0)?;
    let pcy = pred.column(1)?;
    let pw = pred.column(2)?;
    let ph = pred.column(3)?;
    let px1 = pcx.sub(pw.scale(0.5)?)?;
    let px2 = pcx.add(pw.scale(0.5)?)?;
    let py1 = pcy.sub(ph.scale(0.5)?)?;
    let py2 = pcy.add(ph.scale(0.5)?)?;

    let iw = px2.emin(gx2)?.sub(px1.emax(gx1)?)?.relu();
    let ih = py2.emin(gy2)?.sub(py1.emax(gy1)?)?.relu();
    let inter = iw.mul(ih)?;
    let parea = pw.mul(ph)?;
    let union = parea.add(garea)?.sub(inter)?;
    let iou = inter.div(union)?;

    let ew = px2.emax(gx2)?.sub(px1.emin(gx1)?)?;
    let eh = py2.emax(gy2)?.sub(py1.emin(gy1)?)?;
    let enclose = ew.mul(eh)?;
    let giou = iou.sub(enclose.sub(union)?.div(enclose)?)?;
    debug_assert_eq!(giou.value().numel(), k);
    Ok(giou)
}

/// Hungarian-matched detection loss.
///
/// Matched queries pay class NLL plus weighted L1 and (1 − GIoU) box terms;
/// unmatched queries pay a down-weighted NLL of the no-object slot. Class
/// terms average over all queries, box terms over matched pairs.
pub fn detection_loss<'t>(
    tape: &'t Tape,
    boxes: Var<'t>,
    class_logits: Var<'t>,
    ground_truth: &[BoxAnnotation],
    matching: &[(usize, usize)],
    head: &DetectionHead,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let (n, _) = boxes.value().dims2()?;
    for ann in ground_truth {
        ann.bbox.validate()?;
        if ann.category >= head.num_base {
            return Err(Error::Contract(format!(
                "category {} not trainable by a head over {} base classes",
                ann.category, head.num_base
            )));
        }
    }
    if matching.len() != ground_truth.len() {
        return Err(Error::Contract("matching does not cover every ground truth".into()));
    }

    let log_probs = class_logits.log_softmax_rows()?;
    let mut matched_queries = vec![usize::MAX; n];
    for &(q, g) in matching {
        if q >= n || g >= ground_truth.len() {
            return Err(Error::Contract("matching index out of bounds".into()));
        }
        matched_queries[q] = g;
    }

    let matched_coords: Vec<(usize, usize)> = matching
        .iter()
        .map(|&(q, g)| (q, ground_truth[g].category))
        .collect();
    let unmatched_coords: Vec<(usize, usize)> = (0..n)
        .filter(|&q| matched_queries[q] == usize::MAX)
        .map(|q| (q, head.no_object_class()))
        .collect();

    let mut class_loss = log_probs.gather_elems(&matched_coords)?.sum().neg();
    if !unmatched_coords.is_empty() {
        let noobj = log_probs
            .gather_elems(&unmatched_coords)?
            .sum()
            .neg()
            .scale(weights.w_noobj)?;
        class_loss = class_loss.add(noobj)?;
    }
    let class_loss = class_loss.scale(1.0 / n as f64)?;

    if matching.is_empty() {
        return Ok(class_loss);
    }

    let order: Vec<usize> = matching.iter().map(|&(q, _)| q).collect();
    let gt_in_order: Vec<BoxAnnotation> =
        matching.iter().map(|&(_, g)| ground_truth[g].clone()).collect();
    let matched_boxes = boxes.gather_rows(&order)?;

    let gt_flat: Vec<f64> = gt_in_order
        .iter()
        .flat_map(|a| <[f64; 4]>::from(a.bbox))
        .collect();
    let gt_const = tape.constant(Tensor::from_parts(vec![gt_in_order.len(), 4], gt_flat));
    let l1 = matched_boxes.sub(gt_const)?.abs().sum();

    let giou = giou_terms(tape, matched_boxes, &gt_in_order)?;
    let giou_loss = giou.neg().add_const(1.0)?.sum();

    let box_loss = l1
        .scale(weights.w_box)?
        .add(giou_loss.scale(weights.w_giou)?)?
        .scale(1.0 / matching.len() as f64)?;
    class_loss.add(box_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grad_fn;
    use crate::hungarian::hungarian_match;
    use crate::rng::{stream, stream_rng};
    use rand::RngExt;
    use approx::assert_abs_diff_eq;

    fn ann(bbox: [f64; 4], category: usize) -> BoxAnnotation {
        BoxAnnotation { bbox: bbox.into(), category, is_novel: false, region_embedding: vec![] }
    }

    #[test]
    fn single_token_gets_all_attention() {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(0, stream::INIT);
        let decoder = ToyDecoder::init(&mut params, 3, 16, 8, 1, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let bound: Vec<_> = params.iter().map(|p| tape.param(p.value.clone())).collect();
        let tokens = Tensor::from_rows(&[vec![0.3; 16]]).unwrap();
        let (_, attns) = decode_queries(&tape, &bound, &decoder, &tokens).unwrap();
        for attn in attns {
            for v in attn.value().data() {
                assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(1, stream::INIT);
        let decoder = ToyDecoder::init(&mut params, 4, 16, 8, 2, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let bound: Vec<_> = params.iter().map(|p| tape.param(p.value.clone())).collect();
        let tokens = Tensor::from_rows(&[
            vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.0, 0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.0],
            vec![-0.6, 0.4, 0.9, -0.3, 0.1, 0.5, -0.2, 0.8, -0.6, 0.4, 0.9, -0.3, 0.1, 0.5, -0.2, 0.8],
            vec![0.05, 0.15, -0.35, 0.45, -0.55, 0.65, 0.25, -0.05, 0.05, 0.15, -0.35, 0.45, -0.55, 0.65, 0.25, -0.05],
        ])
        .unwrap();
        let (queries, attns) = decode_queries(&tape, &bound, &decoder, &tokens).unwrap();
        assert_eq!(queries.value().shape(), &[4, 16]);
        assert_eq!(attns.len(), 2 * 2);
        for attn in attns {
            let v = attn.value();
            let (rows, cols) = v.dims2().unwrap();
            assert_eq!(cols, 3);
            for i in 0..rows {
                let sum: f64 = v.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoder_rejects_width_mismatch() {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(2, stream::INIT);
        let decoder = ToyDecoder::init(&mut params, 2, 16, 8, 1, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let bound: Vec<_> = params.iter().map(|p| tape.param(p.value.clone())).collect();
        let tokens = Tensor::from_rows(&[vec![0.0; 6]]).unwrap();
        assert!(matches!(
            decode_queries(&tape, &bound, &decoder, &tokens),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn decoder_gradient_matches_fd() {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(3, stream::INIT);
        let decoder = ToyDecoder::init(&mut params, 2, 16, 8, 1, 2, &mut rng).unwrap();
        // Check the backward formulas at generic parameter values: the
        // structured production init deliberately saturates the attention
        // softmax, where true gradients vanish and relative FD error is
        // meaningless.
        let inputs: Vec<Tensor> = params
            .iter()
            .map(|p| {
                let data =
                    (0..p.value.numel()).map(|_| rng.random_range(-0.5..0.5)).collect();
                Tensor::from_parts(p.value.shape().to_vec(), data)
            })
            .collect();
        let tokens = Tensor::from_rows(&[
            vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.0, -0.1, 0.25, -0.3, 0.6, 0.45, -0.7, 0.1, 0.2],
            vec![-0.6, 0.4, 0.9, -0.3, 0.1, 0.5, -0.2, 0.8, 0.5, -0.15, 0.3, -0.45, 0.2, 0.65, -0.5, 0.05],
        ])
        .unwrap();
        let d2 = decoder.clone();
        let worst = check_grad_fn(&inputs, move |tape, vars| {
            let (q, _) = decode_queries(tape, vars, &d2, &tokens).unwrap();
            q.tanh().sum()
        });
        assert!(worst < 1e-4, "decoder FD error {worst:e}");
    }

    /// Builds a 1-query instance with controllable predictions.
    fn one_query_instance<'t>(
        tape: &'t Tape,
        box_logits: [f64; 4],
        class_logits: Vec<f64>,
    ) -> (Var<'t>, Var<'t>) {
        let b = tape.param(Tensor::from_rows(&[box_logits.to_vec()]).unwrap()).sigmoid();
        let c = tape.param(Tensor::from_rows(&[class_logits]).unwrap());
        (b, c)
    }

    fn head_for(num_base: usize) -> DetectionHead {
        DetectionHead { w_box: 0, b_box: 0, w_cls: 0, b_cls: 0, num_base }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn exact_prediction_has_near_zero_loss() {
        let tape = Tape::new();
        let gt = vec![ann([0.5, 0.5, 0.4, 0.2], 0)];
        let (b, c) = one_query_instance(
            &tape,
            [logit(0.5), logit(0.5), logit(0.4), logit(0.2)],
            vec![12.0, -12.0],
        );
        let loss = detection_loss(
            &tape,
            b,
            c,
            &gt,
            &[(0, 0)],
            &head_for(1),
            &LossWeights::default(),
        )
        .unwrap();
        assert!(loss.value().item() < 0.01, "loss {}", loss.value().item());
    }

    #[test]
    fn identical_boxes_contribute_zero_giou_term() {
        let tape = Tape::new();
        let gt = vec![ann([0.5, 0.5, 0.4, 0.2], 0)];
        let (b, _) = one_query_instance(
            &tape,
            [logit(0.5), logit(0.5), logit(0.4), logit(0.2)],
            vec![0.0, 0.0],
        );
        let giou = giou_terms(&tape, b, &gt).unwrap();
        assert_abs_diff_eq!(giou.value().item(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn loss_matches_hand_summed_terms() {
        let tape = Tape::new();
        let gt = vec![ann([0.5, 0.5, 0.4, 0.2], 0)];
        let box_raw = [0.1f64, -0.3, 0.2, -0.5];
        let cls = vec![0.7, -0.4];
        let (b, c) = one_query_instance(&tape, box_raw, cls.clone());
        let w = LossWeights::default();
        let loss =
            detection_loss(&tape, b, c, &gt, &[(0, 0)], &head_for(1), &w).unwrap();

        // Hand-summed oracle along the plain (non-tape) path.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let pb = BoxCxcywh {
            cx: sig(box_raw[0]),
            cy: sig(box_raw[1]),
            w: sig(box_raw[2]),
            h: sig(box_raw[3]),
        };
        let probs = softmax_t(&cls, 1.0).unwrap();
        let nll = -probs[0].ln();
        let l1: f64 = [pb.cx - 0.5, pb.cy - 0.5, pb.w - 0.4, pb.h - 0.2]
            .iter()
            .map(|v| v.abs())
            .sum();
        let g = crate::boxes::giou(&pb.to_xyxy(), &gt[0].bbox.to_xyxy()).unwrap();
        let expect = nll + w.w_box * l1 + w.w_giou * (1.0 - g);
        assert_abs_diff_eq!(loss.value().item(), expect, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_ground_truth_is_rejected() {
        let tape = Tape::new();
        let gt = vec![ann([0.5, 0.5, 0.0, 0.2], 0)];
        let (b, c) = one_query_instance(&tape, [0.0; 4], vec![0.0, 0.0]);
        assert!(matches!(
            detection_loss(&tape, b, c, &gt, &[(0, 0)], &head_for(1), &LossWeights::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn detection_loss_gradient_matches_fd() {
        let gt = vec![
            ann([0.3, 0.4, 0.25, 0.3], 1),
            ann([0.7, 0.6, 0.2, 0.25], 0),
        ];
        let weights = LossWeights::default();
        let head = head_for(3);
        // Raw (pre-sigmoid) boxes and logits for 4 queries as parameters.
        let raw_boxes = Tensor::from_rows(&[
            vec![0.2, 0.3, -0.4, 0.1],
            vec![-0.5, 0.2, 0.3, -0.2],
            vec![0.7, -0.1, 0.2, 0.4],
            vec![-0.3, -0.6, 0.15, 0.35],
        ])
        .unwrap();
        let raw_logits = Tensor::from_rows(&[
            vec![0.2, -0.3, 0.5, 0.1],
            vec![0.6, 0.2, -0.4, 0.3],
            vec![-0.2, 0.8, 0.1, -0.5],
            vec![0.3, 0.1, 0.2, 0.6],
        ])
        .unwrap();
        // Fixed matching (computed once) so FD perturbations keep it stable.
        let matching = {
            let tape = Tape::new();
            let b = tape.param(raw_boxes.clone()).sigmoid();
            let cost = detection_cost(&b.value(), &raw_logits, &gt, &weights).unwrap();
            hungarian_match(&cost).unwrap()
        };
        let worst = check_grad_fn(&[raw_boxes, raw_logits], move |tape, vars| {
            let b = vars[0].sigmoid();
            detection_loss(tape, b, vars[1], &gt, &matching, &head, &weights).unwrap()
        });
        assert!(worst < 1e-4, "detection loss FD error {worst:e}");
    }

    #[test]
    fn cost_prefers_the_right_query() {
        let weights = LossWeights::default();
        let gt = vec![ann([0.25, 0.25, 0.2, 0.2], 0)];
        let boxes = Tensor::from_rows(&[
            vec![0.25, 0.25, 0.2, 0.2], // exact hit
            vec![0.8, 0.8, 0.1, 0.1],
        ])
        .unwrap();
        let logits = Tensor::from_rows(&[vec![3.0, -3.0], vec![-3.0, 3.0]]).unwrap();
        let cost = detection_cost(&boxes, &logits, &gt, &weights).unwrap();
        assert!(cost[0][0] < cost[1][0]);
        let matching = hungarian_match(&cost).unwrap();
        assert_eq!(matching, vec![(0, 0)]);
    }
}
