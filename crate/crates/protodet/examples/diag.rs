//! Scratch diagnostic: watch each subsystem learn (or fail to).

use protodet::config::RunConfig;
use protodet::pipeline::prepare_pool;
use protodet::scene::{generate_dataset, DatasetSpec};
use protodet::tensor::cosine_sim;
use protodet::trainer::TrainerState;

fn main() {
    let mut cfg = RunConfig::default();
    let args: Vec<String> = std::env::args().collect();
    for pair in args.iter().skip(1) {
        let (k, v) = pair.split_once('=').expect("key=value");
        cfg.apply_kv(k, v).expect("valid key");
    }
    cfg.validate().unwrap();

    let prepared = prepare_pool(&cfg).unwrap();
    let spec = DatasetSpec {
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
    let (train, eval) = generate_dataset(&spec, &prepared.bank).unwrap();
    let bank = prepared.bank.clone();
    let mut state = TrainerState::new(cfg.clone(), prepared.pool, prepared.bank).unwrap();

    println!(
        "pool: m1={} m2={} | scenes: {} train / {} eval",
        state.pool.m1(),
        state.pool.m2(),
        train.len(),
        eval.len()
    );

    while state.step < cfg.steps {
        let idx = state.next_batch_indices(train.len());
        let batch: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
        let m = match state.train_step(&batch) {
            Ok(m) => m,
            Err(e) => {
                println!("ABORT at step {}: {e}", state.step);
                return;
            }
        };
        if m.step % cfg.log_interval == 0 || m.step == cfg.steps {
            let report = state.evaluate(&eval).unwrap();
            // A/P pairing integrity: worst cos between pool row and teacher P row.
            let p = bank.textual_prototypes().unwrap();
            let worst_ap = (0..state.pool.len())
                .map(|j| cosine_sim(state.pool.prototype(j), &p[j]).unwrap())
                .fold(f64::INFINITY, f64::min);
            // Class-agnostic localization: greedy best-IoU recall at 0.5 plus
            // semantic category accuracy on those localized objects.
            let mut gt_count = [0usize; 2];
            let mut localized = [0usize; 2];
            let mut correct_cat = [0usize; 2];
            for scene in &eval {
                let dets = state.infer_scene(scene).unwrap();
                for ann in &scene.ground_truth {
                    let side = ann.is_novel as usize;
                    gt_count[side] += 1;
                    let best = dets
                        .iter()
                        .map(|d| {
                            (
                                protodet::boxes::iou(
                                    &d.bbox.to_xyxy(),
                                    &ann.bbox.to_xyxy(),
                                )
                                .unwrap_or(0.0),
                                d.category,
                            )
                        })
                        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    if let Some((iou, cat)) = best {
                        if iou >= 0.5 {
                            localized[side] += 1;
                            if cat == ann.category {
                                correct_cat[side] += 1;
                            }
                        }
                    }
                }
            }
            println!(
                "step {:>5} l_det {:>7.3} l_kl {:>8.3} l_align {:>6.3} | ap_b {:.3} ap_n {:.3} | loc_b {:.2} loc_n {:.2} | cat_b {:.2} cat_n {:.2} | cos(A,P) {:+.2}",
                m.step,
                m.l_det,
                m.l_kl,
                m.l_align,
                report.ap50_base.unwrap_or(-1.0),
                report.ap50_novel.unwrap_or(-1.0),
                localized[0] as f64 / gt_count[0].max(1) as f64,
                localized[1] as f64 / gt_count[1].max(1) as f64,
                correct_cat[0] as f64 / localized[0].max(1) as f64,
                correct_cat[1] as f64 / localized[1].max(1) as f64,
                worst_ap,
            );
        }
    }

    // Matched-pair anatomy on a train batch: where does the loss live?
    {
        let batch: Vec<_> = train.iter().take(8).collect();
        let frozen = state.freeze_batch(&batch).unwrap();
        let tape = protodet::tensor::tape::Tape::new();
        let bound: Vec<_> =
            state.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut l1_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut cls_ok = 0usize;
        let mut pairs = 0usize;
        for (scene, matching) in batch.iter().zip(frozen.matchings()) {
            let tokens = protodet::tensor::Tensor::from_rows(&scene.tokens).unwrap();
            let (q, _) =
                protodet::detector::decode_queries(&tape, &bound, &state.model.decoder, &tokens)
                    .unwrap();
            let (boxes, logits) = state.model.det_head.forward(&bound, q).unwrap();
            let bv = boxes.value();
            let lv = logits.value();
            for &(qi, gi) in matching {
                let ann = &scene.ground_truth[gi];
                let row = bv.row(qi);
                let pred = protodet::boxes::BoxCxcywh {
                    cx: row[0],
                    cy: row[1],
                    w: row[2].max(1e-9),
                    h: row[3].max(1e-9),
                };
                l1_sum += row
                    .iter()
                    .zip(&<[f64; 4]>::from(ann.bbox))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
                iou_sum +=
                    protodet::boxes::iou(&pred.to_xyxy(), &ann.bbox.to_xyxy()).unwrap_or(0.0);
                let probs = protodet::tensor::softmax_t(lv.row(qi), 1.0).unwrap();
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == ann.category {
                    cls_ok += 1;
                }
                pairs += 1;
            }
        }
        println!(
            "matched pairs on train batch: {} | mean L1 {:.3} mean IoU {:.3} class acc {:.2}",
            pairs,
            l1_sum / pairs as f64,
            iou_sum / pairs as f64,
            cls_ok as f64 / pairs as f64
        );
    }

    // Semantic-chain probe on one novel query: where does the novel signal die?
    'probe: for scene in &eval {
        for (gi, ann) in scene.ground_truth.iter().enumerate() {
            if !ann.is_novel {
                continue;
            }
            let tape = protodet::tensor::tape::Tape::new();
            let bound: Vec<_> =
                state.params.iter().map(|p| tape.constant(p.value.clone())).collect();
            let tokens = protodet::tensor::Tensor::from_rows(&scene.tokens).unwrap();
            let (q, _) =
                protodet::detector::decode_queries(&tape, &bound, &state.model.decoder, &tokens)
                    .unwrap();
            let (boxes, _) = state.model.det_head.forward(&bound, q).unwrap();
            // Query whose box best overlaps this novel GT.
            let bv = boxes.value();
            let (qi, best_iou) = (0..state.config.queries)
                .map(|i| {
                    let row = bv.row(i);
                    let pred = protodet::boxes::BoxCxcywh {
                        cx: row[0],
                        cy: row[1],
                        w: row[2].max(1e-9),
                        h: row[3].max(1e-9),
                    };
                    (
                        i,
                        protodet::boxes::iou(&pred.to_xyxy(), &ann.bbox.to_xyxy())
                            .unwrap_or(0.0),
                    )
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let s = protodet::semantic::semantic_stream(
                &tape,
                &bound,
                &state.model.semantic,
                &state.pool,
                state.config.alpha,
                q,
                true,
            )
            .unwrap();
            let anchors = bank.anchors();
            let qh = s.q_hat.value();
            let cos_anchors: Vec<String> = anchors
                .iter()
                .map(|a| format!("{:+.2}", cosine_sim(qh.row(qi), a.as_slice()).unwrap()))
                .collect();
            let wv = s.w.value();
            let w_arg = wv
                .row(qi)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            let tv = s.t.value();
            let mut t_pairs: Vec<(usize, f64)> =
                tv.row(qi).iter().cloned().enumerate().collect();
            t_pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            println!(
                "novel probe: gt {} iou {:.2} | cos(q_hat, anchors) [{}] | w argmax proto {} ({:.2}, parent {}) | t top2 {:?}",
                gi,
                best_iou,
                cos_anchors.join(" "),
                w_arg.0,
                w_arg.1,
                state.pool.parent(w_arg.0),
                &t_pairs[..2.min(t_pairs.len())]
            );
            let region_cos: Vec<String> = anchors
                .iter()
                .map(|a| {
                    format!(
                        "{:+.2}",
                        cosine_sim(&ann.region_embedding, a.as_slice()).unwrap()
                    )
                })
                .collect();
            println!("             region vs anchors [{}]", region_cos.join(" "));
            break 'probe;
        }
    }

    // Dump two eval scenes: every GT against its best prediction.
    for scene in eval.iter().take(2) {
        println!("--- scene ({} objects) ---", scene.ground_truth.len());
        let dets = state.infer_scene(scene).unwrap();
        for ann in &scene.ground_truth {
            let (best_iou, best) = dets
                .iter()
                .map(|d| {
                    (
                        protodet::boxes::iou(&d.bbox.to_xyxy(), &ann.bbox.to_xyxy()).unwrap_or(0.0),
                        d,
                    )
                })
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .unwrap();
            println!(
                "gt cat {} [{:.2} {:.2} {:.2} {:.2}] <- iou {:.2} pred cat {} score {:.2} [{:.2} {:.2} {:.2} {:.2}]",
                ann.category,
                ann.bbox.cx,
                ann.bbox.cy,
                ann.bbox.w,
                ann.bbox.h,
                best_iou,
                best.category,
                best.score,
                best.bbox.cx,
                best.bbox.cy,
                best.bbox.w,
                best.bbox.h
            );
        }
        let scores: Vec<String> = dets.iter().map(|d| format!("{:.2}", d.score)).collect();
        println!("scores: {}", scores.join(" "));
    }
}
