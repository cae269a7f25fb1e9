//! Evaluation: top-1 classification accuracy over ground-truth boxes and
//! AP50 over emitted detections, each reported separately for base and
//! novel classes. The whole protocol is deterministic given the run seed.

use crate::config::TrainConfig;
use crate::det::{stream_rng, Stream};
use crate::encoders::{ClassVocabulary, OracleVlm, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, sample_neighbors, BBox, ImageSize};
use crate::graph::{NodeId, Tape};
use crate::image::Image;
use crate::nra::nra_forward;
use crate::ovd::{
    class_probs, greedy_nms, infer_region_embedding, infer_regions, ClassifierState, Detection,
};
use crate::params::{BoundParams, ParamStore};
use crate::tokens::{build_region_sequence, V2l, END_TOKEN, START_TOKEN};
use crate::toy::{propose, roi_features, scene_stream_key, select_topk, ToyScene};
use rand_chacha::ChaCha8Rng;

/// Everything the benchmark reports for one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub ap50_base: f64,
    pub ap50_novel: f64,
    /// Ground-truth box counts behind the accuracy figures.
    pub base_boxes: usize,
    pub novel_boxes: usize,
}

impl Metrics {
    pub fn csv_header() -> &'static str {
        "name,base_acc,novel_acc,ap50_base,ap50_novel,base_boxes,novel_boxes"
    }

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.base_acc, self.novel_acc, self.ap50_base, self.ap50_novel, self.base_boxes,
            self.novel_boxes
        )
    }
}

/// Region embedding under the test-time wiring: the bare sequence by
/// default, or the refined neighbor sequence when the grid places the
/// attention block in test-time classification.
pub fn test_embedding(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &TrainConfig,
    v2l: &V2l,
    oracle: &OracleVlm,
    image: &Image,
    bbox: &BBox,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let feature = roi_features(image, bbox)?;
    if !cfg.ablation.nra_in_test_cls {
        return infer_region_embedding(tape, bound, v2l, oracle, &feature);
    }
    let tokens = v2l.v2l_map(tape, bound, &feature)?;
    let mut neighbor_nodes = Vec::new();
    if cfg.ablation.use_neighbors {
        let size = ImageSize::new(image.width, image.height)?;
        let sample = sample_neighbors(bbox, size, cfg.ablation.max_neighbors, 0, rng)?;
        for (_, nb) in &sample.neighbors {
            let nf = roi_features(image, nb)?;
            neighbor_nodes.push(v2l.v2l_map(tape, bound, &nf)?);
        }
    }
    let seq = build_region_sequence(
        tape,
        bound.id(START_TOKEN),
        bound.id(END_TOKEN),
        tokens,
        &neighbor_nodes,
    )?;
    let (refined, _) = nra_forward(tape, bound, &cfg.nra_config(), std::slice::from_ref(&seq))?;
    oracle.encode_region_tokens(tape, &refined[0])
}

/// Top-1 accuracy over ground-truth boxes, classified against all classes.
#[derive(Debug, Clone, Copy)]
pub struct AccuracyReport {
    pub base_correct: usize,
    pub base_total: usize,
    pub novel_correct: usize,
    pub novel_total: usize,
}

impl AccuracyReport {
    pub fn base_acc(&self) -> f64 {
        if self.base_total == 0 {
            0.0
        } else {
            self.base_correct as f64 / self.base_total as f64
        }
    }

    pub fn novel_acc(&self) -> f64 {
        if self.novel_total == 0 {
            0.0
        } else {
            self.novel_correct as f64 / self.novel_total as f64
        }
    }
}

pub fn classification_accuracy(
    cfg: &TrainConfig,
    store: &ParamStore,
    oracle: &OracleVlm,
    vocab: &ClassVocabulary,
    scenes: &[ToyScene],
    test_split: bool,
) -> Result<AccuracyReport> {
    let state = ClassifierState::from_oracle(oracle, vocab, Split::All, cfg.tau_train, cfg.tau_test)?;
    let v2l = V2l::from_store(store, cfg.num_words)?;
    let mut report = AccuracyReport {
        base_correct: 0,
        base_total: 0,
        novel_correct: 0,
        novel_total: 0,
    };
    for scene in scenes {
        let mut rng = stream_rng(
            cfg.seed,
            Stream::NeighborsCls,
            scene_stream_key(test_split, scene.id),
        );
        for (bbox, name) in &scene.objects {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let emb = test_embedding(&mut tape, &bound, cfg, &v2l, oracle, &scene.image, bbox, &mut rng)?;
            let probs = class_probs(&tape.value(emb).clone(), &state)?;
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty class list");
            let truth = vocab
                .global_index(name)
                .ok_or_else(|| Error::field("class", format!("unknown class `{name}`")))?;
            let hit = (pred == truth) as usize;
            if vocab.is_novel(name) {
                report.novel_total += 1;
                report.novel_correct += hit;
            } else {
                report.base_total += 1;
                report.base_correct += hit;
            }
        }
    }
    Ok(report)
}

/// Run the detector over every scene: score-ranked proposals from the
/// deterministic per-scene stream, then thresholding and per-class NMS.
pub fn detect_scenes(
    cfg: &TrainConfig,
    store: &ParamStore,
    oracle: &OracleVlm,
    vocab: &ClassVocabulary,
    scenes: &[ToyScene],
    test_split: bool,
) -> Result<Vec<Detection>> {
    let state = ClassifierState::from_oracle(oracle, vocab, Split::All, cfg.tau_train, cfg.tau_test)?;
    let v2l = V2l::from_store(store, cfg.num_words)?;
    let settings = cfg.inference_settings();
    let propose_cfg = cfg.propose_config();
    let mut out = Vec::new();
    for scene in scenes {
        let key = scene_stream_key(test_split, scene.id);
        let mut prng = stream_rng(cfg.seed, Stream::Proposals, key);
        let proposals = propose(scene, cfg.image_size, &propose_cfg, &mut prng);
        let kept = select_topk(&proposals, cfg.ablation.topk);
        let boxes: Vec<BBox> = kept.iter().map(|(b, _)| *b).collect();
        if !cfg.ablation.nra_in_test_cls {
            let features = boxes
                .iter()
                .map(|b| roi_features(&scene.image, b))
                .collect::<Result<Vec<_>>>()?;
            out.extend(infer_regions(
                store, &v2l, oracle, &state, scene.id, &boxes, &features, &settings,
            )?);
            continue;
        }
        // Refined test-time classification: same thresholding and NMS, but
        // embeddings come from the neighbor sequence.
        let mut nrng = stream_rng(cfg.seed, Stream::NeighborsCls, key);
        let mut per_class: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); state.class_names.len()];
        for bbox in &boxes {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let emb = test_embedding(&mut tape, &bound, cfg, &v2l, oracle, &scene.image, bbox, &mut nrng)?;
            let probs = class_probs(&tape.value(emb).clone(), &state)?;
            for (c, &p) in probs.iter().enumerate() {
                if p >= settings.score_threshold {
                    per_class[c].push((*bbox, p));
                }
            }
        }
        for (c, candidates) in per_class.into_iter().enumerate() {
            for (bbox, score) in greedy_nms(candidates, settings.nms_iou) {
                out.push(Detection {
                    image_id: scene.id,
                    bbox,
                    class_name: state.class_names[c].clone(),
                    score,
                });
            }
        }
    }
    Ok(out)
}

/// All-point interpolated average precision from detection outcomes in
/// score order. `tps[i]` says whether the i-th highest-scoring detection
/// matched a previously unmatched ground-truth box.
pub fn ap_all_points(tps: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tps.is_empty() {
        return 0.0;
    }
    let n = tps.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp_cum = 0usize;
    for (i, &tp) in tps.iter().enumerate() {
        tp_cum += tp as usize;
        precision.push(tp_cum as f64 / (i + 1) as f64);
        recall.push(tp_cum as f64 / num_gt as f64);
    }
    let mut ap = 0.0;
    let mut max_p = 0.0f64;
    for i in (0..n).rev() {
        max_p = max_p.max(precision[i]);
        let prev = if i == 0 { 0.0 } else { recall[i - 1] };
        ap += (recall[i] - prev) * max_p;
    }
    ap
}

/// Per-class AP at the given IoU threshold. Detections are matched
/// greedily in score order; each ground-truth box absorbs at most one.
pub fn ap_for_class(
    detections: &[Detection],
    scenes: &[ToyScene],
    class_name: &str,
    iou_thresh: f64,
) -> f64 {
    let mut gts: Vec<(usize, BBox, bool)> = Vec::new();
    for scene in scenes {
        for (bbox, name) in &scene.objects {
            if name == class_name {
                gts.push((scene.id, *bbox, false));
            }
        }
    }
    let num_gt = gts.len();
    let mut dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.class_name == class_name)
        .collect();
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
    });
    let mut tps = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (sid, gbox, used)) in gts.iter().enumerate() {
            if *sid != det.image_id || *used {
                continue;
            }
            let overlap = iou(gbox, &det.bbox);
            if overlap >= iou_thresh && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                gts[gi].2 = true;
                tps.push(true);
            }
            None => tps.push(false),
        }
    }
    ap_all_points(&tps, num_gt)
}

/// Mean AP over the classes of one split that appear in the ground truth.
pub fn mean_ap_for_split(
    detections: &[Detection],
    scenes: &[ToyScene],
    vocab: &ClassVocabulary,
    split: Split,
    iou_thresh: f64,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for name in vocab.class_names(split) {
        let present = scenes
            .iter()
            .any(|s| s.objects.iter().any(|(_, n)| n == name));
        if !present {
            continue;
        }
        sum += ap_for_class(detections, scenes, name, iou_thresh);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Full benchmark pass: accuracy over ground-truth boxes plus AP50 over
/// detections from the proposal pipeline.
pub fn evaluate(
    cfg: &TrainConfig,
    store: &ParamStore,
    oracle: &OracleVlm,
    vocab: &ClassVocabulary,
    scenes: &[ToyScene],
    test_split: bool,
) -> Result<Metrics> {
    let acc = classification_accuracy(cfg, store, oracle, vocab, scenes, test_split)?;
    let detections = detect_scenes(cfg, store, oracle, vocab, scenes, test_split)?;
    let ap50_base = mean_ap_for_split(&detections, scenes, vocab, Split::Base, 0.5);
    let ap50_novel = mean_ap_for_split(&detections, scenes, vocab, Split::Novel, 0.5);
    Ok(Metrics {
        base_acc: acc.base_acc(),
        novel_acc: acc.novel_acc(),
        ap50_base,
        ap50_novel,
        base_boxes: acc.base_total,
        novel_boxes: acc.novel_total,
    })
}
