//! Open-vocabulary classification head and test-time inference.
//!
//! Classification never owns per-class weights: a region embedding is scored
//! against the text embeddings of class prompts by cosine similarity, scaled
//! by a temperature and passed through a softmax. During training the score
//! rows cover the base classes plus one learnable background embedding;
//! during testing they cover every class, base and novel alike, and the
//! background row is absent. That asymmetry is the whole point: classes the
//! model never trained on are recognizable at test time purely because their
//! prompt embeddings exist.
//!
//! Inference deliberately skips the attention block: proposals are encoded
//! alone, without neighbors, so a trained checkpoint works even after the
//! refinement parameters are deleted.

use crate::encoders::{ClassVocabulary, OracleVlm, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::graph::{NodeId, Tape};
use crate::params::{BoundParams, ParamStore};
use crate::tokens::{build_region_sequence, V2l, END_TOKEN, START_TOKEN};
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;

/// Parameter name of the learnable background embedding (train-time only).
pub const BACKGROUND: &str = "cls.background";

/// Register the background embedding: one raw row, normalized at use.
pub fn init_background(store: &mut ParamStore, d_embed: usize, rng: &mut ChaCha8Rng) {
    store.insert_normal(BACKGROUND, 1, d_embed, d_embed, rng);
}

/// Frozen per-split classifier: class-prompt embeddings and temperatures.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    /// One unit-norm row per class, in split order.
    pub class_embs: Array2<f64>,
    /// Class names parallel to the rows.
    pub class_names: Vec<String>,
    pub tau_train: f64,
    pub tau_test: f64,
    pub split: Split,
}

impl ClassifierState {
    pub fn new(
        class_embs: Array2<f64>,
        class_names: Vec<String>,
        tau_train: f64,
        tau_test: f64,
        split: Split,
    ) -> Result<Self> {
        if tau_train <= 0.0 || tau_test <= 0.0 {
            return Err(Error::field("tau", "temperatures must be positive"));
        }
        if class_embs.nrows() != class_names.len() {
            return Err(Error::DimMismatch {
                what: "classifier name rows",
                expected: class_embs.nrows(),
                got: class_names.len(),
            });
        }
        if class_embs.nrows() == 0 {
            return Err(Error::EmptyInput("classifier rows"));
        }
        crate::encoders::validate_unit_rows(&class_embs, 1e-6)?;
        Ok(Self {
            class_embs,
            class_names,
            tau_train,
            tau_test,
            split,
        })
    }

    /// Build the classifier over a split from the frozen encoder.
    pub fn from_oracle(
        oracle: &OracleVlm,
        vocab: &ClassVocabulary,
        split: Split,
        tau_train: f64,
        tau_test: f64,
    ) -> Result<Self> {
        let embs = oracle.class_prompt_embeddings(vocab, split)?;
        let names = vocab
            .class_names(split)
            .into_iter()
            .map(String::from)
            .collect();
        Self::new(embs, names, tau_train, tau_test, split)
    }

    /// Temperature in effect for this split: training over base classes,
    /// testing over all.
    pub fn tau(&self) -> f64 {
        match self.split {
            Split::Base => self.tau_train,
            _ => self.tau_test,
        }
    }
}

/// Numerically stable softmax of a flat slice.
pub fn softmax_1d(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Class probabilities of a unit-norm region embedding: softmax of the
/// cosine similarities divided by the split's temperature.
pub fn class_probs(region: &Array2<f64>, state: &ClassifierState) -> Result<Array1<f64>> {
    crate::encoders::validate_unit_rows(region, 1e-6)?;
    if region.ncols() != state.class_embs.ncols() {
        return Err(Error::DimMismatch {
            what: "region embedding width",
            expected: state.class_embs.ncols(),
            got: region.ncols(),
        });
    }
    let tau = state.tau();
    let logits: Vec<f64> = state
        .class_embs
        .rows()
        .into_iter()
        .map(|c| region.row(0).dot(&c) / tau)
        .collect();
    Ok(Array1::from(softmax_1d(&logits)))
}

/// Train-time logits of one region on the tape: cosine against the base
/// class rows (constants) plus, when present, the normalized learnable
/// background embedding as the final column.
pub fn cls_logits_graph(
    tape: &mut Tape,
    region: NodeId,
    base_embs: &Array2<f64>,
    background: Option<NodeId>,
    tau: f64,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::field("tau", "temperature must be positive"));
    }
    let sim = tape.matmul_const_nt(region, base_embs);
    let full = match background {
        Some(bg) => {
            let bg_unit = tape.l2_norm_rows(bg);
            let bg_sim = tape.matmul_nt(region, bg_unit);
            tape.concat_cols(&[sim, bg_sim])
        }
        None => sim,
    };
    Ok(tape.scale(full, 1.0 / tau))
}

/// Classification loss: mean over proposals of the cross-entropy between the
/// logit rows and integer labels. The background label, when in use, is the
/// index one past the last base class.
pub fn cls_loss_graph(tape: &mut Tape, logit_rows: &[NodeId], labels: &[usize]) -> Result<NodeId> {
    if logit_rows.is_empty() {
        return Err(Error::EmptyInput("classification batch"));
    }
    if logit_rows.len() != labels.len() {
        return Err(Error::DimMismatch {
            what: "classification labels",
            expected: logit_rows.len(),
            got: labels.len(),
        });
    }
    let width = tape.value(logit_rows[0]).ncols();
    for (&row, &label) in logit_rows.iter().zip(labels) {
        if tape.value(row).ncols() != width {
            return Err(Error::DimMismatch {
                what: "logit row width",
                expected: width,
                got: tape.value(row).ncols(),
            });
        }
        if label >= width {
            return Err(Error::field(
                "labels",
                format!("label {label} outside the {width}-way training split"),
            ));
        }
    }
    let logits = tape.concat_rows(logit_rows);
    let ce = tape.cross_entropy_rows(logits, labels);
    Ok(tape.scale(ce, 1.0 / labels.len() as f64))
}

/// One scored box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub class_name: String,
    pub score: f64,
}

/// Test-time thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSettings {
    /// Minimum per-class probability to emit a detection.
    pub score_threshold: f64,
    /// IoU above which a lower-scored same-class box is suppressed.
    pub nms_iou: f64,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// Greedy per-class non-maximum suppression. Input order does not matter:
/// candidates are sorted by descending score with coordinates as tiebreak.
pub fn greedy_nms(mut candidates: Vec<(BBox, f64)>, iou_thresh: f64) -> Vec<(BBox, f64)> {
    candidates.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.x1.total_cmp(&b.0.x1))
            .then(a.0.y1.total_cmp(&b.0.y1))
    });
    let mut kept: Vec<(BBox, f64)> = Vec::new();
    for (bbox, score) in candidates {
        if kept.iter().all(|(k, _)| iou(k, &bbox) <= iou_thresh) {
            kept.push((bbox, score));
        }
    }
    kept
}

/// Test-time region embedding: pseudo-words from the region feature alone,
/// no neighbors, no refinement, embedding read from the frozen text encoder.
pub fn infer_region_embedding(
    tape: &mut Tape,
    bound: &BoundParams,
    v2l: &V2l,
    oracle: &OracleVlm,
    feature: &Array2<f64>,
) -> Result<NodeId> {
    let tokens = v2l.v2l_map(tape, bound, feature)?;
    let seq = build_region_sequence(
        tape,
        bound.id(START_TOKEN),
        bound.id(END_TOKEN),
        tokens,
        &[],
    )?;
    oracle.encode_region_tokens(tape, &seq)
}

/// Classify proposals against every class and emit thresholded, per-class
/// NMS-filtered detections. `features` holds one `1 x d_roi` row per
/// proposal.
pub fn infer_regions(
    store: &ParamStore,
    v2l: &V2l,
    oracle: &OracleVlm,
    state: &ClassifierState,
    image_id: usize,
    proposals: &[BBox],
    features: &[Array2<f64>],
    settings: &InferenceSettings,
) -> Result<Vec<Detection>> {
    if proposals.len() != features.len() {
        return Err(Error::DimMismatch {
            what: "proposal features",
            expected: proposals.len(),
            got: features.len(),
        });
    }
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let mut per_class: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); state.class_names.len()];
    for (bbox, feature) in proposals.iter().zip(features) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let emb = infer_region_embedding(&mut tape, &bound, v2l, oracle, feature)?;
        let probs = class_probs(&tape.value(emb).clone(), state)?;
        for (c, &p) in probs.iter().enumerate() {
            if p >= settings.score_threshold {
                per_class[c].push((*bbox, p));
            }
        }
    }
    let mut detections = Vec::new();
    for (c, candidates) in per_class.into_iter().enumerate() {
        for (bbox, score) in greedy_nms(candidates, settings.nms_iou) {
            detections.push(Detection {
                image_id,
                bbox,
                class_name: state.class_names[c].clone(),
                score,
            });
        }
    }
    Ok(detections)
}

/// Write detections as newline-delimited records:
/// `image_id,x1,y1,x2,y2,class_name,score`, coordinates and score in
/// 4-decimal fixed point.
pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in detections {
        writeln!(
            file,
            "{},{:.4},{:.4},{:.4},{:.4},{},{:.4}",
            d.image_id, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.class_name, d.score
        )?;
    }
    file.flush()?;
    Ok(())
}

/// Parse a detections file written by [`write_detections`].
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(|p| p.trim()).collect();
        if parts.len() != 7 {
            return Err(Error::field(
                "detections",
                format!("line {}: expected 7 fields, got {}", i + 1, parts.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::field("detections", format!("line {}: bad number `{s}`", i + 1)))
        };
        let image_id: usize = parts[0]
            .parse()
            .map_err(|_| Error::field("detections", format!("line {}: bad id", i + 1)))?;
        let bbox = BBox::new(num(parts[1])?, num(parts[2])?, num(parts[3])?, num(parts[4])?)?;
        out.push(Detection {
            image_id,
            bbox,
            class_name: parts[5].to_string(),
            score: num(parts[6])?,
        });
    }
    Ok(out)
}
