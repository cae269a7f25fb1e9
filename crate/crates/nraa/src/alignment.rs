//! Distillation loss: symmetric infoNCE over FIFO negative queues.
//!
//! Each training step produces K paired embeddings: a student text embedding
//! `t_k` from a refined region sequence, and a teacher image embedding `i_k`
//! from the union crop of the same region and its neighbors. The loss pulls
//! each pair together against two pools of negatives — the other pairs in the
//! batch, plus embeddings retained from previous iterations in two
//! matched-modality queues (images compete with queued images, texts with
//! queued texts). Queued entries are stored detached: they act as constants
//! and receive no gradient.
//!
//! For pair k, with cosine similarities divided by the temperature:
//! `p_{k,1}` softmax-normalizes `i_k . t_k` over all images (batch plus image
//! queue) and `p_{k,2}` over all texts. The loss is
//! `1/2 sum_k -(log p_{k,1} + log p_{k,2})` — a sum over K by default, with
//! an opt-in mean mode.

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use ndarray::{Array1, Array2};
use std::collections::VecDeque;

/// Hyperparameters of the alignment branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    /// Temperature dividing cosine similarities.
    pub tau: f64,
    /// Capacity of each negative queue.
    pub queue_capacity: usize,
    /// Divide the summed loss by K.
    pub normalize_by_k: bool,
    /// Weight of the alignment loss against the classification loss.
    pub lambda: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 1.0 / 30.0,
            queue_capacity: 256,
            normalize_by_k: false,
            lambda: 1.0,
        }
    }
}

/// Fixed-capacity FIFO queue of unit-norm embeddings, one modality per queue.
#[derive(Debug, Clone)]
pub struct EmbeddingQueue {
    capacity: usize,
    d: usize,
    entries: VecDeque<Array1<f64>>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, d: usize) -> Self {
        Self {
            capacity,
            d,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append rows in order, evicting oldest entries past capacity. Values
    /// are stored exactly as given — no renormalization.
    pub fn push(&mut self, rows: &Array2<f64>) -> Result<()> {
        if rows.ncols() != self.d && rows.nrows() > 0 {
            return Err(Error::DimMismatch {
                what: "queued embedding width",
                expected: self.d,
                got: rows.ncols(),
            });
        }
        for row in rows.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row.to_owned());
        }
        Ok(())
    }

    /// Entries as a `len x d` matrix, oldest first.
    pub fn as_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.entries.len(), self.d));
        for (i, e) in self.entries.iter().enumerate() {
            m.row_mut(i).assign(e);
        }
        m
    }
}

fn check_unit_rows(what: &'static str, m: &Array2<f64>) -> Result<()> {
    for row in m.rows() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            let _ = what;
            return Err(Error::NotNormalized(norm));
        }
    }
    Ok(())
}

/// Build the symmetric infoNCE loss on the tape.
///
/// `texts` is a `K x d` node carrying the student embeddings — the only
/// input that receives gradient. `images` and both queues enter the graph
/// as constants, which is the detachment the protocol requires: no teacher
/// or queue gradient can exist even in principle.
pub fn info_nce_graph(
    tape: &mut Tape,
    texts: NodeId,
    images: &Array2<f64>,
    q_img: &EmbeddingQueue,
    q_txt: &EmbeddingQueue,
    tau: f64,
    normalize_by_k: bool,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::field("tau", format!("temperature must be positive, got {tau}")));
    }
    let k = tape.value(texts).nrows();
    let d = tape.value(texts).ncols();
    if k == 0 {
        return Err(Error::EmptyInput("alignment batch"));
    }
    if images.nrows() != k || images.ncols() != d {
        return Err(Error::DimMismatch {
            what: "image batch rows",
            expected: k,
            got: images.nrows(),
        });
    }
    for (queue, name) in [(q_img, "image queue width"), (q_txt, "text queue width")] {
        if queue.dim() != d {
            return Err(Error::DimMismatch {
                what: if name.starts_with("image") { "image queue width" } else { "text queue width" },
                expected: d,
                got: queue.dim(),
            });
        }
    }
    check_unit_rows("text embeddings", &tape.value(texts).clone())?;
    check_unit_rows("image embeddings", images)?;
    check_unit_rows("image queue", &q_img.as_matrix())?;
    check_unit_rows("text queue", &q_txt.as_matrix())?;

    let targets: Vec<usize> = (0..k).collect();

    // Text-to-image direction: row k holds t_k against every image.
    let sim = tape.matmul_const_nt(texts, images);
    let logits1 = if q_img.is_empty() {
        sim
    } else {
        let extra = tape.matmul_const_nt(texts, &q_img.as_matrix());
        tape.concat_cols(&[sim, extra])
    };
    let logits1 = tape.scale(logits1, 1.0 / tau);
    let ce1 = tape.cross_entropy_rows(logits1, &targets);

    // Image-to-text direction: transpose puts i_k on the rows. The block of
    // similarities against queued texts involves no student tensor at all,
    // so it is a plain constant leaf.
    let sim_t = tape.transpose(sim);
    let logits2 = if q_txt.is_empty() {
        sim_t
    } else {
        let extra = tape.leaf(images.dot(&q_txt.as_matrix().t()));
        tape.concat_cols(&[sim_t, extra])
    };
    let logits2 = tape.scale(logits2, 1.0 / tau);
    let ce2 = tape.cross_entropy_rows(logits2, &targets);

    let sum = tape.add(ce1, ce2);
    let mut loss = tape.scale(sum, 0.5);
    if normalize_by_k {
        loss = tape.scale(loss, 1.0 / k as f64);
    }
    Ok(loss)
}

/// Convenience wrapper stacking per-pair `1 x d` text nodes into the batch.
pub fn info_nce_from_rows(
    tape: &mut Tape,
    text_rows: &[NodeId],
    images: &Array2<f64>,
    q_img: &EmbeddingQueue,
    q_txt: &EmbeddingQueue,
    tau: f64,
    normalize_by_k: bool,
) -> Result<NodeId> {
    if text_rows.is_empty() {
        return Err(Error::EmptyInput("alignment batch"));
    }
    let texts = tape.concat_rows(text_rows);
    info_nce_graph(tape, texts, images, q_img, q_txt, tau, normalize_by_k)
}

/// Loss value without keeping a tape around (monitoring, tests).
pub fn info_nce_value(
    texts: &Array2<f64>,
    images: &Array2<f64>,
    q_img: &EmbeddingQueue,
    q_txt: &EmbeddingQueue,
    tau: f64,
    normalize_by_k: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.leaf(texts.clone());
    let loss = info_nce_graph(&mut tape, t, images, q_img, q_txt, tau, normalize_by_k)?;
    Ok(tape.value(loss)[(0, 0)])
}
