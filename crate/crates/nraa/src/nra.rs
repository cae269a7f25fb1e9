//! Neighboring region attention: the refinement block between the pseudo-word
//! sequences and the text encoder.
//!
//! The block is a conventional pre-norm transformer layer specialized to the
//! region-sequence layout: multi-head scaled dot-product attention over the
//! concatenated proposal and neighbor tokens, a two-linear GELU feed-forward
//! network, learnable absolute positional embeddings added once before the
//! first layer, and residual shortcuts around each sublayer. Stacking more
//! than one layer is supported (with an optional outer shortcut from the raw
//! input to the final output) but a single block is the published default.
//!
//! Padding discipline: PAD positions are masked out of every attention row
//! and are copied through from the input untouched, so a padded batch and
//! its unpadded counterpart produce identical values at valid positions.
//!
//! Attention weights are captured per sequence, per layer, per head, as
//! row-stochastic matrices; the heatmap exporter consumes them directly.

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::params::{BoundParams, ParamStore};
use crate::tokens::TokenSequence;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Architecture switches for the NRA block stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NraConfig {
    pub d_word: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub num_layers: usize,
    /// Attention sublayer present. Off leaves only FFN/PE, which no
    /// published configuration uses, but the ablation grid can express it.
    pub use_attn: bool,
    pub use_ffn: bool,
    pub use_pe: bool,
    /// Extra input-to-output shortcut, only meaningful when stacking.
    pub use_outer_shortcut: bool,
    /// Longest sequence the positional table covers.
    pub max_positions: usize,
}

impl Default for NraConfig {
    fn default() -> Self {
        Self {
            d_word: 512,
            num_heads: 8,
            ffn_hidden: 4 * 512,
            num_layers: 1,
            use_attn: true,
            use_ffn: true,
            use_pe: true,
            use_outer_shortcut: false,
            max_positions: 64,
        }
    }
}

impl NraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_word == 0 || self.num_heads == 0 {
            return Err(Error::field("num_heads", "d_word and num_heads must be positive"));
        }
        if self.d_word % self.num_heads != 0 {
            return Err(Error::field(
                "num_heads",
                format!("{} does not divide d_word={}", self.num_heads, self.d_word),
            ));
        }
        if self.num_layers < 1 {
            return Err(Error::field("num_layers", "at least one layer required"));
        }
        if self.use_ffn && self.ffn_hidden == 0 {
            return Err(Error::field("ffn_hidden", "must be positive when the FFN is enabled"));
        }
        if self.max_positions == 0 {
            return Err(Error::field("max_positions", "must be positive"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_word / self.num_heads
    }

    /// Names of every parameter this configuration registers, in store order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.num_layers {
            if self.use_attn {
                for part in ["q", "k", "v", "o"] {
                    names.push(format!("nra.l{l}.{part}.weight"));
                    names.push(format!("nra.l{l}.{part}.bias"));
                }
            }
            if self.use_ffn {
                names.push(format!("nra.l{l}.ffn1.weight"));
                names.push(format!("nra.l{l}.ffn1.bias"));
                names.push(format!("nra.l{l}.ffn2.weight"));
                names.push(format!("nra.l{l}.ffn2.bias"));
            }
        }
        if self.use_pe {
            names.push("nra.pe".to_string());
        }
        names.sort();
        names
    }
}

/// Register all NRA parameters in the store.
pub fn init_nra(cfg: &NraConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_word;
    // Residual branches end in zero-initialized projections, so every layer
    // starts as the identity map and the refined sequence initially equals
    // the raw one. Gradients still reach the zero matrices (their inputs are
    // nonzero), letting the block grow away from identity only as far as the
    // loss asks; random output projections would instead scramble the tokens
    // from step one and decouple the refined path from the plain one.
    for l in 0..cfg.num_layers {
        if cfg.use_attn {
            for part in ["q", "k", "v"] {
                store.insert_normal(&format!("nra.l{l}.{part}.weight"), d, d, d, rng);
                store.insert_zeros(&format!("nra.l{l}.{part}.bias"), 1, d);
            }
            store.insert_zeros(&format!("nra.l{l}.o.weight"), d, d);
            store.insert_zeros(&format!("nra.l{l}.o.bias"), 1, d);
        }
        if cfg.use_ffn {
            store.insert_normal(&format!("nra.l{l}.ffn1.weight"), d, cfg.ffn_hidden, d, rng);
            store.insert_zeros(&format!("nra.l{l}.ffn1.bias"), 1, cfg.ffn_hidden);
            store.insert_zeros(&format!("nra.l{l}.ffn2.weight"), cfg.ffn_hidden, d);
            store.insert_zeros(&format!("nra.l{l}.ffn2.bias"), 1, d);
        }
    }
    if cfg.use_pe {
        // Small positions: a nudge for the attention pattern, not a rewrite
        // of the token content.
        store.insert_normal("nra.pe", cfg.max_positions, d, d * d, rng);
    }
    Ok(())
}

fn linear(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = bound.id(&format!("{prefix}.weight"));
    let b = bound.id(&format!("{prefix}.bias"));
    let in_dim = tape.value(w).nrows();
    if tape.value(x).ncols() != in_dim {
        return Err(Error::DimMismatch {
            what: "linear input width",
            expected: in_dim,
            got: tape.value(x).ncols(),
        });
    }
    let y = tape.matmul(x, w);
    Ok(tape.add_bias(y, b))
}

/// The three position-wise projections of one layer.
pub fn qkv_project(
    tape: &mut Tape,
    bound: &BoundParams,
    layer: usize,
    x: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let q = linear(tape, bound, &format!("nra.l{layer}.q"), x)?;
    let k = linear(tape, bound, &format!("nra.l{layer}.k"), x)?;
    let v = linear(tape, bound, &format!("nra.l{layer}.v"), x)?;
    Ok((q, k, v))
}

/// Multi-head scaled dot-product attention.
///
/// `mask[(i, j)]` marks key `j` as visible to query `i`. Masked keys carry
/// attention weight exactly zero; a query row with no visible key is an
/// error. Returns the concatenated head outputs (no output projection) and
/// the per-head weight matrices.
pub fn scaled_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &Array2<bool>,
    num_heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (lq, d) = tape.value(q).dim();
    let (lk, dk) = tape.value(k).dim();
    let (lv, dv) = tape.value(v).dim();
    if dk != d || dv != d || lv != lk {
        return Err(Error::DimMismatch {
            what: "attention key/value shape",
            expected: d,
            got: dk,
        });
    }
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::field(
            "num_heads",
            format!("{num_heads} does not divide width {d}"),
        ));
    }
    if mask.dim() != (lq, lk) {
        return Err(Error::DimMismatch {
            what: "attention mask rows",
            expected: lq,
            got: mask.nrows(),
        });
    }
    for (i, row) in mask.rows().into_iter().enumerate() {
        if !row.iter().any(|&m| m) {
            return Err(Error::AllKeysMasked(i));
        }
    }
    let d_head = d / num_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(num_heads);
    let mut head_weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols: Vec<usize> = (h * d_head..(h + 1) * d_head).collect();
        let qh = tape.select_cols(q, &cols);
        let kh = tape.select_cols(k, &cols);
        let vh = tape.select_cols(v, &cols);
        let logits = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(logits, scale);
        let weights = tape.softmax_masked_rows(scaled, mask);
        let out = tape.matmul(weights, vh);
        head_outputs.push(out);
        head_weights.push(weights);
    }
    let concat = if num_heads == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)
    };
    Ok((concat, head_weights))
}

/// Captured attention weights for one sequence: `layers[l][h]` is the
/// row-stochastic `L x L` matrix of layer `l`, head `h`.
#[derive(Debug, Clone)]
pub struct SequenceAttention {
    pub layers: Vec<Vec<Array2<f64>>>,
}

impl SequenceAttention {
    /// Mean over heads of the first layer's weights — the heatmap payload.
    pub fn first_layer_mean(&self) -> Result<Array2<f64>> {
        let heads = self
            .layers
            .first()
            .filter(|h| !h.is_empty())
            .ok_or(Error::EmptyInput("captured attention weights"))?;
        let mut mean = Array2::zeros(heads[0].dim());
        for h in heads {
            mean += h;
        }
        mean /= heads.len() as f64;
        Ok(mean)
    }
}

/// Number of leading valid positions; padding must be a contiguous suffix.
fn leading_valid(seq: &TokenSequence) -> Result<usize> {
    let la = seq.valid.iter().take_while(|&&v| v).count();
    if la == 0 {
        return Err(Error::EmptyInput("valid tokens"));
    }
    if seq.valid[la..].iter().any(|&v| v) {
        return Err(Error::field("sequence", "padding must be a contiguous suffix"));
    }
    Ok(la)
}

/// Run the full NRA stack over a batch of sequences.
///
/// Returns the refined sequences (same shapes, PAD rows passed through from
/// the input) and the captured attention weights.
pub fn nra_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &NraConfig,
    seqs: &[TokenSequence],
) -> Result<(Vec<TokenSequence>, Vec<SequenceAttention>)> {
    cfg.validate()?;
    let mut refined = Vec::with_capacity(seqs.len());
    let mut captures = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let l_total = seq.len();
        if l_total > cfg.max_positions {
            return Err(Error::field(
                "max_positions",
                format!("sequence length {l_total} exceeds positional table {}", cfg.max_positions),
            ));
        }
        let la = leading_valid(seq)?;
        if tape.value(seq.node).ncols() != cfg.d_word {
            return Err(Error::DimMismatch {
                what: "sequence width",
                expected: cfg.d_word,
                got: tape.value(seq.node).ncols(),
            });
        }

        let x0 = seq.node;
        let mut x = x0;
        if cfg.use_pe {
            let positions: Vec<usize> = (0..l_total).collect();
            let pe_rows = {
                let pe = bound.id("nra.pe");
                tape.select_rows(pe, &positions)
            };
            x = tape.add(x, pe_rows);
        }

        // Every query row sees exactly the valid keys.
        let mask = Array2::from_shape_fn((l_total, l_total), |(_, j)| seq.valid[j]);

        let mut layer_weights: Vec<Vec<Array2<f64>>> = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            let mut heads_here = Vec::new();
            if cfg.use_attn {
                let ln = tape.layer_norm(x);
                let (q, k, v) = qkv_project(tape, bound, layer, ln)?;
                let (concat, weights) = scaled_attention(tape, q, k, v, &mask, cfg.num_heads)?;
                let proj = linear(tape, bound, &format!("nra.l{layer}.o"), concat)?;
                x = tape.add(x, proj);
                heads_here = weights.iter().map(|&w| tape.value(w).clone()).collect();
            }
            if cfg.use_ffn {
                let ln = tape.layer_norm(x);
                let h = linear(tape, bound, &format!("nra.l{layer}.ffn1"), ln)?;
                let act = tape.gelu(h);
                let f = linear(tape, bound, &format!("nra.l{layer}.ffn2"), act)?;
                x = tape.add(x, f);
            }
            layer_weights.push(heads_here);
        }

        if cfg.num_layers > 1 && cfg.use_outer_shortcut {
            x = tape.add(x, x0);
        }

        // PAD suffix passes through from the raw input.
        if la < l_total {
            let head_rows: Vec<usize> = (0..la).collect();
            let tail_rows: Vec<usize> = (la..l_total).collect();
            let head = tape.select_rows(x, &head_rows);
            let tail = tape.select_rows(x0, &tail_rows);
            x = tape.concat_rows(&[head, tail]);
        }

        refined.push(TokenSequence {
            node: x,
            segments: seq.segments.clone(),
            valid: seq.valid.clone(),
            end_index: seq.end_index,
        });
        captures.push(SequenceAttention {
            layers: layer_weights,
        });
    }
    Ok((refined, captures))
}
