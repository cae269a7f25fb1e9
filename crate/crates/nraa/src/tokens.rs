//! Pseudo-word tokens and region sequences.
//!
//! A region is never described by words; instead its RoI feature is mapped by
//! a learned linear layer (the V2L layer) to `l` pseudo-word tokens living in
//! the text encoder's word-embedding space. A proposal and its sampled
//! neighbors become one flat sequence
//!
//! ```text
//! [START, w_p1..w_pl, w_n1_1..w_n1_l, ..., END]
//! ```
//!
//! of length `1 + l * (1 + n_neighbors) + 1` before token dropout. Dropout
//! removes tokens (the sequence shortens; nothing is zero-masked), batching
//! pads with masked zero rows.

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::params::{BoundParams, ParamStore};
use ndarray::Array2;
use rand::Rng;
use std::ops::Range;

/// Role of one slot in a region sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentId {
    Start,
    /// Pseudo-word of the proposal region.
    Proposal,
    /// Pseudo-word of the i-th neighbor (0-based, sequence order).
    Neighbor(u8),
    End,
    /// Batch padding; never valid.
    Pad,
}

/// Length of an un-dropped sequence: START + `l` tokens per region + END.
pub fn expected_sequence_len(l: usize, n_neighbors: usize) -> usize {
    1 + l * (1 + n_neighbors) + 1
}

/// Learnable START/END marker embeddings, shared across all sequences.
pub const START_TOKEN: &str = "seq.start";
pub const END_TOKEN: &str = "seq.end";

pub fn init_start_end(store: &mut ParamStore, d_word: usize, rng: &mut impl Rng) {
    // Unit Gaussian scaled by d_word^(-1/2), like text-encoder token tables.
    store.insert_normal(START_TOKEN, 1, d_word, d_word, rng);
    store.insert_normal(END_TOKEN, 1, d_word, d_word, rng);
}

/// The vision-to-language layer: one linear map from a RoI feature to `l`
/// pseudo-word tokens.
#[derive(Debug, Clone, Copy)]
pub struct V2l {
    pub d_roi: usize,
    pub l: usize,
    pub d_word: usize,
}

impl V2l {
    pub const WEIGHT: &'static str = "v2l.weight";
    pub const BIAS: &'static str = "v2l.bias";

    pub fn init(
        store: &mut ParamStore,
        d_roi: usize,
        l: usize,
        d_word: usize,
        rng: &mut impl Rng,
    ) -> Self {
        store.insert_normal(Self::WEIGHT, d_roi, l * d_word, d_roi, rng);
        store.insert_zeros(Self::BIAS, 1, l * d_word);
        Self { d_roi, l, d_word }
    }

    /// Recover layer dimensions from a parameter store (checkpoint load path).
    pub fn from_store(store: &ParamStore, l: usize) -> Result<Self> {
        let w = store.get(Self::WEIGHT)?;
        if w.ncols() % l != 0 {
            return Err(Error::DimMismatch {
                what: "v2l weight columns not divisible by l",
                expected: l,
                got: w.ncols(),
            });
        }
        Ok(Self {
            d_roi: w.nrows(),
            l,
            d_word: w.ncols() / l,
        })
    }

    /// Map one RoI feature (`1 x d_roi`) to its `l x d_word` token block.
    pub fn v2l_map(&self, tape: &mut Tape, bound: &BoundParams, feature: &Array2<f64>) -> Result<NodeId> {
        if feature.dim() != (1, self.d_roi) {
            return Err(Error::DimMismatch {
                what: "RoI feature",
                expected: self.d_roi,
                got: feature.len(),
            });
        }
        let f = tape.leaf(feature.clone());
        let flat = tape.matmul(f, bound.id(Self::WEIGHT));
        let flat = tape.add_bias(flat, bound.id(Self::BIAS));
        // 1 x (l * d_word) -> l rows of d_word.
        let rows: Vec<NodeId> = (0..self.l)
            .map(|j| {
                let cols: Vec<usize> = (j * self.d_word..(j + 1) * self.d_word).collect();
                tape.select_cols(flat, &cols)
            })
            .collect();
        Ok(tape.concat_rows(&rows))
    }
}

/// Token dropout on one region's token block: each token is removed with
/// probability `p`, independently, resampling if all would drop so at least
/// one always survives. Identity outside training.
pub fn token_dropout(
    tape: &mut Tape,
    tokens: NodeId,
    p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::field("dropout_p", format!("{p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(tokens);
    }
    let l = tape.value(tokens).nrows();
    let keep: Vec<usize> = loop {
        let kept: Vec<usize> = (0..l).filter(|_| rng.random::<f64>() >= p).collect();
        if !kept.is_empty() {
            break kept;
        }
    };
    if keep.len() == l {
        return Ok(tokens);
    }
    Ok(tape.select_rows(tokens, &keep))
}

/// A region sequence on the tape: tokens plus per-slot roles, validity mask
/// (false only for PAD), and the END position.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub node: NodeId,
    pub segments: Vec<SegmentId>,
    pub valid: Vec<bool>,
    pub end_index: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Indices of valid (non-PAD) slots.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i]).collect()
    }

    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Contiguous runs of equal segment roles, in order — the region blocks
    /// the heatmap exporter draws boundaries between.
    pub fn segment_runs(&self) -> Vec<(SegmentId, Range<usize>)> {
        let mut runs: Vec<(SegmentId, Range<usize>)> = Vec::new();
        for (i, &s) in self.segments.iter().enumerate() {
            match runs.last_mut() {
                Some((last, range)) if *last == s => range.end = i + 1,
                _ => runs.push((s, i..i + 1)),
            }
        }
        runs
    }
}

/// Assemble `[START; proposal tokens; neighbor tokens...; END]` on the tape.
/// Token blocks may have been shortened by dropout; widths must agree.
pub fn build_region_sequence(
    tape: &mut Tape,
    start: NodeId,
    end: NodeId,
    proposal_tokens: NodeId,
    neighbor_tokens: &[NodeId],
) -> Result<TokenSequence> {
    let d_word = tape.value(proposal_tokens).ncols();
    for &n in neighbor_tokens {
        if tape.value(n).ncols() != d_word {
            return Err(Error::DimMismatch {
                what: "neighbor token width",
                expected: d_word,
                got: tape.value(n).ncols(),
            });
        }
    }
    if tape.value(start).dim() != (1, d_word) || tape.value(end).dim() != (1, d_word) {
        return Err(Error::DimMismatch {
            what: "START/END embedding width",
            expected: d_word,
            got: tape.value(start).ncols(),
        });
    }

    let mut parts = vec![start, proposal_tokens];
    let mut segments = vec![SegmentId::Start];
    segments.extend(std::iter::repeat_n(
        SegmentId::Proposal,
        tape.value(proposal_tokens).nrows(),
    ));
    for (i, &n) in neighbor_tokens.iter().enumerate() {
        parts.push(n);
        segments.extend(std::iter::repeat_n(
            SegmentId::Neighbor(i as u8),
            tape.value(n).nrows(),
        ));
    }
    parts.push(end);
    segments.push(SegmentId::End);
    let node = tape.concat_rows(&parts);
    let end_index = segments.len() - 1;

    Ok(TokenSequence {
        node,
        valid: vec![true; segments.len()],
        segments,
        end_index,
    })
}

/// Zero-pad every sequence to the batch maximum length. PAD slots are
/// invalid and must never change any downstream value.
pub fn pad_batch(tape: &mut Tape, sequences: &[TokenSequence], d_word: usize) -> Result<Vec<TokenSequence>> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("pad_batch sequences"));
    }
    let lmax = sequences.iter().map(|s| s.len()).max().unwrap();
    Ok(sequences
        .iter()
        .map(|seq| pad_to(tape, seq, lmax, d_word))
        .collect())
}

/// Append `target_len - len` zero PAD rows to one sequence.
pub fn pad_to(tape: &mut Tape, seq: &TokenSequence, target_len: usize, d_word: usize) -> TokenSequence {
    let len = seq.len();
    assert!(target_len >= len, "cannot pad {len} down to {target_len}");
    if target_len == len {
        return seq.clone();
    }
    let pad = tape.leaf(Array2::zeros((target_len - len, d_word)));
    let node = tape.concat_rows(&[seq.node, pad]);
    let mut segments = seq.segments.clone();
    segments.resize(target_len, SegmentId::Pad);
    let mut valid = seq.valid.clone();
    valid.resize(target_len, false);
    TokenSequence {
        node,
        segments,
        valid,
        end_index: seq.end_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_v2l(seed: u64, d_roi: usize, l: usize, d_word: usize) -> (ParamStore, V2l) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v2l = V2l::init(&mut store, d_roi, l, d_word, &mut rng);
        init_start_end(&mut store, d_word, &mut rng);
        (store, v2l)
    }

    fn full_sequence(
        tape: &mut Tape,
        store: &ParamStore,
        v2l: &V2l,
        n_neighbors: usize,
    ) -> TokenSequence {
        let bound = store.bind(tape);
        let feat = Array2::from_elem((1, v2l.d_roi), 0.5);
        let prop = v2l.v2l_map(tape, &bound, &feat).unwrap();
        let neighbors: Vec<NodeId> = (0..n_neighbors)
            .map(|i| {
                let f = Array2::from_elem((1, v2l.d_roi), i as f64 * 0.1);
                v2l.v2l_map(tape, &bound, &f).unwrap()
            })
            .collect();
        build_region_sequence(
            tape,
            bound.id(START_TOKEN),
            bound.id(END_TOKEN),
            prop,
            &neighbors,
        )
        .unwrap()
    }

    #[test]
    fn sequence_length_formula() {
        // 1 + l * (n + 1) + 1 at the reference settings.
        assert_eq!(expected_sequence_len(6, 3), 26);
        assert_eq!(expected_sequence_len(6, 0), 8);
        assert_eq!(expected_sequence_len(4, 8), 38);

        let (store, v2l) = toy_v2l(0, 5, 6, 4);
        let mut tape = Tape::new();
        let seq = full_sequence(&mut tape, &store, &v2l, 3);
        assert_eq!(seq.len(), 26);
        assert_eq!(seq.end_index, 25);
        assert_eq!(tape.value(seq.node).dim(), (26, 4));
    }

    #[test]
    fn segment_multiset_bookkeeping() {
        let (store, v2l) = toy_v2l(1, 5, 3, 4);
        let mut tape = Tape::new();
        let seq = full_sequence(&mut tape, &store, &v2l, 2);
        let count = |want: SegmentId| seq.segments.iter().filter(|&&s| s == want).count();
        assert_eq!(count(SegmentId::Start), 1);
        assert_eq!(count(SegmentId::Proposal), 3);
        assert_eq!(count(SegmentId::Neighbor(0)), 3);
        assert_eq!(count(SegmentId::Neighbor(1)), 3);
        assert_eq!(count(SegmentId::End), 1);
        assert_eq!(seq.segments[0], SegmentId::Start);
        assert_eq!(*seq.segments.last().unwrap(), SegmentId::End);

        let runs = seq.segment_runs();
        assert_eq!(runs.len(), 5);
        assert_eq!(runs[1], (SegmentId::Proposal, 1..4));
        assert_eq!(runs[3], (SegmentId::Neighbor(1), 7..10));
    }

    #[test]
    fn v2l_matches_flat_linear_map() {
        let (store, v2l) = toy_v2l(2, 5, 3, 4);
        let feature = Array2::from_shape_fn((1, 5), |(_, j)| j as f64 * 0.3 - 0.7);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tokens = v2l.v2l_map(&mut tape, &bound, &feature).unwrap();
        assert_eq!(tape.value(tokens).dim(), (3, 4));

        // Hand-computed: row j of the output is feature . W[:, j*4..(j+1)*4] + b.
        let w = store.get(V2l::WEIGHT).unwrap();
        let b = store.get(V2l::BIAS).unwrap();
        let flat = feature.dot(w) + b;
        for j in 0..3 {
            for c in 0..4 {
                assert!((tape.value(tokens)[(j, c)] - flat[(0, j * 4 + c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn v2l_linearity() {
        let (store, v2l) = toy_v2l(3, 4, 2, 3);
        let mut zeroed = store.clone();
        *zeroed.get_mut(V2l::BIAS).unwrap() = Array2::zeros((1, 6));

        let f = Array2::from_shape_fn((1, 4), |(_, j)| 0.2 * (j as f64 + 1.0));
        let mut tape = Tape::new();
        let bound = zeroed.bind(&mut tape);
        let t1 = v2l.v2l_map(&mut tape, &bound, &f).unwrap();
        let t2 = v2l.v2l_map(&mut tape, &bound, &(&f * 2.0)).unwrap();
        let zero = v2l.v2l_map(&mut tape, &bound, &Array2::zeros((1, 4))).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((tape.value(t2)[(r, c)] - 2.0 * tape.value(t1)[(r, c)]).abs() < 1e-14);
                assert_eq!(tape.value(zero)[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn v2l_rejects_wrong_width() {
        let (store, v2l) = toy_v2l(4, 5, 2, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let bad = Array2::zeros((1, 7));
        assert!(matches!(
            v2l.v2l_map(&mut tape, &bound, &bad),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::new();
        let tokens = tape.leaf(Array2::from_elem((6, 3), 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // p = 0 while training.
        assert_eq!(
            token_dropout(&mut tape, tokens, 0.0, true, &mut rng).unwrap(),
            tokens
        );
        // Inference ignores p.
        assert_eq!(
            token_dropout(&mut tape, tokens, 0.5, false, &mut rng).unwrap(),
            tokens
        );
        // p >= 1 rejected.
        assert!(token_dropout(&mut tape, tokens, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_always_keeps_at_least_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let tokens = tape.leaf(Array2::from_elem((6, 2), 1.0));
            let out = token_dropout(&mut tape, tokens, 0.9, true, &mut rng).unwrap();
            let kept = tape.value(out).nrows();
            assert!((1..=6).contains(&kept));
        }
    }

    #[test]
    fn dropout_conditional_mean_matches_binomial() {
        // Survivors ~ Binomial(6, 0.5) given >= 1, mean 3 / (1 - 2^-6) = 3.0476.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let mut total = 0usize;
        for _ in 0..trials {
            let mut tape = Tape::new();
            let tokens = tape.leaf(Array2::zeros((6, 1)));
            let out = token_dropout(&mut tape, tokens, 0.5, true, &mut rng).unwrap();
            total += tape.value(out).nrows();
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 3.05).abs() < 0.1, "conditional mean {mean}");
    }

    #[test]
    fn dropout_preserves_row_values_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let data = Array2::from_shape_fn((6, 2), |(r, c)| (r * 2 + c) as f64);
        let tokens = tape.leaf(data.clone());
        let out = token_dropout(&mut tape, tokens, 0.5, true, &mut rng).unwrap();
        let ov = tape.value(out);
        // Each output row is one input row; first coordinates strictly increase.
        let mut last = -1.0;
        for r in 0..ov.nrows() {
            let first = ov[(r, 0)];
            assert_eq!(first % 2.0, 0.0);
            assert!(first > last, "rows out of order");
            last = first;
            assert_eq!(ov[(r, 1)], first + 1.0);
        }
    }

    #[test]
    fn shortened_blocks_shrink_the_sequence() {
        let (store, v2l) = toy_v2l(9, 5, 6, 4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let feat = Array2::from_elem((1, 5), 0.3);
        let prop = v2l.v2l_map(&mut tape, &bound, &feat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dropped = token_dummy_until_shorter(&mut tape, prop, &mut rng);
        let kept = tape.value(dropped).nrows();
        assert!(kept < 6);
        let seq = build_region_sequence(
            &mut tape,
            bound.id(START_TOKEN),
            bound.id(END_TOKEN),
            dropped,
            &[],
        )
        .unwrap();
        assert_eq!(seq.len(), 1 + kept + 1);
        assert_eq!(seq.end_index, seq.len() - 1);
    }

    /// Redraws dropout until it actually removes something.
    fn token_dummy_until_shorter(tape: &mut Tape, tokens: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
        loop {
            let out = token_dropout(tape, tokens, 0.5, true, rng).unwrap();
            if tape.value(out).nrows() < tape.value(tokens).nrows() {
                return out;
            }
        }
    }

    #[test]
    fn pad_batch_masks_and_roundtrips() {
        let (store, v2l) = toy_v2l(11, 5, 6, 4);
        let mut tape = Tape::new();
        let seq_small = full_sequence(&mut tape, &store, &v2l, 0); // len 8
        let seq_big = full_sequence(&mut tape, &store, &v2l, 3); // len 26
        let padded = pad_batch(&mut tape, &[seq_small.clone(), seq_big.clone()], 4).unwrap();

        assert_eq!(padded[0].len(), 26);
        assert_eq!(padded[1].len(), 26);
        assert_eq!(padded[0].valid.iter().filter(|&&v| !v).count(), 18);
        assert_eq!(padded[0].end_index, 7); // END position preserved

        // Mask-select recovers the original bit-exactly.
        let recovered = tape.select_rows(padded[0].node, &padded[0].valid_indices());
        assert_eq!(tape.value(recovered), tape.value(seq_small.node));
        // Second sequence needed no padding.
        assert_eq!(tape.value(padded[1].node), tape.value(seq_big.node));
        // PAD rows are exactly zero.
        for r in 8..26 {
            assert!(tape.value(padded[0].node).row(r).iter().all(|&x| x == 0.0));
            assert_eq!(padded[0].segments[r], SegmentId::Pad);
        }
    }

    #[test]
    fn pad_batch_rejects_empty() {
        let mut tape = Tape::new();
        assert!(pad_batch(&mut tape, &[], 4).is_err());
    }
}
