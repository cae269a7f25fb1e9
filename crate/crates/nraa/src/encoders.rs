//! Frozen vision-language encoders: the distillation teacher.
//!
//! Real checkpoints are out of scope; what ships is a deterministic oracle
//! pair whose behavior is closed-form verifiable. The text oracle takes the
//! mean of the valid tokens, projects it through a fixed row-orthonormal
//! matrix `P_t` and L2-normalizes; the image oracle projects the mean color
//! of a patch through a fixed matrix `P_i` and normalizes. Both projections
//! are frozen: they enter the tape only as constants, so no gradient can
//! reach them even in principle, while gradients DO flow through the text
//! side into the input tokens.
//!
//! In the "paired" construction every class name is assigned a word vector
//! `e_k . P_t` where `e_k` is the normalized embedding of the class's
//! canonical color, and every other word lies in the kernel of `P_t`. A
//! prompt for class k then embeds to exactly `e_k`, the same embedding a
//! solid patch of the class color produces — alignment against this teacher
//! has an exact solution, which makes end-to-end success measurable without
//! pretrained weights.

use crate::det::fnv1a64;
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::image::Image;
use crate::tokens::TokenSequence;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Class split selector, also the CLI `--split` argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    Novel,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            "all" => Ok(Split::All),
            other => Err(Error::field("split", format!("`{other}` not one of base|novel|all"))),
        }
    }
}

/// Base/novel class names plus prompt templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub prompt_templates: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(
        base_classes: Vec<String>,
        novel_classes: Vec<String>,
        prompt_templates: Vec<String>,
    ) -> Result<Self> {
        if base_classes.is_empty() {
            return Err(Error::EmptyInput("base class list"));
        }
        if prompt_templates.is_empty() {
            return Err(Error::EmptyInput("prompt template list"));
        }
        for t in &prompt_templates {
            if !t.contains("{}") {
                return Err(Error::field(
                    "prompt_templates",
                    format!("template `{t}` lacks the {{}} class placeholder"),
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in base_classes.iter().chain(&novel_classes) {
            if name.trim().is_empty() {
                return Err(Error::field("classes", "empty class name"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::field(
                    "classes",
                    format!("class `{name}` appears twice (splits must be disjoint)"),
                ));
            }
        }
        Ok(Self {
            base_classes,
            novel_classes,
            prompt_templates,
        })
    }

    /// Load from plain-text files: one class per line for the two splits,
    /// one template per line (with a `{}` placeholder) for the prompts.
    /// Blank lines and `#` comments are skipped.
    pub fn load(base: &Path, novel: &Path, templates: &Path) -> Result<Self> {
        Ok(Self::new(read_lines(base)?, read_lines(novel)?, read_lines(templates)?)?)
    }

    pub fn num_base(&self) -> usize {
        self.base_classes.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel_classes.len()
    }

    pub fn num_all(&self) -> usize {
        self.num_base() + self.num_novel()
    }

    /// All class names, base first then novel — the global index order.
    pub fn all_classes(&self) -> impl Iterator<Item = &str> {
        self.base_classes
            .iter()
            .chain(&self.novel_classes)
            .map(|s| s.as_str())
    }

    pub fn class_names(&self, split: Split) -> Vec<&str> {
        match split {
            Split::Base => self.base_classes.iter().map(|s| s.as_str()).collect(),
            Split::Novel => self.novel_classes.iter().map(|s| s.as_str()).collect(),
            Split::All => self.all_classes().collect(),
        }
    }

    /// Global index of a class name, if known.
    pub fn global_index(&self, name: &str) -> Option<usize> {
        self.all_classes().position(|c| c == name)
    }

    pub fn is_novel(&self, name: &str) -> bool {
        self.novel_classes.iter().any(|c| c == name)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_string())
        .collect())
}

/// Row-orthonormal basis of R^d from Gram-Schmidt on seeded Gaussian draws.
fn orthonormal_basis(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let normal = StandardNormal;
    let mut basis: Array2<f64> = Array2::zeros((d, d));
    for i in 0..d {
        loop {
            let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| normal.sample(rng));
            for j in 0..i {
                let dot = v.dot(&basis.row(j));
                v.scaled_add(-dot, &basis.row(j));
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                v /= norm;
                basis.row_mut(i).assign(&v);
                break;
            }
        }
    }
    basis
}

/// The frozen oracle encoder pair. Immutable after construction.
#[derive(Debug)]
pub struct OracleVlm {
    pub d_word: usize,
    pub d_embed: usize,
    /// Longest token sequence the text encoder accepts.
    pub context_len: usize,
    /// `d_embed x d_word`, orthonormal rows.
    text_proj: Array2<f64>,
    /// `(d_word - d_embed) x d_word`: basis of the null space of `text_proj`.
    kernel: Array2<f64>,
    /// `d_embed x 3`.
    image_proj: Array2<f64>,
    /// Known word vectors (class names in the paired construction).
    words: BTreeMap<String, Array2<f64>>,
    image_calls: AtomicUsize,
}

impl OracleVlm {
    /// Plain oracle: no vocabulary beyond hash-derived kernel words.
    pub fn new(d_word: usize, d_embed: usize, context_len: usize, seed: u64) -> Result<Self> {
        if d_embed + 1 > d_word {
            return Err(Error::field(
                "d_embed",
                format!("{d_embed} leaves no kernel inside d_word={d_word}"),
            ));
        }
        if d_embed < 2 {
            return Err(Error::field("d_embed", "need at least 2 embedding dims"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = orthonormal_basis(d_word, &mut rng);
        let text_proj = basis.slice(ndarray::s![..d_embed, ..]).to_owned();
        let kernel = basis.slice(ndarray::s![d_embed.., ..]).to_owned();
        // Column-orthonormal whenever d_embed >= 3, so the image path is an
        // isometry on RGB space: pairwise cosines between mean colors survive
        // the projection intact instead of being warped by a random Gaussian
        // map. Below three dims the best available is row-orthonormal.
        let image_proj = if d_embed >= 3 {
            orthonormal_basis(d_embed, &mut rng)
                .slice(ndarray::s![..3, ..])
                .t()
                .to_owned()
        } else {
            orthonormal_basis(3, &mut rng)
                .slice(ndarray::s![..d_embed, ..])
                .to_owned()
        };
        Ok(Self {
            d_word,
            d_embed,
            context_len,
            text_proj,
            kernel,
            image_proj,
            words: BTreeMap::new(),
            image_calls: AtomicUsize::new(0),
        })
    }

    /// Paired oracle: class `k`'s name maps to the word vector whose text
    /// embedding equals the image embedding of class `k`'s canonical color.
    pub fn paired(
        vocab: &ClassVocabulary,
        colors: &[[f64; 3]],
        d_word: usize,
        d_embed: usize,
        context_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if colors.len() != vocab.num_all() {
            return Err(Error::DimMismatch {
                what: "class color table",
                expected: vocab.num_all(),
                got: colors.len(),
            });
        }
        let mut oracle = Self::new(d_word, d_embed, context_len, seed)?;
        for (name, color) in vocab.all_classes().zip(colors) {
            let e = oracle.embed_color(*color)?;
            // e . P_t lies outside the kernel and projects back to exactly e.
            let word = e.dot(&oracle.text_proj);
            oracle.words.insert(name.to_string(), word);
        }
        Ok(oracle)
    }

    /// Override or define a word vector. Intended for tests that need exact
    /// control over the prompt geometry.
    pub fn set_word(&mut self, word: &str, vector: Array2<f64>) {
        assert_eq!(vector.dim(), (1, self.d_word), "word vector width");
        self.words.insert(word.to_string(), vector);
    }

    /// The text projection, exposed read-only (heatmap tooling, tests).
    pub fn text_projection(&self) -> &Array2<f64> {
        &self.text_proj
    }

    pub fn image_projection(&self) -> &Array2<f64> {
        &self.image_proj
    }

    /// How many image-encoder forwards have run (performance guard in tests).
    pub fn image_call_count(&self) -> usize {
        self.image_calls.load(Ordering::Relaxed)
    }

    /// Normalized embedding of a color: `normalize(P_i . rgb)`.
    pub fn embed_color(&self, rgb: [f64; 3]) -> Result<Array2<f64>> {
        let c = Array1::from(rgb.to_vec());
        let v = self.image_proj.dot(&c);
        normalize_row(v.insert_axis(ndarray::Axis(0)).into_dimensionality().unwrap())
    }

    /// Word vector for one token of a prompt. Unknown words map to a
    /// deterministic hash-derived direction inside the kernel of `P_t`, so
    /// they contribute nothing to the text embedding.
    fn word_vector(&self, word: &str) -> Array2<f64> {
        if let Some(v) = self.words.get(word) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word.as_bytes()));
        let normal = StandardNormal;
        let coeffs: Array2<f64> =
            Array2::from_shape_fn((1, self.kernel.nrows()), |_| normal.sample(&mut rng));
        let v = coeffs.dot(&self.kernel);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v / norm
    }

    /// Tokenize a prompt: lowercase, whitespace split, bracketed by the
    /// oracle's own (frozen, kernel-valued) start/end markers.
    fn prompt_tokens(&self, prompt: &str) -> Array2<f64> {
        let words: Vec<String> = prompt
            .to_lowercase()
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-').to_string())
            .filter(|w| !w.is_empty())
            .collect();
        let mut rows = Array2::zeros((words.len() + 2, self.d_word));
        rows.row_mut(0).assign(&self.word_vector("<start>").row(0));
        for (i, w) in words.iter().enumerate() {
            rows.row_mut(i + 1).assign(&self.word_vector(w).row(0));
        }
        let last = words.len() + 1;
        rows.row_mut(last).assign(&self.word_vector("<end>").row(0));
        rows
    }

    /// Frozen text encoder on a natural-language prompt.
    pub fn encode_text(&self, prompt: &str) -> Result<Array2<f64>> {
        let tokens = self.prompt_tokens(prompt);
        let valid = vec![true; tokens.nrows()];
        self.encode_token_matrix(&tokens, &valid)
    }

    /// Numeric text encoder on an explicit token matrix: masked mean of the
    /// valid rows, projected to `d_embed`, L2-normalized.
    pub fn encode_token_matrix(&self, tokens: &Array2<f64>, valid: &[bool]) -> Result<Array2<f64>> {
        if tokens.nrows() > self.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.nrows(),
                max: self.context_len,
            });
        }
        assert_eq!(tokens.nrows(), valid.len(), "one mask entry per token");
        let picked: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        if picked.is_empty() {
            return Err(Error::EmptyInput("valid tokens"));
        }
        let mut mean = Array2::zeros((1, self.d_word));
        for &r in &picked {
            mean.row_mut(0).scaled_add(1.0, &tokens.row(r));
        }
        mean /= picked.len() as f64;
        normalize_row(mean.dot(&self.text_proj.t()))
    }

    /// Differentiable text-encoder forward on a region sequence. The
    /// projection enters the tape as a constant: gradients flow into the
    /// tokens, never into the teacher.
    pub fn encode_region_tokens(&self, tape: &mut Tape, seq: &TokenSequence) -> Result<NodeId> {
        if seq.len() > self.context_len {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                max: self.context_len,
            });
        }
        let picked = seq.valid_indices();
        if picked.is_empty() {
            return Err(Error::EmptyInput("valid tokens"));
        }
        let mean = tape.mean_rows_subset(seq.node, &picked);
        let proj = tape.matmul_const_nt(mean, &self.text_proj);
        Ok(tape.l2_norm_rows(proj))
    }

    /// Frozen image encoder on a patch: mean color, projected, normalized.
    pub fn encode_image_patch(&self, patch: &Image) -> Result<Array2<f64>> {
        self.image_calls.fetch_add(1, Ordering::Relaxed);
        self.embed_color(patch.mean_rgb())
    }

    /// Prompt-ensemble class embeddings: for each class in the split, encode
    /// every template instantiation, average the normalized embeddings, and
    /// re-normalize. Rows follow the split's class order.
    pub fn class_prompt_embeddings(&self, vocab: &ClassVocabulary, split: Split) -> Result<Array2<f64>> {
        let names = vocab.class_names(split);
        let mut out = Array2::zeros((names.len(), self.d_embed));
        for (i, name) in names.iter().enumerate() {
            let mut acc = Array2::zeros((1, self.d_embed));
            for template in &vocab.prompt_templates {
                let prompt = template.replace("{}", name);
                acc += &self.encode_text(&prompt)?;
            }
            acc /= vocab.prompt_templates.len() as f64;
            out.row_mut(i).assign(&normalize_row(acc)?.row(0));
        }
        Ok(out)
    }
}

/// Normalize a `1 x d` row to unit length; rejects near-zero vectors.
pub fn normalize_row(v: Array2<f64>) -> Result<Array2<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::NotNormalized(norm));
    }
    Ok(v / norm)
}

/// Check every row of a matrix is unit-norm within `tol`.
pub fn validate_unit_rows(m: &Array2<f64>, tol: f64) -> Result<()> {
    for row in m.rows() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > tol {
            return Err(Error::NotNormalized(norm));
        }
    }
    Ok(())
}
