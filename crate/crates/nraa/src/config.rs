//! Run configuration: every trainer and ablation knob, a plain-text
//! `key = value` file format, and the validation rules that keep the
//! ablation grid inside the set of meaningful wirings.
//!
//! A config file may set any subset of keys; unset keys keep their
//! defaults. Unknown keys, duplicate keys, and malformed values are
//! reported with the file name, line number, and field name.

use crate::det::fnv1a64;
use crate::error::{Error, Result};
use crate::nra::NraConfig;
use crate::ovd::InferenceSettings;
use crate::tokens::expected_sequence_len;
use crate::toy::{ProposeConfig, ToyGenConfig};
use std::fmt::Write as _;
use std::path::Path;

/// The ablation-grid switches: which pieces of the method exist and where
/// the attention block sits in the train/test wiring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationConfig {
    /// Sample neighboring regions into the sequences at all.
    pub use_neighbors: bool,
    /// The attention block exists.
    pub use_nra: bool,
    /// Attention sublayer inside the block. Tied to `use_nra` by
    /// validation; kept as its own key so grid files read like the
    /// component table they encode.
    pub use_nattn: bool,
    pub use_ffn: bool,
    pub use_pe: bool,
    /// Refine sequences feeding the classification loss at train time.
    pub nra_in_train_cls: bool,
    /// Refine sequences feeding the alignment loss at train time.
    pub nra_in_train_align: bool,
    /// Refine sequences during test-time classification.
    pub nra_in_test_cls: bool,
    pub num_layers: usize,
    pub outer_shortcut: bool,
    /// Proposals kept per scene after score ranking.
    pub topk: usize,
    /// Neighbor draws per proposal, 1..=8.
    pub max_neighbors: usize,
    /// Run the alignment (distillation) branch at all.
    pub distill: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        // The published pipeline: neighbors on, single attention block used
        // only in the alignment branch during training, nothing at test.
        Self {
            use_neighbors: true,
            use_nra: true,
            use_nattn: true,
            use_ffn: true,
            use_pe: true,
            nra_in_train_cls: false,
            nra_in_train_align: true,
            nra_in_test_cls: false,
            num_layers: 1,
            outer_shortcut: false,
            topk: 300,
            max_neighbors: 8,
            distill: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk < 1 {
            return Err(Error::field("topk", "must be at least 1"));
        }
        if self.num_layers < 1 {
            return Err(Error::field("num_layers", "must be at least 1"));
        }
        if self.use_neighbors && !(1..=8).contains(&self.max_neighbors) {
            return Err(Error::field("max_neighbors", "must lie in 1..=8"));
        }
        if self.use_nattn != self.use_nra {
            return Err(Error::field(
                "use_nattn",
                "the attention sublayer is what makes the block a block; it is present exactly when use_nra is",
            ));
        }
        if self.use_nra {
            if !self.nra_in_train_cls && !self.nra_in_train_align {
                return Err(Error::field(
                    "use_nra",
                    "the block must participate in at least one training loss (nra_in_train_cls or nra_in_train_align)",
                ));
            }
        } else {
            for (flag, name) in [
                (self.nra_in_train_cls, "nra_in_train_cls"),
                (self.nra_in_train_align, "nra_in_train_align"),
                (self.nra_in_test_cls, "nra_in_test_cls"),
                (self.use_ffn, "use_ffn"),
                (self.use_pe, "use_pe"),
            ] {
                if flag {
                    return Err(Error::field(
                        "use_nra",
                        format!("{name} requires use_nra = true"),
                    ));
                }
            }
        }
        if self.nra_in_train_align && !self.distill {
            return Err(Error::field(
                "nra_in_train_align",
                "the alignment branch does not run when distill = false",
            ));
        }
        Ok(())
    }
}

/// Full run configuration: model dimensions, optimization schedule, data
/// generation, inference thresholds, and the ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// L2 penalty applied inside the SGD update.
    pub weight_decay: f64,
    /// Step at which the learning rate drops by 10x.
    pub decay_at: usize,
    pub batch_scenes: usize,
    /// Pseudo-words per region (`l`).
    pub num_words: usize,
    pub d_word: usize,
    pub d_embed: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub max_positions: usize,
    /// Probability of excluding each region token from alignment sequences.
    pub token_dropout: f64,
    pub tau_align: f64,
    pub tau_train: f64,
    pub tau_test: f64,
    pub queue_capacity: usize,
    /// Weight of the alignment loss in the total.
    pub lambda: f64,
    pub normalize_by_k: bool,
    pub context_len: usize,
    pub num_train_images: usize,
    pub num_test_images: usize,
    pub image_size: u32,
    pub jitter: f64,
    pub distractors: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Neighbor-set draws per proposal per step.
    pub num_draws: usize,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-3,
            decay_at: 1500,
            batch_scenes: 2,
            num_words: 6,
            d_word: 32,
            d_embed: 8,
            num_heads: 4,
            ffn_hidden: 64,
            max_positions: 64,
            token_dropout: 0.5,
            tau_align: 1.0 / 30.0,
            tau_train: 1.0 / 50.0,
            tau_test: 1.0 / 50.0,
            queue_capacity: 256,
            lambda: 1.0,
            normalize_by_k: false,
            context_len: 77,
            num_train_images: 200,
            num_test_images: 60,
            image_size: 64,
            jitter: 0.1,
            distractors: 2,
            score_threshold: 0.05,
            nms_iou: 0.5,
            num_draws: 1,
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::field("steps", "must be at least 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::field("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::field("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::field("weight_decay", "must be non-negative"));
        }
        if self.batch_scenes < 1 {
            return Err(Error::field("batch_scenes", "must be at least 1"));
        }
        if self.num_words < 1 {
            return Err(Error::field("num_words", "must be at least 1"));
        }
        if self.d_embed < 2 || self.d_embed + 1 > self.d_word {
            return Err(Error::field(
                "d_embed",
                "need 2 <= d_embed < d_word for the text projection",
            ));
        }
        if self.ablation.use_nra && self.d_word % self.num_heads != 0 {
            return Err(Error::field("num_heads", "must divide d_word"));
        }
        for (tau, name) in [
            (self.tau_align, "tau_align"),
            (self.tau_train, "tau_train"),
            (self.tau_test, "tau_test"),
        ] {
            if tau <= 0.0 {
                return Err(Error::field(name, "temperature must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return Err(Error::field("token_dropout", "must lie in [0, 1)"));
        }
        if self.lambda < 0.0 {
            return Err(Error::field("lambda", "must be non-negative"));
        }
        if self.queue_capacity < 1 {
            return Err(Error::field("queue_capacity", "must be at least 1"));
        }
        if self.num_train_images < 1 {
            return Err(Error::field("num_train_images", "need at least one scene"));
        }
        if self.num_test_images < 1 {
            return Err(Error::field("num_test_images", "need at least one scene"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::field("jitter", "must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::field("score_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.nms_iou) {
            return Err(Error::field("nms_iou", "must lie in [0, 1)"));
        }
        if self.num_draws < 1 {
            return Err(Error::field("num_draws", "must be at least 1"));
        }
        self.ablation.validate()?;
        let longest = expected_sequence_len(
            self.num_words,
            if self.ablation.use_neighbors {
                self.ablation.max_neighbors
            } else {
                0
            },
        );
        if self.max_positions < longest {
            return Err(Error::field(
                "max_positions",
                format!("{} is shorter than the longest sequence {longest}", self.max_positions),
            ));
        }
        Ok(())
    }

    /// Apply one `key = value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn b(field: &'static str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::field(field, format!("expected true or false, got `{v}`"))),
            }
        }
        fn u(field: &'static str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::field(field, format!("expected an integer, got `{v}`")))
        }
        fn f(field: &'static str, v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::field(field, format!("expected a number, got `{v}`")))
        }
        match key {
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::field("seed", format!("expected an integer, got `{value}`")))?
            }
            "steps" => self.steps = u("steps", value)?,
            "lr" => self.lr = f("lr", value)?,
            "momentum" => self.momentum = f("momentum", value)?,
            "weight_decay" => self.weight_decay = f("weight_decay", value)?,
            "decay_at" => self.decay_at = u("decay_at", value)?,
            "batch_scenes" => self.batch_scenes = u("batch_scenes", value)?,
            "num_words" => self.num_words = u("num_words", value)?,
            "d_word" => self.d_word = u("d_word", value)?,
            "d_embed" => self.d_embed = u("d_embed", value)?,
            "num_heads" => self.num_heads = u("num_heads", value)?,
            "ffn_hidden" => self.ffn_hidden = u("ffn_hidden", value)?,
            "max_positions" => self.max_positions = u("max_positions", value)?,
            "token_dropout" => self.token_dropout = f("token_dropout", value)?,
            "tau_align" => self.tau_align = f("tau_align", value)?,
            "tau_train" => self.tau_train = f("tau_train", value)?,
            "tau_test" => self.tau_test = f("tau_test", value)?,
            "queue_capacity" => self.queue_capacity = u("queue_capacity", value)?,
            "lambda" => self.lambda = f("lambda", value)?,
            "normalize_by_k" => self.normalize_by_k = b("normalize_by_k", value)?,
            "context_len" => self.context_len = u("context_len", value)?,
            "num_train_images" => self.num_train_images = u("num_train_images", value)?,
            "num_test_images" => self.num_test_images = u("num_test_images", value)?,
            "image_size" => {
                self.image_size = value
                    .parse()
                    .map_err(|_| Error::field("image_size", format!("expected an integer, got `{value}`")))?
            }
            "jitter" => self.jitter = f("jitter", value)?,
            "distractors" => self.distractors = u("distractors", value)?,
            "score_threshold" => self.score_threshold = f("score_threshold", value)?,
            "nms_iou" => self.nms_iou = f("nms_iou", value)?,
            "num_draws" => self.num_draws = u("num_draws", value)?,
            "use_neighbors" => self.ablation.use_neighbors = b("use_neighbors", value)?,
            "use_nra" => self.ablation.use_nra = b("use_nra", value)?,
            "use_nattn" => self.ablation.use_nattn = b("use_nattn", value)?,
            "use_ffn" => self.ablation.use_ffn = b("use_ffn", value)?,
            "use_pe" => self.ablation.use_pe = b("use_pe", value)?,
            "nra_in_train_cls" => self.ablation.nra_in_train_cls = b("nra_in_train_cls", value)?,
            "nra_in_train_align" => self.ablation.nra_in_train_align = b("nra_in_train_align", value)?,
            "nra_in_test_cls" => self.ablation.nra_in_test_cls = b("nra_in_test_cls", value)?,
            "num_layers" => self.ablation.num_layers = u("num_layers", value)?,
            "outer_shortcut" => self.ablation.outer_shortcut = b("outer_shortcut", value)?,
            "topk" => self.ablation.topk = u("topk", value)?,
            "max_neighbors" => self.ablation.max_neighbors = u("max_neighbors", value)?,
            "distill" => self.ablation.distill = b("distill", value)?,
            other => {
                return Err(Error::field("config", format!("unknown key `{other}`")));
            }
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order. `load(save(c)) == c`.
    pub fn to_text(&self) -> String {
        let a = &self.ablation;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("momentum", format!("{:?}", self.momentum));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("decay_at", self.decay_at.to_string());
        kv("batch_scenes", self.batch_scenes.to_string());
        kv("num_words", self.num_words.to_string());
        kv("d_word", self.d_word.to_string());
        kv("d_embed", self.d_embed.to_string());
        kv("num_heads", self.num_heads.to_string());
        kv("ffn_hidden", self.ffn_hidden.to_string());
        kv("max_positions", self.max_positions.to_string());
        kv("token_dropout", format!("{:?}", self.token_dropout));
        kv("tau_align", format!("{:?}", self.tau_align));
        kv("tau_train", format!("{:?}", self.tau_train));
        kv("tau_test", format!("{:?}", self.tau_test));
        kv("queue_capacity", self.queue_capacity.to_string());
        kv("lambda", format!("{:?}", self.lambda));
        kv("normalize_by_k", self.normalize_by_k.to_string());
        kv("context_len", self.context_len.to_string());
        kv("num_train_images", self.num_train_images.to_string());
        kv("num_test_images", self.num_test_images.to_string());
        kv("image_size", self.image_size.to_string());
        kv("jitter", format!("{:?}", self.jitter));
        kv("distractors", self.distractors.to_string());
        kv("score_threshold", format!("{:?}", self.score_threshold));
        kv("nms_iou", format!("{:?}", self.nms_iou));
        kv("num_draws", self.num_draws.to_string());
        kv("use_neighbors", a.use_neighbors.to_string());
        kv("use_nra", a.use_nra.to_string());
        kv("use_nattn", a.use_nattn.to_string());
        kv("use_ffn", a.use_ffn.to_string());
        kv("use_pe", a.use_pe.to_string());
        kv("nra_in_train_cls", a.nra_in_train_cls.to_string());
        kv("nra_in_train_align", a.nra_in_train_align.to_string());
        kv("nra_in_test_cls", a.nra_in_test_cls.to_string());
        kv("num_layers", a.num_layers.to_string());
        kv("outer_shortcut", a.outer_shortcut.to_string());
        kv("topk", a.topk.to_string());
        kv("max_neighbors", a.max_neighbors.to_string());
        kv("distill", a.distill.to_string());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parse a config file onto the defaults. Lines are `key = value`;
    /// blank lines and `#` comments are skipped; keys may not repeat.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let display = path.display().to_string();
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    path: display,
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigParse {
                    path: display,
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.apply_kv(key, value).map_err(|e| Error::ConfigParse {
                path: display.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Stable 64-bit fingerprint of the canonical text form; stored in
    /// checkpoints to catch config/weight mismatches.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    /// The attention-block shape implied by this run.
    pub fn nra_config(&self) -> NraConfig {
        NraConfig {
            d_word: self.d_word,
            num_heads: self.num_heads,
            ffn_hidden: self.ffn_hidden,
            num_layers: self.ablation.num_layers,
            use_attn: self.ablation.use_nattn,
            use_ffn: self.ablation.use_ffn,
            use_pe: self.ablation.use_pe,
            use_outer_shortcut: self.ablation.outer_shortcut,
            max_positions: self.max_positions,
        }
    }

    pub fn gen_config(&self) -> ToyGenConfig {
        ToyGenConfig {
            image_size: self.image_size,
            ..ToyGenConfig::default()
        }
    }

    pub fn propose_config(&self) -> ProposeConfig {
        ProposeConfig {
            jitter: self.jitter,
            distractors: self.distractors,
            ..ProposeConfig::default()
        }
    }

    pub fn inference_settings(&self) -> InferenceSettings {
        InferenceSettings {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
        }
    }
}
