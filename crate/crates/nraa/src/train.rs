//! Training loop: the classification branch over score-ranked proposals,
//! the distillation branch that aligns neighbor-sequence embeddings with
//! frozen image embeddings of the union crop, and the ablation grid that
//! rewires both.
//!
//! One gradient tape per step. Teacher outputs enter the tape only as
//! constants, so no gradient can reach the frozen encoders by
//! construction.


use crate::alignment::{info_nce_from_rows, EmbeddingQueue};
use crate::config::TrainConfig;
use crate::det::{stream_rng, Stream};
use crate::encoders::{ClassVocabulary, OracleVlm, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::geometry::{iou, sample_neighbors, union_box, BBox, ImageSize, RegionSample};
use crate::graph::{NodeId, Tape};
use crate::nra::{init_nra, nra_forward};
use crate::ovd::{cls_logits_graph, cls_loss_graph, init_background, BACKGROUND};
use crate::params::{ParamStore, SgdMomentum};
use crate::tokens::{
    build_region_sequence, init_start_end, token_dropout, V2l, END_TOKEN, START_TOKEN,
};
use crate::toy::{
    canonical_prompt_colors, generate_toy_benchmark, propose, roi_features, scene_stream_key,
    select_topk,
    ToyScene, D_ROI,
};
use ndarray::Array2;

/// Side of the square crop handed to the frozen image encoder.
pub const TEACHER_PATCH_SIDE: u32 = 16;

/// Minimum overlap for a proposal to take a ground-truth label instead of
/// background.
pub const MATCH_IOU: f64 = 0.5;

/// Per-step loss report.
#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub step: usize,
    pub cls: f64,
    /// Alignment loss value; absent when distillation is off.
    pub align: Option<f64>,
    pub total: f64,
}

/// Fresh parameters for a run: the V2L map, sequence markers, the
/// background embedding, and (when the block exists) attention weights.
/// All draws come from the dedicated init stream.
pub fn init_model(cfg: &TrainConfig) -> Result<ParamStore> {
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
    let mut store = ParamStore::new();
    V2l::init(&mut store, D_ROI, cfg.num_words, cfg.d_word, &mut rng);
    init_start_end(&mut store, cfg.d_word, &mut rng);
    init_background(&mut store, cfg.d_embed, &mut rng);
    if cfg.ablation.use_nra {
        init_nra(&cfg.nra_config(), &mut store, &mut rng)?;
    }
    Ok(store)
}

/// Label for a proposal: the best-overlapping ground-truth class at
/// `MATCH_IOU` or better, else the background index one past the last
/// base class.
pub fn proposal_label(scene: &ToyScene, bbox: &BBox, vocab: &ClassVocabulary) -> usize {
    let mut best: Option<(f64, &str)> = None;
    for (gbox, name) in &scene.objects {
        let overlap = iou(gbox, bbox);
        if overlap > best.map_or(0.0, |(o, _)| o) {
            best = Some((overlap, name));
        }
    }
    match best {
        Some((overlap, name)) if overlap >= MATCH_IOU => vocab
            .global_index(name)
            .expect("scene classes come from the vocabulary"),
        _ => vocab.num_base(),
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    vocab: &'a ClassVocabulary,
    oracle: &'a OracleVlm,
    scenes: &'a [ToyScene],
    store: ParamStore,
    opt: SgdMomentum,
    q_img: EmbeddingQueue,
    q_txt: EmbeddingQueue,
    /// Frozen text embeddings of the base classes, rows in global order.
    base_embs: Array2<f64>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        vocab: &'a ClassVocabulary,
        oracle: &'a OracleVlm,
        scenes: &'a [ToyScene],
    ) -> Result<Self> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(Error::EmptyInput("training scenes"));
        }
        let store = init_model(&cfg)?;
        let base_embs = oracle.class_prompt_embeddings(vocab, Split::Base)?;
        if base_embs.ncols() != cfg.d_embed {
            return Err(Error::DimMismatch {
                what: "oracle embedding width",
                expected: cfg.d_embed,
                got: base_embs.ncols(),
            });
        }
        let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
        opt.weight_decay = cfg.weight_decay;
        let q_img = EmbeddingQueue::new(cfg.queue_capacity, cfg.d_embed);
        let q_txt = EmbeddingQueue::new(cfg.queue_capacity, cfg.d_embed);
        Ok(Self {
            cfg,
            vocab,
            oracle,
            scenes,
            store,
            opt,
            q_img,
            q_txt,
            base_embs,
            step: 0,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn optimizer(&self) -> &SgdMomentum {
        &self.opt
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Overwrite parameters, optimizer velocity, and the step counter
    /// (checkpoint resume). Negative queues restart empty.
    pub fn restore(
        &mut self,
        store: ParamStore,
        velocities: impl IntoIterator<Item = (String, Array2<f64>)>,
        step: usize,
    ) {
        self.store = store;
        for (name, v) in velocities {
            self.opt.set_velocity(&name, v);
        }
        self.step = step;
    }

    /// One optimization step over the next scene batch.
    pub fn step_once(&mut self) -> Result<LossRecord> {
        let step = self.step;
        let ab = self.cfg.ablation.clone();
        let cfg = self.cfg.clone();
        self.opt.lr = cfg.lr * if step >= cfg.decay_at { 0.1 } else { 1.0 };

        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let v2l = V2l::from_store(&self.store, cfg.num_words)?;
        let nra_cfg = cfg.nra_config();
        let image_size = ImageSize::new(cfg.image_size, cfg.image_size)?;
        let propose_cfg = cfg.propose_config();

        let mut nbr_align_rng = stream_rng(cfg.seed, Stream::NeighborsAlign, step as u64);
        let mut nbr_cls_rng = stream_rng(cfg.seed, Stream::NeighborsCls, step as u64);
        let mut drop_rng = stream_rng(cfg.seed, Stream::Dropout, step as u64);

        let mut logit_rows: Vec<NodeId> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        let mut text_rows: Vec<NodeId> = Vec::new();
        let mut image_rows: Vec<Array2<f64>> = Vec::new();

        for j in 0..cfg.batch_scenes {
            let scene = &self.scenes[(step * cfg.batch_scenes + j) % self.scenes.len()];
            let mut prng = stream_rng(
                cfg.seed,
                Stream::Proposals,
                scene_stream_key(false, scene.id),
            );
            let proposals = propose(scene, cfg.image_size, &propose_cfg, &mut prng);
            let kept = select_topk(&proposals, ab.topk);

            for (pi, (bbox, _score)) in kept.iter().enumerate() {
                let feature = roi_features(&scene.image, bbox)?;
                let tokens = v2l.v2l_map(&mut tape, &bound, &feature)?;

                // Classification branch: the bare marker sequence unless the
                // grid routes refinement into this loss.
                let cls_seq = if ab.nra_in_train_cls {
                    let sample = self.draw_neighbors(bbox, image_size, pi, &mut nbr_cls_rng)?;
                    let neighbor_nodes = self.neighbor_tokens(
                        &mut tape, &bound, &v2l, scene, &sample, None, &mut drop_rng,
                    )?;
                    let seq = build_region_sequence(
                        &mut tape,
                        bound.id(START_TOKEN),
                        bound.id(END_TOKEN),
                        tokens,
                        &neighbor_nodes,
                    )?;
                    let (mut refined, _) =
                        nra_forward(&mut tape, &bound, &nra_cfg, std::slice::from_ref(&seq))?;
                    refined.remove(0)
                } else {
                    build_region_sequence(
                        &mut tape,
                        bound.id(START_TOKEN),
                        bound.id(END_TOKEN),
                        tokens,
                        &[],
                    )?
                };
                let cls_emb = self.oracle.encode_region_tokens(&mut tape, &cls_seq)?;
                let logits = cls_logits_graph(
                    &mut tape,
                    cls_emb,
                    &self.base_embs,
                    Some(bound.id(BACKGROUND)),
                    cfg.tau_train,
                )?;
                logit_rows.push(logits);
                labels.push(proposal_label(scene, bbox, self.vocab));

                // Distillation branch: dropped-out neighbor sequence against
                // the frozen embedding of the union crop.
                if ab.distill {
                    for _ in 0..cfg.num_draws {
                        let sample =
                            self.draw_neighbors(bbox, image_size, pi, &mut nbr_align_rng)?;
                        let dropped = token_dropout(
                            &mut tape,
                            tokens,
                            cfg.token_dropout,
                            true,
                            &mut drop_rng,
                        )?;
                        let neighbor_nodes = self.neighbor_tokens(
                            &mut tape,
                            &bound,
                            &v2l,
                            scene,
                            &sample,
                            Some(cfg.token_dropout),
                            &mut drop_rng,
                        )?;
                        let seq = build_region_sequence(
                            &mut tape,
                            bound.id(START_TOKEN),
                            bound.id(END_TOKEN),
                            dropped,
                            &neighbor_nodes,
                        )?;
                        let seq = if ab.nra_in_train_align {
                            let (mut refined, _) = nra_forward(
                                &mut tape,
                                &bound,
                                &nra_cfg,
                                std::slice::from_ref(&seq),
                            )?;
                            refined.remove(0)
                        } else {
                            seq
                        };
                        text_rows.push(self.oracle.encode_region_tokens(&mut tape, &seq)?);

                        let union = union_box(&sample.all_boxes())?;
                        let patch = scene.image.crop_resize(&union, TEACHER_PATCH_SIDE)?;
                        image_rows.push(self.oracle.encode_image_patch(&patch)?);
                    }
                }
            }
        }

        let cls_loss = cls_loss_graph(&mut tape, &logit_rows, &labels)?;
        let mut images = Array2::zeros((image_rows.len(), cfg.d_embed));
        for (r, row) in image_rows.iter().enumerate() {
            images.row_mut(r).assign(&row.row(0));
        }
        let (total, align_value) = if ab.distill {
            let align = info_nce_from_rows(
                &mut tape,
                &text_rows,
                &images,
                &self.q_img,
                &self.q_txt,
                cfg.tau_align,
                cfg.normalize_by_k,
            )?;
            let scaled = tape.scale(align, cfg.lambda);
            let total = tape.add(cls_loss, scaled);
            (total, Some(tape.value(align)[[0, 0]]))
        } else {
            (cls_loss, None)
        };

        let grads = tape.backward(total);
        self.opt.step(&mut self.store, &bound, &grads);

        // Queues grow only after the loss that used them.
        if ab.distill {
            self.q_img.push(&images)?;
            let mut texts = Array2::zeros((text_rows.len(), cfg.d_embed));
            for (r, &id) in text_rows.iter().enumerate() {
                texts.row_mut(r).assign(&tape.value(id).row(0));
            }
            self.q_txt.push(&texts)?;
        }

        self.step += 1;
        Ok(LossRecord {
            step,
            cls: tape.value(cls_loss)[[0, 0]],
            align: align_value,
            total: tape.value(total)[[0, 0]],
        })
    }

    /// Run `steps` further optimization steps.
    pub fn run(&mut self, steps: usize) -> Result<Vec<LossRecord>> {
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            records.push(self.step_once()?);
        }
        Ok(records)
    }

    fn draw_neighbors(
        &self,
        bbox: &BBox,
        image_size: ImageSize,
        sample_id: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<RegionSample> {
        if self.cfg.ablation.use_neighbors {
            sample_neighbors(
                bbox,
                image_size,
                self.cfg.ablation.max_neighbors,
                sample_id as u64,
                rng,
            )
        } else {
            Ok(RegionSample {
                proposal: *bbox,
                neighbors: Vec::new(),
                sample_id: sample_id as u64,
            })
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn neighbor_tokens(
        &self,
        tape: &mut Tape,
        bound: &crate::params::BoundParams,
        v2l: &V2l,
        scene: &ToyScene,
        sample: &RegionSample,
        dropout: Option<f64>,
        drop_rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Vec<NodeId>> {
        let mut nodes = Vec::with_capacity(sample.neighbors.len());
        for (_, nb) in &sample.neighbors {
            let nf = roi_features(&scene.image, nb)?;
            let mut node = v2l.v2l_map(tape, bound, &nf)?;
            if let Some(p) = dropout {
                node = token_dropout(tape, node, p, true, drop_rng)?;
            }
            nodes.push(node);
        }
        Ok(nodes)
    }
}

/// Train a model from scratch under `cfg` and score it on the test split.
pub struct TrainedRun {
    pub store: ParamStore,
    pub losses: Vec<LossRecord>,
    pub metrics: Metrics,
}

pub fn train_and_evaluate(cfg: &TrainConfig, vocab: &ClassVocabulary) -> Result<TrainedRun> {
    cfg.validate()?;
    let colors = canonical_prompt_colors(vocab.num_all());
    let oracle = OracleVlm::paired(
        vocab,
        &colors,
        cfg.d_word,
        cfg.d_embed,
        cfg.context_len,
        cfg.seed,
    )?;
    let data = generate_toy_benchmark(
        cfg.seed,
        cfg.num_train_images,
        cfg.num_test_images,
        vocab,
        &cfg.gen_config(),
    )?;
    let mut trainer = Trainer::new(cfg.clone(), vocab, &oracle, &data.train)?;
    let losses = trainer.run(cfg.steps)?;
    let store = trainer.into_store();
    let metrics = evaluate(cfg, &store, &oracle, vocab, &data.test, true)?;
    Ok(TrainedRun {
        store,
        losses,
        metrics,
    })
}

/// One named row of an ablation grid: config overrides applied on top of
/// the base run config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridEntry {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

/// Parse a grid file. Each non-comment line is
/// `name: key=value key=value ...` (overrides may be empty). Names must be
/// unique.
pub fn parse_grid(text: &str) -> Result<Vec<GridEntry>> {
    let mut entries: Vec<GridEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((name, rest)) = line.split_once(':') else {
            return Err(Error::field(
                "grid",
                format!("line {}: expected `name: overrides`, got `{line}`", i + 1),
            ));
        };
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::field("grid", format!("line {}: empty entry name", i + 1)));
        }
        if entries.iter().any(|e| e.name == name) {
            return Err(Error::field(
                "grid",
                format!("line {}: duplicate entry `{name}`", i + 1),
            ));
        }
        let mut overrides = Vec::new();
        for part in rest.split_whitespace() {
            let Some((k, v)) = part.split_once('=') else {
                return Err(Error::field(
                    "grid",
                    format!("line {}: expected key=value, got `{part}`", i + 1),
                ));
            };
            overrides.push((k.to_string(), v.to_string()));
        }
        entries.push(GridEntry {
            name: name.to_string(),
            overrides,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput("ablation grid"));
    }
    Ok(entries)
}

/// Result of one grid row; failures are recorded, not fatal, so a broken
/// row cannot take down the rest of the sweep.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub name: String,
    pub result: std::result::Result<Metrics, String>,
}

pub fn run_ablation_grid(
    base: &TrainConfig,
    entries: &[GridEntry],
    vocab: &ClassVocabulary,
    mut progress: impl FnMut(&str, &std::result::Result<Metrics, String>),
) -> Vec<GridOutcome> {
    let mut outcomes = Vec::with_capacity(entries.len());
    for entry in entries {
        let result = (|| -> Result<Metrics> {
            let mut cfg = base.clone();
            for (k, v) in &entry.overrides {
                cfg.apply_kv(k, v)?;
            }
            cfg.validate()?;
            Ok(train_and_evaluate(&cfg, vocab)?.metrics)
        })()
        .map_err(|e| e.to_string());
        progress(&entry.name, &result);
        outcomes.push(GridOutcome {
            name: entry.name.clone(),
            result,
        });
    }
    outcomes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::default_vocabulary;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.steps = 12;
        cfg.d_word = 16;
        cfg.d_embed = 8;
        cfg.num_heads = 4;
        cfg.ffn_hidden = 24;
        cfg.num_words = 3;
        cfg.num_train_images = 4;
        cfg.num_test_images = 3;
        cfg.queue_capacity = 16;
        cfg.max_positions = 40;
        cfg
    }

    fn build_world(cfg: &TrainConfig) -> (ClassVocabulary, OracleVlm, crate::toy::ToyDataset) {
        let vocab = default_vocabulary();
        let colors = canonical_prompt_colors(vocab.num_all());
        let oracle = OracleVlm::paired(
            &vocab, &colors, cfg.d_word, cfg.d_embed, cfg.context_len, cfg.seed,
        )
        .unwrap();
        let data = generate_toy_benchmark(
            cfg.seed,
            cfg.num_train_images,
            cfg.num_test_images,
            &vocab,
            &cfg.gen_config(),
        )
        .unwrap();
        (vocab, oracle, data)
    }

    #[test]
    fn proposal_labels_match_overlap_rule() {
        let cfg = tiny_cfg();
        let (vocab, _oracle, data) = build_world(&cfg);
        let scene = &data.train[0];
        let (gbox, gname) = &scene.objects[0];
        assert_eq!(
            proposal_label(scene, gbox, &vocab),
            vocab.global_index(gname).unwrap()
        );
        // A sliver in the corner overlaps nothing: background label.
        let sliver = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(proposal_label(scene, &sliver, &vocab), vocab.num_base());
    }

    #[test]
    fn losses_are_finite_and_queues_fill() {
        let cfg = tiny_cfg();
        let (vocab, oracle, data) = build_world(&cfg);
        let mut trainer = Trainer::new(cfg.clone(), &vocab, &oracle, &data.train).unwrap();
        let records = trainer.run(4).unwrap();
        assert_eq!(records.len(), 4);
        for r in &records {
            assert!(r.cls.is_finite() && r.total.is_finite());
            let align = r.align.expect("distillation on");
            assert!(align.is_finite() && align >= 0.0);
            assert!((r.total - (r.cls + cfg.lambda * align)).abs() < 1e-9);
        }
        assert!(trainer.q_img.len() > 0 && trainer.q_img.len() == trainer.q_txt.len());
        assert_eq!(trainer.step_count(), 4);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = tiny_cfg();
        let (vocab, oracle, data) = build_world(&cfg);
        let run = |steps: usize| {
            let mut t = Trainer::new(cfg.clone(), &vocab, &oracle, &data.train).unwrap();
            let r = t.run(steps).unwrap();
            (r.last().unwrap().total, t.into_store())
        };
        let (la, sa) = run(3);
        let (lb, sb) = run(3);
        assert_eq!(la.to_bits(), lb.to_bits());
        for (name, value) in sa.iter() {
            assert_eq!(value, sb.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn no_distillation_never_touches_the_image_encoder() {
        let mut cfg = tiny_cfg();
        cfg.ablation.distill = false;
        cfg.ablation.nra_in_train_align = false;
        cfg.ablation.nra_in_train_cls = true;
        let (vocab, oracle, data) = build_world(&cfg);
        assert_eq!(oracle.image_call_count(), 0);
        let mut trainer = Trainer::new(cfg, &vocab, &oracle, &data.train).unwrap();
        let records = trainer.run(3).unwrap();
        assert_eq!(oracle.image_call_count(), 0, "teacher image encoder ran");
        for r in &records {
            assert!(r.align.is_none());
            assert_eq!(r.cls.to_bits(), r.total.to_bits());
        }
    }

    #[test]
    fn zero_lambda_reproduces_the_pure_classification_run() {
        // Same wiring twice: once with the alignment branch weighted to
        // zero, once with distillation removed entirely (and with it the
        // block, whose only placement was the alignment loss). The
        // classification losses and the shared parameters must agree to
        // the bit.
        let mut with = tiny_cfg();
        with.lambda = 0.0;
        let mut without = tiny_cfg();
        without.ablation.distill = false;
        without.ablation.nra_in_train_align = false;
        without.ablation.use_nra = false;
        without.ablation.use_nattn = false;
        without.ablation.use_ffn = false;
        without.ablation.use_pe = false;

        let (vocab, oracle_a, data) = build_world(&with);
        let (_, oracle_b, _) = build_world(&without);

        let mut ta = Trainer::new(with.clone(), &vocab, &oracle_a, &data.train).unwrap();
        let mut tb = Trainer::new(without.clone(), &vocab, &oracle_b, &data.train).unwrap();
        let ra = ta.run(3).unwrap();
        let rb = tb.run(3).unwrap();
        for (a, b) in ra.iter().zip(&rb) {
            assert_eq!(a.cls.to_bits(), b.cls.to_bits(), "step {}", a.step);
        }
        let sa = ta.into_store();
        let sb = tb.into_store();
        for name in ["v2l.weight", "v2l.bias", START_TOKEN, END_TOKEN, BACKGROUND] {
            assert_eq!(sa.get(name).unwrap(), sb.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn short_run_decreases_the_loss() {
        let mut cfg = tiny_cfg();
        cfg.steps = 40;
        cfg.num_train_images = 6;
        let (vocab, oracle, data) = build_world(&cfg);
        let mut trainer = Trainer::new(cfg, &vocab, &oracle, &data.train).unwrap();
        let records = trainer.run(40).unwrap();
        let head: f64 = records[..8].iter().map(|r| r.total).sum::<f64>() / 8.0;
        let tail: f64 = records[32..].iter().map(|r| r.total).sum::<f64>() / 8.0;
        assert!(
            tail < head,
            "loss failed to drop: first {head:.4} last {tail:.4}"
        );
    }

    #[test]
    fn learning_rate_decays_once() {
        let mut cfg = tiny_cfg();
        cfg.decay_at = 2;
        let (vocab, oracle, data) = build_world(&cfg);
        let mut trainer = Trainer::new(cfg.clone(), &vocab, &oracle, &data.train).unwrap();
        trainer.run(2).unwrap();
        assert!((trainer.optimizer().lr - cfg.lr).abs() < 1e-15);
        trainer.run(1).unwrap();
        assert!((trainer.optimizer().lr - cfg.lr * 0.1).abs() < 1e-15);
    }

    #[test]
    fn grid_parser_shapes_and_rejections() {
        let text = "\n# component sweep\nbaseline: use_nra=false use_nattn=false use_ffn=false use_pe=false nra_in_train_align=false use_neighbors=false\nfull:\n";
        let entries = parse_grid(text).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].name, "baseline");
        assert_eq!(entries[0].overrides.len(), 6);
        assert_eq!(entries[1], GridEntry { name: "full".into(), overrides: vec![] });

        assert!(parse_grid("").is_err());
        assert!(parse_grid("no separator line\n").is_err());
        assert!(parse_grid("a: x=1\na: x=2\n").is_err());
        assert!(parse_grid("a: notkv\n").is_err());
    }

    #[test]
    fn grid_runner_records_failures_and_continues() {
        let mut cfg = tiny_cfg();
        cfg.steps = 2;
        cfg.num_test_images = 2;
        let vocab = default_vocabulary();
        let entries = vec![
            GridEntry {
                name: "broken".into(),
                overrides: vec![("tau_align".into(), "-1".into())],
            },
            GridEntry {
                name: "tiny".into(),
                overrides: vec![("steps".into(), "1".into())],
            },
        ];
        let mut seen = Vec::new();
        let outcomes = run_ablation_grid(&cfg, &entries, &vocab, |name, _| {
            seen.push(name.to_string());
        });
        assert_eq!(seen, vec!["broken", "tiny"]);
        assert!(outcomes[0].result.is_err());
        let err = outcomes[0].result.as_ref().unwrap_err();
        assert!(err.contains("tau_align"), "{err}");
        assert!(outcomes[1].result.is_ok());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_cfg();
        let (vocab, oracle, data) = build_world(&cfg);

        let mut full = Trainer::new(cfg.clone(), &vocab, &oracle, &data.train).unwrap();
        full.run(4).unwrap();

        let mut head = Trainer::new(cfg.clone(), &vocab, &oracle, &data.train).unwrap();
        head.run(2).unwrap();
        let mid_store = head.store().clone();
        let mid_vel: Vec<(String, Array2<f64>)> = head
            .optimizer()
            .velocity()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        let mid_step = head.step_count();

        // Fresh trainer restored from the midpoint. Queues restart empty,
        // which only perturbs the alignment negatives, so compare the
        // classification path: it must be bit-identical.
        let mut tail = Trainer::new(cfg.clone(), &vocab, &oracle, &data.train).unwrap();
        tail.restore(mid_store, mid_vel, mid_step);
        let tail_records = tail.run(2).unwrap();

        let mut probe = Trainer::new(cfg, &vocab, &oracle, &data.train).unwrap();
        probe.run(2).unwrap();
        let probe_records = probe.run(2).unwrap();
        assert_eq!(
            tail_records[0].cls.to_bits(),
            probe_records[0].cls.to_bits()
        );
        assert_eq!(tail_records[0].step, probe_records[0].step);
    }
}
