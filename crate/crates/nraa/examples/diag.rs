//! Scratch diagnostics for training dynamics (not part of the tour).

use ndarray::Array2;
use nraa::graph::Tape;
use nraa::ovd::{class_probs, ClassifierState};
use nraa::toy::{default_vocabulary, generate_toy_benchmark, roi_features};
use nraa::{train_and_evaluate, OracleVlm, Split, TrainConfig};

fn main() -> nraa::Result<()> {
    let mut cfg = TrainConfig::default();
    for arg in std::env::args().skip(1) {
        let (key, value) = arg.split_once('=').expect("key=value");
        cfg.apply_kv(key, value)?;
    }
    let vocab = default_vocabulary();
    let colors = nraa::canonical_prompt_colors(vocab.num_all());
    let oracle = OracleVlm::paired(&vocab, &colors, cfg.d_word, cfg.d_embed, cfg.context_len, cfg.seed)?;
    let data = generate_toy_benchmark(cfg.seed, cfg.num_train_images, cfg.num_test_images, &vocab, &cfg.gen_config())?;
    let run = train_and_evaluate(&cfg, &vocab)?;
    let store = &run.store;

    let norm = |m: &Array2<f64>| (m.iter().map(|x| x * x).sum::<f64>()).sqrt();
    for name in ["v2l.weight", "v2l.bias", "seq.start", "seq.end", "cls.background"] {
        println!("{name}: frob {:.4}", norm(store.get(name)?));
    }

    // Class-embedding geometry of the frozen encoder.
    let class_embs = oracle.class_prompt_embeddings(&vocab, Split::All)?;
    let mut max_offdiag: f64 = -1.0;
    let mut mean_offdiag = 0.0;
    let n = class_embs.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let c = class_embs.row(i).dot(&class_embs.row(j));
                max_offdiag = max_offdiag.max(c);
                mean_offdiag += c / (n * n - n) as f64;
            }
        }
    }
    println!("class embedding cos: mean {mean_offdiag:.3} max {max_offdiag:.3}");

    // Student embeddings of test ground truth: collapse check + top classes.
    let state = ClassifierState::from_oracle(&oracle, &vocab, Split::All, cfg.tau_train, cfg.tau_test)?;
    let v2l = nraa::tokens::V2l::from_store(store, cfg.num_words)?;
    let mut embs: Vec<(String, Array2<f64>)> = Vec::new();
    for scene in data.test.iter().take(20) {
        for (bbox, name) in &scene.objects {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let feature = roi_features(&scene.image, bbox)?;
            let id = nraa::ovd::infer_region_embedding(&mut tape, &bound, &v2l, &oracle, &feature)?;
            embs.push((name.clone(), tape.value(id).clone()));
        }
    }
    let mut cross = 0.0;
    let mut count = 0;
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            if embs[i].0 != embs[j].0 {
                cross += embs[i].1.row(0).dot(&embs[j].1.row(0));
                count += 1;
            }
        }
    }
    println!("student cross-class cos mean {:.3} over {count} pairs", cross / count as f64);

    let all: Vec<&str> = vocab.all_classes().collect();
    for class in &all {
        let gi = vocab.global_index(class).unwrap();
        let mut cos_sum = 0.0;
        let mut hits = 0;
        let mut total = 0;
        for (name, e) in &embs {
            if name != class {
                continue;
            }
            cos_sum += class_embs.row(gi).dot(&e.row(0));
            let probs = class_probs(e, &state)?;
            let arg = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
            hits += (arg == gi) as usize;
            total += 1;
        }
        if total > 0 {
            println!(
                "class {class:<12} n {total:3}  mean truth cos {:+.3}  argmax acc {:.2}",
                cos_sum / total as f64,
                hits as f64 / total as f64
            );
        }
    }
    println!(
        "metrics: base {:.3} novel {:.3}",
        run.metrics.base_acc, run.metrics.novel_acc
    );
    Ok(())
}
