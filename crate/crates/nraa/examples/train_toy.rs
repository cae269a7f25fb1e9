//! Train the full pipeline on the bundled benchmark and report metrics.
//!
//!     cargo run --release --example train_toy [key=value ...]
//!
//! Arguments are config overrides, e.g. `steps=4000 lr=0.05`.

use nraa::toy::default_vocabulary;
use nraa::{train_and_evaluate, TrainConfig};

fn main() -> nraa::Result<()> {
    let mut cfg = TrainConfig::default();
    for arg in std::env::args().skip(1) {
        let (key, value) = arg
            .split_once('=')
            .expect("arguments look like key=value");
        cfg.apply_kv(key, value)?;
    }
    cfg.validate()?;
    let vocab = default_vocabulary();
    let started = std::time::Instant::now();
    let run = train_and_evaluate(&cfg, &vocab)?;
    for r in run.losses.iter().step_by(cfg.steps.div_ceil(20).max(1)) {
        match r.align {
            Some(a) => println!(
                "step {:4}  cls {:8.4}  align {:8.4}  total {:8.4}",
                r.step, r.cls, a, r.total
            ),
            None => println!("step {:4}  cls {:8.4}", r.step, r.cls),
        }
    }
    let m = run.metrics;
    println!(
        "\n{:.1?}  base acc {:.3} ({} boxes)  novel acc {:.3} ({} boxes)  AP50 base {:.3} novel {:.3}",
        started.elapsed(),
        m.base_acc,
        m.base_boxes,
        m.novel_acc,
        m.novel_boxes,
        m.ap50_base,
        m.ap50_novel
    );
    Ok(())
}
