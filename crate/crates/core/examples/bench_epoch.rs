use mambafuse::train::{train, RunConfig};
use std::time::Instant;

fn main() {
    // One desk-scale epoch of the most expensive cell (full + hfan).
    let mut cfg = RunConfig::default();
    cfg.epochs = 1;
    let t0 = Instant::now();
    let outcome = train(&cfg, None, false).unwrap();
    println!(
        "full+hfan 1 epoch (400 scenes, batch 16): {:.1}s, loss {:.4}, map {:.4}",
        t0.elapsed().as_secs_f64(),
        outcome.history[0].total_loss,
        outcome.history[0].map50
    );

    let mut cfg2 = RunConfig::default();
    cfg2.epochs = 1;
    cfg2.variant = "single-stream".into();
    let t1 = Instant::now();
    let o2 = train(&cfg2, None, false).unwrap();
    println!(
        "single+hfan 1 epoch: {:.1}s, loss {:.4}, map {:.4}",
        t1.elapsed().as_secs_f64(),
        o2.history[0].total_loss,
        o2.history[0].map50
    );

    let mut cfg3 = RunConfig::default();
    cfg3.epochs = 1;
    cfg3.variant = "concat-fusion".into();
    cfg3.neck = "fpn".into();
    let t2 = Instant::now();
    let o3 = train(&cfg3, None, false).unwrap();
    println!(
        "concat+fpn 1 epoch: {:.1}s, loss {:.4}, map {:.4}",
        t2.elapsed().as_secs_f64(),
        o3.history[0].total_loss,
        o3.history[0].map50
    );
}
