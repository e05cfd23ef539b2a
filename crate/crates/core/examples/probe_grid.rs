use mambafuse::ablate::{run_ablation, GridKind};
use mambafuse::train::RunConfig;

fn main() {
    let base = RunConfig::default();
    let t0 = std::time::Instant::now();
    let table = run_ablation(GridKind::FusionNeck, &base, &[0], 2, None).unwrap();
    println!("{}", table.render());
    println!("probe took {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    let t1 = std::time::Instant::now();
    let table2 = run_ablation(GridKind::HfanComponents, &base, &[0], 2, None).unwrap();
    println!("{}", table2.render());
    println!("probe2 took {:.1} min", t1.elapsed().as_secs_f64() / 60.0);
}
