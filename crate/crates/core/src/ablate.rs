//! Ablation grids: the fusion-strategy x neck grid and the neck-component
//! remove-one grid, trained cell by cell under shared seeds and reported as
//! a comparison table with a delta column against the reference row.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use crate::error::{FuseError, Result};
use crate::train::{train, Report, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    /// Fusion strategy x neck (Concat/Uni/Bi/DGC x FPN/HFAN).
    FusionNeck,
    /// Neck component remove-one (full, w/o HS, w/o CRU, w/o GAD, w/o AWF,
    /// FPN baseline), run single-stream.
    HfanComponents,
}

impl GridKind {
    pub fn parse(s: &str) -> Result<GridKind> {
        match s {
            "fusion-neck" => Ok(GridKind::FusionNeck),
            "hfan-components" => Ok(GridKind::HfanComponents),
            other => Err(FuseError::InvalidConfig(format!("unknown ablation grid '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GridKind::FusionNeck => "fusion-neck",
            GridKind::HfanComponents => "hfan-components",
        }
    }

    /// Name of the row the delta column is measured against.
    pub fn reference_row(&self) -> &'static str {
        match self {
            GridKind::FusionNeck => "fpn+concat",
            GridKind::HfanComponents => "hfan-full",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellSpec {
    pub name: String,
    pub config: RunConfig,
}

/// Expands a grid into its cells, derived from a base config.
pub fn grid_cells(grid: GridKind, base: &RunConfig) -> Vec<CellSpec> {
    let cell = |name: &str, f: &dyn Fn(&mut RunConfig)| -> CellSpec {
        let mut cfg = base.clone();
        f(&mut cfg);
        CellSpec { name: name.to_string(), config: cfg }
    };
    match grid {
        GridKind::FusionNeck => vec![
            cell("fpn+concat", &|c| {
                c.variant = "concat-fusion".into();
                c.neck = "fpn".into();
            }),
            cell("hfan+concat", &|c| {
                c.variant = "concat-fusion".into();
                c.neck = "hfan".into();
            }),
            cell("fpn+uni-mamba", &|c| {
                c.variant = "uni-mamba".into();
                c.neck = "fpn".into();
            }),
            cell("fpn+bi-mamba", &|c| {
                c.variant = "bi-mamba".into();
                c.neck = "fpn".into();
            }),
            cell("fpn+dgc", &|c| {
                c.variant = "full".into();
                c.neck = "fpn".into();
            }),
            cell("hfan+dgc", &|c| {
                c.variant = "full".into();
                c.neck = "hfan".into();
            }),
        ],
        GridKind::HfanComponents => {
            // Single-stream RGB with every target visible in RGB, so the
            // comparison isolates the neck.
            let single = |name: &str, f: &dyn Fn(&mut RunConfig)| -> CellSpec {
                let mut cfg = base.clone();
                cfg.variant = "single-stream".into();
                cfg.neck = "hfan".into();
                cfg.mode_weights = [1.0, 0.0, 0.0];
                f(&mut cfg);
                CellSpec { name: name.to_string(), config: cfg }
            };
            vec![
                single("hfan-full", &|_| {}),
                single("wo-hs", &|c| c.neck_bidirectional = false),
                single("wo-cru", &|c| c.neck_use_cru = false),
                single("wo-gad", &|c| c.neck_use_gad = false),
                single("wo-awf", &|c| c.neck_use_awf = false),
                single("fpn-baseline", &|c| c.neck = "fpn".into()),
            ]
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub map_per_seed: Vec<f64>,
    pub mean: f64,
    /// Half the spread (max - min) / 2 across seeds.
    pub spread: f64,
    /// Mean minus the reference row's mean.
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub grid: String,
    pub reference: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Human-readable fixed-width rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "ablation grid: {} ({} seeds, reference: {})\n",
            self.grid,
            self.seeds.len(),
            self.reference
        ));
        out.push_str(&format!("{:<16} {:>8} {:>8} {:>8}  per-seed\n", "row", "mAP@.5", "spread", "delta"));
        for r in &self.rows {
            let per_seed = r
                .map_per_seed
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>8.4} {:>+8.4}  [{per_seed}]\n",
                r.name, r.mean, r.spread, r.delta
            ));
        }
        out
    }

    pub fn to_report(&self, config_hash: &str) -> Report {
        let mut report = Report::new(config_hash, 0);
        report.insert("grid", &self.grid);
        report.insert("reference", &self.reference);
        for r in &self.rows {
            report.insert_f64(&format!("map50.{}.mean", r.name), r.mean);
            report.insert_f64(&format!("map50.{}.spread", r.name), r.spread);
            report.insert_f64(&format!("delta.{}", r.name), r.delta);
            for (i, m) in r.map_per_seed.iter().enumerate() {
                report.insert_f64(&format!("map50.{}.seed{}", r.name, self.seeds[i]), *m);
            }
        }
        report
    }
}

/// Trains every cell for every seed and assembles the table. `jobs` worker
/// threads pull (cell, seed) tasks from a queue; each task is fully
/// deterministic, so the table does not depend on scheduling.
pub fn run_ablation(
    grid: GridKind,
    base: &RunConfig,
    seeds: &[u64],
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(FuseError::InvalidConfig("need at least one seed".into()));
    }
    let cells = grid_cells(grid, base);
    let mut tasks: VecDeque<(usize, usize)> = VecDeque::new();
    for ci in 0..cells.len() {
        for si in 0..seeds.len() {
            tasks.push_back((ci, si));
        }
    }
    let task_queue = Mutex::new(tasks);
    let results: Vec<Mutex<Vec<Option<f64>>>> = (0..cells.len())
        .map(|_| Mutex::new(vec![None; seeds.len()]))
        .collect();
    let errors: Mutex<Vec<String>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let task = task_queue.lock().expect("queue lock").pop_front();
                let Some((ci, si)) = task else { break };
                let mut cfg = cells[ci].config.clone();
                cfg.seed = seeds[si];
                match train(&cfg, None, false) {
                    Ok(outcome) => {
                        results[ci].lock().expect("result lock")[si] = Some(outcome.best_map);
                    }
                    Err(e) => {
                        errors
                            .lock()
                            .expect("error lock")
                            .push(format!("{} seed {}: {e}", cells[ci].name, seeds[si]));
                    }
                }
            });
        }
    });

    let errors = errors.into_inner().expect("error lock");
    if !errors.is_empty() {
        return Err(FuseError::InvalidConfig(format!(
            "ablation cells failed: {}",
            errors.join("; ")
        )));
    }

    let mut rows: Vec<AblationRow> = Vec::with_capacity(cells.len());
    for (ci, cell) in cells.iter().enumerate() {
        let maps: Vec<f64> = results[ci]
            .lock()
            .expect("result lock")
            .iter()
            .map(|m| m.expect("all cells trained"))
            .collect();
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        let spread = if maps.len() > 1 {
            let max = maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = maps.iter().cloned().fold(f64::INFINITY, f64::min);
            (max - min) / 2.0
        } else {
            0.0
        };
        rows.push(AblationRow {
            name: cell.name.clone(),
            map_per_seed: maps,
            mean,
            spread,
            delta: 0.0,
        });
    }
    let reference_mean = rows
        .iter()
        .find(|r| r.name == grid.reference_row())
        .map(|r| r.mean)
        .expect("reference row present");
    for r in &mut rows {
        r.delta = r.mean - reference_mean;
    }

    let table = AblationTable {
        grid: grid.name().to_string(),
        reference: grid.reference_row().to_string(),
        seeds: seeds.to_vec(),
        rows,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("ablation_{}.txt", grid.name())), table.render())?;
        table
            .to_report(&base.hash())
            .write(&dir.join(format!("ablation_{}.json", grid.name())))?;
    }
    Ok(table)
}
