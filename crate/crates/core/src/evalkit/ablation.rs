use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::losses::RampSchedule;
use crate::mixing::LambdaPolicy;
use crate::pairing::PairingStrategy;
use crate::pmg::DecoupleMode;
use crate::training::{train, TrainConfig, TrainData};

pub const ABLATION_HEADER: &str = "pairing,mitrans,decouple,lambda_clamp,seed,miou";

/// Cartesian grid of training variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub pairing: Vec<PairingStrategy>,
    pub mitrans: Vec<bool>,
    pub decouple: Vec<DecoupleMode>,
    pub lambda_clamp: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Add supervised-only rows (ω = 0) for every `mitrans` value.
    pub suponly: bool,
    /// Cells trained concurrently.
    pub threads: usize,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            pairing: vec![PairingStrategy::Random, PairingStrategy::Similar],
            mitrans: vec![false, true],
            decouple: vec![DecoupleMode::Hard, DecoupleMode::Soft],
            lambda_clamp: vec![0.5],
            seeds: vec![0, 1, 2],
            suponly: true,
            threads: 1,
        }
    }
}

/// One trained cell. Supervised-only rows have no pairing, decoupling or
/// clamp.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub pairing: Option<PairingStrategy>,
    pub mitrans: bool,
    pub decouple: Option<DecoupleMode>,
    pub lambda_clamp: Option<f64>,
    pub seed: u64,
    pub miou: std::result::Result<f64, String>,
}

impl AblationRow {
    fn label(&self) -> (String, bool, String, String) {
        (
            self.pairing.map_or("suponly".to_string(), |p| p.as_str().to_string()),
            self.mitrans,
            self.decouple.map_or("none".to_string(), |d| d.as_str().to_string()),
            self.lambda_clamp.map_or(String::new(), |c| c.to_string()),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for row in &self.rows {
            let (p, m, d, c) = row.label();
            let miou = match &row.miou {
                Ok(v) => v.to_string(),
                Err(_) => "error".to_string(),
            };
            writeln!(out, "{p},{m},{d},{c},{},{miou}", row.seed).expect("string write");
        }
        out
    }

    /// Mean and standard deviation over seeds for every variant, in
    /// first-appearance order, as `(pairing, mitrans, decouple, clamp, mean,
    /// std, n)`.
    pub fn aggregate(&self) -> Vec<(String, bool, String, String, f64, f64, usize)> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<(String, bool, String, String), Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            let key = row.label();
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            let entry = groups.entry(key).or_default();
            if let Ok(v) = row.miou {
                entry.push(v);
            }
        }
        order
            .into_iter()
            .map(|key| {
                let vals = &groups[&key];
                let n = vals.len();
                let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
                let std = if n < 2 {
                    0.0
                } else {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                };
                (key.0, key.1, key.2, key.3, mean, std, n)
            })
            .collect()
    }

    /// Mean mIoU over seeds of the variant matching the given labels.
    pub fn mean_of(&self, pairing: Option<PairingStrategy>, mitrans: bool, decouple: Option<DecoupleMode>) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.pairing == pairing && r.mitrans == mitrans && r.decouple == decouple)
            .filter_map(|r| r.miou.as_ref().ok().copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| pairing | MITrans | decoupling | λ clamp | mIoU (%) | runs |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for (p, m, d, c, mean, std, n) in self.aggregate() {
            let clamp = if c.is_empty() { "-".to_string() } else { format!("< {c}") };
            writeln!(
                out,
                "| {p} | {} | {d} | {clamp} | {:.2} ± {:.2} | {n} |",
                if m { "✓" } else { "✗" },
                100.0 * mean,
                100.0 * std
            )
            .expect("string write");
        }
        out
    }
}

struct Cell {
    row: AblationRow,
    config: TrainConfig,
}

fn cells(grid: &AblationGrid, base: &TrainConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    let row = |pairing, mitrans, decouple, lambda_clamp, seed| AblationRow {
        pairing,
        mitrans,
        decouple,
        lambda_clamp,
        seed,
        miou: Err(String::from("not run")),
    };
    if grid.suponly {
        for &mitrans in &grid.mitrans {
            for &seed in &grid.seeds {
                let config = TrainConfig {
                    seed,
                    use_mitrans: mitrans,
                    ramp: RampSchedule {
                        w_max: 0.0,
                        ..base.ramp
                    },
                    ..base.clone()
                };
                out.push(Cell {
                    row: row(None, mitrans, None, None, seed),
                    config,
                });
            }
        }
    }
    for &pairing in &grid.pairing {
        for &mitrans in &grid.mitrans {
            for &decouple in &grid.decouple {
                for &clamp in &grid.lambda_clamp {
                    for &seed in &grid.seeds {
                        let config = TrainConfig {
                            seed,
                            use_mitrans: mitrans,
                            pairing,
                            decouple,
                            lambda: LambdaPolicy {
                                clamp_max: clamp,
                                ..base.lambda
                            },
                            ..base.clone()
                        };
                        out.push(Cell {
                            row: row(Some(pairing), mitrans, Some(decouple), Some(clamp), seed),
                            config,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Train every cell of `grid` on top of `base` and collect the final
/// validation mIoU. A failing cell is recorded and the rest continue. With
/// `out_dir` each cell's run is written to its own subdirectory and the
/// tables to `ablation.csv` and `ablation.md`.
pub fn run_ablation(grid: &AblationGrid, base: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<AblationTable> {
    ensure!(
        !grid.pairing.is_empty() && !grid.mitrans.is_empty() && !grid.decouple.is_empty(),
        Config,
        "ablation axes must not be empty"
    );
    ensure!(
        !grid.lambda_clamp.is_empty() && !grid.seeds.is_empty(),
        Config,
        "ablation needs at least one λ clamp and one seed"
    );
    ensure!(grid.threads >= 1, Config, "ablation threads must be at least 1");
    let mut cells = cells(grid, base);
    let run = |i: usize, cell: &Cell| -> std::result::Result<f64, String> {
        let dir = out_dir.map(|d| d.join(format!("cell_{i:03}")));
        let outcome = train(&cell.config, data, dir.as_deref()).map_err(|e| e.to_string())?;
        outcome.final_miou.ok_or_else(|| "no evaluation ran".to_string())
    };
    let results: Vec<std::result::Result<f64, String>> = if grid.threads == 1 {
        cells.iter().enumerate().map(|(i, c)| run(i, c)).collect()
    } else {
        let mut results = vec![Err(String::new()); cells.len()];
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..grid.threads.min(cells.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let r = run(i, &cells[i]);
                    slots.lock().expect("result slots")[i] = r;
                });
            }
        });
        results
    };
    for (cell, result) in cells.iter_mut().zip(results) {
        if let Err(e) = &result {
            log::error!("ablation cell {:?} failed: {e}", cell.row.label());
        }
        cell.row.miou = result;
    }
    let table = AblationTable {
        rows: cells.into_iter().map(|c| c.row).collect(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        for (name, text) in [("ablation.csv", table.to_csv()), ("ablation.md", table.to_markdown())] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| crate::Error::io(&p, e))?;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pairing: Option<PairingStrategy>, decouple: Option<DecoupleMode>, seed: u64, miou: f64) -> AblationRow {
        AblationRow {
            pairing,
            mitrans: true,
            decouple,
            lambda_clamp: pairing.map(|_| 0.5),
            seed,
            miou: Ok(miou),
        }
    }

    #[test]
    fn tables_aggregate_over_seeds() {
        let s = Some(PairingStrategy::Similar);
        let table = AblationTable {
            rows: vec![
                row(None, None, 0, 0.5),
                row(s, Some(DecoupleMode::Soft), 0, 0.6),
                row(s, Some(DecoupleMode::Soft), 1, 0.8),
            ],
        };
        let csv = table.to_csv();
        assert!(csv.starts_with(ABLATION_HEADER));
        assert!(csv.contains("suponly,true,none,,0,0.5"));
        let agg = table.aggregate();
        assert_eq!(agg.len(), 2);
        assert!((agg[1].4 - 0.7).abs() < 1e-12);
        assert_eq!(agg[1].6, 2);
        assert_eq!(table.mean_of(s, true, Some(DecoupleMode::Soft)), Some(0.7));
        assert_eq!(table.to_markdown().lines().count(), 4);
    }

    #[test]
    fn grid_expands_to_cells() {
        let grid = AblationGrid {
            pairing: vec![PairingStrategy::Similar],
            mitrans: vec![true],
            decouple: vec![DecoupleMode::Soft],
            lambda_clamp: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: vec![0],
            suponly: false,
            threads: 1,
        };
        let c = cells(&grid, &TrainConfig::default());
        assert_eq!(c.len(), 5);
        assert_eq!(c[2].config.lambda.clamp_max, 0.3);
        let with_sup = cells(&AblationGrid { suponly: true, mitrans: vec![false, true], ..grid }, &TrainConfig::default());
        assert_eq!(with_sup.len(), 12);
        assert_eq!(with_sup[0].config.ramp.w_max, 0.0);
    }
}
