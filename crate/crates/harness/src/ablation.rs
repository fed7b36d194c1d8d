//! Component ablation on toy semseg: prompt, adapter, and the source of the
//! attention guidance, each row trained from the same pretrained weights.

use serde::{Deserialize, Serialize};

use diffperc_core::guidance::GuidanceConfig;

use crate::checkpoint::Checkpoint;
use crate::config::{PromptFlags, RunConfig};
use crate::io::MetricsLog;
use crate::train::train_perception;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub prompts: PromptFlags,
    pub guidance: GuidanceConfig,
}

fn row(name: &str, use_text_prompt: bool, use_adapter: bool, source: &str) -> AblationRow {
    AblationRow {
        name: name.into(),
        prompts: PromptFlags {
            use_text_prompt,
            use_adapter,
        },
        guidance: GuidanceConfig {
            source: source.into(),
            // the mid block sits at the coarsest level, so it must be kept
            exclude_lowest: source != "mid",
            enabled: source != "none",
        },
    }
}

/// The seven rows, in table order.
pub fn grid() -> Vec<AblationRow> {
    vec![
        row("baseline", false, false, "none"),
        row("+prompt", true, false, "none"),
        row("+adapter", true, true, "none"),
        row("mid", true, true, "mid"),
        row("down", true, true, "down"),
        row("up", true, true, "up"),
        row("up_down", true, true, "up_down"),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub seed: u64,
    pub early: f64,
    pub late: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub early_iters: usize,
    pub late_iters: usize,
    pub cells: Vec<Cell>,
}

impl AblationTable {
    /// Seed-averaged `(early, late)` mIoU of a row.
    pub fn mean(&self, row: &str) -> Option<(f64, f64)> {
        let cells: Vec<&Cell> = self.cells.iter().filter(|c| c.row == row).collect();
        if cells.is_empty() {
            return None;
        }
        let n = cells.len() as f64;
        Some((
            cells.iter().map(|c| c.early).sum::<f64>() / n,
            cells.iter().map(|c| c.late).sum::<f64>() / n,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("row,seed,miou_{},miou_{}\n", self.early_iters, self.late_iters);
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{}\n", c.row, c.seed, c.early, c.late));
        }
        for r in grid() {
            if let Some((e, l)) = self.mean(&r.name) {
                s.push_str(&format!("{},mean,{e},{l}\n", r.name));
            }
        }
        s
    }
}

/// Config for one cell of the grid.
pub fn cell_config(base: &RunConfig, row: &AblationRow, seed: u64) -> RunConfig {
    RunConfig {
        prompts: row.prompts.clone(),
        guidance: row.guidance.clone(),
        seed,
        total_iters: base.ablation.iters,
        eval_interval: base.ablation.early_iters,
        ..base.clone()
    }
}

/// Trains every `(row, seed)` pair from `init`; rows may be restricted by name.
pub fn run_ablation(
    base: &RunConfig,
    init: &Checkpoint,
    only: Option<&[&str]>,
) -> anyhow::Result<(AblationTable, MetricsLog)> {
    let (early, late) = (base.ablation.early_iters, base.ablation.iters);
    anyhow::ensure!(early > 0 && early <= late, "early checkpoint {early} outside 1..={late}");
    let mut cells = Vec::new();
    let mut log = MetricsLog::default();
    for r in grid() {
        if only.is_some_and(|o| !o.contains(&r.name.as_str())) {
            continue;
        }
        for &seed in &base.ablation.seeds {
            let cfg = cell_config(base, &r, seed);
            let run_id = format!("{}/seed{seed}", r.name);
            log::info!("ablation {run_id}");
            let out = train_perception(&cfg, init, &run_id)?;
            let at = |step: usize| {
                out.stage.summary.get(&format!("miou@{step}")).copied().unwrap_or(f64::NAN)
            };
            cells.push(Cell {
                row: r.name.clone(),
                seed,
                early: at(early),
                late: at(late),
            });
            log.extend(out.stage.log);
        }
    }
    Ok((
        AblationTable {
            early_iters: early,
            late_iters: late,
            cells,
        },
        log,
    ))
}
