use serde::{Deserialize, Serialize};

use super::{train_routers, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate_ppl;
use crate::model::ModelState;
use crate::router::Routing;

/// Allowed gap between validation capacity and the target.
pub const CAPACITY_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f32,
    pub lambda: f32,
    pub final_train_capacity: f64,
    pub val_task_loss: f64,
    pub val_capacity: f64,
    pub meets_target: bool,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    pub selected: usize,
    /// Set when no cell met the capacity tolerance and the closest one was taken.
    pub warning: bool,
    pub routing: Routing,
}

/// Picks the cell with the lowest validation loss among those within the
/// capacity tolerance, or the closest-capacity cell when none qualifies.
/// Ties go to the lower λ, then the lower learning rate.
pub fn select_cell(cells: &[GridCell], target: f64) -> Option<(usize, bool)> {
    let tie = |a: &GridCell, b: &GridCell| {
        a.lambda
            .total_cmp(&b.lambda)
            .then(a.learning_rate.total_cmp(&b.learning_rate))
    };
    let qualified = (0..cells.len())
        .filter(|&i| cells[i].meets_target)
        .min_by(|&a, &b| {
            cells[a]
                .val_task_loss
                .total_cmp(&cells[b].val_task_loss)
                .then(tie(&cells[a], &cells[b]))
        });
    if let Some(i) = qualified {
        return Some((i, false));
    }
    let gap = |c: &GridCell| (c.val_capacity - target).abs();
    (0..cells.len())
        .min_by(|&a, &b| {
            gap(&cells[a])
                .total_cmp(&gap(&cells[b]))
                .then(cells[a].val_task_loss.total_cmp(&cells[b].val_task_loss))
                .then(tie(&cells[a], &cells[b]))
        })
        .map(|i| (i, true))
}

/// Trains one router set per (learning rate, λ) cell from the same start and
/// seed, then validates each on the held-out windows.
pub fn grid_search(state: &ModelState, routing: &Routing, data: &Dataset, cfg: &TrainConfig) -> Result<GridOutcome> {
    if cfg.lr_grid.is_empty() || cfg.lambda_grid.is_empty() {
        return Err(Error::Config("grid search needs non-empty lr and λ grids".into()));
    }
    let mut cells = Vec::new();
    let mut trained = Vec::new();
    for &lr in &cfg.lr_grid {
        for &lambda in &cfg.lambda_grid {
            let cell_cfg = TrainConfig {
                learning_rate: lr,
                lambda,
                ..cfg.clone()
            };
            let outcome = train_routers(state, routing, &data.train, &cell_cfg, None)?;
            let val = evaluate_ppl(state, &outcome.routing, &data.eval, cfg.batch_size)?;
            let val_capacity = val.capacity.unwrap_or(1.0);
            log::info!("grid lr={lr} λ={lambda}: val loss {:.4}, capacity {val_capacity:.3}", val.mean_ce);
            cells.push(GridCell {
                learning_rate: lr,
                lambda,
                final_train_capacity: outcome.history.last().map_or(1.0, |h| h.capacity),
                val_task_loss: val.mean_ce,
                val_capacity,
                meets_target: (val_capacity - cfg.target_capacity as f64).abs() <= CAPACITY_TOLERANCE,
            });
            trained.push(outcome.routing);
        }
    }
    let (selected, warning) = select_cell(&cells, cfg.target_capacity as f64).expect("grid is non-empty");
    if warning {
        log::warn!("no grid cell reached capacity within ±{CAPACITY_TOLERANCE}; taking the closest");
    }
    Ok(GridOutcome {
        cells,
        selected,
        warning,
        routing: trained.swap_remove(selected),
    })
}
