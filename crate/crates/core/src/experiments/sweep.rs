use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::run_pipeline;
use super::report::{emit_report, ResultTable};
use crate::error::{Error, IoContext, Result};
use crate::io::write_json;

/// One (k, seed) cell of a limited-data sweep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: SweepCell,
    pub error: String,
}

/// Rows of every successful cell plus the cells that failed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub table: ResultTable,
    pub failures: Vec<CellFailure>,
}

/// The config of one cell: the real training set cut to `k` per class, its
/// own output directory and master seed. Val and test splits are unchanged.
pub fn cell_config(base: &ExperimentConfig, cell: &SweepCell) -> ExperimentConfig {
    let mut c = base.clone();
    c.seed = cell.seed;
    c.dataset.subsample_k = Some(cell.k);
    c.out_dir = base
        .out_dir
        .join("sweep")
        .join(format!("k{:03}", cell.k))
        .join(format!("seed{}", cell.seed));
    if let Some(steps) = base.sweep.gan_steps {
        c.gan.train.steps = steps;
        c.gan.train.checkpoint_every = c.gan.train.checkpoint_every.min(steps.max(1));
    }
    c
}

/// Runs `cell_fn` over every (k, seed) pair and collects the rows it returns.
/// A failing cell is recorded and the sweep moves on.
pub fn sweep_with(
    k_values: &[usize],
    seeds: &[u64],
    mut cell_fn: impl FnMut(&SweepCell) -> Result<ResultTable>,
) -> Result<SweepOutcome> {
    if k_values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one k and one seed"));
    }
    let mut outcome = SweepOutcome::default();
    for &seed in seeds {
        for &k in k_values {
            let cell = SweepCell { k, seed };
            match cell_fn(&cell) {
                Ok(table) => outcome.table.extend(table),
                Err(e) => {
                    warn!("sweep cell k={k} seed={seed} failed: {e}");
                    outcome.failures.push(CellFailure {
                        cell,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(outcome)
}

/// Reruns the pipeline per (k, seed), retraining the GAN on each reduced
/// training set, and writes the combined tables under `out_dir/sweep`.
pub fn run_limited_data_sweep(
    config: &ExperimentConfig,
    k_values: &[usize],
    force: bool,
) -> Result<SweepOutcome> {
    config.validate()?;
    let seeds = if config.sweep.seeds.is_empty() {
        vec![config.seed]
    } else {
        config.sweep.seeds.clone()
    };
    let outcome = sweep_with(k_values, &seeds, |cell| {
        info!("sweep cell k={} seed={}", cell.k, cell.seed);
        let summary = run_pipeline(&cell_config(config, cell), force)?;
        ResultTable::from_dir(&summary.out_dir.join("eval"))
    })?;
    let dir = config.out_dir.join("sweep");
    std::fs::create_dir_all(&dir).at(&dir)?;
    if !outcome.table.rows.is_empty() {
        emit_report(&dir, &dir.join("report"))?;
    }
    write_json(&dir.join("failures.json"), &outcome.failures)?;
    Ok(outcome)
}

/// Accuracy of `treated` minus `baseline` per k for one seed, from a sweep
/// table; `None` where either row is missing.
pub fn gap_by_k(
    table: &ResultTable,
    seed: u64,
    k_values: &[usize],
    treated: crate::classifier::Strategy,
    baseline: crate::classifier::Strategy,
) -> Vec<Option<f64>> {
    let find = |k: usize, m| {
        table
            .rows
            .iter()
            .find(|r| r.seed == seed && r.samples_per_class == Some(k) && r.method == m)
            .map(|r| r.accuracy)
    };
    k_values
        .iter()
        .map(|&k| Some(find(k, treated)? - find(k, baseline)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Strategy;
    use crate::experiments::report::ResultRow;

    fn fake_rows(cell: &SweepCell) -> ResultTable {
        ResultTable {
            rows: Strategy::ALL
                .iter()
                .map(|&method| ResultRow {
                    source: "toy".into(),
                    method,
                    samples_per_class: Some(cell.k),
                    accuracy: 0.5,
                    macro_accuracy: 0.5,
                    seed: cell.seed,
                    runtime_seconds: 0.0,
                    eval_path: format!("k{}/{method}", cell.k).into(),
                })
                .collect(),
        }
    }

    #[test]
    fn grid_yields_one_row_per_method_and_k() {
        let out = sweep_with(&[5, 10, 20], &[0], |c| Ok(fake_rows(c))).unwrap();
        assert_eq!(out.table.rows.len(), 12);
        assert!(out.failures.is_empty());
    }

    #[test]
    fn failing_cells_are_recorded_and_skipped() {
        let out = sweep_with(&[5, 10], &[0, 1], |c| {
            if c.k == 5 && c.seed == 1 {
                Err(Error::invalid("boom"))
            } else {
                Ok(fake_rows(c))
            }
        })
        .unwrap();
        assert_eq!(out.table.rows.len(), 12);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].cell, SweepCell { k: 5, seed: 1 });
        assert!(sweep_with(&[], &[0], |c| Ok(fake_rows(c))).is_err());
    }

    #[test]
    fn cell_configs_are_isolated() {
        let base = ExperimentConfig::default();
        let a = cell_config(&base, &SweepCell { k: 5, seed: 1 });
        let b = cell_config(&base, &SweepCell { k: 10, seed: 1 });
        assert_ne!(a.out_dir, b.out_dir);
        assert_eq!(a.dataset.subsample_k, Some(5));
        assert_eq!(a.seed, 1);
    }

    #[test]
    fn gap_lookup() {
        let mut table = fake_rows(&SweepCell { k: 5, seed: 0 });
        table.rows[1].accuracy = 0.8;
        let gaps = gap_by_k(&table, 0, &[5, 10], Strategy::Pretrain, Strategy::Real);
        assert!((gaps[0].unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(gaps[1], None);
    }
}
