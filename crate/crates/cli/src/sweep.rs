//! The sweep command: every (seed, n) cell of the grid in one run, with an
//! optional worker pool.
//!
//! Each cell trains a probe network at the configured evaluation time and
//! scores it against the exact oracle; that probe row is what the report
//! later fits against n. Cells whose n is listed in `sample_at` (by default
//! the largest n) additionally train the full time grid, run the reverse
//! sampler, and judge the samples. Cells are independent, so workers only
//! split the cell list; the records file is written by the calling thread
//! in cell order, which keeps reruns byte-identical apart from wall times.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::record::{append_records, write_metrics_csv, ExperimentRecord, MetricRow};
use crate::runs::{
    cell_x0, cells, evaluate_models, probe_cell, sample_cell, train_cell, RunContext,
};
use crate::Failure;

/// Runs `count` independent jobs on up to `workers` threads and returns
/// their results in job order. A panicking job becomes a runtime failure
/// instead of tearing the process down.
pub fn run_jobs<T, F>(count: usize, workers: usize, job: F) -> Vec<Result<T, Failure>>
where
    T: Send,
    F: Fn(usize) -> Result<T, Failure> + Sync,
{
    let guarded = |i: usize| {
        catch_unwind(AssertUnwindSafe(|| job(i))).unwrap_or_else(|payload| {
            let text = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "worker panicked".to_string());
            Err(Failure::runtime(format!("job {i} panicked: {text}")))
        })
    };
    if workers <= 1 || count <= 1 {
        return (0..count).map(guarded).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut slots: Vec<Option<Result<T, Failure>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(count) {
            let tx = tx.clone();
            let next = &next;
            let guarded = &guarded;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                if tx.send((i, guarded(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            slots[i] = Some(result);
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every job reports once"))
        .collect()
}

pub fn sweep(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<ExperimentRecord>, Failure> {
    ctx.ensure_layout()?;
    let target = cfg.build_target()?;
    let grid = cfg.build_grid(&target)?;
    let cell_list = cells(cfg);

    let results = run_jobs(cell_list.len(), ctx.workers, |i| {
        let cell = cell_list[i];
        let started = Instant::now();
        let x0 = cell_x0(&target, &cell);
        let probe = probe_cell(cfg, &target, &cell, &x0.view())?;
        let mut rows = vec![probe];
        let mut metric_rows = vec![MetricRow {
            metric: "probe_risk".to_string(),
            t: Some(probe.t),
            estimate: probe.risk,
            se: probe.se,
            n_mc: cfg.experiment.n_mc,
        }];

        let sampler = if cfg.samples_cell(cell.seed, cell.n) {
            let models = train_cell(cfg, ctx, &target, &grid, &cell)?;
            let samples = sample_cell(cfg, ctx, &grid, &models, &cell)?;
            let eval =
                evaluate_models(cfg, &target, &grid, &models, &cell, Some(&samples.view()))?;
            rows.extend(eval.rows);
            metric_rows.extend(eval.metric_rows);
            eval.sampler
        } else {
            None
        };

        write_metrics_csv(&ctx.metrics_file(&cell), &ctx.fingerprint, &metric_rows)?;
        Ok(ExperimentRecord {
            fingerprint: ctx.fingerprint.clone(),
            seed: cell.seed,
            n: cell.n,
            ambient_dim: target.ambient_dim(),
            latent_dim: target.rate_dimension(),
            probe_t: cfg.experiment.eval_time,
            rows,
            sampler,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    });

    let mut records = Vec::with_capacity(cell_list.len());
    for (cell, result) in cell_list.iter().zip(results) {
        let record = result?;
        println!(
            "cell {}: probe risk {:.4} ± {:.4}{}",
            cell.tag(),
            record.rows[0].risk,
            record.rows[0].se,
            if record.sampler.is_some() {
                " (sampled)"
            } else {
                ""
            }
        );
        records.push(record);
    }
    append_records(&ctx.records_file(), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jobs_come_back_in_order_on_any_worker_count() {
        for workers in [1, 3, 8] {
            let results = run_jobs(17, workers, |i| Ok(i * i));
            let values: Vec<usize> = results.into_iter().map(|r| r.unwrap()).collect();
            assert_eq!(values, (0..17).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn panicking_jobs_become_runtime_failures() {
        let results = run_jobs(3, 2, |i| {
            if i == 1 {
                panic!("boom");
            }
            Ok(i)
        });
        assert!(results[0].is_ok());
        assert!(results[2].is_ok());
        match &results[1] {
            Err(Failure::Runtime(msg)) => assert!(msg.contains("boom")),
            other => panic!("expected a runtime failure, got {other:?}"),
        }
    }
}
