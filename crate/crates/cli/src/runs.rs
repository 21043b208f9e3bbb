//! Command bodies for the per-cell pipeline: generate, train, sample, and
//! evaluate.
//!
//! A cell is one (seed, n) pair of the experiment grid. Every command
//! derives the cell's data deterministically from the config and the seed,
//! so `generate` merely materializes what `train` would redraw bit for bit.
//! RNG lanes partition the work under one seed: data, probe training,
//! evaluation, sampling, and reference draws never share a stream, and all
//! CLI lanes stay clear of the lane blocks the library reserves for
//! per-timestep corruption and training.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use shallow_diffusion::metrics::{energy_distance_test, score_risk, subspace_residual};
use shallow_diffusion::net::dsm_loss;
use shallow_diffusion::rng::stream;
use shallow_diffusion::sampler::{
    run_reverse, write_samples_binary, write_samples_csv, read_samples_binary,
};
use shallow_diffusion::schedule::{ou_coefficients, TimeGrid};
use shallow_diffusion::targets::{forward_corrupt, Target};
use shallow_diffusion::train::{train_all_timesteps, train_one_timestep, ScoreModelSet, TrainTrace};

use crate::config::ExperimentConfig;
use crate::record::{
    append_records, write_metrics_csv, write_sidecar, BinarySidecar, ExperimentRecord, MetricRow,
    SamplerMetrics, TimestepRow,
};
use crate::Failure;

pub const DATA_LANE: u64 = 0;
pub const PROBE_CORRUPT_LANE: u64 = 5 << 32;
pub const PROBE_TRAIN_LANE: u64 = 6 << 32;
/// Base of one lane per timestep for risk evaluation.
pub const EVAL_LANE_BASE: u64 = 7 << 32;
pub const PROBE_EVAL_LANE: u64 = 8 << 32;
pub const SAMPLE_LANE: u64 = 9 << 32;
/// Fresh target draws that generated samples are compared against.
pub const REFERENCE_LANE: u64 = 10 << 32;

/// Subsample cap and permutation count of the two-sample energy test.
pub const ENERGY_CAP: usize = 400;
pub const ENERGY_PERMS: usize = 200;

/// One (seed, n) point of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub seed: u64,
    pub n: usize,
}

impl Cell {
    pub fn tag(&self) -> String {
        format!("s{}_n{}", self.seed, self.n)
    }
}

/// All cells of the config, n-major so reruns and sweeps agree on order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::with_capacity(cfg.experiment.n_grid.len() * cfg.experiment.seeds.len());
    for &n in &cfg.experiment.n_grid {
        for &seed in &cfg.experiment.seeds {
            out.push(Cell { seed, n });
        }
    }
    out
}

/// Where one run keeps its artifacts, plus the fingerprint they embed.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out: PathBuf,
    pub fingerprint: String,
    pub workers: usize,
}

impl RunContext {
    pub fn new(out: PathBuf, fingerprint: String, workers: usize) -> Self {
        RunContext {
            out,
            fingerprint,
            workers,
        }
    }

    pub fn data_file(&self, cell: &Cell) -> PathBuf {
        self.out.join("data").join(format!("{}.bin", cell.tag()))
    }

    pub fn models_dir(&self, cell: &Cell) -> PathBuf {
        self.out.join("models").join(cell.tag())
    }

    pub fn samples_file(&self, cell: &Cell) -> PathBuf {
        self.out.join("samples").join(format!("{}.bin", cell.tag()))
    }

    pub fn metrics_file(&self, cell: &Cell) -> PathBuf {
        self.out.join("metrics").join(format!("{}.csv", cell.tag()))
    }

    pub fn records_file(&self) -> PathBuf {
        self.out.join("records.jsonl")
    }

    pub fn ensure_layout(&self) -> Result<(), Failure> {
        for sub in ["data", "models", "samples", "metrics"] {
            std::fs::create_dir_all(self.out.join(sub)).map_err(|e| {
                Failure::runtime(format!("cannot create {}: {e}", self.out.display()))
            })?;
        }
        Ok(())
    }
}

/// The clean draw every command agrees on for this cell.
pub fn cell_x0(target: &Target, cell: &Cell) -> Array2<f64> {
    target.sample_x0(cell.n, &mut stream(cell.seed, DATA_LANE))
}

pub fn generate(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), Failure> {
    ctx.ensure_layout()?;
    let target = cfg.build_target()?;
    for cell in cells(cfg) {
        let x0 = cell_x0(&target, &cell);
        let bin = ctx.data_file(&cell);
        write_samples_binary(&bin, &x0.view(), 0.0).map_err(Failure::runtime)?;
        write_sidecar(
            &bin.with_extension("bin.json"),
            &BinarySidecar {
                fingerprint: ctx.fingerprint.clone(),
                rows: x0.nrows(),
                dim: x0.ncols(),
                t: 0.0,
            },
        )?;
        write_samples_csv(
            &bin.with_extension("csv"),
            &x0.view(),
            0.0,
            Some(&ctx.fingerprint),
        )
        .map_err(Failure::runtime)?;
        println!("generated {}: {} rows in dimension {}", cell.tag(), x0.nrows(), x0.ncols());
    }
    Ok(())
}

/// Trains the full grid for one cell and writes the model set with its
/// training traces.
pub fn train_cell(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    target: &Target,
    grid: &TimeGrid,
    cell: &Cell,
) -> Result<ScoreModelSet, Failure> {
    let x0 = cell_x0(target, cell);
    let train_cfg = cfg.train_config(cell.seed, target.rate_dimension());
    let (models, traces) =
        train_all_timesteps(grid, &x0.view(), &train_cfg).map_err(Failure::runtime)?;
    let dir = ctx.models_dir(cell);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
    models
        .save(&dir, &ctx.fingerprint)
        .map_err(Failure::runtime)?;
    write_traces(&dir.join("traces.jsonl"), &ctx.fingerprint, &traces)?;
    Ok(models)
}

pub fn train(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), Failure> {
    ctx.ensure_layout()?;
    let target = cfg.build_target()?;
    let grid = cfg.build_grid(&target)?;
    for cell in cells(cfg) {
        let started = Instant::now();
        let models = train_cell(cfg, ctx, &target, &grid, &cell)?;
        println!(
            "trained {}: {} timesteps in {:.1}s",
            cell.tag(),
            models.entries.len(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

/// Runs the reverse chain from one cell's trained models and writes the
/// samples in both layouts.
pub fn sample_cell(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    grid: &TimeGrid,
    models: &ScoreModelSet,
    cell: &Cell,
) -> Result<Array2<f64>, Failure> {
    let mut rng = stream(cell.seed, SAMPLE_LANE);
    let samples = run_reverse(models, grid, cfg.experiment.sample_count, &mut rng)
        .map_err(Failure::runtime)?;
    let zeta = grid.params.zeta;
    let bin = ctx.samples_file(cell);
    write_samples_binary(&bin, &samples.view(), zeta).map_err(Failure::runtime)?;
    write_sidecar(
        &bin.with_extension("bin.json"),
        &BinarySidecar {
            fingerprint: ctx.fingerprint.clone(),
            rows: samples.nrows(),
            dim: samples.ncols(),
            t: zeta,
        },
    )?;
    write_samples_csv(
        &bin.with_extension("csv"),
        &samples.view(),
        zeta,
        Some(&ctx.fingerprint),
    )
    .map_err(Failure::runtime)?;
    Ok(samples)
}

fn load_models(ctx: &RunContext, cell: &Cell) -> Result<ScoreModelSet, Failure> {
    let dir = ctx.models_dir(cell);
    if !dir.join("manifest.json").exists() {
        return Err(Failure::runtime(format!(
            "no trained models for cell {} under {}; run train first",
            cell.tag(),
            dir.display()
        )));
    }
    ScoreModelSet::load(&dir).map_err(Failure::runtime)
}

pub fn sample(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), Failure> {
    ctx.ensure_layout()?;
    let target = cfg.build_target()?;
    let grid = cfg.build_grid(&target)?;
    for cell in cells(cfg) {
        let models = load_models(ctx, &cell)?;
        let samples = sample_cell(cfg, ctx, &grid, &models, &cell)?;
        println!("sampled {}: {} rows", cell.tag(), samples.nrows());
    }
    Ok(())
}

/// Everything an evaluation of one cell's models yields.
pub struct CellEvaluation {
    /// One row per grid timestep, ascending in t.
    pub rows: Vec<TimestepRow>,
    /// Grid-weighted score error Σ_k γ_k · risk and its standard error.
    pub weighted: (f64, f64),
    pub sampler: Option<SamplerMetrics>,
    pub metric_rows: Vec<MetricRow>,
}

/// Scores a trained model set against the exact oracle, one Monte Carlo
/// risk per timestep, and judges generated samples when given.
pub fn evaluate_models(
    cfg: &ExperimentConfig,
    target: &Target,
    grid: &TimeGrid,
    models: &ScoreModelSet,
    cell: &Cell,
    samples: Option<&ArrayView2<f64>>,
) -> Result<CellEvaluation, Failure> {
    let n_mc = cfg.experiment.n_mc;
    let mut rows = Vec::with_capacity(models.entries.len());
    let mut metric_rows = Vec::new();
    for (i, entry) in models.entries.iter().enumerate() {
        let mut rng = stream(cell.seed, EVAL_LANE_BASE + i as u64);
        let est = score_risk(target, &entry.net, entry.t, n_mc, &mut rng)
            .map_err(Failure::runtime)?;
        rows.push(TimestepRow {
            t: entry.t,
            loss: entry.final_loss,
            risk: est.estimate,
            se: est.se,
            radius: entry.radius,
        });
        metric_rows.push(MetricRow {
            metric: "score_risk".to_string(),
            t: Some(entry.t),
            estimate: est.estimate,
            se: est.se,
            n_mc,
        });
    }

    // The reverse step k uses the model at forward time index N−1−k with
    // step size γ_k, so the weighted error reuses the rows just computed.
    let n_steps = grid.params.steps;
    let mut total = 0.0;
    let mut var = 0.0;
    for k in 0..n_steps {
        let row = &rows[n_steps - 1 - k];
        total += grid.gaps[k] * row.risk;
        var += (grid.gaps[k] * row.se) * (grid.gaps[k] * row.se);
    }
    let weighted = (total, var.sqrt());
    metric_rows.push(MetricRow {
        metric: "weighted_score_error".to_string(),
        t: None,
        estimate: total,
        se: weighted.1,
        n_mc,
    });

    let sampler = match samples {
        None => None,
        Some(gen) => Some(judge_samples(target, grid, cell, gen, &mut metric_rows)?),
    };

    Ok(CellEvaluation {
        rows,
        weighted,
        sampler,
        metric_rows,
    })
}

/// Compares generated samples against a fresh draw corrupted to the
/// stopping time: energy-distance permutation test always, subspace
/// residual when the target has a frame to project on.
pub fn judge_samples(
    target: &Target,
    grid: &TimeGrid,
    cell: &Cell,
    samples: &ArrayView2<f64>,
    metric_rows: &mut Vec<MetricRow>,
) -> Result<SamplerMetrics, Failure> {
    let zeta = grid.params.zeta;
    let fresh = target.sample_x0(samples.nrows(), &mut stream(cell.seed, REFERENCE_LANE));
    let reference = forward_corrupt(&fresh.view(), zeta, cell.seed, REFERENCE_LANE + 1)
        .map_err(Failure::runtime)?;
    let mut rng = stream(cell.seed, REFERENCE_LANE + 2);
    let test = energy_distance_test(
        samples,
        &reference.xt.view(),
        ENERGY_CAP,
        ENERGY_PERMS,
        &mut rng,
    )
    .map_err(Failure::runtime)?;
    let q95 = test.null_quantile(0.95);
    metric_rows.push(MetricRow {
        metric: "energy_distance".to_string(),
        t: Some(zeta),
        estimate: test.observed,
        se: 0.0,
        n_mc: ENERGY_CAP,
    });
    metric_rows.push(MetricRow {
        metric: "energy_null_q95".to_string(),
        t: Some(zeta),
        estimate: q95,
        se: 0.0,
        n_mc: ENERGY_PERMS,
    });

    let (residual, budget) = match target {
        Target::Subspace(m) => {
            let r = subspace_residual(samples, &m.u.view()).map_err(Failure::runtime)?;
            let sigma = ou_coefficients(zeta).map_err(Failure::runtime)?.sigma;
            let b = 3.0 * sigma * sigma * (m.ambient_dim() - m.latent_dim()) as f64;
            metric_rows.push(MetricRow {
                metric: "subspace_residual".to_string(),
                t: Some(zeta),
                estimate: r,
                se: 0.0,
                n_mc: samples.nrows(),
            });
            metric_rows.push(MetricRow {
                metric: "residual_budget".to_string(),
                t: Some(zeta),
                estimate: b,
                se: 0.0,
                n_mc: samples.nrows(),
            });
            (Some(r), Some(b))
        }
        _ => (None, None),
    };

    Ok(SamplerMetrics {
        subspace_residual: residual,
        residual_budget: budget,
        energy_distance: test.observed,
        energy_null_q95: q95,
    })
}

pub fn evaluate(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<ExperimentRecord>, Failure> {
    ctx.ensure_layout()?;
    let target = cfg.build_target()?;
    let grid = cfg.build_grid(&target)?;
    let mut records = Vec::new();
    for cell in cells(cfg) {
        let started = Instant::now();
        let models = load_models(ctx, &cell)?;
        let samples_path = ctx.samples_file(&cell);
        let samples = if samples_path.exists() {
            let (s, _) = read_samples_binary(&samples_path).map_err(Failure::runtime)?;
            Some(s)
        } else {
            None
        };
        let eval = evaluate_models(
            cfg,
            &target,
            &grid,
            &models,
            &cell,
            samples.as_ref().map(|s| s.view()).as_ref(),
        )?;
        write_metrics_csv(&ctx.metrics_file(&cell), &ctx.fingerprint, &eval.metric_rows)?;
        let record = ExperimentRecord {
            fingerprint: ctx.fingerprint.clone(),
            seed: cell.seed,
            n: cell.n,
            ambient_dim: target.ambient_dim(),
            latent_dim: target.rate_dimension(),
            probe_t: cfg.experiment.eval_time,
            rows: eval.rows,
            sampler: eval.sampler,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        println!(
            "evaluated {}: weighted score error {:.4} ± {:.4}",
            cell.tag(),
            eval.weighted.0,
            eval.weighted.1
        );
        records.push(record);
    }
    append_records(&ctx.records_file(), &records)?;
    Ok(records)
}

/// Trains one network at the probe time only and returns its record row.
pub fn probe_cell(
    cfg: &ExperimentConfig,
    target: &Target,
    cell: &Cell,
    x0: &ArrayView2<f64>,
) -> Result<TimestepRow, Failure> {
    let t = cfg.experiment.eval_time;
    let ts = forward_corrupt(x0, t, cell.seed, PROBE_CORRUPT_LANE).map_err(Failure::runtime)?;
    let train_cfg = cfg.train_config(cell.seed, target.rate_dimension());
    let radius = train_cfg
        .radius
        .radius_at(t, target.ambient_dim(), cell.n)
        .map_err(Failure::runtime)?;
    let (net, _) =
        train_one_timestep(&ts, &train_cfg, radius, PROBE_TRAIN_LANE).map_err(Failure::runtime)?;
    let sigma = ou_coefficients(t).map_err(Failure::runtime)?.sigma;
    let loss = dsm_loss(&net, &ts.xt.view(), &ts.w.view(), sigma);
    let mut rng = stream(cell.seed, PROBE_EVAL_LANE);
    let est = score_risk(target, &net, t, cfg.experiment.n_mc, &mut rng)
        .map_err(Failure::runtime)?;
    Ok(TimestepRow {
        t,
        loss,
        risk: est.estimate,
        se: est.se,
        radius,
    })
}

#[derive(serde::Serialize)]
struct TraceLine<'a> {
    fingerprint: &'a str,
    timestep: usize,
    t: f64,
    epoch: usize,
    loss: f64,
    path_norm: f64,
    grad_norm: f64,
}

/// Flattens per-timestep training traces into one JSON-lines file, one
/// line per epoch.
pub fn write_traces(path: &Path, fingerprint: &str, traces: &[TrainTrace]) -> Result<(), Failure> {
    use std::io::Write;
    let file = std::fs::File::create(path)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    for trace in traces {
        for rec in &trace.records {
            let line = TraceLine {
                fingerprint,
                timestep: trace.index,
                t: trace.t,
                epoch: rec.epoch,
                loss: rec.loss,
                path_norm: rec.path_norm,
                grad_norm: rec.grad_norm,
            };
            writeln!(out, "{}", serde_json::to_string(&line).map_err(Failure::runtime)?)
                .map_err(Failure::runtime)?;
        }
    }
    out.flush().map_err(Failure::runtime)?;
    Ok(())
}
