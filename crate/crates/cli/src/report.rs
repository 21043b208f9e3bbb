//! Aggregation of experiment records into rate fits, summary tables, and a
//! log-log plot of median probe risk against sample size.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use shallow_diffusion::rng::stream;

use crate::record::{dedupe_records, read_records, ExperimentRecord};
use crate::Failure;

pub const DEFAULT_BOOTSTRAP: usize = 200;
const BOOTSTRAP_SEED: u64 = 17;

/// Per-n risks keyed by seed: the input shape of the rate fit.
pub type RiskTable = BTreeMap<usize, BTreeMap<u64, f64>>;

/// A fitted power law risk ≈ c·n^exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub exponent: f64,
    /// Bootstrap standard error over the seed set.
    pub se: f64,
    pub n_values: Vec<usize>,
    pub seeds_used: usize,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite risks"));
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in points {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Least-squares slope of log(median risk) against log n, with a bootstrap
/// standard error from resampling the seed set (the same resample applied
/// to every n, keeping the pairing).
///
/// Needs at least three distinct n and at least three seeds present at
/// every n; refuses otherwise rather than fitting a line through too few
/// points.
pub fn fit_rate_exponent(data: &RiskTable, n_boot: usize, boot_seed: u64) -> Result<RateFit, Failure> {
    if data.len() < 3 {
        return Err(Failure::config(format!(
            "rate fit needs at least 3 distinct sample sizes, got {}",
            data.len()
        )));
    }
    let mut shared: Option<BTreeSet<u64>> = None;
    for by_seed in data.values() {
        let seeds: BTreeSet<u64> = by_seed.keys().copied().collect();
        shared = Some(match shared {
            None => seeds,
            Some(acc) => acc.intersection(&seeds).copied().collect(),
        });
    }
    let seeds: Vec<u64> = shared.expect("nonempty table").into_iter().collect();
    if seeds.len() < 3 {
        return Err(Failure::config(format!(
            "rate fit needs at least 3 seeds shared across all n, got {}",
            seeds.len()
        )));
    }

    let log_points = |chosen: &[u64]| -> Result<Vec<(f64, f64)>, Failure> {
        data.iter()
            .map(|(&n, by_seed)| {
                let mut risks: Vec<f64> = chosen.iter().map(|s| by_seed[s]).collect();
                let m = median(&mut risks);
                if !(m > 0.0) {
                    return Err(Failure::config(format!(
                        "median risk at n = {n} is {m}; cannot fit a power law"
                    )));
                }
                Ok(((n as f64).ln(), m.ln()))
            })
            .collect()
    };

    let exponent = slope(&log_points(&seeds)?);

    let mut rng = stream(boot_seed, 0);
    let mut boot = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let resample: Vec<u64> = (0..seeds.len())
            .map(|_| seeds[rng.random_range(0..seeds.len())])
            .collect();
        boot.push(slope(&log_points(&resample)?));
    }
    let mean = boot.iter().sum::<f64>() / boot.len() as f64;
    let var = boot.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>()
        / (boot.len() - 1).max(1) as f64;

    Ok(RateFit {
        exponent,
        se: var.sqrt(),
        n_values: data.keys().copied().collect(),
        seeds_used: seeds.len(),
    })
}

/// Median probe risks of one (D, d) group, with its rate fit when the grid
/// supports one.
#[derive(Debug, Clone)]
pub struct GroupSeries {
    pub ambient_dim: usize,
    pub latent_dim: usize,
    /// (n, seeds present, median probe risk), ascending in n.
    pub points: Vec<(usize, usize, f64)>,
    pub fit: Option<RateFit>,
}

/// Groups records by (D, d) and collects each group's probe risks per
/// (n, seed). Records without a probe row are counted and skipped.
pub fn collect_groups(
    records: &[ExperimentRecord],
) -> (BTreeMap<(usize, usize), RiskTable>, usize) {
    let mut groups: BTreeMap<(usize, usize), RiskTable> = BTreeMap::new();
    let mut skipped = 0;
    for record in records {
        match record.probe_rows().next() {
            None => skipped += 1,
            Some(row) => {
                groups
                    .entry((record.ambient_dim, record.latent_dim))
                    .or_default()
                    .entry(record.n)
                    .or_default()
                    .insert(record.seed, row.risk);
            }
        }
    }
    (groups, skipped)
}

/// Reads, dedupes, and aggregates record files, then writes the summary
/// table, the rate table, and the plot under `out`.
pub fn report(files: &[PathBuf], out: &Path) -> Result<Vec<GroupSeries>, Failure> {
    if files.is_empty() {
        return Err(Failure::usage("report needs at least one records file"));
    }
    let mut records = Vec::new();
    for file in files {
        records.extend(read_records(file)?);
    }
    let records = dedupe_records(records);
    if records.is_empty() {
        return Err(Failure::runtime("no records to aggregate"));
    }
    let fingerprints: BTreeSet<String> =
        records.iter().map(|r| r.fingerprint.clone()).collect();
    let fp_line = fingerprints.iter().cloned().collect::<Vec<_>>().join(",");

    let (groups, skipped) = collect_groups(&records);
    if skipped > 0 {
        println!("note: {skipped} record(s) had no probe row and were skipped");
    }
    if groups.is_empty() {
        return Err(Failure::runtime("no probe rows found in any record"));
    }

    let mut series = Vec::new();
    for (&(big_d, d), table) in &groups {
        let points: Vec<(usize, usize, f64)> = table
            .iter()
            .map(|(&n, by_seed)| {
                let mut risks: Vec<f64> = by_seed.values().copied().collect();
                (n, risks.len(), median(&mut risks))
            })
            .collect();
        let fit = match fit_rate_exponent(table, DEFAULT_BOOTSTRAP, BOOTSTRAP_SEED) {
            Ok(fit) => Some(fit),
            Err(why) => {
                println!("note: no rate fit for D={big_d}, d={d}: {why}");
                None
            }
        };
        series.push(GroupSeries {
            ambient_dim: big_d,
            latent_dim: d,
            points,
            fit,
        });
    }

    std::fs::create_dir_all(out)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out.display())))?;
    write_summary_csv(&out.join("summary.csv"), &fp_line, &series)?;
    write_rate_csv(&out.join("rate.csv"), &fp_line, &series)?;
    write_risk_plot(&out.join("risk_vs_n.svg"), &fp_line, &series)?;
    Ok(series)
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>, Failure> {
    let file = std::fs::File::create(path)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn write_summary_csv(path: &Path, fp: &str, series: &[GroupSeries]) -> Result<(), Failure> {
    let mut out = create(path)?;
    let body = |out: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(out, "# fingerprints={fp}")?;
        writeln!(out, "ambient_dim,latent_dim,n,seeds,median_risk")?;
        for s in series {
            for &(n, seeds, median) in &s.points {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    s.ambient_dim, s.latent_dim, n, seeds, median
                )?;
            }
        }
        out.flush()
    };
    body(&mut out).map_err(Failure::runtime)
}

fn write_rate_csv(path: &Path, fp: &str, series: &[GroupSeries]) -> Result<(), Failure> {
    let mut out = create(path)?;
    let body = |out: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(out, "# fingerprints={fp}")?;
        writeln!(out, "ambient_dim,latent_dim,exponent,se,n_points,seeds")?;
        for s in series {
            if let Some(fit) = &s.fit {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    s.ambient_dim,
                    s.latent_dim,
                    fit.exponent,
                    fit.se,
                    fit.n_values.len(),
                    fit.seeds_used
                )?;
            }
        }
        out.flush()
    };
    body(&mut out).map_err(Failure::runtime)
}

const PLOT_COLORS: [&str; 4] = ["#1f6fb2", "#c23b22", "#2e8b57", "#7b4fa6"];

/// Hand-rolled SVG 1.1: median probe risk against n on log-log axes, one
/// polyline per (D, d) group.
pub fn write_risk_plot(path: &Path, fp: &str, series: &[GroupSeries]) -> Result<(), Failure> {
    let (width, height) = (640.0, 440.0);
    let (ml, mr, mt, mb) = (74.0, 26.0, 30.0, 58.0);

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(n, _, median) in &s.points {
            xs.push((n as f64).log10());
            if median > 0.0 {
                ys.push(median.log10());
            }
        }
    }
    if xs.is_empty() || ys.is_empty() {
        return Err(Failure::runtime("nothing to plot"));
    }
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.06 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x_lo, x_hi) = span(&xs);
    let (y_lo, y_hi) = span(&ys);
    let px = |x: f64| ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr);
    let py = |y: f64| height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb);

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!("<!-- fingerprints: {fp} -->\n"));
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" \
         height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));

    // Axes with ticks at each observed n and at integer powers of ten.
    let axis = "stroke=\"#333\" stroke-width=\"1\"";
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" {axis}/>\n",
        height - mb,
        width - mr,
        height - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" {axis}/>\n",
        height - mb
    ));

    let mut n_ticks: BTreeSet<usize> = BTreeSet::new();
    for s in series {
        for &(n, _, _) in &s.points {
            n_ticks.insert(n);
        }
    }
    for n in n_ticks {
        let x = px((n as f64).log10());
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" {axis}/>\n",
            height - mb,
            height - mb + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" \
             font-family=\"sans-serif\">{n}</text>\n",
            height - mb + 18.0
        ));
    }
    let (k_lo, k_hi) = (y_lo.floor() as i32, y_hi.ceil() as i32);
    for k in k_lo..=k_hi {
        let y = py(k as f64);
        if y < mt || y > height - mb {
            continue;
        }
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" {axis}/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\" \
             stroke-width=\"0.7\"/>\n",
            width - mr
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\" \
             font-family=\"sans-serif\">1e{k}</text>\n",
            ml - 9.0,
            y + 4.0
        ));
    }

    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">sample size n</text>\n",
        ml + (width - ml - mr) / 2.0,
        height - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         font-family=\"sans-serif\" transform=\"rotate(-90 18 {})\">median probe \
         risk</text>\n",
        mt + (height - mt - mb) / 2.0,
        mt + (height - mt - mb) / 2.0
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PLOT_COLORS[i % PLOT_COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|&&(_, _, m)| m > 0.0)
            .map(|&(n, _, m)| format!("{},{}", px((n as f64).log10()), py(m.log10())))
            .collect();
        if pts.len() > 1 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"1.8\"/>\n",
                pts.join(" ")
            ));
        }
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point format");
            svg.push_str(&format!(
                "<circle cx=\"{x}\" cy=\"{y}\" r=\"3.4\" fill=\"{color}\"/>\n"
            ));
        }
        let label = match &s.fit {
            Some(fit) => format!(
                "D={}, d={} (slope {:.3})",
                s.ambient_dim, s.latent_dim, fit.exponent
            ),
            None => format!("D={}, d={}", s.ambient_dim, s.latent_dim),
        };
        let ly = mt + 16.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"11\" height=\"11\" fill=\"{color}\"/>\n",
            width - mr - 210.0,
            ly - 10.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\" font-size=\"12\" \
             font-family=\"sans-serif\">{label}</text>\n",
            width - mr - 194.0
        ));
    }
    svg.push_str("</svg>\n");

    std::fs::write(path, svg)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}
