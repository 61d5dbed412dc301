use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::refuse_overwrite;
use crate::error::{Error, Result};
use crate::evaluation::{mean_ci95, mean_dice, mean_uvd, paired_ttest, rank_models, read_records, relative_metrics, MetricRecord, RankTable};

pub const RANK_FILE: &str = "rank.csv";
pub const SIGNIFICANCE_FILE: &str = "significance.csv";
pub const REPORT_FILE: &str = "report.md";

fn load_all(paths: &[PathBuf]) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records(p)?);
    }
    if out.is_empty() {
        return Err(Error::validation("--metrics", "no metric records in the given CSVs"));
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    for f in files {
        refuse_overwrite(&dir.join(f), force)?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Per-seed class-mean Dice and UVD of one model on one domain.
fn per_seed(records: &[MetricRecord], model: &str, domain: &str) -> BTreeMap<u64, (f64, f64)> {
    let mut by_seed: BTreeMap<u64, Vec<MetricRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model_id == model && r.domain_id == domain) {
        by_seed.entry(r.seed).or_default().push(r.clone());
    }
    by_seed
        .into_iter()
        .map(|(s, rs)| {
            let dice = mean_dice(&rs).unwrap_or(f64::NAN);
            (s, (dice, mean_uvd(&rs).unwrap_or(f64::NAN)))
        })
        .collect()
}

#[derive(Serialize)]
struct SignificanceRow {
    domain: String,
    metric: &'static str,
    model_a: String,
    model_b: String,
    n: usize,
    mean_diff: f64,
    t: f64,
    p_value: f64,
    tier: String,
}

/// Rank table over every (seed, volume) cell, plus two-sided paired t-tests
/// over seeds for every model pair, per domain and metric.
pub fn cmd_rank(metrics: &[PathBuf], out: &Path, force: bool) -> Result<RankTable> {
    let records = load_all(metrics)?;
    let table = rank_models(&records)?;
    prepare_out(out, &[RANK_FILE, SIGNIFICANCE_FILE], force)?;
    write_csv(&out.join(RANK_FILE), &table.entries)?;

    let models: Vec<&str> = table.entries.iter().map(|e| e.model_id.as_str()).collect();
    let domains: BTreeSet<&str> = records.iter().map(|r| r.domain_id.as_str()).collect();
    let mut rows = Vec::new();
    for &domain in &domains {
        let stats: Vec<BTreeMap<u64, (f64, f64)>> = models.iter().map(|m| per_seed(&records, m, domain)).collect();
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let seeds: Vec<u64> = stats[i].keys().filter(|s| stats[j].contains_key(s)).copied().collect();
                if seeds.len() < 2 {
                    continue;
                }
                for (metric, pick) in [("dice", 0usize), ("uvd", 1)] {
                    let get = |k: usize| -> Vec<f64> {
                        seeds
                            .iter()
                            .map(|s| if pick == 0 { stats[k][s].0 } else { stats[k][s].1 })
                            .collect()
                    };
                    let t = paired_ttest(&get(i), &get(j))?;
                    rows.push(SignificanceRow {
                        domain: domain.to_string(),
                        metric,
                        model_a: models[i].to_string(),
                        model_b: models[j].to_string(),
                        n: t.n,
                        mean_diff: t.mean_diff,
                        t: t.t,
                        p_value: t.p_value,
                        tier: t.tier,
                    });
                }
            }
        }
    }
    write_csv(&out.join(SIGNIFICANCE_FILE), &rows)?;
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
struct RelativeRow {
    domain: String,
    model_id: String,
    seed: u64,
    rel_dice: f64,
    rel_uvd: f64,
}

#[derive(Clone, Debug, Serialize)]
struct SummaryRow {
    domain: String,
    model_id: String,
    metric: &'static str,
    n: usize,
    mean: f64,
    ci_low: f64,
    ci_high: f64,
}

/// Relative Dice and UVD of each model against `baseline`, per domain, with
/// 95% intervals over seeds: a CSV of per-seed values, a summary CSV, a
/// markdown table and one SVG plot per metric.
pub fn cmd_report(
    metrics: &[PathBuf],
    baseline: &str,
    models: Option<&[String]>,
    out: &Path,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let records = load_all(metrics)?;
    let present: BTreeSet<&str> = records.iter().map(|r| r.model_id.as_str()).collect();
    if !present.contains(baseline) {
        return Err(Error::validation("--baseline", format!("no records for baseline model `{baseline}`")));
    }
    let chosen: Vec<String> = match models {
        Some(m) => {
            if let Some(x) = m.iter().find(|x| !present.contains(x.as_str())) {
                return Err(Error::validation("--models", format!("no records for model `{x}`")));
            }
            m.to_vec()
        }
        None => present.iter().filter(|m| **m != baseline).map(|m| m.to_string()).collect(),
    };
    if chosen.is_empty() {
        return Err(Error::validation("--models", "empty model list"));
    }
    let files = ["relative.csv", "summary.csv", REPORT_FILE, "relative_dice.svg", "relative_uvd.svg"];
    prepare_out(out, &files, force)?;

    let domains: BTreeSet<&str> = records.iter().map(|r| r.domain_id.as_str()).collect();
    let mut rel_rows = Vec::new();
    let mut summary = Vec::new();
    for &domain in &domains {
        let base: Vec<MetricRecord> = records
            .iter()
            .filter(|r| r.domain_id == domain && r.model_id == baseline)
            .cloned()
            .collect();
        if base.is_empty() {
            continue;
        }
        for model in &chosen {
            let mine: Vec<MetricRecord> = records
                .iter()
                .filter(|r| r.domain_id == domain && &r.model_id == model)
                .cloned()
                .collect();
            if mine.is_empty() {
                continue;
            }
            let rel = relative_metrics(&mine, &base)?;
            for r in &rel {
                rel_rows.push(RelativeRow {
                    domain: domain.to_string(),
                    model_id: r.model_id.clone(),
                    seed: r.seed,
                    rel_dice: r.rel_dice,
                    rel_uvd: r.rel_uvd,
                });
            }
            for (metric, vals) in [
                ("rel_dice", rel.iter().map(|r| r.rel_dice).collect::<Vec<_>>()),
                ("rel_uvd", rel.iter().map(|r| r.rel_uvd).collect()),
            ] {
                let (mean, lo, hi) = mean_ci95(&vals);
                summary.push(SummaryRow {
                    domain: domain.to_string(),
                    model_id: model.clone(),
                    metric,
                    n: vals.len(),
                    mean,
                    ci_low: lo,
                    ci_high: hi,
                });
            }
        }
    }
    write_csv(&out.join(files[0]), &rel_rows)?;
    write_csv(&out.join(files[1]), &summary)?;
    std::fs::write(out.join(files[2]), markdown(baseline, &summary)).map_err(|e| Error::io(out.join(files[2]), e))?;
    for (file, metric, title) in [(files[3], "rel_dice", "Relative Dice (%)"), (files[4], "rel_uvd", "Relative UVD (%)")] {
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.metric == metric).collect();
        std::fs::write(out.join(file), svg_plot(title, &rows)).map_err(|e| Error::io(out.join(file), e))?;
    }
    Ok(files.iter().map(|f| out.join(f)).collect())
}

fn markdown(baseline: &str, summary: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Relative metrics against `{baseline}`\n");
    let _ = writeln!(s, "Mean over seeds with 95% t intervals; 0 equals the baseline.\n");
    let _ = writeln!(s, "| domain | model | metric | n | mean | 95% CI |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for r in summary {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.3} | [{:.3}, {:.3}] |",
            r.domain, r.model_id, r.metric, r.n, r.mean, r.ci_low, r.ci_high
        );
    }
    s
}

/// Mean per (domain, model) as a dot on a blue 95% band.
fn svg_plot(title: &str, rows: &[&SummaryRow]) -> String {
    let (w, row_h, left, top) = (640.0, 22.0, 220.0, 40.0);
    let h = top + row_h * rows.len().max(1) as f64 + 40.0;
    let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
    let lo = rows.iter().filter_map(|r| finite(r.ci_low).or(finite(r.mean))).fold(0.0f64, f64::min);
    let hi = rows.iter().filter_map(|r| finite(r.ci_high).or(finite(r.mean))).fold(0.0f64, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (lo, hi) = (lo - 0.05 * span, hi + 0.05 * span);
    let x = |v: f64| left + (v - lo) / (hi - lo) * (w - left - 20.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{title}</text>"#, left);
    let _ = writeln!(s, r##"<line x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{2}" stroke="#888" stroke-dasharray="4 3"/>"##, x(0.0), top - 6.0, h - 34.0);
    for (i, r) in rows.iter().enumerate() {
        let y = top + row_h * i as f64 + row_h / 2.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{} / {}</text>"#, left - 8.0, y + 4.0, r.domain, r.model_id);
        if r.ci_low.is_finite() && r.ci_high.is_finite() {
            let _ = writeln!(
                s,
                r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="8" fill="#4a7bd0" fill-opacity="0.35"/>"##,
                x(r.ci_low),
                y - 4.0,
                (x(r.ci_high) - x(r.ci_low)).max(1.0)
            );
        }
        if r.mean.is_finite() {
            let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="4" fill="#1f3f8f"/>"##, x(r.mean), y);
        }
    }
    let axis_y = h - 30.0;
    let _ = writeln!(s, r##"<line x1="{left}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="#000"/>"##, w - 20.0);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{v:.1}</text>"#, x(v), axis_y + 16.0);
    }
    s.push_str("</svg>\n");
    s
}
