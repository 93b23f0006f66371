use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::run::{CellRecord, RunRecord};
use crate::buffering::Strategy;
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, confidence_interval_95};

type GroupKey = (Strategy, usize);

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn ci_cols(values: &[f64]) -> (String, String) {
    match confidence_interval_95(values) {
        Ok((m, h)) => (fmt(m), fmt(h)),
        Err(_) if !values.is_empty() => (fmt(values.iter().sum::<f64>() / values.len() as f64), String::new()),
        Err(_) => (String::new(), String::new()),
    }
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn done(rec: &RunRecord) -> impl Iterator<Item = (&CellRecord, &super::run::CellResult)> {
    rec.cells.iter().filter_map(|c| c.result().map(|r| (c, r)))
}

/// Report file names and their CSV contents. Only completed cells
/// contribute; a record without any yields header-only files.
pub fn render_reports(rec: &RunRecord) -> Result<Vec<(String, String)>> {
    let mut coverage = Vec::new();
    let mut accuracy = Vec::new();
    let mut distribution = Vec::new();
    // per (strategy, B): seed-level final coverage, final accuracy, average accuracy
    let mut per_group: BTreeMap<GroupKey, [Vec<f64>; 3]> = BTreeMap::new();
    // per (strategy, B, row, stage): values across seeds
    let mut curves: BTreeMap<(GroupKey, usize, usize), Vec<f64>> = BTreeMap::new();

    for (c, r) in done(rec) {
        let head = [c.seed.to_string(), c.strategy.to_string(), c.buffer_size.to_string()];
        if let Some(cov) = r.final_coverage() {
            for (s, v) in &cov.per_scene {
                let mut row = head.to_vec();
                row.extend([rec.scene_name(*s).to_string(), fmt(*v)]);
                coverage.push(row);
            }
        }
        if let Some(dist) = r.distributions.last() {
            for (s, n) in dist {
                let mut row = head.to_vec();
                row.extend([rec.scene_name(*s).to_string(), n.to_string()]);
                distribution.push(row);
            }
        }
        for (i, j, a) in r.accuracy.entries() {
            let mut row = head.to_vec();
            row.extend([
                rec.scene_name(rec.order.0[i]).to_string(),
                (i + 1).to_string(),
                (j + 1).to_string(),
                fmt(a),
            ]);
            accuracy.push(row);
            curves.entry(((c.strategy, c.buffer_size), i, j)).or_default().push(a);
        }

        let n = r.accuracy.n_scenes();
        let g = per_group.entry((c.strategy, c.buffer_size)).or_default();
        if let Some(cov) = r.final_coverage() {
            g[0].push(cov.average);
        }
        if let Ok(fin) = r.accuracy.final_accuracies() {
            g[1].push(fin.iter().sum::<f64>() / n as f64);
        }
        let avg: Result<Vec<f64>> = (0..n).map(|i| average_accuracy(&r.accuracy, i)).collect();
        if let Ok(avg) = avg {
            g[2].push(avg.iter().sum::<f64>() / n as f64);
        }
    }

    let mut summary = Vec::new();
    for ((s, b), vals) in &per_group {
        for (name, v) in ["coverage", "accuracy", "average_accuracy"].iter().zip(vals) {
            let (m, h) = ci_cols(v);
            summary.push(vec![
                s.to_string(),
                b.to_string(),
                name.to_string(),
                v.len().to_string(),
                m,
                h,
            ]);
        }
    }

    let mut curve_rows = Vec::new();
    for (((s, b), i, j), v) in &curves {
        let (m, h) = ci_cols(v);
        curve_rows.push(vec![
            s.to_string(),
            b.to_string(),
            rec.scene_name(rec.order.0[*i]).to_string(),
            (i + 1).to_string(),
            (j + 1).to_string(),
            v.len().to_string(),
            m,
            h,
        ]);
    }

    let cells = rec
        .cells
        .iter()
        .map(|c| {
            let (status, err) = match &c.outcome {
                super::run::CellOutcome::Done(_) => ("done", String::new()),
                super::run::CellOutcome::Failed { error } => ("failed", error.clone()),
            };
            vec![
                c.seed.to_string(),
                c.strategy.to_string(),
                c.buffer_size.to_string(),
                status.into(),
                err,
            ]
        })
        .collect();

    Ok(vec![
        (
            "coverage.csv".into(),
            csv_text(&["seed", "strategy", "buffer_size", "scene", "coverage"], coverage)?,
        ),
        (
            "accuracy.csv".into(),
            csv_text(
                &[
                    "seed",
                    "strategy",
                    "buffer_size",
                    "scene",
                    "task_i",
                    "stage_j",
                    "accuracy",
                ],
                accuracy,
            )?,
        ),
        (
            "summary.csv".into(),
            csv_text(
                &[
                    "strategy",
                    "buffer_size",
                    "metric",
                    "n_seeds",
                    "mean",
                    "ci95_half_width",
                ],
                summary,
            )?,
        ),
        (
            "distribution.csv".into(),
            csv_text(&["seed", "strategy", "buffer_size", "scene", "count"], distribution)?,
        ),
        (
            "accuracy_curves.csv".into(),
            csv_text(
                &[
                    "strategy",
                    "buffer_size",
                    "scene",
                    "task_i",
                    "stage_j",
                    "n_seeds",
                    "mean",
                    "ci95_half_width",
                ],
                curve_rows,
            )?,
        ),
        (
            "cells.csv".into(),
            csv_text(&["seed", "strategy", "buffer_size", "status", "error"], cells)?,
        ),
    ])
}

/// Writes the reports into `dir`, creating it if needed.
pub fn emit_reports(rec: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (name, text) in render_reports(rec)? {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
