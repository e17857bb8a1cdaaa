use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::commands::ResultRow;

const GROUP_COLUMNS: [&str; 2] = ["arm", "num_speakers"];
const VALUE_COLUMNS: [&str; 3] = ["seed", "eer", "min_dcf"];

/// A parsed results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub group_column: String,
    pub rows: Vec<ResultRow>,
}

pub fn read_results(path: &Path) -> Result<ResultsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_results(text: &str) -> Result<ResultsTable> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("unreadable header: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(Error::data("empty input: no header row"));
    }
    let group_column = headers
        .get(0)
        .filter(|h| GROUP_COLUMNS.contains(h))
        .ok_or_else(|| {
            Error::data(format!(
                "first column is `{}`, expected one of {GROUP_COLUMNS:?}",
                headers.get(0).unwrap_or("")
            ))
        })?
        .to_string();
    for (i, want) in VALUE_COLUMNS.iter().enumerate() {
        match headers.get(i + 1) {
            Some(h) if h == *want => {}
            found => {
                return Err(Error::data(format!(
                    "column {} must be `{want}`, found `{}`",
                    i + 2,
                    found.unwrap_or("<missing>")
                )))
            }
        }
    }
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("row {}: {e}", n + 1)))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::data(format!(
                    "row {}: column `{}` has non-numeric value `{}`",
                    n + 1,
                    VALUE_COLUMNS[i - 1],
                    field(i)
                ))
            })
        };
        rows.push(ResultRow {
            group: field(0).to_string(),
            seed: field(1).parse().map_err(|_| {
                Error::data(format!("row {}: column `seed` has invalid value `{}`", n + 1, field(1)))
            })?,
            eer: num(2)?,
            min_dcf: num(3)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::data("empty input: no result rows"));
    }
    Ok(ResultsTable { group_column, rows })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub eer_mean: f64,
    pub eer_std: f64,
    pub min_dcf_mean: f64,
    pub min_dcf_std: f64,
}

/// Per-group statistics, groups in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<GroupSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.group.as_str()) {
            order.push(&r.group);
        }
    }
    order
        .into_iter()
        .map(|g| {
            let eers: Vec<f64> = rows.iter().filter(|r| r.group == g).map(|r| r.eer).collect();
            let dcfs: Vec<f64> = rows.iter().filter(|r| r.group == g).map(|r| r.min_dcf).collect();
            let (eer_mean, eer_std) = mean_std(&eers);
            let (min_dcf_mean, min_dcf_std) = mean_std(&dcfs);
            GroupSummary {
                group: g.to_string(),
                n: eers.len(),
                eer_mean,
                eer_std,
                min_dcf_mean,
                min_dcf_std,
            }
        })
        .collect()
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn markdown_table(title: &str, group_column: &str, summary: &[GroupSummary]) -> String {
    let mut s = format!(
        "### {title}\n\n| {group_column} | seeds | EER (%) | minDCF |\n|---|---|---|---|\n"
    );
    for g in summary {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} ± {:.3} | {:.4} ± {:.4} |",
            g.group,
            g.n,
            100.0 * g.eer_mean,
            100.0 * g.eer_std,
            g.min_dcf_mean,
            g.min_dcf_std
        );
    }
    if group_column == "num_speakers" && summary.len() >= 2 {
        let xs: Option<Vec<f64>> = summary.iter().map(|g| g.group.parse().ok()).collect();
        if let Some(xs) = xs {
            let ys: Vec<f64> = summary.iter().map(|g| g.eer_mean).collect();
            let _ = writeln!(s, "\nSpearman(num_speakers, mean EER) = {:.3}", spearman(&xs, &ys));
        }
    }
    s
}

/// Series file: one line per group with means and standard deviations.
pub fn series_text(group_column: &str, summary: &[GroupSummary]) -> String {
    let mut s = format!("{group_column}\teer_mean\teer_std\tmin_dcf_mean\tmin_dcf_std\n");
    for g in summary {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            g.group, g.eer_mean, g.eer_std, g.min_dcf_mean, g.min_dcf_std
        );
    }
    s
}

/// Writes `report.md` plus one `<stem>.series.tsv` per input into `out`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<String> {
    if inputs.is_empty() {
        return Err(Error::data("empty input: no result files given"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut md = String::from("# Results\n\n");
    for path in inputs {
        let table = read_results(path)?;
        let summary = summarize(&table.rows);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "results".into());
        md.push_str(&markdown_table(&stem, &table.group_column, &summary));
        md.push('\n');
        let series = out.join(format!("{stem}.series.tsv"));
        fs::write(&series, series_text(&table.group_column, &summary))
            .map_err(|e| Error::io(&series, e))?;
    }
    let report = out.join("report.md");
    fs::write(&report, &md).map_err(|e| Error::io(&report, e))?;
    Ok(md)
}
