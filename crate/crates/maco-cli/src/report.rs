//! Evaluation report rows, their CSV form, and the grouped results table.
//!
//! Reports separate deterministic numbers from wall-clock timings: the main
//! CSV reruns byte-identically, timings live in a sibling file keyed by the
//! same columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const REPORT_HEADER: &str =
    "env,n,m,method,mode,instances,mean_objective,mean_steps,conflict_rate";
pub const TIMING_HEADER: &str = "env,n,m,method,mode,mean_time_s";

/// One (environment, size, method) aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub env: String,
    pub n: usize,
    pub m: usize,
    pub method: String,
    pub mode: String,
    pub instances: usize,
    pub mean_objective: f64,
    pub mean_steps: f64,
    pub conflict_rate: f64,
    /// Joined in from the timing sibling; absent when it is missing.
    pub mean_time_s: Option<f64>,
}

/// `report.csv` -> `report.csv.timing.csv`, mirroring the dataset manifest
/// naming scheme.
pub fn timing_path(report: &Path) -> PathBuf {
    let mut name = report.file_name().unwrap_or_default().to_os_string();
    name.push(".timing.csv");
    report.with_file_name(name)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<(), CliError> {
    let mut body = String::from(REPORT_HEADER);
    body.push('\n');
    let mut timing = String::from(TIMING_HEADER);
    timing.push('\n');
    for row in rows {
        writeln!(
            body,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            row.env,
            row.n,
            row.m,
            row.method,
            row.mode,
            row.instances,
            row.mean_objective,
            row.mean_steps,
            row.conflict_rate
        )
        .expect("string write");
        writeln!(
            timing,
            "{},{},{},{},{},{:.6}",
            row.env,
            row.n,
            row.m,
            row.method,
            row.mode,
            row.mean_time_s.unwrap_or(0.0)
        )
        .expect("string write");
    }
    std::fs::write(path, body)?;
    std::fs::write(timing_path(path), timing)?;
    Ok(())
}

fn parse_line(path: &Path, lineno: usize, line: &str, fields: usize) -> Result<Vec<String>, CliError> {
    let parts: Vec<String> = line.split(',').map(str::to_string).collect();
    if parts.len() != fields {
        return Err(CliError::Usage(format!(
            "{}:{}: expected {fields} comma-separated fields, got {}",
            path.display(),
            lineno + 1,
            parts.len()
        )));
    }
    Ok(parts)
}

fn parse_num<T: std::str::FromStr>(path: &Path, lineno: usize, s: &str) -> Result<T, CliError> {
    s.parse().map_err(|_| {
        CliError::Usage(format!("{}:{}: bad number {s:?}", path.display(), lineno + 1))
    })
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, CliError> {
    let body = std::fs::read_to_string(path)?;
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_HEADER => {}
        _ => {
            return Err(CliError::Usage(format!(
                "{} is not an evaluation report (missing header)",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_line(path, lineno, line, 9)?;
        rows.push(ReportRow {
            env: f[0].clone(),
            n: parse_num(path, lineno, &f[1])?,
            m: parse_num(path, lineno, &f[2])?,
            method: f[3].clone(),
            mode: f[4].clone(),
            instances: parse_num(path, lineno, &f[5])?,
            mean_objective: parse_num(path, lineno, &f[6])?,
            mean_steps: parse_num(path, lineno, &f[7])?,
            conflict_rate: parse_num(path, lineno, &f[8])?,
            mean_time_s: None,
        });
    }
    attach_timings(path, &mut rows)?;
    Ok(rows)
}

fn attach_timings(report: &Path, rows: &mut [ReportRow]) -> Result<(), CliError> {
    let path = timing_path(report);
    let body = match std::fs::read_to_string(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    for (lineno, line) in body.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_line(&path, lineno, line, 6)?;
        let time: f64 = parse_num(&path, lineno, &f[5])?;
        let n: usize = parse_num(&path, lineno, &f[1])?;
        let m: usize = parse_num(&path, lineno, &f[2])?;
        for row in rows.iter_mut() {
            if row.env == f[0] && row.n == n && row.m == m && row.method == f[3] && row.mode == f[4]
            {
                row.mean_time_s = Some(time);
            }
        }
    }
    Ok(())
}

/// Rendered cell values shared by the markdown and CSV emitters so the two
/// always carry identical numbers.
struct TableRow {
    cells: [String; 8],
}

/// Group rows by (env, n, m), mark each group's best objective as the 0.00%
/// gap reference, and order methods best-first within a group.
pub fn build_table(rows: &[ReportRow]) -> (String, String) {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.env, a.n, a.m)
            .cmp(&(&b.env, b.n, b.m))
            .then(a.mean_objective.total_cmp(&b.mean_objective))
            .then(a.method.cmp(&b.method))
    });

    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let key = (&sorted[i].env, sorted[i].n, sorted[i].m);
        let mut j = i;
        while j < sorted.len() && (&sorted[j].env, sorted[j].n, sorted[j].m) == key {
            j += 1;
        }
        let best = sorted[i..j]
            .iter()
            .map(|r| r.mean_objective)
            .fold(f64::INFINITY, f64::min);
        for row in &sorted[i..j] {
            let gap = if best > 0.0 { (row.mean_objective - best) / best * 100.0 } else { 0.0 };
            out.push(TableRow {
                cells: [
                    row.env.clone(),
                    row.n.to_string(),
                    row.m.to_string(),
                    row.method.clone(),
                    row.mode.clone(),
                    format!("{:.3}", row.mean_objective),
                    format!("{gap:.2}%"),
                    row.mean_time_s.map_or_else(|| "-".to_string(), |t| format!("{t:.3}s")),
                ],
            });
        }
        i = j;
    }

    let header = ["Env", "N", "M", "Method", "Mode", "Obj.", "Gap", "Time"];
    let mut md = String::new();
    writeln!(md, "| {} |", header.join(" | ")).expect("string write");
    writeln!(md, "|{}", "---|".repeat(header.len())).expect("string write");
    for row in &out {
        writeln!(md, "| {} |", row.cells.join(" | ")).expect("string write");
    }

    let mut csv = String::new();
    writeln!(csv, "{}", ["env", "n", "m", "method", "mode", "obj", "gap", "time"].join(","))
        .expect("string write");
    for row in &out {
        writeln!(csv, "{}", row.cells.join(",")).expect("string write");
    }
    (md, csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, obj: f64) -> ReportRow {
        ReportRow {
            env: "hcvrp".into(),
            n: 10,
            m: 2,
            method: method.into(),
            mode: "greedy".into(),
            instances: 5,
            mean_objective: obj,
            mean_steps: 7.0,
            conflict_rate: 0.1,
            mean_time_s: Some(0.25),
        }
    }

    #[test]
    fn report_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let rows = vec![row("policy", 3.5), row("random", 4.25)];
        write_report(&path, &rows).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn best_method_gets_zero_gap() {
        let rows = vec![row("worse", 4.0), row("best", 2.0)];
        let (md, csv) = build_table(&rows);
        let best_line = md.lines().find(|l| l.contains("best")).unwrap();
        assert!(best_line.contains("0.00%"), "{best_line}");
        let worse_line = md.lines().find(|l| l.contains("worse")).unwrap();
        assert!(worse_line.contains("100.00%"), "{worse_line}");
        // Best-first inside the group.
        assert!(md.find("best").unwrap() < md.find("worse").unwrap());
        assert!(csv.lines().nth(1).unwrap().starts_with("hcvrp,10,2,best"));
    }

    #[test]
    fn markdown_and_csv_carry_identical_numbers() {
        let rows = vec![row("a", 3.1234), row("b", 3.9876)];
        let (md, csv) = build_table(&rows);
        for line in csv.lines().skip(1) {
            for cell in line.split(',') {
                assert!(md.contains(cell), "{cell} missing from markdown");
            }
        }
    }

    #[test]
    fn missing_timing_file_leaves_time_blank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report(&path, &[row("policy", 3.5)]).unwrap();
        std::fs::remove_file(timing_path(&path)).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back[0].mean_time_s, None);
        let (md, _) = build_table(&back);
        assert!(md.lines().last().unwrap().contains("| - |"));
    }
}
