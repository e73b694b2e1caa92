//! Markdown and HTML summaries of a run directory.

use std::fmt::Write;
use std::path::Path;

use ilens_core::dynamics::GridReport;

use crate::error::CliResult;
use crate::files::{read, read_csv, read_json, relative, write_atomic};

const TOP_HYPOTHESES: usize = 10;

enum Block {
    Heading(String),
    Text(String),
    Table(Vec<String>, Vec<Vec<String>>),
    Figure(String),
}

fn sorted_dirs(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn sorted_files(dir: &Path, ext: &str) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == ext))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

fn name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn collect(run: &Path) -> CliResult<Vec<Block>> {
    let mut blocks = vec![Block::Heading(String::from("Run summary"))];
    let stages = run.join("checkpoints");
    for dir in sorted_dirs(&stages) {
        let csv = dir.join("epochs.csv");
        if csv.exists() {
            let (h, rows) = read_csv(&csv)?;
            blocks.push(Block::Heading(format!("Training: {}", name(&dir))));
            blocks.push(Block::Table(h, rows));
        }
    }
    for dir in sorted_dirs(&run.join("metrics")) {
        blocks.push(Block::Heading(format!("Layer profile: {}", name(&dir))));
        let csv = dir.join("profile.csv");
        if csv.exists() {
            let (h, rows) = read_csv(&csv)?;
            blocks.push(Block::Table(h, rows));
        }
        for svg in sorted_files(&dir, "svg") {
            blocks.push(Block::Figure(relative(run, &svg)));
        }
    }
    for dir in sorted_dirs(&run.join("flow")) {
        blocks.push(Block::Heading(format!("Invariance flow: {}", name(&dir))));
        blocks.push(Block::Text(String::from(
            "Entry (row i, column j) is STIR(ft layer j | pt layer i) minus STIR(ft layer i | pt layer i). \
             Red below the diagonal marks compression, red above it expansion.",
        )));
        for svg in sorted_files(&dir, "svg") {
            blocks.push(Block::Figure(relative(run, &svg)));
        }
    }
    for dir in sorted_dirs(&run.join("dynamics")) {
        blocks.push(Block::Heading(format!("Dynamics: {}", name(&dir))));
        for svg in sorted_files(&dir, "svg") {
            blocks.push(Block::Figure(relative(run, &svg)));
        }
    }
    for dir in sorted_dirs(&run.join("correlate")) {
        for json in sorted_files(&dir, "json") {
            let g: GridReport = read_json(&json)?;
            blocks.push(Block::Heading(format!("Hypotheses: {} / {}", name(&dir), name(&json))));
            let passing = g.reports.iter().filter(|r| r.bonferroni_pass).count();
            blocks.push(Block::Text(format!(
                "Grid: {}. Bonferroni at alpha {} over {} hypotheses: {passing} pass.",
                g.formula,
                g.alpha,
                g.reports.len()
            )));
            let rows = g
                .reports
                .iter()
                .take(TOP_HYPOTHESES)
                .map(|r| {
                    vec![
                        r.hypothesis.label(),
                        r.r.map(|v| format!("{v:.4}")).unwrap_or_else(|| "skipped".into()),
                        r.p_value.map(|v| format!("{v:.3e}")).unwrap_or_default(),
                        r.bonferroni_pass.to_string(),
                    ]
                })
                .collect();
            blocks.push(Block::Table(
                vec!["hypothesis".into(), "r".into(), "p".into(), "passes".into()],
                rows,
            ));
        }
        for svg in sorted_files(&dir, "svg") {
            blocks.push(Block::Figure(relative(run, &svg)));
        }
    }
    Ok(blocks)
}

fn markdown(blocks: &[Block]) -> String {
    let mut out = String::new();
    for b in blocks {
        match b {
            Block::Heading(h) if out.is_empty() => {
                let _ = writeln!(out, "# {h}\n");
            }
            Block::Heading(h) => {
                let _ = writeln!(out, "## {h}\n");
            }
            Block::Text(t) => {
                let _ = writeln!(out, "{t}\n");
            }
            Block::Table(h, rows) => {
                let _ = writeln!(out, "| {} |", h.join(" | "));
                let _ = writeln!(out, "|{}", "---|".repeat(h.len()));
                for r in rows {
                    let _ = writeln!(out, "| {} |", r.join(" | "));
                }
                out.push('\n');
            }
            Block::Figure(p) => {
                let _ = writeln!(out, "![{p}]({p})\n");
            }
        }
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn html(run: &Path, blocks: &[Block]) -> CliResult<String> {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>ilens run</title>\
         <style>body{font-family:sans-serif;max-width:980px;margin:auto}\
         table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 6px}</style></head><body>\n",
    );
    let mut first = true;
    for b in blocks {
        match b {
            Block::Heading(h) => {
                let tag = if first { "h1" } else { "h2" };
                first = false;
                let _ = writeln!(out, "<{tag}>{}</{tag}>", esc(h));
            }
            Block::Text(t) => {
                let _ = writeln!(out, "<p>{}</p>", esc(t));
            }
            Block::Table(h, rows) => {
                out.push_str("<table><tr>");
                for c in h {
                    let _ = write!(out, "<th>{}</th>", esc(c));
                }
                out.push_str("</tr>\n");
                for r in rows {
                    out.push_str("<tr>");
                    for c in r {
                        let _ = write!(out, "<td>{}</td>", esc(c));
                    }
                    out.push_str("</tr>\n");
                }
                out.push_str("</table>\n");
            }
            Block::Figure(p) => {
                let svg = read(&run.join(p))?;
                let _ = writeln!(out, "<figure>{}<figcaption>{}</figcaption></figure>", String::from_utf8_lossy(&svg), esc(p));
            }
        }
    }
    out.push_str("</body></html>\n");
    Ok(out)
}

/// Writes `report.md` and `report.html` (figures inlined) into `run`.
pub fn write_report(run: &Path) -> CliResult<()> {
    let blocks = collect(run)?;
    write_atomic(&run.join("report.md"), markdown(&blocks).as_bytes())?;
    write_atomic(&run.join("report.html"), html(run, &blocks)?.as_bytes())
}
