//! Terminal, HTML and JSON renderings of a sensitivity report.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::pipeline::{top_k_table, SensitivityReport, TopKRow};
use crate::tokenization::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Ansi,
    Html,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Ansi => "txt",
            OutputFormat::Html => "html",
            OutputFormat::Json => "json",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ansi" | "text" | "terminal" => Ok(OutputFormat::Ansi),
            "html" => Ok(OutputFormat::Html),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Argument(format!("unknown output format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub format: OutputFormat,
    pub top_k: Option<usize>,
    pub alpha: f64,
    pub show_p_values: bool,
    /// Tokens rendered without highlight regardless of their score.
    pub suppress: Vec<String>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            format: OutputFormat::Ansi,
            top_k: None,
            alpha: 0.05,
            show_p_values: false,
            suppress: Vec::new(),
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Argument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Argument("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn render(report: &SensitivityReport, options: &RenderOptions) -> Result<Vec<u8>> {
    options.validate()?;
    Ok(match options.format {
        OutputFormat::Ansi => render_ansi(report, options).into_bytes(),
        OutputFormat::Html => render_html(report, options).into_bytes(),
        OutputFormat::Json => render_json(report)?,
    })
}

pub fn render_json(report: &SensitivityReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn parse_json(bytes: &[u8]) -> Result<SensitivityReport> {
    Ok(serde_json::from_slice(bytes)?)
}

fn intensities(report: &SensitivityReport, options: &RenderOptions) -> IndexMap<String, u8> {
    let suppressed: HashSet<&str> = options.suppress.iter().map(String::as_str).collect();
    report
        .normalized_intensity()
        .into_iter()
        .map(|(t, i)| {
            let i = if suppressed.contains(t.as_str()) { 0 } else { i };
            (t, i)
        })
        .collect()
}

/// The prompt as alternating pieces: text between tokens (`None`) kept
/// verbatim, and tokens with their intensity.
fn pieces(report: &SensitivityReport, options: &RenderOptions) -> Vec<(String, Option<u8>)> {
    let levels = intensities(report, options);
    let tokenized = tokenize(&report.prompt);
    let mut out = Vec::with_capacity(2 * tokenized.len() + 1);
    for (i, t) in tokenized.tokens().iter().enumerate() {
        out.push((tokenized.leading_gap(i).to_owned(), None));
        out.push((t.text.clone(), Some(levels.get(&t.text).copied().unwrap_or(0))));
    }
    out.push((tokenized.trailing_gap().to_owned(), None));
    out
}

/// 256-colour palette index on the white-to-red axis of the colour cube.
/// 100 is pure red (196); low intensities are near white (231).
pub fn ansi_ramp_color(intensity: u8) -> u8 {
    let green_blue = 5 - ((f64::from(intensity.min(100)) * 5.0 / 100.0).round() as u8);
    196 + 7 * green_blue
}

pub fn render_ansi(report: &SensitivityReport, options: &RenderOptions) -> String {
    let mut out = String::new();
    for (text, level) in pieces(report, options) {
        match level {
            None | Some(0) => out.push_str(&text),
            Some(level) => {
                let _ = write!(out, "\x1b[38;5;16;48;5;{}m{text}\x1b[0m", ansi_ramp_color(level));
            }
        }
    }
    out.push('\n');
    if let Some(k) = options.top_k {
        out.push('\n');
        let rows = top_k_table(report, k, options.alpha);
        let width = rows.iter().map(|r| r.token.chars().count()).max().unwrap_or(4).max(4);
        if options.show_p_values {
            let _ = writeln!(out, "{:<width$}  {:>11}  {:>8}  p < {}", "Word", "Effect size", "p-value", options.alpha);
        } else {
            let _ = writeln!(out, "{:<width$}  {:>11}", "Word", "Effect size");
        }
        for r in rows {
            if options.show_p_values {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>11.4}  {:>8.4}  {}",
                    r.token,
                    r.omega,
                    r.p_value,
                    mark(&r)
                );
            } else {
                let _ = writeln!(out, "{:<width$}  {:>11.4}", r.token, r.omega);
            }
        }
    }
    out
}

fn mark(row: &TopKRow) -> &'static str {
    if row.significant {
        "✓"
    } else {
        "✗"
    }
}

fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:system-ui,sans-serif;max-width:60em;margin:2em auto;line-height:1.7}\
.prompt{font-size:1.1em;white-space:pre-wrap}\
.tok{padding:0 1px;border-radius:2px}\
.legend{display:flex;align-items:center;gap:.6em;margin:1.2em 0}\
.ramp{width:14em;height:1em;background:linear-gradient(to right,rgba(255,0,0,1),rgba(255,0,0,0));border:1px solid #ccc}\
table{border-collapse:collapse}th,td{border:1px solid #ccc;padding:.2em .7em;text-align:left}\
td.num{text-align:right;font-variant-numeric:tabular-nums}";

pub fn render_html(report: &SensitivityReport, options: &RenderOptions) -> String {
    let scores: IndexMap<&str, (f64, f64)> = report
        .tokens
        .iter()
        .map(|t| (t.token.as_str(), (t.omega, t.p_value)))
        .collect();
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>Token sensitivity</title>\n");
    let _ = writeln!(out, "<style>{STYLE}</style>\n</head>\n<body>");
    let provenance = serde_json::json!({
        "version": report.version,
        "run_config": report.run_config,
        "baseline_sample_digest": report.baseline_sample_digest,
    });
    let _ = writeln!(out, "<!-- provenance: {} -->", provenance.to_string().replace("--", "- -"));
    out.push_str("<h1>Token sensitivity</h1>\n<p class=\"prompt\">");
    for (text, level) in pieces(report, options) {
        let Some(level) = level else {
            out.push_str(&escape_html(&text));
            continue;
        };
        let title = match scores.get(text.as_str()) {
            Some((omega, p)) if options.show_p_values => format!(" title=\"effect {omega:.4}, p {p:.4}\""),
            Some((omega, _)) => format!(" title=\"effect {omega:.4}\""),
            None => String::new(),
        };
        if level == 0 {
            let _ = write!(out, "<span class=\"tok\"{title}>{}</span>", escape_html(&text));
        } else {
            let alpha = f64::from(level) / 100.0;
            let _ = write!(
                out,
                "<span class=\"tok\" style=\"background-color:rgba(255,0,0,{alpha})\"{title}>{}</span>",
                escape_html(&text)
            );
        }
    }
    out.push_str("</p>\n");
    out.push_str(
        "<div class=\"legend\"><span>Most important</span><span class=\"ramp\"></span><span>Least important</span></div>\n",
    );
    if let Some(k) = options.top_k {
        out.push_str("<table>\n");
        let _ = writeln!(
            out,
            "<caption>Top {k} tokens by effect size; p-value is the mean unit p-value, α = {}</caption>",
            options.alpha
        );
        out.push_str("<thead><tr><th>Word</th><th>Effect size</th><th>p-value</th><th>p &lt; α</th></tr></thead>\n<tbody>\n");
        for r in top_k_table(report, k, options.alpha) {
            let _ = writeln!(
                out,
                "<tr><td>{}</td><td class=\"num\">{:.4}</td><td class=\"num\">{:.4}</td><td>{}</td></tr>",
                escape_html(&r.token),
                r.omega,
                r.p_value,
                mark(&r)
            );
        }
        out.push_str("</tbody>\n</table>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

fn escape_markdown_cell(text: &str) -> String {
    text.replace('\\', "\\\\").replace('|', "\\|")
}

/// GitHub-flavoured table of the top `k` tokens.
pub fn render_top_k_markdown(report: &SensitivityReport, k: usize, alpha: f64) -> String {
    let mut out = format!("| Word | Effect size | p-value | p < {alpha} |\n|---|---:|---:|:---:|\n");
    for r in top_k_table(report, k, alpha) {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {} |",
            escape_markdown_cell(&r.token),
            r.omega,
            r.p_value,
            mark(&r)
        );
    }
    out
}
