// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-contained HTML saliency maps.
//!
//! Each input token belonging to a feature is shaded with that feature's
//! score: blue for positive, red for negative, opacity `|φ| / max |φ|`.

use std::fmt::Write as _;

use crate::attribution::{aggregate_attribution, Aggregation, AttributionMatrix};
use crate::error::{Error, Result};
use crate::instance::Instance;

const POSITIVE_RGB: (u8, u8, u8) = (0, 90, 255);
const NEGATIVE_RGB: (u8, u8, u8) = (230, 30, 30);

/// Which scores the map displays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Attribution toward one output token.
    Token(usize),
    /// Per-feature aggregate over all output tokens.
    Aggregate(Aggregation),
}

pub fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Background style for a score, or `None` when the opacity is zero.
pub fn shade(score: f64, max_abs: f64) -> Option<String> {
    if max_abs <= 0.0 || score == 0.0 {
        return None;
    }
    let alpha = (score.abs() / max_abs).min(1.0);
    let (r, g, b) = if score > 0.0 { POSITIVE_RGB } else { NEGATIVE_RGB };
    Some(format!("background-color: rgba({r}, {g}, {b}, {alpha:.3})"))
}

pub fn selected_scores(matrix: &AttributionMatrix, selection: Selection) -> Result<Vec<f64>> {
    match selection {
        Selection::Token(t) if t < matrix.num_outputs() => Ok(matrix.column(t)),
        Selection::Token(t) => Err(Error::Invalid(format!(
            "output token {t} out of range ({} tokens)",
            matrix.num_outputs()
        ))),
        Selection::Aggregate(mode) => Ok(aggregate_attribution(matrix, mode).scores),
    }
}

pub fn render_html(
    instance: &Instance,
    matrix: &AttributionMatrix,
    selection: Selection,
    manifest_json: Option<&str>,
) -> Result<String> {
    matrix.validate()?;
    if matrix.num_features() != instance.num_features() {
        return Err(Error::dim(
            instance.num_features(),
            matrix.num_features(),
            "attribution features",
        ));
    }
    let scores = selected_scores(matrix, selection)?;
    let max_abs = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));

    let mut owner = vec![None; instance.input_tokens().len()];
    for (f, feature) in instance.features().iter().enumerate() {
        for idx in feature.token_indices() {
            owner[idx] = Some(f);
        }
    }

    let title = format!(
        "{} attribution: {}",
        escape_html(&matrix.method),
        escape_html(&instance.id())
    );
    let target = match selection {
        Selection::Token(t) => format!("output token {t} ({})", escape_html(&matrix.output_tokens[t])),
        Selection::Aggregate(mode) => format!("{mode} over all output tokens"),
    };

    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n<style>\n\
body {{ font-family: sans-serif; margin: 2em; max-width: 60em; }}\n\
.tokens {{ line-height: 2.2em; }}\n\
.tok, .feat {{ padding: 0.15em 0.3em; margin: 0 0.05em; border-radius: 0.2em; }}\n\
.feat {{ border-bottom: 1px solid #999; }}\n\
.out.sel {{ outline: 2px solid #333; }}\n\
table {{ border-collapse: collapse; }}\n\
td, th {{ padding: 0.2em 0.8em; border-bottom: 1px solid #ddd; text-align: left; }}\n\
td.num {{ text-align: right; font-family: monospace; }}\n\
</style>\n</head>\n<body>\n<h1>{title}</h1>\n\
<p>Showing {target}. Blue marks positive importance, red negative; darker means stronger.</p>\n"
    );

    html.push_str("<h2>Input</h2>\n<p class=\"tokens\">");
    for (idx, token) in instance.input_tokens().iter().enumerate() {
        match owner[idx] {
            Some(f) => {
                let name = escape_html(&instance.features()[f].name);
                let style = shade(scores[f], max_abs)
                    .map(|s| format!(" style=\"{s}\""))
                    .unwrap_or_default();
                let _ = write!(
                    html,
                    "<span class=\"feat\" data-feature=\"{f}\" title=\"{name}: {:.6}\"{style}>{}</span> ",
                    scores[f],
                    escape_html(token)
                );
            }
            None => {
                let _ = write!(html, "<span class=\"tok\">{}</span> ", escape_html(token));
            }
        }
    }
    html.push_str("</p>\n<h2>Output</h2>\n<p class=\"tokens\">");
    for (t, token) in matrix.output_tokens.iter().enumerate() {
        let class = if selection == Selection::Token(t) {
            "tok out sel"
        } else {
            "tok out"
        };
        let _ = write!(html, "<span class=\"{class}\">{}</span> ", escape_html(token));
    }
    html.push_str("</p>\n<h2>Feature scores</h2>\n<table>\n<tr><th>#</th><th>feature</th><th>score</th></tr>\n");
    for (f, name) in matrix.features.iter().enumerate() {
        let style = shade(scores[f], max_abs)
            .map(|s| format!(" style=\"{s}\""))
            .unwrap_or_default();
        let _ = writeln!(
            html,
            "<tr><td>{f}</td><td{style}>{}</td><td class=\"num\">{:.6}</td></tr>",
            escape_html(name),
            scores[f]
        );
    }
    html.push_str("</table>\n");
    if let Some(manifest) = manifest_json {
        let _ = write!(
            html,
            "<h2>Run manifest</h2>\n<script type=\"application/json\" id=\"manifest\">{}</script>\n<pre>{}</pre>\n",
            manifest.replace("</", "<\\/"),
            escape_html(manifest)
        );
    }
    html.push_str("</body>\n</html>\n");
    Ok(html)
}
