//! Sequence-index plot of the top medoid patterns as an SVG 1.1 document.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ingest::CategoryCatalog;
use crate::patterns::PatternCatalog;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("pattern catalog is empty")]
    EmptyCatalog,
    #[error("top_n must be between 1 and {available}, got {requested}")]
    TopN { requested: usize, available: usize },
}

/// Fill colours indexed by category position.
pub const PALETTE: [&str; 20] = [
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c", "#98df8a", "#d62728", "#ff9896", "#9467bd",
    "#c5b0d5", "#8c564b", "#c49c94", "#e377c2", "#f7b6d2", "#7f7f7f", "#c7c7c7", "#bcbd22", "#dbdb8d",
    "#17becf", "#9edae5",
];

pub const PLOT_WIDTH: f64 = 640.0;
pub const MAX_BAR_HEIGHT: f64 = 48.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 30.0;
const GAP: f64 = 8.0;
const LEGEND_WIDTH: f64 = 170.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn nice_step(max: f64) -> f64 {
    let raw = max / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// One horizontal stacked bar per pattern. Segment widths share a common
/// seconds scale; bar height is proportional to pattern weight.
pub fn render_pattern_plot(
    catalog: &PatternCatalog,
    top_n: usize,
    names: &CategoryCatalog,
) -> Result<String, PlotError> {
    if catalog.is_empty() {
        return Err(PlotError::EmptyCatalog);
    }
    if top_n == 0 || top_n > catalog.len() {
        return Err(PlotError::TopN {
            requested: top_n,
            available: catalog.len(),
        });
    }
    let shown = &catalog.patterns[..top_n];
    let max_secs = shown
        .iter()
        .map(|p| p.exemplar.total_secs())
        .fold(0.0, f64::max)
        .max(1.0);
    let max_weight = shown.iter().map(|p| p.weight).fold(0.0, f64::max);
    let x_scale = PLOT_WIDTH / max_secs;
    let height_of = |w: f64| {
        if max_weight > 0.0 {
            w / max_weight * MAX_BAR_HEIGHT
        } else {
            MAX_BAR_HEIGHT
        }
    };

    let bars_height: f64 = shown.iter().map(|p| height_of(p.weight) + GAP).sum();
    let axis_y = TOP + bars_height;
    let mut used: Vec<usize> = shown
        .iter()
        .flat_map(|p| p.exemplar.spells.iter().map(|s| s.state.index()))
        .collect();
    used.sort_unstable();
    used.dedup();
    let legend_height = used.len() as f64 * 18.0 + TOP;
    let width = LEFT + PLOT_WIDTH + 20.0 + LEGEND_WIDTH;
    let height = (axis_y + 50.0).max(legend_height + 10.0);

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(out, r#"<title>Top {top_n} medoid patterns</title>"#);

    let mut y = TOP;
    let _ = writeln!(out, r#"<g id="bars">"#);
    for (rank, p) in shown.iter().enumerate() {
        let h = height_of(p.weight);
        let _ = writeln!(
            out,
            r#"<g class="pattern" data-rank="{}" data-weight="{}"><title>{}</title>"#,
            rank + 1,
            p.weight,
            esc(&p.label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="end" dominant-baseline="middle">#{} ({:.1}%)</text>"#,
            LEFT - 6.0,
            y + h / 2.0,
            rank + 1,
            p.share * 100.0
        );
        let mut x = LEFT;
        for s in &p.exemplar.spells {
            let w = s.duration_secs * x_scale;
            let fill = PALETTE[s.state.index() % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<rect class="segment" x="{x:.6}" y="{y:.6}" width="{w:.6}" height="{h:.6}" fill="{fill}" stroke="white" stroke-width="0.5" data-secs="{:.3}"><title>{}: {:.0} s</title></rect>"#,
                s.duration_secs,
                esc(names.name(s.state)),
                s.duration_secs
            );
            if w >= 24.0 && h >= 10.0 {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" dominant-baseline="middle" font-size="8">{:.0}s</text>"#,
                    x + w / 2.0,
                    y + h / 2.0,
                    s.duration_secs
                );
            }
            x += w;
        }
        let _ = writeln!(out, "</g>");
        y += h + GAP;
    }
    let _ = writeln!(out, "</g>");

    // x axis in seconds
    let _ = writeln!(out, r#"<g id="axis" stroke="black">"#);
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{axis_y:.3}" x2="{:.3}" y2="{axis_y:.3}"/>"#,
        LEFT + PLOT_WIDTH
    );
    let step = nice_step(max_secs);
    let mut t = 0.0;
    while t <= max_secs + 1e-9 {
        let x = LEFT + t * x_scale;
        let _ = writeln!(
            out,
            r#"<line x1="{x:.3}" y1="{axis_y:.3}" x2="{x:.3}" y2="{:.3}"/><text x="{x:.3}" y="{:.3}" text-anchor="middle" stroke="none">{t}</text>"#,
            axis_y + 4.0,
            axis_y + 15.0
        );
        t += step;
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" stroke="none">duration (s)</text>"#,
        LEFT + PLOT_WIDTH / 2.0,
        axis_y + 32.0
    );
    let _ = writeln!(out, "</g>");

    let lx = LEFT + PLOT_WIDTH + 20.0;
    let _ = writeln!(out, r#"<g id="legend">"#);
    for (i, &c) in used.iter().enumerate() {
        let ly = TOP + i as f64 * 18.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{ly}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            PALETTE[c % PALETTE.len()],
            lx + 18.0,
            ly + 10.0,
            esc(names.names().get(c).map(String::as_str).unwrap_or("?"))
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(100.0), 20.0);
        assert_eq!(nice_step(7.0), 2.0);
        assert_eq!(nice_step(1000.0), 200.0);
    }

    #[test]
    fn empty_catalog_rejected() {
        let r = render_pattern_plot(&PatternCatalog::default(), 1, &CategoryCatalog::default());
        assert_eq!(r, Err(PlotError::EmptyCatalog));
    }
}
