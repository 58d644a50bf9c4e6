//! Box-plot SVG emission, no plotting dependency.
//!
//! Boxes span the quartiles with a median line, whiskers reach the most
//! extreme data point within 1.5 IQR of the box, and anything beyond is
//! drawn as an outlier dot. Output is a pure function of the inputs: no
//! timestamps, no randomness, so reruns are byte-identical.

use srgd_core::metrics::quantile;
use std::fmt::Write;

#[derive(Debug, Clone)]
pub struct BoxStats {
    pub label: String,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lo_whisker: f64,
    pub hi_whisker: f64,
    pub outliers: Vec<f64>,
    /// Significance annotation drawn above the box ("*" or "n.s.").
    pub mark: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BoxGroup {
    pub label: String,
    pub boxes: Vec<BoxStats>,
}

/// Five-number summary of `values` with 1.5 IQR whiskers.
pub fn box_stats(label: &str, values: &[f64]) -> BoxStats {
    assert!(!values.is_empty(), "box of nothing");
    let q1 = quantile(values, 0.25).expect("nonempty");
    let median = quantile(values, 0.5).expect("nonempty");
    let q3 = quantile(values, 0.75).expect("nonempty");
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut outliers = Vec::new();
    for &v in values {
        if v < fence_lo || v > fence_hi {
            outliers.push(v);
        } else {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    outliers.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    BoxStats { label: label.into(), q1, median, q3, lo_whisker: lo, hi_whisker: hi, outliers, mark: None }
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a45e", "#b07aa1", "#e15759", "#76b7b2"];

const BOX_W: f64 = 34.0;
const BOX_GAP: f64 = 12.0;
const GROUP_GAP: f64 = 34.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 18.0;
const PLOT_TOP: f64 = 46.0;
const PLOT_BOT: f64 = 360.0;
const HEIGHT: f64 = 430.0;

fn fmt(v: f64) -> String {
    format!("{:.4}", v)
}

/// Renders grouped box plots; one group per evaluation condition, one box
/// per setting.
pub fn boxplot_svg(title: &str, ylabel: &str, groups: &[BoxGroup]) -> String {
    assert!(!groups.is_empty(), "no groups to plot");
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for b in groups.iter().flat_map(|g| &g.boxes) {
        lo = lo.min(b.lo_whisker).min(b.outliers.first().copied().unwrap_or(f64::INFINITY));
        hi = hi.max(b.hi_whisker).max(b.outliers.last().copied().unwrap_or(f64::NEG_INFINITY));
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = if hi > lo { 0.06 * (hi - lo) } else { 0.5 };
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| PLOT_BOT - (v - lo) / (hi - lo) * (PLOT_BOT - PLOT_TOP);

    let group_w = |g: &BoxGroup| g.boxes.len() as f64 * (BOX_W + BOX_GAP) - BOX_GAP;
    let width = MARGIN_L
        + groups.iter().map(group_w).sum::<f64>()
        + (groups.len() as f64 - 1.0) * GROUP_GAP
        + MARGIN_R;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" font-family=\"sans-serif\">",
        fmt(width), fmt(HEIGHT), fmt(width), fmt(HEIGHT)
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
        fmt(width / 2.0),
        title
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        fmt((PLOT_TOP + PLOT_BOT) / 2.0),
        fmt((PLOT_TOP + PLOT_BOT) / 2.0),
        ylabel
    );

    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            fmt(MARGIN_L - 4.0),
            fmt(yy),
            fmt(width - MARGIN_R),
            fmt(yy)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN_L - 8.0),
            fmt(yy + 3.5),
            fmt(v)
        );
    }

    let mut x0 = MARGIN_L;
    for g in groups {
        for (bi, b) in g.boxes.iter().enumerate() {
            let cx = x0 + BOX_W / 2.0;
            let color = PALETTE[bi % PALETTE.len()];
            let _ = writeln!(
                s,
                "<line x1=\"{cx}\" y1=\"{}\" x2=\"{cx}\" y2=\"{}\" stroke=\"#444444\"/>",
                fmt(y(b.lo_whisker)),
                fmt(y(b.q1)),
                cx = fmt(cx)
            );
            let _ = writeln!(
                s,
                "<line x1=\"{cx}\" y1=\"{}\" x2=\"{cx}\" y2=\"{}\" stroke=\"#444444\"/>",
                fmt(y(b.q3)),
                fmt(y(b.hi_whisker)),
                cx = fmt(cx)
            );
            for (wv, half) in [(b.lo_whisker, 8.0), (b.hi_whisker, 8.0)] {
                let _ = writeln!(
                    s,
                    "<line x1=\"{}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#444444\"/>",
                    fmt(cx - half),
                    fmt(cx + half),
                    yy = fmt(y(wv))
                );
            }
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" fill-opacity=\"0.65\" stroke=\"#333333\"/>",
                fmt(x0),
                fmt(y(b.q3)),
                fmt(BOX_W),
                fmt((y(b.q1) - y(b.q3)).max(0.5)),
                color
            );
            let _ = writeln!(
                s,
                "<line x1=\"{}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#111111\" stroke-width=\"1.6\"/>",
                fmt(x0),
                fmt(x0 + BOX_W),
                yy = fmt(y(b.median))
            );
            for &o in &b.outliers {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2.4\" fill=\"none\" stroke=\"#555555\"/>",
                    fmt(cx),
                    fmt(y(o))
                );
            }
            if let Some(mark) = &b.mark {
                let top = y(b.hi_whisker).min(y(b.q3));
                let _ = writeln!(
                    s,
                    "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
                    fmt(cx),
                    fmt(top - 6.0),
                    mark
                );
            }
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
                fmt(cx),
                fmt(PLOT_BOT + 16.0),
                b.label
            );
            x0 += BOX_W + BOX_GAP;
        }
        let gw = group_w(g);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-weight=\"bold\">{}</text>",
            fmt(x0 - BOX_GAP - gw / 2.0),
            fmt(PLOT_BOT + 36.0),
            g.label
        );
        x0 += GROUP_GAP - BOX_GAP;
    }
    s.push_str("</svg>\n");
    s
}
