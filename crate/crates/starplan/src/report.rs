//! Static report artifacts: CSV tables and SVG line charts. No server, no
//! interactivity; every file is plain data.

use serde::{Deserialize, Serialize};

use crate::training::RunLog;

/// One cell of the skill grid: the final evaluation of a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillGridRow {
    pub k: usize,
    pub m: usize,
    pub mode: String,
    pub seed: u64,
    pub accuracy: f64,
    pub skill: f64,
    pub n_samples: usize,
}

pub fn skill_grid_csv(rows: &[SkillGridRow]) -> String {
    let mut out = String::from("k,m,mode,seed,accuracy,skill,n_samples\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            r.k, r.m, r.mode, r.seed, r.accuracy, r.skill, r.n_samples
        ));
    }
    out
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

/// Minimal multi-series line chart. Axes are linear; x is the update index.
fn line_chart(series: &[Series], y_label: &str, y_max_hint: Option<f64>) -> String {
    let (w, h) = (640.0f64, 360.0f64);
    let (ml, mr, mt, mb) = (50.0, 10.0, 10.0, 30.0);
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .collect();
    let x_max = xs.iter().cloned().fold(1.0f64, f64::max);
    let y_max = y_max_hint.unwrap_or_else(|| ys.iter().cloned().fold(1e-9f64, f64::max) * 1.05);
    let sx = |x: f64| ml + x / x_max * (w - ml - mr);
    let sy = |y: f64| h - mb - (y / y_max).clamp(0.0, 1.0) * (h - mt - mb);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{ml}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"14\" y=\"{ymid}\" font-size=\"12\" transform=\"rotate(-90 14 {ymid})\" text-anchor=\"middle\">{y_label}</text>\n\
         <text x=\"{xmid}\" y=\"{xl}\" font-size=\"12\" text-anchor=\"middle\">update</text>\n",
        y0 = h - mb,
        x1 = w - mr,
        ymid = h / 2.0,
        xmid = (ml + w - mr) / 2.0,
        xl = h - 8.0,
    );
    // y-axis ticks at 0, max/2, max
    for frac in [0.0, 0.5, 1.0] {
        let v = y_max * frac;
        let y = sy(v);
        svg.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\
             <text x=\"{xt}\" y=\"{yt}\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>\n",
            x0 = ml - 4.0,
            xt = ml - 6.0,
            yt = y + 3.0,
        ));
    }
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.color,
            path.join(" ")
        ));
        let ly = mt + 14.0 * (i as f64 + 1.0);
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{lx2}\" y2=\"{ly}\" stroke=\"{c}\" stroke-width=\"2\"/>\
             <text x=\"{lt}\" y=\"{ty}\" font-size=\"11\">{label}</text>\n",
            lx = w - mr - 120.0,
            lx2 = w - mr - 100.0,
            c = s.color,
            lt = w - mr - 95.0,
            ty = ly + 3.5,
            label = s.label,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Train/val loss curves over updates.
pub fn loss_chart_svg(log: &RunLog) -> String {
    let train: Vec<(f64, f64)> = log
        .records
        .iter()
        .map(|r| (r.update as f64, r.train_loss))
        .collect();
    let val: Vec<(f64, f64)> = log
        .records
        .iter()
        .map(|r| (r.update as f64, r.val_loss))
        .collect();
    line_chart(
        &[
            Series {
                label: "train loss",
                color: "#1f77b4",
                points: train,
            },
            Series {
                label: "val loss",
                color: "#d62728",
                points: val,
            },
        ],
        "loss (nats)",
        None,
    )
}

/// Task- and token-accuracy curves over updates, fixed [0, 1] range.
pub fn accuracy_chart_svg(log: &RunLog) -> String {
    let acc: Vec<(f64, f64)> = log
        .records
        .iter()
        .map(|r| (r.update as f64, r.val_acc))
        .collect();
    let tok: Vec<(f64, f64)> = log
        .records
        .iter()
        .map(|r| (r.update as f64, r.token_acc))
        .collect();
    line_chart(
        &[
            Series {
                label: "task acc",
                color: "#2ca02c",
                points: acc,
            },
            Series {
                label: "token acc",
                color: "#9467bd",
                points: tok,
            },
        ],
        "accuracy",
        Some(1.0),
    )
}
