//! Report generation: CSV tables and SVG scaling plots derived purely
//! from pipeline artifacts — nothing is re-measured here.
//!
//! Numeric cells use the shortest round-trip `f64` formatting, so
//! infinity renders as `inf` and parses back losslessly.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::bench::{summarize, ArchSummary, BenchRecord};
use crate::fit::{efficiency_ratio, FitResult, RatioRow};
use crate::model::Architecture;
use crate::pipeline::{
    ArchAnalysis, FitsDocument, Measure, RecordsDocument, ReprDocument, ShiftsDocument,
};

/// Errors assembling a report.
#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("missing artifact {path} (run the pipeline first)")]
    MissingArtifact { path: PathBuf },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(String),
}

// ===== CSV codec =====

/// Shortest round-trip rendering of a numeric cell (`inf`, `NaN`, and
/// finite values all parse back with `str::parse::<f64>`).
#[must_use]
pub fn number_cell(v: f64) -> String {
    format!("{v}")
}

fn encode_field(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Encodes a header plus rows, quoting only where needed.
#[must_use]
pub fn encode_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let mut push_row = |fields: Vec<String>| {
        let line: Vec<String> = fields.iter().map(|f| encode_field(f)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    };
    push_row(header.iter().map(|s| (*s).to_string()).collect());
    for row in rows {
        assert_eq!(row.len(), header.len(), "ragged csv row");
        push_row(row.clone());
    }
    out
}

/// Parses CSV text (as produced by [`encode_csv`]) into rows of fields,
/// header row included.
pub fn parse_csv(text: &str) -> Result<Vec<Vec<String>>, ReportError> {
    let mut rows = Vec::new();
    let mut row: Vec<String> = Vec::new();
    let mut field = String::new();
    let mut quoted = false;
    let mut chars = text.chars().peekable();
    let mut saw_any = false;
    while let Some(c) = chars.next() {
        saw_any = true;
        if quoted {
            match c {
                '"' if chars.peek() == Some(&'"') => {
                    chars.next();
                    field.push('"');
                }
                '"' => quoted = false,
                other => field.push(other),
            }
            continue;
        }
        match c {
            '"' if field.is_empty() => quoted = true,
            '"' => return Err(ReportError::Csv("stray quote inside field".to_string())),
            ',' => row.push(std::mem::take(&mut field)),
            '\r' => {}
            '\n' => {
                row.push(std::mem::take(&mut field));
                rows.push(std::mem::take(&mut row));
            }
            other => field.push(other),
        }
    }
    if quoted {
        return Err(ReportError::Csv("unterminated quoted field".to_string()));
    }
    if !field.is_empty() || !row.is_empty() {
        row.push(field);
        rows.push(row);
    }
    if !saw_any {
        return Err(ReportError::Csv("empty document".to_string()));
    }
    let width = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(ReportError::Csv(format!(
            "row with {} fields in a {width}-column table",
            bad.len()
        )));
    }
    Ok(rows)
}

// ===== Tables =====

/// Ratio table: length, attention/state-space memory ratio, time ratio.
#[must_use]
pub fn ratios_csv(rows: &[RatioRow]) -> String {
    encode_csv(
        &["n", "mem_ratio", "time_ratio"],
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    number_cell(r.mem_ratio),
                    number_cell(r.time_ratio),
                ]
            })
            .collect::<Vec<_>>(),
    )
}

fn arch_summary(records: &[BenchRecord], architecture: Architecture) -> Option<ArchSummary> {
    let subset: Vec<BenchRecord> = records
        .iter()
        .filter(|r| r.architecture == architecture)
        .cloned()
        .collect();
    if subset.is_empty() {
        return None;
    }
    summarize(&subset).ok().and_then(|mut v| v.pop())
}

const NA: &str = "NA";

/// Statistical summary table: one metric per row, one architecture per
/// column. Cells that do not apply (or whose architecture produced no
/// finite measurements) read `NA`.
#[must_use]
pub fn benchmark_summary_csv(records: &[BenchRecord], fits: &FitsDocument) -> String {
    let t = arch_summary(records, Architecture::Transformer);
    let m = arch_summary(records, Architecture::Mamba);
    let cell = |s: &Option<ArchSummary>, f: &dyn Fn(&ArchSummary) -> String| match s {
        Some(summary) => f(summary),
        None => NA.to_string(),
    };
    let float_row = |name: &str, f: &dyn Fn(&ArchSummary) -> f64| {
        vec![
            name.to_string(),
            cell(&t, &|s| number_cell(f(s))),
            cell(&m, &|s| number_cell(f(s))),
        ]
    };
    let r2 = |architecture, measure| {
        fits.fit(architecture, measure)
            .map_or(NA.to_string(), |f| number_cell(f.r_squared))
    };
    let rows = vec![
        float_row("mean_memory_gb", &|s| s.mean_memory_gb),
        float_row("std_memory_gb", &|s| s.std_memory_gb),
        float_row("mean_time_ms", &|s| s.mean_time_ms),
        float_row("std_time_ms", &|s| s.std_time_ms),
        vec![
            "max_sequence_length".to_string(),
            cell(&t, &|s| s.max_n_completed.to_string()),
            cell(&m, &|s| s.max_n_completed.to_string()),
        ],
        float_row("oom_fraction", &|s| s.oom_fraction),
        vec![
            "r_squared_quadratic_fit".to_string(),
            r2(Architecture::Transformer, Measure::Memory),
            NA.to_string(),
        ],
        vec![
            "r_squared_linear_fit".to_string(),
            NA.to_string(),
            r2(Architecture::Mamba, Measure::Memory),
        ],
    ];
    encode_csv(&["metric", "transformer", "mamba"], &rows)
}

fn find_analysis(doc: &ReprDocument, architecture: Architecture) -> Option<&ArchAnalysis> {
    doc.analyses
        .iter()
        .find(|a| a.architecture == architecture)
}

/// Layer dynamics table: per block layer (1-indexed), the state-space
/// stack's mean velocity and final-token norm next to the attention
/// stack's per-layer entropy and distance.
#[must_use]
pub fn layer_dynamics_csv(doc: &ReprDocument) -> String {
    let mamba = find_analysis(doc, Architecture::Mamba);
    let transformer = find_analysis(doc, Architecture::Transformer);
    // Entry 0 of the state list is the embedding; blocks follow.
    let mamba_blocks = mamba.map_or(0, |a| a.state.len().saturating_sub(1));
    let attn_layers = transformer
        .and_then(|a| a.attention.as_ref())
        .map_or(0, |att| att.entropy.per_layer.len());
    let layers = mamba_blocks.max(attn_layers);
    let rows: Vec<Vec<String>> = (1..=layers)
        .map(|layer| {
            let ssm = mamba.and_then(|a| a.state.get(layer));
            let attn = transformer.and_then(|a| a.attention.as_ref());
            vec![
                layer.to_string(),
                ssm.map_or(NA.to_string(), |s| number_cell(s.velocity.mean)),
                ssm.map_or(NA.to_string(), |s| number_cell(s.final_token_norm)),
                attn.and_then(|a| a.entropy.per_layer.get(layer - 1))
                    .map_or(NA.to_string(), |&v| number_cell(v)),
                attn.and_then(|a| a.distance.per_layer.get(layer - 1))
                    .map_or(NA.to_string(), |&v| number_cell(v)),
            ]
        })
        .collect();
    encode_csv(
        &[
            "layer",
            "ssm_velocity",
            "ssm_norm",
            "attn_entropy",
            "attn_distance",
        ],
        &rows,
    )
}

/// Context-utilization table comparing the gradient-based effective range
/// of the state-space stack with the attention span of the transformer.
/// The advantage column is the ratio in whichever direction favors a
/// larger value being better (consistency is a dispersion, so it inverts).
#[must_use]
pub fn context_utilization_csv(doc: &ReprDocument) -> String {
    let context = find_analysis(doc, Architecture::Mamba).and_then(|a| a.context.as_ref());
    let span = find_analysis(doc, Architecture::Transformer)
        .and_then(|a| a.attention.as_ref())
        .map(|a| &a.span);
    let row = |metric: &str, ssm: Option<f64>, trans: Option<f64>, invert: bool| {
        let advantage = match (ssm, trans) {
            (Some(s), Some(t)) => {
                let v = if invert { t / s } else { s / t };
                number_cell(v)
            }
            _ => NA.to_string(),
        };
        vec![
            metric.to_string(),
            ssm.map_or(NA.to_string(), number_cell),
            trans.map_or(NA.to_string(), number_cell),
            advantage,
        ]
    };
    let rows = vec![
        row(
            "mean_effective_range",
            context.map(|c| c.mean_range),
            span.map(|s| s.mean),
            false,
        ),
        row(
            "fraction_of_sequence_used",
            context.map(|c| c.fraction_of_sequence),
            span.map(|s| s.mean_fraction),
            false,
        ),
        row(
            "consistency_cov",
            context.map(|c| c.cov),
            span.map(|s| s.cov),
            true,
        ),
    ];
    encode_csv(&["metric", "ssm", "transformer", "advantage"], &rows)
}

/// Shift-detection table: one row per architecture's report.
#[must_use]
pub fn shift_detection_csv(doc: &ShiftsDocument) -> String {
    let rows: Vec<Vec<String>> = doc
        .reports
        .iter()
        .map(|r| {
            vec![
                r.architecture.to_string(),
                number_cell(r.metrics.auc),
                number_cell(r.metrics.f1_default),
                number_cell(r.metrics.f1_optimal),
                number_cell(r.metrics.tpr_at_low_fpr),
            ]
        })
        .collect();
    encode_csv(
        &[
            "model",
            "auc_roc",
            "f1_score",
            "f1_at_optimal",
            "tpr_at_0_1_fpr",
        ],
        &rows,
    )
}

// ===== SVG plots =====

fn arch_color(architecture: Architecture) -> &'static str {
    match architecture {
        Architecture::Transformer => "#c0392b",
        Architecture::Mamba => "#2980b9",
    }
}

struct LogMap {
    lo: f64,
    hi: f64,
    out_lo: f64,
    out_hi: f64,
}

impl LogMap {
    fn new(values: &[f64], out_lo: f64, out_hi: f64) -> LogMap {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            if v > 0.0 && v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            lo = 1.0;
            hi = 10.0;
        }
        if lo == hi {
            lo /= 2.0;
            hi *= 2.0;
        }
        LogMap {
            lo: lo.ln(),
            hi: hi.ln(),
            out_lo,
            out_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        let t = (v.ln() - self.lo) / (self.hi - self.lo);
        self.out_lo + t * (self.out_hi - self.out_lo)
    }
}

fn fmt_coord(v: f64) -> String {
    format!("{:.2}", v)
}

/// One architecture's plotted data.
struct Series {
    architecture: Architecture,
    /// Finite measured cells (n, value).
    points: Vec<(f64, f64)>,
    /// Fitted curve to draw, if one was produced.
    fit: Option<FitResult>,
    /// Smallest length that ran out of budget, if any.
    oom_frontier: Option<f64>,
}

fn svg_plot(title: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const L: f64 = 80.0;
    const R: f64 = 700.0;
    const T: f64 = 50.0;
    const B: f64 = 420.0;

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(n, v) in &s.points {
            xs.push(n);
            ys.push(v);
        }
        if let Some(n) = s.oom_frontier {
            xs.push(n);
        }
    }
    let x_map = LogMap::new(&xs, L, R);
    // Fitted-curve samples participate in the y range.
    let mut y_extent = ys.clone();
    for s in series {
        if let (Some(fit), Some((&min_x, &max_x))) = (
            &s.fit,
            xs.iter()
                .min_by(|a, b| a.total_cmp(b))
                .zip(xs.iter().max_by(|a, b| a.total_cmp(b))),
        ) {
            for k in 0..=16 {
                let n = min_x * (max_x / min_x).powf(k as f64 / 16.0);
                let v = fit.evaluate(n);
                if v > 0.0 && v.is_finite() {
                    y_extent.push(v);
                }
            }
        }
    }
    let y_map = LogMap::new(&y_extent, B, T);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"17\" fill=\"#222\">{title}</text>\n",
        (L + R) / 2.0
    ));

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{L}\" y1=\"{B}\" x2=\"{R}\" y2=\"{B}\" stroke=\"#444\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{B}\" stroke=\"#444\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#222\">sequence length N (log)</text>\n",
        (L + R) / 2.0,
        B + 40.0
    ));
    svg.push_str(&format!(
        "<text x=\"22\" y=\"{}\" text-anchor=\"middle\" fill=\"#222\" \
         transform=\"rotate(-90 22 {})\">{y_label} (log)</text>\n",
        (T + B) / 2.0,
        (T + B) / 2.0
    ));

    // X ticks at each measured length.
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for &n in &ticks {
        let x = x_map.map(n);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{T}\" x2=\"{x}\" y2=\"{B}\" stroke=\"#e4e4e4\"/>\n",
            x = fmt_coord(x)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#222\">{}</text>\n",
            fmt_coord(x),
            B + 18.0,
            n as u64
        ));
    }
    // Y ticks at powers of ten inside the range.
    let lo_exp = (y_map.lo / std::f64::consts::LN_10).floor() as i32;
    let hi_exp = (y_map.hi / std::f64::consts::LN_10).ceil() as i32;
    let step = (((hi_exp - lo_exp) as usize).max(1)).div_ceil(6).max(1) as i32;
    let mut exp = lo_exp;
    while exp <= hi_exp {
        let v = 10f64.powi(exp);
        if v.ln() >= y_map.lo - 1e-9 && v.ln() <= y_map.hi + 1e-9 {
            let y = y_map.map(v);
            svg.push_str(&format!(
                "<line x1=\"{L}\" y1=\"{y}\" x2=\"{R}\" y2=\"{y}\" stroke=\"#e4e4e4\"/>\n",
                y = fmt_coord(y)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#222\">1e{exp}</text>\n",
                L - 8.0,
                fmt_coord(y + 4.0)
            ));
        }
        exp += step;
    }

    // Series: fitted polyline, measured points, OOM frontier.
    let (min_x, max_x) = match (
        ticks.first().copied(),
        ticks.last().copied(),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => (1.0, 10.0),
    };
    for s in series {
        let color = arch_color(s.architecture);
        let mut polyline: Vec<String> = Vec::new();
        if let Some(fit) = &s.fit {
            for k in 0..=48 {
                let n = min_x * (max_x / min_x).powf(k as f64 / 48.0);
                let v = fit.evaluate(n);
                if v > 0.0 && v.is_finite() {
                    polyline.push(format!(
                        "{},{}",
                        fmt_coord(x_map.map(n)),
                        fmt_coord(y_map.map(v))
                    ));
                }
            }
        } else {
            // No fit: connect the measured points so the series still
            // draws as a line.
            for &(n, v) in &s.points {
                polyline.push(format!(
                    "{},{}",
                    fmt_coord(x_map.map(n)),
                    fmt_coord(y_map.map(v))
                ));
            }
        }
        if polyline.len() >= 2 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                polyline.join(" ")
            ));
        }
        for &(n, v) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{color}\">\
                 <title>{arch} N={n}: {v}</title></circle>\n",
                fmt_coord(x_map.map(n)),
                fmt_coord(y_map.map(v)),
                arch = s.architecture,
                n = n as u64,
            ));
        }
        if let Some(n) = s.oom_frontier {
            let x = fmt_coord(x_map.map(n));
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{T}\" x2=\"{x}\" y2=\"{B}\" stroke=\"{color}\" \
                 stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>\n"
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} OOM ≥ {}</text>\n",
                x,
                T + 14.0 + if s.architecture == Architecture::Mamba { 16.0 } else { 0.0 },
                s.architecture,
                n as u64
            ));
        }
    }

    // Legend.
    for (i, s) in series.iter().enumerate() {
        let y = T + 20.0 + 20.0 * i as f64;
        let color = arch_color(s.architecture);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            R - 150.0,
            R - 120.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"#222\">{}</text>\n",
            R - 112.0,
            y + 4.0,
            s.architecture
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn build_series(
    records: &[BenchRecord],
    fits: &FitsDocument,
    measure: Measure,
) -> Vec<Series> {
    [Architecture::Transformer, Architecture::Mamba]
        .into_iter()
        .filter(|&a| records.iter().any(|r| r.architecture == a))
        .map(|architecture| {
            let cells: Vec<&BenchRecord> = records
                .iter()
                .filter(|r| r.architecture == architecture)
                .collect();
            let points = cells
                .iter()
                .filter(|r| !r.oom)
                .map(|r| {
                    (
                        r.n as f64,
                        match measure {
                            Measure::Memory => r.peak_memory_gb,
                            Measure::Time => r.mean_time_ms,
                        },
                    )
                })
                .collect();
            Series {
                architecture,
                points,
                fit: fits.fit(architecture, measure).cloned(),
                oom_frontier: cells
                    .iter()
                    .filter(|r| r.oom)
                    .map(|r| r.n as f64)
                    .fold(None, |acc: Option<f64>, n| {
                        Some(acc.map_or(n, |a| a.min(n)))
                    }),
            }
        })
        .collect()
}

/// Memory scaling plot (peak GiB vs N, log-log).
#[must_use]
pub fn memory_plot_svg(records: &[BenchRecord], fits: &FitsDocument) -> String {
    svg_plot(
        "Peak accounted memory vs sequence length",
        "peak memory (GiB)",
        &build_series(records, fits, Measure::Memory),
    )
}

/// Latency scaling plot (mean forward ms vs N, log-log).
#[must_use]
pub fn time_plot_svg(records: &[BenchRecord], fits: &FitsDocument) -> String {
    svg_plot(
        "Mean forward latency vs sequence length",
        "mean time (ms)",
        &build_series(records, fits, Measure::Time),
    )
}

// ===== Assembly =====

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ReportError::MissingArtifact {
                path: path.to_path_buf(),
            })
        }
        Err(source) => {
            return Err(ReportError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    serde_json::from_str(&text).map_err(|source| ReportError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn write_out(path: &Path, body: &str) -> Result<(), ReportError> {
    std::fs::write(path, body).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the artifacts under `in_dir` and writes the five tables plus two
/// plots under `out_dir`, returning the paths written.
pub fn emit_report(in_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let records: RecordsDocument = read_json(&in_dir.join("records.json"))?;
    let fits: FitsDocument = read_json(&in_dir.join("fits").join("fits.json"))?;
    let repr: ReprDocument = read_json(&in_dir.join("repr.json"))?;
    let shifts: ShiftsDocument = read_json(&in_dir.join("shifts.json"))?;
    let manifest = in_dir.join("manifest.json");
    if !manifest.exists() {
        return Err(ReportError::MissingArtifact { path: manifest });
    }
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let outputs: Vec<(&str, String)> = vec![
        (
            "table1_efficiency_ratios.csv",
            ratios_csv(&efficiency_ratio(&records.records)),
        ),
        (
            "table2_benchmark_summary.csv",
            benchmark_summary_csv(&records.records, &fits),
        ),
        ("table3_layer_dynamics.csv", layer_dynamics_csv(&repr)),
        (
            "table4_context_utilization.csv",
            context_utilization_csv(&repr),
        ),
        ("table5_shift_detection.csv", shift_detection_csv(&shifts)),
        ("memory_vs_n.svg", memory_plot_svg(&records.records, &fits)),
        ("time_vs_n.svg", time_plot_svg(&records.records, &fits)),
    ];
    let mut written = Vec::with_capacity(outputs.len());
    for (name, body) in outputs {
        let path = out_dir.join(name);
        write_out(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}
