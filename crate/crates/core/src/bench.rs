//! Latency and memory grids over (N, M) and their reports.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{fit, FitOptions, Mode, Phase, TimingRecord};
use crate::metrics::{mean, roc_auc_ovo, std_dev, OvoWeighting};
use crate::model::TacoModel;
use crate::table::Table;

pub const CSV_HEADER: &str = "mode,N,M,K,cached,phase,wall_ms_mean,wall_ms_std,peak_bytes,oom,auc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchGrid {
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub modes: Vec<Mode>,
    pub rate: f64,
    /// Passes over the test set; the first call of the first pass is the
    /// warmup reported as `first_predict`.
    pub repetitions: usize,
    /// Number of batches the test set is split into (1, 10 and 100 in the
    /// streaming scenarios).
    pub batches: usize,
    pub test_rows: usize,
    pub kv_cache: bool,
    pub memory_limit: Option<usize>,
    /// Runs cells on several threads. Timings then interfere, so this is
    /// meant for accuracy-only sweeps.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            ns: vec![1024, 4096],
            ms: vec![16, 64],
            modes: vec![Mode::Taco, Mode::Pot],
            rate: 0.04,
            repetitions: 1,
            batches: 10,
            test_rows: 500,
            kv_cache: true,
            memory_limit: None,
            parallel: false,
            seed: 0,
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ms.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("benchmark grid axes must be nonempty".into()));
        }
        if self.repetitions == 0 || self.batches == 0 || self.test_rows < self.batches {
            return Err(Error::Config(
                "benchmark needs repetitions >= 1 and at least one test row per batch".into(),
            ));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("compression rate {} outside (0, 1]", self.rate)));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(usize, usize, Mode)> {
        let mut out = Vec::new();
        for &n in &self.ns {
            for &m in &self.ms {
                for &mode in &self.modes {
                    out.push((n, m, mode));
                }
            }
        }
        out
    }
}

/// Linearly separable-ish binary data: standard normal features, label from
/// the sign of a random projection plus noise.
pub fn synthetic_table(n: usize, m: usize, rng: &mut impl Rng) -> Table {
    let w: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (m as f64).sqrt();
        labels.push(usize::from(s + 0.5 * noise > 0.0));
        rows.push(x);
    }
    // Guarantee both classes so AUC is defined.
    labels[0] = 0;
    labels[n.min(2) - 1] = 1;
    Table::from_numeric(&rows, Some((&labels, 2))).expect("rectangular by construction")
}

/// Measurements of one (N, M, mode) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: Mode,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub cached: bool,
    pub oom: bool,
    pub fit: Option<TimingRecord>,
    /// Wall time of every predict call in submission order.
    pub predict_ms: Vec<f64>,
    pub predict_peak_bytes: usize,
    pub auc: Option<f64>,
}

/// First call and mean/std of the remaining calls.
pub fn split_first(times: &[f64]) -> (Option<f64>, Option<(f64, f64)>) {
    match times {
        [] => (None, None),
        [first] => (Some(*first), None),
        [first, rest @ ..] => (Some(*first), Some((mean(rest), std_dev(rest)))),
    }
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: Mode,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub cached: bool,
    pub phase: Phase,
    pub wall_ms_mean: Option<f64>,
    pub wall_ms_std: Option<f64>,
    pub peak_bytes: Option<usize>,
    pub oom: bool,
    pub auc: Option<f64>,
}

impl CellResult {
    /// Fit, first-predict and subsequent-predict rows of this cell.
    pub fn rows(&self) -> Vec<ReportRow> {
        let (first, rest) = split_first(&self.predict_ms);
        let row = |phase, mean: Option<f64>, std: Option<f64>, peak: Option<usize>| ReportRow {
            mode: self.mode,
            n: self.n,
            m: self.m,
            k: self.k,
            cached: self.cached,
            phase,
            wall_ms_mean: mean,
            wall_ms_std: std,
            peak_bytes: peak,
            oom: self.oom,
            auc: self.auc,
        };
        let predict_peak = (!self.oom).then_some(self.predict_peak_bytes);
        vec![
            row(
                Phase::Fit,
                self.fit.as_ref().map(|r| r.wall_ms),
                self.fit.as_ref().map(|_| 0.0),
                self.fit.as_ref().map(|r| r.peak_bytes),
            ),
            row(Phase::FirstPredict, first, first.map(|_| 0.0), predict_peak),
            row(Phase::SubsequentPredict, rest.map(|r| r.0), rest.map(|r| r.1), predict_peak),
        ]
    }
}

/// Runs one cell. Capacity errors become an OOM-flagged result; anything
/// else is returned.
pub fn run_cell(grid: &BenchGrid, model: &TacoModel, n: usize, m: usize, mode: Mode) -> Result<CellResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed ^ ((n as u64) << 32) ^ m as u64);
    let data = synthetic_table(n + grid.test_rows, m, &mut rng);
    let train = data.slice_rows(0, n);
    let test = data.slice_rows(n, n + grid.test_rows);
    let opts = FitOptions {
        mode,
        rate: grid.rate,
        kv_cache: grid.kv_cache && mode != Mode::Knn,
        memory_limit: grid.memory_limit,
        seed: grid.seed,
        ..FitOptions::default()
    };
    let mut result = CellResult {
        mode,
        n,
        m,
        k: 0,
        cached: opts.kv_cache,
        oom: false,
        fit: None,
        predict_ms: Vec::new(),
        predict_peak_bytes: 0,
        auc: None,
    };
    let (state, fit_rec) = match fit(model, &train, &opts) {
        Ok(v) => v,
        Err(Error::Capacity { .. }) => {
            result.oom = true;
            return Ok(result);
        }
        Err(e) => return Err(e),
    };
    result.k = state.context_rows();
    result.fit = Some(fit_rec);
    let labels = test.labels().expect("synthetic data is labeled").to_vec();
    let bounds: Vec<(usize, usize)> = (0..grid.batches)
        .map(|b| (b * grid.test_rows / grid.batches, (b + 1) * grid.test_rows / grid.batches))
        .collect();
    let mut probs = Vec::with_capacity(grid.test_rows * 2);
    for rep in 0..grid.repetitions {
        for &(s, e) in &bounds {
            match state.predict(model, &test.slice_rows(s, e)) {
                Ok((p, rec)) => {
                    result.predict_ms.push(rec.wall_ms);
                    result.predict_peak_bytes = result.predict_peak_bytes.max(rec.peak_bytes);
                    if rep == 0 {
                        probs.extend_from_slice(p.data());
                    }
                }
                Err(Error::Capacity { .. }) => {
                    result.oom = true;
                    return Ok(result);
                }
                Err(e) => return Err(e),
            }
        }
    }
    result.auc = Some(roc_auc_ovo(&probs, 2, &labels, OvoWeighting::Macro)?);
    Ok(result)
}

fn append_rows(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_data()?;
    Ok(())
}

/// Runs every cell of the grid. When `results` is given, each finished
/// cell's rows are appended and synced before the next cell starts, so an
/// interrupted run leaves only whole cells on disk.
pub fn run_grid(grid: &BenchGrid, model: &TacoModel, results: Option<&Path>) -> Result<Vec<CellResult>> {
    grid.validate()?;
    let cells = grid.cells();
    if grid.parallel {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut out: Vec<Option<Result<CellResult>>> = (0..cells.len()).map(|_| None).collect();
        for (chunk_cells, chunk_out) in cells.chunks(threads).zip(out.chunks_mut(threads)) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk_cells
                    .iter()
                    .map(|&(n, m, mode)| s.spawn(move || run_cell(grid, model, n, m, mode)))
                    .collect();
                for (slot, h) in chunk_out.iter_mut().zip(handles) {
                    *slot = Some(h.join().expect("benchmark worker panicked"));
                }
            });
        }
        let out: Vec<CellResult> = out.into_iter().map(|r| r.expect("every cell ran")).collect::<Result<_>>()?;
        if let Some(path) = results {
            for c in &out {
                append_rows(path, &c.rows())?;
            }
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(cells.len());
    for (n, m, mode) in cells {
        log::info!("bench cell mode={mode} N={n} M={m}");
        let cell = run_cell(grid, model, n, m, mode)?;
        if let Some(path) = results {
            append_rows(path, &cell.rows())?;
        }
        out.push(cell);
    }
    Ok(out)
}

/// Parses a results CSV.
pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
    SvgHeatmap,
    SvgLines,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg-heatmap" => Ok(Self::SvgHeatmap),
            "svg-lines" => Ok(Self::SvgLines),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Renders the report in `format`. Output bytes depend only on `cells`.
pub fn render_report(cells: &[CellResult], format: ReportFormat) -> Result<String> {
    if cells.is_empty() {
        return Err(Error::Data("no benchmark results to report".into()));
    }
    let rows: Vec<ReportRow> = cells.iter().flat_map(CellResult::rows).collect();
    match format {
        ReportFormat::Csv => rows_to_csv(&rows),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(&rows)? + "\n"),
        ReportFormat::SvgHeatmap => Ok(heatmap_svg(cells)),
        ReportFormat::SvgLines => Ok(lines_svg(cells)),
    }
}

pub fn emit_report(cells: &[CellResult], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(cells, format)?;
    File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

fn sorted_unique(xs: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = xs.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn modes_in_order(cells: &[CellResult]) -> Vec<Mode> {
    let mut modes = Vec::new();
    for c in cells {
        if !modes.contains(&c.mode) {
            modes.push(c.mode);
        }
    }
    modes
}

/// Representative predict time of a cell: subsequent mean, else the first call.
fn cell_time(c: &CellResult) -> Option<f64> {
    match split_first(&c.predict_ms) {
        (_, Some((m, _))) => Some(m),
        (first, None) => first,
    }
}

/// Blue (fast) to red (slow) on a log scale between `lo` and `hi`.
fn heat_color(t: f64, lo: f64, hi: f64) -> String {
    let x = if hi > lo { ((t.ln() - lo.ln()) / (hi.ln() - lo.ln())).clamp(0.0, 1.0) } else { 0.5 };
    let r = (40.0 + 215.0 * x).round() as u8;
    let b = (255.0 - 215.0 * x).round() as u8;
    format!("#{r:02x}50{b:02x}")
}

const CELL: usize = 64;
const MARGIN: usize = 70;

fn heatmap_svg(cells: &[CellResult]) -> String {
    let ns = sorted_unique(cells.iter().map(|c| c.n));
    let ms = sorted_unique(cells.iter().map(|c| c.m));
    let modes = modes_in_order(cells);
    let times: Vec<f64> = cells.iter().filter_map(cell_time).filter(|t| *t > 0.0).collect();
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(0.0, f64::max);
    let panel_w = MARGIN + ms.len() * CELL + 20;
    let width = panel_w * modes.len();
    let height = MARGIN + ns.len() * CELL + 40;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    s.push_str(
        r##"<defs><pattern id="oom" width="8" height="8" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><rect width="8" height="8" fill="#000"/><line x1="0" y1="0" x2="0" y2="8" stroke="#888" stroke-width="3"/></pattern></defs>"##,
    );
    s.push('\n');
    for (p, mode) in modes.iter().enumerate() {
        let x0 = p * panel_w + MARGIN;
        let _ = writeln!(s, r#"<text x="{}" y="20" font-weight="bold">{mode}</text>"#, x0);
        for (j, m) in ms.iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{}" y="{}">M={m}</text>"#, x0 + j * CELL + 8, MARGIN - 8);
        }
        for (i, n) in ns.iter().enumerate() {
            let y = MARGIN + i * CELL;
            let _ = writeln!(s, r#"<text x="{}" y="{}">N={n}</text>"#, p * panel_w + 4, y + CELL / 2);
            for (j, m) in ms.iter().enumerate() {
                let x = x0 + j * CELL;
                let Some(c) = cells.iter().find(|c| c.mode == *mode && c.n == *n && c.m == *m) else {
                    continue;
                };
                match (c.oom, cell_time(c)) {
                    (true, _) | (_, None) => {
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="url(#oom)" data-oom="true"/>"#
                        );
                        let _ = writeln!(s, r##"<text x="{}" y="{}" fill="#fff">OOM</text>"##, x + 18, y + CELL / 2);
                    }
                    (false, Some(t)) => {
                        let color = heat_color(t.max(lo), lo, hi);
                        let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{color}"/>"#);
                        let _ = writeln!(s, r##"<text x="{}" y="{}" fill="#fff">{t:.1}ms</text>"##, x + 6, y + CELL / 2);
                    }
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Running total of predict call times.
pub fn cumulative(times: &[f64]) -> Vec<f64> {
    times
        .iter()
        .scan(0.0, |acc, t| {
            *acc += t;
            Some(*acc)
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn lines_svg(cells: &[CellResult]) -> String {
    let (width, height, pad) = (640.0, 400.0, 50.0);
    let series: Vec<(String, Vec<f64>)> = cells
        .iter()
        .filter(|c| !c.oom && !c.predict_ms.is_empty())
        .map(|c| (format!("{} N={} M={}", c.mode, c.n, c.m), cumulative(&c.predict_ms)))
        .collect();
    let max_x = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2) - 1;
    let max_y = series.iter().filter_map(|(_, v)| v.last().copied()).fold(1e-9, f64::max);
    let px = |i: usize| pad + (width - 2.0 * pad) * i as f64 / max_x as f64;
    let py = |v: f64| height - pad - (height - 2.0 * pad) * v / max_y;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r##"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="#000"/>"##,
        height - pad,
        width - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}">batch</text>"#, width / 2.0, height - 15.0);
    let _ = writeln!(s, r#"<text x="5" y="{}">cumulative ms (max {max_y:.1})</text>"#, pad - 15.0);
    for (idx, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let points: Vec<String> = ys.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            width - pad - 150.0,
            pad + 14.0 * idx as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn fake(mode: Mode, n: usize, m: usize, oom: bool, times: Vec<f64>) -> CellResult {
        CellResult {
            mode,
            n,
            m,
            k: n / 25,
            cached: true,
            oom,
            fit: None,
            predict_ms: if oom { vec![] } else { times },
            predict_peak_bytes: 1024,
            auc: (!oom).then_some(0.8125),
        }
    }

    #[test]
    fn subsequent_mean_excludes_first_call() {
        let (first, rest) = split_first(&[1000.0, 2.0, 4.0]);
        assert_eq!(first, Some(1000.0));
        assert_eq!(rest, Some((3.0, std_dev(&[2.0, 4.0]))));
    }

    #[test]
    fn grid_cardinality() {
        let grid = BenchGrid {
            ns: vec![20, 40],
            ms: vec![2, 3],
            test_rows: 10,
            batches: 2,
            ..BenchGrid::default()
        };
        let model = TacoModel::init(&ModelConfig::tiny(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let cells = run_grid(&grid, &model, Some(&path)).unwrap();
        assert_eq!(cells.len(), 8);
        let rows = read_rows(&path).unwrap();
        assert_eq!(rows.len(), 24);
        assert!(std::fs::read_to_string(&path).unwrap().starts_with(CSV_HEADER));
    }

    #[test]
    fn capacity_cap_flags_cells() {
        let grid = BenchGrid {
            ns: vec![30],
            ms: vec![2],
            test_rows: 4,
            batches: 1,
            memory_limit: Some(1),
            ..BenchGrid::default()
        };
        let model = TacoModel::init(&ModelConfig::tiny(), 0).unwrap();
        let cells = run_grid(&grid, &model, None).unwrap();
        assert!(cells.iter().all(|c| c.oom));
    }

    #[test]
    fn csv_json_csv_round_trip() {
        let cells = vec![
            fake(Mode::Taco, 1024, 16, false, vec![3.25, 1.5, 1.75]),
            fake(Mode::Pot, 4096, 64, true, vec![]),
        ];
        let csv = render_report(&cells, ReportFormat::Csv).unwrap();
        let rows = rows_from_csv(&csv).unwrap();
        let json = render_report(&cells, ReportFormat::Json).unwrap();
        let back: Vec<ReportRow> = serde_json::from_str(&json).unwrap();
        assert_eq!(rows, back);
        assert_eq!(rows_to_csv(&back).unwrap(), csv);
    }

    #[test]
    fn reports_are_deterministic_and_flag_oom() {
        let cells = vec![
            fake(Mode::Taco, 1024, 16, false, vec![3.0, 1.0]),
            fake(Mode::Pot, 1024, 16, true, vec![]),
        ];
        let a = render_report(&cells, ReportFormat::SvgHeatmap).unwrap();
        assert_eq!(a, render_report(&cells, ReportFormat::SvgHeatmap).unwrap());
        assert!(a.contains(r#"data-oom="true""#));
        assert!(render_report(&[], ReportFormat::Csv).is_err());
        assert!("png".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn cumulative_is_monotone() {
        let c = cumulative(&[1.0, 0.0, 2.5]);
        assert_eq!(c, vec![1.0, 1.0, 3.5]);
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }
}
