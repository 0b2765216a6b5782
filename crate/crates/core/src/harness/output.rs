//! Report writers: CSV tables, JSON summaries, SVG log-log plots and the
//! run manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::hex;

use super::convergence::{ConvergenceReport, SdReport};
use super::fit::SlopeFit;

/// Which file kinds to emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
    pub svg: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            csv: true,
            json: true,
            svg: true,
        }
    }
}

impl FromStr for Formats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut f = Formats {
            csv: false,
            json: false,
            svg: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "csv" => f.csv = true,
                "json" => f.json = true,
                "svg" => f.svg = true,
                other => return Err(Error::Config(format!("unknown format '{other}'"))),
            }
        }
        Ok(f)
    }
}

/// Collects the files written by one command, in write order.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    pub formats: Formats,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path, formats: Formats) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            formats,
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes `name` through `f` and records it.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.root.join(name);
        let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
        f(&mut file)?;
        file.flush()?;
        self.written.push(PathBuf::from(name));
        Ok(())
    }

    /// Records a file written directly under the root.
    pub fn record(&mut self, name: PathBuf) {
        self.written.push(name);
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if !self.formats.json {
            return Ok(());
        }
        self.json_always(name, value)
    }

    /// JSON regardless of the requested formats; used for check results.
    pub fn json_always<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn svg(&mut self, name: &str, content: &str) -> Result<()> {
        if !self.formats.svg {
            return Ok(());
        }
        self.write_with(name, |w| Ok(w.write_all(content.as_bytes())?))
    }

    pub fn csv(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        if !self.formats.csv {
            return Ok(());
        }
        self.write_with(name, f)
    }
}

pub fn write_convergence_csv<W: Write>(w: W, report: &ConvergenceReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "m",
        "n",
        "replicas",
        "skipped",
        "mean_gap",
        "gap_ci_half",
        "gap_q50",
        "initial_gap",
        "sup_mart_sq1",
        "sup_mart_sq1_ci_half",
        "sup_mart_sq2",
        "rhs_functional",
        "mean_events",
    ])?;
    for c in &report.cells {
        out.write_record(&[
            c.m.to_string(),
            c.n.to_string(),
            c.gap.n.to_string(),
            c.skipped.clone().unwrap_or_default(),
            c.gap.mean.to_string(),
            c.gap.ci_half.to_string(),
            c.gap.q50.to_string(),
            c.initial_gap.mean.to_string(),
            c.sup_mart_sq[0].mean.to_string(),
            c.sup_mart_sq[0].ci_half.to_string(),
            c.sup_mart_sq[1].mean.to_string(),
            c.rhs_functional.mean.to_string(),
            c.events.mean.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One row per fitted slope: `(observable, fixed, value, slope, ci)`.
pub fn write_slopes_csv<W: Write>(w: W, report: &ConvergenceReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["observable", "fixed", "value", "slope", "ci_low", "ci_high", "intercept"])?;
    let mut row = |obs: &str, fixed: &str, value: String, f: &SlopeFit| {
        out.write_record(&[
            obs.to_string(),
            fixed.to_string(),
            value,
            f.slope.to_string(),
            f.ci.0.to_string(),
            f.ci.1.to_string(),
            f.intercept.to_string(),
        ])
    };
    for (m, f) in &report.slopes_n {
        row("gap_vs_n", "m", m.to_string(), f)?;
    }
    for (m, f) in &report.mart_slopes_n {
        row("sup_mart_sq1_vs_n", "m", m.to_string(), f)?;
    }
    if let Some(f) = &report.slope_m {
        let n = report.cells.iter().map(|c| c.n).max().unwrap_or(0);
        row("gap_vs_m", "n", n.to_string(), f)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sd_csv<W: Write>(w: W, report: &SdReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["m", "error", "error_u", "error_v", "initial_gap", "steps"])?;
    for r in &report.rows {
        out.write_record(&[
            r.m.to_string(),
            r.error.to_string(),
            r.error_u.to_string(),
            r.error_v.to_string(),
            r.initial_gap.to_string(),
            r.steps.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Emits the convergence tables, the JSON report and one plot per fixed `M`.
pub fn emit_convergence(out: &mut OutputDir, report: &ConvergenceReport) -> Result<()> {
    out.csv("convergence.csv", |w| write_convergence_csv(w, report))?;
    out.csv("convergence_slopes.csv", |w| write_slopes_csv(w, report))?;
    out.json("convergence.json", report)?;
    let mut ms: Vec<usize> = report.cells.iter().map(|c| c.m).collect();
    ms.dedup();
    for m in ms {
        let pts: Vec<PlotPoint> = report
            .cells
            .iter()
            .filter(|c| c.m == m && c.skipped.is_none())
            .map(|c| PlotPoint {
                x: c.n as f64,
                y: c.gap.mean,
                err: c.gap.ci_half,
            })
            .collect();
        let svg = loglog_svg(
            &format!("particle gap, M = {m}"),
            "N",
            "mean squared mixed-norm gap",
            &pts,
            report.slope_n(m),
        );
        out.svg(&format!("convergence_m{m}.svg"), &svg)?;
    }
    Ok(())
}

pub fn emit_semidiscrete(out: &mut OutputDir, report: &SdReport) -> Result<()> {
    out.csv("sd_convergence.csv", |w| write_sd_csv(w, report))?;
    out.json("sd_convergence.json", report)?;
    let pts: Vec<PlotPoint> = report
        .rows
        .iter()
        .filter(|r| r.error > 0.0)
        .map(|r| PlotPoint {
            x: r.m as f64,
            y: r.error,
            err: 0.0,
        })
        .collect();
    let fit = fit_line(&pts);
    out.svg(
        "sd_convergence.svg",
        &loglog_svg("semi-discrete error", "M", "mixed-norm error", &pts, fit.as_ref()),
    )
}

fn fit_line(pts: &[PlotPoint]) -> Option<SlopeFit> {
    if pts.len() < 2 {
        return None;
    }
    let x: Vec<f64> = pts.iter().map(|p| p.x.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.y.ln()).collect();
    let (a, b) = crate::analytics::ols(&x, &y);
    Some(SlopeFit {
        x: pts.iter().map(|p| p.x).collect(),
        y: pts.iter().map(|p| p.y).collect(),
        weights: vec![1.0; pts.len()],
        slope: b,
        intercept: a,
        ci: (b, b),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    /// Half-width of the error bar.
    pub err: f64,
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;

/// Static log-log scatter with error bars and an optional fitted line.
pub fn loglog_svg(title: &str, xlabel: &str, ylabel: &str, pts: &[PlotPoint], fit: Option<&SlopeFit>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, esc(title));
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, H - PAD_B, PAD_T);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, esc(xlabel));
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        esc(ylabel)
    );
    let pts: Vec<PlotPoint> = pts.iter().copied().filter(|p| p.x > 0.0 && p.y > 0.0).collect();
    if pts.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, (x0 + x1) / 2.0, (y0 + y1) / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let lo_y = |p: &PlotPoint| if p.y - p.err > 0.0 { p.y - p.err } else { p.y };
    let (mut lx0, mut lx1) = span(pts.iter().map(|p| p.x.log10()));
    let (mut ly0, mut ly1) = span(pts.iter().flat_map(|p| [lo_y(p).log10(), (p.y + p.err).log10()]));
    pad(&mut lx0, &mut lx1);
    pad(&mut ly0, &mut ly1);
    let px = |x: f64| x0 + (x.log10() - lx0) / (lx1 - lx0) * (x1 - x0);
    let py = |y: f64| y0 - (y.log10() - ly0) / (ly1 - ly0) * (y0 - y1);

    let mut ticks: Vec<f64> = pts.iter().map(|p| p.x).collect();
    ticks.dedup();
    for t in ticks {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{y0}" x2="{0:.2}" y2="{1}" stroke="black"/><text x="{0:.2}" y="{2}" text-anchor="middle">{3}</text>"#,
            px(t),
            y0 + 4.0,
            y0 + 16.0,
            t
        );
    }
    for t in [10f64.powf(ly0 + 0.05 * (ly1 - ly0)), 10f64.powf(ly1 - 0.05 * (ly1 - ly0))] {
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="black"/><text x="{2}" y="{3:.2}" text-anchor="end">{4:.3e}</text>"#,
            py(t),
            x0 - 4.0,
            x0 - 6.0,
            py(t) + 4.0,
            t
        );
    }
    if let Some(f) = fit {
        let (a, b) = (f.intercept, f.slope);
        let xs = [10f64.powf(lx0), 10f64.powf(lx1)];
        let ys = xs.map(|x| (a + b * x.ln()).exp());
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#c03030" stroke-dasharray="6 3"/>"##,
            px(xs[0]),
            py(ys[0]),
            px(xs[1]),
            py(ys[1])
        );
        let label = if f.ci.0 == f.ci.1 {
            format!("slope {:.3}", b)
        } else {
            format!("slope {:.3} [{:.3}, {:.3}]", b, f.ci.0, f.ci.1)
        };
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end" fill="#c03030">{}</text>"##,
            x1 - 4.0,
            y1 + 14.0,
            esc(&label)
        );
    }
    for p in &pts {
        let (cx, cy) = (px(p.x), py(p.y));
        if p.err > 0.0 {
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                py(lo_y(p)),
                py(p.y + p.err)
            );
        }
        let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="#2050a0"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

fn span(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

fn pad(lo: &mut f64, hi: &mut f64) {
    let w = (*hi - *lo).max(0.2);
    let mid = 0.5 * (*hi + *lo);
    *lo = mid - 0.55 * w;
    *hi = mid + 0.55 * w;
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Outcome of one declared check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub expected: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, passed: bool, value: f64, expected: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            expected: expected.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Hash of the config file bytes, when one was given.
    pub config_file_sha256: Option<String>,
    /// Hash of the effective configuration after overrides.
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub formats: Formats,
    pub outputs: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

impl Manifest {
    /// Hashes every written file; the manifest itself is not listed.
    pub fn build(
        out: &OutputDir,
        command: &str,
        config_path: Option<&Path>,
        config_hash: String,
        seed: u64,
        workers: usize,
    ) -> Result<Self> {
        let mut outputs = Vec::new();
        for rel in out.written() {
            let full = out.root().join(rel);
            outputs.push(ManifestEntry {
                path: rel.clone(),
                bytes: fs::metadata(&full)?.len(),
                sha256: sha256_file(&full)?,
            });
        }
        Ok(Self {
            tool: "sktlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config_file_sha256: config_path.map(sha256_file).transpose()?,
            config_hash,
            seed,
            workers,
            formats: out.formats,
            outputs,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let f = fs::File::create(root.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::NormMode;

    fn empty_report() -> ConvergenceReport {
        ConvergenceReport {
            config_hash: String::new(),
            norm_mode: NormMode::Sampled,
            t_end: 0.1,
            cells: vec![],
            slopes_n: vec![],
            mart_slopes_n: vec![],
            slope_m: None,
            reference_error: None,
        }
    }

    #[test]
    fn empty_report_gives_header_only_csv() {
        let mut buf = Vec::new();
        write_convergence_csv(&mut buf, &empty_report()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("m,n,replicas"));
    }

    #[test]
    fn formats_parse() {
        let f: Formats = "csv, svg".parse().unwrap();
        assert!(f.csv && f.svg && !f.json);
        assert!("csv,xml".parse::<Formats>().is_err());
    }

    #[test]
    fn svg_is_well_formed_and_annotated() {
        let pts = [64.0, 128.0, 256.0].map(|x| PlotPoint {
            x,
            y: 1.0 / x,
            err: 0.1 / x,
        });
        let fit = fit_line(&pts).unwrap();
        let s = loglog_svg("t<1>", "N", "gap", &pts, Some(&fit));
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("slope -1.000"));
        assert!(s.contains("t&lt;1&gt;"));
        assert_eq!(s.matches("<circle").count(), 3);
        let empty = loglog_svg("x", "a", "b", &[], None);
        assert!(empty.contains("no data"));
    }

    #[test]
    fn manifest_hashes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), Formats::default()).unwrap();
        out.json("a.json", &vec![1, 2]).unwrap();
        out.csv("b.csv", |w| Ok(w.write_all(b"x\n")?)).unwrap();
        let m = Manifest::build(&out, "norms", None, "h".into(), 7, 1).unwrap();
        assert_eq!(m.outputs.len(), 2);
        assert_eq!(m.outputs[1].sha256, hex(&Sha256::digest(b"x\n")));
        m.write(dir.path()).unwrap();
        assert!(dir.path().join("manifest.json").exists());
    }
}
