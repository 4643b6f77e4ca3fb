use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Environment variable holding the number of significant digits in CSV output.
pub const PRECISION_VAR: &str = "DCMG_PRECISION";
const DEFAULT_PRECISION: usize = 9;

pub fn precision() -> Result<usize> {
    match std::env::var(PRECISION_VAR) {
        Err(_) => Ok(DEFAULT_PRECISION),
        Ok(text) => {
            let p: usize = text
                .trim()
                .parse()
                .with_context(|| format!("{PRECISION_VAR} must be an integer, got {text:?}"))?;
            anyhow::ensure!(
                (1..=17).contains(&p),
                "{PRECISION_VAR} must lie in 1..=17, got {p}"
            );
            Ok(p)
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Column-oriented table written as CSV with a header row.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self, digits: usize) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.*e}", digits - 1, v);
            }
            out.push('\n');
        }
        out
    }

    /// Line chart of every column against the first one.
    pub fn to_svg(&self, title: &str) -> String {
        const W: f64 = 800.0;
        const H: f64 = 400.0;
        const PAD: f64 = 40.0;
        const COLORS: [&str; 8] = [
            "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
        ];
        let bounds = |col: usize| {
            self.rows
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[col]), hi.max(r[col]))
                })
        };
        let (t0, t1) = bounds(0);
        let (mut y0, mut y1) = (1..self.header.len())
            .map(bounds)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| {
                (a.min(c), b.max(d))
            });
        if !(y1 > y0) {
            y0 -= 1.0;
            y1 += 1.0;
        }
        let span_t = if t1 > t0 { t1 - t0 } else { 1.0 };
        let sx = |t: f64| PAD + (t - t0) / span_t * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
             <text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{y0:.4e} .. {y1:.4e}</text>\n",
            H - 10.0
        );
        for col in 1..self.header.len() {
            let mut points = String::new();
            for r in &self.rows {
                let _ = write!(points, "{:.2},{:.2} ", sx(r[0]), sy(r[col]));
            }
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"><title>{}</title></polyline>",
                COLORS[(col - 1) % COLORS.len()],
                points.trim_end(),
                self.header[col]
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config: FileRecord,
    pub command: Vec<String>,
    /// No randomness enters any command; reruns reproduce every byte.
    pub deterministic: bool,
    pub tool_version: String,
    pub outputs: Vec<FileRecord>,
}

/// Writes files and remembers their hashes for the manifest.
pub struct Writer {
    dir: PathBuf,
    outputs: Vec<FileRecord>,
}

impl Writer {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(FileRecord {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(
        mut self,
        manifest_name: &str,
        config: &Path,
        config_bytes: &[u8],
        command: Vec<String>,
    ) -> Result<()> {
        let manifest = RunManifest {
            config: FileRecord {
                path: config.display().to_string(),
                sha256: sha256_hex(config_bytes),
            },
            command,
            deterministic: true,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: std::mem::take(&mut self.outputs),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join(manifest_name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
