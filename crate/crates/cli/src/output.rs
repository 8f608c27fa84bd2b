//! Output plumbing: CSV and JSON writers, plot-data emission with sidecars,
//! and the atomically written run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use g4vdyn::config::Config;
use g4vdyn::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    pub fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }
}

/// Collects every file a run writes and finishes with the manifest.
pub struct RunWriter {
    subcommand: String,
    out_dir: PathBuf,
    format: OutputFormat,
    seed: u64,
    config: Config,
    outputs: Vec<String>,
    started: Instant,
}

/// Column description for a plot sidecar.
#[derive(Serialize)]
struct PlotColumn {
    name: &'static str,
    unit: &'static str,
    axis: &'static str,
}

#[derive(Serialize)]
struct PlotSidecar {
    data_file: String,
    figure_analog: &'static str,
    title: &'static str,
    columns: Vec<PlotColumn>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    tool_version: &'static str,
    master_seed: u64,
    config: &'a Config,
    outputs: &'a [String],
    wall_time_s: f64,
}

impl RunWriter {
    pub fn new(
        subcommand: &str,
        out_dir: &Path,
        format: OutputFormat,
        seed: u64,
        config: Config,
    ) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(RunWriter {
            subcommand: subcommand.to_string(),
            out_dir: out_dir.to_path_buf(),
            format,
            seed,
            config,
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn record(&mut self, name: &str, content: String) -> Result<()> {
        fs::write(self.out_dir.join(name), content)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// RFC-4180 CSV with a mandatory header row and '.' decimal separator.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[Vec<String>]) -> Result<()> {
        if !self.format.csv() {
            return Ok(());
        }
        let mut text = String::with_capacity(rows.len() * 24 + header.len() + 2);
        text.push_str(header);
        text.push_str("\r\n");
        for row in rows {
            text.push_str(&row.join(","));
            text.push_str("\r\n");
        }
        self.record(name, text)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if !self.format.json() {
            return Ok(());
        }
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("serialising {name}: {e}")))?;
        self.record(name, text + "\n")
    }

    /// Plot-ready data plus a JSON sidecar naming axes, units and the figure
    /// the file reproduces.
    pub fn write_plot(
        &mut self,
        kind: &str,
        figure_analog: &'static str,
        title: &'static str,
        columns: &[(&'static str, &'static str)],
        rows: &[Vec<String>],
    ) -> Result<()> {
        if !self.format.csv() {
            return Ok(());
        }
        let data_file = format!("plot_{kind}.csv");
        let header = columns
            .iter()
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(",");
        self.write_csv(&data_file, &header, rows)?;
        let sidecar = PlotSidecar {
            data_file: data_file.clone(),
            figure_analog,
            title,
            columns: columns
                .iter()
                .enumerate()
                .map(|(i, (name, unit))| PlotColumn {
                    name,
                    unit,
                    axis: if i == 0 { "x" } else { "y" },
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Config(format!("serialising sidecar: {e}")))?;
        self.record(&format!("plot_{kind}.json"), text + "\n")
    }

    /// Write the manifest atomically; every output is listed, orphans are
    /// impossible by construction.
    pub fn finish(self) -> Result<()> {
        let manifest = Manifest {
            subcommand: &self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            master_seed: self.seed,
            config: &self.config,
            outputs: &self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("serialising manifest: {e}")))?
            + "\n";
        let tmp = self.out_dir.join("run_manifest.json.tmp");
        let target = self.out_dir.join("run_manifest.json");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &target)?;
        Ok(())
    }
}

/// Shortest round-trip decimal form; stable across platforms.
pub fn fmt(value: f64) -> String {
    format!("{value}")
}
