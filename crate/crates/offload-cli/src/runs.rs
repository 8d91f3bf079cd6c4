//! Run directories and provenance.
//!
//! Every run directory carries a config snapshot and a manifest with the
//! config hash, code version, and output file hashes, enough to re-execute
//! the run bit-identically. CSV/JSON outputs embed the provenance line
//! themselves; file contents contain no timestamps, so identical runs yield
//! identical bytes (the run directory name carries the timestamp instead).

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use offload_sim::config::{to_toml, SystemConfig};
use offload_sim::env::StepRecord;
use offload_sim::eval::MetricSummary;
use offload_sim::ppg::TrainLogRow;

pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn new(code: u8, msg: String) -> Self {
        Self { code, msg }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, format!("io error: {e}"))
    }
}

pub fn config_hash(cfg: &SystemConfig) -> String {
    let mut h = Sha256::new();
    h.update(to_toml(cfg).as_bytes());
    let out = h.finalize();
    hex_prefix(&out, 12)
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_prefix(&h.finalize(), 12))
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes
        .iter()
        .take((n + 1) / 2)
        .map(|b| format!("{b:02x}"))
        .collect::<String>()[..n]
        .to_string()
}

pub fn provenance_line(cfg: &SystemConfig) -> String {
    format!(
        "# provenance config={} version={}",
        config_hash(cfg),
        env!("CARGO_PKG_VERSION")
    )
}

/// Prepends the provenance comment to an existing CSV file.
pub fn prepend_provenance(path: &Path, cfg: &SystemConfig) -> Result<(), CliError> {
    let body = std::fs::read(path)?;
    let mut f = File::create(path)?;
    writeln!(f, "{}", provenance_line(cfg))?;
    f.write_all(&body)?;
    Ok(())
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `out_dir/<name>`; refuses to reuse an existing directory
    /// unless forced. The default name carries a timestamp.
    pub fn create(
        out_dir: &Path,
        run_name: Option<String>,
        default_prefix: &str,
        force: bool,
    ) -> Result<Self, CliError> {
        let name = run_name.unwrap_or_else(|| {
            format!(
                "{default_prefix}-{}",
                chrono::Local::now().format("%Y%m%d-%H%M%S")
            )
        });
        let path = out_dir.join(name);
        if path.exists() {
            if !force {
                return Err(CliError::new(
                    1,
                    format!(
                        "run directory {} already exists; pass --force to overwrite",
                        path.display()
                    ),
                ));
            }
            std::fs::remove_dir_all(&path)?;
        }
        std::fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_config_snapshot(&self, cfg: &SystemConfig) -> Result<(), CliError> {
        std::fs::write(self.path.join("config.toml"), to_toml(cfg))?;
        Ok(())
    }

    pub fn train_log_writer(&self, cfg: &SystemConfig) -> Result<TrainLogWriter, CliError> {
        let path = self.path.join("training_log.csv");
        let mut file = File::create(&path)?;
        writeln!(file, "{}", provenance_line(cfg))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record([
            "episode",
            "mean_reward",
            "mean_response_time_s",
            "mean_energy_j",
            "violation_rate",
            "mean_entropy",
            "policy_loss",
            "value_loss",
            "aux_kl",
            "aux_value_loss",
            "lambda_mean",
            "lambda_max",
        ])
        .map_err(csv_err)?;
        Ok(TrainLogWriter { inner: Some(w) })
    }

    pub fn write_records_csv(
        &self,
        name: &str,
        cfg: &SystemConfig,
        records: &[StepRecord],
    ) -> Result<(), CliError> {
        let path = self.path.join(name);
        let mut file = File::create(&path)?;
        writeln!(file, "{}", provenance_line(cfg))?;
        let mut w = csv::Writer::from_writer(file);
        for r in records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metrics_json(
        &self,
        name: &str,
        cfg: &SystemConfig,
        summary: &MetricSummary,
    ) -> Result<(), CliError> {
        self.write_json(name, cfg, &serde_json::json!({ "summary": summary }))
    }

    pub fn write_json<T: Serialize>(
        &self,
        name: &str,
        cfg: &SystemConfig,
        value: &T,
    ) -> Result<(), CliError> {
        let mut doc = serde_json::to_value(value)
            .map_err(|e| CliError::new(1, format!("serialize {name}: {e}")))?;
        if let serde_json::Value::Object(map) = &mut doc {
            map.insert(
                "provenance".to_string(),
                serde_json::json!({
                    "config": config_hash(cfg),
                    "version": env!("CARGO_PKG_VERSION"),
                }),
            );
        }
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| CliError::new(1, format!("serialize {name}: {e}")))?;
        std::fs::write(self.path.join(name), text)?;
        Ok(())
    }

    /// Manifest with config hash, code version, parameters, and per-output
    /// content hashes.
    pub fn write_manifest(
        &self,
        command: &str,
        params: &[(&str, String)],
        outputs: &[String],
    ) -> Result<(), CliError> {
        let cfg_text = std::fs::read_to_string(self.path.join("config.toml")).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(cfg_text.as_bytes());
        let cfg_hash = hex_prefix(&h.finalize(), 12);
        let mut hashes = serde_json::Map::new();
        for out in outputs {
            let p = self.path.join(out);
            if p.exists() {
                hashes.insert(out.clone(), serde_json::json!(file_hash(&p)?));
            }
        }
        let params: serde_json::Map<String, serde_json::Value> = params
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
            .collect();
        let manifest = serde_json::json!({
            "command": command,
            "code_version": env!("CARGO_PKG_VERSION"),
            "config_hash": cfg_hash,
            "params": params,
            "outputs": hashes,
        });
        std::fs::write(
            self.path.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )?;
        Ok(())
    }
}

/// Manifest for commands that emit into a plain directory (trace synthesis).
pub fn write_manifest_at(
    dir: &Path,
    cfg: &SystemConfig,
    command: &str,
    params: &[(&str, String)],
    outputs: &[String],
) -> Result<(), CliError> {
    let mut hashes = serde_json::Map::new();
    for out in outputs {
        let p = dir.join(out);
        if p.exists() {
            hashes.insert(out.clone(), serde_json::json!(file_hash(&p)?));
        }
    }
    let params: serde_json::Map<String, serde_json::Value> = params
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
        .collect();
    let manifest = serde_json::json!({
        "command": command,
        "code_version": env!("CARGO_PKG_VERSION"),
        "config_hash": config_hash(cfg),
        "params": params,
        "outputs": hashes,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::new(1, format!("csv error: {e}"))
}

pub struct TrainLogWriter {
    inner: Option<csv::Writer<File>>,
}

impl TrainLogWriter {
    pub fn write_row(&mut self, row: &TrainLogRow) {
        if let Some(w) = self.inner.as_mut() {
            let _ = w.write_record([
                row.episode.to_string(),
                row.mean_reward.to_string(),
                row.mean_response_time_s.to_string(),
                row.mean_energy_j.to_string(),
                row.violation_rate.to_string(),
                row.mean_entropy.to_string(),
                row.policy_loss.to_string(),
                row.value_loss.to_string(),
                row.aux_kl.to_string(),
                row.aux_value_loss.to_string(),
                row.lambda_mean.to_string(),
                row.lambda_max.to_string(),
            ]);
        }
    }

    pub fn finish(&mut self) -> Result<(), CliError> {
        if let Some(mut w) = self.inner.take() {
            w.flush()?;
        }
        Ok(())
    }
}
