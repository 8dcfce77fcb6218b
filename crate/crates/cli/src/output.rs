use std::io::Write;
use std::path::PathBuf;

use serde_json::json;
use zapsa::Result;

use crate::config::RunConfig;

/// Output directory for one run. Every CSV starts with a `# config_hash:`
/// comment line; `finish` writes `manifest.json` listing what was produced.
pub struct Output {
    dir: PathBuf,
    hash: String,
    files: Vec<String>,
}

impl Output {
    pub fn create(config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&config.out)?;
        Ok(Output { dir: config.out.clone(), hash: config.hash(), files: Vec::new() })
    }

    /// Write `name` with the hash line followed by whatever `body` emits.
    pub fn csv(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "# config_hash: {}", self.hash)?;
        body(&mut buf)?;
        std::fs::write(self.dir.join(name), buf)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// A CSV from a header and rows of already formatted cells.
    pub fn table(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        self.csv(name, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        })
    }

    pub fn json(&mut self, name: &str, mut value: serde_json::Value) -> Result<()> {
        value["config_hash"] = json!(self.hash);
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        std::fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn finish(self, command: &str, config: &RunConfig) -> Result<Vec<String>> {
        let manifest = json!({
            "manifest_version": 1,
            "command": command,
            "config_hash": self.hash,
            "seed": config.seed,
            "package_version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "files": self.files,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(self.files)
    }
}

pub fn num(x: f64) -> String {
    // `-0` would otherwise leak from negated zero costs.
    (x + 0.0).to_string()
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), num)
}
