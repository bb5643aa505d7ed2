//! Running specs to disk: atomic output directories, content hashes and the
//! long-form plot tables derived from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::artifact::PlotMap;
use crate::recipes;
use crate::spec::{Experiment, ExperimentSpec};
use crate::CliError;

pub const MANIFEST_FORMAT: &str = "ctflow-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLOT_HEADER: &str = "series,x,y,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plots: Vec<PlotMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub summary: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub kind: String,
    /// The canonical spec text, without the output directory.
    #[serde(default)]
    pub spec: String,
    #[serde(default)]
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub summaries: Vec<SeedSummary>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a manifest: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Usage(format!("{}: unsupported manifest format `{}`", path.display(), m.format)));
        }
        Ok(m)
    }

    pub fn summary(&self, seed: u64) -> Option<&Value> {
        self.summaries.iter().find(|s| s.seed == seed).map(|s| &s.summary)
    }

    /// `path → sha256` for every listed file.
    pub fn hashes(&self) -> BTreeMap<&str, &str> {
        self.files.iter().map(|f| (f.path.as_str(), f.sha256.as_str())).collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn partial_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "output".into());
    name.push(".partial");
    out.with_file_name(name)
}

/// Runs every seed (in parallel, results ordered by seed position) and
/// writes the outputs atomically: everything is built under
/// `<output>.partial` and renamed into place only on success.
pub fn run(spec: &ExperimentSpec) -> Result<Manifest, CliError> {
    spec.validate()?;
    let out = &spec.output;
    if out.exists() && !out.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Usage(format!("{} exists and is not the output of a previous run", out.display())));
    }
    let outputs = spec.seeds.par_iter().map(|&s| recipes::run_seed(spec, s)).collect::<ctflow::Result<Vec<_>>>()?;

    let canonical = spec.recorded();
    let mut files = vec![(String::from("spec.toml"), canonical.clone().into_bytes(), None, Vec::new())];
    let mut summaries = Vec::new();
    for (seed, o) in spec.seeds.iter().zip(outputs) {
        for a in o.artifacts {
            files.push((format!("seed-{seed}/{}", a.name), a.bytes, Some(*seed), a.plots));
        }
        summaries.push(SeedSummary { seed: *seed, summary: o.summary });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        kind: spec.experiment.kind().into(),
        spec: canonical,
        files: files
            .iter()
            .map(|(path, bytes, seed, plots)| FileEntry {
                path: path.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
                seed: *seed,
                plots: plots.clone(),
            })
            .collect(),
        summaries,
    };

    let partial = partial_path(out);
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    let write = || -> std::io::Result<()> {
        for (path, bytes, _, _) in &files {
            let p = partial.join(path);
            fs::create_dir_all(p.parent().expect("file paths have a parent"))?;
            fs::write(p, bytes)?;
        }
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifests serialize");
        json.push('\n');
        fs::write(partial.join(MANIFEST_FILE), json)?;
        if out.exists() {
            fs::remove_dir_all(out)?;
        }
        fs::rename(&partial, out)
    };
    if let Err(e) = write() {
        let _ = fs::remove_dir_all(&partial);
        return Err(e.into());
    }
    Ok(manifest)
}

/// Runs an `h_sweep` spec with its grid replaced by `grid`.
pub fn sweep_h(spec: &ExperimentSpec, grid: &[f64]) -> Result<Manifest, CliError> {
    let mut spec = spec.clone();
    match &mut spec.experiment {
        Experiment::HSweep { grid: g, .. } => *g = grid.to_vec(),
        other => {
            return Err(CliError::Usage(format!("sweep-h needs an h_sweep spec, got {}", other.kind())));
        }
    }
    run(&spec)
}

fn column(header: &[&str], name: &str, file: &str) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| *h == name)
        .ok_or_else(|| CliError::Usage(format!("{file}: no column `{name}`")))
}

/// Writes one `series,x,y,seed` table per artifact plus `plotdata.csv`, which
/// holds every row with the series prefixed by `<artifact>/`. Returns the
/// written paths.
pub fn emit_plotdata(manifest_path: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| base.join("plotdata"));
    let mut tables: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for f in manifest.files.iter().filter(|f| !f.plots.is_empty()) {
        let text = fs::read_to_string(base.join(&f.path))?;
        if sha256_hex(text.as_bytes()) != f.sha256 {
            return Err(CliError::Usage(format!("{}: content does not match the manifest hash", f.path)));
        }
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let seed = f.seed.map(|s| s.to_string()).unwrap_or_default();
        for p in &f.plots {
            let (x, y) = (column(&header, &p.x, &f.path)?, column(&header, &p.y, &f.path)?);
            let g = p.group.as_deref().map(|g| column(&header, g, &f.path)).transpose()?;
            let table = tables.entry(p.artifact.clone()).or_default();
            for r in &rows {
                let series = match g {
                    Some(g) => format!("{}/{}", p.series, r[g]),
                    None => p.series.clone(),
                };
                table.push(format!("{series},{},{},{seed}", r[x], r[y]));
            }
        }
    }
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let mut all = format!("{PLOT_HEADER}\n");
    for (artifact, rows) in &tables {
        let mut text = format!("{PLOT_HEADER}\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
            all.push_str(&format!("{artifact}/{r}\n"));
        }
        let p = out.join(format!("{artifact}.csv"));
        fs::write(&p, text)?;
        written.push(p);
    }
    let p = out.join("plotdata.csv");
    fs::write(&p, all)?;
    written.push(p);
    Ok(written)
}
