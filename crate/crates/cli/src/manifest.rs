use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use pint::trainer::TrainConfig;

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Summary of a run directory: config identity, input hashes and the hash of
/// every file written.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<(String, PathBuf, String)>,
    pub status: String,
    pub selected: Option<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            strategy: cfg.strategy.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            inputs: Vec::new(),
            status: "running".into(),
            selected: None,
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        let hash = blob_hash(&std::fs::read(path)?);
        self.inputs.push((role.to_string(), path.to_path_buf(), hash));
        Ok(())
    }

    /// Writes `manifest.txt` listing every other file under `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "strategy = {}", self.strategy);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "config = config.txt");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        for (role, path, hash) in &self.inputs {
            let _ = writeln!(s, "{role} = {}", path.display());
            let _ = writeln!(s, "{role}_hash = {hash}");
        }
        let _ = writeln!(s, "status = {}", self.status);
        if let Some(it) = self.selected {
            let _ = writeln!(s, "selected_iteration = {it}");
        }
        s.push_str("\n[files]\n");
        let mut files = Vec::new();
        collect_files(dir, dir, &mut files)?;
        files.sort();
        for rel in files {
            if rel == Path::new(MANIFEST_FILE) {
                continue;
            }
            let hash = blob_hash(&std::fs::read(dir.join(&rel))?);
            let _ = writeln!(s, "{hash}  {}", rel.display());
        }
        std::fs::write(dir.join(MANIFEST_FILE), s)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}
