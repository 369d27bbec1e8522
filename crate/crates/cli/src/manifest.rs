//! Run manifest: command, seed, resolved configuration and content hashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Debug, Default)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(String, String)>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: Vec<(String, String)>) -> Self {
        Self {
            command: command.into(),
            seed,
            config,
            ..Default::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push((path.to_path_buf(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.outputs.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        if let Some(seed) = self.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        s.push_str("\n[config]\n");
        for (k, v) in &self.config {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s.push_str("\n[inputs]\n");
        for (p, h) in &self.inputs {
            writeln!(s, "{h}  {}", p.display()).unwrap();
        }
        s.push_str("\n[outputs]\n");
        for (n, h) in &self.outputs {
            writeln!(s, "{h}  {n}").unwrap();
        }
        if !self.notes.is_empty() {
            s.push_str("\n[notes]\n");
            for n in &self.notes {
                writeln!(s, "{n}").unwrap();
            }
        }
        s
    }

    pub fn finish(self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("manifest.txt"), self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("demo", Some(3), vec![("k".into(), "v".into())]);
        m.write(dir.path(), "sub/a.csv", b"x\n").unwrap();
        let text = m.render();
        assert!(text.contains("seed = 3") && text.contains("sub/a.csv") && text.contains("k = v"));
        m.finish(dir.path()).unwrap();
        assert!(dir.path().join("manifest.txt").exists());
        assert_eq!(std::fs::read(dir.path().join("sub/a.csv")).unwrap(), b"x\n");
    }
}
