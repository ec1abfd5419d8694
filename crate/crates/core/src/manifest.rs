//! Checksummed file listings for generated and staged outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileEntry>,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

impl Manifest {
    /// Lists every file under `root` except the names in `skip`, sorted by path.
    pub fn of_tree(root: &Path, skip: &[&str]) -> std::io::Result<Manifest> {
        let mut paths = Vec::new();
        walk(root, &mut paths)?;
        let mut files = Vec::new();
        for p in paths {
            let rel = relative(root, &p);
            if skip.contains(&rel.as_str()) {
                continue;
            }
            let bytes = fs::read(&p)?;
            files.push(FileEntry { path: rel, bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Manifest { files })
    }

    pub fn get(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }

    /// Entries whose file is missing or whose contents changed.
    pub fn stale(&self, root: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| match fs::read(root.join(&f.path)) {
                Ok(b) => sha256_hex(&b) != f.sha256,
                Err(_) => true,
            })
            .map(|f| f.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn tree_listing_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a/b")).unwrap();
        fs::write(dir.path().join("a/b/x.txt"), "x").unwrap();
        fs::write(dir.path().join("y.txt"), "y").unwrap();
        fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        let m = Manifest::of_tree(dir.path(), &["manifest.json"]).unwrap();
        assert_eq!(m.files.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(), ["a/b/x.txt", "y.txt"]);
        assert!(m.stale(dir.path()).is_empty());
        fs::write(dir.path().join("y.txt"), "changed").unwrap();
        assert_eq!(m.stale(dir.path()), ["y.txt"]);
    }
}
