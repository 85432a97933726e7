//! Content hash of the workspace sources, embedded as `WM_CODE_HASH`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect(&p, out);
        } else if matches!(p.extension().and_then(|e| e.to_str()), Some("rs" | "toml" | "ts" | "html")) {
            out.push(p);
        }
    }
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut files = vec![root.join("Cargo.toml"), root.join("ui/index.html")];
    for dir in ["crates/core/src", "crates/server/src", "crates/cli/src", "crates/bench/src", "ui/src"] {
        collect(&root.join(dir), &mut files);
        println!("cargo:rerun-if-changed={}", root.join(dir).display());
    }
    for krate in ["core", "server", "cli", "bench"] {
        files.push(root.join(format!("crates/{krate}/Cargo.toml")));
    }
    files.sort();
    let mut tree = Sha256::new();
    for f in &files {
        let Ok(bytes) = fs::read(f) else { continue };
        // blob digest as git frames it, then path and digest into the tree
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", bytes.len()));
        blob.update(&bytes);
        let rel = f.strip_prefix(&root).unwrap_or(f).to_string_lossy().into_owned();
        tree.update(rel.as_bytes());
        tree.update([0]);
        tree.update(blob.finalize());
        println!("cargo:rerun-if-changed={}", f.display());
    }
    println!("cargo:rustc-env=WM_CODE_HASH={:x}", tree.finalize());
}
