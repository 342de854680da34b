//! Embeds a hash of the library and CLI sources so every run records exactly
//! which code produced it, with or without a git checkout.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect(&path, out);
        } else if path.extension().is_some_and(|e| e == "rs" || e == "toml") {
            out.push(path);
        }
    }
}

fn main() {
    let manifest = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("cargo sets this"));
    let roots = [
        manifest.join("src"),
        manifest.join("../core/src"),
        manifest.join("Cargo.toml"),
        manifest.join("../core/Cargo.toml"),
    ];
    let mut files = Vec::new();
    for root in &roots {
        println!("cargo:rerun-if-changed={}", root.display());
        if root.is_dir() {
            collect(root, &mut files);
        } else {
            files.push(root.clone());
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for file in &files {
        let rel = file.strip_prefix(&manifest).unwrap_or(file);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update(fs::read(file).unwrap_or_default());
    }
    let digest = hex::encode(hasher.finalize());
    println!("cargo:rustc-env=GAITSPEED_SOURCE_HASH={}", &digest[..16]);
}
