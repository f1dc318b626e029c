use std::fs;
use std::path::PathBuf;

/// Extract locked versions of the codec libraries so results artifacts can
/// record exactly which encoder produced them.
fn main() {
    println!("cargo:rerun-if-changed=build.rs");
    let mut dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let lock = loop {
        let candidate = dir.join("Cargo.lock");
        if candidate.exists() {
            break Some(candidate);
        }
        if !dir.pop() {
            break None;
        }
    };
    let text = lock.and_then(|p| fs::read_to_string(p).ok()).unwrap_or_default();
    for krate in ["image", "webp", "openjpeg-sys"] {
        let version = locked_version(&text, krate).unwrap_or_else(|| "unknown".to_string());
        let var = krate.to_uppercase().replace('-', "_");
        println!("cargo:rustc-env=CRBD_{}_VERSION={}", var, version);
    }
}

fn locked_version(lock: &str, name: &str) -> Option<String> {
    let needle = format!("name = \"{name}\"");
    let mut lines = lock.lines();
    while let Some(line) = lines.next() {
        if line.trim() == needle {
            for next in lines.by_ref() {
                let next = next.trim();
                if let Some(v) = next.strip_prefix("version = \"") {
                    return Some(v.trim_end_matches('"').to_string());
                }
                if next.starts_with("[[") {
                    break;
                }
            }
        }
    }
    None
}
