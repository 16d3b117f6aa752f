use std::process::Command;

fn main() {
    println!("cargo:rerun-if-env-changed=OMNI_EMBED_BUILD_HASH");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    let hash = std::env::var("OMNI_EMBED_BUILD_HASH").ok().filter(|h| !h.is_empty()).or_else(|| {
        let out = Command::new("git").args(["rev-parse", "--short=12", "HEAD"]).output().ok()?;
        out.status
            .success()
            .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
            .filter(|h| !h.is_empty())
    });
    println!("cargo:rustc-env=OMNI_EMBED_BUILD_HASH={}", hash.as_deref().unwrap_or("unknown"));
}
