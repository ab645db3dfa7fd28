use std::process::Command;

fn main() {
    // Embed a git-describe style build identifier for report provenance.
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    let id = match describe {
        Some(d) if !d.is_empty() => d,
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    };
    println!("cargo:rustc-env=CERVID_BUILD_ID={id}");
    println!("cargo:rerun-if-changed=build.rs");
}
