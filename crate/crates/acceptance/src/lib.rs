//! Helpers for the acceptance suite in `tests/acceptance.rs`.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};

/// Path to the `awgnn` binary, building it into the shared target directory
/// when it is not already there.
pub fn awgnn_binary(test_exe: &Path, cargo: &str, workspace: &Path) -> Result<PathBuf> {
    // test executables live in <target>/<profile>/deps
    let profile_dir = test_exe
        .parent()
        .and_then(Path::parent)
        .context("test executable has no profile directory")?;
    let bin = profile_dir.join(format!("awgnn{}", std::env::consts::EXE_SUFFIX));
    let status = Command::new(cargo)
        .args([
            "build",
            "--quiet",
            "--profile",
            "test",
            "-p",
            "awgnn-cli",
            "--bin",
            "awgnn",
            "--manifest-path",
        ])
        .arg(workspace.join("Cargo.toml"))
        .arg("--target-dir")
        .arg(profile_dir.parent().context("no target directory")?)
        .status()
        .context("running cargo build")?;
    if !status.success() || !bin.exists() {
        bail!("could not build {}", bin.display());
    }
    Ok(bin)
}
