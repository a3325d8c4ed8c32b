//! Imports the freshly built extension into Python and runs the smoke script.

use std::path::PathBuf;
use std::process::Command;

fn built_library() -> Option<PathBuf> {
    // Test binaries live in <target>/<profile>/deps; the library is uplifted one level.
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps.parent()?, deps]
        .iter()
        .flat_map(|d| ["libdownscale_py.so", "libdownscale_py.dylib"].map(|n| d.join(n)))
        .find(|p| p.exists())
}

#[test]
fn python_smoke_script_passes() {
    let Ok(probe) = Command::new("python3").arg("--version").output() else {
        eprintln!("python3 not found; skipping");
        return;
    };
    assert!(probe.status.success());
    let lib = built_library().expect("cdylib next to the test binary");
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let out = Command::new("python3").arg(script).arg(&lib).output().unwrap();
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
