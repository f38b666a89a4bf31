//! Reproducibility manifests: every run directory records its seed, its full
//! configuration, and a SHA-256 hash of each output file.
//!
//! Creates a run directory, writes artifacts, verifies it, then tampers with
//! a file to show the verifier catching the change.
//!
//! Run: `cargo run --example run_manifest`

use serde_json::json;
use starplan::experiment::{RunDir, MANIFEST_NAME};

fn main() -> starplan::Result<()> {
    let base = std::env::temp_dir().join("starplan_manifest_demo");
    let _ = std::fs::remove_dir_all(&base);

    let mut run = RunDir::create(&base, 42, json!({"k": 2, "m": 3, "mode": "latent"}), false)?;
    println!(
        "created {} with {MANIFEST_NAME} before any outputs",
        base.display()
    );

    run.write_file("runlog.csv", b"update,train_loss\n0,3.1\n100,0.2\n")?;
    run.write_file("skill_grid.csv", b"k,m,skill\n2,3,0.97\n")?;
    for (name, hash) in &run.manifest.files {
        println!("  {name}: sha256 {}...", &hash[..16]);
    }

    println!("verify: {:?} (empty = clean)", run.verify()?);

    // Creating over an existing run is refused without force.
    let refused = RunDir::create(&base, 1, json!({}), false).is_err();
    println!("re-create without force refused: {refused}");

    std::fs::write(base.join("skill_grid.csv"), b"k,m,skill\n2,3,0.01\n")?;
    let reopened = RunDir::open(&base)?;
    println!("after tampering, verify flags: {:?}", reopened.verify()?);
    Ok(())
}
