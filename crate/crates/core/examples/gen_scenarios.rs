//! Regenerates the shipped scenario files.
//!
//!     cargo run -p skylane-core --example gen_scenarios -- scenarios

use std::path::PathBuf;

fn main() -> skylane::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenarios".into()));
    std::fs::create_dir_all(&dir)?;
    for (name, s) in [("smallcity_100.json", skylane::presets::smallcity_100()?), ("xiamen_vfh.json", skylane::presets::xiamen_vfh()?)] {
        std::fs::write(dir.join(name), s.to_json() + "\n")?;
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}
