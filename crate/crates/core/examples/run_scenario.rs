//! Runs a scenario file headless and prints a summary.
//!
//!     cargo run --release -p skylane-core --example run_scenario -- scenarios/xiamen_vfh.json

use skylane::engine::{Engine, EngineOptions};

fn main() -> skylane::Result<()> {
    let path = std::env::args().nth(1).expect("scenario path");
    let mut e = Engine::from_path(&path, EngineOptions::default())?;
    let r = e.run(None)?;
    let p = e.performance();
    println!(
        "ticks {} completed {}/{} aborted {} collisions {} peak {} min_sep {:?} mismatches {} illegal {} tps {:.0}",
        r.ticks, r.completed, r.demands, r.aborted, r.collisions.len(), r.peak_active, r.min_separation, r.accounting_mismatches,
        r.illegal_transitions, p.ticks_per_second
    );
    for m in r.missions.iter().filter(|m| m.outcome != Some(skylane::traffic::DemandOutcome::Completed)) {
        println!("  {m:?}");
    }
    for c in &r.collisions {
        println!("  {c:?}");
    }
    Ok(())
}
