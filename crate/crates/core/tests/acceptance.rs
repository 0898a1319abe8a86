//! The ten acceptance criteria, run in order on shared trained models.
//! Prints one PASS/FAIL line per criterion; exits nonzero if any fail.

use std::time::Instant;

use worldmodel::config::RunConfig;
use worldmodel::repro::Suite;

fn main() {
    // `cargo test -- --list` and filters from the default harness are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let t = Instant::now();
    let mut suite = Suite::new(RunConfig::with_seed(0), None).expect("pinned world builds");
    let summary = suite
        .run_all(|r| println!("{}", r.line()))
        .expect("summary");
    let passed = summary.criteria.iter().filter(|c| c.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1}s",
        summary.criteria.len(),
        t.elapsed().as_secs_f64()
    );
    if !summary.all_pass {
        std::process::exit(1);
    }
}
