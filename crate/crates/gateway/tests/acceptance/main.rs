//! One check per acceptance criterion, each with its runtime bound.
//! Prints a PASS/FAIL line per criterion and exits non-zero on any FAIL.

#[path = "../common/mod.rs"]
mod common;
#[path = "../../../core/tests/common/mod.rs"]
mod reference;

mod criteria;

use std::time::{Duration, Instant};

type Check = fn() -> Result<String, String>;

fn main() {
    let suite: [(&str, u64, Check); 9] = [
        ("envelope", 10, criteria::envelope),
        ("cooperation", 30, criteria::cooperation),
        ("event bus", 60, criteria::event_bus),
        ("orchestration", 60, criteria::orchestration),
        ("registry", 10, criteria::registry),
        ("identity/sso", 10, criteria::identity),
        ("end-to-end residence-change", 20, criteria::end_to_end),
        ("crash safety", 120, criteria::crash_safety),
        ("seed knob", 5, criteria::seed_knob),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, bound, check) in suite {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let bound = Duration::from_secs(bound);
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took < bound => (true, d),
            Ok(d) => (false, format!("{d}; over the time bound")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name} [{:.2}s < {}s] {detail}",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            bound.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
