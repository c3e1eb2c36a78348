//! One PASS/FAIL line per acceptance criterion. Numeric arguments select criteria.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use qtensor_validation::{evaluate, Session, TITLES};

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=10).contains(n)).collect();
    let selected = if selected.is_empty() { (1..=10).collect() } else { selected };
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut session = Session::new(&configs).expect("scratch directory");
    let mut failed = Vec::new();
    for n in selected {
        let t = Instant::now();
        let o = evaluate(n, &mut session);
        println!(
            "{} criterion {n} [{}]: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            TITLES[n - 1],
            o.detail,
            t.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().ok();
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failing criteria: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all criteria pass");
}
