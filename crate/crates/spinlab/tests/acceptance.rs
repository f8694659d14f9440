//! Acceptance suite. Pass criterion numbers as arguments to run a subset.

use spinlab::selftest::{run, CRITERIA};

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for &(id, _, _) in CRITERIA.iter() {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = run(id).expect("criterion is listed");
        println!("{}", o.line());
        ran += 1;
        if !o.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {ran} criteria passed");
    } else {
        println!("acceptance: {} of {ran} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
