//! Finite-difference checks of every differentiable op and the composed
//! model, over a few seeds.
//!
//! `cargo run --release --example gradcheck -- 10`

use lrformer::gradcheck::{run_suite, summarize};

fn main() -> lrformer::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let results = run_suite(&(0..n).collect::<Vec<_>>())?;
    for r in summarize(&results) {
        let tag = if r.passed { "ok  " } else { "FAIL" };
        println!("{tag} {:<28} worst seed {:>2}  max rel err {:.2e}  (tol {:.0e})", r.name, r.seed, r.max_rel_err, r.tol);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
