//! Compare analytic gradients of the full episode loss with central
//! differences on a tiny model.
//!
//! cargo run --release --example gradcheck -- 2

use tpn::gradcheck::{run, tiny_fixture, DEFAULT_STEP, DEFAULT_THRESHOLD};

fn main() -> tpn::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let fixture = tiny_fixture(seed)?;
    println!(
        "episode with {} documents, {} support, {} parameter tensors",
        fixture.plan.docs.len(),
        fixture.plan.num_support,
        fixture.params.len()
    );
    let report = run(&fixture, DEFAULT_STEP, DEFAULT_THRESHOLD)?;
    println!("{report}");
    Ok(())
}
