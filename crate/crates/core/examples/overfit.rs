//! Train on the default synthetic corpus and score fresh episodes over the
//! same relations.
//!
//! cargo run --release --example overfit -- episodes=2000 lr=3e-3

use std::time::Instant;

use tpn::bench::Overfit;

fn main() -> tpn::Result<()> {
    let mut bench = Overfit::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        match k.strip_prefix("gen.") {
            Some(field) => tpn::trainer::set_field(&mut bench.generator, field, v)?,
            None => bench.config.set(k, v)?,
        }
    }
    let start = Instant::now();
    let mut window = Vec::new();
    let report = bench.run(&mut |r| {
        window.push(r.loss);
        if r.step % 200 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:5}  loss {mean:.4}  lr {:.2e}", r.step, r.lr);
            window.clear();
        }
        Ok(())
    })?;
    for row in &report.per_relation {
        println!("{}  tp {} fp {} fn {}  f1 {:.3}", row.relation, row.tp, row.fp, row.fn_, row.f1);
    }
    println!(
        "macro F1 {:.4}  micro F1 {:.4}  ({:.1}s)",
        report.macro_f1,
        report.micro_f1,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
