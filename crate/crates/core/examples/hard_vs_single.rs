//! Single against Hard support sampling, scored on held-out documents.
//!
//! cargo run --release --example hard_vs_single -- seeds=3

use tpn::bench::HardVsSingle;

fn main() -> tpn::Result<()> {
    let mut bench = HardVsSingle::default();
    let mut seeds = 3;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        match k {
            "seeds" => seeds = v.parse().expect("seeds=N"),
            "eval_episodes" => bench.eval_episodes = v.parse().expect("eval_episodes=N"),
            _ => match k.strip_prefix("gen.") {
                Some(field) => tpn::trainer::set_field(&mut bench.generator, field, v)?,
                None => bench.config.set(k, v)?,
            },
        }
    }
    let mut deltas = Vec::new();
    for seed in 1..=seeds {
        let s = bench.run(seed)?;
        println!("seed {seed}: single {:.4}  hard {:.4}  delta {:+.4}", s.single, s.hard, s.delta());
        deltas.push(s.delta());
    }
    println!("mean delta {:+.4}", deltas.iter().sum::<f64>() / deltas.len() as f64);
    Ok(())
}
