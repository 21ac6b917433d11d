//! Learned NOTA prototypes against a single global NOTA vector. Training
//! relations use one set of look-alike context words; test relations are
//! unseen and appear with a disjoint set.
//!
//! cargo run --release --example transfer -- seeds=5 train_relations=32

use tpn::bench::Transfer;

fn main() -> tpn::Result<()> {
    let mut bench = Transfer::default();
    let mut seeds = 5;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        match k {
            "seeds" => seeds = v.parse().expect("seeds=N"),
            "test_relations" => bench.test_relations = v.parse().expect("test_relations=N"),
            "eval_episodes" => bench.eval_episodes = v.parse().expect("eval_episodes=N"),
            _ => match k.strip_prefix("gen.") {
                Some(field) => tpn::trainer::set_field(&mut bench.train_generator, field, v)?,
                None => bench.config.set(k, v)?,
            },
        }
    }
    let mut gaps = Vec::new();
    for seed in 1..=seeds {
        let s = bench.run(seed)?;
        println!("seed {seed}: learned NOTA {:.4}  global NOTA {:.4}  gap {:+.4}", s.learned, s.global, s.gap());
        gaps.push(s.gap());
    }
    println!("mean gap {:+.4}", gaps.iter().sum::<f64>() / gaps.len() as f64);
    Ok(())
}
