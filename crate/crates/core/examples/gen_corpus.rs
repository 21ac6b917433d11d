//! Generate a seeded synthetic corpus, print its statistics and optionally
//! write it as DocRED JSON.
//!
//! cargo run --example gen_corpus -- out=corpus.json relations=6 domain_shift=true

use tpn::corpus::{generate_synthetic_corpus, GeneratorConfig};
use tpn::trainer::set_field;

fn main() -> tpn::Result<()> {
    let mut gen = GeneratorConfig::default();
    let mut seed = 1;
    let mut out = None;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        match k {
            "seed" => seed = v.parse().expect("seed=N"),
            "out" => out = Some(v.to_string()),
            _ => set_field(&mut gen, k, v)?,
        }
    }
    let corpus = generate_synthetic_corpus(&gen, seed)?;
    println!(
        "{} documents, {} facts, relations {:?}, NOTA fraction {:.4}",
        corpus.len(),
        corpus.num_facts(),
        corpus.relation_inventory,
        corpus.nota_fraction()
    );
    let doc = &corpus.documents[0];
    println!("first document `{}`:", doc.doc_id);
    for sentence in &doc.sentences {
        println!("  {}", sentence.join(" "));
    }
    let name = |e: usize| &doc.entities[e].mentions[0].surface;
    for fact in &doc.facts {
        println!("  fact {} -{}-> {}", name(fact.head), fact.relation, name(fact.tail));
    }
    if let Some(path) = out {
        std::fs::write(&path, corpus.to_json()).map_err(|e| tpn::Error::io(&path, e))?;
        println!("wrote {path}");
    }
    Ok(())
}
