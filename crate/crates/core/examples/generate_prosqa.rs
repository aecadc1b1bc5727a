//! Samples a few graph-reasoning puzzles and summarizes a larger batch.
//!
//! `cargo run --release --example generate_prosqa -- [seed]`

use coconut::prosqa::{generate_split, split_stats, GeneratorConfig, Split};

fn main() -> coconut::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = GeneratorConfig::default();
    let (insts, rejected) = generate_split(&cfg, seed, Split::Train, 500)?;

    for inst in insts.iter().take(2) {
        let ex = &inst.example;
        println!("question: {}", ex.question);
        for (i, s) in ex.steps.iter().enumerate() {
            println!("  step {}: {s}", i + 1);
        }
        println!("answer:   {}\n", ex.answer);
    }

    let s = split_stats(&insts, &rejected);
    println!("{} instances", s.instances);
    println!("  nodes {:.2} (mentioned {:.2}), edges {:.2}", s.mean_nodes, s.mean_mentioned_nodes, s.mean_edges);
    println!("  shortest path {:.2} hops, {:.2} shortest paths", s.mean_shortest_path_len, s.mean_shortest_path_count);
    println!("  correct option first {:.3}, rejected graphs {}", s.correct_first_rate, s.rejected_graphs.total());
    Ok(())
}
