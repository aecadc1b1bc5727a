//! Synthetic graph-search questions: generation, rendering and exact oracles.

pub mod dataset;
pub mod graph;
pub mod oracle;
pub mod render;

pub use dataset::{
    generate_dataset, generate_instance, generate_split, prosqa_vocabulary, split_stats, DatasetStats, GeneratorConfig,
    RejectionCounts, Split, SplitSizes, SplitStats,
};
pub use graph::{build_graph, ConceptGraph};
pub use render::{ProblemInstance, Puzzle};
