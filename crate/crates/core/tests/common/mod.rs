#![allow(dead_code)]

use coconut::model::{ModelConfig, Transformer};
use coconut::tensor::Real;
use std::io::Write;

pub fn tiny_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        context: 64,
        vocab_size,
        tie_head: false,
        seed,
    }
}

pub fn tiny<T: Real>(vocab_size: usize, seed: u64) -> Transformer<T> {
    Transformer::new(tiny_config(vocab_size, seed)).expect("valid config")
}

/// Writes one verdict line straight to stdout, past the harness capture, and
/// fails the test when `ok` is false.
pub fn verdict(criterion: u32, title: &str, ok: bool, detail: impl AsRef<str>) {
    let line = format!(
        "criterion {criterion:>2} {}: {title} ({})\n",
        if ok { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {criterion} failed: {}", detail.as_ref());
}
