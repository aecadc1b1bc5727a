//! Incremental labeled DAG construction.

use rand::Rng;

use crate::error::{Error, Result};

pub const POISSON_MEAN: f64 = 1.5;

/// Poisson draw by multiplying uniforms until the product drops below `e^-λ`.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> usize {
    assert!(lambda > 0.0, "poisson rate must be positive");
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut p = rng.random::<f64>();
    while p > limit {
        k += 1;
        p *= rng.random::<f64>();
    }
    k
}

/// Draws `n` distinct items one at a time, each with probability proportional
/// to its weight among those not yet drawn. Returns indices into `weights`.
pub fn weighted_sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Data(format!("invalid sampling weight {w}")));
    }
    let n = n.min(weights.len());
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let mut pick = remaining.len() - 1;
        if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            for (j, &i) in remaining.iter().enumerate() {
                if r < weights[i] {
                    pick = j;
                    break;
                }
                r -= weights[i];
            }
        } else {
            pick = rng.random_range(0..remaining.len());
        }
        out.push(remaining.remove(pick));
    }
    Ok(out)
}

/// Labels: bit 0 set for descendants of node 0, bit 1 for descendants of node 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptGraph {
    /// `(from, to)` with `from < to`.
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
    pub groups: [Vec<usize>; 4],
    /// Creation-time depth: roots 0, otherwise one more than the deepest parent.
    pub depth: Vec<usize>,
}

impl ConceptGraph {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.len()];
        for &(a, b) in &self.edges {
            ch[a].push(b);
        }
        ch
    }

    pub fn parents(&self) -> Vec<Vec<usize>> {
        let mut pa = vec![Vec::new(); self.len()];
        for &(a, b) in &self.edges {
            pa[b].push(a);
        }
        pa
    }

    pub fn roots(&self) -> Vec<usize> {
        let pa = self.parents();
        (0..self.len()).filter(|&i| pa[i].is_empty()).collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        let ch = self.children();
        (0..self.len()).filter(|&i| ch[i].is_empty()).collect()
    }
}

/// Builds an `n`-node graph: nodes 0 and 1 are seeds, every later node draws
/// a Poisson number of parents from a label-restricted candidate pool, with
/// deeper candidates favored.
pub fn build_graph<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ConceptGraph {
    assert!(n >= 3, "graph needs at least 3 nodes");
    let mut g = ConceptGraph {
        edges: Vec::new(),
        labels: vec![1, 2],
        groups: [vec![], vec![0], vec![1], vec![]],
        depth: vec![0, 0],
    };
    for idx in 2..n {
        let mut n_in = sample_poisson(rng, POISSON_MEAN);
        let r = rng.random::<f64>();
        let mut candidates: Vec<usize> = if r <= 0.35 {
            g.groups[0].iter().chain(&g.groups[1]).copied().collect()
        } else if r <= 0.7 {
            g.groups[0].iter().chain(&g.groups[2]).copied().collect()
        } else {
            (0..idx).collect()
        };
        candidates.sort_unstable();
        n_in = n_in.min(candidates.len());
        let weights: Vec<f64> = candidates.iter().map(|&c| g.depth[c] as f64 * 1.5 + 1.0).collect();
        let picks = weighted_sample_without_replacement(&weights, n_in, rng).expect("weights are at least one");
        let mut label = 0u8;
        let mut depth = 0;
        for p in picks {
            let parent = candidates[p];
            label |= g.labels[parent];
            depth = depth.max(g.depth[parent] + 1);
            g.edges.push((parent, idx));
        }
        g.groups[label as usize].push(idx);
        g.labels.push(label);
        g.depth.push(depth);
    }
    g
}
