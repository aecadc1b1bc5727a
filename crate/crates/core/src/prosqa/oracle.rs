//! Exact path queries over small DAGs given as child adjacency lists.
//!
//! Paths are node sequences; a path of `n` nodes has `n - 1` edges.

use std::collections::VecDeque;

/// Hop distance from `src` to every node, `None` when unreachable.
pub fn bfs_distances(children: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; children.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].expect("queued nodes have a distance");
        for &v in &children[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn reachable(children: &[Vec<usize>], src: usize, dst: usize) -> bool {
    bfs_distances(children, src)[dst].is_some()
}

/// Nodes exactly `step` hops from `src`, ascending.
pub fn bfs_layer(children: &[Vec<usize>], src: usize, step: usize) -> Vec<usize> {
    bfs_distances(children, src)
        .iter()
        .enumerate()
        .filter(|(_, d)| **d == Some(step))
        .map(|(i, _)| i)
        .collect()
}

/// Shortest-path length in edges and every shortest path, by walking BFS
/// layers backwards from `dst`. Empty when unreachable.
pub fn shortest_paths(children: &[Vec<usize>], src: usize, dst: usize) -> (Option<usize>, Vec<Vec<usize>>) {
    let dist = bfs_distances(children, src);
    let Some(len) = dist[dst] else {
        return (None, Vec::new());
    };
    let mut parents = vec![Vec::new(); children.len()];
    for (u, ch) in children.iter().enumerate() {
        for &v in ch {
            if let (Some(du), Some(dv)) = (dist[u], dist[v]) {
                if du + 1 == dv {
                    parents[v].push(u);
                }
            }
        }
    }
    let mut partial = vec![vec![dst]];
    for _ in 0..len {
        partial = partial
            .into_iter()
            .flat_map(|p| {
                let head = p[0];
                parents[head].iter().map(move |&u| {
                    let mut q = Vec::with_capacity(p.len() + 1);
                    q.push(u);
                    q.extend_from_slice(&p);
                    q
                })
            })
            .collect();
    }
    partial.sort();
    (Some(len), partial)
}

/// Every directed path starting at `src` (including the single-node path), by DFS.
pub fn all_paths_from(children: &[Vec<usize>], src: usize) -> Vec<Vec<usize>> {
    fn go(children: &[Vec<usize>], path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(path.clone());
        let u = *path.last().expect("non-empty");
        for &v in &children[u] {
            if !path.contains(&v) {
                path.push(v);
                go(children, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(children, &mut vec![src], &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightMode {
    #[default]
    Shortest,
    Longest,
}

/// Distance from `node` down to the leaf set. Leaves have height 0.
pub fn node_height(children: &[Vec<usize>], node: usize, mode: HeightMode) -> usize {
    fn go(children: &[Vec<usize>], u: usize, mode: HeightMode, memo: &mut [Option<usize>]) -> usize {
        if let Some(h) = memo[u] {
            return h;
        }
        let h = if children[u].is_empty() {
            0
        } else {
            let hs = children[u].iter().map(|&v| go(children, v, mode, memo));
            1 + match mode {
                HeightMode::Shortest => hs.min().expect("has children"),
                HeightMode::Longest => hs.max().expect("has children"),
            }
        };
        memo[u] = Some(h);
        h
    }
    go(children, node, mode, &mut vec![None; children.len()])
}

/// Labels recomputed from reachability: bit 0 if reachable from node 0, bit 1 from node 1.
pub fn reachability_labels(children: &[Vec<usize>]) -> Vec<u8> {
    let from0 = bfs_distances(children, 0);
    let from1 = bfs_distances(children, 1);
    (0..children.len())
        .map(|i| from0[i].is_some() as u8 | ((from1[i].is_some() as u8) << 1))
        .collect()
}
