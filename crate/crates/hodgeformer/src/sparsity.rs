//! Attention target sets: for each element, a small set of elements it may
//! attend to, built from a BFS-local neighborhood plus random targets drawn
//! from the same connected component.
//!
//! For `n` elements the budget is `s = ceil(sqrt(n))` (overridable), split
//! local:random = 4:1 by `random = round(s / 5)`, computed as the integer
//! expression `(2 * s + 5) / 10`. The element itself is always first and
//! counts toward the local share. Elements in components smaller than `s`
//! get the whole component (and are flagged as truncated).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::VecDeque;

/// Per-element attention targets over one element kind.
#[derive(Debug, Clone, Serialize)]
pub struct SparsityPattern {
    /// `targets[i]` lists the elements row `i` attends to; `targets[i][0] == i`.
    pub targets: Vec<Vec<usize>>,
    /// Total budget per element.
    pub s: usize,
    pub local_count: usize,
    pub random_count: usize,
    /// Elements whose connected component had fewer than `s` members.
    pub truncated: Vec<usize>,
}

/// Budget for `n` elements: the smallest integer `s` with `s * s >= n`.
pub fn budget(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    s
}

/// `round(s / 5)` in pure integer arithmetic.
pub fn random_share(s: usize) -> usize {
    (2 * s + 5) / 10
}

/// Builds the pattern over an adjacency structure (neighbor lists sorted
/// ascending). Random targets are resampled from `seed`; BFS-local targets
/// are deterministic regardless of the seed.
pub fn build_pattern(adj: &[Vec<usize>], s_override: Option<usize>, seed: u64) -> SparsityPattern {
    let n = adj.len();
    let s = s_override.unwrap_or_else(|| budget(n)).min(n).max(1);
    let random_count = random_share(s);
    let local_count = s - random_count;

    let component = component_labels(adj);
    let mut component_members: Vec<Vec<usize>> = Vec::new();
    for (i, &c) in component.iter().enumerate() {
        if c == component_members.len() {
            component_members.push(Vec::new());
        }
        component_members[c].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::with_capacity(n);
    let mut truncated = Vec::new();
    let mut in_set = vec![false; n];

    for i in 0..n {
        let members = &component_members[component[i]];
        if members.len() < s {
            // The whole component, BFS order from i, flagged as truncated.
            let set = bfs_collect(adj, i, members.len(), &mut in_set);
            debug_assert_eq!(set.len(), members.len());
            for &t in &set {
                in_set[t] = false;
            }
            truncated.push(i);
            targets.push(set);
            continue;
        }
        let mut set = bfs_collect(adj, i, local_count, &mut in_set);
        // Candidate pool: the rest of the component in ascending order, then
        // a partial Fisher-Yates draw for sampling without replacement.
        let mut pool: Vec<usize> = members.iter().copied().filter(|&m| !in_set[m]).collect();
        let take = random_count.min(pool.len());
        for k in 0..take {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
            set.push(pool[k]);
        }
        for &t in &set {
            in_set[t] = false;
        }
        targets.push(set);
    }

    SparsityPattern {
        targets,
        s,
        local_count,
        random_count,
        truncated,
    }
}

/// Dense pattern (every element attends to everything in its component is
/// not enough here: the dense oracle wants all `n` targets). Produced by
/// `s_override = n`; this helper names that intent.
pub fn dense_pattern(adj: &[Vec<usize>], seed: u64) -> SparsityPattern {
    build_pattern(adj, Some(adj.len()), seed)
}

/// Each element attends only to itself. Attention through this pattern is the
/// identity map; used by operator diagnostics and the self-only ablation.
pub fn self_only(n: usize) -> SparsityPattern {
    SparsityPattern {
        targets: (0..n).map(|i| vec![i]).collect(),
        s: 1,
        local_count: 1,
        random_count: 0,
        truncated: Vec::new(),
    }
}

/// BFS from `start` (FIFO; neighbor lists are ascending so ties break toward
/// lower ids) collecting up to `limit` elements including `start`. Marks
/// collected elements in `in_set`; the caller clears them.
fn bfs_collect(adj: &[Vec<usize>], start: usize, limit: usize, in_set: &mut [bool]) -> Vec<usize> {
    let mut set = Vec::with_capacity(limit);
    let mut queue = VecDeque::new();
    in_set[start] = true;
    queue.push_back(start);
    set.push(start);
    'outer: while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !in_set[v] {
                in_set[v] = true;
                queue.push_back(v);
                set.push(v);
                if set.len() == limit {
                    break 'outer;
                }
            }
        }
    }
    set
}

fn component_labels(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if label[i] != usize::MAX {
            continue;
        }
        label[i] = next;
        queue.push_back(i);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    label
}

/// Serializable dump of a pattern for the debug interface.
#[derive(Debug, Serialize)]
pub struct PatternDump<'a> {
    pub element_kind: &'a str,
    pub n: usize,
    pub s: usize,
    pub local_count: usize,
    pub random_count: usize,
    pub truncated: &'a [usize],
    pub targets: &'a [Vec<usize>],
}

impl SparsityPattern {
    pub fn dump<'a>(&'a self, element_kind: &'a str) -> PatternDump<'a> {
        PatternDump {
            element_kind,
            n: self.targets.len(),
            s: self.s,
            local_count: self.local_count,
            random_count: self.random_count,
            truncated: &self.truncated,
            targets: &self.targets,
        }
    }
}
