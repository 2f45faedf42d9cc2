use crate::error::{ensure, Result};

/// Slice permutation applied before the intra-node all-to-all so that the
/// inter-node all-to-all lands partition `r` on rank `r`.
///
/// Within every stage block of `T = X * Y` slice ids the permutation is the
/// transpose of the `Y x X` index grid: `f(p) = s*T + (r mod X)*Y + r div X`
/// for `p = s*T + r`. The reordered array satisfies `A'[f(p)] = A[p]`, so
/// `A'[j]` holds slice `g(j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReorderPermutation {
    gpus_per_node: usize,
    nodes: usize,
    stages: usize,
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

pub fn reorder_mapping(gpus_per_node: usize, nodes: usize, stages: usize) -> Result<ReorderPermutation> {
    ensure!(
        gpus_per_node >= 1 && nodes >= 1 && stages >= 1,
        Validation,
        "reorder mapping needs X, Y, S >= 1 (got {gpus_per_node}, {nodes}, {stages})"
    );
    let t = gpus_per_node * nodes;
    let n = t * stages;
    let forward: Vec<usize> = (0..n)
        .map(|p| {
            let (s, r) = (p / t, p % t);
            s * t + (r % gpus_per_node) * nodes + r / gpus_per_node
        })
        .collect();
    let inverse: Vec<usize> = (0..n)
        .map(|j| {
            let (s, r) = (j / t, j % t);
            s * t + (r % nodes) * gpus_per_node + r / nodes
        })
        .collect();
    Ok(ReorderPermutation {
        gpus_per_node,
        nodes,
        stages,
        forward,
        inverse,
    })
}

impl ReorderPermutation {
    /// New position of slice `p`.
    pub fn f(&self, p: usize) -> usize {
        self.forward[p]
    }

    /// Slice id stored at new position `j`.
    pub fn g(&self, j: usize) -> usize {
        self.inverse[j]
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    /// Slice ids listed in new-position order.
    pub fn new_position_order(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Slices per stage block, `X * Y`.
    pub fn block_len(&self) -> usize {
        self.gpus_per_node * self.nodes
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &p)| i == p)
    }
}
