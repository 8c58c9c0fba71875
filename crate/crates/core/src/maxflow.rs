//! Dinic max-flow on integer capacities. Seam cuts scale their float weights
//! to u64 before solving, so the flow itself is exact and deterministic.

/// Flow network with paired forward/reverse edges (reverse id = id ^ 1).
#[derive(Debug, Clone)]
pub struct MaxFlow {
    adj: Vec<Vec<u32>>,
    to: Vec<u32>,
    cap: Vec<u64>,
}

impl MaxFlow {
    pub fn new(nodes: usize) -> MaxFlow {
        MaxFlow { adj: vec![Vec::new(); nodes], to: Vec::new(), cap: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Adds a directed edge with capacity `cap_uv` plus its reverse with
    /// `cap_vu` (zero for a purely directed edge).
    pub fn add_edge(&mut self, u: usize, v: usize, cap_uv: u64, cap_vu: u64) {
        debug_assert!(u < self.adj.len() && v < self.adj.len() && u != v);
        let id = self.to.len() as u32;
        self.to.push(v as u32);
        self.cap.push(cap_uv);
        self.to.push(u as u32);
        self.cap.push(cap_vu);
        self.adj[u].push(id);
        self.adj[v].push(id + 1);
    }

    /// Dinic: BFS level graph, then DFS blocking flows until the sink is
    /// unreachable. Returns the max-flow value.
    pub fn max_flow(&mut self, source: usize, sink: usize) -> u64 {
        assert_ne!(source, sink);
        let n = self.adj.len();
        let mut total = 0u64;
        let mut level = vec![-1i32; n];
        let mut iter = vec![0usize; n];
        loop {
            level.iter_mut().for_each(|l| *l = -1);
            level[source] = 0;
            let mut queue = std::collections::VecDeque::new();
            queue.push_back(source);
            while let Some(u) = queue.pop_front() {
                for &e in &self.adj[u] {
                    let v = self.to[e as usize] as usize;
                    if self.cap[e as usize] > 0 && level[v] < 0 {
                        level[v] = level[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            if level[sink] < 0 {
                return total;
            }
            iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let pushed = self.dfs(source, sink, u64::MAX, &level, &mut iter);
                if pushed == 0 {
                    break;
                }
                total += pushed;
            }
        }
    }

    fn dfs(&mut self, u: usize, sink: usize, limit: u64, level: &[i32], iter: &mut [usize]) -> u64 {
        if u == sink {
            return limit;
        }
        while iter[u] < self.adj[u].len() {
            let e = self.adj[u][iter[u]] as usize;
            let v = self.to[e] as usize;
            if self.cap[e] > 0 && level[v] == level[u] + 1 {
                let pushed = self.dfs(v, sink, limit.min(self.cap[e]), level, iter);
                if pushed > 0 {
                    self.cap[e] -= pushed;
                    self.cap[e ^ 1] += pushed;
                    return pushed;
                }
            }
            iter[u] += 1;
        }
        0
    }

    /// Source side of the minimum cut: nodes reachable in the residual graph.
    /// Call after `max_flow`.
    pub fn min_cut_side(&self, source: usize) -> Vec<bool> {
        let mut side = vec![false; self.adj.len()];
        side[source] = true;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e as usize] as usize;
                if self.cap[e as usize] > 0 && !side[v] {
                    side[v] = true;
                    queue.push_back(v);
                }
            }
        }
        side
    }
}
