//! Min-cost max-flow via successive shortest paths (Bellman-Ford).
//!
//! Costs may be negative as long as the initial residual graph is free of
//! negative cycles; the assignment networks built on top of this are
//! layered DAGs, which satisfies that. Edge order is fixed by insertion,
//! making augmentation order (and therefore tie-breaking) deterministic.

#[derive(Clone, Debug)]
struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

pub struct MinCostFlow {
    n: usize,
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

pub struct FlowResult {
    pub flow: i64,
    pub cost: f64,
}

impl MinCostFlow {
    pub fn new(n: usize) -> Self {
        MinCostFlow { n, edges: Vec::new(), adj: vec![Vec::new(); n] }
    }

    /// Returns the edge index; the reverse edge is at index + 1.
    pub fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> usize {
        let id = self.edges.len();
        self.adj[from].push(id);
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(id + 1);
        self.edges.push(Edge { to: from, cap: 0, cost: -cost });
        id
    }

    /// Flow currently on the forward edge `id` (residual of its reverse).
    pub fn flow_on(&self, id: usize) -> i64 {
        self.edges[id ^ 1].cap
    }

    pub fn solve(&mut self, source: usize, sink: usize) -> FlowResult {
        let mut total_flow = 0i64;
        let mut total_cost = 0.0;
        loop {
            // Bellman-Ford shortest path over the residual graph.
            let mut dist = vec![f64::INFINITY; self.n];
            let mut prev_edge = vec![usize::MAX; self.n];
            dist[source] = 0.0;
            for _ in 0..self.n {
                let mut changed = false;
                for u in 0..self.n {
                    if dist[u].is_infinite() {
                        continue;
                    }
                    for &eid in &self.adj[u] {
                        let e = &self.edges[eid];
                        if e.cap > 0 && dist[u] + e.cost < dist[e.to] {
                            dist[e.to] = dist[u] + e.cost;
                            prev_edge[e.to] = eid;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if dist[sink].is_infinite() {
                break;
            }
            // bottleneck along the path
            let mut bottleneck = i64::MAX;
            let mut v = sink;
            while v != source {
                let eid = prev_edge[v];
                bottleneck = bottleneck.min(self.edges[eid].cap);
                v = self.edges[eid ^ 1].to;
            }
            let mut v = sink;
            while v != source {
                let eid = prev_edge[v];
                self.edges[eid].cap -= bottleneck;
                self.edges[eid ^ 1].cap += bottleneck;
                total_cost += self.edges[eid].cost * bottleneck as f64;
                v = self.edges[eid ^ 1].to;
            }
            total_flow += bottleneck;
        }
        FlowResult { flow: total_flow, cost: total_cost }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_max_flow() {
        // diamond: s -> a -> t, s -> b -> t, caps 1 each
        let mut g = MinCostFlow::new(4);
        g.add_edge(0, 1, 1, 0.0);
        g.add_edge(0, 2, 1, 0.0);
        g.add_edge(1, 3, 1, 0.0);
        g.add_edge(2, 3, 1, 0.0);
        let r = g.solve(0, 3);
        assert_eq!(r.flow, 2);
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn prefers_cheaper_path() {
        let mut g = MinCostFlow::new(4);
        let e_cheap = g.add_edge(0, 1, 1, 1.0);
        let e_dear = g.add_edge(0, 2, 1, 5.0);
        g.add_edge(1, 3, 1, 0.0);
        g.add_edge(2, 3, 1, 0.0);
        let r = g.solve(0, 3);
        assert_eq!(r.flow, 2);
        assert_eq!(r.cost, 6.0);
        assert_eq!(g.flow_on(e_cheap), 1);
        assert_eq!(g.flow_on(e_dear), 1);
    }

    #[test]
    fn handles_negative_costs_on_a_dag() {
        // choosing the negative-cost edge must win
        let mut g = MinCostFlow::new(4);
        let neg = g.add_edge(0, 1, 1, -2.0);
        let pos = g.add_edge(0, 2, 1, 1.0);
        g.add_edge(1, 3, 1, 0.0);
        g.add_edge(2, 3, 1, 0.0);
        // only one unit can reach the sink
        let mut g2 = MinCostFlow::new(4);
        let neg2 = g2.add_edge(0, 1, 1, -2.0);
        let pos2 = g2.add_edge(0, 2, 1, 1.0);
        g2.add_edge(1, 3, 1, 0.0);
        g2.add_edge(2, 3, 0, 0.0);
        let r2 = g2.solve(0, 3);
        assert_eq!(r2.flow, 1);
        assert_eq!(r2.cost, -2.0);
        assert_eq!(g2.flow_on(neg2), 1);
        assert_eq!(g2.flow_on(pos2), 0);

        let r = g.solve(0, 3);
        assert_eq!(r.flow, 2);
        assert_eq!(r.cost, -1.0);
        assert_eq!(g.flow_on(neg), 1);
        assert_eq!(g.flow_on(pos), 1);
    }
}
