//! Reverse selection-based expert assignment.
//!
//! Experts select clients: relevance scores from embedding dot products,
//! column-wise softmax into selection probabilities, then an exact
//! constrained assignment per module. The optimization is solved as a
//! min-cost max-flow with arc lower bounds (the constraint matrix is
//! totally unimodular, so flows are integral and exactly optimal),
//! replacing a generic MILP solver.

use crate::error::{Error, Result};
use crate::flow::MinCostFlow;
use crate::tensor::Tensor;

/// Relevance scores s[i][j] between client i's data and expert j, [C x E].
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix(pub Tensor);

/// Column-softmax of the relevance scores: p[i][j] is the probability
/// that expert j selects client i. Every column sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionProbabilities(pub Tensor);

#[derive(Clone, Debug)]
pub struct AssignmentProblem {
    pub probs: SelectionProbabilities,
    /// Minimum experts per client.
    pub min_per_client: usize,
    /// Clients selected per expert (exact).
    pub clients_per_expert: usize,
    /// Maximum experts per client.
    pub max_per_client: usize,
}

/// Binary assignment d[i][j]: expert j serves client i.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub assigned: Vec<Vec<bool>>,
}

impl AssignmentMatrix {
    pub fn clients(&self) -> usize {
        self.assigned.len()
    }

    pub fn experts(&self) -> usize {
        self.assigned.first().map_or(0, |r| r.len())
    }

    /// Row-major objective value under the given probabilities.
    pub fn objective(&self, probs: &SelectionProbabilities) -> f64 {
        let mut s = 0.0;
        for (i, row) in self.assigned.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                if d {
                    s += probs.0.at(i, j);
                }
            }
        }
        s
    }

    /// Independent constraint audit (never trusts the solver).
    pub fn satisfies(&self, prob: &AssignmentProblem) -> bool {
        let c = self.clients();
        let e = self.experts();
        for row in &self.assigned {
            let deg = row.iter().filter(|&&d| d).count();
            if deg < prob.min_per_client || deg > prob.max_per_client {
                return false;
            }
        }
        for j in 0..e {
            let deg = (0..c).filter(|&i| self.assigned[i][j]).count();
            if deg != prob.clients_per_expert {
                return false;
            }
        }
        true
    }
}

/// s[i][j] = dot(client_i, expert_j) / sqrt(scale_dim).
pub fn relevance(
    client_embeddings: &[Vec<f64>],
    expert_embeddings: &[Vec<f64>],
    scale_dim: usize,
) -> Result<RelevanceMatrix> {
    let c = client_embeddings.len();
    let e = expert_embeddings.len();
    let r = client_embeddings.first().map_or(0, |v| v.len());
    if client_embeddings.iter().any(|v| v.len() != r)
        || expert_embeddings.iter().any(|v| v.len() != r)
    {
        return Err(Error::Shape("relevance: embedding dimensions differ".into()));
    }
    let scale = (scale_dim as f64).sqrt();
    let mut s = Tensor::zeros(c, e);
    for i in 0..c {
        for j in 0..e {
            let dot: f64 =
                client_embeddings[i].iter().zip(&expert_embeddings[j]).map(|(a, b)| a * b).sum();
            *s.at_mut(i, j) = dot / scale;
        }
    }
    Ok(RelevanceMatrix(s))
}

/// Column-wise softmax (normalize over clients for each expert).
pub fn selection_probabilities(scores: &RelevanceMatrix) -> SelectionProbabilities {
    let (c, e) = scores.0.shape();
    let mut p = Tensor::zeros(c, e);
    for j in 0..e {
        let max = (0..c).map(|i| scores.0.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..c {
            let v = (scores.0.at(i, j) - max).exp();
            *p.at_mut(i, j) = v;
            sum += v;
        }
        for i in 0..c {
            *p.at_mut(i, j) /= sum;
        }
    }
    SelectionProbabilities(p)
}

pub fn check_feasible(
    clients: usize,
    experts: usize,
    min_per_client: usize,
    clients_per_expert: usize,
    max_per_client: usize,
) -> Result<()> {
    if clients_per_expert > clients {
        return Err(Error::Infeasible(format!(
            "k_c = {} exceeds client count C = {}",
            clients_per_expert, clients
        )));
    }
    if min_per_client > max_per_client {
        return Err(Error::Infeasible(format!(
            "k_e = {} exceeds b = {}",
            min_per_client, max_per_client
        )));
    }
    if clients * min_per_client > experts * clients_per_expert {
        return Err(Error::Infeasible(format!(
            "C*k_e = {} > E*k_c = {}",
            clients * min_per_client,
            experts * clients_per_expert
        )));
    }
    if experts * clients_per_expert > clients * max_per_client {
        return Err(Error::Infeasible(format!(
            "E*k_c = {} > C*b = {}",
            experts * clients_per_expert,
            clients * max_per_client
        )));
    }
    Ok(())
}

/// Exact maximizer of <P, D> subject to the degree constraints.
pub fn solve_assignment(prob: &AssignmentProblem) -> Result<AssignmentMatrix> {
    let (c, e) = prob.probs.0.shape();
    check_feasible(c, e, prob.min_per_client, prob.clients_per_expert, prob.max_per_client)?;

    // Node layout: experts, clients, then S, T, super-source, super-sink.
    let expert_node = |j: usize| j;
    let client_node = |i: usize| e + i;
    let s = e + c;
    let t = e + c + 1;
    let super_s = e + c + 2;
    let super_t = e + c + 3;
    let mut g = MinCostFlow::new(e + c + 4);
    let mut excess = vec![0i64; e + c + 2];

    // S -> expert arcs carry exactly k_c (lower = upper), eliminated into excess.
    for j in 0..e {
        excess[expert_node(j)] += prob.clients_per_expert as i64;
        excess[s] -= prob.clients_per_expert as i64;
    }
    // expert -> client unit arcs, cost -p (maximization).
    let mut cell_edges = vec![vec![0usize; e]; c];
    for j in 0..e {
        for i in 0..c {
            cell_edges[i][j] = g.add_edge(expert_node(j), client_node(i), 1, -prob.probs.0.at(i, j));
        }
    }
    // client -> T arcs with bounds [k_e, b].
    for i in 0..c {
        g.add_edge(
            client_node(i),
            t,
            (prob.max_per_client - prob.min_per_client) as i64,
            0.0,
        );
        excess[t] += prob.min_per_client as i64;
        excess[client_node(i)] -= prob.min_per_client as i64;
    }
    // close the circulation
    g.add_edge(t, s, i64::MAX / 4, 0.0);

    let mut required = 0i64;
    for (v, &x) in excess.iter().enumerate() {
        if x > 0 {
            g.add_edge(super_s, v, x, 0.0);
            required += x;
        } else if x < 0 {
            g.add_edge(v, super_t, -x, 0.0);
        }
    }
    let result = g.solve(super_s, super_t);
    if result.flow != required {
        return Err(Error::Infeasible("lower-bound circulation is not saturable".into()));
    }

    let assigned = (0..c)
        .map(|i| (0..e).map(|j| g.flow_on(cell_edges[i][j]) == 1).collect())
        .collect();
    let d = AssignmentMatrix { assigned };
    debug_assert!(d.satisfies(prob));
    Ok(d)
}

/// Exhaustive reference optimum for tiny instances (C*E <= 20).
pub fn enumerate_oracle(prob: &AssignmentProblem) -> Result<AssignmentMatrix> {
    let (c, e) = prob.probs.0.shape();
    if c * e > 20 {
        return Err(Error::Invalid(format!("enumerate_oracle: C*E = {} exceeds 20", c * e)));
    }
    check_feasible(c, e, prob.min_per_client, prob.clients_per_expert, prob.max_per_client)?;

    // all k_c-subsets of clients, in lexicographic order
    let combos = k_subsets(c, prob.clients_per_expert);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut choice = vec![0usize; e];
    let mut row_counts = vec![0usize; c];
    search(prob, &combos, 0, &mut choice, &mut row_counts, 0.0, &mut best);
    let Some((_, picks)) = best else {
        return Err(Error::Infeasible("no feasible assignment in enumeration".into()));
    };
    let mut assigned = vec![vec![false; e]; c];
    for (j, &ci) in picks.iter().enumerate() {
        for &i in &combos[ci] {
            assigned[i][j] = true;
        }
    }
    Ok(AssignmentMatrix { assigned })
}

fn search(
    prob: &AssignmentProblem,
    combos: &[Vec<usize>],
    col: usize,
    choice: &mut Vec<usize>,
    row_counts: &mut Vec<usize>,
    acc: f64,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let (c, e) = prob.probs.0.shape();
    if col == e {
        if row_counts.iter().all(|&d| d >= prob.min_per_client) {
            let better = match best {
                Some((b, _)) => acc > *b,
                None => true,
            };
            if better {
                *best = Some((acc, choice[..e].to_vec()));
            }
        }
        return;
    }
    let remaining = e - col;
    for (ci, combo) in combos.iter().enumerate() {
        if combo.iter().any(|&i| row_counts[i] + 1 > prob.max_per_client) {
            continue;
        }
        // prune: can the remaining columns still lift every light row to k_e?
        let deficit: usize = (0..c)
            .map(|i| {
                let cnt = row_counts[i] + combo.contains(&i) as usize;
                prob.min_per_client.saturating_sub(cnt)
            })
            .sum();
        if deficit > (remaining - 1) * prob.clients_per_expert {
            continue;
        }
        choice[col] = ci;
        for &i in combo {
            row_counts[i] += 1;
        }
        let gain: f64 = combo.iter().map(|&i| prob.probs.0.at(i, col)).sum();
        search(prob, combos, col + 1, choice, row_counts, acc + gain, best);
        for &i in combo {
            row_counts[i] -= 1;
        }
    }
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(n, k, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(n, k, 0, &mut cur, &mut out);
    out
}

/// Per-client expert-id sets from a module's assignment matrix.
pub fn plan_from_assignment(d: &AssignmentMatrix) -> Vec<Vec<usize>> {
    d.assigned
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &x)| x).map(|(j, _)| j).collect())
        .collect()
}
