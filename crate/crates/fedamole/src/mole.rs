//! Mixture-of-LoRA-experts adapter modules.
//!
//! The default router projects tokens into the rank-r subspace with a
//! token projection whose shape is independent of the expert count, so
//! heterogeneous expert sets aggregate cleanly under plain averaging.
//! A vanilla fixed-dimension router is kept for the -H ablation, and a
//! router-less degenerate form covers the single-expert FedIT baseline.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_row, NodeId, Tape};
use crate::backbone::{linear, InjectionPoint};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

/// One LoRA domain expert: delta = (alpha / r) * B A.
#[derive(Clone, Debug)]
pub struct LoraExpert {
    pub id: usize,
    /// [r x d] down projection; also produces the routing embedding h^e.
    pub a: Param,
    /// [d x r] up projection, zero at creation so the initial delta is zero.
    pub b: Param,
}

impl LoraExpert {
    pub fn init(id: usize, rank: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        LoraExpert {
            id,
            a: Param::trainable(Tensor::uniform(rank, dim, bound, rng)),
            b: Param::trainable(Tensor::zeros(dim, rank)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SharedExpert {
    pub a: Param,
    pub b: Param,
}

impl SharedExpert {
    pub fn init(rank: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        SharedExpert {
            a: Param::trainable(Tensor::uniform(rank, dim, bound, rng)),
            b: Param::trainable(Tensor::zeros(dim, rank)),
        }
    }
}

/// Router parameterization of a module.
#[derive(Clone, Debug)]
pub enum Router {
    /// Shape-invariant token projection W^t [r x d].
    TokenProjection { w: Param },
    /// Fixed-output router W_r [E_total x d]; logits of unassigned experts
    /// are masked to -inf before the softmax.
    Vanilla { w: Param, total_experts: usize },
    /// Degenerate single-expert module (p = 1), used by the FedIT baseline.
    None,
}

impl Router {
    pub fn token_projection(rank: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Router::TokenProjection { w: Param::trainable(Tensor::uniform(rank, dim, bound, rng)) }
    }

    pub fn vanilla(total_experts: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Router::Vanilla {
            w: Param::trainable(Tensor::uniform(total_experts, dim, bound, rng)),
            total_experts,
        }
    }
}

/// One adapter module instance as held by a client.
#[derive(Clone, Debug)]
pub struct MoleModule {
    pub point: InjectionPoint,
    pub shared: Option<SharedExpert>,
    pub router: Router,
    /// Assigned domain experts, ordered by ascending expert id.
    pub experts: Vec<LoraExpert>,
    /// k^e: experts activated per token.
    pub k_active: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
}

/// Per-token routing outcome for a single hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Probability per assigned expert, aligned with `MoleModule::experts`.
    pub probs: Vec<f64>,
    /// Indices (into `experts`) of the k^e selected experts.
    pub selected: Vec<usize>,
}

/// Batch statistics for the load-balance term.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadBalanceStats {
    /// Fraction of tokens whose argmax expert is j.
    pub dispatch_fraction: Vec<f64>,
    /// Mean routing probability of expert j.
    pub mean_probability: Vec<f64>,
}

/// Tape leaves for one binding of a module.
pub struct MoleBinding {
    shared: Option<(NodeId, NodeId)>,
    router: Option<NodeId>,
    experts: Vec<(NodeId, NodeId)>,
}

/// Graph handles produced by a module forward, used for the load-balance
/// loss and for embedding collection.
pub struct ModuleForward {
    pub y: NodeId,
    /// Routing probabilities over assigned experts [T x E], when routed.
    pub probs: Option<NodeId>,
    /// Token embeddings h^t [T x r], token-projection router only.
    pub token_embeddings: Option<NodeId>,
    /// Expert embeddings h^e_j = A_j h [T x r], aligned with `experts`.
    pub expert_embeddings: Vec<NodeId>,
    /// Per-expert argmax token counts over the batch.
    pub argmax_counts: Vec<usize>,
    pub token_count: usize,
}

impl MoleModule {
    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> MoleBinding {
        MoleBinding {
            shared: self.shared.as_ref().map(|s| (tape.param(&s.a), tape.param(&s.b))),
            router: match &self.router {
                Router::TokenProjection { w } | Router::Vanilla { w, .. } => Some(tape.param(w)),
                Router::None => None,
            },
            experts: self.experts.iter().map(|e| (tape.param(&e.a), tape.param(&e.b))).collect(),
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape, binding: &MoleBinding) {
        if let (Some(s), Some((an, bn))) = (self.shared.as_mut(), binding.shared) {
            tape.absorb_grad(an, &mut s.a);
            tape.absorb_grad(bn, &mut s.b);
        }
        if let Some(rn) = binding.router {
            match &mut self.router {
                Router::TokenProjection { w } | Router::Vanilla { w, .. } => tape.absorb_grad(rn, w),
                Router::None => {}
            }
        }
        for (e, (an, bn)) in self.experts.iter_mut().zip(&binding.experts) {
            tape.absorb_grad(*an, &mut e.a);
            tape.absorb_grad(*bn, &mut e.b);
        }
    }

    /// Deterministic visitation order for the optimizer.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(s) = self.shared.as_mut() {
            f(&mut s.a);
            f(&mut s.b);
        }
        match &mut self.router {
            Router::TokenProjection { w } | Router::Vanilla { w, .. } => f(w),
            Router::None => {}
        }
        for e in &mut self.experts {
            f(&mut e.a);
            f(&mut e.b);
        }
    }

    /// Routing probabilities and top-k selection for a single hidden state.
    /// Ties in the top-k break toward the lower expert id.
    pub fn route_token(&self, h: &[f64]) -> Result<RoutingDecision> {
        let d = h.len();
        let e = self.experts.len();
        if e < self.k_active {
            return Err(Error::config(
                "hmole.k_e",
                format!("{} assigned experts but k_e = {}", e, self.k_active),
            ));
        }
        let probs = match &self.router {
            Router::TokenProjection { w } => {
                let ht = mat_vec(&w.value, h);
                let mut logits = Vec::with_capacity(e);
                for exp in &self.experts {
                    let he = mat_vec(&exp.a.value, h);
                    let dot: f64 = ht.iter().zip(&he).map(|(a, b)| a * b).sum();
                    logits.push(dot / (d as f64).sqrt());
                }
                let mut p = vec![0.0; e];
                softmax_row(&logits, &mut p);
                p
            }
            Router::Vanilla { w, .. } => {
                let full = mat_vec(&w.value, h);
                let logits: Vec<f64> = self.experts.iter().map(|ex| full[ex.id]).collect();
                let mut p = vec![0.0; e];
                softmax_row(&logits, &mut p);
                p
            }
            Router::None => vec![1.0; e],
        };
        Ok(RoutingDecision { selected: top_k_indices(&probs, self.k_active), probs })
    }

    /// Full-batch forward over hidden states h [T x d]; y = W h + shared
    /// delta + probability-weighted selected-expert deltas (Eq.-(11) form,
    /// no renormalization over the top-k subset).
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &MoleBinding,
        frozen_w: NodeId,
        h: NodeId,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ModuleForward> {
        let e = self.experts.len();
        if e == 0 {
            return Err(Error::config("hmole.e_total", "module has no assigned experts"));
        }
        if e < self.k_active {
            return Err(Error::config(
                "hmole.k_e",
                format!("{} assigned experts but k_e = {}", e, self.k_active),
            ));
        }
        let (t_len, d) = tape.value(h).shape();
        let scaling = self.lora_alpha / self.rank as f64;

        let mut y = linear(tape, h, frozen_w)?;

        // LoRA input dropout (training only; disabled by default).
        let (h_in, dropped) = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mut mask = Tensor::zeros(t_len, d);
                for v in mask.data.iter_mut() {
                    *v = if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 };
                }
                let mask = tape.constant(mask);
                (tape.mul(h, mask)?, true)
            }
            _ => (h, false),
        };

        if let Some((an, bn)) = binding.shared {
            let down = linear(tape, h_in, an)?;
            let up = linear(tape, down, bn)?;
            let delta = tape.scale(up, scaling);
            y = tape.add(y, delta)?;
        }

        // Expert embeddings h^e_j = A_j h (routing input, not dropped out).
        let mut expert_embeddings = Vec::with_capacity(e);
        for (an, _) in &binding.experts {
            expert_embeddings.push(linear(tape, h, *an)?);
        }

        let (probs, token_embeddings) = match (&self.router, binding.router) {
            (Router::TokenProjection { .. }, Some(wn)) => {
                let ht = linear(tape, h, wn)?;
                let mut cols = Vec::with_capacity(e);
                for &he in &expert_embeddings {
                    cols.push(tape.rowwise_dot(ht, he)?);
                }
                let logits = tape.concat_cols(&cols)?;
                let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
                (Some(tape.softmax_rows(logits)), Some(ht))
            }
            (Router::Vanilla { total_experts, .. }, Some(wn)) => {
                let full = linear(tape, h, wn)?;
                let mut mask = Tensor::zeros(t_len, *total_experts);
                mask.fill(-1e30);
                for ex in &self.experts {
                    for t in 0..t_len {
                        *mask.at_mut(t, ex.id) = 0.0;
                    }
                }
                let mask = tape.constant(mask);
                let masked = tape.add(full, mask)?;
                let p_full = tape.softmax_rows(masked);
                let mut cols = Vec::with_capacity(e);
                for ex in &self.experts {
                    cols.push(tape.slice_cols(p_full, ex.id, 1)?);
                }
                (Some(tape.concat_cols(&cols)?), None)
            }
            (Router::None, _) => (None, None),
            // bind() always produces a router leaf for routed modules
            (_, None) => unreachable!("routed module bound without a router leaf"),
        };

        let (argmax_counts, weight_node) = match probs {
            Some(p) => {
                let pv = tape.value(p).clone();
                let mut counts = vec![0usize; e];
                let mut select = Tensor::zeros(t_len, e);
                for t in 0..t_len {
                    let row = pv.row(t);
                    counts[argmax_low_tie(row)] += 1;
                    for &j in &top_k_indices(row, self.k_active) {
                        *select.at_mut(t, j) = 1.0;
                    }
                }
                let select = tape.constant(select);
                (counts, Some(tape.mul(p, select)?))
            }
            None => (vec![t_len; 1], None),
        };

        for (j, (_, bn)) in binding.experts.iter().enumerate() {
            // feature path uses the (possibly dropped) input
            let down = if dropped {
                linear(tape, h_in, binding.experts[j].0)?
            } else {
                expert_embeddings[j]
            };
            let up = linear(tape, down, *bn)?;
            let feat = tape.scale(up, scaling);
            let weighted = match weight_node {
                Some(w) => {
                    let col = tape.slice_cols(w, j, 1)?;
                    tape.mul_col_broadcast(feat, col)?
                }
                None => feat,
            };
            y = tape.add(y, weighted)?;
        }

        Ok(ModuleForward {
            y,
            probs,
            token_embeddings,
            expert_embeddings,
            argmax_counts,
            token_count: t_len,
        })
    }
}

/// Load-balance statistics from one forward pass.
pub fn batch_stats(tape: &Tape, fwd: &ModuleForward) -> Option<LoadBalanceStats> {
    let p = fwd.probs?;
    let pv = tape.value(p);
    let (t, e) = pv.shape();
    if t == 0 {
        return None;
    }
    let mut mean_probability = vec![0.0; e];
    for row in 0..t {
        for (j, mp) in mean_probability.iter_mut().enumerate() {
            *mp += pv.at(row, j);
        }
    }
    mean_probability.iter_mut().for_each(|x| *x /= t as f64);
    let dispatch_fraction =
        fwd.argmax_counts.iter().map(|&c| c as f64 / fwd.token_count as f64).collect();
    Some(LoadBalanceStats { dispatch_fraction, mean_probability })
}

/// L^LB = sum over modules of |E| * sum_j f_j * p_j.
pub fn load_balance_loss(stats: &BTreeMap<usize, LoadBalanceStats>) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Invalid("load_balance_loss: no statistics".into()));
    }
    let mut total = 0.0;
    for s in stats.values() {
        let e = s.dispatch_fraction.len() as f64;
        let coupled: f64 = s
            .dispatch_fraction
            .iter()
            .zip(&s.mean_probability)
            .map(|(f, p)| f * p)
            .sum();
        total += e * coupled;
    }
    Ok(total)
}

/// Graph-side load-balance term for one module: |E| * <f_const, col_mean(p)>.
/// The dispatch fractions enter as constants (argmax is non-differentiable).
pub fn load_balance_node(tape: &mut Tape, fwd: &ModuleForward) -> Result<Option<NodeId>> {
    let Some(p) = fwd.probs else { return Ok(None) };
    let e = tape.value(p).cols;
    let f: Vec<f64> =
        fwd.argmax_counts.iter().map(|&c| c as f64 / fwd.token_count as f64).collect();
    let p_mean = tape.col_mean(p);
    let coupled = tape.dot_const(p_mean, f)?;
    Ok(Some(tape.scale(coupled, e as f64)))
}

/// Running sums of token and expert embeddings for one batch of hidden
/// states, enabling exact means downstream.
pub struct EmbeddingSums {
    pub token_count: usize,
    /// Sum of h^t rows (token-projection router only).
    pub token_sum: Option<Vec<f64>>,
    /// (expert id, sum of h^e rows).
    pub expert_sums: Vec<(usize, Vec<f64>)>,
}

pub fn collect_embedding_sums(
    tape: &Tape,
    module: &MoleModule,
    fwd: &ModuleForward,
) -> Result<EmbeddingSums> {
    if fwd.token_count == 0 {
        return Err(Error::Invalid("collect_embedding_sums: zero tokens".into()));
    }
    let token_sum = fwd.token_embeddings.map(|ht| column_sums(tape.value(ht)));
    let expert_sums = module
        .experts
        .iter()
        .zip(&fwd.expert_embeddings)
        .map(|(e, &node)| (e.id, column_sums(tape.value(node))))
        .collect();
    Ok(EmbeddingSums { token_count: fwd.token_count, token_sum, expert_sums })
}

fn column_sums(t: &Tensor) -> Vec<f64> {
    let (n, k) = t.shape();
    let mut out = vec![0.0; k];
    for i in 0..n {
        for (j, o) in out.iter_mut().enumerate() {
            *o += t.at(i, j);
        }
    }
    out
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = m.shape();
    debug_assert_eq!(cols, v.len());
    (0..rows).map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn argmax_low_tie(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Indices of the k largest entries; ties break toward the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use crate::backbone::ProjectionKind;

    fn point() -> InjectionPoint {
        InjectionPoint { layer: 0, kind: ProjectionKind::Query }
    }

    fn module_with(experts: Vec<LoraExpert>, k: usize, rank: usize, dim: usize) -> MoleModule {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        MoleModule {
            point: point(),
            shared: Some(SharedExpert::init(rank, dim, &mut rng)),
            router: Router::token_projection(rank, dim, &mut rng),
            experts,
            k_active: k,
            rank,
            lora_alpha: 16.0,
            dropout: 0.0,
        }
    }

    #[test]
    fn identical_experts_route_uniformly() {
        let dim = 8;
        let rank = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proto = LoraExpert::init(0, rank, dim, &mut rng);
        let experts = (0..4)
            .map(|id| LoraExpert { id, a: proto.a.clone(), b: proto.b.clone() })
            .collect();
        let m = module_with(experts, 2, rank, dim);
        let h: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = m.route_token(&h).unwrap();
        for &p in &r.probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_known_logits() {
        // dot products scaled to (1, 0, 0) -> p = (e, 1, 1) / (e + 2)
        let mut p = vec![0.0; 3];
        softmax_row(&[1.0, 0.0, 0.0], &mut p);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 2.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 2.0)).abs() < 1e-12);
        assert!((p[0] - 0.576).abs() < 1e-3);
        assert!((p[1] - 0.212).abs() < 1e-3);
    }

    #[test]
    fn top_k_picks_largest_with_low_id_ties() {
        assert_eq!(top_k_indices(&[0.5, 0.3, 0.2], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.4, 0.4, 0.2], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.1, 0.4, 0.4], 1), vec![1]);
    }

    #[test]
    fn too_few_experts_is_a_config_error() {
        let dim = 8;
        let rank = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = module_with(vec![LoraExpert::init(0, rank, dim, &mut rng)], 2, rank, dim);
        assert!(m.route_token(&vec![0.1; dim]).is_err());
    }

    #[test]
    fn zero_init_forward_is_identity() {
        let dim = 8;
        let rank = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let experts = (0..3).map(|id| LoraExpert::init(id, rank, dim, &mut rng)).collect();
        let m = module_with(experts, 2, rank, dim);

        let mut tape = Tape::new();
        let w = Param::frozen(Tensor::uniform(dim, dim, 0.4, &mut rng));
        let wn = tape.param(&w);
        let h = tape.constant(Tensor::uniform(3, dim, 1.0, &mut rng));
        let binding = m.bind(&mut tape);
        let fwd = m.forward(&mut tape, &binding, wn, h, None).unwrap();

        let expected = linear(&mut tape, h, wn).unwrap();
        assert_eq!(tape.value(fwd.y), tape.value(expected));
    }

    #[test]
    fn degenerate_single_expert_sums_all_features() {
        // k^e = |E| = 1 with p = 1: y = W h + B^s A^s h + B0 A0 h
        let dim = 6;
        let rank = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut expert = LoraExpert::init(0, rank, dim, &mut rng);
        expert.b.value = Tensor::uniform(dim, rank, 0.5, &mut rng);
        let mut m = module_with(vec![expert], 1, rank, dim);
        if let Some(s) = m.shared.as_mut() {
            s.b.value = Tensor::uniform(dim, rank, 0.5, &mut rng);
        }

        let mut tape = Tape::new();
        let w = Param::frozen(Tensor::uniform(dim, dim, 0.4, &mut rng));
        let wn = tape.param(&w);
        let hv = Tensor::uniform(1, dim, 1.0, &mut rng);
        let h = tape.constant(hv.clone());
        let binding = m.bind(&mut tape);
        let fwd = m.forward(&mut tape, &binding, wn, h, None).unwrap();
        let decision = m.route_token(hv.row(0)).unwrap();
        assert_eq!(decision.probs, vec![1.0]);

        // by hand
        let scale = m.lora_alpha / rank as f64;
        let base = mat_vec(&w.value, hv.row(0));
        let s = m.shared.as_ref().unwrap();
        let sh = mat_vec(&s.b.value, &mat_vec(&s.a.value, hv.row(0)));
        let ex = &m.experts[0];
        let ef = mat_vec(&ex.b.value, &mat_vec(&ex.a.value, hv.row(0)));
        for j in 0..dim {
            let expected = base[j] + scale * sh[j] + scale * ef[j];
            assert!((tape.value(fwd.y).at(0, j) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_sum_matches_hand_expansion() {
        // two experts, k = 2: y = W h + shared + p0*phi0 + p1*phi1 with the
        // raw softmax probabilities (no renormalization).
        let dim = 6;
        let rank = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut experts: Vec<LoraExpert> =
            (0..2).map(|id| LoraExpert::init(id, rank, dim, &mut rng)).collect();
        for e in &mut experts {
            e.b.value = Tensor::uniform(dim, rank, 0.5, &mut rng);
        }
        let mut m = module_with(experts, 2, rank, dim);
        m.shared = None;

        let hv = Tensor::uniform(1, dim, 1.0, &mut rng);
        let decision = m.route_token(hv.row(0)).unwrap();

        let mut tape = Tape::new();
        let w = Param::frozen(Tensor::uniform(dim, dim, 0.4, &mut rng));
        let wn = tape.param(&w);
        let h = tape.constant(hv.clone());
        let binding = m.bind(&mut tape);
        let fwd = m.forward(&mut tape, &binding, wn, h, None).unwrap();

        let scale = m.lora_alpha / rank as f64;
        let base = mat_vec(&w.value, hv.row(0));
        for j in 0..dim {
            let mut expected = base[j];
            for (k, e) in m.experts.iter().enumerate() {
                let phi = mat_vec(&e.b.value, &mat_vec(&e.a.value, hv.row(0)));
                expected += decision.probs[k] * scale * phi[j];
            }
            assert!((tape.value(fwd.y).at(0, j) - expected).abs() < 1e-12);
        }
        let s: f64 = decision.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn load_balance_analytic_values() {
        // coupled uniform: n * sum(1/n^2) = 1
        let mut stats = BTreeMap::new();
        stats.insert(
            0usize,
            LoadBalanceStats {
                dispatch_fraction: vec![0.25; 4],
                mean_probability: vec![0.25; 4],
            },
        );
        assert!((load_balance_loss(&stats).unwrap() - 1.0).abs() < 1e-12);

        // full collapse: |E|
        stats.insert(
            0usize,
            LoadBalanceStats {
                dispatch_fraction: vec![1.0, 0.0, 0.0],
                mean_probability: vec![1.0, 0.0, 0.0],
            },
        );
        assert!((load_balance_loss(&stats).unwrap() - 3.0).abs() < 1e-12);

        // hand case: 2 * (0.5*0.9 + 0.5*0.1) = 1.0
        stats.insert(
            0usize,
            LoadBalanceStats {
                dispatch_fraction: vec![0.5, 0.5],
                mean_probability: vec![0.9, 0.1],
            },
        );
        assert!((load_balance_loss(&stats).unwrap() - 1.0).abs() < 1e-12);

        assert!(load_balance_loss(&BTreeMap::new()).is_err());
    }

    #[test]
    fn vanilla_router_masks_unassigned() {
        let dim = 4;
        let rank = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // single assigned expert -> probability 1 after masking
        let m = MoleModule {
            point: point(),
            shared: None,
            router: Router::vanilla(3, dim, &mut rng),
            experts: vec![LoraExpert::init(1, rank, dim, &mut rng)],
            k_active: 1,
            rank,
            lora_alpha: 16.0,
            dropout: 0.0,
        };
        let r = m.route_token(&[0.3, -0.1, 0.5, 0.2]).unwrap();
        assert_eq!(r.probs, vec![1.0]);

        // uniform router rows -> uniform probabilities over assigned experts
        let mut m2 = m.clone();
        m2.experts = (0..3).map(|id| LoraExpert::init(id, rank, dim, &mut rng)).collect();
        if let Router::Vanilla { w, .. } = &mut m2.router {
            for r in 0..3 {
                for c in 0..dim {
                    *w.value.at_mut(r, c) = 0.5;
                }
            }
        }
        let r2 = m2.route_token(&[0.3, -0.1, 0.5, 0.2]).unwrap();
        for &p in &r2.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_two_way_case() {
        // logits (1, -inf, 0) -> p = (0.731, 0, 0.269)
        let mut p = vec![0.0; 3];
        softmax_row(&[1.0, -1e30, 0.0], &mut p);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-9);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 0.2689414213699951).abs() < 1e-9);
    }

    #[test]
    fn embedding_sums_match_means() {
        let dim = 4;
        let rank = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = module_with(vec![LoraExpert::init(0, rank, dim, &mut rng)], 1, rank, dim);

        let mut tape = Tape::new();
        let w = Param::frozen(Tensor::uniform(dim, dim, 0.4, &mut rng));
        let wn = tape.param(&w);
        // two opposite tokens: mean must be zero
        let hv = Tensor::from_vec(2, dim, vec![1.0, 2.0, -1.0, 0.5, -1.0, -2.0, 1.0, -0.5]).unwrap();
        let h = tape.constant(hv);
        let binding = m.bind(&mut tape);
        let fwd = m.forward(&mut tape, &binding, wn, h, None).unwrap();
        let sums = collect_embedding_sums(&tape, &m, &fwd).unwrap();
        assert_eq!(sums.token_count, 2);
        for &v in sums.token_sum.as_ref().unwrap() {
            assert!(v.abs() < 1e-12);
        }
        for (_, s) in &sums.expert_sums {
            for &v in s {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_embedding_mean_equals_token() {
        // three 2-d "tokens" through an identity-ish check via plain sums
        let rows = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let sums = column_sums(&rows);
        assert_eq!(sums, vec![9.0, 12.0]);
        let mean: Vec<f64> = sums.iter().map(|s| s / 3.0).collect();
        assert_eq!(mean, vec![3.0, 4.0]);
    }
}
