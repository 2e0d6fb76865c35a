//! Federated orchestration: broadcast, local fine-tuning, embedding
//! upload, aggregation, evaluation, and expert re-assignment.
//!
//! Each round: the server broadcasts module parameters per the current
//! plan, clients fine-tune locally (NLL on response tokens plus the
//! load-balance term), upload parameters and privatized embeddings, the
//! server aggregates, clients evaluate their deployable model, and RSEA
//! produces the next round's plan.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{
    plan_from_assignment, relevance, selection_probabilities, solve_assignment, AssignmentProblem,
    SelectionProbabilities,
};
use crate::autodiff::{NodeId, Tape};
use crate::backbone::{init_backbone, Backbone, BackboneNodes, InjectionPoint};
use crate::config::ExperimentConfig;
use crate::data::{
    generate_corpus, partition_dirichlet, partition_iid, partition_task_skew,
    sample_embedding_set, ClientData, Example, PartitionKind,
};
use crate::error::{Error, Result};
use crate::metrics::{exact_match_accuracy, MetricLog, MetricRecord};
use crate::mole::{
    collect_embedding_sums, load_balance_node, LoraExpert, MoleBinding, MoleModule, ModuleForward,
    Router, SharedExpert,
};
use crate::optim::AdamState;
use crate::privacy::privatize;
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Fedamole,
    Fedit,
    FeditFt,
    AblateH,
    AblateS,
    AblateR,
    Random,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Ok(match s {
            "fedamole" => Mode::Fedamole,
            "fedit" => Mode::Fedit,
            "fedit_ft" => Mode::FeditFt,
            "ablate-h" => Mode::AblateH,
            "ablate-s" => Mode::AblateS,
            "ablate-r" => Mode::AblateR,
            "random" => Mode::Random,
            other => return Err(Error::Invalid(format!("unknown mode `{other}`"))),
        })
    }
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fedamole => "fedamole",
            Mode::Fedit => "fedit",
            Mode::FeditFt => "fedit_ft",
            Mode::AblateH => "ablate-h",
            Mode::AblateS => "ablate-s",
            Mode::AblateR => "ablate-r",
            Mode::Random => "random",
        }
    }

    /// FedIT baselines: one shared LoRA adapter, no router, no RSEA.
    pub fn single_expert(&self) -> bool {
        matches!(self, Mode::Fedit | Mode::FeditFt)
    }

    pub fn has_shared(&self) -> bool {
        !matches!(self, Mode::AblateS) && !self.single_expert()
    }

    /// -H swaps the shape-invariant routing for a fixed-size vanilla router.
    pub fn vanilla_router(&self) -> bool {
        matches!(self, Mode::AblateH)
    }

    pub fn uses_rsea(&self) -> bool {
        matches!(self, Mode::Fedamole | Mode::AblateH | Mode::AblateS)
    }

    pub fn needs_embeddings(&self) -> bool {
        self.uses_rsea()
    }
}

/// Deterministic per-purpose RNG streams derived from the run seed.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = splitmix(seed ^ splitmix(tag));
    s = splitmix(s ^ splitmix(a.wrapping_add(1)));
    s = splitmix(s ^ splitmix(b.wrapping_add(1)));
    ChaCha8Rng::seed_from_u64(s)
}

const TAG_SERVER_INIT: u64 = 1;
const TAG_CLIENT_TRAIN: u64 = 2;
const TAG_DP: u64 = 3;
const TAG_EMBED_SET: u64 = 4;
const TAG_DATA: u64 = 5;
const TAG_RANDOM_PLAN: u64 = 6;

/// Expert-id sets per module, per client: `per_module[m][i]` is the sorted
/// id list E_{m,i} for the coming round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub per_module: BTreeMap<usize, Vec<Vec<usize>>>,
}

impl RoundPlan {
    /// Definition-1 audit: k_e <= |E_{m,i}| <= b, each expert on exactly
    /// k_c clients, and conservation of the total assignment count.
    pub fn audit(&self, e_total: usize, k_e: usize, k_c: usize, b: usize) -> Result<()> {
        for (m, clients) in &self.per_module {
            let mut per_expert = vec![0usize; e_total];
            let mut total = 0usize;
            for (i, set) in clients.iter().enumerate() {
                if set.len() < k_e || set.len() > b {
                    return Err(Error::Protocol(format!(
                        "module {}: client {} holds {} experts, outside [{}, {}]",
                        m,
                        i,
                        set.len(),
                        k_e,
                        b
                    )));
                }
                for &j in set {
                    if j >= e_total {
                        return Err(Error::Protocol(format!("module {}: expert id {} out of range", m, j)));
                    }
                    per_expert[j] += 1;
                    total += 1;
                }
            }
            for (j, &cnt) in per_expert.iter().enumerate() {
                if cnt != k_c {
                    return Err(Error::Protocol(format!(
                        "module {}: expert {} assigned to {} clients, expected {}",
                        m, j, cnt, k_c
                    )));
                }
            }
            if total != e_total * k_c {
                return Err(Error::Protocol(format!(
                    "module {}: {} assignments, expected {}",
                    m,
                    total,
                    e_total * k_c
                )));
            }
        }
        Ok(())
    }
}

/// Round-robin initial plan: expert slots dealt to clients cyclically.
pub fn initial_assignment(
    clients: usize,
    e_total: usize,
    k_e: usize,
    k_c: usize,
    b: usize,
    module_indices: &[usize],
) -> Result<RoundPlan> {
    crate::assign::check_feasible(clients, e_total, k_e, k_c, b)?;
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for j in 0..e_total {
        for rep in 0..k_c {
            sets[(j * k_c + rep) % clients].push(j);
        }
    }
    let per_module = module_indices.iter().map(|&m| (m, sets.clone())).collect();
    let plan = RoundPlan { per_module };
    plan.audit(e_total, k_e, k_c, b)?;
    Ok(plan)
}

/// The degenerate single-expert plan used by the FedIT baselines.
pub fn degenerate_plan(clients: usize, module_indices: &[usize]) -> RoundPlan {
    let sets = vec![vec![0usize]; clients];
    RoundPlan { per_module: module_indices.iter().map(|&m| (m, sets.clone())).collect() }
}

#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct GlobalModule {
    pub point: InjectionPoint,
    pub experts: BTreeMap<usize, ExpertParams>,
    pub shared: Option<ExpertParams>,
    /// Token projection [r x d], or vanilla router [E_total x d] for -H.
    pub router: Option<Tensor>,
    /// Aggregated expert data embeddings from the previous round.
    pub expert_embeddings: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub modules: BTreeMap<usize, GlobalModule>,
}

pub fn init_server(cfg: &ExperimentConfig, mode: Mode, seed: u64) -> ServerState {
    let d = cfg.backbone.hidden_dim;
    let r = cfg.hmole.rank;
    let e_total = if mode.single_expert() { 1 } else { cfg.hmole.e_total };
    let mut modules = BTreeMap::new();
    for point in InjectionPoint::all(cfg.backbone.layers) {
        let m = point.index();
        let mut rng = stream(seed, TAG_SERVER_INIT, m as u64, 0);
        let experts = (0..e_total)
            .map(|id| {
                let e = LoraExpert::init(id, r, d, &mut rng);
                (id, ExpertParams { a: e.a.value, b: e.b.value })
            })
            .collect();
        let shared = mode.has_shared().then(|| {
            let s = SharedExpert::init(r, d, &mut rng);
            ExpertParams { a: s.a.value, b: s.b.value }
        });
        let router = if mode.single_expert() {
            None
        } else if mode.vanilla_router() {
            let bound = 1.0 / (d as f64).sqrt();
            Some(Tensor::uniform(e_total, d, bound, &mut rng))
        } else {
            let bound = 1.0 / (d as f64).sqrt();
            Some(Tensor::uniform(r, d, bound, &mut rng))
        };
        modules.insert(
            m,
            GlobalModule { point, experts, shared, router, expert_embeddings: BTreeMap::new() },
        );
    }
    ServerState { modules }
}

pub struct ClientState {
    pub id: usize,
    pub data: ClientData,
    pub embedding_set: Vec<Example>,
    pub modules: BTreeMap<usize, MoleModule>,
}

/// Materialize a client's modules from the server pool per the plan.
pub fn construct_modules(
    server: &ServerState,
    plan: &RoundPlan,
    client: usize,
    cfg: &ExperimentConfig,
    mode: Mode,
) -> Result<BTreeMap<usize, MoleModule>> {
    let mut out = BTreeMap::new();
    for (&m, global) in &server.modules {
        let ids = plan
            .per_module
            .get(&m)
            .and_then(|c| c.get(client))
            .ok_or_else(|| Error::Protocol(format!("plan missing module {} client {}", m, client)))?;
        let mut experts = Vec::with_capacity(ids.len());
        for &id in ids {
            let p = global
                .experts
                .get(&id)
                .ok_or_else(|| Error::Protocol(format!("module {}: unknown expert {}", m, id)))?;
            experts.push(LoraExpert {
                id,
                a: Param::trainable(p.a.clone()),
                b: Param::trainable(p.b.clone()),
            });
        }
        experts.sort_by_key(|e| e.id);
        let shared = global.shared.as_ref().map(|s| SharedExpert {
            a: Param::trainable(s.a.clone()),
            b: Param::trainable(s.b.clone()),
        });
        let router = match &global.router {
            None => Router::None,
            Some(w) if mode.vanilla_router() => Router::Vanilla {
                w: Param::trainable(w.clone()),
                total_experts: cfg.hmole.e_total,
            },
            Some(w) => Router::TokenProjection { w: Param::trainable(w.clone()) },
        };
        let k_active = cfg.hmole.k_e.min(experts.len());
        out.insert(
            m,
            MoleModule {
                point: global.point,
                shared,
                router,
                experts,
                k_active,
                rank: cfg.hmole.rank,
                lora_alpha: cfg.hmole.alpha,
                dropout: cfg.hmole.dropout,
            },
        );
    }
    Ok(out)
}

fn module_params_mut(m: &mut MoleModule) -> Vec<&mut Param> {
    let mut v = Vec::new();
    if let Some(s) = m.shared.as_mut() {
        v.push(&mut s.a);
        v.push(&mut s.b);
    }
    match &mut m.router {
        Router::TokenProjection { w } | Router::Vanilla { w, .. } => v.push(w),
        Router::None => {}
    }
    for e in &mut m.experts {
        v.push(&mut e.a);
        v.push(&mut e.b);
    }
    v
}

/// Next-token supervision: inputs drop the final token, targets drop the
/// first, the mask selects exactly the response positions.
fn training_targets(e: &Example) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let tokens = e.tokens();
    let n = tokens.len();
    let input = tokens[..n - 1].to_vec();
    let targets = tokens[1..].to_vec();
    let mask = (0..n - 1).map(|pos| pos + 1 >= e.instruction.len()).collect();
    (input, targets, mask)
}

/// One forward pass of the adapted model; returns the logits node and the
/// per-module forward handles.
fn forward_client(
    backbone: &Backbone,
    modules: &BTreeMap<usize, MoleModule>,
    bindings: &BTreeMap<usize, MoleBinding>,
    tape: &mut Tape,
    nodes: &BackboneNodes,
    tokens: &[usize],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, BTreeMap<usize, ModuleForward>)> {
    let mut fwds = BTreeMap::new();
    let logits = {
        let mut adapter = |tape: &mut Tape, point: InjectionPoint, w: NodeId, h: NodeId| {
            let m = point.index();
            let module = modules
                .get(&m)
                .ok_or_else(|| Error::Protocol(format!("no module at injection point {}", m)))?;
            let binding = &bindings[&m];
            let fwd = module.forward(tape, binding, w, h, dropout_rng.as_deref_mut())?;
            let y = fwd.y;
            fwds.insert(m, fwd);
            Ok(y)
        };
        backbone.forward(tape, nodes, tokens, &mut adapter)?
    };
    Ok((logits, fwds))
}

/// SGD over single sampled sequences: NLL on response tokens plus
/// beta times the load-balance term. Returns the per-step loss trace.
pub fn local_finetune(
    backbone: &Backbone,
    client: &mut ClientState,
    steps: usize,
    lr: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if client.data.train.is_empty() {
        return Err(Error::Data(format!("client {}: empty training set", client.id)));
    }
    let mut adam = AdamState::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let example = client.data.train[rng.gen_range(0..client.data.train.len())].clone();
        let (input, targets, mask) = training_targets(&example);

        let mut tape = Tape::new();
        let nodes = backbone.bind(&mut tape);
        let bindings: BTreeMap<usize, MoleBinding> =
            client.modules.iter().map(|(&m, md)| (m, md.bind(&mut tape))).collect();
        let (logits, fwds) = forward_client(
            backbone,
            &client.modules,
            &bindings,
            &mut tape,
            &nodes,
            &input,
            Some(rng),
        )?;
        let mut loss = tape.nll_masked(logits, &targets, &mask)?;
        if beta > 0.0 {
            for fwd in fwds.values() {
                if let Some(lb) = load_balance_node(&mut tape, fwd)? {
                    let weighted = tape.scale(lb, beta);
                    loss = tape.add(loss, weighted)?;
                }
            }
        }
        losses.push(tape.value(loss).scalar());
        tape.backward(loss)?;
        for (m, module) in client.modules.iter_mut() {
            module.absorb_grads(&tape, &bindings[m]);
        }
        let params: Vec<&mut Param> =
            client.modules.values_mut().flat_map(module_params_mut).collect();
        adam.step(params);
    }
    Ok(losses)
}

#[derive(Clone, Debug, Default)]
pub struct ModuleEmbeddings {
    /// h_bar^t: mean token embedding over the embedding set.
    pub token: Option<Vec<f64>>,
    /// h_bar^e per assigned expert id.
    pub experts: BTreeMap<usize, Vec<f64>>,
}

pub type ClientEmbeddings = BTreeMap<usize, ModuleEmbeddings>;

/// Exact means over every token of every sequence in the embedding set,
/// under the client's current parameters.
pub fn compute_client_embeddings(
    backbone: &Backbone,
    client: &ClientState,
) -> Result<ClientEmbeddings> {
    if client.embedding_set.is_empty() {
        return Err(Error::Data(format!("client {}: empty embedding set", client.id)));
    }
    let mut token_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut token_sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut expert_sums: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();

    for example in &client.embedding_set {
        let tokens = example.tokens();
        let mut tape = Tape::new();
        let nodes = backbone.bind(&mut tape);
        let bindings: BTreeMap<usize, MoleBinding> =
            client.modules.iter().map(|(&m, md)| (m, md.bind(&mut tape))).collect();
        let (_, fwds) = forward_client(
            backbone,
            &client.modules,
            &bindings,
            &mut tape,
            &nodes,
            &tokens,
            None,
        )?;
        for (&m, fwd) in &fwds {
            let sums = collect_embedding_sums(&tape, &client.modules[&m], fwd)?;
            *token_counts.entry(m).or_default() += sums.token_count;
            if let Some(ts) = sums.token_sum {
                let acc = token_sums.entry(m).or_insert_with(|| vec![0.0; ts.len()]);
                for (a, v) in acc.iter_mut().zip(&ts) {
                    *a += v;
                }
            }
            let per_expert = expert_sums.entry(m).or_default();
            for (id, es) in sums.expert_sums {
                let acc = per_expert.entry(id).or_insert_with(|| vec![0.0; es.len()]);
                for (a, v) in acc.iter_mut().zip(&es) {
                    *a += v;
                }
            }
        }
    }

    let mut out = ClientEmbeddings::new();
    for (&m, _) in &client.modules {
        let n = token_counts.get(&m).copied().unwrap_or(0) as f64;
        let token = token_sums.get(&m).map(|s| s.iter().map(|x| x / n).collect());
        let experts = expert_sums
            .remove(&m)
            .unwrap_or_default()
            .into_iter()
            .map(|(id, s)| (id, s.iter().map(|x| x / n).collect()))
            .collect();
        out.insert(m, ModuleEmbeddings { token, experts });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ModuleUpdate {
    pub experts: BTreeMap<usize, ExpertParams>,
    pub shared: Option<ExpertParams>,
    pub router: Option<Tensor>,
    pub expert_embeddings: BTreeMap<usize, Vec<f64>>,
    pub token_embedding: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct UpdatePackage {
    pub client: usize,
    pub modules: BTreeMap<usize, ModuleUpdate>,
}

/// Package the client's fine-tuned parameters and (optionally DP-noised)
/// embeddings for upload.
pub fn build_package(
    client: &ClientState,
    embeddings: Option<&ClientEmbeddings>,
    cfg: &ExperimentConfig,
    dp_rng: &mut ChaCha8Rng,
) -> Result<UpdatePackage> {
    let mut modules = BTreeMap::new();
    for (&m, module) in &client.modules {
        let experts = module
            .experts
            .iter()
            .map(|e| (e.id, ExpertParams { a: e.a.value.clone(), b: e.b.value.clone() }))
            .collect();
        let shared = module
            .shared
            .as_ref()
            .map(|s| ExpertParams { a: s.a.value.clone(), b: s.b.value.clone() });
        let router = match &module.router {
            Router::TokenProjection { w } | Router::Vanilla { w, .. } => Some(w.value.clone()),
            Router::None => None,
        };
        let (token_embedding, expert_embeddings) = match embeddings.and_then(|e| e.get(&m)) {
            Some(emb) => {
                let token = match &emb.token {
                    Some(t) => Some(privatize(t, &cfg.privacy, dp_rng)?),
                    None => None,
                };
                let mut experts_emb = BTreeMap::new();
                for (&id, v) in &emb.experts {
                    experts_emb.insert(id, privatize(v, &cfg.privacy, dp_rng)?);
                }
                (token, experts_emb)
            }
            None => (None, BTreeMap::new()),
        };
        modules.insert(
            m,
            ModuleUpdate { experts, shared, router, expert_embeddings, token_embedding },
        );
    }
    Ok(UpdatePackage { client: client.id, modules })
}

fn mean_tensors(parts: &[&Tensor]) -> Tensor {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        for (a, v) in acc.data.iter_mut().zip(&p.data) {
            *a += v;
        }
    }
    let n = parts.len() as f64;
    acc.data.iter_mut().for_each(|x| *x /= n);
    acc
}

fn mean_vecs(parts: &[&Vec<f64>]) -> Vec<f64> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    let n = parts.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

/// Federated aggregation: each domain expert averaged over exactly its
/// training clients; shared expert and router averaged over all clients.
pub fn aggregate(
    server: &mut ServerState,
    packages: &[UpdatePackage],
    plan: &RoundPlan,
) -> Result<()> {
    if packages.is_empty() {
        return Err(Error::Protocol("aggregate: no packages".into()));
    }
    let have: std::collections::BTreeSet<usize> = packages.iter().map(|p| p.client).collect();
    for clients in plan.per_module.values() {
        for i in 0..clients.len() {
            if !have.contains(&i) {
                return Err(Error::Protocol(format!("aggregate: no package from client {}", i)));
            }
        }
    }
    for (&m, global) in server.modules.iter_mut() {
        let clients = plan
            .per_module
            .get(&m)
            .ok_or_else(|| Error::Protocol(format!("plan missing module {}", m)))?;
        let updates: Vec<&ModuleUpdate> = packages
            .iter()
            .map(|p| {
                p.modules
                    .get(&m)
                    .ok_or_else(|| Error::Protocol(format!("client {}: missing module {}", p.client, m)))
            })
            .collect::<Result<_>>()?;

        for (&j, expert) in global.experts.iter_mut() {
            let mut a_parts = Vec::new();
            let mut b_parts = Vec::new();
            let mut emb_parts = Vec::new();
            for (pkg, upd) in packages.iter().zip(&updates) {
                let assigned = clients
                    .get(pkg.client)
                    .ok_or_else(|| Error::Protocol(format!("plan missing client {}", pkg.client)))?
                    .contains(&j);
                match (assigned, upd.experts.get(&j)) {
                    (true, Some(p)) => {
                        a_parts.push(&p.a);
                        b_parts.push(&p.b);
                        if let Some(e) = upd.expert_embeddings.get(&j) {
                            emb_parts.push(e);
                        }
                    }
                    (true, None) => {
                        return Err(Error::Protocol(format!(
                            "client {}: package missing assigned expert {} of module {}",
                            pkg.client, j, m
                        )))
                    }
                    (false, Some(_)) => {
                        return Err(Error::Protocol(format!(
                            "client {}: package contains unassigned expert {} of module {}",
                            pkg.client, j, m
                        )))
                    }
                    (false, None) => {}
                }
            }
            if a_parts.is_empty() {
                return Err(Error::Protocol(format!(
                    "expert {} of module {} trained by no client",
                    j, m
                )));
            }
            expert.a = mean_tensors(&a_parts);
            expert.b = mean_tensors(&b_parts);
            if emb_parts.len() == a_parts.len() {
                global.expert_embeddings.insert(j, mean_vecs(&emb_parts));
            }
        }

        if global.shared.is_some() {
            let a_parts: Vec<&Tensor> = updates
                .iter()
                .map(|u| {
                    u.shared
                        .as_ref()
                        .map(|s| &s.a)
                        .ok_or_else(|| Error::Protocol(format!("module {}: package missing shared expert", m)))
                })
                .collect::<Result<_>>()?;
            let b_parts: Vec<&Tensor> =
                updates.iter().map(|u| &u.shared.as_ref().unwrap().b).collect();
            global.shared = Some(ExpertParams {
                a: mean_tensors(&a_parts),
                b: mean_tensors(&b_parts),
            });
        }
        if global.router.is_some() {
            let parts: Vec<&Tensor> = updates
                .iter()
                .map(|u| {
                    u.router
                        .as_ref()
                        .ok_or_else(|| Error::Protocol(format!("module {}: package missing router", m)))
                })
                .collect::<Result<_>>()?;
            global.router = Some(mean_tensors(&parts));
        }
    }
    Ok(())
}

/// Greedy-decoded exact-match accuracy on the client's test split.
pub fn evaluate_modules(
    backbone: &Backbone,
    modules: &BTreeMap<usize, MoleModule>,
    test: &[Example],
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(test.len());
    let mut references = Vec::with_capacity(test.len());
    for example in test {
        let mut seq = example.instruction.clone();
        let mut pred = Vec::with_capacity(example.response.len());
        for _ in 0..example.response.len() {
            let mut tape = Tape::new();
            let nodes = backbone.bind(&mut tape);
            let bindings: BTreeMap<usize, MoleBinding> =
                modules.iter().map(|(&m, md)| (m, md.bind(&mut tape))).collect();
            let (logits, _) =
                forward_client(backbone, modules, &bindings, &mut tape, &nodes, &seq, None)?;
            let lv = tape.value(logits);
            let last = lv.row(lv.shape().0 - 1);
            let mut best = 0usize;
            for (j, &v) in last.iter().enumerate().skip(1) {
                if v > last[best] {
                    best = j;
                }
            }
            seq.push(best);
            pred.push(best);
        }
        predictions.push(pred);
        references.push(example.response.clone());
    }
    exact_match_accuracy(&predictions, &references)
}

/// RSEA: relevance from uploaded embeddings, column softmax, exact
/// Definition-1 assignment per module.
fn rsea_next_plan(
    server: &ServerState,
    packages: &[UpdatePackage],
    cfg: &ExperimentConfig,
    mode: Mode,
) -> Result<RoundPlan> {
    let h = &cfg.hmole;
    let mut per_module = BTreeMap::new();
    for (&m, global) in &server.modules {
        let mut expert_embs = Vec::with_capacity(h.e_total);
        for j in 0..h.e_total {
            let e = global.expert_embeddings.get(&j).ok_or_else(|| {
                Error::Protocol(format!("module {}: no aggregated embedding for expert {}", m, j))
            })?;
            expert_embs.push(e.clone());
        }
        let mut client_embs = Vec::with_capacity(packages.len());
        for pkg in packages {
            let upd = &pkg.modules[&m];
            let emb = if mode.vanilla_router() {
                // no token projection under -H: the client's data embedding
                // is the mean of its experts' embeddings
                let parts: Vec<&Vec<f64>> = upd.expert_embeddings.values().collect();
                if parts.is_empty() {
                    return Err(Error::Protocol(format!(
                        "client {}: no expert embeddings for module {}",
                        pkg.client, m
                    )));
                }
                mean_vecs(&parts)
            } else {
                upd.token_embedding.clone().ok_or_else(|| {
                    Error::Protocol(format!(
                        "client {}: missing token embedding for module {}",
                        pkg.client, m
                    ))
                })?
            };
            client_embs.push(emb);
        }
        let scores = relevance(&client_embs, &expert_embs, cfg.backbone.hidden_dim)?;
        let probs = selection_probabilities(&scores);
        let d = solve_assignment(&AssignmentProblem {
            probs,
            min_per_client: h.k_e,
            clients_per_expert: h.k_c,
            max_per_client: h.b,
        })?;
        per_module.insert(m, plan_from_assignment(&d));
    }
    Ok(RoundPlan { per_module })
}

/// Fresh feasible assignment from uniform-random selection probabilities.
fn random_next_plan(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<RoundPlan> {
    let h = &cfg.hmole;
    let c = cfg.federation.clients;
    let mut per_module = BTreeMap::new();
    for m in InjectionPoint::all(cfg.backbone.layers) {
        let mut p = Tensor::zeros(c, h.e_total);
        for v in p.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let d = solve_assignment(&AssignmentProblem {
            probs: SelectionProbabilities(p),
            min_per_client: h.k_e,
            clients_per_expert: h.k_c,
            max_per_client: h.b,
        })?;
        per_module.insert(m.index(), plan_from_assignment(&d));
    }
    Ok(RoundPlan { per_module })
}

/// One row of the run's event log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundEvent {
    pub round: usize,
    pub client: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub experts_assigned: usize,
    /// E_{m,i} per module index.
    pub expert_sets: BTreeMap<usize, Vec<usize>>,
}

fn lr_for_round(cfg: &ExperimentConfig, round: usize) -> f64 {
    cfg.federation.lr * cfg.federation.lr_decay.powi(round as i32 - 1)
}

fn client_expert_sets(plan: &RoundPlan, client: usize) -> BTreeMap<usize, Vec<usize>> {
    plan.per_module.iter().map(|(&m, c)| (m, c[client].clone())).collect()
}

/// Execute one federated round; returns the metric record, the event rows,
/// and the plan for the next round.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    backbone: &Backbone,
    server: &mut ServerState,
    datasets: &[ClientData],
    embedding_sets: &[Vec<Example>],
    plan: &RoundPlan,
    round: usize,
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
) -> Result<(MetricRecord, Vec<RoundEvent>, RoundPlan)> {
    let h = &cfg.hmole;
    if !mode.single_expert() {
        plan.audit(h.e_total, h.k_e, h.k_c, h.b)?;
    }
    let lr = lr_for_round(cfg, round);
    let c = cfg.federation.clients;

    let mut packages = Vec::with_capacity(c);
    let mut client_loss = Vec::with_capacity(c);
    for i in 0..c {
        let mut client = ClientState {
            id: i,
            data: datasets[i].clone(),
            embedding_set: embedding_sets[i].clone(),
            modules: construct_modules(server, plan, i, cfg, mode)?,
        };
        let mut rng = stream(seed, TAG_CLIENT_TRAIN, i as u64, round as u64);
        let losses = local_finetune(
            backbone,
            &mut client,
            cfg.federation.local_steps,
            lr,
            if mode.single_expert() { 0.0 } else { h.beta },
            &mut rng,
        )?;
        let mean_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        client_loss.push(mean_loss);
        let embeddings = if mode.needs_embeddings() {
            Some(compute_client_embeddings(backbone, &client)?)
        } else {
            None
        };
        let mut dp_rng = stream(seed, TAG_DP, i as u64, round as u64);
        packages.push(build_package(&client, embeddings.as_ref(), cfg, &mut dp_rng)?);
    }

    aggregate(server, &packages, plan)?;

    // evaluate the deployable model: aggregated shared components plus the
    // aggregated versions of the client's current experts
    let mut client_acc = Vec::with_capacity(c);
    let mut experts_assigned = Vec::with_capacity(c);
    let mut events = Vec::with_capacity(c);
    for i in 0..c {
        let modules = construct_modules(server, plan, i, cfg, mode)?;
        let acc = evaluate_modules(backbone, &modules, &datasets[i].test)?;
        client_acc.push(acc);
        let sets = client_expert_sets(plan, i);
        let total: usize = sets.values().map(|s| s.len()).sum();
        experts_assigned.push(total);
        events.push(RoundEvent {
            round,
            client: i,
            mean_loss: client_loss[i],
            accuracy: acc,
            experts_assigned: total,
            expert_sets: sets,
        });
    }

    let next = if mode.uses_rsea() {
        rsea_next_plan(server, &packages, cfg, mode)?
    } else if mode == Mode::Random {
        let mut rng = stream(seed, TAG_RANDOM_PLAN, round as u64, 0);
        random_next_plan(cfg, &mut rng)?
    } else {
        plan.clone()
    };

    let record = MetricRecord { round, client_acc, client_loss, experts_assigned };
    Ok((record, events, next))
}

/// Materialized per-run inputs: backbone, partitioned data, embedding sets.
pub struct RunSetup {
    pub backbone: Backbone,
    pub datasets: Vec<ClientData>,
    pub embedding_sets: Vec<Vec<Example>>,
}

pub fn prepare_run(cfg: &ExperimentConfig, seed: u64) -> Result<RunSetup> {
    cfg.validate()?;
    let backbone = init_backbone(&cfg.backbone)?;
    let mut corpus_cfg = cfg.data.corpus.clone();
    corpus_cfg.seed = corpus_cfg.seed.wrapping_add(splitmix(seed ^ TAG_DATA));
    let corpus = generate_corpus(&corpus_cfg)?;
    let part_seed = splitmix(seed ^ splitmix(TAG_DATA));
    let datasets = match cfg.data.partition {
        PartitionKind::Dirichlet { alpha } => partition_dirichlet(
            &corpus,
            cfg.federation.clients,
            alpha,
            cfg.data.min_train,
            part_seed,
        )?,
        PartitionKind::TaskSkew => partition_task_skew(&corpus, cfg.federation.clients, part_seed)?,
        PartitionKind::Iid => partition_iid(&corpus, cfg.federation.clients, part_seed)?,
    };
    let mut embedding_sets = Vec::with_capacity(datasets.len());
    for (i, d) in datasets.iter().enumerate() {
        let n = cfg.federation.embedding_set_size.min(d.train.len());
        let es_seed = splitmix(seed ^ splitmix(TAG_EMBED_SET ^ (i as u64) << 8));
        embedding_sets.push(sample_embedding_set(&d.train, n, es_seed)?);
    }
    Ok(RunSetup { backbone, datasets, embedding_sets })
}

/// Full training run for one (config, mode, seed) triple.
pub fn run_training(
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
) -> Result<(MetricLog, Vec<RoundEvent>)> {
    let setup = prepare_run(cfg, seed)?;
    let checksum_before = setup.backbone.checksum();
    let module_indices: Vec<usize> =
        InjectionPoint::all(cfg.backbone.layers).iter().map(|p| p.index()).collect();

    let mut server = init_server(cfg, mode, seed);
    let mut plan = if mode.single_expert() {
        degenerate_plan(cfg.federation.clients, &module_indices)
    } else {
        initial_assignment(
            cfg.federation.clients,
            cfg.hmole.e_total,
            cfg.hmole.k_e,
            cfg.hmole.k_c,
            cfg.hmole.b,
            &module_indices,
        )?
    };

    let mut log = MetricLog::default();
    let mut events = Vec::new();
    let mut last_plan = plan.clone();
    for round in 1..=cfg.federation.rounds {
        let (record, round_events, next) = run_round(
            &setup.backbone,
            &mut server,
            &setup.datasets,
            &setup.embedding_sets,
            &plan,
            round,
            cfg,
            mode,
            seed,
        )?;
        log.push(record)?;
        events.extend(round_events);
        last_plan = plan;
        plan = next;
    }

    if mode == Mode::FeditFt {
        // final personalization pass after the last aggregation
        let round = cfg.federation.rounds;
        let lr = lr_for_round(cfg, round);
        let last = log.records.last_mut().expect("rounds >= 1");
        for i in 0..cfg.federation.clients {
            let mut client = ClientState {
                id: i,
                data: setup.datasets[i].clone(),
                embedding_set: setup.embedding_sets[i].clone(),
                modules: construct_modules(&server, &last_plan, i, cfg, mode)?,
            };
            let mut rng = stream(seed, TAG_CLIENT_TRAIN, i as u64, (round + 1) as u64);
            local_finetune(
                &setup.backbone,
                &mut client,
                cfg.federation.local_steps,
                lr,
                0.0,
                &mut rng,
            )?;
            let acc = evaluate_modules(&setup.backbone, &client.modules, &setup.datasets[i].test)?;
            last.client_acc[i] = acc;
            if let Some(ev) = events.iter_mut().find(|e| e.round == round && e.client == i) {
                ev.accuracy = acc;
            }
        }
    }

    if setup.backbone.checksum() != checksum_before {
        return Err(Error::Protocol("frozen backbone changed during training".into()));
    }
    Ok((log, events))
}
