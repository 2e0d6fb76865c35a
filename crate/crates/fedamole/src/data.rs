//! Synthetic non-IID instruction corpora.
//!
//! Each domain draws instruction tokens from its own first-order Markov
//! chain (biased toward a domain-specific token block) and maps a summary
//! statistic of the instruction (parity of the last token) to a short,
//! domain-specific label response. This keeps exact-match accuracy
//! meaningful while giving controllable heterogeneity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub domains: usize,
    pub seqs_per_domain: usize,
    pub instr_len: usize,
    pub resp_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 64,
            domains: 4,
            seqs_per_domain: 60,
            instr_len: 8,
            resp_len: 1,
            seed: 1234,
        }
    }
}

impl CorpusConfig {
    /// Instruction tokens occupy [0, instr_vocab); the top 2*K ids are labels.
    pub fn instr_vocab(&self) -> usize {
        self.vocab_size - 2 * self.domains
    }

    pub fn label_token(&self, domain: usize, parity: usize) -> usize {
        self.instr_vocab() + 2 * domain + parity
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 {
            return Err(Error::config("data.domains", "must be >= 1"));
        }
        if self.instr_len == 0 || self.resp_len == 0 {
            return Err(Error::config("data.instr_len", "lengths must be >= 1"));
        }
        if self.vocab_size <= 2 * self.domains + self.domains {
            return Err(Error::config(
                "data.vocab_size",
                "too small for the label range plus one token block per domain",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Example {
    pub instruction: Vec<usize>,
    pub response: Vec<usize>,
    pub domain: usize,
}

impl Example {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.instruction.clone();
        t.extend(&self.response);
        t
    }

    /// Loss mask covering exactly the response positions.
    pub fn response_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.instruction.len() + self.response.len()];
        for x in m.iter_mut().skip(self.instruction.len()) {
            *x = true;
        }
        m
    }
}

/// Core tokens per domain carrying the concentrated transition mass;
/// capped so any two domains' matrices differ by >= 0.85/8 > 0.1.
const CORE_MAX: usize = 8;

/// Row-stochastic transition matrix of domain k over instruction tokens.
/// Mass 0.85 concentrates on the first tokens of the domain's block.
pub fn transition_matrix(cfg: &CorpusConfig, domain: usize) -> Tensor {
    let v = cfg.instr_vocab();
    let block = v / cfg.domains;
    let lo = domain * block;
    let hi = if domain + 1 == cfg.domains { v } else { lo + block };
    let core = (hi - lo).min(CORE_MAX);
    let mut m = Tensor::zeros(v, v);
    for i in 0..v {
        for j in 0..v {
            let base = 0.15 / v as f64;
            let bonus = if j >= lo && j < lo + core { 0.85 / core as f64 } else { 0.0 };
            *m.at_mut(i, j) = base + bonus;
        }
    }
    m
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if r < acc {
            return j;
        }
    }
    row.len() - 1
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.domains * cfg.seqs_per_domain);
    for domain in 0..cfg.domains {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(domain as u64));
        let trans = transition_matrix(cfg, domain);
        let v = cfg.instr_vocab();
        let block = v / cfg.domains;
        let lo = domain * block;
        let hi = if domain + 1 == cfg.domains { v } else { lo + block };
        for _ in 0..cfg.seqs_per_domain {
            let mut instruction = Vec::with_capacity(cfg.instr_len);
            let mut tok = rng.gen_range(lo..hi);
            instruction.push(tok);
            for _ in 1..cfg.instr_len {
                tok = sample_row(trans.row(tok), &mut rng);
                instruction.push(tok);
            }
            let parity = instruction.last().unwrap() % 2;
            let response = vec![cfg.label_token(domain, parity); cfg.resp_len];
            out.push(Example { instruction, response, domain });
        }
    }
    Ok(out)
}

/// One client's local data.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClientData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl ClientData {
    fn from_pool(mut pool: Vec<Example>, rng: &mut ChaCha8Rng) -> Self {
        pool.shuffle(rng);
        let n = pool.len();
        let n_test = (n / 10).max(1).min(n.saturating_sub(2));
        let n_val = (n / 10).max(1).min(n.saturating_sub(n_test + 1));
        let test = pool.split_off(n - n_test);
        let val = pool.split_off(pool.len() - n_val);
        ClientData { train: pool, val, test }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet { alpha: f64 },
    TaskSkew,
    Iid,
}

/// Dirichlet(alpha) label-skew partition with an 80/10/10 split per client.
/// Resamples up to 10 times if a client ends up below `min_train` training
/// examples, then errors.
pub fn partition_dirichlet(
    corpus: &[Example],
    clients: usize,
    alpha: f64,
    min_train: usize,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if alpha <= 0.0 {
        return Err(Error::config("data.partition.alpha", "must be > 0"));
    }
    let domains = 1 + corpus.iter().map(|e| e.domain).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..10 {
        let mut pools: Vec<Vec<Example>> = vec![Vec::new(); clients];
        for domain in 0..domains {
            let mut members: Vec<Example> =
                corpus.iter().filter(|e| e.domain == domain).cloned().collect();
            members.shuffle(&mut rng);
            let props = dirichlet(alpha, clients, &mut rng);
            let counts = apportion(members.len(), &props);
            let mut offset = 0;
            for (i, &cnt) in counts.iter().enumerate() {
                pools[i].extend_from_slice(&members[offset..offset + cnt]);
                offset += cnt;
            }
        }
        if pools.iter().all(|p| split_train_len(p.len()) >= min_train) {
            return Ok(pools.into_iter().map(|p| ClientData::from_pool(p, &mut rng)).collect());
        }
    }
    Err(Error::Data(format!(
        "dirichlet partition left a client below {} training examples after 10 attempts",
        min_train
    )))
}

fn split_train_len(n: usize) -> usize {
    let n_test = (n / 10).max(1).min(n.saturating_sub(2));
    let n_val = (n / 10).max(1).min(n.saturating_sub(n_test + 1));
    n.saturating_sub(n_test + n_val)
}

fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-300)) .collect();
    let sum: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / sum).collect()
}

/// Largest-remainder apportionment of `total` items by `props`.
fn apportion(total: usize, props: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut fracs: Vec<(usize, f64)> = props
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(total - assigned) {
        counts[fracs[k % props.len()].0] += 1;
    }
    counts
}

/// Task skew: client i receives all examples of domain i.
pub fn partition_task_skew(
    corpus: &[Example],
    clients: usize,
    seed: u64,
) -> Result<Vec<ClientData>> {
    let domains = 1 + corpus.iter().map(|e| e.domain).max().unwrap_or(0);
    if domains < clients {
        return Err(Error::Data(format!(
            "task skew needs at least {} domains, corpus has {}",
            clients, domains
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..clients)
        .map(|i| {
            let pool: Vec<Example> =
                corpus.iter().filter(|e| e.domain == i).cloned().collect();
            ClientData::from_pool(pool, &mut rng)
        })
        .collect())
}

/// IID: the whole corpus dealt uniformly at random.
pub fn partition_iid(corpus: &[Example], clients: usize, seed: u64) -> Result<Vec<ClientData>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = corpus.to_vec();
    shuffled.shuffle(&mut rng);
    let mut pools: Vec<Vec<Example>> = vec![Vec::new(); clients];
    for (k, e) in shuffled.into_iter().enumerate() {
        pools[k % clients].push(e);
    }
    Ok(pools.into_iter().map(|p| ClientData::from_pool(p, &mut rng)).collect())
}

/// Uniform random subset of the training split, without replacement.
pub fn sample_embedding_set(train: &[Example], n: usize, seed: u64) -> Result<Vec<Example>> {
    if n > train.len() {
        return Err(Error::Data(format!(
            "embedding set size {} exceeds training set size {}",
            n,
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| train[i].clone()).collect())
}

/// JSON-lines export: one example per line.
pub fn export_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn import_jsonl(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
