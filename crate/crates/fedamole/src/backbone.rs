//! Small frozen decoder-only transformer with adapter hooks at the
//! Q and V projections of every layer.
//!
//! Pre-norm RMS normalization, learned absolute position embeddings,
//! two-layer GeLU feed-forward, no biases. All parameters are frozen;
//! fine-tuning happens only in the injected adapter modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 64,
            hidden_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_seq_len: 64,
            init_seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("backbone.vocab_size", self.vocab_size),
            ("backbone.hidden_dim", self.hidden_dim),
            ("backbone.layers", self.layers),
            ("backbone.heads", self.heads),
            ("backbone.ff_dim", self.ff_dim),
            ("backbone.max_seq_len", self.max_seq_len),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::config("backbone.heads", "hidden_dim must be divisible by heads"));
        }
        Ok(())
    }
}

/// Which frozen linear layer an adapter replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjectionKind {
    Query,
    Value,
}

/// Identifier of one adapter site: (layer, Q|V).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub layer: usize,
    pub kind: ProjectionKind,
}

impl InjectionPoint {
    /// Dense index in [0, 2 * layers): layer-major, Q before V.
    pub fn index(&self) -> usize {
        self.layer * 2 + matches!(self.kind, ProjectionKind::Value) as usize
    }

    pub fn all(layers: usize) -> Vec<InjectionPoint> {
        (0..layers)
            .flat_map(|layer| {
                [
                    InjectionPoint { layer, kind: ProjectionKind::Query },
                    InjectionPoint { layer, kind: ProjectionKind::Value },
                ]
            })
            .collect()
    }
}

struct DecoderLayer {
    w_q: Param,
    w_k: Param,
    w_v: Param,
    w_o: Param,
    attn_gain: Param,
    ffn_gain: Param,
    w_ff1: Param,
    w_ff2: Param,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    token_embedding: Param,
    position_embedding: Param,
    layers: Vec<DecoderLayer>,
    final_gain: Param,
    output_head: Param,
}

/// Adapter callback: given the tape, the injection point, the frozen
/// weight leaf W_m [d x d] and the hidden state leaf h [T x d], produce
/// the module output y [T x d].
pub type AdapterFn<'a> = dyn FnMut(&mut Tape, InjectionPoint, NodeId, NodeId) -> Result<NodeId> + 'a;

/// Leaf nodes for one tape binding of the backbone.
pub struct BackboneNodes {
    token_embedding: NodeId,
    position_embedding: NodeId,
    layers: Vec<LayerNodes>,
    final_gain: NodeId,
    output_head: NodeId,
}

struct LayerNodes {
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_o: NodeId,
    attn_gain: NodeId,
    ffn_gain: NodeId,
    w_ff1: NodeId,
    w_ff2: NodeId,
}

pub fn init_backbone(cfg: &BackboneConfig) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let d = cfg.hidden_dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut mat = |rows: usize, cols: usize| Param::frozen(Tensor::uniform(rows, cols, bound, &mut rng));

    let token_embedding = mat(cfg.vocab_size, d);
    let position_embedding = mat(cfg.max_seq_len, d);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(DecoderLayer {
            w_q: mat(d, d),
            w_k: mat(d, d),
            w_v: mat(d, d),
            w_o: mat(d, d),
            attn_gain: Param::frozen(ones(1, d)),
            ffn_gain: Param::frozen(ones(1, d)),
            w_ff1: mat(cfg.ff_dim, d),
            w_ff2: mat(d, cfg.ff_dim),
        });
    }
    let final_gain = Param::frozen(ones(1, d));
    let output_head = mat(cfg.vocab_size, d);
    Ok(Backbone { cfg: cfg.clone(), token_embedding, position_embedding, layers, final_gain, output_head })
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor { rows, cols, data: vec![1.0; rows * cols] }
}

impl Backbone {
    /// Total parameter count (all frozen).
    pub fn param_count(&self) -> usize {
        let mut n = self.token_embedding.value.len()
            + self.position_embedding.value.len()
            + self.final_gain.value.len()
            + self.output_head.value.len();
        for l in &self.layers {
            n += l.w_q.value.len()
                + l.w_k.value.len()
                + l.w_v.value.len()
                + l.w_o.value.len()
                + l.attn_gain.value.len()
                + l.ffn_gain.value.len()
                + l.w_ff1.value.len()
                + l.w_ff2.value.len();
        }
        n
    }

    /// Order-stable checksum over all parameter bits, for frozen-contract audits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |t: &Tensor| {
            for &x in &t.data {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        mix(&self.token_embedding.value);
        mix(&self.position_embedding.value);
        for l in &self.layers {
            mix(&l.w_q.value);
            mix(&l.w_k.value);
            mix(&l.w_v.value);
            mix(&l.w_o.value);
            mix(&l.attn_gain.value);
            mix(&l.ffn_gain.value);
            mix(&l.w_ff1.value);
            mix(&l.w_ff2.value);
        }
        mix(&self.final_gain.value);
        mix(&self.output_head.value);
        h
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneNodes {
        BackboneNodes {
            token_embedding: tape.param(&self.token_embedding),
            position_embedding: tape.param(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerNodes {
                    w_q: tape.param(&l.w_q),
                    w_k: tape.param(&l.w_k),
                    w_v: tape.param(&l.w_v),
                    w_o: tape.param(&l.w_o),
                    attn_gain: tape.param(&l.attn_gain),
                    ffn_gain: tape.param(&l.ffn_gain),
                    w_ff1: tape.param(&l.w_ff1),
                    w_ff2: tape.param(&l.w_ff2),
                })
                .collect(),
            final_gain: tape.param(&self.final_gain),
            output_head: tape.param(&self.output_head),
        }
    }

    /// Causal forward pass; adapter callbacks produce the Q and V outputs.
    /// Returns the logits node [T x vocab].
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &BackboneNodes,
        tokens: &[usize],
        adapter: &mut AdapterFn,
    ) -> Result<NodeId> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Invalid("forward: empty token sequence".into()));
        }
        if t_len > self.cfg.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max {}",
                t_len, self.cfg.max_seq_len
            )));
        }
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;

        let tok = tape.embed(nodes.token_embedding, tokens)?;
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = tape.embed(nodes.position_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mask = causal_mask(t_len);
        for (li, layer) in nodes.layers.iter().enumerate() {
            let point_q = InjectionPoint { layer: li, kind: ProjectionKind::Query };
            let point_v = InjectionPoint { layer: li, kind: ProjectionKind::Value };

            let h = tape.rmsnorm_rows(x, layer.attn_gain)?;
            let q = adapter(tape, point_q, layer.w_q, h)?;
            let k = linear(tape, h, layer.w_k)?;
            let v = adapter(tape, point_v, layer.w_v, h)?;

            let mut head_outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = tape.slice_cols(q, hh * dh, dh)?;
                let kh = tape.slice_cols(k, hh * dh, dh)?;
                let vh = tape.slice_cols(v, hh * dh, dh)?;
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let mask_node = tape.constant(mask.clone());
                let scores = tape.add(scores, mask_node)?;
                let attn = tape.softmax_rows(scores);
                head_outs.push(tape.matmul(attn, vh)?);
            }
            let concat = tape.concat_cols(&head_outs)?;
            let o = linear(tape, concat, layer.w_o)?;
            x = tape.add(x, o)?;

            let hf = tape.rmsnorm_rows(x, layer.ffn_gain)?;
            let f1 = linear(tape, hf, layer.w_ff1)?;
            let f1 = tape.gelu(f1);
            let f2 = linear(tape, f1, layer.w_ff2)?;
            x = tape.add(x, f2)?;
        }

        let xn = tape.rmsnorm_rows(x, nodes.final_gain)?;
        linear(tape, xn, nodes.output_head)
    }

    /// Forward pass with identity adapters (y = W_m h).
    pub fn forward_plain(&self, tape: &mut Tape, tokens: &[usize]) -> Result<NodeId> {
        let nodes = self.bind(tape);
        self.forward(tape, &nodes, tokens, &mut identity_adapter)
    }
}

/// y = x W^T for a weight stored as [out x in].
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId) -> Result<NodeId> {
    let wt = tape.transpose(w);
    tape.matmul(x, wt)
}

/// The no-op adapter: pure frozen projection.
pub fn identity_adapter(tape: &mut Tape, _p: InjectionPoint, w: NodeId, h: NodeId) -> Result<NodeId> {
    linear(tape, h, w)
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for i in 0..t {
        for j in (i + 1)..t {
            *m.at_mut(i, j) = -1e30;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = BackboneConfig::default();
        let a = init_backbone(&cfg).unwrap();
        let b = init_backbone(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_backbone(&BackboneConfig::default()).unwrap();
        let b = init_backbone(&BackboneConfig { init_seed: 8, ..BackboneConfig::default() }).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = BackboneConfig {
            vocab_size: 64,
            hidden_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            max_seq_len: 64,
            init_seed: 1,
        };
        let bb = init_backbone(&cfg).unwrap();
        let (v, d, l, ff, t) = (64usize, 32usize, 2usize, 64usize, 64usize);
        let expected = v * d            // token embedding
            + t * d                     // position embedding
            + l * (4 * d * d + 2 * d + 2 * ff * d) // per-layer attn + gains + ffn
            + d                         // final gain
            + v * d; // output head
        assert_eq!(bb.param_count(), expected);
    }

    #[test]
    fn invalid_dims_rejected() {
        let cfg = BackboneConfig { heads: 5, ..BackboneConfig::default() };
        assert!(init_backbone(&cfg).is_err());
        let cfg = BackboneConfig { layers: 0, ..BackboneConfig::default() };
        assert!(init_backbone(&cfg).is_err());
    }

    #[test]
    fn logits_shape_and_token_bounds() {
        let cfg = BackboneConfig::default();
        let bb = init_backbone(&cfg).unwrap();
        let mut tape = Tape::new();
        let logits = bb.forward_plain(&mut tape, &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(logits).shape(), (3, cfg.vocab_size));
        let mut tape = Tape::new();
        assert!(bb.forward_plain(&mut tape, &[cfg.vocab_size]).is_err());
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let cfg = BackboneConfig::default();
        let bb = init_backbone(&cfg).unwrap();
        let base = [3usize, 9, 14, 27, 5];
        let mut tape = Tape::new();
        let la = bb.forward_plain(&mut tape, &base).unwrap();
        let a = tape.value(la).clone();
        // perturb position 3: logits at positions 0..3 must be unchanged
        let mut perturbed = base;
        perturbed[3] = 40;
        let mut tape = Tape::new();
        let lb = bb.forward_plain(&mut tape, &perturbed).unwrap();
        let b = tape.value(lb).clone();
        for pos in 0..3 {
            for j in 0..cfg.vocab_size {
                assert_eq!(a.at(pos, j).to_bits(), b.at(pos, j).to_bits());
            }
        }
        // and position 3 itself must change
        assert!((0..cfg.vocab_size).any(|j| a.at(3, j) != b.at(3, j)));
    }

    #[test]
    fn zero_delta_adapter_matches_plain_forward() {
        let cfg = BackboneConfig::default();
        let bb = init_backbone(&cfg).unwrap();
        let tokens = [4usize, 8, 15];
        let mut tape = Tape::new();
        let plain = bb.forward_plain(&mut tape, &tokens).unwrap();
        let plain_v = tape.value(plain).clone();

        // adapter that adds an explicit zero delta
        let mut tape = Tape::new();
        let nodes = bb.bind(&mut tape);
        let mut adapter = |tape: &mut Tape, _p: InjectionPoint, w: NodeId, h: NodeId| {
            let base = linear(tape, h, w)?;
            let (r, c) = tape.value(base).shape();
            let zero = tape.constant(Tensor::zeros(r, c));
            tape.add(base, zero)
        };
        let with = bb.forward(&mut tape, &nodes, &tokens, &mut adapter).unwrap();
        assert_eq!(tape.value(with), &plain_v);
    }
}
