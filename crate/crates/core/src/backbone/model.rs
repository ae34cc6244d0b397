use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_named_tensors, Checkpoint};
use crate::error::{DfrError, Result};
use crate::numkernel::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_llm: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_context: 512,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_llm == 0 || self.n_heads == 0 || !self.d_llm.is_multiple_of(self.n_heads) {
            return Err(DfrError::Config(format!(
                "backbone: d_llm {} not divisible by n_heads {}",
                self.d_llm, self.n_heads
            )));
        }
        if !(self.d_llm / self.n_heads).is_multiple_of(2) {
            return Err(DfrError::Config("backbone: head dimension must be even for RoPE".into()));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.max_context == 0 {
            return Err(DfrError::Config("backbone: zero-sized dimension".into()));
        }
        Ok(())
    }
}

const PER_LAYER: [&str; 10] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "b_up", "w_down", "b_down",
];
const ATTN_NORM: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const MLP_NORM: usize = 5;
const W_UP: usize = 6;
const B_UP: usize = 7;
const W_DOWN: usize = 8;
const B_DOWN: usize = 9;
const NORM_EPS: f64 = 1e-6;

/// Pre-norm decoder-only transformer: token table, `n_layers` blocks of
/// RMSNorm → RoPE causal attention → residual, RMSNorm → GELU MLP →
/// residual, then a final RMSNorm and an untied output head with bias.
///
/// Parameters live in one flat list so that binding, hashing and optimizer
/// updates treat every tensor uniformly; `names()` gives their dotted names.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    frozen_hash: Option<String>,
}

/// Graph handles of every backbone parameter, in `Backbone::params` order.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub vars: Vec<Var>,
}

impl Backbone {
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.d_llm, config.d_ff);
        let std = 0.02;
        let out_std = 0.02 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        push("tok_emb".into(), Tensor::randn([v, d], std, &mut rng));
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            push(p("attn_norm"), Tensor::filled([d], 1.0));
            push(p("wq"), Tensor::randn([d, d], std, &mut rng));
            push(p("wk"), Tensor::randn([d, d], std, &mut rng));
            push(p("wv"), Tensor::randn([d, d], std, &mut rng));
            push(p("wo"), Tensor::randn([d, d], out_std, &mut rng));
            push(p("mlp_norm"), Tensor::filled([d], 1.0));
            push(p("w_up"), Tensor::randn([f, d], std, &mut rng));
            push(p("b_up"), Tensor::zeros([f]));
            push(p("w_down"), Tensor::randn([d, f], out_std, &mut rng));
            push(p("b_down"), Tensor::zeros([d]));
        }
        push("final_norm".into(), Tensor::filled([d], 1.0));
        push("head".into(), Tensor::randn([v, d], std, &mut rng));
        push("head_bias".into(), Tensor::zeros([v]));
        Ok(Self {
            config,
            names,
            params,
            frozen_hash: None,
        })
    }

    pub fn d_llm(&self) -> usize {
        self.config.d_llm
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access. Fails once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut [Tensor]> {
        if self.frozen_hash.is_some() {
            return Err(DfrError::Integrity("backbone is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn tok_emb(&self) -> &Tensor {
        &self.params[0]
    }

    fn layer_index(&self, layer: usize, slot: usize) -> usize {
        1 + layer * PER_LAYER.len() + slot
    }

    /// Parameter indices of decoder block `layer`.
    pub fn layer_param_indices(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.layer_index(layer, 0);
        start..start + PER_LAYER.len()
    }

    fn final_index(&self) -> usize {
        1 + self.config.n_layers * PER_LAYER.len()
    }

    pub fn content_hash(&self) -> String {
        hash_named_tensors(self.names.iter().map(String::as_str).zip(&self.params))
    }

    /// Clears every gradient flag, records the content hash and returns it.
    pub fn freeze(&mut self) -> String {
        for p in &mut self.params {
            p.requires_grad = false;
            p.grad = None;
        }
        let h = self.content_hash();
        self.frozen_hash = Some(h.clone());
        h
    }

    /// Lifts the freeze so ablations can train a copy of the backbone.
    pub fn unfreeze(&mut self) {
        self.frozen_hash = None;
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    /// Recomputes the content hash and compares it to the freeze-time hash.
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_hash {
            None => Err(DfrError::Integrity("backbone was never frozen".into())),
            Some(h) if *h == self.content_hash() => Ok(()),
            Some(h) => Err(DfrError::Integrity(format!(
                "backbone hash drifted from {h} to {}",
                self.content_hash()
            ))),
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundBackbone {
        BoundBackbone {
            vars: self.params.iter().map(|t| g.leaf(t)).collect(),
        }
    }

    /// Token-table rows for `ids` as a graph node.
    pub fn embed_var<'a>(&'a self, g: &mut Graph<'a>, b: &BoundBackbone, ids: &[usize]) -> Result<Var> {
        let d = self.d_llm();
        if ids.is_empty() {
            return Ok(g.constant(Tensor::zeros([0, d])));
        }
        g.gather_rows(b.vars[0], ids)
    }

    /// Runs every decoder block and the final norm over `x: [T, d_llm]`.
    pub fn hidden_var<'a>(&'a self, g: &mut Graph<'a>, b: &BoundBackbone, x: Var, position_ids: &[usize]) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.d_llm() {
            return Err(DfrError::Shape {
                op: "backbone.forward",
                lhs: xs,
                rhs: vec![position_ids.len(), self.d_llm()],
            });
        }
        if xs[0] != position_ids.len() {
            return Err(DfrError::invalid(format!(
                "{} positions for {} input rows",
                position_ids.len(),
                xs[0]
            )));
        }
        check_increasing(position_ids)?;
        let c = &self.config;
        let mut h = x;
        for l in 0..c.n_layers {
            let v = |slot| b.vars[self.layer_index(l, slot)];
            let a_in = g.rms_norm(h, v(ATTN_NORM), NORM_EPS)?;
            let q = g.linear(a_in, v(WQ), None)?;
            let k = g.linear(a_in, v(WK), None)?;
            let vv = g.linear(a_in, v(WV), None)?;
            let q = g.rope(q, position_ids, c.n_heads, c.rope_base)?;
            let k = g.rope(k, position_ids, c.n_heads, c.rope_base)?;
            let att = g.causal_attention(q, k, vv, c.n_heads)?;
            let o = g.linear(att, v(WO), None)?;
            h = g.add(h, o)?;
            let m_in = g.rms_norm(h, v(MLP_NORM), NORM_EPS)?;
            let up = g.linear(m_in, v(W_UP), Some(v(B_UP)))?;
            let up = g.gelu(up)?;
            let down = g.linear(up, v(W_DOWN), Some(v(B_DOWN)))?;
            h = g.add(h, down)?;
        }
        g.rms_norm(h, b.vars[self.final_index()], NORM_EPS)
    }

    /// Output-head logits for the given rows of a hidden-state node.
    pub fn logits_var<'a>(&'a self, g: &mut Graph<'a>, b: &BoundBackbone, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => g.gather_rows(hidden, r)?,
            None => hidden,
        };
        let f = self.final_index();
        g.linear(h, b.vars[f + 1], Some(b.vars[f + 2]))
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = self.embed_var(&mut g, &b, ids)?;
        Ok(g.tensor(x))
    }

    /// Logits `[T, V]` for precomputed input embeddings.
    pub fn forward(&self, input_embeds: &Tensor, position_ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.leaf(input_embeds);
        let h = self.hidden_var(&mut g, &b, x, position_ids)?;
        let l = self.logits_var(&mut g, &b, h, None)?;
        Ok(g.tensor(l))
    }

    /// Logits `[T, V]` for token ids at positions `0..T`.
    pub fn forward_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = self.embed_var(&mut g, &b, ids)?;
        let pos: Vec<usize> = (0..ids.len()).collect();
        let h = self.hidden_var(&mut g, &b, x, &pos)?;
        let l = self.logits_var(&mut g, &b, h, None)?;
        Ok(g.tensor(l))
    }

    /// Logits of the last row only.
    pub fn last_logits(&self, input_embeds: &Tensor, position_ids: &[usize]) -> Result<Vec<f64>> {
        let t = position_ids.len();
        if t == 0 {
            return Err(DfrError::invalid("empty prefix"));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.leaf(input_embeds);
        let h = self.hidden_var(&mut g, &b, x, position_ids)?;
        let l = self.logits_var(&mut g, &b, h, Some(&[t - 1]))?;
        Ok(g.value(l).to_vec())
    }

    /// Greedy decoding after a prefix of input embeddings. New tokens are
    /// embedded with the token table and take consecutive position ids after
    /// the prefix; decoding stops at `<eos>` (not returned) or `max_new`.
    pub fn generate_greedy(&self, prefix: &Tensor, position_ids: &[usize], max_new: usize, eos: usize) -> Result<Vec<usize>> {
        let d = self.d_llm();
        let mut embeds = prefix.data().to_vec();
        let mut pos = position_ids.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let x = Tensor::new([pos.len(), d], embeds.clone())?;
            let logits = self.last_logits(&x, &pos)?;
            let next = argmax(&logits);
            if next == eos {
                break;
            }
            out.push(next);
            embeds.extend_from_slice(self.tok_emb().row(next));
            pos.push(pos.last().map_or(0, |p| p + 1));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new("backbone")
            .tag("vocab_size", c.vocab_size)
            .tag("d_llm", c.d_llm)
            .tag("n_layers", c.n_layers)
            .tag("n_heads", c.n_heads)
            .tag("d_ff", c.d_ff)
            .tag("max_context", c.max_context)
            .tag("rope_base", c.rope_base)
            .tag("seed", c.seed)
            .tag("frozen", self.is_frozen());
        for (n, t) in self.names.iter().zip(&self.params) {
            ck.push(n.clone(), t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "backbone" {
            return Err(DfrError::format("backbone checkpoint", format!("kind is {}", ck.kind)));
        }
        let config = BackboneConfig {
            vocab_size: ck.parse_tag("vocab_size")?,
            d_llm: ck.parse_tag("d_llm")?,
            n_layers: ck.parse_tag("n_layers")?,
            n_heads: ck.parse_tag("n_heads")?,
            d_ff: ck.parse_tag("d_ff")?,
            max_context: ck.parse_tag("max_context")?,
            rope_base: ck.parse_tag("rope_base")?,
            seed: ck.parse_tag("seed")?,
        };
        let mut model = Self::init(BackboneConfig { ..config })?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = ck.get(name)?;
            if t.shape() != slot.shape() {
                return Err(DfrError::format(
                    "backbone checkpoint",
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        if ck.parse_tag::<bool>("frozen")? {
            model.freeze();
        }
        Ok(model)
    }
}

fn check_increasing(pos: &[usize]) -> Result<()> {
    match pos.windows(2).position(|w| w[1] <= w[0]) {
        Some(i) => Err(DfrError::invalid(format!(
            "position ids not strictly increasing at index {}: {} then {}",
            i + 1,
            pos[i],
            pos[i + 1]
        ))),
        None => Ok(()),
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
