//! Cross-modal projector: one region embedding to `N` soft tokens,
//! `Z = reshape(W2 · GELU(W1 e + b1) + b2, (N, d_llm))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{hash_named_tensors, Checkpoint};
use crate::error::{DfrError, Result};
use crate::numkernel::{kernels, Graph, Tensor, Var};

pub const INIT_SCALE: f64 = 0.02;
const NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub d_e: usize,
    pub d_llm: usize,
    pub d_mid: usize,
    pub n_tokens: usize,
    pub seed: u64,
    /// `[W1 (d_mid × d_e), b1 (d_mid), W2 (N·d_llm × d_mid), b2 (N·d_llm)]`.
    params: Vec<Tensor>,
}

/// Graph handles for a bound projector.
#[derive(Clone, Copy, Debug)]
pub struct BoundProjector {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Projector {
    /// Seeded `0.02·N(0,1)` weights, zero biases, `d_mid = d_llm / 2`.
    pub fn init(d_e: usize, d_llm: usize, n_tokens: usize, seed: u64) -> Result<Self> {
        if !d_llm.is_multiple_of(2) {
            return Err(DfrError::Config(format!("projector: d_llm {d_llm} is odd")));
        }
        Self::init_with_mid(d_e, d_llm, d_llm / 2, n_tokens, seed)
    }

    pub fn init_with_mid(d_e: usize, d_llm: usize, d_mid: usize, n_tokens: usize, seed: u64) -> Result<Self> {
        if n_tokens == 0 {
            return Err(DfrError::Config("projector: N must be at least 1".into()));
        }
        if d_e == 0 || d_llm == 0 || d_mid == 0 {
            return Err(DfrError::Config("projector: zero-sized dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = n_tokens * d_llm;
        let params = vec![
            Tensor::randn([d_mid, d_e], INIT_SCALE, &mut rng).with_grad(),
            Tensor::zeros([d_mid]).with_grad(),
            Tensor::randn([out, d_mid], INIT_SCALE, &mut rng).with_grad(),
            Tensor::zeros([out]).with_grad(),
        ];
        Ok(Self {
            d_e,
            d_llm,
            d_mid,
            n_tokens,
            seed,
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn w1(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn b1(&self) -> &Tensor {
        &self.params[1]
    }

    pub fn w2(&self) -> &Tensor {
        &self.params[2]
    }

    pub fn b2(&self) -> &Tensor {
        &self.params[3]
    }

    /// `d_mid·d_e + d_mid + N·d_llm·d_mid + N·d_llm`.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn content_hash(&self) -> String {
        hash_named_tensors(NAMES.iter().copied().zip(&self.params))
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in &mut self.params {
            p.requires_grad = on;
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundProjector {
        BoundProjector {
            w1: g.leaf(&self.params[0]),
            b1: g.leaf(&self.params[1]),
            w2: g.leaf(&self.params[2]),
            b2: g.leaf(&self.params[3]),
        }
    }

    pub fn vars(b: &BoundProjector) -> [Var; 4] {
        [b.w1, b.b1, b.w2, b.b2]
    }

    /// Soft tokens `[N, d_llm]` for an embedding node of length `d_e`.
    pub fn project_var(&self, g: &mut Graph<'_>, b: &BoundProjector, e: Var) -> Result<Var> {
        if g.shape(e) != [self.d_e] {
            return Err(DfrError::Shape {
                op: "project",
                lhs: g.shape(e).to_vec(),
                rhs: vec![self.d_e],
            });
        }
        let h = g.linear(e, b.w1, Some(b.b1))?;
        let h = g.gelu(h)?;
        let z = g.linear(h, b.w2, Some(b.b2))?;
        g.reshape(z, &[self.n_tokens, self.d_llm])
    }

    pub fn project(&self, e: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let ev = g.leaf(e);
        let z = self.project_var(&mut g, &b, ev)?;
        Ok(g.tensor(z))
    }

    /// Same formula evaluated with plain loops, no graph involved.
    pub fn project_direct(&self, e: &[f64]) -> Result<Tensor> {
        if e.len() != self.d_e {
            return Err(DfrError::Shape {
                op: "project",
                lhs: vec![e.len()],
                rhs: vec![self.d_e],
            });
        }
        let (w1, b1, w2, b2) = (self.w1().data(), self.b1().data(), self.w2().data(), self.b2().data());
        let h: Vec<f64> = (0..self.d_mid)
            .map(|i| {
                let s: f64 = (0..self.d_e).map(|j| w1[i * self.d_e + j] * e[j]).sum();
                kernels::gelu(s + b1[i])
            })
            .collect();
        let out = self.n_tokens * self.d_llm;
        let z = (0..out)
            .map(|r| (0..self.d_mid).map(|j| w2[r * self.d_mid + j] * h[j]).sum::<f64>() + b2[r])
            .collect();
        Tensor::new([self.n_tokens, self.d_llm], z)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("projector")
            .tag("d_e", self.d_e)
            .tag("d_llm", self.d_llm)
            .tag("d_mid", self.d_mid)
            .tag("n_tokens", self.n_tokens)
            .tag("seed", self.seed);
        for (n, t) in NAMES.iter().zip(&self.params) {
            ck.push(*n, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "projector" {
            return Err(DfrError::format("projector checkpoint", format!("kind is {}", ck.kind)));
        }
        let mut p = Self::init_with_mid(
            ck.parse_tag("d_e")?,
            ck.parse_tag("d_llm")?,
            ck.parse_tag("d_mid")?,
            ck.parse_tag("n_tokens")?,
            ck.parse_tag("seed")?,
        )?;
        for (name, slot) in NAMES.iter().zip(p.params.iter_mut()) {
            let t = ck.get(name)?;
            if t.shape() != slot.shape() {
                return Err(DfrError::format("projector checkpoint", format!("{name} has shape {:?}", t.shape())));
            }
            *slot = t.clone().with_grad();
        }
        Ok(p)
    }
}

/// Mean of the `N` soft-token rows.
pub fn pool_soft_tokens(z: &Tensor) -> Tensor {
    let (n, d) = (z.rows(), z.cols());
    let mut out = vec![0.0; d];
    for r in 0..n {
        out.iter_mut().zip(z.row(r)).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|x| *x /= n as f64);
    Tensor::from_vec(out)
}
