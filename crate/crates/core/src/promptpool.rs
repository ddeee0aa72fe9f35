//! Learnable prompt pool with cosine key–query lookup.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numcore::{cosine, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Prompts join the input token sequence.
    PromptTuning,
    /// Prompts are prepended to attention keys and values.
    PrefixTuning,
}

#[derive(Debug, Clone)]
pub struct PromptPool {
    prompts: Tensor,
    keys: Tensor,
    select: usize,
    keys_frozen: bool,
}

/// Pool entries chosen for one query, in ascending index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl PromptPool {
    /// `size` prompts of `[prompt_len, embed_dim]` and `size` keys, all
    /// entries drawn uniformly from `[-1, 1)`.
    pub fn init(
        size: usize,
        prompt_len: usize,
        embed_dim: usize,
        select: usize,
        seed: u64,
    ) -> Result<Self> {
        if select == 0 || select > size {
            return Err(LabError::invalid(format!(
                "selection size N={select} must satisfy 1 <= N <= M={size}"
            )));
        }
        if prompt_len == 0 || embed_dim == 0 {
            return Err(LabError::invalid("prompt length and embedding size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-1.0, 1.0).expect("valid range");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| u.sample(&mut rng)).collect() };
        let prompts = Tensor::param(
            "pool.prompts",
            draw(size * prompt_len * embed_dim),
            &[size, prompt_len, embed_dim],
        )?;
        let keys = Tensor::param("pool.keys", draw(size * embed_dim), &[size, embed_dim])?;
        Ok(Self {
            prompts,
            keys,
            select,
            keys_frozen: false,
        })
    }

    /// Assembles a pool from existing tensors (checkpoints, tests).
    pub fn from_parts(prompts: Tensor, keys: Tensor, select: usize, keys_frozen: bool) -> Result<Self> {
        if prompts.rank() != 3 || keys.rank() != 2 || prompts.shape()[0] != keys.shape()[0] || prompts.shape()[2] != keys.shape()[1] {
            return Err(LabError::Shape {
                op: "prompt pool",
                lhs: prompts.shape().to_vec(),
                rhs: keys.shape().to_vec(),
            });
        }
        let size = keys.shape()[0];
        if select == 0 || select > size {
            return Err(LabError::invalid(format!(
                "selection size N={select} must satisfy 1 <= N <= M={size}"
            )));
        }
        let prompts = prompts.to_param("pool.prompts");
        let keys = if keys_frozen {
            keys.to_frozen("pool.keys")
        } else {
            keys.to_param("pool.keys")
        };
        Ok(Self {
            prompts,
            keys,
            select,
            keys_frozen,
        })
    }

    /// Replaces the keys with constants, e.g. text features; they never train afterwards.
    pub fn freeze_keys_to(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        let (m, e) = (self.size(), self.embed_dim());
        if rows.len() != m || rows.iter().any(|r| r.len() != e) {
            return Err(LabError::invalid(format!("frozen keys must be {m} rows of length {e}")));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        self.keys = Tensor::new(flat, &[m, e])?.to_frozen("pool.keys");
        self.keys_frozen = true;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn select_count(&self) -> usize {
        self.select
    }

    pub fn keys_frozen(&self) -> bool {
        self.keys_frozen
    }

    pub fn prompts(&self) -> &Tensor {
        &self.prompts
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    /// Tensors the optimizer should update.
    pub fn trainable(&self) -> Vec<Tensor> {
        if self.keys_frozen {
            vec![self.prompts.clone()]
        } else {
            vec![self.prompts.clone(), self.keys.clone()]
        }
    }

    /// The `N` keys most cosine-similar to `query`, lowest index first on ties,
    /// returned in ascending index order.
    pub fn lookup(&self, query: &[f64]) -> Result<Selection> {
        let e = self.embed_dim();
        if query.len() != e {
            return Err(LabError::Shape {
                op: "lookup",
                lhs: vec![query.len()],
                rhs: vec![e],
            });
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(LabError::ZeroNorm("lookup query".into()));
        }
        let keys = self.keys.data();
        let mut sims = Vec::with_capacity(self.size());
        for (j, k) in keys.chunks(e).enumerate() {
            let kn = norm(k);
            if kn == 0.0 {
                return Err(LabError::ZeroNorm(format!("pool key {j}")));
            }
            let dot: f64 = k.iter().zip(query).map(|(a, b)| a * b).sum();
            sims.push((dot / (kn * qn)).clamp(-1.0, 1.0));
        }
        drop(keys);
        let mut order: Vec<usize> = (0..sims.len()).collect();
        // stable sort keeps lower indices first among equal similarities
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
        let mut indices = order[..self.select].to_vec();
        indices.sort_unstable();
        let similarities = indices.iter().map(|&i| sims[i]).collect();
        Ok(Selection {
            indices,
            similarities,
        })
    }

    fn check_selection(&self, sel: &Selection) -> Result<()> {
        let ok = !sel.indices.is_empty()
            && sel.indices.windows(2).all(|w| w[0] < w[1])
            && sel.indices.iter().all(|&i| i < self.size());
        if !ok {
            return Err(LabError::invalid(format!(
                "invalid selection {:?} for a pool of {}",
                sel.indices,
                self.size()
            )));
        }
        Ok(())
    }

    /// Selected prompts stacked as `[N * L_p, E]`.
    pub fn gather_prompts(&self, sel: &Selection) -> Result<Tensor> {
        self.check_selection(sel)?;
        let (l, e) = (self.prompt_len(), self.embed_dim());
        self.prompts
            .index_select(&sel.indices)?
            .reshape(&[sel.indices.len() * l, e])
    }

    /// Selected keys as `[N, E]`.
    pub fn gather_keys(&self, sel: &Selection) -> Result<Tensor> {
        self.check_selection(sel)?;
        self.keys.index_select(&sel.indices)
    }

    /// Mean over selected keys of `1 - cos(query, key)`; the query is a constant.
    pub fn key_pull_loss(&self, query: &Tensor, sel: &Selection) -> Result<Tensor> {
        let q = query.detach();
        let keys = self.gather_keys(sel)?;
        let n = sel.indices.len();
        let mut total: Option<Tensor> = None;
        for r in 0..n {
            let k = keys.slice(0, r, r + 1)?.reshape(&[self.embed_dim()])?;
            let term = cosine(&q, &k)
                .map_err(|e| match e {
                    LabError::ZeroNorm(_) => LabError::ZeroNorm(format!("pool key {}", sel.indices[r])),
                    other => other,
                })?
                .neg()
                .add_scalar(1.0);
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(total.expect("non-empty selection").scale(1.0 / n as f64))
    }
}

/// Encoder output handed to [`pool_x_o`].
#[derive(Debug, Clone)]
pub enum PooledInput {
    /// Outputs at the prompt positions, `[N * L_p, E]`.
    PromptTokens(Tensor),
    /// CLS output after prefix injection, `[E]`.
    Cls(Tensor),
}

/// Classification feature: mean of prompt-position outputs (prompt tuning)
/// or the CLS output unchanged (prefix tuning).
pub fn pool_x_o(mode: PromptMode, input: &PooledInput) -> Result<Tensor> {
    match (mode, input) {
        (PromptMode::PromptTuning, PooledInput::PromptTokens(t)) => {
            if t.rank() != 2 || t.shape()[0] == 0 {
                return Err(LabError::invalid(format!(
                    "prompt-token outputs must be a non-empty [n, E], got {:?}",
                    t.shape()
                )));
            }
            t.mean(0)
        }
        (PromptMode::PrefixTuning, PooledInput::Cls(t)) => Ok(t.clone()),
        (mode, _) => Err(LabError::invalid(format!("pooled input does not match mode {mode:?}"))),
    }
}
