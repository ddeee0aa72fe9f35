//! A small pre-LN vision transformer used as the frozen feature extractor.
//!
//! Three forward modes share one code path:
//! - plain: `[CLS; patches]`, used for the lookup query,
//! - prompt tuning: `[CLS; prompts; patches]`,
//! - prefix tuning: per-layer rows prepended to attention keys and values.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{LabError, Result};
use crate::numcore::{adam_step, io, no_grad, AdamState, Tensor};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_channels: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 2,
            num_channels: 3,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_ratio,
            self.num_channels,
        ];
        if positive.contains(&0) {
            return Err(LabError::invalid(format!("ViT dimensions must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(LabError::invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(LabError::invalid(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.num_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.num_channels, self.image_size, self.image_size]
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    qkv_w: Tensor,
    qkv_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

/// Key and value rows prepended inside one attention layer.
#[derive(Debug, Clone)]
pub struct LayerPrefix {
    pub layer: usize,
    pub key: Tensor,
    pub value: Tensor,
}

/// Prefixes for a set of layers, at most one entry per layer.
#[derive(Debug, Clone, Default)]
pub struct PrefixSet {
    entries: Vec<LayerPrefix>,
}

impl PrefixSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Splits each `[L, E]` prompt into its first `L/2` rows (keys) and last
    /// `L/2` rows (values). `L` must be even.
    pub fn from_prompts(prompts: Vec<(usize, Tensor)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(prompts.len());
        for (layer, p) in prompts {
            if p.rank() != 2 {
                return Err(LabError::invalid(format!(
                    "prefix prompt for layer {layer} must be [L, E], got {:?}",
                    p.shape()
                )));
            }
            let len = p.shape()[0];
            if len % 2 != 0 {
                return Err(LabError::invalid(format!(
                    "prefix prompt length {len} for layer {layer} is odd; it is split evenly into keys and values"
                )));
            }
            entries.push(LayerPrefix {
                layer,
                key: p.slice(0, 0, len / 2)?,
                value: p.slice(0, len / 2, len)?,
            });
        }
        Self::from_pairs(entries)
    }

    pub fn from_pairs(entries: Vec<LayerPrefix>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.layer) {
                return Err(LabError::invalid(format!("duplicate prefix for layer {}", e.layer)));
            }
            if e.key.shape() != e.value.shape() || e.key.rank() != 2 {
                return Err(LabError::Shape {
                    op: "prefix",
                    lhs: e.key.shape().to_vec(),
                    rhs: e.value.shape().to_vec(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    fn get(&self, layer: usize) -> Option<&LayerPrefix> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Output of a prompt-tuning pass.
#[derive(Debug, Clone)]
pub struct PromptedOutput {
    /// Final-norm outputs for the whole `[CLS; prompts; patches]` sequence.
    pub all_tokens: Tensor,
    /// Rows of `all_tokens` at the prompt positions.
    pub prompt_tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: ViTConfig,
    seed: u64,
    frozen: bool,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm_g: Tensor,
    norm_b: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl Backbone {
    /// Randomly initialized, trainable backbone.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let hidden = e * config.mlp_ratio;
        let pd = config.patch_dim();
        let mut linear = |name: String, fan_in: usize, fan_out: usize| -> Result<(Tensor, Tensor)> {
            let w = Tensor::param(
                format!("{name}.w"),
                normal(&mut rng, fan_in * fan_out, (1.0 / fan_in as f64).sqrt()),
                &[fan_in, fan_out],
            )?;
            let b = Tensor::param(format!("{name}.b"), vec![0.0; fan_out], &[fan_out])?;
            Ok((w, b))
        };
        let ln = |name: String| -> Result<(Tensor, Tensor)> {
            Ok((
                Tensor::param(format!("{name}.g"), vec![1.0; e], &[e])?,
                Tensor::param(format!("{name}.b"), vec![0.0; e], &[e])?,
            ))
        };
        let (patch_w, patch_b) = linear("patch".into(), pd, e)?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let (ln1_g, ln1_b) = ln(format!("blocks.{l}.ln1"))?;
            let (qkv_w, qkv_b) = linear(format!("blocks.{l}.qkv"), e, 3 * e)?;
            let (proj_w, proj_b) = linear(format!("blocks.{l}.proj"), e, e)?;
            let (ln2_g, ln2_b) = ln(format!("blocks.{l}.ln2"))?;
            let (fc1_w, fc1_b) = linear(format!("blocks.{l}.fc1"), e, hidden)?;
            let (fc2_w, fc2_b) = linear(format!("blocks.{l}.fc2"), hidden, e)?;
            blocks.push(Block {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let (norm_g, norm_b) = ln("norm".into())?;
        let cls = Tensor::param("cls", normal(&mut rng, e, 0.02), &[1, e])?;
        let pos = Tensor::param(
            "pos",
            normal(&mut rng, (1 + config.num_patches()) * e, 0.02),
            &[1 + config.num_patches(), e],
        )?;
        Ok(Self {
            config,
            seed,
            frozen: false,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g,
            norm_b,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// All weights in a fixed order with their names.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![self.patch_w.clone(), self.patch_b.clone(), self.cls.clone(), self.pos.clone()];
        for b in &self.blocks {
            v.extend([
                b.ln1_g.clone(),
                b.ln1_b.clone(),
                b.qkv_w.clone(),
                b.qkv_b.clone(),
                b.proj_w.clone(),
                b.proj_b.clone(),
                b.ln2_g.clone(),
                b.ln2_b.clone(),
                b.fc1_w.clone(),
                b.fc1_b.clone(),
                b.fc2_w.clone(),
                b.fc2_b.clone(),
            ]);
        }
        v.extend([self.norm_g.clone(), self.norm_b.clone()]);
        v.into_iter()
            .map(|t| (t.name().unwrap_or("?").to_owned(), t))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over the exact bits of every weight.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for v in t.data().iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn map_params(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        let b = |t: &Tensor| f(t);
        Self {
            config: self.config,
            seed: self.seed,
            frozen: self.frozen,
            patch_w: b(&self.patch_w),
            patch_b: b(&self.patch_b),
            cls: b(&self.cls),
            pos: b(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|k| Block {
                    ln1_g: b(&k.ln1_g),
                    ln1_b: b(&k.ln1_b),
                    qkv_w: b(&k.qkv_w),
                    qkv_b: b(&k.qkv_b),
                    proj_w: b(&k.proj_w),
                    proj_b: b(&k.proj_b),
                    ln2_g: b(&k.ln2_g),
                    ln2_b: b(&k.ln2_b),
                    fc1_w: b(&k.fc1_w),
                    fc1_b: b(&k.fc1_b),
                    fc2_w: b(&k.fc2_w),
                    fc2_b: b(&k.fc2_b),
                })
                .collect(),
            norm_g: b(&self.norm_g),
            norm_b: b(&self.norm_b),
        }
    }

    /// Copy whose weights are constants; no gradient can reach them.
    pub fn freeze(&self) -> Self {
        let mut out = self.map_params(|t| t.to_frozen(t.name().unwrap_or("?")));
        out.frozen = true;
        out
    }

    fn require_frozen(&self, op: &'static str) -> Result<()> {
        if !self.frozen {
            return Err(LabError::InvalidOp {
                op,
                message: "backbone must be frozen".into(),
            });
        }
        Ok(())
    }

    /// `[C, H, W]` image to `[num_patches, C*p*p]`, patches in row-major grid order.
    fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        if image.shape() != cfg.image_shape() {
            return Err(LabError::InvalidOp {
                op: "patchify",
                message: format!(
                    "image shape {:?} does not match backbone {:?}",
                    image.shape(),
                    cfg.image_shape()
                ),
            });
        }
        let (p, s, c) = (cfg.patch_size, cfg.image_size, cfg.num_channels);
        let side = s / p;
        let x = image.data();
        let mut out = Vec::with_capacity(x.len());
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = (ch * s + py * p + dy) * s + px * p;
                        out.extend_from_slice(&x[row..row + p]);
                    }
                }
            }
        }
        drop(x);
        Tensor::new(out, &[cfg.num_patches(), cfg.patch_dim()])
    }

    fn attention(
        &self,
        block: &Block,
        h: &Tensor,
        prefix: Option<&LayerPrefix>,
        trace: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let e = self.config.embed_dim;
        let d = self.config.head_dim();
        let qkv = h.matmul(&block.qkv_w)?.add_bias(&block.qkv_b)?;
        let q = qkv.slice(1, 0, e)?;
        let mut k = qkv.slice(1, e, 2 * e)?;
        let mut v = qkv.slice(1, 2 * e, 3 * e)?;
        if let Some(p) = prefix {
            if p.key.shape()[1] != e {
                return Err(LabError::Shape {
                    op: "prefix attention",
                    lhs: p.key.shape().to_vec(),
                    rhs: vec![k.shape()[0], e],
                });
            }
            k = Tensor::concat(&[p.key.clone(), k], 0)?;
            v = Tensor::concat(&[p.value.clone(), v], 0)?;
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for hd in 0..self.config.num_heads {
            let (a, b) = (hd * d, (hd + 1) * d);
            let qh = q.slice(1, a, b)?;
            let kh = k.slice(1, a, b)?;
            let vh = v.slice(1, a, b)?;
            let weights = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
            if let Some(t) = trace.as_mut() {
                t.push(weights.clone());
            }
            heads.push(weights.matmul(&vh)?);
        }
        Tensor::concat(&heads, 1)?
            .matmul(&block.proj_w)?
            .add_bias(&block.proj_b)
    }

    /// Runs the encoder over `[CLS; extra; patches]` and returns the
    /// final-norm token outputs.
    fn encode(
        &self,
        image: &Tensor,
        extra_tokens: Option<&Tensor>,
        prefixes: &PrefixSet,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let e = self.config.embed_dim;
        let np = self.config.num_patches();
        let patches = self
            .patchify(image)?
            .matmul(&self.patch_w)?
            .add_bias(&self.patch_b)?
            .add(&self.pos.slice(0, 1, 1 + np)?)?;
        let cls = self.cls.add(&self.pos.slice(0, 0, 1)?)?;
        let mut parts = vec![cls];
        if let Some(p) = extra_tokens {
            if p.rank() != 2 || p.shape()[1] != e {
                return Err(LabError::Shape {
                    op: "prompt tokens",
                    lhs: p.shape().to_vec(),
                    rhs: vec![p.shape().first().copied().unwrap_or(0), e],
                });
            }
            if p.shape()[0] > 0 {
                parts.push(p.clone());
            }
        }
        parts.push(patches);
        let mut x = Tensor::concat(&parts, 0)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let h = x.layer_norm(&block.ln1_g, &block.ln1_b, LN_EPS)?;
            x = x.add(&self.attention(block, &h, prefixes.get(l), &mut trace)?)?;
            let h = x.layer_norm(&block.ln2_g, &block.ln2_b, LN_EPS)?;
            let m = h
                .matmul(&block.fc1_w)?
                .add_bias(&block.fc1_b)?
                .gelu()
                .matmul(&block.fc2_w)?
                .add_bias(&block.fc2_b)?;
            x = x.add(&m)?;
        }
        x.layer_norm(&self.norm_g, &self.norm_b, LN_EPS)
    }

    fn cls_row(tokens: &Tensor) -> Result<Tensor> {
        let e = tokens.shape()[1];
        tokens.slice(0, 0, 1)?.reshape(&[e])
    }

    /// CLS output of the plain forward pass, as a constant `[E]` tensor.
    pub fn query_feature(&self, image: &Tensor) -> Result<Tensor> {
        self.require_frozen("query_feature")?;
        let out = no_grad(|| self.encode(image, None, &PrefixSet::empty(), None))?;
        Self::cls_row(&out)
    }

    /// Prompt tuning: `prompts` (`[n, E]`, `n` may be 0) inserted after CLS.
    pub fn forward_prompt_tuning(&self, image: &Tensor, prompts: &Tensor) -> Result<PromptedOutput> {
        self.require_frozen("forward_prompt_tuning")?;
        let all_tokens = self.encode(image, Some(prompts), &PrefixSet::empty(), None)?;
        let n = prompts.shape()[0];
        let prompt_tokens = all_tokens.slice(0, 1, 1 + n)?;
        Ok(PromptedOutput {
            all_tokens,
            prompt_tokens,
        })
    }

    fn check_prefix_layers(&self, prefixes: &PrefixSet, layers: &[usize]) -> Result<()> {
        let configured: BTreeSet<usize> = layers.iter().copied().collect();
        if let Some(&bad) = configured.iter().find(|&&l| l >= self.config.num_layers) {
            return Err(LabError::invalid(format!(
                "prefix layer {bad} out of range for {} layers",
                self.config.num_layers
            )));
        }
        for l in prefixes.layers() {
            if !configured.contains(&l) {
                return Err(LabError::invalid(format!(
                    "prefix supplied for unconfigured layer {l} (configured: {layers:?})"
                )));
            }
        }
        for &l in &configured {
            if prefixes.get(l).is_none() {
                return Err(LabError::invalid(format!("no prefix supplied for configured layer {l}")));
            }
        }
        Ok(())
    }

    /// Prefix tuning: returns the CLS output with `prefixes` prepended to the
    /// keys and values of each layer in `layers`.
    pub fn forward_prefix_tuning(&self, image: &Tensor, prefixes: &PrefixSet, layers: &[usize]) -> Result<Tensor> {
        self.require_frozen("forward_prefix_tuning")?;
        self.check_prefix_layers(prefixes, layers)?;
        Self::cls_row(&self.encode(image, None, prefixes, None)?)
    }

    /// Like [`Self::forward_prefix_tuning`], also returning every attention
    /// weight matrix (layer-major, then head).
    pub fn prefix_attention_maps(
        &self,
        image: &Tensor,
        prefixes: &PrefixSet,
        layers: &[usize],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.require_frozen("prefix_attention_maps")?;
        self.check_prefix_layers(prefixes, layers)?;
        let mut maps = Vec::new();
        let out = self.encode(image, None, prefixes, Some(&mut maps))?;
        Ok((Self::cls_row(&out)?, maps))
    }

    /// Writes `<stem>.tnsr` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let entries = io::write_bundle(&dir.join(format!("{stem}.tnsr")), &self.named_params())?;
        let manifest = BackboneManifest {
            config: self.config,
            seed: self.seed,
            frozen: self.frozen,
            checksum: self.checksum(),
            records: entries,
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| LabError::file(&path, e.to_string()))
    }

    /// Loads a checkpoint written by [`Self::save`]; the result is frozen.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| LabError::file(&path, e.to_string()))?;
        let manifest: BackboneManifest =
            serde_json::from_str(&text).map_err(|e| LabError::file(&path, e.to_string()))?;
        let template = Self::init(manifest.config, manifest.seed)?;
        let records = io::read_bundle(&dir.join(format!("{stem}.tnsr")), &manifest.records)?;
        let params = template.named_params();
        if records.len() != params.len() {
            return Err(LabError::file(&path, "record count does not match the configuration"));
        }
        for ((name, t), (rname, r)) in params.iter().zip(&records) {
            if name != rname || t.shape() != r.shape() {
                return Err(LabError::file(&path, format!("unexpected record `{rname}`, wanted `{name}`")));
            }
            t.assign(&r.data())?;
        }
        Ok(template.freeze())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BackboneManifest {
    config: ViTConfig,
    seed: u64,
    frozen: bool,
    checksum: String,
    records: Vec<io::RecordEntry>,
}

/// Labeled pretext data for [`bootstrap_pretrain`].
#[derive(Debug, Clone)]
pub struct PretextSet {
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub val_accuracy: f64,
    pub final_train_loss: f64,
    pub num_classes: usize,
}

/// Trains a fresh backbone with a throwaway linear head on the pretext
/// classes, then freezes it. Pretext classes must not overlap `task_classes`.
pub fn bootstrap_pretrain(
    config: ViTConfig,
    pretext: &PretextSet,
    task_classes: &[usize],
    settings: &BootstrapSettings,
) -> Result<(Backbone, BootstrapReport)> {
    let overlap: Vec<usize> = pretext
        .classes
        .iter()
        .filter(|c| task_classes.contains(c))
        .copied()
        .collect();
    if !overlap.is_empty() {
        return Err(LabError::invalid(format!(
            "pretext classes overlap continual-task classes: {overlap:?}"
        )));
    }
    if pretext.classes.is_empty() || pretext.train.is_empty() {
        return Err(LabError::invalid("empty pretext set"));
    }
    let index_of = |label: usize| -> Result<usize> {
        pretext
            .classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| LabError::invalid(format!("pretext sample label {label} not among pretext classes")))
    };
    let backbone = Backbone::init(config, settings.seed)?;
    let nc = pretext.classes.len();
    let e = config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5EED_B007);
    let head_w = Tensor::param("pretext.w", normal(&mut rng, nc * e, (1.0 / e as f64).sqrt()), &[nc, e])?;
    let head_b = Tensor::param("pretext.b", vec![0.0; nc], &[nc])?;
    let mut params: Vec<Tensor> = backbone.named_params().into_iter().map(|(_, t)| t).collect();
    params.extend([head_w.clone(), head_b.clone()]);
    let mut adam = AdamState::new(settings.learning_rate);

    let logits = |bb: &Backbone, s: &Sample| -> Result<Tensor> {
        let out = bb.encode(&s.image, None, &PrefixSet::empty(), None)?;
        let cls = Backbone::cls_row(&out)?.reshape(&[e, 1])?;
        head_w.matmul(&cls)?.reshape(&[nc])?.add(&head_b)
    };

    let mut order: Vec<usize> = (0..pretext.train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..settings.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(settings.batch_size.max(1)) {
            params.iter().for_each(Tensor::zero_grad);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &pretext.train[i];
                let y = index_of(s.label)?;
                let lp = logits(&backbone, s)?.log_softmax(0)?;
                losses.push(lp.slice(0, y, y + 1)?.reshape(&[])?.neg());
            }
            let loss = sum_all(&losses)?.scale(1.0 / chunk.len() as f64);
            total += loss.item() * chunk.len() as f64;
            loss.backward()?;
            adam_step(&params, &mut adam)?;
        }
        final_loss = total / pretext.train.len() as f64;
        log::debug!("bootstrap epoch {epoch}: loss {final_loss:.4}");
    }

    let val = if pretext.val.is_empty() { &pretext.train } else { &pretext.val };
    let mut correct = 0usize;
    no_grad(|| -> Result<()> {
        for s in val {
            let l = logits(&backbone, s)?;
            if argmax(&l.data()) == index_of(s.label)? {
                correct += 1;
            }
        }
        Ok(())
    })?;
    let frozen = backbone.freeze();
    Ok((
        frozen,
        BootstrapReport {
            val_accuracy: correct as f64 / val.len() as f64,
            final_train_loss: final_loss,
            num_classes: nc,
        },
    ))
}

pub(crate) fn sum_all(terms: &[Tensor]) -> Result<Tensor> {
    let mut it = terms.iter();
    let mut acc = it
        .next()
        .cloned()
        .ok_or_else(|| LabError::invalid("sum of an empty list"))?;
    for t in it {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_channels: 3,
        }
    }

    fn image(seed: u64, cfg: &ViTConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.num_channels * cfg.image_size * cfg.image_size;
        let d = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        Tensor::new((0..n).map(|_| d.sample(&mut rng)).collect(), &cfg.image_shape()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let mut c = tiny();
        c.image_size = 10;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unfrozen_backbone_refuses_query() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 1).unwrap();
        assert!(bb.query_feature(&image(0, &cfg)).is_err());
    }

    #[test]
    fn query_feature_shape_and_purity() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 1).unwrap().freeze();
        let x = image(3, &cfg);
        let a = bb.query_feature(&x).unwrap();
        let b = bb.query_feature(&x).unwrap();
        assert_eq!(a.shape(), &[cfg.embed_dim]);
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(!a.requires_grad());
        let wrong = Tensor::zeros(&[3, 4, 4]);
        assert!(bb.query_feature(&wrong).is_err());
    }

    #[test]
    fn empty_prompt_block_matches_plain_pass() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 2).unwrap().freeze();
        let x = image(4, &cfg);
        let out = bb.forward_prompt_tuning(&x, &Tensor::zeros(&[0, cfg.embed_dim])).unwrap();
        let cls = Backbone::cls_row(&out.all_tokens).unwrap();
        assert_eq!(cls.to_vec(), bb.query_feature(&x).unwrap().to_vec());
    }

    #[test]
    fn prompted_sequence_length() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 2).unwrap().freeze();
        let prompts = Tensor::new(vec![0.1; 6 * cfg.embed_dim], &[6, cfg.embed_dim]).unwrap();
        let out = bb.forward_prompt_tuning(&image(1, &cfg), &prompts).unwrap();
        assert_eq!(out.all_tokens.shape(), &[1 + 6 + cfg.num_patches(), cfg.embed_dim]);
        assert_eq!(out.prompt_tokens.shape(), &[6, cfg.embed_dim]);
        let bad = Tensor::zeros(&[2, cfg.embed_dim + 1]);
        assert!(bb.forward_prompt_tuning(&image(1, &cfg), &bad).is_err());
    }

    #[test]
    fn empty_prefix_set_is_bit_identical_to_plain() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 5).unwrap().freeze();
        let x = image(9, &cfg);
        let out = bb.forward_prefix_tuning(&x, &PrefixSet::empty(), &[]).unwrap();
        assert_eq!(out.to_vec(), bb.query_feature(&x).unwrap().to_vec());
    }

    #[test]
    fn prefix_layer_contract() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 5).unwrap().freeze();
        let x = image(9, &cfg);
        let p = Tensor::zeros(&[4, cfg.embed_dim]);
        let set = PrefixSet::from_prompts(vec![(1, p.clone())]).unwrap();
        assert!(bb.forward_prefix_tuning(&x, &set, &[0]).is_err());
        assert!(bb.forward_prefix_tuning(&x, &set, &[0, 1]).is_err());
        assert!(bb.forward_prefix_tuning(&x, &set, &[1]).is_ok());
        let odd = Tensor::zeros(&[5, cfg.embed_dim]);
        assert!(PrefixSet::from_prompts(vec![(0, odd)]).is_err());
    }

    #[test]
    fn zero_prefixes_only_renormalize_attention() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 5).unwrap().freeze();
        let x = image(9, &cfg);
        let p = Tensor::zeros(&[4, cfg.embed_dim]);
        let set = PrefixSet::from_prompts(vec![(0, p)]).unwrap();
        let (out, maps) = bb.prefix_attention_maps(&x, &set, &[0]).unwrap();
        let plain = bb.query_feature(&x).unwrap();
        assert_ne!(out.to_vec(), plain.to_vec());
        // zero value rows contribute nothing, but the zero key rows take softmax mass
        let seq = 1 + cfg.num_patches();
        assert_eq!(maps[0].shape(), &[seq, 2 + seq]);
        for row in maps[0].data().chunks(2 + seq) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[0] > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_checksum_up_to_f32() {
        let cfg = tiny();
        let bb = Backbone::init(cfg, 8).unwrap().freeze();
        let dir = tempfile::tempdir().unwrap();
        bb.save(dir.path(), "backbone").unwrap();
        let back = Backbone::load(dir.path(), "backbone").unwrap();
        assert!(back.is_frozen());
        for ((_, a), (_, b)) in bb.named_params().iter().zip(back.named_params().iter()) {
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        back.save(dir.path(), "again").unwrap();
        assert_eq!(Backbone::load(dir.path(), "again").unwrap().checksum(), back.checksum());
    }

    #[test]
    fn bootstrap_rejects_overlapping_classes() {
        let cfg = tiny();
        let pretext = PretextSet {
            classes: vec![3, 4],
            train: vec![Sample {
                image: image(0, &cfg),
                label: 3,
            }],
            val: vec![],
        };
        let s = BootstrapSettings {
            epochs: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 0,
        };
        let err = bootstrap_pretrain(cfg, &pretext, &[0, 1, 4], &s).unwrap_err();
        assert!(err.to_string().contains("overlap"));
    }
}
