//! DistilBERT-shaped transformer encoder with an explicit backward pass.
//!
//! Weights are kept in `f64` with linear layers stored input-major
//! (`in × out`), so a forward step is `x · W + b`. Checkpoints use the
//! Hugging Face DistilBERT tensor names and `out × in` layout, which lets the
//! same loader read an upstream `model.safetensors` or a checkpoint written
//! by [`Encoder::save`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_position_embeddings: usize,
    /// Hidden width H.
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward inner width.
    pub hidden_dim: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-12
}

impl EncoderConfig {
    /// Hermetic test-scale encoder.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_position_embeddings: 64,
            dim: 32,
            n_layers: 2,
            n_heads: 2,
            hidden_dim: 64,
            layer_norm_eps: 1e-12,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Configuration(
                "encoder needs at least two layers for second-to-last pooling".into(),
            ));
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Configuration(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.n_heads
            )));
        }
        if self.max_position_embeddings < 3 {
            return Err(Error::Configuration("max_position_embeddings < 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    fn random(input: usize, output: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            w: Array2::from_shape_simple_fn((input, output), || normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((
            format!("{prefix}.weight"),
            self.w.as_slice().expect("standard layout"),
        ));
        out.push((
            format!("{prefix}.bias"),
            self.b.as_slice().expect("standard layout"),
        ));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w.as_slice_mut().expect("standard layout"));
        out.push(self.b.as_slice_mut().expect("standard layout"));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn ones(n: usize) -> Self {
        Self {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
        }
    }

    fn zeros(n: usize) -> Self {
        Self {
            gamma: Array1::zeros(n),
            beta: Array1::zeros(n),
        }
    }

    fn forward(&self, x: &Array2<f64>, eps: f64) -> (Array2<f64>, LnCache) {
        let n = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / n;
        let centred = x - &mean.view().insert_axis(Axis(1));
        let var = centred.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = centred * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let n = dy.ncols() as f64;
        let mean_d = dxhat.sum_axis(Axis(1)) / n;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
        let mut dx = dxhat - mean_d.view().insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dx.view().insert_axis(Axis(1)));
        dx * cache.inv_std.view().insert_axis(Axis(1))
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((
            format!("{prefix}.weight"),
            self.gamma.as_slice().expect("standard layout"),
        ));
        out.push((
            format!("{prefix}.bias"),
            self.beta.as_slice().expect("standard layout"),
        ));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.gamma.as_slice_mut().expect("standard layout"));
        out.push(self.beta.as_slice_mut().expect("standard layout"));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub sa_ln: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub out_ln: LayerNorm,
}

pub(crate) struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LnCache,
    h1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ln2: LnCache,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Block {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let (h, f) = (cfg.dim, cfg.hidden_dim);
        Self {
            q: Linear::zeros(h, h),
            k: Linear::zeros(h, h),
            v: Linear::zeros(h, h),
            o: Linear::zeros(h, h),
            sa_ln: LayerNorm::zeros(h),
            ff1: Linear::zeros(h, f),
            ff2: Linear::zeros(f, h),
            out_ln: LayerNorm::zeros(h),
        }
    }

    fn random(cfg: &EncoderConfig, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let (h, f) = (cfg.dim, cfg.hidden_dim);
        Self {
            q: Linear::random(h, h, std, rng),
            k: Linear::random(h, h, std, rng),
            v: Linear::random(h, h, std, rng),
            o: Linear::random(h, h, std, rng),
            sa_ln: LayerNorm::ones(h),
            ff1: Linear::random(h, f, std, rng),
            ff2: Linear::random(f, h, std, rng),
            out_ln: LayerNorm::ones(h),
        }
    }

    fn forward(&self, x: &Array2<f64>, cfg: &EncoderConfig) -> (Array2<f64>, BlockCache) {
        let dh = cfg.dim / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let attn = self.o.forward(&ctx);
        let (h1, ln1) = self.sa_ln.forward(&(x + &attn), cfg.layer_norm_eps);
        let pre_act = self.ff1.forward(&h1);
        let act = pre_act.mapv(gelu);
        let ff = self.ff2.forward(&act);
        let (out, ln2) = self.out_ln.forward(&(&h1 + &ff), cfg.layer_norm_eps);
        let cache = BlockCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            ln1,
            h1,
            pre_act,
            act,
            ln2,
        };
        (out, cache)
    }

    fn backward(
        &self,
        c: &BlockCache,
        dout: &Array2<f64>,
        cfg: &EncoderConfig,
        grad: &mut Block,
    ) -> Array2<f64> {
        let dh = cfg.dim / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let ds2 = self.out_ln.backward(&c.ln2, dout, &mut grad.out_ln);
        let dact = self.ff2.backward(&c.act, &ds2, &mut grad.ff2);
        let mut dpre = dact;
        Zip::from(&mut dpre)
            .and(&c.pre_act)
            .for_each(|d, &u| *d *= gelu_grad(u));
        let dh1 = ds2 + self.ff1.backward(&c.h1, &dpre, &mut grad.ff1);

        let ds1 = self.sa_ln.backward(&c.ln1, &dh1, &mut grad.sa_ln);
        let dctx = self.o.backward(&c.ctx, &ds1, &mut grad.o);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let dscores = (dp - row_dot.view().insert_axis(Axis(1))) * p * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols)
                .assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        let mut dx = ds1;
        dx += &self.q.backward(&c.x, &dq, &mut grad.q);
        dx += &self.k.backward(&c.x, &dk, &mut grad.k);
        dx += &self.v.backward(&c.x, &dv, &mut grad.v);
        dx
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.q.collect(&format!("{prefix}.attention.q_lin"), out);
        self.k.collect(&format!("{prefix}.attention.k_lin"), out);
        self.v.collect(&format!("{prefix}.attention.v_lin"), out);
        self.o.collect(&format!("{prefix}.attention.out_lin"), out);
        self.sa_ln.collect(&format!("{prefix}.sa_layer_norm"), out);
        self.ff1.collect(&format!("{prefix}.ffn.lin1"), out);
        self.ff2.collect(&format!("{prefix}.ffn.lin2"), out);
        self.out_ln
            .collect(&format!("{prefix}.output_layer_norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.q.collect_mut(out);
        self.k.collect_mut(out);
        self.v.collect_mut(out);
        self.o.collect_mut(out);
        self.sa_ln.collect_mut(out);
        self.ff1.collect_mut(out);
        self.ff2.collect_mut(out);
        self.out_ln.collect_mut(out);
    }
}

/// All encoder parameters. The same type doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub word_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub emb_ln: LayerNorm,
    pub blocks: Vec<Block>,
}

impl EncoderWeights {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            word_emb: Array2::zeros((cfg.vocab_size, cfg.dim)),
            pos_emb: Array2::zeros((cfg.max_position_embeddings, cfg.dim)),
            emb_ln: LayerNorm::zeros(cfg.dim),
            blocks: (0..cfg.n_layers).map(|_| Block::zeros(cfg)).collect(),
        }
    }

    /// Normal(0, `std`) weights, unit LayerNorm scales, zero biases.
    pub fn random(cfg: &EncoderConfig, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        let word_emb =
            Array2::from_shape_simple_fn((cfg.vocab_size, cfg.dim), || normal.sample(&mut rng));
        let pos_emb = Array2::from_shape_simple_fn((cfg.max_position_embeddings, cfg.dim), || {
            normal.sample(&mut rng)
        });
        let blocks = (0..cfg.n_layers)
            .map(|_| Block::random(cfg, std, &mut rng))
            .collect();
        Self {
            word_emb,
            pos_emb,
            emb_ln: LayerNorm::ones(cfg.dim),
            blocks,
        }
    }

    /// `(checkpoint name, values)` for every tensor, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        out.push((
            "distilbert.embeddings.word_embeddings.weight".to_string(),
            self.word_emb.as_slice().expect("standard layout"),
        ));
        out.push((
            "distilbert.embeddings.position_embeddings.weight".to_string(),
            self.pos_emb.as_slice().expect("standard layout"),
        ));
        self.emb_ln
            .collect("distilbert.embeddings.LayerNorm", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("distilbert.transformer.layer.{i}"), &mut out);
        }
        out
    }

    /// Mutable views in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        out.push(self.word_emb.as_slice_mut().expect("standard layout"));
        out.push(self.pos_emb.as_slice_mut().expect("standard layout"));
        self.emb_ln.collect_mut(&mut out);
        for b in &mut self.blocks {
            b.collect_mut(&mut out);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over tensor names and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Largest absolute element-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &EncoderWeights) -> f64 {
        self.named_tensors()
            .iter()
            .zip(other.named_tensors())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Per-sequence activations kept for the backward pass.
pub struct ForwardTrace {
    ids: Vec<u32>,
    emb_ln: LnCache,
    blocks: Vec<BlockCache>,
    /// Embedding output followed by each layer's output.
    pub hidden: Vec<Array2<f64>>,
}

/// Named checkpoint tensors: shape and row-major values.
pub type ExtraTensors = HashMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub weights: EncoderWeights,
}

impl Encoder {
    pub fn new(
        config: EncoderConfig,
        tokenizer: Tokenizer,
        weights: EncoderWeights,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Configuration(format!(
                "tokenizer has {} tokens but config says {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        if weights.word_emb.dim() != (config.vocab_size, config.dim)
            || weights.blocks.len() != config.n_layers
        {
            return Err(Error::Configuration("weights do not match config".into()));
        }
        Ok(Self {
            config,
            tokenizer,
            weights,
        })
    }

    /// Random-weight encoder over the bundled tiny vocabulary.
    pub fn tiny(seed: u64) -> Self {
        let tokenizer = Tokenizer::tiny();
        let config = EncoderConfig::tiny(tokenizer.vocab_size());
        let weights = EncoderWeights::random(&config, 0.02, seed);
        Self::new(config, tokenizer, weights).expect("tiny config is valid")
    }

    pub fn hidden_size(&self) -> usize {
        self.config.dim
    }

    pub fn max_len(&self) -> usize {
        self.config.max_position_embeddings
    }

    pub fn checksum(&self) -> String {
        self.weights.checksum()
    }

    pub fn token_ids(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text, self.max_len())
    }

    pub fn forward(&self, ids: &[u32]) -> ForwardTrace {
        let cfg = &self.config;
        let w = &self.weights;
        let mut x = Array2::zeros((ids.len(), cfg.dim));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &w.word_emb.row(id as usize);
            row += &w.pos_emb.row(t);
        }
        let (mut h, emb_ln) = w.emb_ln.forward(&x, cfg.layer_norm_eps);
        let mut hidden = vec![h.clone()];
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for b in &w.blocks {
            let (out, cache) = b.forward(&h, cfg);
            blocks.push(cache);
            hidden.push(out.clone());
            h = out;
        }
        ForwardTrace {
            ids: ids.to_vec(),
            emb_ln,
            blocks,
            hidden,
        }
    }

    /// Backpropagates `d_last` (gradient w.r.t. the final layer output) and
    /// accumulates parameter gradients into `grad`.
    pub fn backward(&self, trace: &ForwardTrace, d_last: &Array2<f64>, grad: &mut EncoderWeights) {
        let cfg = &self.config;
        let mut d = d_last.clone();
        for (i, b) in self.weights.blocks.iter().enumerate().rev() {
            d = b.backward(&trace.blocks[i], &d, cfg, &mut grad.blocks[i]);
        }
        let d_emb = self
            .weights
            .emb_ln
            .backward(&trace.emb_ln, &d, &mut grad.emb_ln);
        for (t, &id) in trace.ids.iter().enumerate() {
            let mut row = grad.word_emb.row_mut(id as usize);
            row += &d_emb.row(t);
            let mut row = grad.pos_emb.row_mut(t);
            row += &d_emb.row(t);
        }
    }

    /// Loads `config.json`, `vocab.txt` and `model.safetensors` from `dir`.
    /// Tensor names may carry the `distilbert.` prefix or not.
    pub fn load(dir: &Path) -> Result<Self> {
        let (encoder, _) = Self::load_with_extras(dir, &[])?;
        Ok(encoder)
    }

    /// Like [`load`](Self::load), also returning the requested extra tensors
    /// (in checkpoint layout) when present.
    pub fn load_with_extras(dir: &Path, extras: &[&str]) -> Result<(Self, ExtraTensors)> {
        let cfg_path = dir.join("config.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| {
            Error::Environment(format!("encoder config {}: {e}", cfg_path.display()))
        })?;
        let config: EncoderConfig =
            serde_json::from_str(&text).map_err(|e| Error::artifact(&cfg_path, e.to_string()))?;
        config.validate()?;
        let lowercase = read_lowercase_flag(dir)?;
        let tokenizer = Tokenizer::from_vocab_file(&dir.join("vocab.txt"), lowercase)
            .map_err(|e| Error::Environment(format!("encoder vocabulary: {e}")))?;

        let model_path = dir.join("model.safetensors");
        let bytes = fs::read(&model_path).map_err(|e| {
            Error::Environment(format!("encoder weights {}: {e}", model_path.display()))
        })?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::artifact(&model_path, e.to_string()))?;
        let fetch = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let view = st
                .tensor(name)
                .or_else(|_| st.tensor(name.trim_start_matches("distilbert.")))
                .map_err(|_| Error::artifact(&model_path, format!("missing tensor {name}")))?;
            Ok((
                view.shape().to_vec(),
                decode(view.dtype(), view.data(), &model_path)?,
            ))
        };

        let mut weights = EncoderWeights::zeros(&config);
        let names: Vec<String> = weights
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let shapes = checkpoint_shapes(&config);
        for ((name, slot), expected) in names.iter().zip(weights.tensors_mut()).zip(&shapes) {
            let (shape, data) = fetch(name)?;
            if &shape != expected {
                return Err(Error::artifact(
                    &model_path,
                    format!("{name}: shape {shape:?}, expected {expected:?}"),
                ));
            }
            copy_from_checkpoint(slot, &shape, &data, is_linear_weight(name));
        }
        let mut extra = HashMap::new();
        for name in extras {
            if let Ok(t) = fetch(name) {
                extra.insert(name.to_string(), t);
            }
        }
        Ok((Self::new(config, tokenizer, weights)?, extra))
    }

    /// Writes a checkpoint readable by [`load`](Self::load). `extras` are
    /// stored verbatim (checkpoint layout).
    pub fn save(&self, dir: &Path, extras: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        let vocab_path = dir.join("vocab.txt");
        let mut vocab = self.tokenizer.tokens().join("\n");
        vocab.push('\n');
        fs::write(&vocab_path, vocab).map_err(|e| Error::io(&vocab_path, e))?;
        let tok_path = dir.join("tokenizer_config.json");
        fs::write(
            &tok_path,
            serde_json::json!({"do_lower_case": self.tokenizer.lowercase()}).to_string(),
        )
        .map_err(|e| Error::io(&tok_path, e))?;

        let shapes = checkpoint_shapes(&self.config);
        let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for ((name, data), shape) in self.weights.named_tensors().into_iter().zip(shapes) {
            let values = to_checkpoint(data, &shape, is_linear_weight(&name));
            blobs.push((name, shape, f64_bytes(&values)));
        }
        for (name, shape, values) in extras {
            blobs.push((name.clone(), shape.clone(), f64_bytes(values)));
        }
        write_safetensors(&dir.join("model.safetensors"), &blobs, None)
    }
}

fn read_lowercase_flag(dir: &Path) -> Result<bool> {
    let p = dir.join("tokenizer_config.json");
    if !p.exists() {
        return Ok(true);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(v.get("do_lower_case")
        .and_then(|b| b.as_bool())
        .unwrap_or(true))
}

fn is_linear_weight(name: &str) -> bool {
    name.ends_with(".weight")
        && (name.contains("_lin.") || name.contains(".lin1.") || name.contains(".lin2."))
}

/// Shapes in checkpoint (`out × in`) layout, same order as `named_tensors`.
fn checkpoint_shapes(cfg: &EncoderConfig) -> Vec<Vec<usize>> {
    let (h, f) = (cfg.dim, cfg.hidden_dim);
    let mut out = vec![
        vec![cfg.vocab_size, h],
        vec![cfg.max_position_embeddings, h],
        vec![h],
        vec![h],
    ];
    for _ in 0..cfg.n_layers {
        for _ in 0..4 {
            out.push(vec![h, h]);
            out.push(vec![h]);
        }
        out.push(vec![h]);
        out.push(vec![h]);
        out.push(vec![f, h]);
        out.push(vec![f]);
        out.push(vec![h, f]);
        out.push(vec![h]);
        out.push(vec![h]);
        out.push(vec![h]);
    }
    out
}

/// Copies checkpoint data into an internal tensor, transposing `out × in`
/// linear weights into `in × out`.
fn copy_from_checkpoint(slot: &mut [f64], shape: &[usize], data: &[f64], transpose: bool) {
    if transpose {
        let (rows, cols) = (shape[0], shape[1]);
        for r in 0..rows {
            for c in 0..cols {
                slot[c * rows + r] = data[r * cols + c];
            }
        }
    } else {
        slot.copy_from_slice(data);
    }
}

fn to_checkpoint(data: &[f64], shape: &[usize], transpose: bool) -> Vec<f64> {
    if !transpose {
        return data.to_vec();
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = data[c * rows + r];
        }
    }
    out
}

pub(crate) fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode(dtype: safetensors::Dtype, data: &[u8], path: &Path) -> Result<Vec<f64>> {
    match dtype {
        safetensors::Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()),
        safetensors::Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()),
        other => Err(Error::artifact(
            path,
            format!("unsupported dtype {other:?}"),
        )),
    }
}

pub(crate) fn write_safetensors(
    path: &Path,
    blobs: &[(String, Vec<usize>, Vec<u8>)],
    metadata: Option<HashMap<String, String>>,
) -> Result<()> {
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::artifact(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, metadata)
        .map_err(|e| Error::artifact(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
