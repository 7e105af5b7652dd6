//! Desk-scale residual language model.
//!
//! Each block is an attention-free residual MLP,
//! `h ← h + W_out · relu(W_in · h + b_in) + b_out`, applied per token, so
//! the model is a learned bigram predictor whose hidden state is a genuine
//! residual stream. The stream at layer `l` is the input to block `l`;
//! layer 0 is the embedding output.

pub mod corpus;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ActivationRecord;
use crate::numerics::{adam_step, matmul, matmul_at, matmul_bt, AdamConfig, AdamState, Matrix, Rng};
use crate::sae::SaeParams;

pub use corpus::{generate_corpus, Corpus, CorpusLine, SyntheticCorpusConfig};

pub const TOY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    /// Standard deviation of the initial embedding entries.
    pub init_scale: f64,
    /// Multiply embedding rows by √d_model on lookup.
    pub scale_embeddings: bool,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            d_hidden: 64,
            n_layers: 8,
            init_scale: 0.1,
            scale_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// `d_hidden × d_model`
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    /// `d_model × d_hidden`
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl Block {
    pub fn zeros_like(&self) -> Self {
        Self {
            w_in: Matrix::zeros(self.w_in.rows(), self.w_in.cols()),
            b_in: vec![0.0; self.b_in.len()],
            w_out: Matrix::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: vec![0.0; self.b_out.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub config: ToyModelConfig,
    /// `vocab × d_model`
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    /// `vocab × d_model`
    pub unembed: Matrix,
    pub b_unembed: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `residuals[l]` is the input to block `l`; the last entry is the
    /// output of the final block that was run.
    pub residuals: Vec<Matrix>,
    pre: Vec<Matrix>,
    hidden: Vec<Matrix>,
}

/// Runs `blocks` over the rows of `h0`.
pub fn run_blocks(blocks: &[Block], h0: Matrix) -> Result<ForwardTrace> {
    let mut residuals = Vec::with_capacity(blocks.len() + 1);
    let mut pre = Vec::with_capacity(blocks.len());
    let mut hidden = Vec::with_capacity(blocks.len());
    residuals.push(h0);
    for b in blocks {
        let h = residuals.last().expect("non-empty");
        let mut a = matmul_bt(h, &b.w_in)?;
        for r in 0..a.rows() {
            for (v, bias) in a.row_mut(r).iter_mut().zip(&b.b_in) {
                *v += bias;
            }
        }
        let mut z = a.clone();
        z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = matmul_bt(&z, &b.w_out)?;
        for r in 0..out.rows() {
            for ((v, bias), hv) in out.row_mut(r).iter_mut().zip(&b.b_out).zip(h.row(r)) {
                *v += bias + hv;
            }
        }
        pre.push(a);
        hidden.push(z);
        residuals.push(out);
    }
    Ok(ForwardTrace {
        residuals,
        pre,
        hidden,
    })
}

/// Backpropagates through the blocks of a trace.
///
/// `injected[l]` is an upstream gradient with respect to `residuals[l]`
/// (same length as `trace.residuals`). Returns per-block gradients and the
/// gradient with respect to `residuals[0]`.
pub fn backprop_blocks(
    blocks: &[Block],
    trace: &ForwardTrace,
    mut injected: Vec<Option<Matrix>>,
) -> Result<(Vec<Block>, Matrix)> {
    let n = trace.pre.len();
    if injected.len() != n + 1 || blocks.len() < n {
        return Err(Error::invalid("backprop_blocks: injected gradients do not match trace"));
    }
    let (rows, cols) = trace.residuals[0].shape();
    let mut d = injected[n].take().unwrap_or_else(|| Matrix::zeros(rows, cols));
    let mut grads: Vec<Block> = blocks[..n].iter().map(Block::zeros_like).collect();
    for l in (0..n).rev() {
        let b = &blocks[l];
        let g = &mut grads[l];
        // out = h + z W_outᵀ + b_out
        g.w_out = matmul_at(&d, &trace.hidden[l])?;
        for c in 0..d.cols() {
            g.b_out[c] = (0..d.rows()).map(|r| d.get(r, c)).sum();
        }
        let mut da = matmul(&d, &b.w_out)?;
        for (v, a) in da.data_mut().iter_mut().zip(trace.pre[l].data()) {
            if *a <= 0.0 {
                *v = 0.0;
            }
        }
        g.w_in = matmul_at(&da, &trace.residuals[l])?;
        for c in 0..da.cols() {
            g.b_in[c] = (0..da.rows()).map(|r| da.get(r, c)).sum();
        }
        let dh = matmul(&da, &b.w_in)?;
        d.add_assign(&dh)?;
        if let Some(extra) = injected[l].take() {
            d.add_assign(&extra)?;
        }
    }
    Ok((grads, d))
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl ToyModelParams {
    pub fn init(config: ToyModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size == 0 || config.d_model == 0 || config.d_hidden == 0 || config.n_layers == 0 {
            return Err(Error::invalid("toy model dimensions must be >= 1"));
        }
        let mut rng = Rng::new(seed);
        let (v, d, h) = (config.vocab_size, config.d_model, config.d_hidden);
        let embedding = Matrix::random_normal(v, d, config.init_scale, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                w_in: Matrix::random_normal(h, d, 1.0 / (d as f64).sqrt(), &mut rng),
                b_in: vec![0.0; h],
                w_out: Matrix::random_normal(d, h, 0.5 / (h as f64).sqrt(), &mut rng),
                b_out: vec![0.0; d],
            })
            .collect();
        let unembed = Matrix::random_normal(v, d, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            embedding,
            blocks,
            unembed,
            b_unembed: vec![0.0; v],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn embedding_multiplier(&self) -> f64 {
        if self.config.scale_embeddings {
            (self.config.d_model as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let k = self.embedding_multiplier();
        let mut h = Matrix::zeros(tokens.len(), self.config.d_model);
        for (r, &t) in tokens.iter().enumerate() {
            for (o, e) in h.row_mut(r).iter_mut().zip(self.embedding.row(t as usize)) {
                *o = e * k;
            }
        }
        Ok(h)
    }

    /// Forward through the first `n_blocks` blocks of `blocks`.
    pub fn trace_with(&self, blocks: &[Block], tokens: &[u32], n_blocks: usize) -> Result<ForwardTrace> {
        run_blocks(&blocks[..n_blocks.min(blocks.len())], self.embed(tokens)?)
    }

    pub fn logits_from(&self, final_residual: &Matrix) -> Result<Matrix> {
        let mut logits = matmul_bt(final_residual, &self.unembed)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&self.b_unembed) {
                *v += b;
            }
        }
        Ok(logits)
    }

    pub fn logits_with(&self, blocks: &[Block], tokens: &[u32]) -> Result<Matrix> {
        let trace = self.trace_with(blocks, tokens, blocks.len())?;
        self.logits_from(trace.residuals.last().expect("non-empty"))
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self.logits_with(&self.blocks, tokens)
    }

    /// Log-probabilities of the token following `context`.
    pub fn next_token_log_probs(&self, context: &[u32]) -> Result<Vec<f64>> {
        let last = *context
            .last()
            .ok_or_else(|| Error::invalid("next-token prediction needs a non-empty context"))?;
        let logits = self.logits(&[last])?;
        Ok(log_softmax_row(logits.row(0)))
    }

    /// Residual stream per layer: `n_layers` matrices of `seq_len × d_model`.
    pub fn capture_residuals(&self, tokens: &[u32]) -> Result<Vec<Matrix>> {
        capture_with(self, &self.blocks, tokens)
    }

    /// Mean next-token cross-entropy over all bigrams of `lines`.
    pub fn cross_entropy<'a>(&self, lines: impl IntoIterator<Item = &'a CorpusLine>) -> Result<f64> {
        let (inputs, targets) = bigrams(lines);
        if inputs.is_empty() {
            return Err(Error::invalid("no bigrams to score"));
        }
        let logits = self.logits(&inputs)?;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total -= log_softmax_row(logits.row(r))[t as usize];
        }
        Ok(total / inputs.len() as f64)
    }

    pub fn perplexity<'a>(&self, lines: impl IntoIterator<Item = &'a CorpusLine>) -> Result<f64> {
        Ok(self.cross_entropy(lines)?.exp())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let shape_err = |op, left, right| Err(Error::Shape { op, left, right });
        if self.embedding.shape() != (c.vocab_size, c.d_model) {
            return shape_err("toy embedding", self.embedding.shape(), (c.vocab_size, c.d_model));
        }
        if self.unembed.shape() != (c.vocab_size, c.d_model) || self.b_unembed.len() != c.vocab_size {
            return shape_err("toy unembed", self.unembed.shape(), (c.vocab_size, c.d_model));
        }
        if self.blocks.len() != c.n_layers {
            return Err(Error::invalid("block count differs from n_layers"));
        }
        for b in &self.blocks {
            if b.w_in.shape() != (c.d_hidden, c.d_model) || b.b_in.len() != c.d_hidden {
                return shape_err("toy w_in", b.w_in.shape(), (c.d_hidden, c.d_model));
            }
            if b.w_out.shape() != (c.d_model, c.d_hidden) || b.b_out.len() != c.d_model {
                return shape_err("toy w_out", b.w_out.shape(), (c.d_model, c.d_hidden));
            }
        }
        let finite = self.embedding.is_finite()
            && self.unembed.is_finite()
            && self.b_unembed.iter().all(|v| v.is_finite())
            && self.blocks.iter().all(|b| {
                b.w_in.is_finite()
                    && b.w_out.is_finite()
                    && b.b_in.iter().chain(&b.b_out).all(|v| v.is_finite())
            });
        if !finite {
            return Err(Error::NonFinite {
                context: "toy model parameters",
                index: 0,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = ToyCheckpoint {
            format_version: TOY_FORMAT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&doc)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ToyCheckpoint = serde_json::from_str(&text)?;
        if doc.format_version != TOY_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported toy model format_version {}",
                doc.format_version
            )));
        }
        doc.model.validate()?;
        Ok(doc.model)
    }
}

/// Residual capture through an arbitrary block set (used for adapted models).
pub fn capture_with(model: &ToyModelParams, blocks: &[Block], tokens: &[u32]) -> Result<Vec<Matrix>> {
    let mut trace = model.trace_with(blocks, tokens, blocks.len())?;
    trace.residuals.truncate(blocks.len());
    Ok(trace.residuals)
}

/// SAE activation records for every parallel phrase at `layer`.
///
/// One record per (feature, phrase); `features` restricts the feature set.
pub fn phrase_activation_records(
    model: &ToyModelParams,
    blocks: &[Block],
    corpus: &Corpus,
    sae: &SaeParams,
    layer: usize,
    features: Option<&[u32]>,
) -> Result<Vec<ActivationRecord>> {
    if layer >= blocks.len() {
        return Err(Error::invalid(format!(
            "layer {layer} outside model with {} layers",
            blocks.len()
        )));
    }
    let all: Vec<u32> = (0..sae.d_features as u32).collect();
    let features = features.unwrap_or(&all);
    let mut out = Vec::new();
    for line in &corpus.phrases {
        let Some(ordinal) = line.phrase_ordinal else {
            continue;
        };
        let trace = model.trace_with(blocks, &line.tokens, layer)?;
        let acts = sae.encode_batch(&trace.residuals[layer])?;
        let text: Vec<String> = line.tokens.iter().map(|&t| corpus.config.token_text(t)).collect();
        for &f in features {
            let col: Vec<f64> = (0..acts.rows()).map(|r| acts.get(r, f as usize)).collect();
            out.push(ActivationRecord::new(
                layer as u32,
                f,
                line.language.clone(),
                text.clone(),
                col,
                ordinal,
            ));
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyCheckpoint {
    format_version: u32,
    model: ToyModelParams,
}

fn bigrams<'a>(lines: impl IntoIterator<Item = &'a CorpusLine>) -> (Vec<u32>, Vec<u32>) {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for l in lines {
        for w in l.tokens.windows(2) {
            inputs.push(w[0]);
            targets.push(w[1]);
        }
    }
    (inputs, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            learning_rate: 3e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutput {
    pub params: ToyModelParams,
    /// Mean training cross-entropy per epoch.
    pub loss_curve: Vec<f64>,
}

struct ToyOptimizer {
    embedding: AdamState,
    unembed: AdamState,
    b_unembed: AdamState,
    blocks: Vec<[AdamState; 4]>,
}

impl ToyOptimizer {
    fn new(p: &ToyModelParams, cfg: AdamConfig) -> Result<Self> {
        Ok(Self {
            embedding: AdamState::for_matrix(&p.embedding, cfg)?,
            unembed: AdamState::for_matrix(&p.unembed, cfg)?,
            b_unembed: AdamState::for_vector(&p.b_unembed, cfg)?,
            blocks: p
                .blocks
                .iter()
                .map(|b| {
                    Ok([
                        AdamState::for_matrix(&b.w_in, cfg)?,
                        AdamState::for_vector(&b.b_in, cfg)?,
                        AdamState::for_matrix(&b.w_out, cfg)?,
                        AdamState::for_vector(&b.b_out, cfg)?,
                    ])
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Next-token training with Adam on shuffled bigram minibatches.
pub fn train_toy_model(
    corpus: &Corpus,
    model_cfg: ToyModelConfig,
    cfg: &ToyTrainConfig,
) -> Result<ToyTrainOutput> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut params = ToyModelParams::init(model_cfg, cfg.seed)?;
    let (inputs, targets) = bigrams(&corpus.training);
    if inputs.is_empty() {
        return Err(Error::invalid("toy training needs a corpus with at least one bigram"));
    }
    params.check_tokens(&inputs)?;
    params.check_tokens(&targets)?;
    let mut opt = ToyOptimizer::new(&params, AdamConfig::with_lr(cfg.learning_rate))?;
    let mut rng = Rng::new(cfg.seed ^ 0x5eed_0f_70);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let v = model_cfg.vocab_size;

    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let toks: Vec<u32> = chunk.iter().map(|&i| inputs[i]).collect();
            let b = toks.len() as f64;
            let trace = params.trace_with(&params.blocks, &toks, params.blocks.len())?;
            let last = trace.residuals.last().expect("non-empty");
            let logits = params.logits_from(last)?;
            let mut d_logits = Matrix::zeros(toks.len(), v);
            let mut loss = 0.0;
            for (r, &i) in chunk.iter().enumerate() {
                let lp = log_softmax_row(logits.row(r));
                let t = targets[i] as usize;
                loss -= lp[t];
                let row = d_logits.row_mut(r);
                for (g, l) in row.iter_mut().zip(&lp) {
                    *g = l.exp() / b;
                }
                row[t] -= 1.0 / b;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "toy training loss (diverged)",
                    index: step,
                });
            }
            epoch_loss += loss;

            let g_unembed = matmul_at(&d_logits, last)?;
            let g_b_unembed: Vec<f64> = (0..v)
                .map(|c| (0..d_logits.rows()).map(|r| d_logits.get(r, c)).sum())
                .collect();
            let d_final = matmul(&d_logits, &params.unembed)?;
            let mut injected = vec![None; trace.residuals.len()];
            *injected.last_mut().expect("non-empty") = Some(d_final);
            let (block_grads, d_embed) = backprop_blocks(&params.blocks, &trace, injected)?;
            let k = params.embedding_multiplier();
            let mut g_embedding = Matrix::zeros(v, model_cfg.d_model);
            for (r, &t) in toks.iter().enumerate() {
                for (g, d) in g_embedding.row_mut(t as usize).iter_mut().zip(d_embed.row(r)) {
                    *g += d * k;
                }
            }

            adam_step(&mut params.unembed, &g_unembed, &mut opt.unembed)?;
            opt.b_unembed.update(&mut params.b_unembed, &g_b_unembed)?;
            adam_step(&mut params.embedding, &g_embedding, &mut opt.embedding)?;
            for ((blk, g), st) in params.blocks.iter_mut().zip(&block_grads).zip(&mut opt.blocks) {
                adam_step(&mut blk.w_in, &g.w_in, &mut st[0])?;
                st[1].update(&mut blk.b_in, &g.b_in)?;
                adam_step(&mut blk.w_out, &g.w_out, &mut st[2])?;
                st[3].update(&mut blk.b_out, &g.b_out)?;
            }
            step += 1;
        }
        loss_curve.push(epoch_loss / inputs.len() as f64);
    }
    Ok(ToyTrainOutput { params, loss_curve })
}
