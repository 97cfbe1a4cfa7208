//! Seeded toy diffusion transformer with token-subset recomputation.
//!
//! Each block is pre-norm attention followed by a pre-norm GELU MLP. Class
//! and timestep conditioning enter as an additive shift on the layer-norm
//! outputs (`shift = modulation ⊙ cond`). The cached units are the residual
//! branch outputs of the two modules, addressed by [`Site`].
//!
//! Partial computation restricts attention queries to a [`ComputeSet`] while
//! keys and values come from the full current estimate of all tokens. The MLP
//! is token-wise, so a computed token's MLP input is exact given its fresh
//! attention output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{layer_norm_row, matmul, seeded_gaussian, softmax_in_place, FeatureMap};
use crate::rng::{SeededRng, Stream};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            height: 16,
            width: 16,
            dim: 64,
            heads: 4,
            num_classes: 10,
            weight_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Token count `H · W`.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("model.depth", "must be >= 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("model.height", "token grid must be non-empty"));
        }
        if self.dim == 0 {
            return Err(Error::config("model.dim", "must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("dim {} is not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be >= 1"));
        }
        Ok(())
    }
}

/// The two cached modules of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Module {
    Attention,
    Mlp,
}

impl Module {
    pub const ALL: [Module; 2] = [Module::Attention, Module::Mlp];
}

/// A cache address: one module of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Site {
    pub layer: usize,
    pub module: Module,
}

impl Site {
    pub fn new(layer: usize, module: Module) -> Self {
        Self { layer, module }
    }

    /// Dense index in `0..2 * depth`.
    pub fn index(self) -> usize {
        self.layer * 2 + self.module as usize
    }
}

/// Strictly increasing token indices below the token count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ComputeSet {
    indices: Vec<usize>,
}

impl ComputeSet {
    pub fn new(mut indices: Vec<usize>, tokens: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= tokens {
                return Err(Error::Bounds {
                    index: last,
                    len: tokens,
                });
            }
        }
        Ok(Self { indices })
    }

    pub fn all(tokens: usize) -> Self {
        Self {
            indices: (0..tokens).collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_all(&self, tokens: usize) -> bool {
        self.indices.len() == tokens
    }

    fn check(&self, tokens: usize) -> Result<()> {
        match self.indices.last() {
            Some(&last) if last >= tokens => Err(Error::Bounds {
                index: last,
                len: tokens,
            }),
            _ => Ok(()),
        }
    }
}

/// Freshly computed module outputs for the tokens of a [`ComputeSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRows {
    compute: ComputeSet,
    dim: usize,
    data: Vec<f64>,
}

impl TokenRows {
    pub fn new(compute: ComputeSet, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != compute.len() * dim {
            return Err(Error::shape(
                "TokenRows::new",
                format!("{} values", compute.len() * dim),
                format!("{}", data.len()),
            ));
        }
        Ok(Self { compute, dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            compute: ComputeSet::empty(),
            dim,
            data: Vec::new(),
        }
    }

    pub fn compute(&self) -> &ComputeSet {
        &self.compute
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.compute.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compute.is_empty()
    }

    /// The `j`-th computed row (token `compute.indices()[j]`).
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// Iterates `(token index, row)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.compute
            .indices()
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.dim.max(1)))
    }

    /// Writes every computed row into `target`.
    pub fn scatter_into(&self, target: &mut FeatureMap) {
        for (i, row) in self.iter() {
            target.row_mut(i).copy_from_slice(row);
        }
    }

    /// Converts to a full map when every token was computed.
    pub fn into_full(self, tokens: usize) -> Result<FeatureMap> {
        if !self.compute.is_all(tokens) {
            return Err(Error::policy(format!(
                "{} of {tokens} tokens computed and no cache to fill the rest",
                self.compute.len()
            )));
        }
        Ok(FeatureMap::from_parts(tokens, self.dim, self.data))
    }
}

/// Per-run cache state consulted by [`ToyDit::predict_noise`].
pub trait CacheContext {
    /// Tokens to recompute for `site` at the current step.
    fn directive(&mut self, site: Site, tokens: usize) -> Result<ComputeSet>;

    /// Turns the freshly computed rows for `site` into a full `T × D`
    /// estimate, recording whatever the policy needs for later steps.
    fn assemble(&mut self, site: Site, computed: TokenRows) -> Result<FeatureMap>;
}

/// Computes every token of every module; the uncached reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullCompute;

impl CacheContext for FullCompute {
    fn directive(&mut self, _site: Site, tokens: usize) -> Result<ComputeSet> {
        Ok(ComputeSet::all(tokens))
    }

    fn assemble(&mut self, _site: Site, computed: TokenRows) -> Result<FeatureMap> {
        let tokens = computed.len();
        computed.into_full(tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: FeatureMap,
    pub wk: FeatureMap,
    pub wv: FeatureMap,
    pub wo: FeatureMap,
    /// `D × 4D`
    pub mlp_in: FeatureMap,
    /// `4D × D`
    pub mlp_out: FeatureMap,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub attn_modulation: Vec<f64>,
    pub mlp_modulation: Vec<f64>,
}

/// Outputs of [`ToyDit::block_forward`] for the computed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutputs {
    pub attention: TokenRows,
    pub mlp: TokenRows,
    /// `x + attention + mlp` for each computed token.
    pub hidden: TokenRows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDit {
    cfg: ModelConfig,
    embed: FeatureMap,
    positions: FeatureMap,
    classes: FeatureMap,
    blocks: Vec<BlockWeights>,
    final_gain: Vec<f64>,
    final_bias: Vec<f64>,
    head: FeatureMap,
}

impl ToyDit {
    /// Draws all weights from the weight stream of `cfg.weight_seed`.
    ///
    /// Projection matrices are `N(0, 1/D)`; positional and class embeddings
    /// and modulation vectors are `N(0, 1)`. Layer-norm gains start at 1 and
    /// biases at 0.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let t = cfg.tokens();
        let mut rng = SeededRng::new(cfg.weight_seed, Stream::Weights);
        let scale = 1.0 / libm::sqrt(d as f64);
        let proj = |rows: usize, cols: usize, rng: &mut SeededRng| seeded_gaussian(rows, cols, rng).scale(scale);
        let normal_vec = |n: usize, rng: &mut SeededRng| -> Vec<f64> { (0..n).map(|_| rng.standard_normal()).collect() };

        let embed = proj(d, d, &mut rng);
        let positions = seeded_gaussian(t, d, &mut rng);
        let classes = seeded_gaussian(cfg.num_classes, d, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(BlockWeights {
                wq: proj(d, d, &mut rng),
                wk: proj(d, d, &mut rng),
                wv: proj(d, d, &mut rng),
                wo: proj(d, d, &mut rng),
                mlp_in: proj(d, 4 * d, &mut rng),
                mlp_out: proj(4 * d, d, &mut rng),
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                attn_modulation: normal_vec(d, &mut rng),
                mlp_modulation: normal_vec(d, &mut rng),
            });
        }
        let head = proj(d, d, &mut rng);
        Ok(Self {
            cfg,
            embed,
            positions,
            classes,
            blocks,
            final_gain: vec![1.0; d],
            final_bias: vec![0.0; d],
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn tokens(&self) -> usize {
        self.cfg.tokens()
    }

    /// Conditioning vector: class embedding plus a sinusoidal embedding of
    /// the normalised time `t / total_steps`. Frequencies span 1..10 so
    /// consecutive steps move the embedding smoothly.
    pub fn conditioning(&self, class: usize, t: usize, total_steps: usize) -> Result<Vec<f64>> {
        if class >= self.cfg.num_classes {
            return Err(Error::config(
                "sampler.class",
                format!("class {class} outside 0..{}", self.cfg.num_classes),
            ));
        }
        let d = self.cfg.dim;
        let tau = t as f64 / total_steps.max(1) as f64;
        let half = d / 2;
        let mut cond = self.classes.row(class).to_vec();
        for i in 0..half {
            let freq = libm::pow(10.0, i as f64 / (half.max(2) - 1) as f64);
            cond[2 * i] += libm::sin(tau * freq);
            cond[2 * i + 1] += libm::cos(tau * freq);
        }
        Ok(cond)
    }

    /// Token embedding of a latent: `x · W_embed + positions`.
    pub fn embed(&self, latent: &FeatureMap) -> Result<FeatureMap> {
        self.check_latent(latent)?;
        matmul(latent, &self.embed)?.add(&self.positions)
    }

    fn check_latent(&self, latent: &FeatureMap) -> Result<()> {
        let want = (self.cfg.tokens(), self.cfg.dim);
        if latent.shape() != want {
            return Err(Error::shape(
                "latent",
                format!("{}x{}", want.0, want.1),
                format!("{}x{}", latent.rows(), latent.cols()),
            ));
        }
        Ok(())
    }

    /// Attention branch output for the tokens in `compute`.
    pub fn attention_rows(&self, layer: usize, x: &FeatureMap, cond: &[f64], compute: &ComputeSet) -> Result<TokenRows> {
        let d = self.cfg.dim;
        let t = x.rows();
        compute.check(t)?;
        if compute.is_empty() {
            return Ok(TokenRows::empty(d));
        }
        let b = &self.blocks[layer];
        let mut normed = x.clone();
        for r in 0..t {
            let row = normed.row_mut(r);
            layer_norm_row(row, &b.ln1_gain, &b.ln1_bias, LN_EPS);
            for ((v, m), c) in row.iter_mut().zip(&b.attn_modulation).zip(cond) {
                *v += m * c;
            }
        }
        let keys = matmul(&normed, &b.wk)?;
        let values = matmul(&normed, &b.wv)?;
        let queries = matmul(&normed.select_rows(compute.indices())?, &b.wq)?;

        let hd = self.cfg.head_dim();
        let inv_sqrt = 1.0 / libm::sqrt(hd as f64);
        let n = compute.len();
        let keys_t = keys.transpose();
        let mut mixed = FeatureMap::zeros(n, d);
        for h in 0..self.cfg.heads {
            let off = h * hd;
            let q_h = queries.column_block(off, hd);
            let k_t = FeatureMap::from_parts(hd, t, keys_t.data()[off * t..(off + hd) * t].to_vec());
            let mut scores = matmul(&q_h, &k_t)?;
            for r in 0..n {
                let row = scores.row_mut(r);
                row.iter_mut().for_each(|s| *s *= inv_sqrt);
                softmax_in_place(row);
            }
            let head = matmul(&scores, &values.column_block(off, hd))?;
            for r in 0..n {
                mixed.row_mut(r)[off..off + hd].copy_from_slice(head.row(r));
            }
        }
        let projected = matmul(&mixed, &b.wo)?;
        TokenRows::new(compute.clone(), d, projected.into_data())
    }

    /// MLP branch output for `hidden`, whose rows belong to the tokens of `compute`.
    pub fn mlp_rows(&self, layer: usize, hidden: &TokenRows, cond: &[f64]) -> Result<TokenRows> {
        let d = self.cfg.dim;
        if hidden.is_empty() {
            return Ok(TokenRows::empty(d));
        }
        let b = &self.blocks[layer];
        let mut normed = FeatureMap::from_parts(hidden.len(), d, hidden.data.clone());
        for r in 0..normed.rows() {
            let row = normed.row_mut(r);
            layer_norm_row(row, &b.ln2_gain, &b.ln2_bias, LN_EPS);
            for ((v, m), c) in row.iter_mut().zip(&b.mlp_modulation).zip(cond) {
                *v += m * c;
            }
        }
        let inner = matmul(&normed, &b.mlp_in)?.map(gelu);
        let out = matmul(&inner, &b.mlp_out)?;
        TokenRows::new(hidden.compute.clone(), d, out.into_data())
    }

    /// One block on `compute`, given the current estimate of all tokens.
    pub fn block_forward(&self, layer: usize, x: &FeatureMap, cond: &[f64], compute: &ComputeSet) -> Result<BlockOutputs> {
        if layer >= self.blocks.len() {
            return Err(Error::Bounds {
                index: layer,
                len: self.blocks.len(),
            });
        }
        let attention = self.attention_rows(layer, x, cond, compute)?;
        let mid = residual(x, &attention);
        let mlp = self.mlp_rows(layer, &mid, cond)?;
        let hidden = add_rows(&mid, &mlp);
        Ok(BlockOutputs { attention, mlp, hidden })
    }

    /// Noise estimate for latent `x_t` at timestep `t`.
    ///
    /// For every site the context decides which tokens are recomputed and
    /// supplies the full estimate the next module consumes.
    pub fn predict_noise<C: CacheContext + ?Sized>(
        &self,
        x_t: &FeatureMap,
        t: usize,
        total_steps: usize,
        class: usize,
        ctx: &mut C,
    ) -> Result<FeatureMap> {
        let tokens = self.tokens();
        let cond = self.conditioning(class, t, total_steps)?;
        let mut h = self.embed(x_t)?;
        for layer in 0..self.blocks.len() {
            let site = Site::new(layer, Module::Attention);
            let compute = ctx.directive(site, tokens)?;
            let rows = self.attention_rows(layer, &h, &cond, &compute)?;
            let attn = ctx.assemble(site, rows)?;
            let mid = h.add(&attn)?;

            let site = Site::new(layer, Module::Mlp);
            let compute = ctx.directive(site, tokens)?;
            compute.check(tokens)?;
            let gathered = gather(&mid, &compute);
            let rows = self.mlp_rows(layer, &gathered, &cond)?;
            let mlp = ctx.assemble(site, rows)?;
            h = mid.add(&mlp)?;
        }
        let normed = crate::matrix::layer_norm(&h, &self.final_gain, &self.final_bias, LN_EPS)?;
        matmul(&normed, &self.head)
    }
}

fn gather(x: &FeatureMap, compute: &ComputeSet) -> TokenRows {
    let mut data = Vec::with_capacity(compute.len() * x.cols());
    for &i in compute.indices() {
        data.extend_from_slice(x.row(i));
    }
    TokenRows {
        compute: compute.clone(),
        dim: x.cols(),
        data,
    }
}

/// `x[i] + branch[i]` for the computed tokens of `branch`.
fn residual(x: &FeatureMap, branch: &TokenRows) -> TokenRows {
    let mut out = gather(x, &branch.compute);
    for (o, b) in out.data.iter_mut().zip(&branch.data) {
        *o += b;
    }
    out
}

fn add_rows(a: &TokenRows, b: &TokenRows) -> TokenRows {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    TokenRows {
        compute: a.compute.clone(),
        dim: a.dim,
        data,
    }
}

/// GELU, tanh approximation.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + libm::tanh(C * (x + 0.044_715 * x * x * x)))
}
