//! Toy bidirectional transformer: pre-norm RMSNorm blocks, multi-head
//! attention with QK-norm and rotary embeddings, SwiGLU MLP, and a final
//! norm before per-modality unembedding. Forward and backward passes are
//! written out by hand in f64.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{masked_loss_with_grad, LossBreakdown};
use super::params::{DepthBucket, ModuleClass, MultiplierTable, ParamGroup, ParamStore};
use super::{Denoiser, Logits};
use crate::error::{MdmError, Result};
use crate::vocab::{Modality, TokenId, UnifiedVocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTransformerConfig {
    pub n_layers: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    /// SwiGLU hidden width as a multiple of `d_emb`.
    pub mlp_factor: f64,
    pub rope_base: f64,
    pub rope: bool,
    pub qk_norm: bool,
    pub norm_eps: f64,
    /// Std of the truncated normal init before per-group init multipliers.
    pub init_std: f64,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        ToyTransformerConfig {
            n_layers: 2,
            d_emb: 32,
            n_heads: 4,
            mlp_factor: 2.75,
            rope_base: 10_000.0,
            rope: true,
            qk_norm: true,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_emb == 0 || self.n_heads == 0 {
            return Err(MdmError::invalid("transformer dimensions must be positive"));
        }
        if self.d_emb % self.n_heads != 0 {
            return Err(MdmError::invalid(format!(
                "d_emb {} is not divisible by n_heads {}",
                self.d_emb, self.n_heads
            )));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return Err(MdmError::invalid(
                "rotary embeddings need an even head dimension",
            ));
        }
        if !(self.mlp_factor > 0.0) || !(self.norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(MdmError::invalid(
                "mlp_factor, norm_eps and init_std must be > 0",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.mlp_factor * self.d_emb as f64).round() as usize).max(1)
    }

    /// Width-to-depth ratio ρ = d_emb / n_layers.
    pub fn aspect_ratio(&self) -> f64 {
        self.d_emb as f64 / self.n_layers as f64
    }

    /// Parameters inside the blocks plus the final norm.
    pub fn non_embedding_params(&self) -> usize {
        let d = self.d_emb;
        let f = self.mlp_hidden();
        let per_block = 3 * d * d + d * d + 3 * d * f + 2 * d + 2 * self.head_dim();
        self.n_layers * per_block + d
    }

    pub fn total_params(&self, vocab: &UnifiedVocab) -> usize {
        self.non_embedding_params() + 2 * vocab.size() * self.d_emb
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIdx {
    norm1: usize,
    qkv: usize,
    q_norm: usize,
    k_norm: usize,
    proj: usize,
    norm2: usize,
    gate: usize,
    fc1: usize,
    fc2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embed: [usize; 3],
    unembed: [usize; 3],
    final_norm: usize,
    blocks: Vec<BlockIdx>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    pub config: ToyTransformerConfig,
    pub vocab: UnifiedVocab,
    pub store: ParamStore,
    layout: Layout,
    /// For each token id: (embedding table, row within that table).
    rows: Vec<(Modality, usize)>,
    ids_by_modality: [Vec<TokenId>; 3],
}

fn truncated_normal<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_fn((rows, cols), |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

impl ToyTransformer {
    pub fn new<R: Rng + ?Sized>(
        config: ToyTransformerConfig,
        vocab: UnifiedVocab,
        multipliers: &MultiplierTable,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (rows, ids_by_modality) = token_rows(&vocab);
        let d = config.d_emb;
        let dh = config.head_dim();
        let f = config.mlp_hidden();
        let mut store = ParamStore::default();

        let mut add =
            |store: &mut ParamStore, name: String, group: ParamGroup, r: usize, c: usize| {
                let scale = multipliers.effective(group).init;
                let value = if group.class.is_norm() {
                    Array2::from_elem((r, c), scale)
                } else {
                    truncated_normal(r, c, config.init_std * scale, rng)
                };
                store.push(name, group, value)
            };
        let standalone = |class| ParamGroup { class, depth: None };

        let mut embed = [0; 3];
        for m in Modality::ALL {
            embed[m.index()] = add(
                &mut store,
                format!("embed.{}", m.name()),
                standalone(ModuleClass::Embedding(m)),
                ids_by_modality[m.index()].len(),
                d,
            );
        }
        let mut blocks = Vec::with_capacity(config.n_layers);
        for b in 0..config.n_layers {
            let depth = Some(DepthBucket::of_block(b, config.n_layers));
            let g = |class| ParamGroup { class, depth };
            let mut p = |store: &mut ParamStore, name: &str, class, r, c| {
                add(store, format!("blocks.{b}.{name}"), g(class), r, c)
            };
            blocks.push(BlockIdx {
                norm1: p(&mut store, "norm1", ModuleClass::Norm1, 1, d),
                qkv: p(&mut store, "attn_qkv", ModuleClass::AttnQkv, 3 * d, d),
                q_norm: p(&mut store, "attn_q_norm", ModuleClass::AttnQNorm, 1, dh),
                k_norm: p(&mut store, "attn_k_norm", ModuleClass::AttnKNorm, 1, dh),
                proj: p(&mut store, "attn_proj", ModuleClass::AttnProj, d, d),
                norm2: p(&mut store, "norm2", ModuleClass::Norm2, 1, d),
                gate: p(&mut store, "mlp_gate", ModuleClass::MlpGate, f, d),
                fc1: p(&mut store, "mlp_fc1", ModuleClass::MlpFc1, f, d),
                fc2: p(&mut store, "mlp_fc2", ModuleClass::MlpFc2, d, f),
            });
        }
        let final_norm = add(
            &mut store,
            "unembed_norm".into(),
            standalone(ModuleClass::UnembeddingNorm),
            1,
            d,
        );
        let mut unembed = [0; 3];
        for m in Modality::ALL {
            unembed[m.index()] = add(
                &mut store,
                format!("unembed.{}", m.name()),
                standalone(ModuleClass::Unembedding(m)),
                ids_by_modality[m.index()].len(),
                d,
            );
        }

        Ok(ToyTransformer {
            config,
            vocab,
            store,
            layout: Layout {
                embed,
                unembed,
                final_norm,
                blocks,
            },
            rows,
            ids_by_modality,
        })
    }

    /// Replaces all parameter values; names and shapes must match this model's layout.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(MdmError::Format(format!(
                "expected {} tensors, found {}",
                self.store.len(),
                store.len()
            )));
        }
        for (mine, theirs) in self.store.params.iter().zip(&store.params) {
            if mine.name != theirs.name
                || mine.group != theirs.group
                || mine.value.dim() != theirs.value.dim()
            {
                return Err(MdmError::Format(format!(
                    "tensor `{}` does not match layout entry `{}`",
                    theirs.name, mine.name
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    fn p(&self, idx: usize) -> ArrayView2<'_, f64> {
        self.store.params[idx].value.view()
    }

    fn vec_param(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.store.params[idx].value.row(0)
    }

    fn check_tokens(&self, tokens: &[TokenId], attention: &[bool]) -> Result<()> {
        if tokens.len() != attention.len() {
            return Err(MdmError::invalid(
                "attention mask length differs from token count",
            ));
        }
        if !attention.iter().any(|&a| a) {
            return Err(MdmError::invalid("attention mask excludes every position"));
        }
        if let Some(id) = tokens.iter().find(|&&id| id as usize >= self.vocab.size()) {
            return Err(MdmError::invalid(format!(
                "token id {id} outside vocabulary of {}",
                self.vocab.size()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tokens: &[TokenId],
        attention: &[bool],
    ) -> Result<(Logits, ForwardCache)> {
        self.check_tokens(tokens, attention)?;
        let cfg = &self.config;
        let l = tokens.len();
        let d = cfg.d_emb;
        let mut x = Array2::zeros((l, d));
        for (i, &id) in tokens.iter().enumerate() {
            let (m, r) = self.rows[id as usize];
            x.row_mut(i)
                .assign(&self.p(self.layout.embed[m.index()]).row(r));
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for bi in &self.layout.blocks {
            let (out, cache) = self.block_forward(bi, x, attention);
            blocks.push(cache);
            x = out;
        }

        let final_norm = rms_forward(&x, self.vec_param(self.layout.final_norm), cfg.norm_eps);
        let hf = &final_norm.y;
        let mut scores = Array2::zeros((l, self.vocab.size()));
        for m in Modality::ALL {
            let part = hf.dot(&self.p(self.layout.unembed[m.index()]).t());
            for (c, &id) in self.ids_by_modality[m.index()].iter().enumerate() {
                scores.column_mut(id as usize).assign(&part.column(c));
            }
        }
        Ok((
            Logits::new(scores),
            ForwardCache {
                tokens: tokens.to_vec(),
                blocks,
                final_norm,
            },
        ))
    }

    fn block_forward(
        &self,
        bi: &BlockIdx,
        x: Array2<f64>,
        attention: &[bool],
    ) -> (Array2<f64>, BlockCache) {
        let cfg = &self.config;
        let (l, d) = x.dim();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let norm1 = rms_forward(&x, self.vec_param(bi.norm1), cfg.norm_eps);
        let qkv = norm1.y.dot(&self.p(bi.qkv).t());
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut o = Array2::zeros((l, d));
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let q_raw = qkv.slice(s![.., cols.clone()]).to_owned();
            let k_raw = qkv.slice(s![.., d + cols.start..d + cols.end]).to_owned();
            let v = qkv
                .slice(s![.., 2 * d + cols.start..2 * d + cols.end])
                .to_owned();

            let (q_norm, k_norm) = if cfg.qk_norm {
                (
                    Some(rms_forward(&q_raw, self.vec_param(bi.q_norm), cfg.norm_eps)),
                    Some(rms_forward(&k_raw, self.vec_param(bi.k_norm), cfg.norm_eps)),
                )
            } else {
                (None, None)
            };
            let mut q = q_norm
                .as_ref()
                .map_or_else(|| q_raw.clone(), |n| n.y.clone());
            let mut k = k_norm
                .as_ref()
                .map_or_else(|| k_raw.clone(), |n| n.y.clone());
            if cfg.rope {
                rope(&mut q, cfg.rope_base, 1.0);
                rope(&mut k, cfg.rope_base, 1.0);
            }

            let mut probs = q.dot(&k.t()) * scale;
            for mut row in probs.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    if !attention[j] {
                        *v = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row.as_slice_mut().expect("contiguous row"));
            }
            o.slice_mut(s![.., cols]).assign(&probs.dot(&v));
            heads.push(HeadCache {
                q_norm,
                k_norm,
                q,
                k,
                v,
                probs,
            });
        }
        let x_mid = &x + &o.dot(&self.p(bi.proj).t());

        let norm2 = rms_forward(&x_mid, self.vec_param(bi.norm2), cfg.norm_eps);
        let gate = norm2.y.dot(&self.p(bi.gate).t());
        let up = norm2.y.dot(&self.p(bi.fc1).t());
        let act = Array2::from_shape_fn(gate.raw_dim(), |ij| silu(gate[ij]) * up[ij]);
        let out = &x_mid + &act.dot(&self.p(bi.fc2).t());

        (
            out,
            BlockCache {
                norm1,
                heads,
                o,
                norm2,
                gate,
                up,
                act,
            },
        )
    }

    /// Gradients of a scalar whose derivative w.r.t. the logits is `dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Vec<Array2<f64>> {
        let cfg = &self.config;
        let mut grads = self.store.zeros_like();
        let hf = &cache.final_norm.y;
        let l = hf.nrows();

        let mut dhf = Array2::zeros((l, cfg.d_emb));
        for m in Modality::ALL {
            let ids = &self.ids_by_modality[m.index()];
            let mut dpart = Array2::zeros((l, ids.len()));
            for (c, &id) in ids.iter().enumerate() {
                dpart.column_mut(c).assign(&dlogits.column(id as usize));
            }
            let idx = self.layout.unembed[m.index()];
            grads[idx] += &dpart.t().dot(hf);
            dhf += &dpart.dot(&self.p(idx));
        }
        let (mut dx, dw) = rms_backward(
            &dhf,
            &cache.final_norm,
            self.vec_param(self.layout.final_norm),
        );
        grads[self.layout.final_norm]
            .row_mut(0)
            .add_assign_view(&dw);

        for (bi, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(bi, bc, dx, &mut grads);
        }

        for (i, &id) in cache.tokens.iter().enumerate() {
            let (m, r) = self.rows[id as usize];
            let mut row = grads[self.layout.embed[m.index()]].row_mut(r);
            row += &dx.row(i);
        }
        grads
    }

    fn block_backward(
        &self,
        bi: &BlockIdx,
        bc: &BlockCache,
        dout: Array2<f64>,
        grads: &mut [Array2<f64>],
    ) -> Array2<f64> {
        let cfg = &self.config;
        let d = cfg.d_emb;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch
        grads[bi.fc2] += &dout.t().dot(&bc.act);
        let dact = dout.dot(&self.p(bi.fc2));
        let dgate = Array2::from_shape_fn(dact.raw_dim(), |ij| {
            dact[ij] * bc.up[ij] * silu_grad(bc.gate[ij])
        });
        let dup = Array2::from_shape_fn(dact.raw_dim(), |ij| dact[ij] * silu(bc.gate[ij]));
        grads[bi.gate] += &dgate.t().dot(&bc.norm2.y);
        grads[bi.fc1] += &dup.t().dot(&bc.norm2.y);
        let dh2 = dgate.dot(&self.p(bi.gate)) + dup.dot(&self.p(bi.fc1));
        let (dx_mid_norm, dw2) = rms_backward(&dh2, &bc.norm2, self.vec_param(bi.norm2));
        grads[bi.norm2].row_mut(0).add_assign_view(&dw2);
        let dx_mid = dout + dx_mid_norm;

        // attention branch
        grads[bi.proj] += &dx_mid.t().dot(&bc.o);
        let d_o = dx_mid.dot(&self.p(bi.proj));
        let l = d_o.nrows();
        let mut dqkv = Array2::zeros((l, 3 * d));
        for (h, hc) in bc.heads.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            let doh = d_o.slice(s![.., cols.clone()]);
            let dprobs = doh.dot(&hc.v.t());
            let dv = hc.probs.t().dot(&doh);
            let mut dscores = hc.probs.clone();
            for (mut row, drow) in dscores.rows_mut().into_iter().zip(dprobs.rows()) {
                let dot: f64 = row.iter().zip(drow.iter()).map(|(p, dp)| p * dp).sum();
                row.zip_mut_with(&drow, |p, &dp| *p *= dp - dot);
            }
            dscores *= scale;
            let mut dq = dscores.dot(&hc.k);
            let mut dk = dscores.t().dot(&hc.q);
            if cfg.rope {
                rope(&mut dq, cfg.rope_base, -1.0);
                rope(&mut dk, cfg.rope_base, -1.0);
            }
            if let (Some(qn), Some(kn)) = (&hc.q_norm, &hc.k_norm) {
                let (dq_raw, dwq) = rms_backward(&dq, qn, self.vec_param(bi.q_norm));
                let (dk_raw, dwk) = rms_backward(&dk, kn, self.vec_param(bi.k_norm));
                grads[bi.q_norm].row_mut(0).add_assign_view(&dwq);
                grads[bi.k_norm].row_mut(0).add_assign_view(&dwk);
                dq = dq_raw;
                dk = dk_raw;
            }
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end])
                .assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end])
                .assign(&dv);
        }
        grads[bi.qkv] += &dqkv.t().dot(&bc.norm1.y);
        let dh1 = dqkv.dot(&self.p(bi.qkv));
        let (dx_norm, dw1) = rms_backward(&dh1, &bc.norm1, self.vec_param(bi.norm1));
        grads[bi.norm1].row_mut(0).add_assign_view(&dw1);
        dx_mid + dx_norm
    }

    /// Diffusion + z-loss for one corrupted view and the gradient of that loss.
    pub fn loss_and_grad(
        &self,
        corrupted: &[TokenId],
        attention: &[bool],
        target: &[TokenId],
        masked: &[usize],
        weight: f64,
        z_coef: f64,
    ) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
        let (logits, cache) = self.forward(corrupted, attention)?;
        let (loss, dlogits) = masked_loss_with_grad(&logits, target, masked, weight, z_coef);
        let grads = self.backward(&cache, &dlogits);
        Ok((loss, grads))
    }
}

impl Denoiser for ToyTransformer {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn logits(&self, tokens: &[TokenId], attention: &[bool]) -> Result<Logits> {
        self.forward(tokens, attention).map(|(l, _)| l)
    }
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockCache>,
    final_norm: RmsCache,
}

#[derive(Clone, Debug)]
struct BlockCache {
    norm1: RmsCache,
    heads: Vec<HeadCache>,
    o: Array2<f64>,
    norm2: RmsCache,
    gate: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Clone, Debug)]
struct HeadCache {
    q_norm: Option<RmsCache>,
    k_norm: Option<RmsCache>,
    /// Queries/keys after norm and rotation.
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
}

#[derive(Clone, Debug)]
struct RmsCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
    y: Array2<f64>,
}

fn token_rows(vocab: &UnifiedVocab) -> (Vec<(Modality, usize)>, [Vec<TokenId>; 3]) {
    let mut ids: [Vec<TokenId>; 3] = Default::default();
    let mut rows = Vec::with_capacity(vocab.size());
    for id in 0..vocab.size() as TokenId {
        let m = vocab.modality_of(id).expect("every id has a modality");
        rows.push((m, ids[m.index()].len()));
        ids[m.index()].push(id);
    }
    (rows, ids)
}

fn rms_forward(x: &Array2<f64>, w: ArrayView1<f64>, eps: f64) -> RmsCache {
    let n = x.ncols() as f64;
    let rstd = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / n + eps).sqrt());
    let xhat = x * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * &w;
    RmsCache { xhat, rstd, y }
}

fn rms_backward(
    dy: &Array2<f64>,
    cache: &RmsCache,
    w: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let dw = (dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = dy * &w;
    let n = dy.ncols() as f64;
    let mut dx = dxhat.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let xh = cache.xhat.row(i);
        let mean = row.dot(&xh) / n;
        let r = cache.rstd[i];
        row.zip_mut_with(&xh, |g, &xv| *g = r * (*g - xv * mean));
    }
    (dx, dw)
}

/// Rotates adjacent pairs `(2j, 2j+1)` of each row by `sign * pos * base^(-2j/dh)`.
fn rope(x: &mut Array2<f64>, base: f64, sign: f64) {
    let dh = x.ncols();
    for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
        for j in 0..dh / 2 {
            let theta = sign * pos as f64 * base.powf(-2.0 * j as f64 / dh as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = a * cos - b * sin;
            row[2 * j + 1] = a * sin + b * cos;
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

trait AddAssignView {
    fn add_assign_view(&mut self, other: &Array1<f64>);
}

impl AddAssignView for ndarray::ArrayViewMut1<'_, f64> {
    fn add_assign_view(&mut self, other: &Array1<f64>) {
        *self += other;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::loss::masked_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(cfg: ToyTransformerConfig, seed: u64) -> ToyTransformer {
        let vocab = UnifiedVocab::build([6, 5, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyTransformer::new(cfg, vocab, &MultiplierTable::uniform(), &mut rng).unwrap()
    }

    fn perturb(model: &mut ToyTransformer, seed: u64) {
        // Move norm weights off 1.0 and inflate matrices so every path carries signal.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for p in &mut model.store.params {
            let s = if p.group.class.is_norm() { 0.3 } else { 0.4 };
            p.value.mapv_inplace(|v| v + s * normal.sample(&mut rng));
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = tiny(ToyTransformerConfig::default(), 1);
        let tokens: Vec<TokenId> = vec![m.vocab.task_id(crate::vocab::TaskKind::Text), 0, 1, 2, 3];
        let att = vec![true; 5];
        let a = m.logits(&tokens, &att).unwrap();
        let b = m.logits(&tokens, &att).unwrap();
        assert_eq!(a.scores.dim(), (5, m.vocab.size()));
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn out_of_range_id_rejected() {
        let m = tiny(ToyTransformerConfig::default(), 1);
        let bad = vec![m.vocab.size() as TokenId];
        assert!(matches!(
            m.logits(&bad, &[true]),
            Err(MdmError::InvalidArgument(_))
        ));
    }

    #[test]
    fn permutation_equivariant_without_rope() {
        let cfg = ToyTransformerConfig {
            rope: false,
            ..Default::default()
        };
        let mut m = tiny(cfg, 4);
        perturb(&mut m, 5);
        let tokens: Vec<TokenId> =
            vec![m.vocab.task_id(crate::vocab::TaskKind::Text), 3, 1, 4, 0, 5];
        let att = vec![true; tokens.len()];
        let base = m.logits(&tokens, &att).unwrap();
        let perm = [0usize, 4, 2, 5, 1, 3];
        let permuted: Vec<TokenId> = perm.iter().map(|&p| tokens[p]).collect();
        let out = m.logits(&permuted, &att).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for v in 0..m.vocab.size() {
                assert!((out.scores[[i, v]] - base.scores[[p, v]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_breaks_permutation_symmetry() {
        let mut m = tiny(ToyTransformerConfig::default(), 4);
        perturb(&mut m, 5);
        let tokens: Vec<TokenId> = vec![m.vocab.task_id(crate::vocab::TaskKind::Text), 3, 1, 4];
        let att = vec![true; 4];
        let base = m.logits(&tokens, &att).unwrap();
        let swapped = vec![tokens[0], tokens[2], tokens[1], tokens[3]];
        let out = m.logits(&swapped, &att).unwrap();
        let diff = (&out.scores.row(1) - &base.scores.row(2))
            .mapv(f64::abs)
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn padded_keys_are_ignored() {
        let mut m = tiny(ToyTransformerConfig::default(), 2);
        perturb(&mut m, 3);
        let pad = m.vocab.pad_text;
        let task = m.vocab.task_id(crate::vocab::TaskKind::Text);
        let a = vec![task, 1, 2, pad, pad];
        let b = vec![task, 1, 2, 0, 5];
        let att = vec![true, true, true, false, false];
        let la = m.logits(&a, &att).unwrap();
        let lb = m.logits(&b, &att).unwrap();
        for i in 0..3 {
            for v in 0..m.vocab.size() {
                assert!((la.scores[[i, v]] - lb.scores[[i, v]]).abs() < 1e-12);
            }
        }
    }

    fn check_gradients(cfg: ToyTransformerConfig) {
        let mut m = tiny(cfg, 7);
        perturb(&mut m, 8);
        let v = &m.vocab;
        let task = v.task_id(crate::vocab::TaskKind::ImageText);
        let target: Vec<TokenId> = vec![
            task,
            v.bos(Modality::Image),
            7,
            8,
            v.eos(Modality::Image),
            1,
            2,
            v.pad_text,
        ];
        let masked = vec![2, 3, 5];
        let mut corrupted = target.clone();
        corrupted[2] = v.mask_id(Modality::Image);
        corrupted[3] = v.mask_id(Modality::Image);
        corrupted[5] = v.mask_id(Modality::Text);
        let att: Vec<bool> = target.iter().map(|&t| t != v.pad_text).collect();
        let (w, z) = (1.7, 0.05);
        let (_, grads) = m
            .loss_and_grad(&corrupted, &att, &target, &masked, w, z)
            .unwrap();

        let loss_at = |model: &ToyTransformer| {
            let logits = model.logits(&corrupted, &att).unwrap();
            masked_loss(&logits, &target, &masked, w, z).total
        };
        let h = 1e-5;
        for pi in 0..m.store.len() {
            let n = m.store.params[pi].value.len();
            for k in [0, n / 2, n - 1] {
                let orig = m.store.params[pi].value.as_slice().unwrap()[k];
                m.store.params[pi].value.as_slice_mut().unwrap()[k] = orig + h;
                let up = loss_at(&m);
                m.store.params[pi].value.as_slice_mut().unwrap()[k] = orig - h;
                let down = loss_at(&m);
                m.store.params[pi].value.as_slice_mut().unwrap()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[pi].as_slice().unwrap()[k];
                let tol = 1e-6 + 1e-4 * fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= tol,
                    "{} [{k}]: fd {fd} vs analytic {an}",
                    m.store.params[pi].name
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(ToyTransformerConfig::default());
    }

    #[test]
    fn gradients_without_qk_norm_or_rope() {
        check_gradients(ToyTransformerConfig {
            qk_norm: false,
            rope: false,
            n_layers: 1,
            ..Default::default()
        });
    }

    #[test]
    fn every_tensor_has_one_group_and_counts_add_up() {
        let m = tiny(ToyTransformerConfig::default(), 0);
        let non_embed: usize = m
            .store
            .params
            .iter()
            .filter(|p| {
                !matches!(
                    p.group.class,
                    ModuleClass::Embedding(_) | ModuleClass::Unembedding(_)
                )
            })
            .map(|p| p.value.len())
            .sum();
        assert_eq!(non_embed, m.config.non_embedding_params());
        assert_eq!(m.store.num_scalars(), m.config.total_params(&m.vocab));
        let blocks = m
            .store
            .params
            .iter()
            .filter(|p| p.group.depth.is_some())
            .count();
        assert_eq!(blocks, 9 * m.config.n_layers);
    }

    #[test]
    fn init_multipliers_scale_norm_weights() {
        let vocab = UnifiedVocab::build([6, 5, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = MultiplierTable::trimodal_preset();
        let m =
            ToyTransformer::new(ToyTransformerConfig::default(), vocab, &table, &mut rng).unwrap();
        let norm1 = &m.store.params[m.layout.blocks[0].norm1];
        assert!((norm1.value[[0, 0]] - 2.171 * 0.997).abs() < 1e-12);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ToyTransformerConfig {
            d_emb: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
