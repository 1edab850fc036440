//! Text and video encoders.
//!
//! Text side: trainable token embeddings plus learned positional embeddings
//! feed a small stack of Transformer encoder layers (the desk-scale stand-in
//! for a large pretrained multilingual backbone, with the same freezing and
//! output-layer-selection mechanics), then a Transformer pooling head turns
//! the token matrix into one D-vector. Video side: a linear projection of the
//! per-second feature rows, then its own pooling head. The pooling heads use
//! no positional embeddings; the fixed-length encoding is row 0 of the last
//! head layer's output.
//!
//! One text encoder serves all languages: the language tag on a sequence is
//! bookkeeping for samplers and evaluation, never a parameter selector.

use crate::error::{Error, Result};
use crate::graph::{multi_head_attention, AttentionVars, Graph, Var};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// A sentence: token ids into the shared vocabulary plus a language index
/// into the corpus manifest's language list.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TokenSequence {
    pub language: usize,
    pub tokens: Vec<usize>,
}

/// A video clip: M rows (one per second) of H fused features, row-major.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VideoFeatureSequence {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl VideoFeatureSequence {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<VideoFeatureSequence> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "video features: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Corpus(format!("non-finite feature value {bad}")));
        }
        Ok(VideoFeatureSequence { rows, cols, data })
    }

    /// First `max_rows` seconds of the clip.
    pub fn truncated(&self, max_rows: usize) -> VideoFeatureSequence {
        let rows = self.rows.min(max_rows);
        VideoFeatureSequence {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }
}

/// Structural hyperparameters. Everything a checkpoint must agree on before
/// its parameter blocks can be loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    /// Shared embedding width D.
    pub embed_dim: usize,
    /// Video feature width H (from the corpus).
    pub feature_dim: usize,
    /// Vocabulary size including reserved tokens.
    pub vocab_size: usize,
    /// Capacity of the learned positional table.
    pub max_text_len: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    /// Backbone layer whose output feeds the pooling head, 1-based.
    pub output_layer: usize,
    pub pool_layers: usize,
    pub pool_heads: usize,
    /// Feed-forward hidden width as a multiple of embed_dim.
    pub ffn_mult: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || self.feature_dim == 0 || self.vocab_size < 2 || self.max_text_len == 0 {
            return Err(Error::Config(format!("degenerate model dims: {self:?}")));
        }
        if self.backbone_layers == 0 || self.pool_layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("layer counts and ffn_mult must be positive".into()));
        }
        if self.backbone_heads == 0 || d % self.backbone_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {d} not divisible by backbone_heads {}",
                self.backbone_heads
            )));
        }
        if self.pool_heads == 0 || d % self.pool_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {d} not divisible by pool_heads {}",
                self.pool_heads
            )));
        }
        if self.output_layer == 0 || self.output_layer > self.backbone_layers {
            return Err(Error::Config(format!(
                "output_layer {} outside 1..={}",
                self.output_layer, self.backbone_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// One post-norm Transformer encoder layer: attention and feed-forward
/// sublayers, each followed by residual add and layer norm.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub attn: AttentionIds,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// The full parameter set: backbone (token + positional embeddings, encoder
/// layers), the two pooling heads, and the video projector. The two heads
/// never share weights.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub backbone: Vec<LayerIds>,
    pub text_head: Vec<LayerIds>,
    pub video_head: Vec<LayerIds>,
    pub vproj_w: ParamId,
    pub vproj_b: ParamId,
    /// Backbone layers 1..=freeze_below (and the embeddings, when > 0)
    /// receive no updates.
    pub freeze_below: usize,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

fn init_weight(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> Result<ParamId> {
    let mut rng = Rng::stream(seed, &format!("init/{name}"));
    store.insert(name, Tensor::randn(shape, INIT_STD, &mut rng))
}

fn init_zeros(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    store.insert(name, Tensor::zeros(shape))
}

fn init_ones(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    store.insert(name, Tensor::full(shape, 1.0))
}

fn init_layer(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, seed: u64) -> Result<LayerIds> {
    Ok(LayerIds {
        attn: AttentionIds {
            wq: init_weight(store, &format!("{prefix}.attn_wq"), &[d, d], seed)?,
            bq: init_zeros(store, &format!("{prefix}.attn_bq"), &[d])?,
            wk: init_weight(store, &format!("{prefix}.attn_wk"), &[d, d], seed)?,
            bk: init_zeros(store, &format!("{prefix}.attn_bk"), &[d])?,
            wv: init_weight(store, &format!("{prefix}.attn_wv"), &[d, d], seed)?,
            bv: init_zeros(store, &format!("{prefix}.attn_bv"), &[d])?,
            wo: init_weight(store, &format!("{prefix}.attn_wo"), &[d, d], seed)?,
            bo: init_zeros(store, &format!("{prefix}.attn_bo"), &[d])?,
        },
        ln1_g: init_ones(store, &format!("{prefix}.ln1_g"), &[d])?,
        ln1_b: init_zeros(store, &format!("{prefix}.ln1_b"), &[d])?,
        ffn_w1: init_weight(store, &format!("{prefix}.ffn_w1"), &[d, ffn], seed)?,
        ffn_b1: init_zeros(store, &format!("{prefix}.ffn_b1"), &[ffn])?,
        ffn_w2: init_weight(store, &format!("{prefix}.ffn_w2"), &[ffn, d], seed)?,
        ffn_b2: init_zeros(store, &format!("{prefix}.ffn_b2"), &[d])?,
        ln2_g: init_ones(store, &format!("{prefix}.ln2_g"), &[d])?,
        ln2_b: init_zeros(store, &format!("{prefix}.ln2_b"), &[d])?,
    })
}

impl ModelParameters {
    /// Fresh parameters: weight matrices ~ Normal(0, 0.02^2) from per-name
    /// streams of `seed`, biases and layer-norm shifts zero, layer-norm
    /// scales one.
    pub fn init(dims: &ModelDims, freeze_below: usize, seed: u64) -> Result<ModelParameters> {
        dims.validate()?;
        if freeze_below > dims.backbone_layers {
            return Err(Error::Config(format!(
                "freeze_below {} exceeds backbone depth {}",
                freeze_below, dims.backbone_layers
            )));
        }
        let d = dims.embed_dim;
        let ffn = d * dims.ffn_mult;
        let mut store = ParamStore::new();
        let token_emb = init_weight(&mut store, "backbone.token_emb", &[dims.vocab_size, d], seed)?;
        let pos_emb = init_weight(&mut store, "backbone.pos_emb", &[dims.max_text_len, d], seed)?;
        let mut backbone = Vec::with_capacity(dims.backbone_layers);
        for l in 0..dims.backbone_layers {
            backbone.push(init_layer(&mut store, &format!("backbone.l{l}"), d, ffn, seed)?);
        }
        let mut text_head = Vec::with_capacity(dims.pool_layers);
        for l in 0..dims.pool_layers {
            text_head.push(init_layer(&mut store, &format!("text_head.l{l}"), d, ffn, seed)?);
        }
        let mut video_head = Vec::with_capacity(dims.pool_layers);
        for l in 0..dims.pool_layers {
            video_head.push(init_layer(&mut store, &format!("video_head.l{l}"), d, ffn, seed)?);
        }
        let vproj_w = init_weight(&mut store, "video_proj.w", &[dims.feature_dim, d], seed)?;
        let vproj_b = init_zeros(&mut store, "video_proj.b", &[d])?;
        let mut model = ModelParameters {
            dims: dims.clone(),
            store,
            token_emb,
            pos_emb,
            backbone,
            text_head,
            video_head,
            vproj_w,
            vproj_b,
            freeze_below: 0,
        };
        model.set_freeze_below(freeze_below)?;
        Ok(model)
    }

    /// Marks backbone layers 1..=f (and the embedding tables when f >= 1) as
    /// frozen; everything else trainable. Pooling heads and the video
    /// projector are never frozen.
    pub fn set_freeze_below(&mut self, f: usize) -> Result<()> {
        if f > self.dims.backbone_layers {
            return Err(Error::Config(format!(
                "freeze_below {f} exceeds backbone depth {}",
                self.dims.backbone_layers
            )));
        }
        self.freeze_below = f;
        let emb_trainable = f == 0;
        self.store.set_trainable(self.token_emb, emb_trainable);
        self.store.set_trainable(self.pos_emb, emb_trainable);
        let layers: Vec<(usize, LayerIds)> = self.backbone.iter().cloned().enumerate().collect();
        for (l, ids) in layers {
            let trainable = l >= f;
            for id in layer_param_ids(&ids) {
                self.store.set_trainable(id, trainable);
            }
        }
        Ok(())
    }

    /// Ids of every parameter in backbone layer `l` (0-based).
    pub fn backbone_layer_params(&self, l: usize) -> Vec<ParamId> {
        layer_param_ids(&self.backbone[l])
    }

    /// Inference-mode text encoding (no dropout, fresh graph).
    pub fn infer_text(&self, x: &TokenSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = bind_model(&mut g, self)?;
        let mut rng = Rng::from_seed(0); // no draws in inference mode
        let c = encode_text(&mut g, &bound, x, 0.0, &mut rng, false)?;
        Ok(g.value(c).to_vec())
    }

    /// Inference-mode video encoding.
    pub fn infer_video(&self, v: &VideoFeatureSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = bind_model(&mut g, self)?;
        let mut rng = Rng::from_seed(0);
        let c = encode_video(&mut g, &bound, v, 0.0, &mut rng, false)?;
        Ok(g.value(c).to_vec())
    }
}

pub fn layer_param_ids(ids: &LayerIds) -> Vec<ParamId> {
    vec![
        ids.attn.wq, ids.attn.bq, ids.attn.wk, ids.attn.bk,
        ids.attn.wv, ids.attn.bv, ids.attn.wo, ids.attn.bo,
        ids.ln1_g, ids.ln1_b,
        ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2,
        ids.ln2_g, ids.ln2_b,
    ]
}

/// One layer's parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn: AttentionVars,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

/// The whole model bound into one graph, ready to encode a batch.
#[derive(Debug)]
pub struct BoundModel {
    pub dims: ModelDims,
    pub token_emb: Var,
    pub pos_emb: Var,
    pub backbone: Vec<LayerVars>,
    pub text_head: Vec<LayerVars>,
    pub video_head: Vec<LayerVars>,
    pub vproj_w: Var,
    pub vproj_b: Var,
}

fn bind_layer(g: &mut Graph, store: &ParamStore, ids: &LayerIds) -> Result<LayerVars> {
    Ok(LayerVars {
        attn: AttentionVars {
            wq: g.param(store, ids.attn.wq)?,
            bq: g.param(store, ids.attn.bq)?,
            wk: g.param(store, ids.attn.wk)?,
            bk: g.param(store, ids.attn.bk)?,
            wv: g.param(store, ids.attn.wv)?,
            bv: g.param(store, ids.attn.bv)?,
            wo: g.param(store, ids.attn.wo)?,
            bo: g.param(store, ids.attn.bo)?,
        },
        ln1_g: g.param(store, ids.ln1_g)?,
        ln1_b: g.param(store, ids.ln1_b)?,
        ffn_w1: g.param(store, ids.ffn_w1)?,
        ffn_b1: g.param(store, ids.ffn_b1)?,
        ffn_w2: g.param(store, ids.ffn_w2)?,
        ffn_b2: g.param(store, ids.ffn_b2)?,
        ln2_g: g.param(store, ids.ln2_g)?,
        ln2_b: g.param(store, ids.ln2_b)?,
    })
}

/// Binds every parameter once; encode calls for all items of a batch then
/// share the bound nodes, so gradients from the whole batch accumulate onto
/// one node per parameter.
pub fn bind_model(g: &mut Graph, m: &ModelParameters) -> Result<BoundModel> {
    Ok(BoundModel {
        dims: m.dims.clone(),
        token_emb: g.param(&m.store, m.token_emb)?,
        pos_emb: g.param(&m.store, m.pos_emb)?,
        backbone: m
            .backbone
            .iter()
            .map(|l| bind_layer(g, &m.store, l))
            .collect::<Result<_>>()?,
        text_head: m
            .text_head
            .iter()
            .map(|l| bind_layer(g, &m.store, l))
            .collect::<Result<_>>()?,
        video_head: m
            .video_head
            .iter()
            .map(|l| bind_layer(g, &m.store, l))
            .collect::<Result<_>>()?,
        vproj_w: g.param(&m.store, m.vproj_w)?,
        vproj_b: g.param(&m.store, m.vproj_b)?,
    })
}

/// Post-norm Transformer encoder layer. `context` switches the attention
/// between self-attention (None) and cross-attention from `x` to the given
/// rows (used by the first pooling-head layer).
fn encoder_layer(
    g: &mut Graph,
    x: Var,
    layer: &LayerVars,
    heads: usize,
    context: Option<Var>,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let kv = context.unwrap_or(x);
    let attn = multi_head_attention(g, x, kv, kv, heads, &layer.attn)?;
    let attn = g.dropout(attn, dropout, rng, training)?;
    let h = g.add(x, attn)?;
    let h = g.layer_norm(h, layer.ln1_g, layer.ln1_b, LN_EPS)?;
    let f = g.matmul(h, layer.ffn_w1)?;
    let f = g.add_row(f, layer.ffn_b1)?;
    let f = g.relu(f)?;
    let f = g.matmul(f, layer.ffn_w2)?;
    let f = g.add_row(f, layer.ffn_b2)?;
    let f = g.dropout(f, dropout, rng, training)?;
    let out = g.add(h, f)?;
    g.layer_norm(out, layer.ln2_g, layer.ln2_b, LN_EPS)
}

/// Contextualized token representations: token + positional embeddings pushed
/// through backbone layers 1..=output_layer. Output shape N x D.
pub fn embed_tokens(
    g: &mut Graph,
    bm: &BoundModel,
    x: &TokenSequence,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let n = x.tokens.len();
    if n == 0 {
        return Err(Error::Usage("empty token sequence".into()));
    }
    if n > bm.dims.max_text_len {
        return Err(Error::Usage(format!(
            "sequence length {n} exceeds max_text_len {}",
            bm.dims.max_text_len
        )));
    }
    let tok = g.gather_rows(bm.token_emb, &x.tokens)?;
    let pos = g.slice_rows(bm.pos_emb, 0, n)?;
    let mut h = g.add(tok, pos)?;
    h = g.dropout(h, dropout, rng, training)?;
    for layer in bm.backbone.iter().take(bm.dims.output_layer) {
        h = encoder_layer(g, h, layer, bm.dims.backbone_heads, None, dropout, rng, training)?;
    }
    Ok(h)
}

/// Linear projection of per-second features into the shared width: M x D.
pub fn project_video(g: &mut Graph, bm: &BoundModel, v: &VideoFeatureSequence) -> Result<Var> {
    if v.rows == 0 {
        return Err(Error::Usage("empty video feature sequence".into()));
    }
    if v.cols != bm.dims.feature_dim {
        return Err(Error::Corpus(format!(
            "feature width {} does not match configured width {}",
            v.cols, bm.dims.feature_dim
        )));
    }
    let feats = g.leaf(&[v.rows, v.cols], v.data.clone())?;
    let proj = g.matmul(feats, bm.vproj_w)?;
    g.add_row(proj, bm.vproj_b)
}

/// Pooling head, full output: layer 1 attends query -> context, remaining
/// layers self-attend. Returns the final layer's whole Nq x D matrix; the
/// pooled encoding is its row 0 (see `transformer_pool`).
pub fn transformer_pool_full(
    g: &mut Graph,
    head: &[LayerVars],
    heads: usize,
    query: Var,
    context: Var,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    if g.shape(query)[0] == 0 {
        return Err(Error::Usage("pooling with empty query".into()));
    }
    let mut h = query;
    for (l, layer) in head.iter().enumerate() {
        let ctx = if l == 0 { Some(context) } else { None };
        h = encoder_layer(g, h, layer, heads, ctx, dropout, rng, training)?;
    }
    Ok(h)
}

/// Fixed-length encoding: row 0 of the pooling head's final layer output.
pub fn transformer_pool(
    g: &mut Graph,
    head: &[LayerVars],
    heads: usize,
    query: Var,
    context: Var,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let full = transformer_pool_full(g, head, heads, query, context, dropout, rng, training)?;
    g.row(full, 0)
}

/// c_x: pool the contextualized tokens with the text head (query = key =
/// value = e_x). The same parameters encode every language.
pub fn encode_text(
    g: &mut Graph,
    bm: &BoundModel,
    x: &TokenSequence,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let ex = embed_tokens(g, bm, x, dropout, rng, training)?;
    transformer_pool(g, &bm.text_head, bm.dims.pool_heads, ex, ex, dropout, rng, training)
}

/// c_v: pool the projected features with the video head.
pub fn encode_video(
    g: &mut Graph,
    bm: &BoundModel,
    v: &VideoFeatureSequence,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let ev = project_video(g, bm, v)?;
    transformer_pool(g, &bm.video_head, bm.dims.pool_heads, ev, ev, dropout, rng, training)
}

/// c_{x|v}: video-conditioned text encoding. The text head attends with
/// query = e_x over context = e_x followed by e_v, so the sentence encoding
/// can borrow what the video shows. With an empty video this is exactly
/// `encode_text`.
pub fn encode_text_conditioned(
    g: &mut Graph,
    bm: &BoundModel,
    x: &TokenSequence,
    v: &VideoFeatureSequence,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let ex = embed_tokens(g, bm, x, dropout, rng, training)?;
    let context = if v.rows == 0 {
        ex
    } else {
        let ev = project_video(g, bm, v)?;
        g.concat_rows(ex, ev)?
    };
    transformer_pool(g, &bm.text_head, bm.dims.pool_heads, ex, context, dropout, rng, training)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_dims() -> ModelDims {
        ModelDims {
            embed_dim: 8,
            feature_dim: 6,
            vocab_size: 20,
            max_text_len: 12,
            backbone_layers: 2,
            backbone_heads: 2,
            output_layer: 2,
            pool_layers: 2,
            pool_heads: 2,
            ffn_mult: 2,
        }
    }

    fn seq(tokens: &[usize]) -> TokenSequence {
        TokenSequence { language: 0, tokens: tokens.to_vec() }
    }

    #[test]
    fn dims_validation_catches_bad_configs() {
        let mut d = tiny_dims();
        d.embed_dim = 9; // not divisible by 2 heads
        assert!(matches!(d.validate(), Err(Error::Config(_))));
        let mut d = tiny_dims();
        d.output_layer = 3;
        assert!(matches!(d.validate(), Err(Error::Config(_))));
        assert!(tiny_dims().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParameters::init(&tiny_dims(), 0, 7).unwrap();
        let b = ModelParameters::init(&tiny_dims(), 0, 7).unwrap();
        let c = ModelParameters::init(&tiny_dims(), 0, 8).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.get(id).data, b.store.get(id).data);
        }
        assert_ne!(
            a.store.get(a.token_emb).data,
            c.store.get(c.token_emb).data
        );
    }

    #[test]
    fn encode_text_shape_and_determinism() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let x = seq(&[2, 5, 7, 7, 3]);
        let c1 = m.infer_text(&x).unwrap();
        let c2 = m.infer_text(&x).unwrap();
        assert_eq!(c1.len(), 8);
        assert_eq!(c1, c2);
        assert!(c1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn language_tag_does_not_select_parameters() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let a = TokenSequence { language: 0, tokens: vec![2, 5, 7] };
        let b = TokenSequence { language: 1, tokens: vec![2, 5, 7] };
        assert_eq!(m.infer_text(&a).unwrap(), m.infer_text(&b).unwrap());
    }

    #[test]
    fn token_order_matters_with_positional_embeddings() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let a = m.infer_text(&seq(&[2, 5, 7])).unwrap();
        let b = m.infer_text(&seq(&[7, 5, 2])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_text_rejects_out_of_range_and_overlong() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        assert!(matches!(
            m.infer_text(&seq(&[25])),
            Err(Error::Corpus(_))
        ));
        let long: Vec<usize> = vec![2; 13];
        assert!(matches!(m.infer_text(&seq(&long)), Err(Error::Usage(_))));
        assert!(matches!(m.infer_text(&seq(&[])), Err(Error::Usage(_))));
    }

    #[test]
    fn project_video_identity_and_zero_cases() {
        // H = D with identity projection: rows pass through.
        let mut dims = tiny_dims();
        dims.feature_dim = dims.embed_dim;
        let mut m = ModelParameters::init(&dims, 0, 3).unwrap();
        let d = dims.embed_dim;
        let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
        m.store.get_mut(m.vproj_w).data = eye;
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &m).unwrap();
        let v = VideoFeatureSequence::new(2, d, (0..2 * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = project_video(&mut g, &bm, &v).unwrap();
        for (a, b) in g.value(out).iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-12);
        }
        // Zero features land on the bias rows.
        m.store.get_mut(m.vproj_b).data = vec![0.25; d];
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &m).unwrap();
        let vz = VideoFeatureSequence::new(3, d, vec![0.0; 3 * d]).unwrap();
        let out = project_video(&mut g, &bm, &vz).unwrap();
        assert!(g.value(out).iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn project_video_shape_contract_and_width_check() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &m).unwrap();
        let v = VideoFeatureSequence::new(7, 6, vec![0.1; 42]).unwrap();
        let out = project_video(&mut g, &bm, &v).unwrap();
        assert_eq!(g.shape(out), &[7, 8]);
        let bad = VideoFeatureSequence::new(2, 5, vec![0.1; 10]).unwrap();
        assert!(matches!(
            project_video(&mut g, &bm, &bad),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn encode_video_shape_minimal_input() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let v = VideoFeatureSequence::new(1, 6, vec![0.3; 6]).unwrap();
        let c = m.infer_video(&v).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|x| x.is_finite()));
        assert_eq!(c, m.infer_video(&v).unwrap());
    }

    #[test]
    fn pooled_encoding_is_row_zero_of_full_output() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &m).unwrap();
        let mut rng = Rng::from_seed(0);
        let x = seq(&[2, 5, 7, 11]);
        let ex = embed_tokens(&mut g, &bm, &x, 0.0, &mut rng, false).unwrap();
        let full = transformer_pool_full(
            &mut g, &bm.text_head, bm.dims.pool_heads, ex, ex, 0.0, &mut rng, false,
        )
        .unwrap();
        let pooled = transformer_pool(
            &mut g, &bm.text_head, bm.dims.pool_heads, ex, ex, 0.0, &mut rng, false,
        )
        .unwrap();
        assert_eq!(g.shape(full), &[4, 8]);
        assert_eq!(g.shape(pooled), &[8]);
        assert_eq!(&g.value(full)[..8], g.value(pooled));
    }

    #[test]
    fn conditioned_encoding_with_empty_video_is_bitwise_encode_text() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let x = seq(&[2, 5, 7]);
        let empty = VideoFeatureSequence { rows: 0, cols: 6, data: vec![] };
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &m).unwrap();
        let mut rng = Rng::from_seed(0);
        let plain = encode_text(&mut g, &bm, &x, 0.0, &mut rng, false).unwrap();
        let cond = encode_text_conditioned(&mut g, &bm, &x, &empty, 0.0, &mut rng, false).unwrap();
        let a: Vec<u64> = g.value(plain).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = g.value(cond).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_on_video_changes_the_encoding() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let x = seq(&[2, 5, 7]);
        let v = VideoFeatureSequence::new(4, 6, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &m).unwrap();
        let mut rng = Rng::from_seed(0);
        let plain = encode_text(&mut g, &bm, &x, 0.0, &mut rng, false).unwrap();
        let cond = encode_text_conditioned(&mut g, &bm, &x, &v, 0.0, &mut rng, false).unwrap();
        assert_ne!(g.value(plain), g.value(cond));
    }

    #[test]
    fn freezing_marks_the_right_parameters() {
        let mut m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        m.set_freeze_below(1).unwrap();
        assert!(!m.store.get(m.token_emb).requires_grad);
        assert!(!m.store.get(m.pos_emb).requires_grad);
        for id in m.backbone_layer_params(0) {
            assert!(!m.store.get(id).requires_grad);
        }
        for id in m.backbone_layer_params(1) {
            assert!(m.store.get(id).requires_grad);
        }
        for l in &m.text_head {
            for id in layer_param_ids(l) {
                assert!(m.store.get(id).requires_grad);
            }
        }
        // Back to fully trainable.
        m.set_freeze_below(0).unwrap();
        assert!(m.store.get(m.token_emb).requires_grad);
        for id in m.backbone_layer_params(0) {
            assert!(m.store.get(id).requires_grad);
        }
        assert!(matches!(m.set_freeze_below(3), Err(Error::Config(_))));
    }

    #[test]
    fn training_mode_dropout_is_stream_deterministic() {
        let m = ModelParameters::init(&tiny_dims(), 0, 3).unwrap();
        let x = seq(&[2, 5, 7, 9]);
        let once = |purpose: &str| {
            let mut g = Graph::new();
            let bm = bind_model(&mut g, &m).unwrap();
            let mut rng = Rng::stream(11, purpose);
            let c = encode_text(&mut g, &bm, &x, 0.3, &mut rng, true).unwrap();
            g.value(c).to_vec()
        };
        assert_eq!(once("drop/item0"), once("drop/item0"));
        assert_ne!(once("drop/item0"), once("drop/item1"));
    }

    #[test]
    fn encoder_outputs_are_finite_for_random_inputs() {
        for s in 0..5 {
            let m = ModelParameters::init(&tiny_dims(), 0, s).unwrap();
            let mut r = Rng::stream(s, "inputs");
            let toks: Vec<usize> = (0..6).map(|_| r.below(20)).collect();
            let c = m.infer_text(&seq(&toks)).unwrap();
            assert!(c.iter().all(|v| v.is_finite()));
            let v = VideoFeatureSequence::new(5, 6, (0..30).map(|_| r.normal(0.0, 1.0)).collect()).unwrap();
            let cv = m.infer_video(&v).unwrap();
            assert!(cv.iter().all(|v| v.is_finite()));
        }
    }
}
