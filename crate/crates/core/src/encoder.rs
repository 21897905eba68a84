//! Compact function encoder: token lookup, one optional single-head
//! self-attention block with a residual connection, mean pooling over
//! non-PAD positions, an optional affine projection head, and L2
//! normalization. The backward pass is written out by hand.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DEFAULT_MAX_INPUT_LENGTH, PAD_ID};
use crate::embedding::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub use_attention: bool,
    pub use_projection_head: bool,
    pub head_dim: usize,
    pub max_input_length: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 128,
            use_attention: true,
            use_projection_head: false,
            head_dim: 128,
            max_input_length: DEFAULT_MAX_INPUT_LENGTH,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 {
            return Err(Error::InvalidConfig("vocab_size must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig("embed_dim must be >= 2".into()));
        }
        if self.use_projection_head && self.head_dim < 2 {
            return Err(Error::InvalidConfig("head_dim must be >= 2".into()));
        }
        if self.max_input_length < 1 {
            return Err(Error::InvalidConfig("max_input_length must be >= 1".into()));
        }
        Ok(())
    }

    /// Dimension of the vector the contrastive loss sees.
    pub fn output_dim(&self) -> usize {
        if self.use_projection_head {
            self.head_dim
        } else {
            self.embed_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// `embed_dim x head_dim`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Trainable state. Row [`PAD_ID`] of the embedding table is zero and
/// never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    pub embedding: Array2<f64>,
    pub attention: Option<AttentionWeights>,
    pub head: Option<ProjectionHead>,
}

/// Same layout as [`EncoderParams`], holding dL/dparam.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub embedding: Array2<f64>,
    pub attention: Option<AttentionWeights>,
    pub head: Option<ProjectionHead>,
}

/// Which representation to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Through the projection head when one is configured.
    Training,
    /// Pooled representation before the head.
    Representation,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl EncoderParams {
    /// Seeded uniform initialization in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut embedding = uniform_matrix(&mut rng, config.vocab_size, d, bound);
        embedding.row_mut(PAD_ID as usize).fill(0.0);
        let attention = config.use_attention.then(|| AttentionWeights {
            query: uniform_matrix(&mut rng, d, d, bound),
            key: uniform_matrix(&mut rng, d, d, bound),
            value: uniform_matrix(&mut rng, d, d, bound),
        });
        let head = config.use_projection_head.then(|| ProjectionHead {
            weight: uniform_matrix(&mut rng, d, config.head_dim, bound),
            bias: Array1::zeros(config.head_dim),
        });
        Ok(Self {
            config: config.clone(),
            embedding,
            attention,
            head,
        })
    }

    /// Assembles parameters from raw tensors, checking shapes and finiteness.
    pub fn from_parts(
        config: EncoderConfig,
        embedding: Array2<f64>,
        attention: Option<AttentionWeights>,
        head: Option<ProjectionHead>,
    ) -> Result<Self> {
        config.validate()?;
        let p = Self {
            config,
            embedding,
            attention,
            head,
        };
        let expected = p.config.tensor_shapes();
        let actual: Vec<(&str, usize)> = p.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
        let expected: Vec<(&str, usize)> = expected.iter().map(|(n, r, c)| (*n, r * c)).collect();
        if actual != expected || p.embedding.dim() != (p.config.vocab_size, p.config.embed_dim) {
            return Err(Error::ShapeMismatch(format!(
                "tensors {actual:?} do not match config {expected:?}"
            )));
        }
        if p.tensors().iter().any(|(_, t)| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(p)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Flat views in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        tensor_list(&self.embedding, self.attention.as_ref(), self.head.as_ref())
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        tensor_list_mut(&mut self.embedding, self.attention.as_mut(), self.head.as_mut())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_input_length {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds max_input_length {}",
                tokens.len(),
                self.config.max_input_length
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        if tokens.iter().all(|&t| t == PAD_ID) {
            return Err(Error::InvalidInput("sequence is all padding".into()));
        }
        Ok(())
    }

    fn forward(&self, tokens: &[u32], view: View) -> Result<(Embedding, Cache)> {
        self.check_tokens(tokens)?;
        let d = self.config.embed_dim;
        let len = tokens.len();
        let mut x = Array2::<f64>::zeros((len, d));
        for (t, &id) in tokens.iter().enumerate() {
            x.row_mut(t).assign(&self.embedding.row(id as usize));
        }
        let live: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        let n_live = live.iter().filter(|&&l| l).count() as f64;

        let (h, attn) = match &self.attention {
            Some(w) => {
                let q = x.dot(&w.query);
                let k = x.dot(&w.key);
                let v = x.dot(&w.value);
                let scale = 1.0 / (d as f64).sqrt();
                let mut a = q.dot(&k.t());
                for mut row in a.rows_mut() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if live[j] && *s > max {
                            max = *s;
                        }
                    }
                    let mut sum = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if live[j] { (*s - max).exp() } else { 0.0 };
                        sum += *s;
                    }
                    row.mapv_inplace(|e| e / sum);
                }
                let h = &x + &a.dot(&v);
                (h, Some(AttnCache { q, k, v, a }))
            }
            None => (x.clone(), None),
        };

        let mut pooled = Array1::<f64>::zeros(d);
        for (t, row) in h.rows().into_iter().enumerate() {
            if live[t] {
                pooled += &row;
            }
        }
        pooled /= n_live;

        let use_head = view == View::Training && self.head.is_some();
        let y = match (&self.head, use_head) {
            (Some(head), true) => pooled.dot(&head.weight) + &head.bias,
            _ => pooled.clone(),
        };
        let norm = y.dot(&y).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteActivation);
        }
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        let z = &y / norm;
        let emb = Embedding::normalize(y.to_vec())?;
        Ok((
            emb,
            Cache {
                tokens: tokens.to_vec(),
                x,
                live,
                n_live,
                attn,
                pooled,
                used_head: use_head,
                z,
                norm,
            },
        ))
    }

    /// Training-view embedding of one sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<Embedding> {
        self.forward(tokens, View::Training).map(|(e, _)| e)
    }

    /// Pre-head embedding used for evaluation.
    pub fn represent(&self, tokens: &[u32]) -> Result<Embedding> {
        self.forward(tokens, View::Representation).map(|(e, _)| e)
    }

    pub fn encode_view(&self, tokens: &[u32], view: View) -> Result<Embedding> {
        self.forward(tokens, view).map(|(e, _)| e)
    }

    /// Encodes every sequence; output order follows input order.
    pub fn encode_batch<S: AsRef<[u32]> + Sync>(&self, batch: &[S]) -> Result<Vec<Embedding>> {
        self.encode_batch_view(batch, View::Training)
    }

    pub fn encode_batch_view<S: AsRef<[u32]> + Sync>(&self, batch: &[S], view: View) -> Result<Vec<Embedding>> {
        batch
            .par_iter()
            .map(|s| self.encode_view(s.as_ref(), view))
            .collect::<Vec<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| at_index(i, e)))
            .collect()
    }

    /// Forward pass that keeps the activations needed by
    /// [`EncoderParams::backward_cached`].
    pub fn forward_batch<S: AsRef<[u32]> + Sync>(&self, batch: &[S]) -> Result<(Vec<Embedding>, Vec<Cache>)> {
        let results: Vec<Result<(Embedding, Cache)>> = batch
            .par_iter()
            .map(|s| self.forward(s.as_ref(), View::Training))
            .collect();
        let mut embs = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for (i, r) in results.into_iter().enumerate() {
            let (e, c) = r.map_err(|e| at_index(i, e))?;
            embs.push(e);
            caches.push(c);
        }
        Ok((embs, caches))
    }

    pub fn zero_gradients(&self) -> EncoderGradients {
        EncoderGradients {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            attention: self.attention.as_ref().map(|w| AttentionWeights {
                query: Array2::zeros(w.query.raw_dim()),
                key: Array2::zeros(w.key.raw_dim()),
                value: Array2::zeros(w.value.raw_dim()),
            }),
            head: self.head.as_ref().map(|h| ProjectionHead {
                weight: Array2::zeros(h.weight.raw_dim()),
                bias: Array1::zeros(h.bias.raw_dim()),
            }),
        }
    }

    /// Gradients of a scalar loss given dL/dz for each training-view output.
    pub fn backward<S: AsRef<[u32]> + Sync>(&self, batch: &[S], upstream: &[Vec<f64>]) -> Result<EncoderGradients> {
        if batch.len() != upstream.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} sequences but {} upstream gradients",
                batch.len(),
                upstream.len()
            )));
        }
        let (_, caches) = self.forward_batch(batch)?;
        self.backward_cached(&caches, upstream)
    }

    pub fn backward_cached(&self, caches: &[Cache], upstream: &[Vec<f64>]) -> Result<EncoderGradients> {
        if caches.len() != upstream.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} cached forwards but {} upstream gradients",
                caches.len(),
                upstream.len()
            )));
        }
        let out_dim = self.config.output_dim();
        let mut grads = self.zero_gradients();
        for (i, (cache, g)) in caches.iter().zip(upstream).enumerate() {
            let expect = if cache.used_head { out_dim } else { self.config.embed_dim };
            if g.len() != expect {
                return Err(Error::ShapeMismatch(format!(
                    "upstream gradient {i} has length {} (expected {expect})",
                    g.len()
                )));
            }
            self.backward_one(cache, ArrayView1::from(g.as_slice()), &mut grads);
        }
        grads.embedding.row_mut(PAD_ID as usize).fill(0.0);
        Ok(grads)
    }

    fn backward_one(&self, c: &Cache, gz: ArrayView1<f64>, grads: &mut EncoderGradients) {
        let d = self.config.embed_dim;
        // d(y/|y|)/dy = (I - z z^T) / |y|
        let gy = (&gz - &(&c.z * c.z.dot(&gz))) / c.norm;

        let gp = match (&self.head, c.used_head) {
            (Some(head), true) => {
                let gh = grads.head.as_mut().expect("head gradients allocated with head");
                let outer = c
                    .pooled
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&gy.view().insert_axis(Axis(0)));
                gh.weight += &outer;
                gh.bias += &gy;
                head.weight.dot(&gy)
            }
            _ => gy,
        };

        let len = c.tokens.len();
        let mut g_h = Array2::<f64>::zeros((len, d));
        let share = &gp / c.n_live;
        for t in 0..len {
            if c.live[t] {
                g_h.row_mut(t).assign(&share);
            }
        }

        let mut g_x = g_h.clone();
        if let (Some(w), Some(ac)) = (&self.attention, &c.attn) {
            let ga = grads.attention.as_mut().expect("attention gradients allocated with attention");
            let g_a = g_h.dot(&ac.v.t());
            let g_v = ac.a.t().dot(&g_h);
            let scale = 1.0 / (d as f64).sqrt();
            let mut g_s = &ac.a * &g_a;
            for (mut row, a_row) in g_s.rows_mut().into_iter().zip(ac.a.rows()) {
                let inner: f64 = row.sum();
                row.zip_mut_with(&a_row, |gs, &a| *gs = (*gs - a * inner) * scale);
            }
            let g_q = g_s.dot(&ac.k);
            let g_k = g_s.t().dot(&ac.q);
            ga.query += &c.x.t().dot(&g_q);
            ga.key += &c.x.t().dot(&g_k);
            ga.value += &c.x.t().dot(&g_v);
            g_x += &g_q.dot(&w.query.t());
            g_x += &g_k.dot(&w.key.t());
            g_x += &g_v.dot(&w.value.t());
        }

        for (t, &id) in c.tokens.iter().enumerate() {
            let mut row = grads.embedding.slice_mut(s![id as usize, ..]);
            row += &g_x.row(t);
        }
    }
}

fn at_index(index: usize, e: Error) -> Error {
    Error::AtIndex {
        index,
        source: Box::new(e),
    }
}

fn tensor_list<'a>(
    embedding: &'a Array2<f64>,
    attention: Option<&'a AttentionWeights>,
    head: Option<&'a ProjectionHead>,
) -> Vec<(&'static str, &'a [f64])> {
    let flat = |a: &'a Array2<f64>| a.as_slice().expect("standard layout");
    let mut out = vec![("embedding", flat(embedding))];
    if let Some(w) = attention {
        out.push(("attention.query", flat(&w.query)));
        out.push(("attention.key", flat(&w.key)));
        out.push(("attention.value", flat(&w.value)));
    }
    if let Some(h) = head {
        out.push(("head.weight", flat(&h.weight)));
        out.push(("head.bias", h.bias.as_slice().expect("standard layout")));
    }
    out
}

fn tensor_list_mut<'a>(
    embedding: &'a mut Array2<f64>,
    attention: Option<&'a mut AttentionWeights>,
    head: Option<&'a mut ProjectionHead>,
) -> Vec<(&'static str, &'a mut [f64])> {
    let mut out = vec![("embedding", embedding.as_slice_mut().expect("standard layout"))];
    if let Some(w) = attention {
        out.push(("attention.query", w.query.as_slice_mut().expect("standard layout")));
        out.push(("attention.key", w.key.as_slice_mut().expect("standard layout")));
        out.push(("attention.value", w.value.as_slice_mut().expect("standard layout")));
    }
    if let Some(h) = head {
        out.push(("head.weight", h.weight.as_slice_mut().expect("standard layout")));
        out.push(("head.bias", h.bias.as_slice_mut().expect("standard layout")));
    }
    out
}

impl EncoderConfig {
    /// (name, rows, cols) for each tensor in checkpoint order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let d = self.embed_dim;
        let mut out = vec![("embedding", self.vocab_size, d)];
        if self.use_attention {
            out.push(("attention.query", d, d));
            out.push(("attention.key", d, d));
            out.push(("attention.value", d, d));
        }
        if self.use_projection_head {
            out.push(("head.weight", d, self.head_dim));
            out.push(("head.bias", 1, self.head_dim));
        }
        out
    }
}

impl EncoderGradients {
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        tensor_list(&self.embedding, self.attention.as_ref(), self.head.as_ref())
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        tensor_list_mut(&mut self.embedding, self.attention.as_mut(), self.head.as_mut())
    }

    /// Largest absolute entry across all tensors.
    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    tokens: Vec<u32>,
    x: Array2<f64>,
    live: Vec<bool>,
    n_live: f64,
    attn: Option<AttnCache>,
    pooled: Array1<f64>,
    used_head: bool,
    z: Array1<f64>,
    norm: f64,
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{dot, l2_norm};
    use proptest::prelude::*;

    fn cfg(vocab: usize, d: usize, attention: bool, head: bool) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab,
            embed_dim: d,
            use_attention: attention,
            use_projection_head: head,
            head_dim: 5,
            max_input_length: 16,
            seed: 7,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_pad_row() {
        let c = EncoderConfig {
            seed: 42,
            ..EncoderConfig::new(200)
        };
        let a = EncoderParams::init(&c).unwrap();
        let b = EncoderParams::init(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embedding.dim(), (200, 128));
        assert!(a.embedding.row(0).iter().all(|&x| x == 0.0));
        let bound = 1.0 / 128f64.sqrt();
        assert!(a.embedding.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn invalid_configs() {
        assert!(EncoderParams::init(&cfg(10, 1, false, false)).is_err());
        let mut c = cfg(10, 4, false, true);
        c.head_dim = 1;
        assert!(EncoderParams::init(&c).is_err());
        c.use_projection_head = false;
        c.max_input_length = 0;
        assert!(EncoderParams::init(&c).is_err());
    }

    #[test]
    fn single_token_is_normalized_row() {
        let p = EncoderParams::init(&cfg(10, 6, false, false)).unwrap();
        let e = p.encode(&[3]).unwrap();
        let row = p.embedding.row(3).to_vec();
        let n = l2_norm(&row);
        for (a, b) in e.iter().zip(&row) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn two_tokens_mean_closed_form() {
        let p = EncoderParams::init(&cfg(10, 6, false, false)).unwrap();
        let e = p.encode(&[3, 5]).unwrap();
        let mean: Vec<f64> = (0..6).map(|j| (p.embedding[[3, j]] + p.embedding[[5, j]]) / 2.0).collect();
        let n = l2_norm(&mean);
        for (a, b) in e.iter().zip(&mean) {
            assert!((a - b / n).abs() < 1e-14);
        }
    }

    #[test]
    fn pad_positions_are_ignored_when_pooling() {
        let p = EncoderParams::init(&cfg(10, 6, true, false)).unwrap();
        let a = p.encode(&[3, 5]).unwrap();
        let b = p.encode(&[3, PAD_ID, 5, PAD_ID]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_errors() {
        let p = EncoderParams::init(&cfg(10, 4, true, false)).unwrap();
        assert!(p.encode(&[]).is_err());
        assert!(matches!(p.encode(&[10]), Err(Error::TokenOutOfRange { id: 10, .. })));
        assert!(p.encode(&[1; 17]).is_err());
        assert!(matches!(
            p.encode_batch(&[vec![2], vec![]]),
            Err(Error::AtIndex { index: 1, .. })
        ));
    }

    #[test]
    fn head_changes_training_view_only() {
        let p = EncoderParams::init(&cfg(10, 4, true, true)).unwrap();
        assert_eq!(p.encode(&[2, 3]).unwrap().dim(), 5);
        let rep = p.represent(&[2, 3]).unwrap();
        assert_eq!(rep.dim(), 4);
        let mut no_head = p.clone();
        no_head.head = None;
        no_head.config.use_projection_head = false;
        assert_eq!(no_head.encode(&[2, 3]).unwrap(), rep);
    }

    #[test]
    fn order_sensitivity_follows_attention() {
        let plain = EncoderParams::init(&cfg(10, 6, false, false)).unwrap();
        let a = plain.encode(&[2, 3, 4]).unwrap();
        let b = plain.encode(&[4, 2, 3]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        // Residual attention with identical keys for repeated tokens is
        // still order-sensitive through the query rows it pools.
        let mut attn = EncoderParams::init(&cfg(10, 6, true, false)).unwrap();
        attn.attention.as_mut().unwrap().query *= 40.0;
        let a = attn.encode(&[2, 3, 3, 4]).unwrap();
        let b = attn.encode(&[4, 3, 2, 2]).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = EncoderParams::init(&cfg(10, 4, true, true)).unwrap();
        let batch = vec![vec![2, 3], vec![4]];
        let g = p.backward(&batch, &[vec![0.0; 5], vec![0.0; 5]]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(p.backward(&batch, &[vec![0.0; 5]]).is_err());
        assert!(p.backward(&batch, &[vec![0.0; 4], vec![0.0; 4]]).is_err());
    }

    /// Scalar probe L = sum_i <c_i, encode(seq_i)>; its gradient w.r.t.
    /// parameters is what `backward` returns for upstream c_i.
    fn probe_loss(p: &EncoderParams, batch: &[Vec<u32>], dirs: &[Vec<f64>]) -> f64 {
        batch
            .iter()
            .zip(dirs)
            .map(|(s, c)| dot(&p.encode(s).unwrap(), c))
            .sum()
    }

    fn check_fd(p: &EncoderParams, batch: &[Vec<u32>], dirs: &[Vec<f64>]) -> f64 {
        let analytic = p.backward(batch, dirs).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let names: Vec<&str> = p.tensors().iter().map(|(n, _)| *n).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = p.tensors()[ti].1.len();
            for k in 0..len {
                if *name == "embedding" && k < p.config.embed_dim {
                    assert_eq!(analytic.tensors()[ti].1[k], 0.0);
                    continue;
                }
                let mut plus = p.clone();
                plus.tensors_mut()[ti].1[k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].1[k] -= h;
                let fd = (probe_loss(&plus, batch, dirs) - probe_loss(&minus, batch, dirs)) / (2.0 * h);
                let an = analytic.tensors()[ti].1[k];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = EncoderParams::init(&cfg(6, 8, true, true)).unwrap();
        let batch = vec![vec![2, 3, 5], vec![4, 0, 2]];
        let dirs = vec![vec![0.3, -0.2, 0.5, 0.1, -0.7], vec![-0.4, 0.6, 0.2, -0.1, 0.3]];
        assert!(check_fd(&p, &batch, &dirs) < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_is_unit_norm(seed in any::<u64>(), toks in proptest::collection::vec(1u32..12, 1..16), attn in any::<bool>(), head in any::<bool>()) {
            let mut c = cfg(12, 6, attn, head);
            c.seed = seed;
            let p = EncoderParams::init(&c).unwrap();
            let e = p.encode(&toks).unwrap();
            prop_assert!((l2_norm(&e) - 1.0).abs() <= 1e-6);
            prop_assert_eq!(e.clone(), p.encode(&toks).unwrap());
        }

        #[test]
        fn gradient_check_small_configs(seed in any::<u64>(), d in 2usize..8, len in 1usize..6, attn in any::<bool>(), head in any::<bool>()) {
            let mut c = cfg(7, d, attn, head);
            c.seed = seed;
            let p = EncoderParams::init(&c).unwrap();
            let seq: Vec<u32> = (0..len).map(|i| 2 + ((seed as usize + 3 * i) % 5) as u32).collect();
            let out = c.output_dim();
            let dir: Vec<f64> = (0..out).map(|j| ((j * 7 + 3) % 5) as f64 / 5.0 - 0.4).collect();
            prop_assert!(check_fd(&p, &[seq], &[dir]) < 1e-4);
        }
    }
}
