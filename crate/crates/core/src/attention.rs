//! Multi-head attention pooling over a dense feature map.
//!
//! The query comes from the spatial mean of the map; keys and values come
//! from every spatial location (optionally also from the mean token). The
//! per-head weighted sums are concatenated and sent through an output
//! projection.
//!
//! Weights are stored input-major (`in × out`), so a projection is `x · W + b`.
//!
//! Internally the query is folded into the key projection: for head `h`,
//! `q_h · (x_j W_k,h + b_k,h) = x_j · (W_k,h q_h) + q_h · b_k,h`, and since
//! attention weights sum to one, `Σ_j a_j (x_j W_v + b_v) = (Σ_j a_j x_j) W_v + b_v`.
//! Neither keys nor values are ever materialized per token.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{self, axpy, dot};
use crate::tensor::{Scalar, Tensor};

/// Frozen extractor output: an `H×W` grid of `C`-channel features stored as
/// an `(H·W)×C` matrix in row-major spatial order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap<T> {
    height: usize,
    width: usize,
    values: Tensor<T>,
}

impl<T: Scalar> DenseFeatureMap<T> {
    pub fn new(height: usize, width: usize, values: Tensor<T>) -> Result<Self> {
        let (rows, _) = values.matrix_dims("DenseFeatureMap")?;
        if height == 0 || width == 0 || rows != height * width {
            return Err(Error::dims("DenseFeatureMap", &[height, width], values.dims()));
        }
        if !values.is_finite() {
            return Err(Error::Degenerate("feature map has non-finite entries".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Accepts either `H×W×C` or an already flattened `(H·W)×C` with the
    /// grid given separately.
    pub fn from_tensor(t: Tensor<T>, grid: Option<(usize, usize)>) -> Result<Self> {
        match (t.dims(), grid) {
            (&[h, w, c], g) => match g {
                Some((gh, gw)) if (gh, gw) != (h, w) => {
                    Err(Error::dims("DenseFeatureMap grid", &[h, w], &[gh, gw]))
                }
                _ => Self::new(h, w, t.reshape(vec![h * w, c])?),
            },
            (&[_, _], Some((h, w))) => Self::new(h, w, t),
            (dims, _) => Err(Error::dims("DenseFeatureMap", dims, &[0, 0, 0])),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Feature at spatial index `j = y·W + x`.
    pub fn at(&self, j: usize) -> &[T] {
        self.values.row(j)
    }

    pub fn at_point(&self, x: usize, y: usize) -> &[T] {
        self.values.row(y * self.width + x)
    }

    /// `H×W×C` view for serialization.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.values
            .clone()
            .reshape(vec![self.height, self.width, self.channels()])
            .expect("same element count")
    }
}

/// Average of all spatial features.
pub fn mean_feature<T: Scalar>(f: &DenseFeatureMap<T>) -> Vec<T> {
    kernels::mean_rows(&f.values).expect("feature map is a matrix")
}

/// Every trainable tensor of one attention-pooling layer. Also used as the
/// gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnPoolTensors<T> {
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub c_weight: Tensor<T>,
    pub c_bias: Tensor<T>,
    /// `(H·W + 1)×C`; row 0 belongs to the mean token.
    pub pos_embed: Option<Tensor<T>>,
}

pub type AttnPoolGrads<T> = AttnPoolTensors<T>;

pub const FIELD_NAMES: [&str; 9] = [
    "q_weight",
    "q_bias",
    "k_weight",
    "k_bias",
    "v_weight",
    "v_bias",
    "c_weight",
    "c_bias",
    "positional_embedding",
];

impl<T: Scalar> AttnPoolTensors<T> {
    pub fn zeros_like(other: &Self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.dims());
        Self {
            q_weight: z(&other.q_weight),
            q_bias: z(&other.q_bias),
            k_weight: z(&other.k_weight),
            k_bias: z(&other.k_bias),
            v_weight: z(&other.v_weight),
            v_bias: z(&other.v_bias),
            c_weight: z(&other.c_weight),
            c_bias: z(&other.c_bias),
            pos_embed: other.pos_embed.as_ref().map(z),
        }
    }

    /// Named tensors in a fixed order; the positional table comes last when
    /// present.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            (FIELD_NAMES[0], &self.q_weight),
            (FIELD_NAMES[1], &self.q_bias),
            (FIELD_NAMES[2], &self.k_weight),
            (FIELD_NAMES[3], &self.k_bias),
            (FIELD_NAMES[4], &self.v_weight),
            (FIELD_NAMES[5], &self.v_bias),
            (FIELD_NAMES[6], &self.c_weight),
            (FIELD_NAMES[7], &self.c_bias),
        ];
        if let Some(p) = &self.pos_embed {
            out.push((FIELD_NAMES[8], p));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![
            (FIELD_NAMES[0], &mut self.q_weight),
            (FIELD_NAMES[1], &mut self.q_bias),
            (FIELD_NAMES[2], &mut self.k_weight),
            (FIELD_NAMES[3], &mut self.k_bias),
            (FIELD_NAMES[4], &mut self.v_weight),
            (FIELD_NAMES[5], &mut self.v_bias),
            (FIELD_NAMES[6], &mut self.c_weight),
            (FIELD_NAMES[7], &mut self.c_bias),
        ];
        if let Some(p) = &mut self.pos_embed {
            out.push((FIELD_NAMES[8], p));
        }
        out
    }

    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, src.as_slice(), dst.as_mut_slice());
        }
    }
}

/// Shape and flags used to build a fresh layer.
#[derive(Clone, Debug)]
pub struct AttnPoolConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    /// Defaults to `sqrt(embed_dim / heads)`.
    pub scale: Option<f64>,
    pub include_mean_token: bool,
    /// Grid `(H, W)` for a positional table, if one is wanted.
    pub positional: Option<(usize, usize)>,
}

/// One attention-pooling layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnPoolParams<T> {
    pub tensors: AttnPoolTensors<T>,
    heads: usize,
    scale: T,
    include_mean_token: bool,
}

pub fn default_scale(embed_dim: usize, heads: usize) -> f64 {
    (embed_dim as f64 / heads as f64).sqrt()
}

impl<T: Scalar> AttnPoolParams<T> {
    pub fn new(
        tensors: AttnPoolTensors<T>,
        heads: usize,
        scale: Option<T>,
        include_mean_token: bool,
    ) -> Result<Self> {
        let (c, e) = tensors.q_weight.matrix_dims("q_weight")?;
        let expect = |name: &'static str, t: &Tensor<T>, dims: &[usize]| {
            if t.dims() == dims {
                Ok(())
            } else {
                Err(Error::dims(name, t.dims(), dims))
            }
        };
        expect("q_bias", &tensors.q_bias, &[e])?;
        expect("k_weight", &tensors.k_weight, &[c, e])?;
        expect("k_bias", &tensors.k_bias, &[e])?;
        expect("v_weight", &tensors.v_weight, &[c, e])?;
        expect("v_bias", &tensors.v_bias, &[e])?;
        let (_, out) = tensors.c_weight.matrix_dims("c_weight")?;
        expect("c_weight", &tensors.c_weight, &[e, out])?;
        expect("c_bias", &tensors.c_bias, &[out])?;
        if let Some(p) = &tensors.pos_embed {
            let (_, pc) = p.matrix_dims("positional_embedding")?;
            if pc != c {
                return Err(Error::dims("positional_embedding", p.dims(), &[p.rows(), c]));
            }
        }
        if heads == 0 || e % heads != 0 {
            return Err(Error::config(format!(
                "embed dim {e} is not divisible by {heads} heads"
            )));
        }
        let scale = scale.unwrap_or_else(|| T::cast(default_scale(e, heads)));
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::config(format!("attention scale must be positive, got {scale}")));
        }
        Ok(Self {
            tensors,
            heads,
            scale,
            include_mean_token,
        })
    }

    /// Gaussian init with std `1/sqrt(fan_in)`, zero biases, and a
    /// positional table with std 0.02 when requested.
    pub fn random(cfg: &AttnPoolConfig, rng: &mut impl Rng) -> Result<Self> {
        let gauss = |rng: &mut dyn rand::RngCore, dims: &[usize], std: f64| -> Result<Tensor<T>> {
            let n = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            let len = dims.iter().product();
            Tensor::new(dims.to_vec(), (0..len).map(|_| T::cast(n.sample(rng))).collect())
        };
        let (c, e, o) = (cfg.channels, cfg.embed_dim, cfg.out_dim);
        let in_std = 1.0 / (c as f64).sqrt();
        let tensors = AttnPoolTensors {
            q_weight: gauss(rng, &[c, e], in_std)?,
            q_bias: Tensor::zeros(&[e]),
            k_weight: gauss(rng, &[c, e], in_std)?,
            k_bias: Tensor::zeros(&[e]),
            v_weight: gauss(rng, &[c, e], in_std)?,
            v_bias: Tensor::zeros(&[e]),
            c_weight: gauss(rng, &[e, o], 1.0 / (e as f64).sqrt())?,
            c_bias: Tensor::zeros(&[o]),
            pos_embed: match cfg.positional {
                Some((h, w)) => Some(gauss(rng, &[h * w + 1, c], 0.02)?),
                None => None,
            },
        };
        Self::new(
            tensors,
            cfg.heads,
            cfg.scale.map(T::cast),
            cfg.include_mean_token,
        )
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn include_mean_token(&self) -> bool {
        self.include_mean_token
    }

    pub fn channels(&self) -> usize {
        self.tensors.q_weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.tensors.q_weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.tensors.c_bias.len()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.heads
    }

    /// Attended tokens per head: `H·W`, plus one with the mean token.
    pub fn token_count(&self, f: &DenseFeatureMap<T>) -> usize {
        f.locations() + usize::from(self.include_mean_token)
    }

    pub fn check_input(&self, f: &DenseFeatureMap<T>) -> Result<()> {
        if f.channels() != self.channels() {
            return Err(Error::dims(
                "attention pool input",
                &[f.locations(), f.channels()],
                &[f.locations(), self.channels()],
            ));
        }
        if let Some(p) = &self.tensors.pos_embed {
            if p.rows() != f.locations() + 1 {
                return Err(Error::dims(
                    "positional_embedding vs grid",
                    p.dims(),
                    &[f.locations() + 1, f.channels()],
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self, f: &DenseFeatureMap<T>) -> Result<Vec<T>> {
        Ok(self.forward_traced(f)?.output)
    }

    /// Softmax weights, one row per head over the attended tokens. With the
    /// mean token enabled, column 0 is the mean token and column `j + 1` is
    /// spatial location `j`.
    pub fn attention_weights(&self, f: &DenseFeatureMap<T>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(f)?.weights)
    }

    /// Head-averaged attention mass falling on the given spatial cells.
    pub fn attention_mass(&self, f: &DenseFeatureMap<T>, cells: &[usize]) -> Result<T> {
        let w = self.attention_weights(f)?;
        let offset = usize::from(self.include_mean_token);
        let mut total = T::zero();
        for h in 0..self.heads {
            for &c in cells {
                if c >= f.locations() {
                    return Err(Error::Index {
                        what: "spatial cell",
                        index: c,
                        len: f.locations(),
                    });
                }
                total = total + w.at(h, c + offset);
            }
        }
        Ok(total / T::cast(self.heads as f64))
    }

    fn tokens(&self, f: &DenseFeatureMap<T>) -> (Tensor<T>, Vec<T>) {
        let mut query_src = mean_feature(f);
        let pos = self.tensors.pos_embed.as_ref();
        if let Some(p) = pos {
            axpy(T::one(), p.row(0), &mut query_src);
        }
        let c = f.channels();
        let mut data = Vec::with_capacity(self.token_count(f) * c);
        if self.include_mean_token {
            data.extend_from_slice(&query_src);
        }
        for j in 0..f.locations() {
            let start = data.len();
            data.extend_from_slice(f.at(j));
            if let Some(p) = pos {
                axpy(T::one(), p.row(j + 1), &mut data[start..]);
            }
        }
        let tokens = Tensor::new(vec![self.token_count(f), c], data).expect("token matrix");
        (tokens, query_src)
    }

    pub fn forward_traced(&self, f: &DenseFeatureMap<T>) -> Result<PoolTrace<T>> {
        self.check_input(f)?;
        let t = &self.tensors;
        let (tokens, query_src) = self.tokens(f);
        let query = kernels::add(&kernels::vecmat(&query_src, &t.q_weight)?, t.q_bias.as_slice())?;

        let dh = self.head_dim();
        let c = self.channels();
        let n_tok = tokens.rows();
        let mut key_dirs = Vec::with_capacity(self.heads);
        let mut scores = Vec::with_capacity(self.heads * n_tok);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let q_h = &query[cols.clone()];
            let dir: Vec<T> = (0..c).map(|ch| dot(&t.k_weight.row(ch)[cols.clone()], q_h)).collect();
            let shift = dot(q_h, &t.k_bias.as_slice()[cols]);
            scores.extend((0..n_tok).map(|j| (dot(tokens.row(j), &dir) + shift) / self.scale));
            key_dirs.push(dir);
        }
        let weights = kernels::softmax_rows(&Tensor::new(vec![self.heads, n_tok], scores)?)?;

        let mut pooled = Vec::with_capacity(self.heads);
        let mut heads_out = t.v_bias.as_slice().to_vec();
        for h in 0..self.heads {
            let mut g = vec![T::zero(); c];
            for (j, &a) in weights.row(h).iter().enumerate() {
                axpy(a, tokens.row(j), &mut g);
            }
            let cols = h * dh..(h + 1) * dh;
            for (ch, &gc) in g.iter().enumerate() {
                axpy(gc, &t.v_weight.row(ch)[cols.clone()], &mut heads_out[cols.clone()]);
            }
            pooled.push(g);
        }
        let output = kernels::add(&kernels::vecmat(&heads_out, &t.c_weight)?, t.c_bias.as_slice())?;
        Ok(PoolTrace {
            tokens,
            query_src,
            query,
            key_dirs,
            weights,
            pooled,
            heads_out,
            output,
        })
    }

    /// Gradient of `⟨upstream, forward(f)⟩` with respect to every tensor of
    /// the layer. Returns the forward output alongside.
    pub fn backward(&self, f: &DenseFeatureMap<T>, upstream: &[T]) -> Result<(Vec<T>, AttnPoolGrads<T>)> {
        let mut grads = AttnPoolTensors::zeros_like(&self.tensors);
        let out = self.accumulate_backward(f, upstream, &mut grads)?;
        Ok((out, grads))
    }

    /// Like [`backward`](Self::backward) but adds into existing gradients.
    pub fn accumulate_backward(
        &self,
        f: &DenseFeatureMap<T>,
        upstream: &[T],
        grads: &mut AttnPoolGrads<T>,
    ) -> Result<Vec<T>> {
        let tr = self.forward_traced(f)?;
        self.accumulate_backward_traced(f, &tr, upstream, grads)?;
        Ok(tr.output)
    }

    /// Backward pass reusing a trace from [`forward_traced`](Self::forward_traced)
    /// on the same input.
    pub fn accumulate_backward_traced(
        &self,
        f: &DenseFeatureMap<T>,
        tr: &PoolTrace<T>,
        upstream: &[T],
        grads: &mut AttnPoolGrads<T>,
    ) -> Result<()> {
        if upstream.len() != self.out_dim() {
            return Err(Error::dims("attention pool upstream", &[upstream.len()], &[self.out_dim()]));
        }
        let t = &self.tensors;
        let c = self.channels();
        let dh = self.head_dim();
        let n_tok = tr.tokens.rows();
        let need_token_grads = t.pos_embed.is_some();
        let inv_scale = T::one() / self.scale;

        axpy(T::one(), upstream, grads.c_bias.as_mut_slice());
        kernels::add_outer(&tr.heads_out, upstream, &mut grads.c_weight);
        let d_heads: Vec<T> = (0..self.embed_dim()).map(|i| dot(t.c_weight.row(i), upstream)).collect();

        let mut d_query = vec![T::zero(); self.embed_dim()];
        let mut d_tokens = need_token_grads.then(|| Tensor::<T>::zeros(&[n_tok, c]));
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let d_oh = &d_heads[cols.clone()];
            let g = &tr.pooled[h];
            axpy(T::one(), d_oh, &mut grads.v_bias.as_mut_slice()[cols.clone()]);
            let mut d_g = vec![T::zero(); c];
            for ch in 0..c {
                axpy(g[ch], d_oh, &mut grads.v_weight.row_mut(ch)[cols.clone()]);
                d_g[ch] = dot(&t.v_weight.row(ch)[cols.clone()], d_oh);
            }

            let a = tr.weights.row(h);
            let d_a: Vec<T> = (0..n_tok).map(|j| dot(tr.tokens.row(j), &d_g)).collect();
            let d_s: Vec<T> = kernels::softmax_backward(a, &d_a)
                .into_iter()
                .map(|v| v * inv_scale)
                .collect();

            let dir = &tr.key_dirs[h];
            let mut d_dir = vec![T::zero(); c];
            for (j, &ds) in d_s.iter().enumerate() {
                axpy(ds, tr.tokens.row(j), &mut d_dir);
            }
            if let Some(dt) = d_tokens.as_mut() {
                for j in 0..n_tok {
                    let row = dt.row_mut(j);
                    axpy(a[j], &d_g, row);
                    axpy(d_s[j], dir, row);
                }
            }

            let q_h = &tr.query[cols.clone()];
            let ds_total: T = d_s.iter().copied().sum();
            axpy(ds_total, q_h, &mut grads.k_bias.as_mut_slice()[cols.clone()]);
            axpy(ds_total, &t.k_bias.as_slice()[cols.clone()], &mut d_query[cols.clone()]);
            for ch in 0..c {
                axpy(d_dir[ch], q_h, &mut grads.k_weight.row_mut(ch)[cols.clone()]);
                axpy(d_dir[ch], &t.k_weight.row(ch)[cols.clone()], &mut d_query[cols.clone()]);
            }
        }

        axpy(T::one(), &d_query, grads.q_bias.as_mut_slice());
        kernels::add_outer(&tr.query_src, &d_query, &mut grads.q_weight);

        if let (Some(dp), Some(dt)) = (grads.pos_embed.as_mut(), d_tokens) {
            let d_src: Vec<T> = (0..c).map(|ch| dot(t.q_weight.row(ch), &d_query)).collect();
            axpy(T::one(), &d_src, dp.row_mut(0));
            let offset = usize::from(self.include_mean_token);
            if self.include_mean_token {
                axpy(T::one(), dt.row(0), dp.row_mut(0));
            }
            for j in 0..f.locations() {
                axpy(T::one(), dt.row(j + offset), dp.row_mut(j + 1));
            }
        }
        Ok(())
    }
}

/// Intermediates of one forward pass, reusable by the backward pass.
pub struct PoolTrace<T> {
    tokens: Tensor<T>,
    query_src: Vec<T>,
    query: Vec<T>,
    key_dirs: Vec<Vec<T>>,
    weights: Tensor<T>,
    pooled: Vec<Vec<T>>,
    heads_out: Vec<T>,
    output: Vec<T>,
}

impl<T> PoolTrace<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
}
