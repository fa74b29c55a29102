//! Mixture encoder: molecule-wise multi-head self-attention over a padded
//! set of molecule embeddings, permutation-invariant pooling, and heads that
//! turn two mixture embeddings into a perceptual distance.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{mask_rows, Graph, Reduce, Var};
use crate::nn::{Activation, Linear};
use crate::params::{glorot, Param, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHEMIX_GROUP: &str = "chemix";
/// Lower bound on the scaled-cosine slope after each optimizer step.
pub const MIN_SLOPE: f64 = 1e-3;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(AttentionKind { Softmax => "softmax", Sigmoidal => "sigmoidal" });
named_enum!(Aggregation { Mean => "mean", Pna => "pna", Attention => "attention" });
named_enum!(
    /// How two mixture embeddings become a distance in [0, 1].
    HeadKind {
        ScaledCosine => "scaled_cosine",
        Cosine => "cosine",
        MeanLinear => "mean_linear",
        ConcatLinear => "concat_linear",
        PnaLinear => "pna_linear",
    }
);
named_enum!(LossKind { Mae => "mae", Mse => "mse" });

impl HeadKind {
    /// Whether swapping the two mixtures can change the prediction.
    pub fn is_ordered(self) -> bool {
        self == HeadKind::ConcatLinear
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChemixConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub attention_layers: usize,
    pub heads: usize,
    pub attention: AttentionKind,
    pub aggregation: Aggregation,
    pub head: HeadKind,
    pub mlp_head: bool,
    pub activation: Activation,
    pub dropout: f64,
    pub lr: f64,
    pub loss: LossKind,
    /// Freeze the head bias at zero.
    pub zero_bias: bool,
}

impl Default for ChemixConfig {
    fn default() -> Self {
        ChemixConfig {
            input_dim: 196,
            embed_dim: 96,
            attention_layers: 1,
            heads: 8,
            attention: AttentionKind::Sigmoidal,
            aggregation: Aggregation::Pna,
            head: HeadKind::ScaledCosine,
            mlp_head: false,
            activation: Activation::Hardtanh,
            dropout: 0.1,
            lr: 8e-5,
            loss: LossKind::Mae,
            zero_bias: false,
        }
    }
}

impl ChemixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::Config("mixture encoder dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn wiring(&self) -> Vec<String> {
        vec![
            format!("input projection {} -> {}", self.input_dim, self.embed_dim),
            format!(
                "{} x [{}-head {} self-attention + residual, position-wise {} feed-forward + residual, query mask]",
                self.attention_layers, self.heads, self.attention, self.activation.as_str()
            ),
            match self.aggregation {
                Aggregation::Pna => "pooling: masked [mean, std, min, max] -> linear".into(),
                Aggregation::Mean => "pooling: masked mean".into(),
                Aggregation::Attention => "pooling: learned-query softmax attention".into(),
            },
            format!("head: {} (cosine distance is 1 - cos)", self.head),
        ]
    }
}

/// Padded layout of several mixtures, each a list of rows of a molecule
/// embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureLayout {
    pub batch: usize,
    pub width: usize,
    pub slots: Vec<Option<usize>>,
    pub mask: Vec<bool>,
    pub sizes: Vec<usize>,
}

impl MixtureLayout {
    /// Pads every mixture to the largest one, or to `pad_to` when given.
    pub fn new(mixtures: &[&[usize]], pad_to: Option<usize>) -> Result<Self> {
        let largest = mixtures.iter().map(|m| m.len()).max().unwrap_or(0);
        if let Some(i) = mixtures.iter().position(|m| m.is_empty()) {
            return Err(Error::op("mixture_layout", format!("mixture {i} is empty")));
        }
        let width = pad_to.unwrap_or(largest);
        if width < largest {
            return Err(Error::op("mixture_layout", format!("cannot pad {largest} molecules to {width}")));
        }
        let mut slots = Vec::with_capacity(mixtures.len() * width);
        let mut mask = Vec::with_capacity(mixtures.len() * width);
        for m in mixtures {
            for j in 0..width {
                slots.push(m.get(j).copied());
                mask.push(j < m.len());
            }
        }
        Ok(MixtureLayout {
            batch: mixtures.len(),
            width,
            slots,
            mask,
            sizes: mixtures.iter().map(|m| m.len()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub slope: Option<String>,
    pub bias: Option<String>,
    pub linear: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Chemix {
    pub config: ChemixConfig,
    pub project: Linear,
    pub layers: Vec<AttentionLayer>,
    pub pna_project: Option<Linear>,
    pub pool_query: Option<String>,
    pub mlp: Option<(Linear, Linear)>,
    pub head: Head,
}

/// Mixture embeddings plus the per-layer attention weights `[B*heads, M, M]`.
pub struct Encoded {
    pub mixtures: Var,
    pub attention: Vec<Var>,
}

fn scalar_param<T: Scalar>(value: f64, trainable: bool, min: Option<f64>) -> Param<T> {
    let mut p = Param::new(Tensor::scalar(T::of(value)), CHEMIX_GROUP);
    p.trainable = trainable;
    p.min = min;
    p
}

impl Chemix {
    /// Registers parameters under `chemix.` in the `chemix` group.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ChemixConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let g = CHEMIX_GROUP;
        let project = Linear::new(store, "chemix.project", config.input_dim, d, g, rng)?;
        let mut layers = Vec::new();
        for l in 0..config.attention_layers {
            let n = |s: &str| format!("chemix.attention{l}.{s}");
            layers.push(AttentionLayer {
                query: Linear::new(store, &n("query"), d, d, g, rng)?,
                key: Linear::new(store, &n("key"), d, d, g, rng)?,
                value: Linear::new(store, &n("value"), d, d, g, rng)?,
                out: Linear::new(store, &n("out"), d, d, g, rng)?,
                ff_in: Linear::new(store, &n("ff_in"), d, d, g, rng)?,
                ff_out: Linear::new(store, &n("ff_out"), d, d, g, rng)?,
            });
        }
        let pna_project = match config.aggregation {
            Aggregation::Pna => Some(Linear::new(store, "chemix.pool.pna", 4 * d, d, g, rng)?),
            _ => None,
        };
        let pool_query = match config.aggregation {
            Aggregation::Attention => {
                store.add("chemix.pool.query", glorot(d, 1, rng), g)?;
                Some("chemix.pool.query".to_string())
            }
            _ => None,
        };
        let mlp = if config.mlp_head {
            Some((
                Linear::new(store, "chemix.mlp.in", d, d, g, rng)?,
                Linear::new(store, "chemix.mlp.out", d, d, g, rng)?,
            ))
        } else {
            None
        };
        let head = Head::new(store, config.head, d, config.zero_bias, rng)?;
        Ok(Chemix { config, project, layers, pna_project, pool_query, mlp, head })
    }

    /// Encodes every mixture of `layout`; `molecules` is `[U, input_dim]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        molecules: Var,
        layout: &MixtureLayout,
    ) -> Result<Encoded> {
        let c = &self.config;
        let (b, m, d) = (layout.batch, layout.width, c.embed_dim);
        let x0 = g.gather_rows(molecules, &layout.slots)?;
        let mut x = self.project.forward(g, store, x0)?;
        let query_mask = g.constant(Tensor::from_fn(&[b * m], |i| {
            if layout.mask[i] {
                T::one()
            } else {
                T::zero()
            }
        }));
        let mut attention = Vec::new();
        for layer in &self.layers {
            let (y, w) = self.attend(g, store, layer, x, layout)?;
            attention.push(w);
            let y = g.dropout(y, c.dropout)?;
            x = g.add(x, y)?;
            let f = layer.ff_in.forward(g, store, x)?;
            let f = c.activation.apply(g, f)?;
            let f = layer.ff_out.forward(g, store, f)?;
            let f = g.dropout(f, c.dropout)?;
            x = g.add(x, f)?;
            x = g.mul_rows(x, query_mask)?;
        }
        let mut z = match c.aggregation {
            Aggregation::Mean => {
                let x3 = g.reshape(x, &[b, m, d])?;
                g.masked_reduce(x3, &layout.mask, Reduce::Mean)?
            }
            Aggregation::Pna => {
                let x3 = g.reshape(x, &[b, m, d])?;
                let mut parts = Vec::with_capacity(4);
                for kind in [Reduce::Mean, Reduce::Std, Reduce::Min, Reduce::Max] {
                    parts.push(g.masked_reduce(x3, &layout.mask, kind)?);
                }
                let cat = g.concat(&parts, 1)?;
                self.pna_project.as_ref().expect("pna projection").forward(g, store, cat)?
            }
            Aggregation::Attention => {
                let q = g.param(store, self.pool_query.as_ref().expect("pool query"))?;
                let (rows, seg) = mask_rows(&layout.mask, m);
                let valid = g.gather_rows(x, &rows)?;
                let s = g.matmul(valid, q)?;
                let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
                let w = g.segment_softmax(s, &seg, b)?;
                let weighted = g.mul_rows(valid, w)?;
                g.segment_reduce(weighted, &seg, b, Reduce::Sum)?
            }
        };
        if let Some((lin_in, lin_out)) = &self.mlp {
            let h = lin_in.forward(g, store, z)?;
            let h = c.activation.apply(g, h)?;
            z = lin_out.forward(g, store, h)?;
        }
        Ok(Encoded { mixtures: z, attention })
    }

    /// Multi-head self-attention among the molecules of each mixture.
    fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layer: &AttentionLayer,
        x: Var,
        layout: &MixtureLayout,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let (b, m, h) = (layout.batch, layout.width, c.heads);
        let dk = c.embed_dim / h;
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, m, h, dk])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * h, m, dk])
        };
        let q = layer.query.forward(g, store, x)?;
        let q = split(g, q)?;
        let k = layer.key.forward(g, store, x)?;
        let k = split(g, k)?;
        let v = layer.value.forward(g, store, x)?;
        let mut v = split(g, v)?;
        let logits = g.bmm(q, k, true)?;
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt())?;
        let key_mask: Vec<bool> = (0..b * h * m * m)
            .map(|i| {
                let batch = i / (h * m * m);
                layout.mask[batch * m + i % m]
            })
            .collect();
        let weights = match c.attention {
            AttentionKind::Softmax => g.masked_softmax(logits, &key_mask)?,
            AttentionKind::Sigmoidal => {
                let s = g.sigmoid(logits)?;
                let keep = g.constant(Tensor::from_fn(&[b * h, m, m], |i| {
                    if key_mask[i] {
                        T::one()
                    } else {
                        T::zero()
                    }
                }));
                v = g.relu(v)?;
                g.mul(s, keep)?
            }
        };
        let y = g.bmm(weights, v, false)?;
        let y = g.reshape(y, &[b, h, m, dk])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b * m, c.embed_dim])?;
        let y = layer.out.forward(g, store, y)?;
        Ok((y, weights))
    }

    /// Distances `[P]` for pairs of rows of the mixture embeddings.
    pub fn predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mixtures: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let a = g.gather_rows(mixtures, &pairs.iter().map(|p| Some(p.0)).collect::<Vec<_>>())?;
        let b = g.gather_rows(mixtures, &pairs.iter().map(|p| Some(p.1)).collect::<Vec<_>>())?;
        self.head.distance(g, store, a, b)
    }

    /// Head-averaged attention weights `[n, n]` of layer `layer` for mixture
    /// `index` of an encoded layout.
    pub fn attention_map<T: Scalar>(
        &self,
        g: &Graph<T>,
        encoded: &Encoded,
        layout: &MixtureLayout,
        index: usize,
        layer: usize,
    ) -> Vec<Vec<f64>> {
        let w = g.value(encoded.attention[layer]).data();
        let (h, m) = (self.config.heads, layout.width);
        let n = layout.sizes[index];
        let mut map = vec![vec![0.0; n]; n];
        for head in 0..h {
            let base = (index * h + head) * m * m;
            for (i, row) in map.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += w[base + i * m + j].as_f64() / h as f64;
                }
            }
        }
        map
    }
}

impl Head {
    fn new<T: Scalar>(store: &mut ParamStore<T>, kind: HeadKind, d: usize, zero_bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut head = Head { kind, slope: None, bias: None, linear: None };
        let bias_value = if zero_bias { 0.0 } else { 0.5 };
        match kind {
            HeadKind::ScaledCosine => {
                store.insert("chemix.head.slope", scalar_param(1.0, true, Some(MIN_SLOPE)))?;
                store.insert("chemix.head.bias", scalar_param(bias_value, !zero_bias, None))?;
                head.slope = Some("chemix.head.slope".into());
                head.bias = Some("chemix.head.bias".into());
            }
            HeadKind::Cosine => {}
            HeadKind::MeanLinear | HeadKind::ConcatLinear | HeadKind::PnaLinear => {
                let fan_in = match kind {
                    HeadKind::MeanLinear => d,
                    HeadKind::ConcatLinear => 2 * d,
                    _ => 4 * d,
                };
                let lin = Linear::new(store, "chemix.head.linear", fan_in, 1, CHEMIX_GROUP, rng)?;
                let p = store.get_mut(lin.bias.as_deref().expect("bias")).expect("just added");
                p.value = Tensor::scalar(T::of(bias_value));
                p.trainable = !zero_bias;
                head.linear = Some(lin);
            }
        }
        Ok(head)
    }

    pub fn distance<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, a: Var, b: Var) -> Result<Var> {
        let p = g.shape(a)[0];
        let raw = match self.kind {
            HeadKind::ScaledCosine | HeadKind::Cosine => {
                let cos = g.cosine_similarity(a, b)?;
                let neg = g.scale(cos, -1.0)?;
                let dist = g.add_scalar(neg, 1.0)?;
                if self.kind == HeadKind::Cosine {
                    dist
                } else {
                    let m = g.param(store, self.slope.as_ref().expect("slope"))?;
                    let m = g.broadcast(m, &[p])?;
                    let bias = g.param(store, self.bias.as_ref().expect("bias"))?;
                    let bias = g.broadcast(bias, &[p])?;
                    let s = g.mul(m, dist)?;
                    g.add(s, bias)?
                }
            }
            HeadKind::MeanLinear | HeadKind::ConcatLinear | HeadKind::PnaLinear => {
                let x = match self.kind {
                    HeadKind::MeanLinear => {
                        let s = g.add(a, b)?;
                        g.scale(s, 0.5)?
                    }
                    HeadKind::ConcatLinear => g.concat(&[a, b], 1)?,
                    _ => {
                        let both = g.concat(&[a, b], 0)?;
                        let seg: Vec<usize> = (0..p).chain(0..p).collect();
                        let mut parts = Vec::with_capacity(4);
                        for kind in [Reduce::Mean, Reduce::Std, Reduce::Min, Reduce::Max] {
                            parts.push(g.segment_reduce(both, &seg, p, kind)?);
                        }
                        g.concat(&parts, 1)?
                    }
                };
                let y = self.linear.as_ref().expect("linear head").forward(g, store, x)?;
                g.reshape(y, &[p])?
            }
        };
        g.hardtanh(raw, 0.0, 1.0)
    }
}
