//! Small pre-norm transformer producing token states and the multi-head
//! attention tensor consumed by the pair encoder.

use serde::{Deserialize, Serialize};

use crate::diffcore::{uniform, Bindings, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

/// Which attention probabilities are exposed as `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionSource {
    #[default]
    #[serde(rename = "final")]
    FinalLayer,
    #[serde(rename = "mean")]
    MeanOfLayers,
}

impl std::str::FromStr for AttentionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(AttentionSource::FinalLayer),
            "mean" => Ok(AttentionSource::MeanOfLayers),
            other => Err(Error::Config(format!("unknown attention source `{other}` (final or mean)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub ff_dim: usize,
    pub attention_source: AttentionSource,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden: 32,
            heads: 4,
            layers: 2,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            ff_dim: 64,
            attention_source: AttentionSource::FinalLayer,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_len", self.max_len),
            ("ff_dim", self.ff_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Token states `l x d` and per-head attention maps (`heads` entries of
/// `l x l`, rows summing to one).
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    pub attention: Vec<Var>,
}

impl EncoderOutput {
    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.states).0
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }

    /// Materializes `A` as a `heads x l x l` tensor.
    pub fn attention_tensor(&self, g: &Graph) -> Tensor {
        let l = self.len(g);
        let mut data = Vec::with_capacity(self.attention.len() * l * l);
        for &a in &self.attention {
            data.extend_from_slice(g.value(a).data());
        }
        Tensor::new(vec![self.attention.len(), l, l], data)
    }
}

fn layer_name(i: usize, part: &str) -> String {
    format!("enc.l{i}.{part}")
}

/// Seeded initialization. Weight matrices are stored `out x in` and drawn
/// from `U(-s, s)` with `s = 1/sqrt(in)`; embedding tables use `s = 1`
/// (a one-hot lookup has fan-in one). Biases start at zero and
/// normalization gains at one.
pub fn init_encoder(config: &EncoderConfig, rng: &mut impl rand::Rng) -> Result<ParamSet> {
    config.validate()?;
    let d = config.hidden;
    let mut p = ParamSet::new();
    let add_linear = |p: &mut ParamSet, rng: &mut _, name: String, out: usize, inp: usize| -> Result<()> {
        p.insert(format!("{name}.w"), uniform(rng, &[out, inp], 1.0 / (inp as f64).sqrt()))?;
        p.insert(format!("{name}.b"), Tensor::zeros(&[1, out]))
    };
    p.insert("enc.tok_emb", uniform(rng, &[config.vocab_size, d], 1.0))?;
    p.insert("enc.pos_emb", uniform(rng, &[config.max_len, d], 1.0))?;
    for i in 0..config.layers {
        for ln in ["ln1", "ln2"] {
            p.insert(layer_name(i, &format!("{ln}.g")), Tensor::full(&[1, d], 1.0))?;
            p.insert(layer_name(i, &format!("{ln}.b")), Tensor::zeros(&[1, d]))?;
        }
        for proj in ["q", "k", "v", "o"] {
            add_linear(&mut p, rng, layer_name(i, &format!("attn.{proj}")), d, d)?;
        }
        add_linear(&mut p, rng, layer_name(i, "ff1"), config.ff_dim, d)?;
        add_linear(&mut p, rng, layer_name(i, "ff2"), d, config.ff_dim)?;
    }
    p.insert("enc.ln_f.g", Tensor::full(&[1, d], 1.0))?;
    p.insert("enc.ln_f.b", Tensor::zeros(&[1, d]))?;
    Ok(p)
}

/// `x W^T + b` with parameters `{name}.w` / `{name}.b`.
pub(crate) fn linear(g: &mut Graph, params: &Bindings, x: Var, name: &str) -> Var {
    let w = params.var(&format!("{name}.w"));
    let b = params.var(&format!("{name}.b"));
    let y = g.matmul_nt(x, w);
    g.add_row(y, b)
}

/// Encodes one token sequence. `perturbation`, when given, is added to
/// the word embeddings before positions are added.
pub fn encode(
    g: &mut Graph,
    config: &EncoderConfig,
    params: &Bindings,
    tokens: &[usize],
    perturbation: Option<Var>,
) -> Result<EncoderOutput> {
    let l = tokens.len();
    let d = config.hidden;
    if l == 0 || l > config.max_len {
        return Err(Error::Input(format!("sequence length {l} outside [1, {}]", config.max_len)));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
    }
    let mut x = g.gather_rows(params.var("enc.tok_emb"), tokens);
    if let Some(xi) = perturbation {
        if g.shape(xi) != (l, d) {
            return Err(Error::Input(format!(
                "perturbation shape {:?} does not match ({l}, {d})",
                g.shape(xi)
            )));
        }
        x = g.add(x, xi);
    }
    let positions: Vec<usize> = (0..l).collect();
    let pos = g.gather_rows(params.var("enc.pos_emb"), &positions);
    x = g.add(x, pos);

    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut per_layer: Vec<Vec<Var>> = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let h = g.layer_norm_rows(
            x,
            params.var(&layer_name(i, "ln1.g")),
            params.var(&layer_name(i, "ln1.b")),
        );
        let q = linear(g, params, h, &layer_name(i, "attn.q"));
        let k = linear(g, params, h, &layer_name(i, "attn.k"));
        let v = linear(g, params, h, &layer_name(i, "attn.v"));
        let mut heads = Vec::with_capacity(config.heads);
        let mut probs = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let (lo, hi) = (head * hd, (head + 1) * hd);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores);
            heads.push(g.matmul(p, vh));
            probs.push(p);
        }
        let merged = g.concat_cols(&heads);
        let attn_out = linear(g, params, merged, &layer_name(i, "attn.o"));
        x = g.add(x, attn_out);

        let h2 = g.layer_norm_rows(
            x,
            params.var(&layer_name(i, "ln2.g")),
            params.var(&layer_name(i, "ln2.b")),
        );
        let f = linear(g, params, h2, &layer_name(i, "ff1"));
        let f = g.gelu(f);
        let f = linear(g, params, f, &layer_name(i, "ff2"));
        x = g.add(x, f);
        per_layer.push(probs);
    }
    let states = g.layer_norm_rows(x, params.var("enc.ln_f.g"), params.var("enc.ln_f.b"));

    let attention = match config.attention_source {
        AttentionSource::FinalLayer => per_layer.pop().expect("at least one layer"),
        AttentionSource::MeanOfLayers => (0..config.heads)
            .map(|head| {
                let mut acc = per_layer[0][head];
                for layer in &per_layer[1..] {
                    acc = g.add(acc, layer[head]);
                }
                g.scale(acc, 1.0 / config.layers as f64)
            })
            .collect(),
    };
    Ok(EncoderOutput { states, attention })
}
