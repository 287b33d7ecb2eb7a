//! Autoregressive transformer over token sequences, nucleus sampling, and
//! the depth-image condition encoder.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::fibonacci_sphere;
use crate::grouping::GroupingNet;
use crate::nn::{
    init_normal, softmax_in_place, Adam, AdamConfig, Graph, LayerNorm, Linear, Matrix, ParamId, ParamSet,
    Var, PAD,
};
use crate::pcio::{DepthImage, PointCloud};
use crate::train::{epoch_batches, rng_stream, TrainError, INIT_STREAM, SHUFFLE_STREAM};
use crate::vq::{TokenSequence, VqCodec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    /// Learned positional embeddings; fixed sinusoids otherwise.
    pub learned_positions: bool,
    /// Channels of the four strided convolutions of the condition encoder.
    pub cond_channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 128,
            mlp_ratio: 4,
            learned_positions: true,
            cond_channels: vec![16, 32, 64, 64],
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    /// Top-k filtering before the nucleus step; off when `None`.
    pub top_k: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.92,
            temperature: 1.0,
            top_k: None,
        }
    }
}

/// Feature of a conditioning input in the token-embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionFeature(pub Vec<f64>);

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

/// Four stride-2 3x3 convolutions with ReLU, global mean pooling and a
/// linear map to the model width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvEncoder {
    convs: Vec<ConvLayer>,
    head: Linear,
}

impl ConvEncoder {
    pub fn new(params: &mut ParamSet, channels: &[usize], d_model: usize, rng: &mut impl Rng) -> Self {
        let mut cin = 1;
        let convs = channels
            .iter()
            .enumerate()
            .map(|(l, &cout)| {
                let layer = ConvLayer {
                    w: params.add(format!("cond.conv{l}.w"), init_normal(9 * cin, cout, (2.0 / (9 * cin) as f64).sqrt(), rng)),
                    b: params.add(format!("cond.conv{l}.b"), Matrix::zeros(1, cout)),
                };
                cin = cout;
                layer
            })
            .collect();
        let head = Linear::new(params, "cond.head", cin, d_model, rng);
        Self { convs, head }
    }

    /// Features of a batch of images, one row each.
    pub fn forward(&self, g: &mut Graph, images: &[&DepthImage]) -> Result<Var> {
        let mut shapes = Vec::with_capacity(images.len());
        let mut data = Vec::new();
        for img in images {
            if img.height == 0 || img.width == 0 {
                return Err(Error::domain("condition image is empty"));
            }
            shapes.push((img.height, img.width));
            data.extend(img.data.iter().map(|&v| v as f64));
        }
        let mut x = g.constant(Matrix::from_vec(data.len(), 1, data));
        for layer in &self.convs {
            let cin = g.shape(x).1;
            let mut idx = Vec::new();
            let mut next = Vec::with_capacity(shapes.len());
            let mut base = 0;
            for &(h, w) in &shapes {
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                for oy in 0..ho {
                    for ox in 0..wo {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (iy, ix) = ((2 * oy + dy) as isize - 1, (2 * ox + dx) as isize - 1);
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                                idx.push(if inside { base + iy as usize * w + ix as usize } else { PAD });
                            }
                        }
                    }
                }
                base += h * w;
                next.push((ho, wo));
            }
            let patches = g.gather_rows(x, Rc::new(idx));
            let rows = next.iter().map(|(h, w)| h * w).sum();
            let patches = g.reshape(patches, rows, 9 * cin);
            let w = g.param(layer.w);
            let b = g.param(layer.b);
            let h = g.matmul(patches, w);
            let h = g.add_row(h, b);
            x = g.relu(h);
            shapes = next;
        }
        let mut segment = Vec::new();
        let mut inv = Vec::new();
        for (i, (h, w)) in shapes.iter().enumerate() {
            segment.extend(std::iter::repeat_n(i, h * w));
            inv.push(1.0 / (h * w) as f64);
        }
        let pooled = g.segment_sum(x, Rc::new(segment), images.len());
        let inv = g.constant(Matrix::from_vec(images.len(), 1, inv));
        let pooled = g.mul_col(pooled, inv);
        Ok(self.head.forward(g, pooled))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub groups: usize,
    pub vocab: usize,
    pub params: ParamSet,
    /// Row `t * vocab + s` embeds token `s` at position `t`.
    embed: ParamId,
    start: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head_w: ParamId,
    head_b: ParamId,
    pub condition: Option<ConvEncoder>,
    /// Mean teacher-forced NLL per token for each epoch.
    pub history: Vec<f64>,
}

fn sinusoids(n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for t in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * rate;
            *m.at_mut(t, i) = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}

impl Transformer {
    pub fn new(config: TransformerConfig, groups: usize, vocab: usize, conditional: bool) -> Self {
        let mut rng = rng_stream(config.seed, INIT_STREAM);
        let mut params = ParamSet::new();
        let d = config.d_model;
        let embed = params.add("tf.embed", init_normal(groups * vocab, d, 0.02, &mut rng));
        let start = params.add("tf.start", init_normal(1, d, 0.02, &mut rng));
        let positions = if config.learned_positions {
            params.add("tf.pos", init_normal(groups, d, 0.02, &mut rng))
        } else {
            params.add_buffer("tf.pos", sinusoids(groups, d))
        };
        let blocks = (0..config.layers)
            .map(|l| {
                let name = |s: &str| format!("tf.block{l}.{s}");
                let hidden = config.mlp_ratio * d;
                let proj = Linear::new(&mut params, &name("o"), d, d, &mut rng);
                let fc2 = Linear::new(&mut params, &name("fc2"), hidden, d, &mut rng);
                // residual branches start small
                let depth_scale = (1.0 / (2.0 * config.layers.max(1) as f64)).sqrt();
                params.get_mut(proj.w).scale_assign(depth_scale);
                params.get_mut(fc2.w).scale_assign(depth_scale);
                Block {
                    ln1: LayerNorm::new(&mut params, &name("ln1"), d),
                    q: Linear::new(&mut params, &name("q"), d, d, &mut rng),
                    k: Linear::new(&mut params, &name("k"), d, d, &mut rng),
                    v: Linear::new(&mut params, &name("v"), d, d, &mut rng),
                    o: proj,
                    ln2: LayerNorm::new(&mut params, &name("ln2"), d),
                    fc1: Linear::new(&mut params, &name("fc1"), d, hidden, &mut rng),
                    fc2,
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "tf.ln_f", d);
        // zero heads give uniform logits, so the first NLL is exactly ln(vocab)
        let head_w = params.add("tf.head.w", Matrix::zeros(groups * d, vocab));
        let head_b = params.add("tf.head.b", Matrix::zeros(groups, vocab));
        let condition = conditional.then(|| ConvEncoder::new(&mut params, &config.cond_channels, d, &mut rng));
        Self {
            config,
            groups,
            vocab,
            params,
            embed,
            start,
            positions,
            blocks,
            ln_f,
            head_w,
            head_b,
            condition,
            history: Vec::new(),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.groups {
            return Err(Error::domain(format!("{} tokens for {} positions", tokens.len(), self.groups)));
        }
        match tokens.iter().find(|&&s| s >= self.vocab) {
            Some(s) => Err(Error::domain(format!("token {s} outside vocabulary of {}", self.vocab))),
            None => Ok(()),
        }
    }

    /// Logits for `len` slots of each sequence. Slot 0 holds the start
    /// context (or the condition), slot `t > 0` the embedding of token
    /// `t - 1`; slot `t` predicts token `t`. `len` must be `G` when more
    /// than one sequence is given.
    fn logits(&self, g: &mut Graph, seqs: &[&[usize]], len: usize, cond: Option<Var>) -> Var {
        let batch = seqs.len();
        assert!(batch == 1 || len == self.groups, "partial sequences are decoded one at a time");
        let first = match cond {
            Some(c) => c,
            None => {
                let s = g.param(self.start);
                g.gather_rows(s, Rc::new(vec![0; batch]))
            }
        };
        let mut parts = vec![first];
        if len > 1 {
            let idx: Vec<usize> = seqs
                .iter()
                .flat_map(|s| (0..len - 1).map(move |t| t * self.vocab + s[t]))
                .collect();
            let table = g.param(self.embed);
            parts.push(g.gather_rows(table, Rc::new(idx)));
        }
        let stacked = g.concat_rows(&parts);
        let order: Vec<usize> = (0..batch * len)
            .map(|r| {
                let (b, t) = (r / len, r % len);
                if t == 0 {
                    b
                } else {
                    batch + b * (len - 1) + t - 1
                }
            })
            .collect();
        let x = g.gather_rows(stacked, Rc::new(order));
        let pos = g.param(self.positions);
        let slot: Rc<Vec<usize>> = Rc::new((0..batch * len).map(|r| r % len).collect());
        let pos = g.gather_rows(pos, slot.clone());
        let mut x = g.add(x, pos);

        for blk in &self.blocks {
            let h = blk.ln1.forward(g, x);
            let q = blk.q.forward(g, h);
            let k = blk.k.forward(g, h);
            let v = blk.v.forward(g, h);
            let a = g.causal_attention(q, k, v, batch, self.config.heads);
            let a = blk.o.forward(g, a);
            x = g.add(x, a);
            let h = blk.ln2.forward(g, x);
            let h = blk.fc1.forward(g, h);
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, h);
            x = g.add(x, h);
        }
        let h = self.ln_f.forward(g, x);
        let w = g.param(self.head_w);
        let out = g.grouped_linear(h, w, self.groups);
        let b = g.param(self.head_b);
        let b = g.gather_rows(b, slot);
        g.add(out, b)
    }

    fn condition_var(&self, g: &mut Graph, cond: Option<&ConditionFeature>) -> Result<Option<Var>> {
        match cond {
            None => Ok(None),
            Some(c) if c.0.len() == self.config.d_model => {
                Ok(Some(g.constant(Matrix::from_vec(1, c.0.len(), c.0.clone()))))
            }
            Some(c) => Err(Error::domain(format!(
                "condition has {} features, model width is {}",
                c.0.len(),
                self.config.d_model
            ))),
        }
    }

    /// Logits of token `prefix.len()` given the prefix.
    pub fn forward_logits(&self, prefix: &[usize], cond: Option<&ConditionFeature>) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        if prefix.len() >= self.groups {
            return Err(Error::domain("prefix already covers every position"));
        }
        let mut g = Graph::new(&self.params);
        let c = self.condition_var(&mut g, cond)?;
        let out = self.logits(&mut g, &[prefix], prefix.len() + 1, c);
        Ok(g.value(out).row(prefix.len()).to_vec())
    }

    /// Teacher-forced logits for a full sequence, one row per position.
    pub fn sequence_logits(&self, seq: &[usize], cond: Option<&ConditionFeature>) -> Result<Matrix> {
        if seq.len() != self.groups {
            return Err(Error::domain(format!("sequence of length {} for G = {}", seq.len(), self.groups)));
        }
        self.check_tokens(seq)?;
        let mut g = Graph::new(&self.params);
        let c = self.condition_var(&mut g, cond)?;
        let out = self.logits(&mut g, &[seq], self.groups, c);
        Ok(g.value(out).clone())
    }

    pub fn encode_condition(&self, depth: &DepthImage) -> Result<ConditionFeature> {
        let enc = self
            .condition
            .as_ref()
            .ok_or_else(|| Error::domain("model was trained without a condition encoder"))?;
        let mut g = Graph::new(&self.params);
        let f = enc.forward(&mut g, &[depth])?;
        Ok(ConditionFeature(g.value(f).data.clone()))
    }

    /// Teacher-forced mean NLL per token.
    pub fn mean_nll(&self, seqs: &[TokenSequence], conds: Option<&[DepthImage]>) -> Result<f64> {
        let mut total = 0.0;
        for (i, s) in seqs.iter().enumerate() {
            let mut g = Graph::new(&self.params);
            let (loss, _) = self.sequence_loss(&mut g, &[&s.0], conds.map(|c| vec![&c[i]]))?;
            total += g.value(loss).item();
        }
        Ok(total / seqs.len().max(1) as f64)
    }

    fn sequence_loss(&self, g: &mut Graph, seqs: &[&[usize]], images: Option<Vec<&DepthImage>>) -> Result<(Var, Var)> {
        for s in seqs {
            if s.len() != self.groups {
                return Err(Error::domain(format!("sequence of length {} for G = {}", s.len(), self.groups)));
            }
            self.check_tokens(s)?;
        }
        let cond = match (images, &self.condition) {
            (Some(imgs), Some(enc)) => Some(enc.forward(g, &imgs)?),
            (None, None) => None,
            (Some(_), None) => return Err(Error::domain("conditions given to an unconditional model")),
            (None, Some(_)) => return Err(Error::domain("conditional model needs a condition per sequence")),
        };
        let logits = self.logits(g, seqs, self.groups, cond);
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        Ok((g.cross_entropy(logits, Rc::new(targets)), logits))
    }
}

pub fn forward_logits(tf: &Transformer, prefix: &[usize], cond: Option<&ConditionFeature>) -> Result<Vec<f64>> {
    tf.forward_logits(prefix, cond)
}

pub fn encode_condition(tf: &Transformer, depth: &DepthImage) -> Result<ConditionFeature> {
    tf.encode_condition(depth)
}

pub fn train_transformer(
    seqs: &[TokenSequence],
    groups: usize,
    vocab: usize,
    config: &TransformerConfig,
    conditions: Option<&[DepthImage]>,
) -> std::result::Result<Transformer, TrainError<Transformer>> {
    if seqs.is_empty() {
        return Err(Error::domain("no token sequences to train on").into());
    }
    if let Some(c) = conditions {
        if c.len() != seqs.len() {
            return Err(Error::domain("one condition image per sequence").into());
        }
    }
    if config.d_model % config.heads.max(1) != 0 || config.heads == 0 {
        return Err(Error::domain("d_model must be a positive multiple of heads").into());
    }
    let mut tf = Transformer::new(config.clone(), groups, vocab, conditions.is_some());
    for s in seqs {
        if s.0.len() != groups {
            return Err(Error::domain(format!("sequence of length {} for G = {groups}", s.0.len())).into());
        }
        tf.check_tokens(&s.0)?;
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            clip_norm: Some(1.0),
            ..Default::default()
        },
        &tf.params,
    );
    let mut shuffle = rng_stream(config.seed, SHUFFLE_STREAM);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(seqs.len(), config.batch_size, &mut shuffle);
        let mut sum = 0.0;
        for batch in &batches {
            let refs: Vec<&[usize]> = batch.iter().map(|&i| seqs[i].0.as_slice()).collect();
            let imgs = conditions.map(|c| batch.iter().map(|&i| &c[i]).collect::<Vec<_>>());
            let (loss, grads) = {
                let mut g = Graph::new(&tf.params);
                let (loss, _) = tf.sequence_loss(&mut g, &refs, imgs)?;
                (g.value(loss).item(), g.backward(loss))
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(tf),
                    message: format!("non-finite NLL {loss}"),
                });
            }
            let before = tf.params.clone();
            adam.step(&mut tf.params, &grads.params);
            if !tf.params.all_finite() {
                tf.params = before;
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: Box::new(tf),
                    message: "non-finite parameters after update".into(),
                });
            }
            sum += loss;
        }
        tf.history.push(sum / batches.len() as f64);
    }
    Ok(tf)
}

pub fn apply_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("temperature must be positive and finite, got {t}")));
    }
    Ok(logits.iter().map(|l| l / t).collect())
}

/// Descending-probability order with ties to the lower index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// Keeps the smallest high-probability prefix with mass at least `p` and
/// renormalizes.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for i in ranked(probs) {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out.iter_mut().for_each(|v| *v /= mass);
    out
}

/// Keeps the `k` most probable entries and renormalizes.
pub fn top_k_filter(probs: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for &i in ranked(probs).iter().take(k.max(1)) {
        out[i] = probs[i];
    }
    let mass: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= mass);
    out
}

/// The distribution a token is drawn from after temperature and filtering.
pub fn sampling_distribution(logits: &[f64], sampling: &SamplingConfig) -> Result<Vec<f64>> {
    let mut probs = apply_temperature(logits, sampling.temperature)?;
    softmax_in_place(&mut probs);
    if let Some(k) = sampling.top_k {
        probs = top_k_filter(&probs, k);
    }
    Ok(nucleus_filter(&probs, sampling.top_p))
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

pub fn sample_sequence(
    tf: &Transformer,
    sampling: &SamplingConfig,
    seed: u64,
    cond: Option<&ConditionFeature>,
) -> Result<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = Vec::with_capacity(tf.groups);
    for _ in 0..tf.groups {
        let logits = tf.forward_logits(&seq, cond)?;
        let probs = sampling_distribution(&logits, sampling)?;
        seq.push(draw(&probs, &mut rng));
    }
    Ok(TokenSequence(seq))
}

/// Samples a token sequence and decodes it on a sphere of `resolution`
/// points.
pub fn generate_shape(
    tf: &Transformer,
    vq: &VqCodec,
    grouping: &GroupingNet,
    sampling: &SamplingConfig,
    seed: u64,
    cond: Option<&ConditionFeature>,
    resolution: usize,
) -> Result<(TokenSequence, PointCloud)> {
    let tokens = sample_sequence(tf, sampling, seed, cond)?;
    let sphere = fibonacci_sphere(resolution)?;
    let ga = grouping.assignment(&sphere)?;
    let shape = vq.decode_tokens(&tokens, &sphere, &ga)?;
    Ok((tokens, shape))
}

/// Cosine similarity of two feature vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}
