use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{softmax_in_place, Graph, Var};
use super::params::{seeded, ParamStore};
use super::tensor::Tensor;
use super::vocab::{BOS, EOS, PAD, UNK};
use super::{DecodeConfig, EmotionGrad, ModelConfig};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;

/// Token ids for one example; causality slots are `None` when the variant
/// does not consume them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub context: Vec<u32>,
    pub user: Option<Vec<u32>>,
    pub sys: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub id: alloc::string::String,
    pub input: ModelInput,
    pub response: Vec<u32>,
    pub emotion: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_emotion: f64,
    pub l_gen: f64,
    pub total: f64,
}

/// Final hidden states of each present encoder, one item per example.
/// Sequence lengths act as the attention masks: no padding is materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub items: Vec<EncodedItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedItem {
    pub z_c: Tensor,
    pub z_user: Option<Tensor>,
    pub z_sys: Option<Tensor>,
}

struct Attn {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

struct EncLayer {
    ln_attn: usize,
    attn: Attn,
    ln_ff: usize,
    wi: usize,
    wo: usize,
}

struct DecLayer {
    ln_self: usize,
    self_attn: Attn,
    ln_cross: usize,
    cross: Attn,
    ln_ff: usize,
    wi: usize,
    wo: usize,
}

struct Encoder {
    rel: usize,
    layers: Vec<EncLayer>,
    ln_final: usize,
}

struct Decoder {
    rel: usize,
    layers: Vec<DecLayer>,
    ln_final: usize,
}

/// Parameter ids, registered in a fixed order so checkpoints can be matched
/// by name.
struct Layout {
    embed: usize,
    enc_c: Encoder,
    enc_user: Option<Encoder>,
    enc_sys: Option<Encoder>,
    emotion_w: usize,
    emotion_b: usize,
    fuse_w: usize,
    fuse_b: usize,
    dec: Decoder,
}

pub struct CausalityT5 {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn register_attn(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Attn {
    let std = 1.0 / libm::sqrt(d as f64);
    Attn {
        q: p.add_normal(&format!("{prefix}.q"), d, d, std, rng),
        k: p.add_normal(&format!("{prefix}.k"), d, d, std, rng),
        v: p.add_normal(&format!("{prefix}.v"), d, d, std, rng),
        o: p.add_normal(&format!("{prefix}.o"), d, d, std, rng),
    }
}

fn register_encoder(p: &mut ParamStore, name: &str, c: &ModelConfig, rng: &mut impl Rng) -> Encoder {
    let d = c.hidden_dim;
    let rel = p.add_normal(&format!("{name}.rel_bias"), c.rel_buckets, c.num_heads, 0.1, rng);
    let layers = (0..c.encoder_layers)
        .map(|i| {
            let pre = format!("{name}.layer{i}");
            EncLayer {
                ln_attn: p.add_filled(&format!("{pre}.ln_attn"), 1, d, 1.0),
                attn: register_attn(p, &format!("{pre}.attn"), d, rng),
                ln_ff: p.add_filled(&format!("{pre}.ln_ff"), 1, d, 1.0),
                wi: p.add_normal(&format!("{pre}.ff.wi"), d, c.ff_dim, 1.0 / libm::sqrt(d as f64), rng),
                wo: p.add_normal(&format!("{pre}.ff.wo"), c.ff_dim, d, 1.0 / libm::sqrt(c.ff_dim as f64), rng),
            }
        })
        .collect();
    let ln_final = p.add_filled(&format!("{name}.ln_final"), 1, d, 1.0);
    Encoder { rel, layers, ln_final }
}

fn register_decoder(p: &mut ParamStore, c: &ModelConfig, rng: &mut impl Rng) -> Decoder {
    let d = c.hidden_dim;
    let rel = p.add_normal("dec.rel_bias", c.rel_buckets, c.num_heads, 0.1, rng);
    let layers = (0..c.decoder_layers)
        .map(|i| {
            let pre = format!("dec.layer{i}");
            DecLayer {
                ln_self: p.add_filled(&format!("{pre}.ln_self"), 1, d, 1.0),
                self_attn: register_attn(p, &format!("{pre}.self"), d, rng),
                ln_cross: p.add_filled(&format!("{pre}.ln_cross"), 1, d, 1.0),
                cross: register_attn(p, &format!("{pre}.cross"), d, rng),
                ln_ff: p.add_filled(&format!("{pre}.ln_ff"), 1, d, 1.0),
                wi: p.add_normal(&format!("{pre}.ff.wi"), d, c.ff_dim, 1.0 / libm::sqrt(d as f64), rng),
                wo: p.add_normal(&format!("{pre}.ff.wo"), c.ff_dim, d, 1.0 / libm::sqrt(c.ff_dim as f64), rng),
            }
        })
        .collect();
    let ln_final = p.add_filled("dec.ln_final", 1, d, 1.0);
    Decoder { rel, layers, ln_final }
}

/// T5 relative position bucket for `key - query`.
pub(crate) fn relative_bucket(relative: i64, bidirectional: bool, buckets: usize, max_distance: usize) -> usize {
    let mut ret = 0usize;
    let mut n = -relative;
    let mut num = buckets;
    if bidirectional {
        num /= 2;
        if n < 0 {
            ret += num;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let n = n as usize;
    let max_exact = num / 2;
    if n < max_exact {
        return ret + n;
    }
    let ratio = libm::log(n as f64 / max_exact as f64) / libm::log(max_distance as f64 / max_exact as f64);
    let large = max_exact + (ratio * (num - max_exact) as f64) as usize;
    ret + large.min(num - 1)
}

impl CausalityT5 {
    /// Fresh model with seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut p = ParamStore::default();
        let c = &config;
        let d = c.hidden_dim;
        let embed = p.add_normal("embed", c.vocab_size, d, 1.0, &mut rng);
        let enc_c = register_encoder(&mut p, "enc_c", c, &mut rng);
        let enc_user = c.variant.uses_user().then(|| register_encoder(&mut p, "enc_user", c, &mut rng));
        let enc_sys = c.variant.uses_sys().then(|| register_encoder(&mut p, "enc_sys", c, &mut rng));
        let pooled = if c.variant.uses_user() { 2 * d } else { d };
        let emotion_w = p.add_normal("emotion.w", pooled, c.emotion_count, 1.0 / libm::sqrt(pooled as f64), &mut rng);
        let emotion_b = p.add_filled("emotion.b", 1, c.emotion_count, 0.0);
        let fuse_w = p.add_normal("fuse.w", d, d, 1.0 / libm::sqrt(d as f64), &mut rng);
        let fuse_b = p.add_filled("fuse.b", 1, d, 0.0);
        let dec = register_decoder(&mut p, c, &mut rng);
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                embed,
                enc_c,
                enc_user,
                enc_sys,
                emotion_w,
                emotion_b,
                fuse_w,
                fuse_b,
                dec,
            },
        })
    }

    /// Builds the architecture for `config` and copies weights by name.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for id in 0..model.params.len() {
            let name = model.params.name(id);
            let src = params
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            let value = params.value(src);
            if value.shape() != model.params.value(id).shape() {
                return Err(Error::Config(format!("tensor {name} has shape {:?}", value.shape())));
            }
            *model.params.value_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn fusion_param_ids(&self) -> [usize; 2] {
        [self.layout.fuse_w, self.layout.fuse_b]
    }

    pub fn emotion_param_ids(&self) -> [usize; 2] {
        [self.layout.emotion_w, self.layout.emotion_b]
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let v = self.config.variant;
        if input.context.is_empty() {
            return Err(Error::pre("empty context"));
        }
        let oov = |ids: &[u32]| ids.iter().any(|&t| t as usize >= self.config.vocab_size);
        if oov(&input.context) {
            return Err(Error::pre("context token outside vocabulary"));
        }
        for (needed, slot, name) in [(v.uses_user(), &input.user, "user"), (v.uses_sys(), &input.sys, "sys")] {
            if needed {
                match slot {
                    Some(ids) if !ids.is_empty() => {
                        if oov(ids) {
                            return Err(Error::pre(format!("{name} causality token outside vocabulary")));
                        }
                    }
                    _ => {
                        return Err(Error::Missing {
                            what: format!("{name} causality text"),
                            id: format!("variant {}", v.as_str()),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    fn truncate<'a>(&self, ids: &'a [u32]) -> &'a [u32] {
        // keep the tail: the closing user turn matters most
        let max = self.config.max_source_len;
        if ids.len() > max {
            &ids[ids.len() - max..]
        } else {
            ids
        }
    }

    fn buckets(&self, qlen: usize, klen: usize, bidirectional: bool) -> Vec<usize> {
        let mut b = Vec::with_capacity(qlen * klen);
        for i in 0..qlen {
            for j in 0..klen {
                b.push(relative_bucket(
                    j as i64 - i as i64,
                    bidirectional,
                    self.config.rel_buckets,
                    self.config.rel_max_distance,
                ));
            }
        }
        b
    }

    fn attention(&self, g: &mut Graph, a: &Attn, x: Var, mem: Var, rel: Option<(usize, bool)>, causal: bool) -> Var {
        let heads = self.config.num_heads;
        let dh = self.config.hidden_dim / heads;
        let (qlen, klen) = (g.value(x).rows, g.value(mem).rows);
        let (wq, wk, wv, wo) = (g.param(a.q), g.param(a.k), g.param(a.v), g.param(a.o));
        let q = g.matmul(x, wq);
        let k = g.matmul(mem, wk);
        let v = g.matmul(mem, wv);
        let buckets = rel.map(|(_, bidi)| self.buckets(qlen, klen, bidi));
        let mask = causal.then(|| {
            let mut m = Tensor::zeros(qlen, klen);
            for i in 0..qlen {
                for j in i + 1..klen {
                    m.data[i * klen + j] = MASKED;
                }
            }
            m
        });
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let mut s = g.scale(s, 1.0 / libm::sqrt(dh as f64));
            if let (Some((table, _)), Some(b)) = (rel, &buckets) {
                let t = g.param(table);
                let bias = g.rel_bias(t, h, qlen, klen, b.clone());
                s = g.add(s, bias);
            }
            if let Some(m) = &mask {
                s = g.shift(s, m);
            }
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&outs);
        g.matmul(cat, wo)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, wi: usize, wo: usize) -> Var {
        let (wi, wo) = (g.param(wi), g.param(wo));
        let h = g.matmul(x, wi);
        let h = g.relu(h);
        g.matmul(h, wo)
    }

    fn run_encoder(&self, g: &mut Graph, enc: &Encoder, ids: &[u32]) -> Var {
        let emb = g.param(self.layout.embed);
        let mut x = g.gather(emb, self.truncate(ids));
        for l in &enc.layers {
            let w = g.param(l.ln_attn);
            let n = g.rms_norm(x, w, NORM_EPS);
            let a = self.attention(g, &l.attn, n, n, Some((enc.rel, true)), false);
            x = g.add(x, a);
            let w = g.param(l.ln_ff);
            let n = g.rms_norm(x, w, NORM_EPS);
            let f = self.feed_forward(g, n, l.wi, l.wo);
            x = g.add(x, f);
        }
        let w = g.param(enc.ln_final);
        g.rms_norm(x, w, NORM_EPS)
    }

    /// Runs every encoder the variant uses.
    pub fn encode_vars(&self, g: &mut Graph, input: &ModelInput) -> Result<(Var, Option<Var>, Option<Var>)> {
        self.check_input(input)?;
        let l = &self.layout;
        let z_c = self.run_encoder(g, &l.enc_c, &input.context);
        let z_user = match (&l.enc_user, &input.user) {
            (Some(e), Some(ids)) => Some(self.run_encoder(g, e, ids)),
            _ => None,
        };
        let z_sys = match (&l.enc_sys, &input.sys) {
            (Some(e), Some(ids)) => Some(self.run_encoder(g, e, ids)),
            _ => None,
        };
        Ok((z_c, z_user, z_sys))
    }

    /// Evaluated encoder states for a batch.
    pub fn encode(&self, batch: &[ModelInput]) -> Result<EncodedBatch> {
        let mut items = Vec::with_capacity(batch.len());
        for input in batch {
            let mut g = Graph::new(&self.params);
            let (c, u, s) = self.encode_vars(&mut g, input)?;
            items.push(EncodedItem {
                z_c: g.value(c).clone(),
                z_user: u.map(|v| g.value(v).clone()),
                z_sys: s.map(|v| g.value(v).clone()),
            });
        }
        Ok(EncodedBatch { items })
    }

    /// Emotion logits from mean-pooled context (and user) encodings.
    pub fn emotion_logits(&self, g: &mut Graph, z_c: Var, z_user: Option<Var>) -> Result<Var> {
        let mut pooled = g.mean_rows(z_c);
        if let Some(u) = z_user {
            let mut pu = g.mean_rows(u);
            if self.config.emotion_grad == EmotionGrad::ContextOnly {
                pu = g.detach(pu);
            }
            pooled = g.concat_cols(&[pooled, pu]);
        }
        let w = g.param(self.layout.emotion_w);
        if g.value(pooled).cols != g.value(w).rows {
            return Err(Error::DimensionMismatch {
                expected: g.value(w).rows,
                actual: g.value(pooled).cols,
            });
        }
        let b = g.param(self.layout.emotion_b);
        let logits = g.matmul(pooled, w);
        Ok(g.add_row(logits, b))
    }

    /// Position-wise FC over the sequence-axis concatenation of all present
    /// encodings.
    pub fn fuse(&self, g: &mut Graph, z_c: Var, z_user: Option<Var>, z_sys: Option<Var>) -> Result<Var> {
        let parts: Vec<Var> = [Some(z_c), z_user, z_sys].into_iter().flatten().collect();
        let d = self.config.hidden_dim;
        for p in &parts {
            if g.value(*p).cols != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: g.value(*p).cols,
                });
            }
        }
        let cat = g.concat_rows(&parts);
        let (w, b) = (g.param(self.layout.fuse_w), g.param(self.layout.fuse_b));
        let h = g.matmul(cat, w);
        Ok(g.add_row(h, b))
    }

    /// Next-token logits for every position of `prefix`.
    pub fn decode(&self, g: &mut Graph, fused: Var, prefix: &[u32]) -> Var {
        let dec = &self.layout.dec;
        let emb = g.param(self.layout.embed);
        let mut x = g.gather(emb, prefix);
        for l in &dec.layers {
            let w = g.param(l.ln_self);
            let n = g.rms_norm(x, w, NORM_EPS);
            let a = self.attention(g, &l.self_attn, n, n, Some((dec.rel, false)), true);
            x = g.add(x, a);
            let w = g.param(l.ln_cross);
            let n = g.rms_norm(x, w, NORM_EPS);
            let a = self.attention(g, &l.cross, n, fused, None, false);
            x = g.add(x, a);
            let w = g.param(l.ln_ff);
            let n = g.rms_norm(x, w, NORM_EPS);
            let f = self.feed_forward(g, n, l.wi, l.wo);
            x = g.add(x, f);
        }
        let w = g.param(dec.ln_final);
        let h = g.rms_norm(x, w, NORM_EPS);
        // tied output projection, scaled as in T5
        let h = g.scale(h, 1.0 / libm::sqrt(self.config.hidden_dim as f64));
        g.matmul_t(h, emb)
    }

    fn targets(&self, response: &[u32]) -> (Vec<u32>, Vec<Option<usize>>) {
        let max = self.config.decode.max_generate_len;
        let body = &response[..response.len().min(max.saturating_sub(1))];
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(body);
        let mut targets: Vec<Option<usize>> = body
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        targets.push(Some(EOS as usize));
        (inputs, targets)
    }

    /// Builds the batch objective. Returns the total-loss variable and the
    /// breakdown; `total == emotion_loss_weight * l_emotion + l_gen`.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[TrainExample]) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let mut le_terms = Vec::with_capacity(batch.len());
        let mut lg_terms = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.emotion >= self.config.emotion_count {
                return Err(Error::LabelOutOfRange {
                    label: ex.emotion,
                    count: self.config.emotion_count,
                });
            }
            let (z_c, z_u, z_s) = self.encode_vars(g, &ex.input)?;
            let logits = self.emotion_logits(g, z_c, z_u)?;
            le_terms.push(g.cross_entropy(logits, &[Some(ex.emotion)]));
            let fused = self.fuse(g, z_c, z_u, z_s)?;
            let (inputs, targets) = self.targets(&ex.response);
            let out = self.decode(g, fused, &inputs);
            lg_terms.push(g.cross_entropy(out, &targets));
        }
        let inv = 1.0 / batch.len() as f64;
        let sum = |g: &mut Graph, terms: &[Var]| {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = g.add(acc, *t);
            }
            g.scale(acc, inv)
        };
        let le = sum(g, &le_terms);
        let lg = sum(g, &lg_terms);
        let le_w = g.scale(le, self.config.emotion_loss_weight);
        let total = g.add(le_w, lg);
        let breakdown = LossBreakdown {
            l_emotion: g.scalar(le),
            l_gen: g.scalar(lg),
            total: g.scalar(total),
        };
        Ok((total, breakdown))
    }

    /// Emotion distribution for one input.
    pub fn classify_emotion(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let (z_c, z_u, _) = self.encode_vars(&mut g, input)?;
        let logits = self.emotion_logits(&mut g, z_c, z_u)?;
        let mut p = g.value(logits).data.clone();
        softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn predict_emotion(&self, input: &ModelInput) -> Result<usize> {
        let p = self.classify_emotion(input)?;
        Ok(argmax(&p, &[]))
    }

    /// Summed teacher-forced NLL of `response` and the number of scored
    /// tokens (including the end-of-sequence token).
    pub fn response_nll(&self, input: &ModelInput, response: &[u32]) -> Result<(f64, usize)> {
        let mut g = Graph::new(&self.params);
        let (z_c, z_u, z_s) = self.encode_vars(&mut g, input)?;
        let fused = self.fuse(&mut g, z_c, z_u, z_s)?;
        let (inputs, targets) = self.targets(response);
        let out = self.decode(&mut g, fused, &inputs);
        let count = targets.iter().filter(|t| t.is_some()).count();
        let ce = g.cross_entropy(out, &targets);
        Ok((g.scalar(ce), count))
    }

    /// Token-by-token decoding. Temperature zero is greedy argmax; otherwise
    /// top-k sampling from the temperature-scaled distribution.
    pub fn generate(&self, input: &ModelInput, decode: &DecodeConfig, rng: &mut impl Rng) -> Result<Vec<u32>> {
        decode.validate()?;
        let mut g = Graph::new(&self.params);
        let (z_c, z_u, z_s) = self.encode_vars(&mut g, input)?;
        let fused_var = self.fuse(&mut g, z_c, z_u, z_s)?;
        let fused = g.value(fused_var).clone();
        drop(g);
        let banned = [PAD as usize, BOS as usize, UNK as usize];
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < decode.max_generate_len {
            let mut g = Graph::new(&self.params);
            let mem = g.input(fused.clone());
            let logits = self.decode(&mut g, mem, &prefix);
            let lv = g.value(logits);
            let last = lv.row(lv.rows - 1).to_vec();
            let next = if decode.temperature == 0.0 {
                argmax(&last, &banned)
            } else {
                sample_top_k(&last, &banned, decode.top_k, decode.temperature, rng)
            } as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value, lowest index on ties, skipping `banned`.
fn argmax(v: &[f64], banned: &[usize]) -> usize {
    let mut best = None;
    for (i, &x) in v.iter().enumerate() {
        if banned.contains(&i) {
            continue;
        }
        match best {
            Some((_, bx)) if x <= bx => {}
            _ => best = Some((i, x)),
        }
    }
    best.map_or(0, |b| b.0)
}

fn sample_top_k(logits: &[f64], banned: &[usize], k: usize, temperature: f64, rng: &mut impl Rng) -> usize {
    let mut cand: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| !banned.contains(i))
        .map(|(i, &l)| (i, l / temperature))
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(k.max(1));
    let mut probs: Vec<f64> = cand.iter().map(|c| c.1).collect();
    softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in cand.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return c.0;
        }
    }
    cand[cand.len() - 1].0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVariant;

    pub(crate) fn tiny(variant: ModelVariant) -> CausalityT5 {
        CausalityT5::new(ModelConfig {
            variant,
            hidden_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            num_heads: 2,
            ff_dim: 12,
            rel_buckets: 8,
            rel_max_distance: 16,
            vocab_size: 20,
            emotion_count: 3,
            max_source_len: 32,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn input(user: bool, sys: bool) -> ModelInput {
        ModelInput {
            context: vec![4, 5, 6, 7],
            user: user.then(|| vec![8, 9, 10]),
            sys: sys.then(|| vec![11, 12]),
        }
    }

    #[test]
    fn buckets_match_t5_layout() {
        // bidirectional: small offsets map to themselves, negatives shift by half
        assert_eq!(relative_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_bucket(-3, true, 32, 128), 3);
        assert_eq!(relative_bucket(3, true, 32, 128), 19);
        assert_eq!(relative_bucket(-1000, true, 32, 128), 15);
        // causal: future positions collapse to bucket 0
        assert_eq!(relative_bucket(5, false, 32, 128), 0);
        assert_eq!(relative_bucket(-5, false, 32, 128), 5);
        assert_eq!(relative_bucket(-1000, false, 32, 128), 31);
    }

    #[test]
    fn encode_respects_variant() {
        let base = tiny(ModelVariant::Base);
        let e = base.encode(&[input(false, false)]).unwrap();
        assert!(e.items[0].z_user.is_none() && e.items[0].z_sys.is_none());
        let full = tiny(ModelVariant::CausalityUserSys);
        let e = full.encode(&[input(true, true), input(true, true)]).unwrap();
        for it in &e.items {
            assert_eq!(it.z_c.cols, 8);
            assert_eq!(it.z_user.as_ref().unwrap().cols, 8);
            assert_eq!(it.z_sys.as_ref().unwrap().cols, 8);
        }
        let user = tiny(ModelVariant::CausalityUser);
        let mut bad = input(true, false);
        bad.user = Some(vec![]);
        assert!(matches!(user.encode(&[bad]), Err(Error::Missing { .. })));
        assert!(full.encode(&[input(true, false)]).is_err());
    }

    #[test]
    fn fused_length_is_sum_of_parts() {
        let m = tiny(ModelVariant::CausalityUserSys);
        let mut g = Graph::new(&m.params);
        let (c, u, s) = m.encode_vars(&mut g, &input(true, true)).unwrap();
        let f = m.fuse(&mut g, c, u, s).unwrap();
        assert_eq!(g.value(f).rows, 4 + 3 + 2);
    }

    #[test]
    fn base_fusion_is_fc_of_context() {
        let m = tiny(ModelVariant::Base);
        let mut g = Graph::new(&m.params);
        let (c, _, _) = m.encode_vars(&mut g, &input(false, false)).unwrap();
        let f = m.fuse(&mut g, c, None, None).unwrap();
        let zc = g.value(c).clone();
        let w = m.params.value(m.fusion_param_ids()[0]);
        let b = m.params.value(m.fusion_param_ids()[1]);
        let mut expected = zc.matmul(w);
        for r in 0..expected.rows {
            for (o, bv) in expected.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        assert_eq!(g.value(f), &expected);
    }

    #[test]
    fn loss_total_is_sum_of_parts() {
        let m = tiny(ModelVariant::CausalityUserSys);
        let ex = TrainExample { id: "a".into(), input: input(true, true), response: vec![13, 14], emotion: 2 };
        let mut g = Graph::new(&m.params);
        let (_, b) = m.batch_loss(&mut g, &[ex.clone(), ex]).unwrap();
        assert_eq!(b.total, b.l_emotion + b.l_gen);
        assert!(b.l_emotion > 0.0 && b.l_gen > 0.0);
        let bad = TrainExample { id: "b".into(), input: input(true, true), response: vec![1], emotion: 3 };
        assert!(matches!(m.batch_loss(&mut Graph::new(&m.params), &[bad]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn greedy_generation_is_bounded_and_repeatable() {
        let m = tiny(ModelVariant::CausalityUserSys);
        let dc = DecodeConfig::greedy(7);
        let a = m.generate(&input(true, true), &dc, &mut seeded(1)).unwrap();
        let b = m.generate(&input(true, true), &dc, &mut seeded(99)).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 7);
        let s = DecodeConfig { top_k: 5, temperature: 0.2, max_generate_len: 7 };
        let x = m.generate(&input(true, true), &s, &mut seeded(4)).unwrap();
        let y = m.generate(&input(true, true), &s, &mut seeded(4)).unwrap();
        assert_eq!(x, y);
        assert!(x.iter().all(|&t| t != PAD && t != BOS && t != UNK));
    }

    #[test]
    fn checkpoint_params_round_trip() {
        let m = tiny(ModelVariant::CausalityUser);
        let copy = CausalityT5::from_params(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(copy.params, m.params);
        let other = tiny(ModelVariant::Base);
        assert!(CausalityT5::from_params(m.config.clone(), other.params).is_err());
    }
}
