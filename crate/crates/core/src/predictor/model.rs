//! T5-style encoder-decoder: pre-norm RMSNorm blocks without biases, ReLU
//! feed-forward layers, learned absolute position tables.

use super::config::ModelConfig;
use super::tokenizer::PAD_ID;
use super::{PredictorError, Result};
use crate::nn::{
    attention, attention_backward, linear_backward, matmul, merge_heads, relu, relu_backward,
    rmsnorm, rmsnorm_backward, split_heads, AttentionCache, Mask, NnError, Parameter, RmsCache,
    Scalar, Tensor,
};
use crate::rng::{fnv1a64, SplitMix64};

#[derive(Debug, Clone)]
struct AttnIdx {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone)]
struct FfnIdx {
    wi: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct EncLayerIdx {
    attn_norm: usize,
    attn: AttnIdx,
    ffn_norm: usize,
    ffn: FfnIdx,
}

#[derive(Debug, Clone)]
struct DecLayerIdx {
    self_norm: usize,
    self_attn: AttnIdx,
    cross_norm: usize,
    cross_attn: AttnIdx,
    ffn_norm: usize,
    ffn: FfnIdx,
}

/// Positions of every parameter in the flat parameter list.
#[derive(Debug, Clone)]
struct Layout {
    enc_embed: usize,
    enc_pos: usize,
    enc_layers: Vec<EncLayerIdx>,
    enc_norm: usize,
    dec_embed: usize,
    dec_pos: usize,
    dec_layers: Vec<DecLayerIdx>,
    dec_norm: usize,
    lm_head: usize,
}

struct SpecBuilder {
    specs: Vec<(String, Vec<usize>)>,
}

impl SpecBuilder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        self.specs.push((name, shape.to_vec()));
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.add(format!("{prefix}.q"), &[d, d]),
            k: self.add(format!("{prefix}.k"), &[d, d]),
            v: self.add(format!("{prefix}.v"), &[d, d]),
            o: self.add(format!("{prefix}.o"), &[d, d]),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIdx {
        FfnIdx {
            wi: self.add(format!("{prefix}.wi"), &[d, d_ff]),
            wo: self.add(format!("{prefix}.wo"), &[d_ff, d]),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>)>) {
    let d = c.d_model;
    let mut b = SpecBuilder { specs: Vec::new() };
    let enc_embed = b.add("enc.embed".into(), &[c.text_vocab, d]);
    let enc_pos = b.add("enc.pos".into(), &[c.max_src_len, d]);
    let enc_layers = (0..c.n_layers_enc)
        .map(|i| {
            let p = format!("enc.layers.{i}");
            EncLayerIdx {
                attn_norm: b.add(format!("{p}.attn_norm"), &[d]),
                attn: b.attn(&format!("{p}.attn"), d),
                ffn_norm: b.add(format!("{p}.ffn_norm"), &[d]),
                ffn: b.ffn(&format!("{p}.ffn"), d, c.d_ff),
            }
        })
        .collect();
    let enc_norm = b.add("enc.final_norm".into(), &[d]);
    let dec_embed = b.add("dec.embed".into(), &[c.unit_vocab, d]);
    let dec_pos = b.add("dec.pos".into(), &[c.max_tgt_len, d]);
    let dec_layers = (0..c.n_layers_dec)
        .map(|i| {
            let p = format!("dec.layers.{i}");
            DecLayerIdx {
                self_norm: b.add(format!("{p}.self_norm"), &[d]),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                cross_norm: b.add(format!("{p}.cross_norm"), &[d]),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ffn_norm: b.add(format!("{p}.ffn_norm"), &[d]),
                ffn: b.ffn(&format!("{p}.ffn"), d, c.d_ff),
            }
        })
        .collect();
    let dec_norm = b.add("dec.final_norm".into(), &[d]);
    let lm_head = b.add("lm_head".into(), &[d, c.unit_vocab]);
    let layout = Layout {
        enc_embed,
        enc_pos,
        enc_layers,
        enc_norm,
        dec_embed,
        dec_pos,
        dec_layers,
        dec_norm,
        lm_head,
    };
    (layout, b.specs)
}

/// Glorot-uniform matrices and unit norm gains. Each tensor draws from its
/// own SplitMix64 stream seeded with `seed + fnv1a64(name)`.
fn init_value<T: Scalar>(seed: u64, name: &str, shape: &[usize]) -> Tensor<T> {
    if shape.len() == 1 {
        return Tensor::filled(shape, 1.0);
    }
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let mut rng = SplitMix64::new(seed.wrapping_add(fnv1a64(name.as_bytes())));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::new(shape, data).expect("parameter shape")
}

/// The text-to-unit predictor.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Parameter<T>>,
}

#[derive(Debug, Clone)]
struct AttnCache<T: Scalar> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    att: AttentionCache<T>,
    merged: Tensor<T>,
}

#[derive(Debug, Clone)]
struct FfnCache<T: Scalar> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

#[derive(Debug, Clone)]
struct EncLayerCache<T: Scalar> {
    h0: Tensor<T>,
    rms1: RmsCache,
    attn: AttnCache<T>,
    h1: Tensor<T>,
    rms2: RmsCache,
    ffn: FfnCache<T>,
}

#[derive(Debug, Clone)]
struct DecLayerCache<T: Scalar> {
    h0: Tensor<T>,
    rms1: RmsCache,
    self_attn: AttnCache<T>,
    h1: Tensor<T>,
    rms2: RmsCache,
    cross_attn: AttnCache<T>,
    h2: Tensor<T>,
    rms3: RmsCache,
    ffn: FfnCache<T>,
}

/// Encoder output plus everything its backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderState<T: Scalar> {
    src: Vec<u32>,
    key_mask: Vec<bool>,
    layers: Vec<EncLayerCache<T>>,
    final_in: Tensor<T>,
    final_rms: RmsCache,
    out: Tensor<T>,
}

/// Activations saved by [`Seq2SeqModel::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar = f32> {
    enc: EncoderState<T>,
    tgt: Vec<u32>,
    dec_layers: Vec<DecLayerCache<T>>,
    dec_final_in: Tensor<T>,
    dec_rms: RmsCache,
    dec_out: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// FNV-1a fingerprint of every ReLU on/off decision in the pass.
    pub fn relu_pattern(&self) -> u64 {
        let mut bits = Vec::new();
        let ffns = self
            .enc
            .layers
            .iter()
            .map(|l| &l.ffn)
            .chain(self.dec_layers.iter().map(|l| &l.ffn));
        for f in ffns {
            bits.extend(f.pre.data().iter().map(|v| u8::from(v.to_f64() > 0.0)));
        }
        fnv1a64(&bits)
    }
}

fn add_into<T: Scalar>(grads: &mut [Tensor<T>], i: usize, g: &Tensor<T>) {
    grads[i].add_assign(g);
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let params = specs
            .into_iter()
            .map(|(name, shape)| {
                let v = init_value(config.seed, &name, &shape);
                Parameter::new(name, v)
            })
            .collect();
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Builds a model from explicit tensors, which must match the layout
    /// implied by `config` in order, name and shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mismatch = |reason: String| PredictorError::ShapeMismatchOnLoad {
            path: "<memory>".into(),
            reason,
        };
        if tensors.len() != specs.len() {
            return Err(mismatch(format!(
                "{} tensors, layout needs {}",
                tensors.len(),
                specs.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), (got_name, value)) in specs.into_iter().zip(tensors) {
            if name != got_name {
                return Err(mismatch(format!(
                    "expected tensor {name}, found {got_name}"
                )));
            }
            if value.shape() != shape.as_slice() {
                return Err(mismatch(format!(
                    "{name}: shape {:?}, layout needs {shape:?}",
                    value.shape()
                )));
            }
            value.check_finite(&name)?;
            params.push(Parameter::new(name, value));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Names and shapes of the parameters implied by a config.
    pub fn parameter_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        build_layout(config).1
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Seq2SeqModel<U> {
        Seq2SeqModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    /// All parameter values, concatenated in layout order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.to_f64_vec())
            .collect()
    }

    /// Inverse of [`flat_values`](Self::flat_values).
    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            for (dst, &v) in p.value.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *dst = T::from_f64(v);
            }
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill_zero();
        }
    }

    fn w(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    fn embed(
        &self,
        table: usize,
        pos: usize,
        ids: &[u32],
        vocab: usize,
        max_len: usize,
    ) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(NnError::ShapeMismatch("empty token sequence".into()).into());
        }
        if ids.len() > max_len {
            return Err(NnError::ShapeMismatch(format!(
                "sequence of {} exceeds position table of {max_len}",
                ids.len()
            ))
            .into());
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(
                NnError::ShapeMismatch(format!("token {bad} outside vocabulary {vocab}")).into(),
            );
        }
        let d = self.config.d_model;
        let mut out = Tensor::zeros(&[ids.len(), d]);
        let (tab, pos) = (self.w(table), self.w(pos));
        for (i, &t) in ids.iter().enumerate() {
            for ((o, &e), &p) in out
                .row_mut(i)
                .iter_mut()
                .zip(tab.row(t as usize))
                .zip(pos.row(i))
            {
                *o = T::from_f64(e.to_f64() + p.to_f64());
            }
        }
        Ok(out)
    }

    fn embed_backward(
        &self,
        table: usize,
        pos: usize,
        ids: &[u32],
        dx: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) {
        for (i, &t) in ids.iter().enumerate() {
            let src = dx.row(i);
            for (g, &v) in grads[table].row_mut(t as usize).iter_mut().zip(src) {
                *g = T::from_f64(g.to_f64() + v.to_f64());
            }
            for (g, &v) in grads[pos].row_mut(i).iter_mut().zip(src) {
                *g = T::from_f64(g.to_f64() + v.to_f64());
            }
        }
    }

    fn attn_forward(
        &self,
        idx: &AttnIdx,
        x: Tensor<T>,
        kv: &Tensor<T>,
        mask: &Mask,
    ) -> Result<(Tensor<T>, AttnCache<T>)> {
        let h = self.config.n_heads;
        let q = split_heads(&matmul(&x, self.w(idx.q))?, h)?;
        let k = split_heads(&matmul(kv, self.w(idx.k))?, h)?;
        let v = split_heads(&matmul(kv, self.w(idx.v))?, h)?;
        let (o, att) = attention(&q, &k, &v, mask)?;
        let merged = merge_heads(&o)?;
        let out = matmul(&merged, self.w(idx.o))?;
        Ok((
            out,
            AttnCache {
                x,
                q,
                k,
                v,
                att,
                merged,
            },
        ))
    }

    /// Returns `(dx, dkv)`.
    fn attn_backward(
        &self,
        idx: &AttnIdx,
        c: &AttnCache<T>,
        kv: &Tensor<T>,
        dout: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.config.n_heads;
        let (dmerged, dwo) = linear_backward(&c.merged, self.w(idx.o), dout)?;
        add_into(grads, idx.o, &dwo);
        let do_heads = split_heads(&dmerged, h)?;
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.att, &do_heads)?;
        let (dx, dwq) = linear_backward(&c.x, self.w(idx.q), &merge_heads(&dq)?)?;
        add_into(grads, idx.q, &dwq);
        let (mut dkv, dwk) = linear_backward(kv, self.w(idx.k), &merge_heads(&dk)?)?;
        add_into(grads, idx.k, &dwk);
        let (dkv_v, dwv) = linear_backward(kv, self.w(idx.v), &merge_heads(&dv)?)?;
        add_into(grads, idx.v, &dwv);
        dkv.add_assign(&dkv_v);
        Ok((dx, dkv))
    }

    fn ffn_forward(&self, idx: &FfnIdx, x: Tensor<T>) -> Result<(Tensor<T>, FfnCache<T>)> {
        let pre = matmul(&x, self.w(idx.wi))?;
        let act = relu(&pre);
        let out = matmul(&act, self.w(idx.wo))?;
        Ok((out, FfnCache { x, pre, act }))
    }

    fn ffn_backward(
        &self,
        idx: &FfnIdx,
        c: &FfnCache<T>,
        dout: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        let (dact, dwo) = linear_backward(&c.act, self.w(idx.wo), dout)?;
        add_into(grads, idx.wo, &dwo);
        let dpre = relu_backward(&c.pre, &dact);
        let (dx, dwi) = linear_backward(&c.x, self.w(idx.wi), &dpre)?;
        add_into(grads, idx.wi, &dwi);
        Ok(dx)
    }

    /// Runs the encoder. Source positions holding PAD are hidden from every
    /// attention read.
    pub fn encode(&self, src: &[u32]) -> Result<EncoderState<T>> {
        let c = &self.config;
        let l = &self.layout;
        let key_mask: Vec<bool> = src.iter().map(|&t| t != PAD_ID).collect();
        let mut h = self.embed(l.enc_embed, l.enc_pos, src, c.text_vocab, c.max_src_len)?;
        let mask = Mask::keys(src.len(), &key_mask);
        let mut layers = Vec::with_capacity(l.enc_layers.len());
        for li in &l.enc_layers {
            let (n1, rms1) = rmsnorm(&h, self.w(li.attn_norm))?;
            let kv = n1.clone();
            let (a, attn) = self.attn_forward(&li.attn, n1, &kv, &mask)?;
            let h1 = h.add(&a);
            let (n2, rms2) = rmsnorm(&h1, self.w(li.ffn_norm))?;
            let (f, ffn) = self.ffn_forward(&li.ffn, n2)?;
            let h2 = h1.add(&f);
            layers.push(EncLayerCache {
                h0: h,
                rms1,
                attn,
                h1,
                rms2,
                ffn,
            });
            h = h2;
        }
        let (out, final_rms) = rmsnorm(&h, self.w(l.enc_norm))?;
        out.check_finite("encoder output")?;
        Ok(EncoderState {
            src: src.to_vec(),
            key_mask,
            layers,
            final_in: h,
            final_rms,
            out,
        })
    }

    /// Decoder pass over `tgt_in` given a finished encoder state.
    pub fn decode_with(
        &self,
        enc: EncoderState<T>,
        tgt_in: &[u32],
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let c = &self.config;
        let l = &self.layout;
        let lt = tgt_in.len();
        let mut h = self.embed(l.dec_embed, l.dec_pos, tgt_in, c.unit_vocab, c.max_tgt_len)?;
        let causal = Mask::causal(lt);
        let cross = Mask::keys(lt, &enc.key_mask);
        let mut dec_layers = Vec::with_capacity(l.dec_layers.len());
        for li in &l.dec_layers {
            let (n1, rms1) = rmsnorm(&h, self.w(li.self_norm))?;
            let kv = n1.clone();
            let (a, self_attn) = self.attn_forward(&li.self_attn, n1, &kv, &causal)?;
            let h1 = h.add(&a);
            let (n2, rms2) = rmsnorm(&h1, self.w(li.cross_norm))?;
            let (x, cross_attn) = self.attn_forward(&li.cross_attn, n2, &enc.out, &cross)?;
            let h2 = h1.add(&x);
            let (n3, rms3) = rmsnorm(&h2, self.w(li.ffn_norm))?;
            let (f, ffn) = self.ffn_forward(&li.ffn, n3)?;
            let h3 = h2.add(&f);
            dec_layers.push(DecLayerCache {
                h0: h,
                rms1,
                self_attn,
                h1,
                rms2,
                cross_attn,
                h2,
                rms3,
                ffn,
            });
            h = h3;
        }
        let (dec_out, dec_rms) = rmsnorm(&h, self.w(l.dec_norm))?;
        let logits = matmul(&dec_out, self.w(l.lm_head))?;
        logits.check_finite("logits")?;
        let cache = ForwardCache {
            enc,
            tgt: tgt_in.to_vec(),
            dec_layers,
            dec_final_in: h,
            dec_rms,
            dec_out,
        };
        Ok((logits, cache))
    }

    /// Logits `[len(tgt_in), unit_vocab]` with activations kept for
    /// [`backward`](Self::backward).
    pub fn forward_cached(
        &self,
        src: &[u32],
        tgt_in: &[u32],
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let enc = self.encode(src)?;
        self.decode_with(enc, tgt_in)
    }

    pub fn forward(&self, src: &[u32], tgt_in: &[u32]) -> Result<Tensor<T>> {
        Ok(self.forward_cached(src, tgt_in)?.0)
    }

    /// Accumulates parameter gradients for `dlogits` into `grads`, which
    /// must be laid out like [`params`](Self::params).
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(NnError::ShapeMismatch("gradient buffer layout".into()).into());
        }
        let l = &self.layout;
        let (ddec_out, dhead) = linear_backward(&cache.dec_out, self.w(l.lm_head), dlogits)?;
        add_into(grads, l.lm_head, &dhead);
        let (mut dh, dg) = rmsnorm_backward(
            &cache.dec_final_in,
            self.w(l.dec_norm),
            &cache.dec_rms,
            &ddec_out,
        )?;
        add_into(grads, l.dec_norm, &dg);

        let mut denc_out = Tensor::zeros(cache.enc.out.shape());
        for (li, lc) in l.dec_layers.iter().zip(&cache.dec_layers).rev() {
            // h3 = h2 + ffn(norm(h2))
            let dn3 = self.ffn_backward(&li.ffn, &lc.ffn, &dh, grads)?;
            let (dh2, dg) = rmsnorm_backward(&lc.h2, self.w(li.ffn_norm), &lc.rms3, &dn3)?;
            add_into(grads, li.ffn_norm, &dg);
            dh.add_assign(&dh2);
            // h2 = h1 + cross(norm(h1), enc)
            let (dn2, dkv) =
                self.attn_backward(&li.cross_attn, &lc.cross_attn, &cache.enc.out, &dh, grads)?;
            denc_out.add_assign(&dkv);
            let (dh1, dg) = rmsnorm_backward(&lc.h1, self.w(li.cross_norm), &lc.rms2, &dn2)?;
            add_into(grads, li.cross_norm, &dg);
            dh.add_assign(&dh1);
            // h1 = h0 + self(norm(h0))
            let (mut dn1, dkv) =
                self.attn_backward(&li.self_attn, &lc.self_attn, &lc.self_attn.x, &dh, grads)?;
            dn1.add_assign(&dkv);
            let (dh0, dg) = rmsnorm_backward(&lc.h0, self.w(li.self_norm), &lc.rms1, &dn1)?;
            add_into(grads, li.self_norm, &dg);
            dh.add_assign(&dh0);
        }
        self.embed_backward(l.dec_embed, l.dec_pos, &cache.tgt, &dh, grads);

        let enc = &cache.enc;
        let (mut dh, dg) =
            rmsnorm_backward(&enc.final_in, self.w(l.enc_norm), &enc.final_rms, &denc_out)?;
        add_into(grads, l.enc_norm, &dg);
        for (li, lc) in l.enc_layers.iter().zip(&enc.layers).rev() {
            let dn2 = self.ffn_backward(&li.ffn, &lc.ffn, &dh, grads)?;
            let (dh1, dg) = rmsnorm_backward(&lc.h1, self.w(li.ffn_norm), &lc.rms2, &dn2)?;
            add_into(grads, li.ffn_norm, &dg);
            dh.add_assign(&dh1);
            let (mut dn1, dkv) = self.attn_backward(&li.attn, &lc.attn, &lc.attn.x, &dh, grads)?;
            dn1.add_assign(&dkv);
            let (dh0, dg) = rmsnorm_backward(&lc.h0, self.w(li.attn_norm), &lc.rms1, &dn1)?;
            add_into(grads, li.attn_norm, &dg);
            dh.add_assign(&dh0);
        }
        self.embed_backward(l.enc_embed, l.enc_pos, &enc.src, &dh, grads);
        Ok(())
    }

    /// Fresh zeroed gradient buffers matching the parameter layout.
    pub fn grad_buffers(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    }
}
