//! Pre-norm transformer stack with deterministic f32 execution.
//!
//! Block: `h += o(attn(rmsnorm(h)))`, then `h += down(tanh(up(rmsnorm(h))))`,
//! with causal multi-head softmax attention. Logits are
//! `rmsnorm(h_L) · headᵀ`.

use rayon::prelude::*;

use crate::calib::{CalibrationSet, Sequence};
use crate::container::{Container, ContainerKind, LayerEntry, ModelConfig, ModelManifest, QuantParams, QuantTag};
use crate::error::{LuqError, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::{rms_norm, Activations, Matrix};

pub const LINEAR_NAMES: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];
pub const Q: usize = 0;
pub const K: usize = 1;
pub const V: usize = 2;
pub const O: usize = 3;
pub const UP: usize = 4;
pub const DOWN: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// Weight used for execution; the dequantized payload for quantized layers.
    pub weight: Matrix,
    pub quant: Option<QuantizedTensor>,
}

impl Linear {
    pub fn dense(weight: Matrix) -> Self {
        Self { weight, quant: None }
    }

    pub fn quantized(q: QuantizedTensor) -> Result<Self> {
        Ok(Self { weight: dequantize_layer(&q)?, quant: Some(q) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub tag: QuantTag,
    pub qparams: Option<QuantParams>,
    pub linears: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub head: Matrix,
    pub layers: Vec<Layer>,
}

/// Inputs seen by the linears of one layer for one sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerInputs {
    /// Normalized input of q, k and v.
    pub attn_in: Vec<f32>,
    /// Concatenated head outputs, the input of o.
    pub attn_mix: Vec<f32>,
    /// Normalized input of up.
    pub mlp_in: Vec<f32>,
    /// `tanh(up(·))`, the input of down.
    pub mlp_act: Vec<f32>,
}

impl LayerInputs {
    /// Input activations of linear `j` (see [`LINEAR_NAMES`]).
    pub fn for_linear(&self, j: usize) -> &[f32] {
        match j {
            Q | K | V => &self.attn_in,
            O => &self.attn_mix,
            UP => &self.mlp_in,
            _ => &self.mlp_act,
        }
    }
}

pub fn dequantize_layer(q: &QuantizedTensor) -> Result<Matrix> {
    q.dequantize()
}

/// Add sinusoidal position encodings in place.
fn add_positions(x: &mut [f32], n: usize, d: usize) {
    for t in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f32;
            let freq = 1.0 / 10000f32.powf(2.0 * pair / d as f32);
            let a = t as f32 * freq;
            x[t * d + i] += if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
}

impl LayerStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn tags(&self) -> Vec<QuantTag> {
        self.layers.iter().map(|l| l.tag).collect()
    }

    pub fn manifest(&self) -> ModelManifest {
        let mut m = ModelManifest::dense(self.config.clone());
        for (e, l) in m.layers.iter_mut().zip(&self.layers) {
            e.tag = l.tag;
            e.qparams = l.qparams;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (v, d) = (self.config.vocab_size, self.config.hidden_dim);
        if self.layers.len() != self.config.num_layers {
            return Err(LuqError::Manifest(format!("{} layers for num_layers = {}", self.layers.len(), self.config.num_layers)));
        }
        for (name, m) in [("embed", &self.embed), ("head", &self.head)] {
            if (m.rows, m.cols) != (v, d) {
                return Err(LuqError::Manifest(format!("{name} must be [{v}, {d}]")));
            }
        }
        let shapes = self.config.linear_shapes();
        for (i, l) in self.layers.iter().enumerate() {
            if l.linears.len() != 6 {
                return Err(LuqError::Manifest(format!("layer {i} has {} linears", l.linears.len())));
            }
            for (lin, (name, [r, c])) in l.linears.iter().zip(shapes) {
                if (lin.weight.rows, lin.weight.cols) != (r, c) {
                    return Err(LuqError::Manifest(format!("layers.{i}.{name} must be [{r}, {c}]")));
                }
                match (&lin.quant, l.tag) {
                    (None, QuantTag::Fp32) => {}
                    (Some(q), tag) if q.method.tag() == tag => {}
                    _ => return Err(LuqError::Manifest(format!("layers.{i}.{name}: payload does not match tag"))),
                }
            }
        }
        Ok(())
    }

    /// Embed one sequence: token lookup for text, the stored vectors for
    /// multimodal input. Positions are added by the forward pass.
    pub fn embed_sequence(&self, seq: &Sequence) -> Result<Vec<f32>> {
        let d = self.config.hidden_dim;
        match seq {
            Sequence::Text(ids) => self.embed_tokens(ids),
            Sequence::Multimodal(m) => {
                if m.embeds.len() != m.len() * d {
                    return Err(LuqError::shape(format!("multimodal embedding width differs from d = {d}")));
                }
                Ok(m.embeds.clone())
            }
        }
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(ids.len() * self.config.hidden_dim);
        for &t in ids {
            if t as usize >= self.config.vocab_size {
                return Err(LuqError::invalid(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
            }
            out.extend_from_slice(self.embed.row(t as usize));
        }
        Ok(out)
    }

    pub fn embed_set(&self, set: &CalibrationSet) -> Result<Activations> {
        let n = set.seq_len;
        let d = self.config.hidden_dim;
        let mut data = Vec::with_capacity(set.len() * n * d);
        for s in &set.sequences {
            if s.len() != n {
                return Err(LuqError::shape("calibration sequences differ in length"));
            }
            data.extend(self.embed_sequence(s)?);
        }
        Activations::from_vec(set.len(), n, d, data)
    }

    /// Apply layer `i` in place to one sequence `x` of `n` tokens, optionally
    /// recording the inputs of its linears.
    pub fn apply_layer(&self, i: usize, x: &mut [f32], n: usize, trace: Option<&mut LayerInputs>) -> Result<()> {
        self.apply_block(&self.layers[i], i, x, n, trace)
    }

    /// Apply `layer` as if it were layer `i` of this stack.
    pub fn apply_block(&self, layer: &Layer, i: usize, x: &mut [f32], n: usize, trace: Option<&mut LayerInputs>) -> Result<()> {
        let cfg = &self.config;
        let (d, nh, hd) = (cfg.hidden_dim, cfg.heads, cfg.head_dim());
        let lin = &layer.linears;

        let a = rms_norm(x, d);
        let q = lin[Q].weight.apply(&a, n);
        let k = lin[K].weight.apply(&a, n);
        let v = lin[V].weight.apply(&a, n);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut mix = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n];
        for h in 0..nh {
            let off = h * hd;
            for t in 0..n {
                let qt = &q[t * d + off..t * d + off + hd];
                let mut m = f32::NEG_INFINITY;
                for s in 0..=t {
                    let ks = &k[s * d + off..s * d + off + hd];
                    let z = crate::tensor::dot(qt, ks) * scale;
                    scores[s] = z;
                    m = m.max(z);
                }
                let mut denom = 0.0f32;
                for sc in scores.iter_mut().take(t + 1) {
                    *sc = (*sc - m).exp();
                    denom += *sc;
                }
                // Accumulate offsets from v_t so that equal value rows mix
                // back to exactly v_t.
                let vt = &v[t * d + off..t * d + off + hd];
                let out = &mut mix[t * d + off..t * d + off + hd];
                out.copy_from_slice(vt);
                for s in 0..t {
                    let p = scores[s] / denom;
                    let vs = &v[s * d + off..s * d + off + hd];
                    for ((o, vv), vr) in out.iter_mut().zip(vs).zip(vt) {
                        *o += p * (vv - vr);
                    }
                }
            }
        }
        let attn = lin[O].weight.apply(&mix, n);
        for (xv, av) in x.iter_mut().zip(&attn) {
            *xv += av;
        }

        let m_in = rms_norm(x, d);
        let mut act = lin[UP].weight.apply(&m_in, n);
        for u in act.iter_mut() {
            *u = u.tanh();
        }
        let down = lin[DOWN].weight.apply(&act, n);
        for (xv, dv) in x.iter_mut().zip(&down) {
            *xv += dv;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(LuqError::NumericOverflow(i + 1));
        }
        if let Some(t) = trace {
            *t = LayerInputs { attn_in: a, attn_mix: mix, mlp_in: m_in, mlp_act: act };
        }
        Ok(())
    }

    fn prepare_input(&self, x: &[f32], n: usize) -> Result<Vec<f32>> {
        let d = self.config.hidden_dim;
        if x.len() != n * d {
            return Err(LuqError::shape(format!("input width differs from d = {d}")));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(LuqError::invalid("non-finite input"));
        }
        let mut h = x.to_vec();
        if self.config.positions {
            add_positions(&mut h, n, d);
        }
        Ok(h)
    }

    /// Run every layer on one sequence; `observe(i, h_i)` sees each block
    /// output (0-based `i`).
    pub fn run_sequence(&self, x: &[f32], n: usize, observe: &mut dyn FnMut(usize, &[f32])) -> Result<Vec<f32>> {
        let mut h = self.prepare_input(x, n)?;
        for i in 0..self.layers.len() {
            self.apply_layer(i, &mut h, n, None)?;
            observe(i, &h);
        }
        Ok(h)
    }

    /// Hidden state with positions applied, before any layer.
    pub fn initial_state(&self, x: &[f32], n: usize) -> Result<Vec<f32>> {
        self.prepare_input(x, n)
    }

    pub fn logits(&self, h: &[f32], n: usize) -> Vec<f32> {
        self.head.apply(&rms_norm(h, self.config.hidden_dim), n)
    }

    /// Hidden states `[B, N, d]` and logits `[B, N, vocab]`.
    pub fn forward(&self, inputs: &Activations) -> Result<(Activations, Vec<f32>)> {
        self.forward_observed(inputs, &|_, _, _| {})
    }

    /// Forward pass calling `observe(b, i, h_i)` on every block output.
    pub fn forward_observed(
        &self,
        inputs: &Activations,
        observe: &(dyn Fn(usize, usize, &[f32]) + Sync),
    ) -> Result<(Activations, Vec<f32>)> {
        let [b, n, d] = inputs.shape();
        if d != self.config.hidden_dim {
            return Err(LuqError::shape(format!("input width {d} differs from d = {}", self.config.hidden_dim)));
        }
        let per_seq: Vec<(Vec<f32>, Vec<f32>)> = (0..b)
            .into_par_iter()
            .map(|s| {
                let h = self.run_sequence(inputs.sequence(s), n, &mut |i, h| observe(s, i, h))?;
                let l = self.logits(&h, n);
                Ok((h, l))
            })
            .collect::<Result<_>>()?;
        let mut hidden = Vec::with_capacity(b * n * d);
        let mut logits = Vec::with_capacity(b * n * self.config.vocab_size);
        for (h, l) in per_seq {
            hidden.extend(h);
            logits.extend(l);
        }
        Ok((Activations::from_vec(b, n, d, hidden)?, logits))
    }

    /// Block outputs `X_1..X_L`, each `[B, N, d]`.
    pub fn capture_activations(&self, inputs: &Activations) -> Result<Vec<Activations>> {
        let [b, n, d] = inputs.shape();
        let per_seq: Vec<Vec<Vec<f32>>> = (0..b)
            .into_par_iter()
            .map(|s| {
                let mut outs = Vec::with_capacity(self.layers.len());
                self.run_sequence(inputs.sequence(s), n, &mut |_, h| outs.push(h.to_vec()))?;
                Ok(outs)
            })
            .collect::<Result<_>>()?;
        let mut layers: Vec<Vec<f32>> = vec![Vec::with_capacity(b * n * d); self.layers.len()];
        for seq in per_seq {
            for (dst, h) in layers.iter_mut().zip(seq) {
                dst.extend(h);
            }
        }
        layers.into_iter().map(|data| Activations::from_vec(b, n, d, data)).collect()
    }

    pub fn capture_calibration(&self, set: &CalibrationSet) -> Result<Vec<Activations>> {
        self.capture_activations(&self.embed_set(set)?)
    }

    /// Replace every quantized linear by its dequantized f32 weight.
    pub fn to_dense(&self) -> LayerStack {
        let mut s = self.clone();
        for l in &mut s.layers {
            l.tag = QuantTag::Fp32;
            l.qparams = None;
            for lin in &mut l.linears {
                lin.quant = None;
            }
        }
        s
    }

    pub fn to_container(&self) -> Result<Container> {
        self.to_container_with(serde_json::Map::new())
    }

    /// Serialize; `extra` keys are merged into the header config.
    pub fn to_container_with(&self, extra: serde_json::Map<String, serde_json::Value>) -> Result<Container> {
        self.validate()?;
        let manifest = self.manifest();
        let quantized = self.layers.iter().any(|l| l.tag != QuantTag::Fp32);
        let kind = if quantized { ContainerKind::Quantized } else { ContainerKind::Model };
        let mut config = serde_json::to_value(&manifest)?;
        if let serde_json::Value::Object(map) = &mut config {
            map.extend(extra);
        }
        let mut c = Container::new(kind, config);
        c.push_f32(&manifest.embed, &[self.embed.rows, self.embed.cols], &self.embed.data)?;
        c.push_f32(&manifest.head, &[self.head.rows, self.head.cols], &self.head.data)?;
        for (entry, layer) in manifest.layers.iter().zip(&self.layers) {
            for (name, lin) in entry.linears.iter().zip(&layer.linears) {
                match &lin.quant {
                    None => c.push_f32(name, &[lin.weight.rows, lin.weight.cols], &lin.weight.data)?,
                    Some(q) => q.write_records(&mut c, name)?,
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind == ContainerKind::Calib {
            return Err(LuqError::Manifest("expected a model container, found calib".into()));
        }
        let manifest: ModelManifest = serde_json::from_value(c.config.clone())
            .map_err(|e| LuqError::Manifest(format!("model header: {e}")))?;
        manifest.validate()?;
        let cfg = manifest.config.clone();
        let read_dense = |name: &str, r: usize, cols: usize| -> Result<Matrix> {
            let (shape, data) = c.f32s(name)?;
            if shape != [r, cols] {
                return Err(LuqError::Manifest(format!("`{name}` has shape {shape:?}, expected [{r}, {cols}]")));
            }
            Matrix::from_vec(r, cols, data)
        };
        let embed = read_dense(&manifest.embed, cfg.vocab_size, cfg.hidden_dim)?;
        let head = read_dense(&manifest.head, cfg.vocab_size, cfg.hidden_dim)?;
        let shapes = cfg.linear_shapes();
        let layers = manifest
            .layers
            .iter()
            .map(|e: &LayerEntry| {
                let linears = e
                    .linears
                    .iter()
                    .zip(shapes)
                    .map(|(name, (_, [r, cols]))| match e.tag {
                        QuantTag::Fp32 => Ok(Linear::dense(read_dense(name, r, cols)?)),
                        tag => {
                            let q = QuantizedTensor::read_records(c, name, tag, e.qparams.expect("validated"))?;
                            Linear::quantized(q)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Layer { tag: e.tag, qparams: e.qparams, linears })
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = LayerStack { config: cfg, embed, head, layers };
        stack.validate()?;
        Ok(stack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{synth_stack, SynthSpec};

    fn small(positions: bool) -> LayerStack {
        let mut spec = SynthSpec::new(vec![2, 16], 16, 5);
        spec.positions = positions;
        LayerStack::from_container(&synth_stack(&spec).unwrap()).unwrap()
    }

    fn zero_out(stack: &mut LayerStack) {
        for l in &mut stack.layers {
            for j in [O, DOWN] {
                l.linears[j].weight.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn inputs(b: usize, n: usize, d: usize) -> Activations {
        let data = (0..b * n * d).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
        Activations::from_vec(b, n, d, data).unwrap()
    }

    #[test]
    fn identity_layers_pass_inputs_through() {
        let mut s = small(false);
        zero_out(&mut s);
        let x = inputs(2, 8, 16);
        let (h, _) = s.forward(&x).unwrap();
        assert_eq!(h.data, x.data);
        let acts = s.capture_activations(&x).unwrap();
        assert!(acts.iter().all(|a| a.data == x.data));
    }

    #[test]
    fn shapes() {
        let s = small(true);
        let x = inputs(3, 5, 16);
        let (h, logits) = s.forward(&x).unwrap();
        assert_eq!(h.shape(), [3, 5, 16]);
        assert_eq!(logits.len(), 3 * 5 * s.config.vocab_size);
        let acts = s.capture_activations(&x).unwrap();
        assert_eq!(acts.len(), 2);
        assert_eq!(acts[1], h);
    }

    #[test]
    fn repeated_token_gives_one_vector_per_layer() {
        let s = small(false);
        let x = Activations::from_vec(1, 6, 16, s.embed_tokens(&[3; 6]).unwrap()).unwrap();
        for a in s.capture_activations(&x).unwrap() {
            let first = a.token(0, 0).to_vec();
            for t in 1..6 {
                assert_eq!(a.token(0, t), &first[..]);
            }
        }
    }

    #[test]
    fn overflow_names_the_layer() {
        let mut s = small(false);
        s.layers[1].linears[DOWN].weight.data.iter_mut().for_each(|v| *v = f32::MAX);
        let err = s.forward(&inputs(1, 4, 16)).unwrap_err();
        assert_eq!(err.to_string(), "numeric overflow in layer 2");
    }

    #[test]
    fn width_mismatch_rejected() {
        let s = small(false);
        assert!(s.forward(&inputs(1, 4, 8)).is_err());
    }
}
