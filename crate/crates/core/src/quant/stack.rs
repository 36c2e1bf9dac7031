//! Layer-by-layer quantization of a whole stack.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{HessianAccumulator, Propagation, QuantConfig, QuantMethod};
use crate::calib::CalibrationSet;
use crate::container::Container;
use crate::error::{LuqError, Result};
use crate::net::{Layer, LayerInputs, LayerStack, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedStack {
    pub stack: LayerStack,
    pub methods: Vec<QuantMethod>,
    /// Realized bits per weight of each layer (code planes over all six linears).
    pub layer_bits: Vec<f64>,
}

impl QuantizedStack {
    pub fn avg_bits(&self) -> f64 {
        super::avg_bitwidth(&self.layer_bits).unwrap_or(0.0)
    }

    pub fn to_container(&self, extra: serde_json::Map<String, serde_json::Value>) -> Result<Container> {
        let mut extra = extra;
        extra.insert("layer_bits".into(), serde_json::to_value(&self.layer_bits)?);
        self.stack.to_container_with(extra)
    }
}

struct Node {
    layer: Layer,
    bits: f64,
    /// Hidden states after this layer, one per calibration sequence.
    states: Arc<Vec<Vec<f32>>>,
}

/// Quantizes stacks under varying per-layer methods, reusing work for any
/// shared prefix of methods (in network order).
pub struct StackQuantizer<'a> {
    stack: &'a LayerStack,
    config: QuantConfig,
    seq_len: usize,
    initial: Arc<Vec<Vec<f32>>>,
    cache: HashMap<Vec<QuantMethod>, Arc<Node>>,
    fp_states: Vec<Arc<Vec<Vec<f32>>>>,
    fp_inputs: Vec<Option<Arc<Vec<LayerInputs>>>>,
}

impl<'a> StackQuantizer<'a> {
    pub fn new(stack: &'a LayerStack, calib: &CalibrationSet, config: &QuantConfig) -> Result<Self> {
        config.validate()?;
        if calib.is_empty() {
            return Err(LuqError::Empty("calibration set"));
        }
        if calib.hidden_dim != stack.hidden_dim() {
            return Err(LuqError::shape(format!(
                "calibration width {} for a model with d = {}",
                calib.hidden_dim,
                stack.hidden_dim()
            )));
        }
        let n = calib.seq_len;
        let initial = calib
            .sequences
            .iter()
            .map(|s| stack.initial_state(&stack.embed_sequence(s)?, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stack,
            config: config.clone(),
            seq_len: n,
            initial: Arc::new(initial),
            cache: HashMap::new(),
            fp_states: Vec::new(),
            fp_inputs: vec![None; stack.num_layers()],
        })
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    /// Run layer `i` (full precision) over `states`, returning its linear
    /// inputs and outputs.
    fn trace(&self, i: usize, states: &[Vec<f32>]) -> Result<(Vec<LayerInputs>, Vec<Vec<f32>>)> {
        let n = self.seq_len;
        let out: Vec<(LayerInputs, Vec<f32>)> = states
            .par_iter()
            .map(|s| {
                let mut x = s.clone();
                let mut t = LayerInputs::default();
                self.stack.apply_layer(i, &mut x, n, Some(&mut t))?;
                Ok((t, x))
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().unzip())
    }

    fn fp_states_before(&mut self, i: usize) -> Result<Arc<Vec<Vec<f32>>>> {
        while self.fp_states.len() < i {
            let j = self.fp_states.len();
            let prev = if j == 0 { self.initial.clone() } else { self.fp_states[j - 1].clone() };
            let (inputs, outs) = self.trace(j, &prev)?;
            self.fp_inputs[j] = Some(Arc::new(inputs));
            self.fp_states.push(Arc::new(outs));
        }
        Ok(if i == 0 { self.initial.clone() } else { self.fp_states[i - 1].clone() })
    }

    fn quantize_layer(&self, i: usize, method: QuantMethod, inputs: &[LayerInputs]) -> Result<(Layer, f64)> {
        let d = self.stack.hidden_dim();
        let ff = self.stack.config.ff_dim;
        let n = self.seq_len;
        // q, k and v share one input stream.
        let sources = [0usize, 0, 0, 1, 2, 3];
        let widths = [d, d, d, ff];
        let hessians = [0usize, 1, 2, 3]
            .par_iter()
            .map(|&src| {
                let lin = [0, 3, 4, 5][src];
                let mut h = HessianAccumulator::new(widths[src]);
                for t in inputs {
                    h.add_batch(t.for_linear(lin), n)?;
                }
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        let layer = &self.stack.layers[i];
        let quantized = (0..6)
            .into_par_iter()
            .map(|j| {
                let q = self.config.quantize(method, &layer.linears[j].weight, &hessians[sources[j]])?;
                Linear::quantized(q)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut code_bits, mut numel) = (0.0, 0usize);
        for l in &quantized {
            let q = l.quant.as_ref().expect("quantized");
            code_bits += q.bits_per_weight() * q.numel() as f64;
            numel += q.numel();
        }
        let bits = code_bits / numel as f64;
        let layer = Layer { tag: method.tag(), qparams: Some(self.config.params_for(method)), linears: quantized };
        Ok((layer, bits))
    }

    fn node(&mut self, methods: &[QuantMethod]) -> Result<Arc<Node>> {
        if let Some(n) = self.cache.get(methods) {
            return Ok(n.clone());
        }
        let i = methods.len() - 1;
        let (prev_states, inputs) = match self.config.propagation {
            Propagation::Sequential => {
                let prev = if i == 0 { self.initial.clone() } else { self.node(&methods[..i])?.states.clone() };
                let (inputs, _) = self.trace(i, &prev)?;
                (prev, Arc::new(inputs))
            }
            Propagation::Independent => {
                let prev = self.fp_states_before(i)?;
                if self.fp_inputs[i].is_none() {
                    let (inputs, _) = self.trace(i, &prev)?;
                    self.fp_inputs[i] = Some(Arc::new(inputs));
                }
                (prev, self.fp_inputs[i].clone().expect("filled above"))
            }
        };
        let (layer, bits) = self.quantize_layer(i, methods[i], &inputs)?;
        let states = match self.config.propagation {
            Propagation::Sequential => {
                let n = self.seq_len;
                let stack = self.stack;
                prev_states
                    .par_iter()
                    .map(|s| {
                        let mut x = s.clone();
                        stack.apply_block(&layer, i, &mut x, n, None)?;
                        Ok(x)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Propagation::Independent => Vec::new(),
        };
        let node = Arc::new(Node { layer, bits, states: Arc::new(states) });
        self.cache.insert(methods.to_vec(), node.clone());
        Ok(node)
    }

    /// Quantize every layer `i` with `methods[i]`.
    pub fn quantize(&mut self, methods: &[QuantMethod]) -> Result<QuantizedStack> {
        if methods.len() != self.stack.num_layers() {
            return Err(LuqError::invalid(format!(
                "{} layer methods for a stack of {} layers",
                methods.len(),
                self.stack.num_layers()
            )));
        }
        let mut stack = self.stack.clone();
        let mut layer_bits = Vec::with_capacity(methods.len());
        for i in 0..methods.len() {
            let node = self.node(&methods[..=i])?;
            stack.layers[i] = node.layer.clone();
            layer_bits.push(node.bits);
        }
        Ok(QuantizedStack { stack, methods: methods.to_vec(), layer_bits })
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

/// Quantize `stack` layer by layer in network order. With sequential
/// propagation the calibration inputs of layer `i` come from the
/// already-quantized layers before it.
pub fn quantize_stack(
    stack: &LayerStack,
    methods: &[QuantMethod],
    calib: &CalibrationSet,
    config: &QuantConfig,
) -> Result<QuantizedStack> {
    StackQuantizer::new(stack, calib, config)?.quantize(methods)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::Sequence;
    use crate::container::{synth_layer_stack, SynthSpec};

    fn setup() -> (LayerStack, CalibrationSet) {
        let stack = synth_layer_stack(&SynthSpec::new(vec![2, 2, 16, 16], 16, 3)).unwrap();
        let sequences = (0..6).map(|s| Sequence::Text((0..12).map(|t| ((s * 5 + t * 3) % 32) as u32).collect())).collect();
        let calib = CalibrationSet { sequences, seq_len: 12, hidden_dim: 16, alpha: 0.0, seed: 0 };
        (stack, calib)
    }

    #[test]
    fn cached_prefixes_do_not_change_results() {
        let (stack, calib) = setup();
        let cfg = QuantConfig::default();
        use QuantMethod::*;
        let plans = [[Bin, Gptq, Gptq, Gptq], [Bin, Bin, Gptq, Gptq], [Bin, Bin, Gptq, Bin]];
        let mut shared = StackQuantizer::new(&stack, &calib, &cfg).unwrap();
        for p in &plans {
            let a = shared.quantize(p).unwrap();
            let b = quantize_stack(&stack, p, &calib, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn all_binary_bits_in_window() {
        let (stack, calib) = setup();
        let q = quantize_stack(&stack, &[QuantMethod::Bin; 4], &calib, &QuantConfig::default()).unwrap();
        let b = q.avg_bits();
        assert!((1.05..=1.15).contains(&b), "{b}");
    }

    #[test]
    fn other_layers_untouched() {
        let (stack, calib) = setup();
        use QuantMethod::*;
        let cfg = QuantConfig { propagation: Propagation::Independent, ..QuantConfig::default() };
        let a = quantize_stack(&stack, &[Gptq, Gptq, Gptq, Gptq], &calib, &cfg).unwrap();
        let b = quantize_stack(&stack, &[Gptq, Bin, Gptq, Gptq], &calib, &cfg).unwrap();
        for i in [0, 2, 3] {
            assert_eq!(a.stack.layers[i], b.stack.layers[i]);
        }
        assert_ne!(a.stack.layers[1], b.stack.layers[1]);
    }

    #[test]
    fn method_count_checked() {
        let (stack, calib) = setup();
        assert!(quantize_stack(&stack, &[QuantMethod::Bin], &calib, &QuantConfig::default()).is_err());
    }
}
