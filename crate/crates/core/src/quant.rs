//! Per-tensor affine int8 quantization and the frozen integer backbone.
//!
//! Real values map to int8 as `x ≈ scale * (q - zero_point)`. Backbone layers
//! are 1×1 convolutions with int8 weights (zero point 0), int32 biases at
//! scale `s_in * s_w`, and int32 accumulation. Accumulator overflow is an
//! error, never a wrap.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKBONE_MAGIC: &[u8; 4] = b"FCB1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f32,
    zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Numeric(format!("quantization scale must be > 0, got {scale}")));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::Numeric(format!(
                "zero point {zero_point} outside [-128, 127]"
            )));
        }
        Ok(Self { scale, zero_point })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    /// Smallest and largest representable real value.
    pub fn range(&self) -> (f32, f32) {
        (
            self.scale * (-128 - self.zero_point) as f32,
            self.scale * (127 - self.zero_point) as f32,
        )
    }

    pub fn quantize_value(&self, x: f32) -> i8 {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f32;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize_value(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    qparams: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("incompatible with {} int8 values", data.len()),
            });
        }
        Ok(Self { shape, data, qparams })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn qparams(&self) -> QuantParams {
        self.qparams
    }
}

/// `q = clamp(round_half_even(x / scale) + zero_point, -128, 127)`.
pub fn quantize(x: &Tensor, qp: QuantParams) -> Result<QuantTensor> {
    if !x.is_finite() {
        return Err(Error::Numeric("cannot quantize non-finite values".into()));
    }
    let data = x.data().iter().map(|&v| qp.quantize_value(v)).collect();
    QuantTensor::new(x.shape().to_vec(), data, qp)
}

pub fn dequantize(q: &QuantTensor) -> Tensor {
    let data = q.data.iter().map(|&v| q.qparams.dequantize_value(v)).collect();
    Tensor::new(q.shape.clone(), data).expect("QuantTensor shape is validated")
}

/// One frozen 1×1 convolution in the integer pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    c_in: usize,
    c_out: usize,
    weights: Vec<i8>,
    weight_scale: f32,
    bias: Vec<i32>,
    output: QuantParams,
    relu: bool,
}

impl QuantLayer {
    pub fn new(
        c_in: usize,
        c_out: usize,
        weights: Vec<i8>,
        weight_scale: f32,
        bias: Vec<i32>,
        output: QuantParams,
        relu: bool,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Shape {
                shape: vec![c_out, c_in],
                reason: "layer dimensions must be positive".into(),
            });
        }
        if weights.len() != c_in * c_out {
            return Err(Error::dim("quant layer weights", &[c_out, c_in], &[weights.len()]));
        }
        if bias.len() != c_out {
            return Err(Error::dim("quant layer bias", &[c_out], &[bias.len()]));
        }
        if !(weight_scale.is_finite() && weight_scale > 0.0) {
            return Err(Error::Numeric(format!("weight scale must be > 0, got {weight_scale}")));
        }
        Ok(Self {
            c_in,
            c_out,
            weights,
            weight_scale,
            bias,
            output,
            relu,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn weights(&self) -> &[i8] {
        &self.weights
    }

    pub fn weight_scale(&self) -> f32 {
        self.weight_scale
    }

    pub fn bias(&self) -> &[i32] {
        &self.bias
    }

    pub fn output(&self) -> QuantParams {
        self.output
    }

    pub fn relu(&self) -> bool {
        self.relu
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, x: &[i8], input: QuantParams, hw: usize) -> Result<Vec<i8>> {
        let multiplier =
            input.scale() as f64 * self.weight_scale as f64 / self.output.scale() as f64;
        let zp_in = input.zero_point();
        let zp_out = self.output.zero_point();
        let floor = if self.relu { zp_out } else { -128 };
        let mut out = vec![0i8; self.c_out * hw];
        for o in 0..self.c_out {
            let row = &self.weights[o * self.c_in..(o + 1) * self.c_in];
            for s in 0..hw {
                let mut acc = self.bias[o];
                for (i, &w) in row.iter().enumerate() {
                    let prod = (x[i * hw + s] as i32 - zp_in) * w as i32;
                    acc = acc.checked_add(prod).ok_or_else(|| {
                        Error::Numeric(format!("int32 accumulator overflow at channel {o}"))
                    })?;
                }
                let q = (acc as f64 * multiplier).round_ties_even() as i64 + zp_out as i64;
                out[o * hw + s] = q.clamp(floor as i64, 127) as i8;
            }
        }
        Ok(out)
    }
}

/// Shape of the stand-in feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    /// `[C, H, W]` of the int8 input.
    pub input_shape: [usize; 3],
    pub input_scale: f32,
    /// Output channels of each hidden layer (relu applied).
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_shape: [32, 4, 4],
            input_scale: 0.05,
            hidden: vec![256],
            feature_dim: 64,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(
                "backbone dimensions (input_shape, hidden, feature_dim) must be positive".into(),
            ));
        }
        QuantParams::new(self.input_scale, 0)
            .map_err(|e| Error::Config(format!("backbone.input_scale: {e}")))?;
        Ok(())
    }

    pub fn input_qparams(&self) -> QuantParams {
        QuantParams::new(self.input_scale, 0).expect("validated input scale")
    }
}

/// Frozen int8 feature extractor: a chain of 1×1 conv layers followed by a
/// global average pool over the dequantized output.
///
/// There are no mutating methods; a backbone is fixed once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    input_shape: [usize; 3],
    input: QuantParams,
    layers: Vec<QuantLayer>,
}

impl FrozenBackbone {
    pub fn new(input_shape: [usize; 3], input: QuantParams, layers: Vec<QuantLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape {
                shape: input_shape.to_vec(),
                reason: "backbone needs at least one layer".into(),
            });
        }
        if input_shape.contains(&0) {
            return Err(Error::Shape {
                shape: input_shape.to_vec(),
                reason: "input dimensions must be positive".into(),
            });
        }
        let mut c = input_shape[0];
        for layer in &layers {
            if layer.c_in != c {
                return Err(Error::dim("backbone layer chain", &[c], &[layer.c_in]));
            }
            c = layer.c_out;
        }
        Ok(Self {
            input_shape,
            input,
            layers,
        })
    }

    /// Random backbone: Gaussian weights calibrated per tensor
    /// (`scale = max|w| / 127`), small Gaussian biases, and output scales
    /// chosen so ±4 typical activation magnitudes fit in int8.
    pub fn random<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let input = spec.input_qparams();
        // Inputs are expected to occupy roughly a quarter of the int8 range.
        let mut typical = input.scale() * 32.0;
        let mut in_q = input;
        let mut c_in = spec.input_shape[0];
        let mut layers = Vec::new();
        let dims = spec.hidden.iter().map(|&h| (h, true)).chain([(spec.feature_dim, false)]);
        for (c_out, relu) in dims {
            let std = (1.0 / c_in as f32).sqrt();
            let normal = Normal::new(0.0f32, std).expect("positive std");
            let w: Vec<f32> = (0..c_in * c_out).map(|_| normal.sample(rng)).collect();
            let max_abs = w.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
            let w_scale = max_abs / 127.0;
            let weights: Vec<i8> = w
                .iter()
                .map(|&v| (v / w_scale).round_ties_even().clamp(-127.0, 127.0) as i8)
                .collect();

            let row_norm = (0..c_out)
                .map(|o| w[o * c_in..(o + 1) * c_in].iter().map(|v| v * v).sum::<f32>())
                .sum::<f32>()
                / c_out as f32;
            let bias_std = 0.1 * typical;
            let bias_scale = in_q.scale() * w_scale;
            let bias_dist = Normal::new(0.0f32, bias_std.max(f32::MIN_POSITIVE)).expect("positive std");
            let bias: Vec<i32> = (0..c_out)
                .map(|_| (bias_dist.sample(rng) / bias_scale).round_ties_even() as i32)
                .collect();

            typical *= row_norm.sqrt();
            let out_q = QuantParams::new(4.0 * typical / 127.0, 0)?;
            layers.push(QuantLayer::new(c_in, c_out, weights, w_scale, bias, out_q, relu)?);
            in_q = out_q;
            c_in = c_out;
        }
        Self::new(spec.input_shape, input, layers)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_qparams(&self) -> QuantParams {
        self.input
    }

    pub fn layers(&self) -> &[QuantLayer] {
        &self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").c_out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(QuantLayer::parameter_count).sum()
    }

    /// Integer forward pass ending in a float feature vector.
    pub fn forward(&self, x: &QuantTensor) -> Result<Tensor> {
        let [c, h, w] = self.input_shape;
        if x.shape() != [c, h, w] {
            return Err(Error::dim("backbone_forward", &[c, h, w], x.shape()));
        }
        let hw = h * w;
        let mut act = x.data().to_vec();
        let mut qp = x.qparams();
        for layer in &self.layers {
            act = layer.forward(&act, qp, hw)?;
            qp = layer.output;
        }
        let c_out = self.feature_dim();
        let inv = 1.0 / hw as f32;
        let pooled = (0..c_out)
            .map(|ch| {
                act[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&q| qp.dequantize_value(q))
                    .sum::<f32>()
                    * inv
            })
            .collect();
        Tensor::new(vec![c_out], pooled)
    }

    /// Stable digest of every parameter, used to confirm nothing mutates the
    /// backbone.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.to_bytes().hash(&mut h);
        h.finish()
    }

    /// Little-endian binary container:
    ///
    /// ```text
    /// "FCB1" | u32 layers | u32 C, H, W | f32 input scale | i32 input zp
    /// per layer: u32 c_out | u32 c_in | u8 relu | f32 weight scale
    ///            | f32 output scale | i32 output zp
    ///            | i8 × c_out·c_in weights | i32 × c_out biases
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BACKBONE_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for d in self.input_shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.input.scale.to_le_bytes());
        out.extend_from_slice(&self.input.zero_point.to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.c_out as u32).to_le_bytes());
            out.extend_from_slice(&(l.c_in as u32).to_le_bytes());
            out.push(l.relu as u8);
            out.extend_from_slice(&l.weight_scale.to_le_bytes());
            out.extend_from_slice(&l.output.scale.to_le_bytes());
            out.extend_from_slice(&l.output.zero_point.to_le_bytes());
            out.extend(l.weights.iter().map(|&w| w as u8));
            for b in &l.bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "backbone container");
        if r.take(4)? != BACKBONE_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let n_layers = r.u32()? as usize;
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let input = QuantParams::new(r.f32()?, r.i32()?)?;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let c_out = r.u32()? as usize;
            let c_in = r.u32()? as usize;
            let relu = match r.take(1)?[0] {
                0 => false,
                1 => true,
                other => return Err(r.fail(&format!("relu flag {other}"))),
            };
            let weight_scale = r.f32()?;
            let output = QuantParams::new(r.f32()?, r.i32()?)?;
            let n_w = c_out
                .checked_mul(c_in)
                .ok_or_else(|| r.fail("layer size overflow"))?;
            let weights = r.take(n_w)?.iter().map(|&b| b as i8).collect();
            let bias = (0..c_out).map(|_| r.i32()).collect::<Result<_>>()?;
            layers.push(QuantLayer::new(c_in, c_out, weights, weight_scale, bias, output, relu)?);
        }
        r.finish()?;
        Self::new(input_shape, input, layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn fail(&self, reason: &str) -> Error {
        Error::Format {
            what: self.what,
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail("truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}
