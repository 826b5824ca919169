//! Split model: frozen int8 backbone followed by a trainable float head.
//!
//! The head is a pointwise conv + relu over the pooled backbone features,
//! then a linear classifier whose rows grow as new classes arrive.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{ByteReader, FrozenBackbone, QuantTensor};
use crate::tensor::{self, Graph, Tensor, Var};

const HEAD_MAGIC: &[u8; 4] = b"FCH1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl HeadShape {
    pub fn new(feature_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let (f, h, k) = (self.feature_dim, self.hidden_dim, self.num_classes);
        h * f + h + k * h + k
    }

    /// Bytes on the wire for one flattened head (`f32` per parameter).
    pub fn message_bytes(&self) -> usize {
        self.parameter_count() * std::mem::size_of::<f32>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableHead {
    conv_w: Tensor,
    conv_b: Tensor,
    cls_w: Tensor,
    cls_b: Tensor,
}

impl TrainableHead {
    pub fn zeros(shape: HeadShape) -> Result<Self> {
        Self::from_tensors(vec![
            Tensor::zeros(&[shape.hidden_dim, shape.feature_dim])?,
            Tensor::zeros(&[shape.hidden_dim])?,
            Tensor::zeros(&[shape.num_classes, shape.hidden_dim])?,
            Tensor::zeros(&[shape.num_classes])?,
        ])
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero
    /// biases.
    pub fn random<R: Rng + ?Sized>(shape: HeadShape, gain: f32, rng: &mut R) -> Result<Self> {
        let mut draw = |rows: usize, cols: usize| -> Result<Tensor> {
            let dist = Normal::new(0.0f32, gain / (cols as f32).sqrt())
                .map_err(|e| Error::Numeric(e.to_string()))?;
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        };
        let conv_w = draw(shape.hidden_dim, shape.feature_dim)?;
        let cls_w = draw(shape.num_classes, shape.hidden_dim)?;
        Self::from_tensors(vec![
            conv_w,
            Tensor::zeros(&[shape.hidden_dim])?,
            cls_w,
            Tensor::zeros(&[shape.num_classes])?,
        ])
    }

    /// Build from `[conv_w, conv_b, cls_w, cls_b]`.
    pub fn from_tensors(parts: Vec<Tensor>) -> Result<Self> {
        let [conv_w, conv_b, cls_w, cls_b]: [Tensor; 4] = parts
            .try_into()
            .map_err(|v: Vec<Tensor>| Error::dim("head tensors", &[4], &[v.len()]))?;
        let (h, f) = match *conv_w.shape() {
            [h, f] => (h, f),
            _ => return Err(Error::dim("head conv_w", &[0, 0], conv_w.shape())),
        };
        if conv_b.shape() != [h] {
            return Err(Error::dim("head conv_b", &[h], conv_b.shape()));
        }
        let k = match *cls_w.shape() {
            [k, h2] if h2 == h => k,
            _ => return Err(Error::dim("head cls_w", &[0, h], cls_w.shape())),
        };
        if cls_b.shape() != [k] {
            return Err(Error::dim("head cls_b", &[k], cls_b.shape()));
        }
        let _ = f;
        Ok(Self {
            conv_w,
            conv_b,
            cls_w,
            cls_b,
        })
    }

    pub fn shape(&self) -> HeadShape {
        HeadShape::new(
            self.conv_w.shape()[1],
            self.conv_w.shape()[0],
            self.cls_w.shape()[0],
        )
    }

    pub fn num_classes(&self) -> usize {
        self.cls_b.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.shape().parameter_count()
    }

    /// Parameters in canonical order: conv_w, conv_b, cls_w, cls_b.
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.conv_w, &self.conv_b, &self.cls_w, &self.cls_b]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub(crate) fn check_same_architecture(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            let a = self.shape();
            let b = other.shape();
            return Err(Error::dim(
                "head architecture",
                &[a.feature_dim, a.hidden_dim, a.num_classes],
                &[b.feature_dim, b.hidden_dim, b.num_classes],
            ));
        }
        Ok(())
    }

    /// All parameters as one vector in canonical row-major order.
    pub fn flatten(&self) -> Tensor {
        let mut v = Vec::with_capacity(self.parameter_count());
        for t in self.tensors() {
            v.extend_from_slice(t.data());
        }
        Tensor::vector(v)
    }

    /// Inverse of [`flatten`](Self::flatten) for this head's architecture.
    pub fn unflatten(&self, flat: &[f32]) -> Result<Self> {
        let p = self.parameter_count();
        if flat.len() != p {
            return Err(Error::dim("unflatten", &[p], &[flat.len()]));
        }
        let mut offset = 0;
        let parts = self
            .tensors()
            .into_iter()
            .map(|t| {
                let n = t.len();
                let part = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec());
                offset += n;
                part
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(parts)
    }

    /// Append one zero classifier row per new class id. Ids must continue
    /// the existing numbering: `num_classes, num_classes + 1, ...`.
    pub fn expand_classifier(&self, new_class_ids: &[usize]) -> Result<Self> {
        let k = self.num_classes();
        for (i, &id) in new_class_ids.iter().enumerate() {
            if id < k + i {
                return Err(Error::Registry(format!(
                    "class id {id} is already present in the classifier"
                )));
            }
            if id != k + i {
                return Err(Error::Registry(format!(
                    "class id {id} is not contiguous (expected {})",
                    k + i
                )));
            }
        }
        if new_class_ids.is_empty() {
            return Ok(self.clone());
        }
        let hidden = self.shape().hidden_dim;
        let new_k = k + new_class_ids.len();
        let mut w = self.cls_w.data().to_vec();
        w.resize(new_k * hidden, 0.0);
        let mut b = self.cls_b.data().to_vec();
        b.resize(new_k, 0.0);
        Ok(Self {
            cls_w: Tensor::matrix(new_k, hidden, w)?,
            cls_b: Tensor::vector(b),
            ..self.clone()
        })
    }

    /// Head forward on pooled features (`[feature_dim]`) without a tape.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let f = self.shape().feature_dim;
        if features.len() != f {
            return Err(Error::dim("head forward", &[f], features.shape()));
        }
        let x = features.reshape(&[f, 1, 1])?;
        let h = tensor::relu(&tensor::pointwise_conv(&x, &self.conv_w, &self.conv_b)?);
        let h = tensor::global_avg_pool(&h)?;
        let h = h.reshape(&[h.len(), 1])?;
        let z = tensor::matmul(&self.cls_w, &h)?;
        tensor::add(&z.reshape(&[self.num_classes()])?, &self.cls_b)
    }

    /// Register the head's parameters on a tape.
    pub fn attach(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            conv_w: g.param(self.conv_w.clone()),
            conv_b: g.param(self.conv_b.clone()),
            cls_w: g.param(self.cls_w.clone()),
            cls_b: g.param(self.cls_b.clone()),
            shape: self.shape(),
        }
    }

    /// Little-endian container:
    /// `"FCH1" | u32 feature_dim | u32 hidden_dim | u32 num_classes | f32 × P`
    /// with parameters in canonical flatten order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape();
        let mut out = Vec::with_capacity(16 + 4 * s.parameter_count());
        out.extend_from_slice(HEAD_MAGIC);
        for d in [s.feature_dim, s.hidden_dim, s.num_classes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.flatten().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "head checkpoint");
        if r.take(4)? != HEAD_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let shape = HeadShape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if shape.feature_dim == 0 || shape.hidden_dim == 0 || shape.num_classes == 0 {
            return Err(r.fail("zero dimension"));
        }
        let p = shape.parameter_count();
        let flat = (0..p).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::zeros(shape)?.unflatten(&flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Head parameters registered on a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    conv_w: Var,
    conv_b: Var,
    cls_w: Var,
    cls_b: Var,
    shape: HeadShape,
}

impl HeadVars {
    pub fn params(&self) -> [Var; 4] {
        [self.conv_w, self.conv_b, self.cls_w, self.cls_b]
    }

    /// Record the head forward for one feature vector; features enter as a
    /// constant so no gradient reaches the backbone.
    pub fn logits(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        let f = self.shape.feature_dim;
        if features.len() != f {
            return Err(Error::dim("head forward", &[f], features.shape()));
        }
        let x = g.input(features.reshape(&[f, 1, 1])?);
        let h = g.pointwise_conv(x, self.conv_w, self.conv_b)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h)?;
        let h = g.reshape(h, &[self.shape.hidden_dim, 1])?;
        let z = g.matmul(self.cls_w, h)?;
        let z = g.reshape(z, &[self.shape.num_classes])?;
        g.add(z, self.cls_b)
    }

    /// Gradients after `backward`, packed as a head-shaped value.
    pub fn gradients(&self, g: &Graph) -> Result<TrainableHead> {
        let parts = self
            .params()
            .into_iter()
            .map(|v| {
                g.grad(v)
                    .cloned()
                    .ok_or_else(|| Error::Numeric("backward has not been run".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        TrainableHead::from_tensors(parts)
    }
}

/// Frozen backbone composed with a trainable head.
#[derive(Debug, Clone)]
pub struct SplitModel {
    backbone: Arc<FrozenBackbone>,
    head: TrainableHead,
}

impl SplitModel {
    pub fn new(backbone: Arc<FrozenBackbone>, head: TrainableHead) -> Result<Self> {
        let f = backbone.feature_dim();
        let hf = head.shape().feature_dim;
        if f != hf {
            return Err(Error::dim("split model features", &[f], &[hf]));
        }
        Ok(Self { backbone, head })
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn shared_backbone(&self) -> Arc<FrozenBackbone> {
        Arc::clone(&self.backbone)
    }

    pub fn head(&self) -> &TrainableHead {
        &self.head
    }

    pub fn with_head(&self, head: TrainableHead) -> Result<Self> {
        Self::new(self.shared_backbone(), head)
    }

    pub fn features(&self, x: &QuantTensor) -> Result<Tensor> {
        self.backbone.forward(x)
    }

    pub fn forward(&self, x: &QuantTensor) -> Result<Tensor> {
        self.head.logits(&self.features(x)?)
    }
}
