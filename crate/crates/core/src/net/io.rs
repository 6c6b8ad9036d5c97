//! `ZOFA1` model files.
//!
//! Layout: the 5 magic bytes `ZOFA1`, a little-endian `u32` byte length, that many
//! bytes of UTF-8 JSON topology descriptor, every parameter as little-endian `f64`
//! in canonical layer-major order, then (when the descriptor says so) the source
//! feature mean and standard deviation as two blocks of `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerKind};
use super::network::{Network, ParamSubset};
use crate::error::{Error, Result};
use crate::objectives::SourceStats;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 5] = b"ZOFA1";

/// A network plus the source statistics recorded at pretraining time.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub net: Network,
    pub source: Option<SourceStats>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    input_dim: usize,
    feature_tap: usize,
    layers: Vec<LayerDesc>,
    adapted_mask: Vec<bool>,
    source_stats_dim: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct LayerDesc {
    kind: LayerKind,
    shapes: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    eps: Option<f64>,
}

impl Model {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let desc = Descriptor {
            input_dim: self.net.input_dim(),
            feature_tap: self.net.feature_tap(),
            layers: self
                .net
                .layers()
                .iter()
                .map(|l| LayerDesc {
                    kind: l.kind(),
                    shapes: l.params().iter().map(|t| t.shape().to_vec()).collect(),
                    eps: l.eps(),
                })
                .collect(),
            adapted_mask: self.net.adapted_mask().to_vec(),
            source_stats_dim: self.source.as_ref().map(|s| s.dim()),
        };
        let json = serde_json::to_vec(&desc).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        write_f64s(&mut w, &self.net.pack(ParamSubset::All))?;
        if let Some(s) = &self.source {
            write_f64s(&mut w, &s.mean)?;
            write_f64s(&mut w, &s.std)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a ZOFA1 model file".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let desc: Descriptor =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("descriptor: {e}")))?;

        let mut layers = Vec::with_capacity(desc.layers.len());
        for (i, l) in desc.layers.iter().enumerate() {
            let mut tensors = Vec::with_capacity(l.shapes.len());
            for shape in &l.shapes {
                let n: usize = shape.iter().product();
                tensors.push(Tensor::new(shape.clone(), read_f64s(&mut r, n)?)?);
            }
            layers.push(build_layer(i, l, tensors)?);
        }
        let mut net = Network::new(layers, desc.input_dim, desc.feature_tap)?;
        net.set_adapted_mask(desc.adapted_mask)?;
        let source = match desc.source_stats_dim {
            Some(f) => Some(SourceStats::new(read_f64s(&mut r, f)?, read_f64s(&mut r, f)?)?),
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Model { net, source })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn build_layer(i: usize, d: &LayerDesc, mut t: Vec<Tensor>) -> Result<Layer> {
    let want = match d.kind {
        LayerKind::Linear => 2,
        LayerKind::Layernorm => 2,
        LayerKind::InputOffset => 1,
        LayerKind::Relu | LayerKind::Tanh => 0,
    };
    if t.len() != want {
        return Err(Error::Format(format!("layer {i}: expected {want} tensors, found {}", t.len())));
    }
    Ok(match d.kind {
        LayerKind::Linear => {
            let bias = t.pop().unwrap();
            Layer::linear(t.pop().unwrap(), bias)?
        }
        LayerKind::Relu => Layer::Relu,
        LayerKind::Tanh => Layer::Tanh,
        LayerKind::Layernorm => {
            let shift = t.pop().unwrap();
            let gain = t.pop().unwrap();
            let eps = d.eps.unwrap_or(super::layer::DEFAULT_LN_EPS);
            Layer::LayerNorm { gain, shift, eps }
        }
        LayerKind::InputOffset => Layer::InputOffset { offset: t.pop().unwrap() },
    })
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated float block: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
