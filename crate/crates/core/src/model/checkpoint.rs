//! Weight checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header describing layer order and parameter offsets, then every
//! parameter as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{Conv2d, ConvNet, Head, Layer, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WLCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Avgpool {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    layers: Vec<LayerSpec>,
    feature_dim: usize,
    params: Vec<ParamEntry>,
    param_count: usize,
}

fn header_for<R: Real>(net: &ConvNet<R>) -> Header {
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
        let len: usize = shape.iter().product();
        params.push(ParamEntry {
            name,
            shape,
            offset: *offset,
        });
        *offset += len;
    };
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Conv(c) => {
                layers.push(LayerSpec::Conv {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                });
                push(
                    format!("layer{i}.weight"),
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                    &mut offset,
                );
                push(format!("layer{i}.bias"), vec![c.out_channels], &mut offset);
            }
            Layer::Relu => layers.push(LayerSpec::Relu),
            Layer::AvgPool { size } => layers.push(LayerSpec::Avgpool { size: *size }),
        }
    }
    push("head.weight".into(), vec![net.feature_dim()], &mut offset);
    push("head.bias".into(), vec![1], &mut offset);
    Header {
        format: "wealthlens-checkpoint".into(),
        version: 1,
        layers,
        feature_dim: net.feature_dim(),
        params,
        param_count: offset,
    }
}

pub fn write_checkpoint<R: Real, W: Write>(net: &ConvNet<R>, mut out: W) -> std::io::Result<()> {
    let header = serde_json::to_vec(&header_for(net)).expect("header serialises");
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(net.param_count() * 4);
    for p in net.params_flat() {
        buf.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_checkpoint<R: Real, Rd: Read>(mut input: Rd) -> Result<ConvNet<R>> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("checkpoint truncated: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Data("not a wealthlens checkpoint".into()));
    }
    let mut len = [0u8; 8];
    input
        .read_exact(&mut len)
        .map_err(|e| Error::Data(format!("checkpoint truncated: {e}")))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Data(format!("implausible checkpoint header length {len}")));
    }
    let mut header = vec![0u8; len];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::Data(format!("checkpoint truncated: {e}")))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut data = Vec::new();
    input
        .read_to_end(&mut data)
        .map_err(|e| Error::Data(format!("checkpoint unreadable: {e}")))?;
    if data.len() != header.param_count * 4 {
        return Err(Error::Data(format!(
            "checkpoint holds {} bytes of parameters, header declares {}",
            data.len(),
            header.param_count * 4
        )));
    }
    let layers = header
        .layers
        .iter()
        .map(|spec| match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv(Conv2d::zeros(in_channels, out_channels, kernel, stride, padding)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Avgpool { size } => Layer::AvgPool { size },
        })
        .collect();
    let head = Head {
        weights: Array1::zeros(header.feature_dim),
        bias: R::zero(),
    };
    let mut net = ConvNet::new(layers, head)?;
    if header_for(&net) != header {
        return Err(Error::Data("checkpoint header does not match its layer list".into()));
    }
    let params: Vec<R> = data
        .chunks_exact(4)
        .map(|b| R::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    net.set_params_flat(&params)?;
    Ok(net)
}

pub fn save_checkpoint<R: Real>(net: &ConvNet<R>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(net, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<ConvNet<R>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
