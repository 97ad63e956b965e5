//! File formats.
//!
//! Every binary file is one line of compact JSON (the header, terminated by
//! `\n`) followed by a little-endian payload whose layout the header fully
//! determines:
//!
//! * model: for each layer in order, `W` (linear) or `A` then `D`
//!   (low-rank) as row-major f64; then every bias as f64.
//! * calibration: inputs as row-major f64, then targets as u32.
//! * stats: for each layer, `R` then `C` as row-major f64; damping is in
//!   the header.
//! * hybrid: for each linear layer, either a dense section (`mn` f16) or a
//!   factored section holding `A` then `D`, each laid out as
//!   `[u16 row indices q][f16 scales q][i8 codes q·r][f16 remaining rows]`;
//!   then every bias as f32.
//!
//! Plans are plain pretty-printed JSON.

use crate::curvature::LayerStats;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netmodel::{Activation, CalibrationBatch, Layer, Network};
use crate::rank_alloc::CompressionPlan;
use crate::remap::{Factor, HybridLayer, HybridModel, HybridPayload, QuantizedRow};
use crate::whiten::LowRankLayer;
use half::f16;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MODEL_FORMAT: &str = "iosvd-model";
const CALIBRATION_FORMAT: &str = "iosvd-calibration";
const STATS_FORMAT: &str = "iosvd-stats";
const HYBRID_FORMAT: &str = "iosvd-hybrid";
const VERSION: u32 = 1;

fn encode(header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode<'a, H: DeserializeOwned>(
    bytes: &'a [u8],
    format: &str,
) -> Result<(H, usize, Cursor<'a>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{format}: missing header line")))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])?;
    if value.get("format").and_then(|v| v.as_str()) != Some(format) {
        return Err(Error::Format(format!("expected a {format} file")));
    }
    if value.get("version").and_then(|v| v.as_u64()) != Some(VERSION as u64) {
        return Err(Error::Format(format!("{format}: unsupported version")));
    }
    let header = serde_json::from_value(value)?;
    Ok((
        header,
        nl + 1,
        Cursor {
            bytes: &bytes[nl + 1..],
            pos: 0,
        },
    ))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("payload truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn f16s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(2 * n)?
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f64())
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<usize>> {
        Ok(self
            .take(2 * n)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")) as usize)
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect())
    }

    fn i8s(&mut self, n: usize) -> Result<Vec<i8>> {
        Ok(self.take(n)?.iter().map(|&b| b as i8).collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.f64s(rows * cols)?)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_f16s(out: &mut Vec<u8>, xs: &[f64]) -> Result<()> {
    for &x in xs {
        let h = f16::from_f64(x);
        if !h.is_finite() {
            return Err(Error::Format(format!("{x:e} does not fit in f16")));
        }
        out.extend_from_slice(&h.to_le_bytes());
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerHeader {
    Linear {
        rows: usize,
        cols: usize,
        bias: bool,
    },
    LowRank {
        rows: usize,
        cols: usize,
        rank: usize,
        bias: bool,
    },
    Activation {
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    input_dim: usize,
    vocab_size: usize,
    target_layers: Vec<usize>,
    layers: Vec<LayerHeader>,
}

fn layer_header(layer: &Layer) -> LayerHeader {
    match layer {
        Layer::Linear { weight, bias } => LayerHeader::Linear {
            rows: weight.rows(),
            cols: weight.cols(),
            bias: bias.is_some(),
        },
        Layer::LowRank { a, d, bias } => LayerHeader::LowRank {
            rows: a.rows(),
            cols: d.rows(),
            rank: a.cols(),
            bias: bias.is_some(),
        },
        Layer::Activation(act) => LayerHeader::Activation { activation: *act },
    }
}

pub fn encode_model(net: &Network) -> Result<Vec<u8>> {
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: VERSION,
        input_dim: net.input_dim(),
        vocab_size: net.vocab_size(),
        target_layers: net.target_layers().to_vec(),
        layers: net.layers().iter().map(layer_header).collect(),
    };
    let mut payload = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Linear { weight, .. } => put_f64s(&mut payload, weight.as_slice()),
            Layer::LowRank { a, d, .. } => {
                put_f64s(&mut payload, a.as_slice());
                put_f64s(&mut payload, d.as_slice());
            }
            Layer::Activation(_) => {}
        }
    }
    for layer in net.layers() {
        if let Some(b) = layer.bias() {
            put_f64s(&mut payload, b);
        }
    }
    encode(&header, &payload)
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let (h, _, mut cur): (ModelHeader, _, _) = decode(bytes, MODEL_FORMAT)?;
    let mut layers = Vec::with_capacity(h.layers.len());
    for lh in &h.layers {
        layers.push(match *lh {
            LayerHeader::Linear { rows, cols, .. } => Layer::Linear {
                weight: cur.matrix(rows, cols)?,
                bias: None,
            },
            LayerHeader::LowRank {
                rows, cols, rank, ..
            } => Layer::LowRank {
                a: cur.matrix(rows, rank)?,
                d: cur.matrix(cols, rank)?,
                bias: None,
            },
            LayerHeader::Activation { activation } => Layer::Activation(activation),
        });
    }
    read_biases(&h.layers, &mut layers, |n| cur.f64s(n))?;
    cur.finish()?;
    Network::new(layers, h.input_dim, h.vocab_size, h.target_layers)
}

fn read_biases(
    headers: &[LayerHeader],
    layers: &mut [Layer],
    mut read: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<()> {
    for (lh, layer) in headers.iter().zip(layers.iter_mut()) {
        let (rows, has_bias) = match *lh {
            LayerHeader::Linear { rows, bias, .. } | LayerHeader::LowRank { rows, bias, .. } => {
                (rows, bias)
            }
            LayerHeader::Activation { .. } => continue,
        };
        if has_bias {
            let values = read(rows)?;
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
            match layer {
                Layer::Linear { bias, .. } | Layer::LowRank { bias, .. } => *bias = Some(values),
                Layer::Activation(_) => unreachable!(),
            }
        }
    }
    Ok(())
}

pub fn write_model(path: &Path, net: &Network) -> Result<()> {
    write_file(path, &encode_model(net)?)
}

pub fn read_model(path: &Path) -> Result<Network> {
    decode_model(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalibrationHeader {
    format: String,
    version: u32,
    tokens: usize,
    input_dim: usize,
}

pub fn encode_calibration(batch: &CalibrationBatch) -> Result<Vec<u8>> {
    let header = CalibrationHeader {
        format: CALIBRATION_FORMAT.into(),
        version: VERSION,
        tokens: batch.len(),
        input_dim: batch.inputs().cols(),
    };
    let mut payload = Vec::new();
    put_f64s(&mut payload, batch.inputs().as_slice());
    for &t in batch.targets() {
        let t = u32::try_from(t).map_err(|_| Error::Format(format!("target {t} exceeds u32")))?;
        payload.extend_from_slice(&t.to_le_bytes());
    }
    encode(&header, &payload)
}

pub fn decode_calibration(bytes: &[u8]) -> Result<CalibrationBatch> {
    let (h, _, mut cur): (CalibrationHeader, _, _) = decode(bytes, CALIBRATION_FORMAT)?;
    let inputs = cur.matrix(h.tokens, h.input_dim)?;
    let targets = cur.u32s(h.tokens)?;
    cur.finish()?;
    CalibrationBatch::new(inputs, targets)
}

pub fn write_calibration(path: &Path, batch: &CalibrationBatch) -> Result<()> {
    write_file(path, &encode_calibration(batch)?)
}

pub fn read_calibration(path: &Path) -> Result<CalibrationBatch> {
    decode_calibration(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatsLayerHeader {
    layer: usize,
    input_dim: usize,
    output_dim: usize,
    token_count: usize,
    lambda_r: f64,
    lambda_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatsHeader {
    format: String,
    version: u32,
    top_k: usize,
    layers: Vec<StatsLayerHeader>,
}

/// Finalized statistics together with the top-K used to collect them.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsFile {
    pub top_k: usize,
    pub stats: BTreeMap<usize, LayerStats>,
}

pub fn encode_stats(file: &StatsFile) -> Result<Vec<u8>> {
    let mut layers = Vec::new();
    let mut payload = Vec::new();
    for s in file.stats.values() {
        if !s.is_finalized() {
            return Err(Error::NotFinalized(s.layer()));
        }
        layers.push(StatsLayerHeader {
            layer: s.layer(),
            input_dim: s.input_dim(),
            output_dim: s.output_dim(),
            token_count: s.token_count(),
            lambda_r: s.lambda_r(),
            lambda_c: s.lambda_c(),
        });
        put_f64s(&mut payload, s.r().as_slice());
        put_f64s(&mut payload, s.c().as_slice());
    }
    encode(
        &StatsHeader {
            format: STATS_FORMAT.into(),
            version: VERSION,
            top_k: file.top_k,
            layers,
        },
        &payload,
    )
}

/// Rebuilds statistics and recomputes their whitening maps from the stored
/// damping.
pub fn decode_stats(bytes: &[u8]) -> Result<StatsFile> {
    let (h, _, mut cur): (StatsHeader, _, _) = decode(bytes, STATS_FORMAT)?;
    let mut stats = BTreeMap::new();
    for lh in &h.layers {
        let r = cur.matrix(lh.input_dim, lh.input_dim)?;
        let c = cur.matrix(lh.output_dim, lh.output_dim)?;
        let mut s = LayerStats::from_matrices(lh.layer, r, c, lh.token_count)?;
        s.finalize(lh.lambda_r, lh.lambda_c)?;
        stats.insert(lh.layer, s);
    }
    cur.finish()?;
    Ok(StatsFile {
        top_k: h.top_k,
        stats,
    })
}

pub fn write_stats(path: &Path, file: &StatsFile) -> Result<()> {
    write_file(path, &encode_stats(file)?)
}

pub fn read_stats(path: &Path) -> Result<StatsFile> {
    decode_stats(&read_file(path)?)
}

pub fn encode_plan(plan: &CompressionPlan) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(plan)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_plan(path: &Path, plan: &CompressionPlan) -> Result<()> {
    write_file(path, &encode_plan(plan)?)
}

pub fn read_plan(path: &Path) -> Result<CompressionPlan> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HybridLayerHeader {
    Dense {
        rows: usize,
        cols: usize,
        bias: bool,
        byte_count: u64,
    },
    Factored {
        rows: usize,
        cols: usize,
        rank: usize,
        quantized_a: usize,
        quantized_d: usize,
        bias: bool,
        byte_count: u64,
    },
    Activation {
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HybridHeader {
    format: String,
    version: u32,
    input_dim: usize,
    vocab_size: usize,
    target_layers: Vec<usize>,
    layers: Vec<HybridLayerHeader>,
}

fn put_factor(out: &mut Vec<u8>, m: &Matrix, rows: &[&QuantizedRow]) -> Result<()> {
    for q in rows {
        let idx = u16::try_from(q.row_index)
            .map_err(|_| Error::Format(format!("row index {} exceeds u16", q.row_index)))?;
        out.extend_from_slice(&idx.to_le_bytes());
    }
    for q in rows {
        put_f16s(out, &[q.scale])?;
    }
    for q in rows {
        out.extend(q.codes.iter().map(|&c| c as u8));
    }
    let quantized: Vec<usize> = rows.iter().map(|q| q.row_index).collect();
    for i in 0..m.rows() {
        if !quantized.contains(&i) {
            put_f16s(out, m.row(i))?;
        }
    }
    Ok(())
}

fn read_factor(
    cur: &mut Cursor<'_>,
    layer: usize,
    factor: Factor,
    rows: usize,
    rank: usize,
    q: usize,
) -> Result<(Matrix, Vec<QuantizedRow>)> {
    let idx = cur.u16s(q)?;
    let scales = cur.f16s(q)?;
    let mut quantized = Vec::with_capacity(q);
    for (k, (&row_index, &scale)) in idx.iter().zip(&scales).enumerate() {
        if row_index >= rows || (k > 0 && idx[k - 1] >= row_index) {
            return Err(Error::Format(format!(
                "layer {layer}: row indices must be sorted and below {rows}"
            )));
        }
        quantized.push(QuantizedRow {
            layer,
            factor,
            row_index,
            codes: Vec::new(),
            scale,
            score: 0.0,
        });
    }
    for qr in quantized.iter_mut() {
        qr.codes = cur.i8s(rank)?;
    }
    let mut m = Matrix::zeros(rows, rank);
    for i in 0..rows {
        match quantized.iter().find(|qr| qr.row_index == i) {
            Some(qr) => m.row_mut(i).copy_from_slice(&qr.dequantize()),
            None => {
                let vals = cur.f16s(rank)?;
                m.row_mut(i).copy_from_slice(&vals);
            }
        }
    }
    Ok((m, quantized))
}

pub fn encode_hybrid(model: &HybridModel) -> Result<Vec<u8>> {
    let net = &model.base;
    let by_layer: BTreeMap<usize, &HybridLayer> =
        model.layers.iter().map(|l| (l.layer, l)).collect();
    let mut headers = Vec::new();
    let mut payload = Vec::new();
    for (idx, layer) in net.layers().iter().enumerate() {
        let bias = layer.bias().is_some();
        let owned;
        let hl = match (by_layer.get(&idx), layer) {
            (_, Layer::Activation(act)) => {
                headers.push(HybridLayerHeader::Activation { activation: *act });
                continue;
            }
            (Some(hl), _) => *hl,
            (None, other) => {
                owned = HybridLayer::new(
                    idx,
                    HybridPayload::Dense(other.effective_weight().expect("linear")),
                    Vec::new(),
                )?;
                &owned
            }
        };
        let (rows, cols) = hl.shape();
        match &hl.payload {
            HybridPayload::Dense(w) => {
                headers.push(HybridLayerHeader::Dense {
                    rows,
                    cols,
                    bias,
                    byte_count: hl.byte_count,
                });
                put_f16s(&mut payload, w.as_slice())?;
            }
            HybridPayload::Factored(lr) => {
                let qa: Vec<&QuantizedRow> = hl
                    .quantized_rows
                    .iter()
                    .filter(|q| q.factor == Factor::A)
                    .collect();
                let qd: Vec<&QuantizedRow> = hl
                    .quantized_rows
                    .iter()
                    .filter(|q| q.factor == Factor::D)
                    .collect();
                headers.push(HybridLayerHeader::Factored {
                    rows,
                    cols,
                    rank: lr.rank(),
                    quantized_a: qa.len(),
                    quantized_d: qd.len(),
                    bias,
                    byte_count: hl.byte_count,
                });
                put_factor(&mut payload, &lr.a, &qa)?;
                put_factor(&mut payload, &lr.d, &qd)?;
            }
        }
    }
    for layer in net.layers() {
        if let Some(b) = layer.bias() {
            for &x in b {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    encode(
        &HybridHeader {
            format: HYBRID_FORMAT.into(),
            version: VERSION,
            input_dim: net.input_dim(),
            vocab_size: net.vocab_size(),
            target_layers: net.target_layers().to_vec(),
            layers: headers,
        },
        &payload,
    )
}

/// Decodes a hybrid file. Full-precision values come back rounded to f16
/// and biases to f32; quantized rows come back exactly. Row scores are not
/// stored and read as zero.
pub fn decode_hybrid(bytes: &[u8]) -> Result<HybridModel> {
    let (h, _, mut cur): (HybridHeader, _, _) = decode(bytes, HYBRID_FORMAT)?;
    let mut layers = Vec::with_capacity(h.layers.len());
    let mut plain_headers = Vec::with_capacity(h.layers.len());
    let mut hybrid_layers = Vec::new();
    for (idx, lh) in h.layers.iter().enumerate() {
        match *lh {
            HybridLayerHeader::Activation { activation } => {
                layers.push(Layer::Activation(activation));
                plain_headers.push(LayerHeader::Activation { activation });
            }
            HybridLayerHeader::Dense {
                rows,
                cols,
                bias,
                byte_count,
            } => {
                let w = Matrix::new(rows, cols, cur.f16s(rows * cols)?)?;
                layers.push(Layer::Linear {
                    weight: w.clone(),
                    bias: None,
                });
                plain_headers.push(LayerHeader::Linear { rows, cols, bias });
                if h.target_layers.contains(&idx) {
                    let hl = HybridLayer::new(idx, HybridPayload::Dense(w), Vec::new())?;
                    check_byte_count(idx, &hl, byte_count)?;
                    hybrid_layers.push(hl);
                }
            }
            HybridLayerHeader::Factored {
                rows,
                cols,
                rank,
                quantized_a,
                quantized_d,
                bias,
                byte_count,
            } => {
                let (a, mut qa) = read_factor(&mut cur, idx, Factor::A, rows, rank, quantized_a)?;
                let (d, qd) = read_factor(&mut cur, idx, Factor::D, cols, rank, quantized_d)?;
                layers.push(Layer::LowRank {
                    a: a.clone(),
                    d: d.clone(),
                    bias: None,
                });
                plain_headers.push(LayerHeader::LowRank {
                    rows,
                    cols,
                    rank,
                    bias,
                });
                qa.extend(qd);
                let hl = HybridLayer::new(idx, HybridPayload::Factored(LowRankLayer { a, d }), qa)?;
                check_byte_count(idx, &hl, byte_count)?;
                hybrid_layers.push(hl);
            }
        }
    }
    read_biases(&plain_headers, &mut layers, |n| cur.f32s(n))?;
    cur.finish()?;
    Ok(HybridModel {
        base: Network::new(layers, h.input_dim, h.vocab_size, h.target_layers)?,
        layers: hybrid_layers,
    })
}

fn check_byte_count(layer: usize, hl: &HybridLayer, stated: u64) -> Result<()> {
    if hl.byte_count != stated {
        return Err(Error::Format(format!(
            "layer {layer}: header says {stated} bytes, payload implies {}",
            hl.byte_count
        )));
    }
    Ok(())
}

pub fn write_hybrid(path: &Path, model: &HybridModel) -> Result<()> {
    write_file(path, &encode_hybrid(model)?)
}

pub fn read_hybrid(path: &Path) -> Result<HybridModel> {
    decode_hybrid(&read_file(path)?)
}

/// Length of the header line of an encoded file, including its newline.
pub fn header_len(bytes: &[u8]) -> Result<usize> {
    bytes
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| p + 1)
        .ok_or_else(|| Error::Format("missing header line".into()))
}

/// Bytes spent on biases in a hybrid file (f32 each).
pub fn hybrid_bias_bytes(net: &Network) -> u64 {
    net.layers()
        .iter()
        .filter_map(Layer::bias)
        .map(|b| 4 * b.len() as u64)
        .sum()
}

/// Either kind of compressed model file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Plain(Network),
    Hybrid(HybridModel),
}

impl AnyModel {
    pub fn network(&self) -> Result<Network> {
        match self {
            AnyModel::Plain(n) => Ok(n.clone()),
            AnyModel::Hybrid(h) => h.to_network(),
        }
    }
}

/// Reads a model or hybrid file, dispatching on the header.
pub fn read_any_model(path: &Path) -> Result<AnyModel> {
    let bytes = read_file(path)?;
    let nl = header_len(&bytes)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[..nl - 1])?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(MODEL_FORMAT) => Ok(AnyModel::Plain(decode_model(&bytes)?)),
        Some(HYBRID_FORMAT) => Ok(AnyModel::Hybrid(decode_hybrid(&bytes)?)),
        _ => Err(Error::Format(format!(
            "{}: not a model file",
            path.display()
        ))),
    }
}
