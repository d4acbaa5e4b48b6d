//! Online model compression and the simulated wire format.
//!
//! Download payload layout (all integers little-endian):
//!
//! ```text
//! header   magic "FCPL" | version u16 | variable count u32
//! record   name_len u16 | name bytes | kind u8 | layer u32 | trainable u8
//!          | precision u8 | rank u8 | dims u32 * rank | raw elements
//! ```
//!
//! Elements are IEEE binary32 or binary16 depending on the precision tag.
//! Upload payloads use magic "FCUP" and carry the client weight (f64) and
//! example count (u32) right after the header.
//!
//! On the wire every payload is wrapped as `flag u8 | body_len u64 | body`,
//! where flag 1 means the body is deflate-compressed. The encoder falls back
//! to flag 0 whenever compression would not shrink the body.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientMap, ParameterSet, Precision, VarKind, Variable};

pub const MODEL_MAGIC: [u8; 4] = *b"FCPL";
pub const UPDATE_MAGIC: [u8; 4] = *b"FCUP";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 4;
/// Client weight plus example count in an upload payload.
pub const UPDATE_TRAILER_BYTES: usize = 8 + 4;
pub const WIRE_OVERHEAD: usize = 1 + 8;

const FLAG_RAW: u8 = 0;
const FLAG_DEFLATE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub omc_enabled: bool,
}

/// Saturation and flush-to-zero events seen while quantizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuantStats {
    pub overflow: usize,
    pub underflow: usize,
}

/// Rounds to the nearest half-precision value (ties to even), clamping
/// finite values beyond the half range to `±65504`.
pub fn round_to_f16(value: f32, stats: &mut QuantStats) -> f32 {
    let h = f16::from_f32(value);
    if h.is_infinite() && value.is_finite() {
        stats.overflow += 1;
        return if value > 0.0 {
            f16::MAX.to_f32()
        } else {
            f16::MIN.to_f32()
        };
    }
    let widened = h.to_f32();
    if widened == 0.0 && value != 0.0 {
        stats.underflow += 1;
    }
    widened
}

/// Quantizes the matrices of non-trainable variables to f16. Biases and
/// trainable variables stay f32. Returns the input untouched when OMC is off.
pub fn apply_policy(
    params: &ParameterSet,
    policy: PrecisionPolicy,
) -> Result<(ParameterSet, QuantStats)> {
    params.validate()?;
    let mut stats = QuantStats::default();
    let mut out = params.clone();
    if !policy.omc_enabled {
        return Ok((out, stats));
    }
    for v in out
        .variables
        .iter_mut()
        .filter(|v| v.kind == VarKind::Matrix && !v.trainable)
    {
        for x in &mut v.data {
            *x = round_to_f16(*x, &mut stats);
        }
        v.precision = Precision::F16;
    }
    Ok((out, stats))
}

/// Widens the named variables back to f32. Half-to-single widening is exact
/// so values do not change.
pub fn dequantize_trainable<S: AsRef<str>>(
    params: &ParameterSet,
    trainable: &[S],
) -> Result<ParameterSet> {
    let mut out = params.clone();
    for name in trainable {
        let name = name.as_ref();
        let v = out
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown variable {name}")))?;
        v.precision = Precision::F32;
    }
    Ok(out)
}

fn record_bytes(name_len: usize, rank: usize, elements: usize, width: usize) -> usize {
    2 + name_len + 1 + 4 + 1 + 1 + 1 + 4 * rank + elements * width
}

/// Closed-form size of `serialize(params)`.
pub fn serialized_size(params: &ParameterSet) -> usize {
    HEADER_BYTES
        + params
            .variables
            .iter()
            .map(|v| record_bytes(v.name.len(), v.shape.len(), v.len(), v.precision.width()))
            .sum::<usize>()
}

/// Closed-form size of `encode_update` for a gradient map.
pub fn update_size(grads: &GradientMap, reference: &ParameterSet) -> usize {
    HEADER_BYTES
        + UPDATE_TRAILER_BYTES
        + reference
            .variables
            .iter()
            .filter(|v| grads.contains_key(&v.name))
            .map(|v| record_bytes(v.name.len(), v.shape.len(), v.len(), 4))
            .sum::<usize>()
}

fn write_record(out: &mut Vec<u8>, v: &Variable) -> Result<()> {
    let name = v.name.as_bytes();
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Config(format!("variable name too long: {}", v.name)))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    out.push(match v.kind {
        VarKind::Matrix => 0,
        VarKind::Bias => 1,
    });
    out.extend_from_slice(&(v.layer_index as u32).to_le_bytes());
    out.push(v.trainable as u8);
    out.push(match v.precision {
        Precision::F32 => 0,
        Precision::F16 => 1,
    });
    out.push(v.shape.len() as u8);
    for &d in &v.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match v.precision {
        Precision::F32 => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Precision::F16 => {
            for x in &v.data {
                out.extend_from_slice(&f16::from_f32(*x).to_le_bytes());
            }
        }
    }
    Ok(())
}

fn write_header(out: &mut Vec<u8>, magic: [u8; 4], count: usize) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
}

pub fn serialize(params: &ParameterSet) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out = Vec::with_capacity(serialized_size(params));
    write_header(&mut out, MODEL_MAGIC, params.variables.len());
    for v in &params.variables {
        write_record(&mut out, v)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header(c: &mut Cursor<'_>, magic: [u8; 4]) -> Result<usize> {
    if c.take(4)? != magic {
        return Err(Error::Decode("bad magic".into()));
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Decode(format!("unsupported version {version}")));
    }
    Ok(c.u32()? as usize)
}

fn read_record(c: &mut Cursor<'_>) -> Result<Variable> {
    let name_len = c.u16()? as usize;
    let name = String::from_utf8(c.take(name_len)?.to_vec())
        .map_err(|_| Error::Decode("variable name is not utf-8".into()))?;
    let kind = match c.u8()? {
        0 => VarKind::Matrix,
        1 => VarKind::Bias,
        k => return Err(Error::Decode(format!("bad kind tag {k}"))),
    };
    let layer_index = c.u32()? as usize;
    let trainable = match c.u8()? {
        0 => false,
        1 => true,
        t => return Err(Error::Decode(format!("bad trainable flag {t}"))),
    };
    let precision = match c.u8()? {
        0 => Precision::F32,
        1 => Precision::F16,
        p => return Err(Error::Decode(format!("bad precision tag {p}"))),
    };
    let rank = c.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32()? as usize);
    }
    let elements = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Decode("shape overflows".into()))?;
    let raw = c.take(
        elements
            .checked_mul(precision.width())
            .ok_or_else(|| Error::Decode("shape overflows".into()))?,
    )?;
    let data = match precision {
        Precision::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Precision::F16 => raw
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes(b.try_into().unwrap()).to_f32())
            .collect(),
    };
    Ok(Variable {
        name,
        layer_index,
        kind,
        shape,
        precision,
        data,
        trainable,
    })
}

pub fn deserialize(bytes: &[u8]) -> Result<ParameterSet> {
    let mut c = Cursor { bytes, pos: 0 };
    let count = read_header(&mut c, MODEL_MAGIC)?;
    let mut variables = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        variables.push(read_record(&mut c)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    ParameterSet::new(variables).map_err(|e| Error::Decode(e.to_string()))
}

/// Decoded upload payload.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedUpdate {
    pub gradients: GradientMap,
    pub weight: f64,
    pub example_count: u32,
}

/// Serializes a client's gradients as f32 records, in the reference
/// parameter order.
pub fn encode_update(
    grads: &GradientMap,
    reference: &ParameterSet,
    weight: f64,
    example_count: u32,
) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(grads.len());
    for v in &reference.variables {
        if let Some(g) = grads.get(&v.name) {
            if g.len() != v.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} elements, expected {}",
                    v.name,
                    g.len(),
                    v.len()
                )));
            }
            records.push(Variable {
                name: v.name.clone(),
                layer_index: v.layer_index,
                kind: v.kind,
                shape: v.shape.clone(),
                precision: Precision::F32,
                data: g.clone(),
                trainable: true,
            });
        }
    }
    if records.len() != grads.len() {
        return Err(Error::Config("gradient for unknown variable".into()));
    }
    let mut out = Vec::with_capacity(update_size(grads, reference));
    write_header(&mut out, UPDATE_MAGIC, records.len());
    out.extend_from_slice(&weight.to_le_bytes());
    out.extend_from_slice(&example_count.to_le_bytes());
    for r in &records {
        write_record(&mut out, r)?;
    }
    Ok(out)
}

pub fn decode_update(bytes: &[u8]) -> Result<DecodedUpdate> {
    let mut c = Cursor { bytes, pos: 0 };
    let count = read_header(&mut c, UPDATE_MAGIC)?;
    let weight = c.f64()?;
    let example_count = c.u32()?;
    let mut gradients = GradientMap::new();
    for _ in 0..count {
        let v = read_record(&mut c)?;
        gradients.insert(v.name, v.data);
    }
    if c.pos != bytes.len() {
        return Err(Error::Decode("trailing bytes".into()));
    }
    Ok(DecodedUpdate {
        gradients,
        weight,
        example_count,
    })
}

/// Wraps a payload body for the wire.
pub fn wrap(body: &[u8], compress: bool) -> Vec<u8> {
    let mut flag = FLAG_RAW;
    let mut content = None;
    if compress {
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
        enc.write_all(body).expect("writing to a Vec cannot fail");
        let packed = enc.finish().expect("writing to a Vec cannot fail");
        if packed.len() < body.len() {
            flag = FLAG_DEFLATE;
            content = Some(packed);
        }
    }
    let content = content.as_deref().unwrap_or(body);
    let mut out = Vec::with_capacity(WIRE_OVERHEAD + content.len());
    out.push(flag);
    out.extend_from_slice(&(content.len() as u64).to_le_bytes());
    out.extend_from_slice(content);
    out
}

pub fn unwrap(wire: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes: wire, pos: 0 };
    let flag = c.u8()?;
    let len = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Decode("length overflow".into()))?;
    let content = c.take(len)?;
    if c.pos != wire.len() {
        return Err(Error::Decode("trailing bytes after wire body".into()));
    }
    match flag {
        FLAG_RAW => Ok(content.to_vec()),
        FLAG_DEFLATE => {
            let mut out = Vec::new();
            DeflateDecoder::new(content)
                .read_to_end(&mut out)
                .map_err(|e| Error::Decode(format!("inflate failed: {e}")))?;
            Ok(out)
        }
        f => Err(Error::Decode(format!("unknown wire flag {f}"))),
    }
}

/// Exact on-wire byte count of a payload body.
pub fn measure_transport(body: &[u8], compressed: bool) -> usize {
    if compressed {
        wrap(body, true).len()
    } else {
        WIRE_OVERHEAD + body.len()
    }
}

/// Raw body size plus both wire sizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportSize {
    pub raw: u64,
    pub compressed: u64,
}

impl TransportSize {
    pub fn of(body: &[u8]) -> Self {
        TransportSize {
            raw: body.len() as u64,
            compressed: measure_transport(body, true) as u64,
        }
    }
}
