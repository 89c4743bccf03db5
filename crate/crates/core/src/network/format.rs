//! Binary model file, little-endian.
//!
//! ```text
//! magic      b"LBF1"
//! version    u32 = 1
//! K          u32   scale count
//! M          u32   points per patch
//! activation u32   0 = rectifier
//! depths     u32 x 3   encoder / head / fusion layer counts
//! shapes     (u32 inputs, u32 outputs) per layer, declaration order
//! payload    f64 weights (row-major, outputs x inputs) of every layer in
//!            declaration order, then f64 biases in the same order
//! ```
//!
//! Declaration order is: encoder of scale 0..K, sigma_d head of scale 0..K,
//! sigma_n head of scale 0..K, fusion stack.

use super::{Activation, Architecture, Dense, LbfModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LBF1";
pub const VERSION: u32 = 1;

pub(super) fn encode(model: &LbfModel) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = Vec::with_capacity(64 + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    let header = [
        VERSION,
        arch.scales as u32,
        arch.patch_size as u32,
        arch.activation.code(),
        arch.encoder_widths.len() as u32,
        arch.head_widths.len() as u32 + 1,
        arch.fusion_widths.len() as u32 + 1,
    ];
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in model.layers() {
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
    }
    for l in model.layers() {
        for w in &l.weight {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    for l in model.layers() {
        for b in &l.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<LbfModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let scales = r.u32()? as usize;
    let patch_size = r.u32()? as usize;
    let activation = Activation::from_code(r.u32()?)
        .ok_or_else(|| Error::ModelFormat("unknown activation".into()))?;
    let enc_depth = r.u32()? as usize;
    let head_depth = r.u32()? as usize;
    let fusion_depth = r.u32()? as usize;
    if scales == 0 || enc_depth == 0 || head_depth == 0 || fusion_depth == 0 || scales > 64 {
        return Err(Error::ModelFormat("invalid layer table".into()));
    }
    let n_layers = scales * enc_depth + 2 * scales * head_depth + fusion_depth;
    if n_layers > bytes.len() / 8 {
        return Err(Error::ModelFormat("layer table exceeds file size".into()));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let outputs = |range: std::ops::Range<usize>| -> Vec<usize> {
        shapes[range].iter().map(|s| s.1).collect()
    };
    let encoder_widths = outputs(0..enc_depth);
    let head_start = scales * enc_depth;
    let head_widths = outputs(head_start..head_start + head_depth - 1);
    let fusion_start = head_start + 2 * scales * head_depth;
    let fusion_widths = outputs(fusion_start..fusion_start + fusion_depth - 1);
    let arch = Architecture {
        scales,
        patch_size,
        encoder_widths,
        head_widths,
        fusion_widths,
        activation,
    };

    let total = shapes.iter().fold(0usize, |acc, &(i, o)| {
        acc.saturating_add(i.saturating_mul(o).saturating_add(o))
    });
    if (bytes.len() - r.pos) / 8 != total || !(bytes.len() - r.pos).is_multiple_of(8) {
        return Err(Error::ModelFormat(format!(
            "payload has {} bytes, layer table needs {} values",
            bytes.len() - r.pos,
            total
        )));
    }
    let mut layers: Vec<Dense> = shapes.iter().map(|&(i, o)| Dense::zeros(i, o)).collect();
    for l in &mut layers {
        for w in &mut l.weight {
            *w = r.f64()?;
        }
    }
    for l in &mut layers {
        for b in &mut l.bias {
            *b = r.f64()?;
        }
    }
    LbfModel::from_layers(arch, layers).map_err(|e| Error::ModelFormat(e.to_string()))
}
