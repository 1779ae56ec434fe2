//! Binary parameter checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "FTCN" | version u32 | variant u32 | channels u32 | trees_per_client u32 | num_clients u32
//! then conv_w, conv_b, fc_w, fc_b, each as: rank u32 | dims u64 * rank | values f64 * prod(dims)
//! ```
//!
//! `conv_w` is row-major with rank 2, the biases and `fc_w` have rank 1
//! and `fc_b` is a rank-0 scalar.

use super::{CnnConfig, CnnError, CnnParams, HeadVariant};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FTCN";
const HEADER_LEN: usize = 4 + 4 * 5;
const TENSOR_HEADERS_LEN: usize = (4 + 2 * 8) + (4 + 8) + (4 + 8) + 4;

/// Exact byte length of a checkpoint for `config`.
pub fn checkpoint_len(config: &CnnConfig) -> usize {
    HEADER_LEN + TENSOR_HEADERS_LEN + 8 * config.shapes().total()
}

pub fn serialize_params(params: &CnnParams) -> Vec<u8> {
    let cfg = params.config();
    let s = cfg.shapes();
    let mut out = Vec::with_capacity(checkpoint_len(cfg));
    out.extend_from_slice(MAGIC);
    for v in [
        CHECKPOINT_FORMAT_VERSION,
        cfg.head_variant.code(),
        cfg.channels as u32,
        cfg.trees_per_client as u32,
        cfg.num_clients as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let dims: [&[usize]; 4] = [&[s.conv_rows, s.conv_cols], &[s.conv_b], &[s.fc_w], &[]];
    for (tensor, dims) in params.tensors().into_iter().zip(dims) {
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CnnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CnnError::Decode(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CnnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CnnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &[usize], name: &str) -> Result<Vec<f64>, CnnError> {
        let rank = self.u32()? as usize;
        if rank != expected.len() {
            return Err(CnnError::Decode(format!("{name}: rank {rank}, expected {}", expected.len())));
        }
        for &want in expected {
            let got = self.u64()?;
            if got != want as u64 {
                return Err(CnnError::Decode(format!("{name}: dimension {got}, expected {want}")));
            }
        }
        let n: usize = expected.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CnnError::Decode("overflow".into()))?)?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CnnError::Decode(format!("{name}: non-finite value")));
        }
        Ok(values)
    }
}

pub fn deserialize_params(bytes: &[u8]) -> Result<CnnParams, CnnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CnnError::Decode("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(CnnError::Decode(format!("unsupported format version {version}")));
    }
    let variant = r.u32()?;
    let variant = HeadVariant::from_code(variant)
        .ok_or_else(|| CnnError::Decode(format!("unknown head variant code {variant}")))?;
    let config = CnnConfig {
        channels: r.u32()? as usize,
        trees_per_client: r.u32()? as usize,
        num_clients: r.u32()? as usize,
        head_variant: variant,
    };
    config.validate().map_err(|e| CnnError::Decode(e.to_string()))?;
    let s = config.shapes();
    let conv_w = r.tensor(&[s.conv_rows, s.conv_cols], "conv_w")?;
    let conv_b = r.tensor(&[s.conv_b], "conv_b")?;
    let fc_w = r.tensor(&[s.fc_w], "fc_w")?;
    let fc_b = r.tensor(&[], "fc_b")?[0];
    if r.pos != bytes.len() {
        return Err(CnnError::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    CnnParams::from_parts(config, conv_w, conv_b, fc_w, fc_b)
}
