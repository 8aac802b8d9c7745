//! Policy weight files.
//!
//! ```text
//! "SMPW"                     magic
//! u32 version                currently 1
//! spec block                 kind u8 (0 dense, 1 moe), name (u16 length + UTF-8),
//!                            input u32, output u32, hidden count u32, hidden u32...,
//!                            moe only: n u32, k u32, layer u32, w_importance f64
//! parameter blocks           f32, layer order; dense: weight (in × out, row-major)
//!                            then bias; moe: w_gate, w_noise, experts 0..n
//! u32 crc32                  of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sgmoe_core::moe::MoeLayer;
use sgmoe_core::policy::{ActorKind, ActorSpec, Layer, Linear, MoeSpec, PolicyNetwork};
use sgmoe_core::{Matrix, Scalar};

pub const MAGIC: [u8; 4] = *b"SMPW";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WeightError {
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {found}, this build reads version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("weight file truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed spec block: {0}")]
    Spec(String),
    #[error("weight file holds {found} but {expected} was expected")]
    SpecMismatch { expected: String, found: String },
    #[error(transparent)]
    Core(#[from] sgmoe_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WeightError>;

/// One-line description used in mismatch errors.
pub fn describe(spec: &ActorSpec) -> String {
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden);
    dims.push(spec.output_dim);
    let chain = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-");
    match &spec.moe {
        Some(m) => format!("MoE actor {chain} (top-{} of {}, layer {})", m.k, m.n, m.layer),
        None => format!("dense actor {chain}"),
    }
}

fn same_architecture(a: &ActorSpec, b: &ActorSpec) -> bool {
    let moe_eq = match (&a.moe, &b.moe) {
        (None, None) => true,
        (Some(x), Some(y)) => x.n == y.n && x.k == y.k && x.layer == y.layer,
        _ => false,
    };
    a.input_dim == b.input_dim && a.output_dim == b.output_dim && a.hidden == b.hidden && moe_eq
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_matrix<T: Scalar>(out: &mut Vec<u8>, m: &Matrix<T>) {
    for v in m.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode<T: Scalar>(net: &PolicyNetwork<T>) -> Vec<u8> {
    let spec = net.spec();
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION as usize);
    out.push(u8::from(spec.moe.is_some()));
    let name = spec.name.as_bytes();
    let name = &name[..name.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    put_u32(&mut out, spec.input_dim);
    put_u32(&mut out, spec.output_dim);
    put_u32(&mut out, spec.hidden.len());
    for &h in &spec.hidden {
        put_u32(&mut out, h);
    }
    if let Some(m) = &spec.moe {
        put_u32(&mut out, m.n);
        put_u32(&mut out, m.k);
        put_u32(&mut out, m.layer);
        out.extend_from_slice(&m.w_importance.to_le_bytes());
    }
    for layer in net.layers() {
        match layer {
            Layer::Linear(l) => {
                put_matrix(&mut out, &l.weight);
                for b in &l.bias {
                    out.extend_from_slice(&(b.as_f64() as f32).to_le_bytes());
                }
            }
            Layer::Moe(m) => {
                put_matrix(&mut out, m.w_gate());
                put_matrix(&mut out, m.w_noise());
                for e in m.experts() {
                    put_matrix(&mut out, e);
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(WeightError::Truncated {
                offset: self.bytes.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or(WeightError::Truncated { offset: self.pos })?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        Ok(Matrix::new(rows, cols, self.floats(rows * cols)?)?)
    }
}

fn read_spec(r: &mut Reader) -> Result<ActorSpec> {
    let kind = r.u8()?;
    if kind > 1 {
        return Err(WeightError::Spec(format!("unknown network kind {kind}")));
    }
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| WeightError::Spec("network name is not UTF-8".into()))?
        .to_string();
    let input_dim = r.dim()?;
    let output_dim = r.dim()?;
    let depth = r.dim()?;
    if depth > 64 {
        return Err(WeightError::Spec(format!("{depth} hidden layers is implausible")));
    }
    let hidden = (0..depth).map(|_| r.dim()).collect::<Result<Vec<_>>>()?;
    let moe = if kind == 1 {
        Some(MoeSpec {
            n: r.dim()?,
            k: r.dim()?,
            layer: r.dim()?,
            w_importance: r.f64()?,
        })
    } else {
        None
    };
    let spec = ActorSpec {
        name,
        hidden,
        input_dim,
        output_dim,
        moe,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses a weight file. Magic, version and checksum are checked in that
/// order, each with its own error.
pub fn decode(bytes: &[u8]) -> Result<PolicyNetwork<f32>> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(WeightError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(WeightError::Truncated { offset: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(WeightError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WeightError::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let spec = read_spec(&mut r)?;
    let mut layers = Vec::new();
    for (i, (inp, out)) in spec.layer_dims().into_iter().enumerate() {
        let layer = match &spec.moe {
            Some(m) if m.layer == i => {
                let w_gate = r.matrix(inp, m.n)?;
                let w_noise = r.matrix(inp, m.n)?;
                let experts = (0..m.n).map(|_| r.matrix(inp, out)).collect::<Result<Vec<_>>>()?;
                Layer::Moe(MoeLayer::from_parts(w_gate, w_noise, experts, m.k)?)
            }
            _ => {
                let weight = r.matrix(inp, out)?;
                Layer::Linear(Linear::new(weight, r.floats(out)?)?)
            }
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(WeightError::Spec(format!(
            "{} unexpected bytes before the checksum",
            body.len() - r.pos
        )));
    }
    Ok(PolicyNetwork::from_layers(spec, layers)?)
}

/// Like [`decode`], but the stored architecture must equal `expected`.
pub fn decode_expecting(bytes: &[u8], expected: &ActorSpec) -> Result<PolicyNetwork<f32>> {
    let net = decode(bytes)?;
    if !same_architecture(net.spec(), expected) {
        return Err(WeightError::SpecMismatch {
            expected: describe(expected),
            found: describe(net.spec()),
        });
    }
    Ok(net)
}

/// Like [`decode`], but the stored network must be of the given kind.
pub fn decode_kind(bytes: &[u8], kind: ActorKind) -> Result<PolicyNetwork<f32>> {
    let net = decode(bytes)?;
    if net.spec().kind() != kind {
        return Err(WeightError::SpecMismatch {
            expected: format!("a {kind:?} actor"),
            found: describe(net.spec()),
        });
    }
    Ok(net)
}

pub fn save<T: Scalar>(net: &PolicyNetwork<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<PolicyNetwork<f32>> {
    decode(&fs::read(path)?)
}
