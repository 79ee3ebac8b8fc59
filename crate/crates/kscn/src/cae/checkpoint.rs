//! Binary checkpoint format.
//!
//! Layout: magic `KSCN`, one version byte, then little-endian u32 counts
//! (height, width, input channels, layer count, per-layer channels, latent
//! dim, p, k), then every weight/bias tensor as little-endian f64 in
//! declaration order, the Adam timestep (u64) and moment buffers, then k
//! subspace bases (d×p, row-major). `p = k = 0` when no subspaces are
//! stored. Round-trips are bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grassmann::SubspaceBasis;
use crate::ksc::SubspaceSet;
use crate::linalg::Matrix;

use super::{tensor_sizes, AdamState, CaeArch, CaeParams};

const MAGIC: [u8; 4] = *b"KSCN";
const VERSION: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        self.buf.extend((v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend(v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        let slice = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| Error::Format(format!("{}: truncated checkpoint", self.path)))?;
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serializes parameters (and optionally the current subspaces) to `path`,
/// writing a temp file first and renaming into place.
pub fn save_checkpoint(path: &Path, params: &CaeParams, subs: Option<&SubspaceSet>) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend(MAGIC);
    w.buf.push(VERSION);
    let arch = &params.arch;
    w.u32(arch.height);
    w.u32(arch.width);
    w.u32(arch.in_channels);
    w.u32(arch.channels.len());
    for &c in &arch.channels {
        w.u32(c);
    }
    w.u32(arch.latent_dim());
    let (p, k) = subs.map_or((0, 0), |s| (s.subspace_dim(), s.k()));
    w.u32(p);
    w.u32(k);

    for t in params.tensors() {
        w.f64s(t);
    }
    w.u64(params.adam.t);
    for t in &params.adam.m {
        w.f64s(t);
    }
    for t in &params.adam.v {
        w.f64s(t);
    }
    if let Some(s) = subs {
        for basis in s.iter() {
            w.f64s(basis.matrix().as_slice());
        }
    }
    crate::data::write_atomic(path, &w.buf)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(CaeParams, Option<SubspaceSet>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let height = r.u32()?;
    let width = r.u32()?;
    let in_channels = r.u32()?;
    let n_layers = r.u32()?;
    if n_layers != 3 {
        return Err(Error::Format(format!(
            "{}: {n_layers} layers, expected 3",
            path.display()
        )));
    }
    let channels = [r.u32()?, r.u32()?, r.u32()?];
    let d = r.u32()?;
    let p = r.u32()?;
    let k = r.u32()?;

    let arch = CaeArch::new(height, width, in_channels, channels)?;
    if arch.latent_dim() != d {
        return Err(Error::Format(format!(
            "{}: latent dim {d} does not match architecture ({})",
            path.display(),
            arch.latent_dim()
        )));
    }

    let sizes = tensor_sizes(&arch);
    let mut tensors = Vec::with_capacity(sizes.len());
    for &s in &sizes {
        tensors.push(r.f64s(s)?);
    }
    let t = r.u64()?;
    let mut m = Vec::with_capacity(sizes.len());
    for &s in &sizes {
        m.push(r.f64s(s)?);
    }
    let mut v = Vec::with_capacity(sizes.len());
    for &s in &sizes {
        v.push(r.f64s(s)?);
    }

    let mut it = tensors.into_iter();
    let mut enc_w = Vec::new();
    let mut enc_b = Vec::new();
    for _ in 0..3 {
        enc_w.push(it.next().unwrap());
        enc_b.push(it.next().unwrap());
    }
    let mut dec_w = Vec::new();
    let mut dec_b = Vec::new();
    for _ in 0..3 {
        dec_w.push(it.next().unwrap());
        dec_b.push(it.next().unwrap());
    }
    let params = CaeParams {
        arch,
        enc_w,
        enc_b,
        dec_w,
        dec_b,
        adam: AdamState { t, m, v },
    };

    let subs = if k > 0 {
        let mut bases = Vec::with_capacity(k);
        for _ in 0..k {
            let data = r.f64s(d * p)?;
            bases.push(SubspaceBasis::new(Matrix::from_vec(d, p, data)?)?);
        }
        Some(SubspaceSet::new(bases)?)
    } else {
        None
    };
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.at
        )));
    }
    Ok((params, subs))
}
