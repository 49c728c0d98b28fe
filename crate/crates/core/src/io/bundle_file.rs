//! The `APGB1` binary bundle format.
//!
//! ```text
//! magic      b"APGB1"
//! header     n_nodes u64, n_arcs u64, d u64, C u64, flags u64   (little-endian)
//! offsets    u64 × (n_nodes + 1)
//! targets    u32 × n_arcs
//! features   flags bit 0 clear: f32 × (n_nodes · d), row-major
//!            flags bit 0 set:   nnz u64, then (u32 row, u32 col, f32 value) × nnz
//! labels     i32 × n_nodes
//! crc        u32, CRC-32 of every preceding byte
//! ```

use thiserror::Error;

use crate::graph::GraphBundle;
use crate::nn::DenseMatrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 5] = b"APGB1";
pub const FLAG_SPARSE_FEATURES: u64 = 1;
/// Feature density below which the writer switches to triplets.
pub const SPARSE_DENSITY_THRESHOLD: f64 = 0.05;

const HEADER_LEN: usize = 5 + 5 * 8;
const CRC_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("d must be ≥ 1")]
    NoFeatures,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated {0} section")]
    Truncated(&'static str),
    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),
    #[error("unknown flags {0:#x}")]
    UnknownFlags(u64),
    #[error("{0} trailing bytes after labels")]
    TrailingBytes(usize),
    #[error("bundle violates graph invariants: {0}")]
    InvalidGraph(String),
}

impl BundleError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            BundleError::NoFeatures => 1,
            BundleError::BadMagic => 2,
            BundleError::CrcMismatch { .. } => 3,
            BundleError::Truncated(_) => 4,
            BundleError::InconsistentCounts(_) => 5,
            BundleError::UnknownFlags(_) => 6,
            BundleError::TrailingBytes(_) => 7,
            BundleError::InvalidGraph(_) => 8,
        }
    }
}

/// Serializes a bundle. Features are stored at 32-bit precision; node names
/// are not part of the format.
pub fn write_bundle<T: Scalar>(g: &GraphBundle<T>) -> Result<Vec<u8>, BundleError> {
    if g.d_features == 0 {
        return Err(BundleError::NoFeatures);
    }
    g.validate()
        .map_err(|e| BundleError::InvalidGraph(e.to_string()))?;
    let n = g.n_nodes;
    let arcs = g.csr_targets.len();
    let nnz = g
        .features
        .as_slice()
        .iter()
        .filter(|v| **v != T::zero())
        .count();
    let sparse = (nnz as f64) < SPARSE_DENSITY_THRESHOLD * (n * g.d_features) as f64;
    let flags = if sparse { FLAG_SPARSE_FEATURES } else { 0 };

    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (n + 1) + 4 * arcs + 4 * n * g.d_features);
    out.extend_from_slice(MAGIC);
    for v in [n, arcs, g.d_features, g.n_classes] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
    for &o in &g.csr_offsets {
        out.extend_from_slice(&(o as u64).to_le_bytes());
    }
    for &t in &g.csr_targets {
        out.extend_from_slice(&(t as u32).to_le_bytes());
    }
    if sparse {
        out.extend_from_slice(&(nnz as u64).to_le_bytes());
        for i in 0..n {
            for (j, &v) in g.features.row(i).iter().enumerate() {
                if v != T::zero() {
                    out.extend_from_slice(&(i as u32).to_le_bytes());
                    out.extend_from_slice(&(j as u32).to_le_bytes());
                    out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
                }
            }
        }
    } else {
        for &v in g.features.as_slice() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    for &y in &g.labels {
        out.extend_from_slice(&(y as i32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, section: &'static str) -> Result<&'a [u8], BundleError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or(BundleError::Truncated(section))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(
            self.take(8, section)?.try_into().unwrap(),
        ))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(
            self.take(4, section)?.try_into().unwrap(),
        ))
    }

    fn f32(&mut self, section: &'static str) -> Result<f32, BundleError> {
        Ok(f32::from_le_bytes(
            self.take(4, section)?.try_into().unwrap(),
        ))
    }

    fn i32(&mut self, section: &'static str) -> Result<i32, BundleError> {
        Ok(i32::from_le_bytes(
            self.take(4, section)?.try_into().unwrap(),
        ))
    }

    /// Fails early when `count` items of `width` bytes cannot fit.
    fn reserve(&self, count: u64, width: u64, section: &'static str) -> Result<usize, BundleError> {
        let need = count
            .checked_mul(width)
            .ok_or(BundleError::Truncated(section))?;
        if need > (self.buf.len() - self.pos) as u64 {
            return Err(BundleError::Truncated(section));
        }
        Ok(count as usize)
    }
}

/// Parses and validates a bundle. The checksum is verified before anything
/// else, so any corruption of a well-formed file surfaces as `CrcMismatch`.
pub fn read_bundle(bytes: &[u8]) -> Result<GraphBundle<f32>, BundleError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(BundleError::Truncated("header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(BundleError::CrcMismatch { stored, computed });
    }
    if &body[..5] != MAGIC {
        return Err(BundleError::BadMagic);
    }
    let mut cur = Cursor { buf: body, pos: 5 };
    let n = cur.u64("header")?;
    let arcs = cur.u64("header")?;
    let d = cur.u64("header")?;
    let c = cur.u64("header")?;
    let flags = cur.u64("header")?;
    if flags & !FLAG_SPARSE_FEATURES != 0 {
        return Err(BundleError::UnknownFlags(flags));
    }
    if n == 0 {
        return Err(BundleError::InconsistentCounts("zero nodes".into()));
    }
    if d == 0 {
        return Err(BundleError::NoFeatures);
    }
    if arcs % 2 != 0 || arcs > u32::MAX as u64 * 2 {
        return Err(BundleError::InconsistentCounts(format!("{arcs} arcs")));
    }

    let n_off = cur.reserve(n + 1, 8, "offsets")?;
    let mut offsets = Vec::with_capacity(n_off);
    for _ in 0..n_off {
        offsets.push(cur.u64("offsets")? as usize);
    }
    if offsets[0] != 0 || offsets[n_off - 1] as u64 != arcs {
        return Err(BundleError::InconsistentCounts(format!(
            "offsets end at {} but header declares {arcs} arcs",
            offsets[n_off - 1]
        )));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(BundleError::InconsistentCounts("offsets decrease".into()));
    }

    let n_arcs = cur.reserve(arcs, 4, "targets")?;
    let mut targets = Vec::with_capacity(n_arcs);
    for _ in 0..n_arcs {
        targets.push(cur.u32("targets")? as usize);
    }

    let n = n as usize;
    let dims = (n as u64)
        .checked_mul(d)
        .ok_or(BundleError::InconsistentCounts(
            "feature size overflows".into(),
        ))?;
    let features = if flags & FLAG_SPARSE_FEATURES != 0 {
        let nnz = cur.u64("features")?;
        if nnz > dims {
            return Err(BundleError::InconsistentCounts(format!(
                "{nnz} stored features exceed {n}x{d}"
            )));
        }
        let nnz = cur.reserve(nnz, 12, "features")?;
        let mut m = DenseMatrix::zeros(n, d as usize);
        for _ in 0..nnz {
            let i = cur.u32("features")? as usize;
            let j = cur.u32("features")? as usize;
            let v = cur.f32("features")?;
            if i >= n || j as u64 >= d {
                return Err(BundleError::InconsistentCounts(format!(
                    "feature entry ({i},{j}) outside {n}x{d}"
                )));
            }
            m.set(i, j, v);
        }
        m
    } else {
        let len = cur.reserve(dims, 4, "features")?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(cur.f32("features")?);
        }
        DenseMatrix::from_vec(n, d as usize, data).expect("length checked")
    };

    cur.reserve(n as u64, 4, "labels")?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = cur.i32("labels")?;
        if y < 0 || y as u64 >= c {
            return Err(BundleError::InconsistentCounts(format!(
                "label {y} outside [0, {c})"
            )));
        }
        labels.push(y as usize);
    }
    if cur.pos != body.len() {
        return Err(BundleError::TrailingBytes(body.len() - cur.pos));
    }

    let g = GraphBundle {
        n_nodes: n,
        n_edges: n_arcs / 2,
        csr_offsets: offsets,
        csr_targets: targets,
        features,
        labels,
        n_classes: c as usize,
        d_features: d as usize,
        names: None,
    };
    g.validate()
        .map_err(|e| BundleError::InvalidGraph(e.to_string()))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    fn small() -> GraphBundle<f32> {
        let f = DenseMatrix::from_rows(&[[1.0f32, 0.0], [0.25, 0.75], [0.0, 1.0]]).unwrap();
        build_graph(&[(0, 1), (1, 2)], f, vec![0, 1, 1]).unwrap()
    }

    fn reseal(mut bytes: Vec<u8>) -> Vec<u8> {
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        bytes
    }

    #[test]
    fn round_trip() {
        let g = small();
        assert_eq!(read_bundle(&write_bundle(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn zero_width_features_rejected() {
        let g = build_graph(&[(0, 1)], DenseMatrix::<f32>::zeros(2, 0), vec![0, 0]).unwrap();
        let err = write_bundle(&g).unwrap_err();
        assert_eq!(err, BundleError::NoFeatures);
        assert_eq!(err.to_string(), "d must be ≥ 1");
    }

    #[test]
    fn distinct_error_kinds() {
        let good = write_bundle(&small()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(read_bundle(&reseal(bad_magic)).unwrap_err().code(), 2);

        let mut flipped = good.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(
            read_bundle(&flipped),
            Err(BundleError::CrcMismatch { .. })
        ));

        // declare more nodes than the body holds
        let mut truncated = good.clone();
        truncated[5..13].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(
            read_bundle(&reseal(truncated)),
            Err(BundleError::Truncated(_))
        ));

        // arcs count disagrees with the offsets
        let mut counts = good.clone();
        counts[13..21].copy_from_slice(&2u64.to_le_bytes());
        assert!(matches!(
            read_bundle(&reseal(counts)),
            Err(BundleError::InconsistentCounts(_))
        ));

        assert!(matches!(
            read_bundle(&good[..10]),
            Err(BundleError::Truncated("header"))
        ));
    }

    #[test]
    fn sparse_features_selected_for_low_density() {
        let mut f = DenseMatrix::<f32>::zeros(4, 100);
        f.set(0, 3, 1.0);
        f.set(2, 99, 0.5);
        let g = build_graph(&[(0, 1), (1, 2), (2, 3)], f, vec![0, 1, 0, 1]).unwrap();
        let bytes = write_bundle(&g).unwrap();
        assert_eq!(
            u64::from_le_bytes(bytes[37..45].try_into().unwrap()),
            FLAG_SPARSE_FEATURES
        );
        assert_eq!(read_bundle(&bytes).unwrap(), g);
    }
}
