//! RFT feature-map files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RFT1"
//! u32 h_patches, u32 w_patches, u32 dim, u32 image_h, u32 image_w, u32 patch_size
//! f32 × (h_patches · w_patches · dim)      row-major patch features
//! optional pooling-head block:
//!   "PHD1", u32 dim, u32 n_heads,
//!   f32 × dim (query), then W_q, W_k, W_v, W_o as dim × dim row-major f32
//! ```
//!
//! A file ending right after the feature payload carries no pooling head.

use std::path::Path;

use ndarray::Array2;

use super::binio::{put_f32s, put_u32, read_file, write_file, Reader};
use super::PatchFeatureMap;
use crate::error::{Error, Result};
use crate::extension::PoolingHead;

pub const RFT_MAGIC: &[u8; 4] = b"RFT1";
pub const POOLING_HEAD_MAGIC: &[u8; 4] = b"PHD1";
pub const RFT_HEADER_BYTES: usize = 4 + 6 * 4;

pub fn encode_rft(map: &PatchFeatureMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut out = Vec::with_capacity(RFT_HEADER_BYTES + map.data.len() * 4);
    out.extend_from_slice(RFT_MAGIC);
    for v in [
        map.h_patches,
        map.w_patches,
        map.dim,
        map.image_h,
        map.image_w,
        map.patch_size,
    ] {
        put_u32(&mut out, v)?;
    }
    put_f32s(&mut out, map.data.iter().copied());
    if let Some(head) = &map.pooling_head {
        out.extend_from_slice(POOLING_HEAD_MAGIC);
        put_u32(&mut out, head.dim())?;
        put_u32(&mut out, head.n_heads)?;
        put_f32s(&mut out, head.query.iter().copied());
        for w in [&head.w_q, &head.w_k, &head.w_v, &head.w_o] {
            put_f32s(&mut out, w.iter().copied());
        }
    }
    Ok(out)
}

pub fn decode_rft(bytes: &[u8]) -> Result<PatchFeatureMap> {
    let mut r = Reader::new(bytes, "RFT");
    r.magic(RFT_MAGIC)?;
    let h_patches = r.usize()?;
    let w_patches = r.usize()?;
    let dim = r.usize()?;
    let image_h = r.usize()?;
    let image_w = r.usize()?;
    let patch_size = r.usize()?;
    let n = h_patches
        .checked_mul(w_patches)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Format("RFT: header dimensions overflow".into()))?;
    let data = r.f32s(n)?;
    let pooling_head = if r.remaining() > 0 {
        r.magic(POOLING_HEAD_MAGIC)?;
        let head_dim = r.usize()?;
        let n_heads = r.usize()?;
        let query = r.f32s(head_dim)?;
        let mut mats = Vec::with_capacity(4);
        for _ in 0..4 {
            let v = r.f32s(head_dim * head_dim)?;
            mats.push(Array2::from_shape_vec((head_dim, head_dim), v).expect("sized read"));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("RFT: {} trailing bytes", r.remaining())));
        }
        let w_o = mats.pop().expect("4 mats");
        let w_v = mats.pop().expect("4 mats");
        let w_k = mats.pop().expect("4 mats");
        let w_q = mats.pop().expect("4 mats");
        Some(PoolingHead {
            query,
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
        })
    } else {
        None
    };
    let map = PatchFeatureMap {
        h_patches,
        w_patches,
        dim,
        image_h,
        image_w,
        patch_size,
        data,
        pooling_head,
    };
    map.validate()?;
    Ok(map)
}

pub fn write_rft(path: impl AsRef<Path>, map: &PatchFeatureMap) -> Result<()> {
    write_file(path.as_ref(), &encode_rft(map)?)
}

pub fn read_rft(path: impl AsRef<Path>) -> Result<PatchFeatureMap> {
    decode_rft(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PatchFeatureMap {
        PatchFeatureMap::new(1, 1, 2, 1, 1, 1, vec![0.5, -1.0]).unwrap()
    }

    #[test]
    fn tiny_round_trip() {
        let map = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rft");
        write_rft(&path, &map).unwrap();
        assert_eq!(read_rft(&path).unwrap(), map);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_rft(&tiny()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_rft(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let bytes = encode_rft(&tiny()).unwrap();
        assert!(matches!(decode_rft(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn nan_payload_is_validation_error() {
        let mut bytes = encode_rft(&tiny()).unwrap();
        bytes[RFT_HEADER_BYTES..RFT_HEADER_BYTES + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_rft(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn dinov2_sized_payload() {
        let (h, w, d) = (37, 37, 1024);
        let data: Vec<f32> = (0..h * w * d).map(|i| (i % 97) as f32 * 0.01).collect();
        let map = PatchFeatureMap::new(h, w, d, 518, 518, 14, data).unwrap();
        let bytes = encode_rft(&map).unwrap();
        assert_eq!(bytes.len() - RFT_HEADER_BYTES, 5_607_424);
        assert_eq!(decode_rft(&bytes).unwrap(), map);
    }

    #[test]
    fn pooling_head_round_trip() {
        let mut map = PatchFeatureMap::new(2, 2, 4, 8, 8, 4, (0..16).map(|i| i as f32).collect())
            .unwrap();
        let eye = Array2::<f32>::eye(4);
        map.pooling_head = Some(PoolingHead {
            query: vec![0.1, 0.2, 0.3, 0.4],
            w_q: eye.clone(),
            w_k: eye.clone() * 2.0,
            w_v: eye.clone() * 3.0,
            w_o: eye,
            n_heads: 2,
        });
        let bytes = encode_rft(&map).unwrap();
        assert_eq!(decode_rft(&bytes).unwrap(), map);
        // stray bytes after the payload are not a pooling head
        let mut plain = encode_rft(&tiny()).unwrap();
        plain.extend_from_slice(b"junk");
        assert!(matches!(decode_rft(&plain), Err(Error::Format(_))));
    }
}
