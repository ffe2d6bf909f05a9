//! RTOK token-set files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RTOK"
//! u32 n, u32 d_model, u32 encoder_dim
//! f32 × (n · d_model)        REN tokens, row-major
//! f32 × (n · encoder_dim)    aligned tokens, row-major
//! f32 × (n · 2)              prompts as (x, y)
//! u32 len, UTF-8 × len       source id
//! ```

use std::path::Path;

use ndarray::Array2;

use super::binio::{put_f32s, put_string, put_u32, read_file, write_file, Reader};
use super::{PointPrompt, TokenSet};
use crate::error::{Error, Result};

pub const RTOK_MAGIC: &[u8; 4] = b"RTOK";

pub fn encode_rtok(tokens: &TokenSet) -> Result<Vec<u8>> {
    tokens.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(RTOK_MAGIC);
    put_u32(&mut out, tokens.len())?;
    put_u32(&mut out, tokens.ren.ncols())?;
    put_u32(&mut out, tokens.aligned.ncols())?;
    put_f32s(&mut out, tokens.ren.iter().copied());
    put_f32s(&mut out, tokens.aligned.iter().copied());
    put_f32s(&mut out, tokens.prompts.iter().flat_map(|p| [p.x, p.y]));
    put_string(&mut out, &tokens.source)?;
    Ok(out)
}

pub fn decode_rtok(bytes: &[u8]) -> Result<TokenSet> {
    let mut r = Reader::new(bytes, "RTOK");
    r.magic(RTOK_MAGIC)?;
    let n = r.usize()?;
    let d_model = r.usize()?;
    let dim = r.usize()?;
    let ren = Array2::from_shape_vec((n, d_model), r.f32s(n * d_model)?).expect("sized read");
    let aligned = Array2::from_shape_vec((n, dim), r.f32s(n * dim)?).expect("sized read");
    let prompts = r
        .f32s(n * 2)?
        .chunks_exact(2)
        .map(|c| PointPrompt::new(c[0], c[1]))
        .collect::<Result<Vec<_>>>()?;
    let source = r.string()?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("RTOK: {} trailing bytes", r.remaining())));
    }
    let tokens = TokenSet {
        prompts,
        ren,
        aligned,
        source,
    };
    tokens.validate()?;
    Ok(tokens)
}

pub fn write_rtok(path: impl AsRef<Path>, tokens: &TokenSet) -> Result<()> {
    write_file(path.as_ref(), &encode_rtok(tokens)?)
}

pub fn read_rtok(path: impl AsRef<Path>) -> Result<TokenSet> {
    decode_rtok(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(n in 1usize..6, d in 1usize..5, e in 1usize..5, seed in any::<u32>()) {
            let f = |i: usize| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32 - 0.5;
            let tokens = TokenSet {
                prompts: (0..n).map(|i| PointPrompt { x: (i as f32 + 0.5) / n as f32, y: 0.25 }).collect(),
                ren: Array2::from_shape_fn((n, d), |(i, j)| f(i * 31 + j)),
                aligned: Array2::from_shape_fn((n, e), |(i, j)| f(i * 17 + j + 1000)),
                source: format!("scene-{seed}"),
            };
            let bytes = encode_rtok(&tokens).unwrap();
            let back = decode_rtok(&bytes).unwrap();
            prop_assert_eq!(back, tokens);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let tokens = TokenSet {
            prompts: vec![PointPrompt { x: 0.5, y: 0.5 }],
            ren: Array2::zeros((1, 2)),
            aligned: Array2::zeros((1, 3)),
            source: String::new(),
        };
        let bytes = encode_rtok(&tokens).unwrap();
        assert!(matches!(decode_rtok(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_rtok(&bad), Err(Error::Format(_))));
    }
}
