//! Binary PPM (P6) output for `[3, H, W]` images in `[−1, 1]`.

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// `[−1, 1] → {0..255}` with round-half-up; values outside the range clamp.
pub fn to_byte(x: f32) -> u8 {
    let v = ((x as f64 + 1.0) * 0.5 * 255.0 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("ppm", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + i]));
        }
    }
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_rounds_half_up_and_clamps() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(-2.0), 0);
        assert_eq!(to_byte(3.0), 255);
    }

    #[test]
    fn header_and_interleaving() {
        let img = Tensor::from_fn(&[3, 1, 2], |i| [-1.0, 1.0, 1.0, -1.0, -1.0, -1.0][i]);
        let b = encode(&img).unwrap();
        assert_eq!(&b[..11], b"P6\n2 1\n255\n");
        assert_eq!(&b[11..], &[0, 255, 0, 255, 0, 0]);
        assert!(encode(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
