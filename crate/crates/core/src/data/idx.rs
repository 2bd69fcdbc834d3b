//! IDX (ubyte) image and label files plus resolution transforms.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn read_checked(path: &Path, magic: u32, header: usize) -> Result<(Vec<u8>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    let name = path.to_path_buf();
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: name,
            expected: header,
            found: bytes.len(),
        });
    }
    let found = be_u32(&bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: name,
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: name,
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (4..header).step_by(4).map(|at| be_u32(&bytes, at) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: name,
            expected,
            found: bytes.len(),
        });
    }
    Ok((bytes, dims))
}

/// Images as `[n, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let (bytes, dims) = read_checked(path.as_ref(), IMAGES_MAGIC, 16)?;
    let data = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let (bytes, _) = read_checked(path.as_ref(), LABELS_MAGIC, 8)?;
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Reads an image file and its label file; the class count is the largest label plus one.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledSet> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.len0() != y.len() {
        return Err(Error::CountMismatch {
            images: x.len0(),
            labels: y.len(),
        });
    }
    let classes = y.iter().max().map_or(0, |&m| m + 1);
    LabeledSet::new(x, y, classes)
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

/// Writes single-channel images `[n, 1, rows, cols]`, quantizing `[0, 1]` to bytes.
pub fn write_idx_images(path: impl AsRef<Path>, images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidShape {
            op: "write_idx_images",
            reason: format!("expected [n, 1, rows, cols], got {s:?}"),
        });
    }
    let mut bytes = Vec::with_capacity(16 + images.numel());
    for d in [IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend(images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    write_synced(path.as_ref(), &bytes)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::LabelOutOfRange { label: l, classes: 256 })?;
        bytes.push(b);
    }
    write_synced(path.as_ref(), &bytes)
}

/// Bilinear resize of `[n, c, h, w]` with half-pixel centers.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape {
            op: "resize_bilinear",
            reason: format!("input {s:?} to {out_h}x{out_w}"),
        });
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = coords(out_h, h);
    let cols = coords(out_w, w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &x.data()[p * h * w..][..h * w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bottom = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], out_h, out_w], out)
}

/// Centers `[n, c, h, w]` on a zero canvas of `out_h × out_w`.
pub fn pad_to(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] > out_h || s[3] > out_w {
        return Err(Error::InvalidShape {
            op: "pad_to",
            reason: format!("cannot pad {s:?} to {out_h}x{out_w}"),
        });
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (top, left) = ((out_h - h) / 2, (out_w - w) / 2);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        for r in 0..h {
            let src = &x.data()[(p * h + r) * w..][..w];
            out[(p * out_h + top + r) * out_w + left..][..w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![s[0], s[1], out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(resize_bilinear(&x, 2, 3).unwrap(), x);
        let c = Tensor::full(&[2, 1, 5, 5], 0.25);
        let r = resize_bilinear(&c, 8, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pad_centers() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let p = pad_to(&x, 4, 4).unwrap();
        assert_eq!(p.sum(), 4.0);
        assert_eq!(p.data()[5], 1.0);
        assert_eq!(p.data()[0], 0.0);
        assert!(pad_to(&p, 2, 2).is_err());
    }
}
