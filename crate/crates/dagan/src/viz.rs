//! Attention-map export: the spatial map as a full-resolution PGM, the
//! channel gates as a bar-strip PGM plus a plain-text listing.

use crate::attention::AttentionOutput;
use crate::error::{Error, Result};
use crate::model::AttentionMaps;
use crate::netpbm::{encode_pgm, quantize_unit};
use crate::tensor::{Scalar, Tensor};
use std::path::{Path, PathBuf};

/// Width in pixels of each channel's column in the delta strip.
const BAR_WIDTH: usize = 16;
const BAR_HEIGHT: usize = 16;

fn first_sample<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.rank() == 4 { t.slice0(0) } else { Ok(t.clone()) }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)
        .map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))
}

/// Spatial map [1, h, w] (or [n, 1, h, w]; first sample) to a PGM in [0, 255].
pub fn spatial_map_pgm<T: Scalar>(a_s: &Tensor<T>) -> Result<Vec<u8>> {
    let m = first_sample(a_s)?;
    let s = m.shape();
    if m.rank() != 3 || s[0] != 1 {
        return Err(Error::Shape {
            op: "spatial_map_pgm",
            detail: format!("expected [1, h, w], got {s:?}"),
        });
    }
    let gray: Vec<u8> = m.data().iter().map(|&v| quantize_unit(v.to_f64())).collect();
    encode_pgm(s[2], s[1], &gray)
}

/// Channel gates [c, 1, 1] (or [n, c, 1, 1]; first sample) to a strip where
/// each channel paints one 16-px column of its value.
pub fn delta_strip_pgm<T: Scalar>(delta: &Tensor<T>) -> Result<Vec<u8>> {
    let d = first_sample(delta)?;
    if d.rank() != 3 || d.shape()[1] != 1 || d.shape()[2] != 1 {
        return Err(Error::Shape {
            op: "delta_strip_pgm",
            detail: format!("expected [c, 1, 1], got {:?}", d.shape()),
        });
    }
    let c = d.shape()[0];
    let w = c * BAR_WIDTH;
    let mut gray = vec![0u8; BAR_HEIGHT * w];
    for (ch, &v) in d.data().iter().enumerate() {
        let byte = quantize_unit(v.to_f64());
        for row in gray.chunks_mut(w) {
            row[ch * BAR_WIDTH..(ch + 1) * BAR_WIDTH].fill(byte);
        }
    }
    encode_pgm(w, BAR_HEIGHT, &gray)
}

pub fn delta_text<T: Scalar>(delta: &Tensor<T>) -> Result<String> {
    let d = first_sample(delta)?;
    let mut out = String::new();
    for &v in d.data() {
        out.push_str(&format!("{:.6}\n", v.to_f64()));
    }
    Ok(out)
}

/// Write whichever maps are present; returns the paths written.
pub fn export_maps<T: Scalar>(maps: &AttentionMaps<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if let Some(a_s) = &maps.a_s {
        let p = dir.join("a_s.pgm");
        write(&p, &spatial_map_pgm(a_s)?)?;
        written.push(p);
    }
    if let Some(delta) = &maps.delta {
        let strip = dir.join("delta.pgm");
        write(&strip, &delta_strip_pgm(delta)?)?;
        written.push(strip);
        let txt = dir.join("delta.txt");
        write(&txt, delta_text(delta)?.as_bytes())?;
        written.push(txt);
    }
    if written.is_empty() {
        return Err(Error::Invalid("no attention maps to export".into()));
    }
    Ok(written)
}

pub fn export_attention<T: Scalar>(attn: &AttentionOutput<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    export_maps(
        &AttentionMaps { a_s: Some(attn.a_s.clone()), delta: Some(attn.delta.clone()) },
        dir,
    )
}
