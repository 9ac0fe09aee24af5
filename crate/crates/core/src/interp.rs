//! Bilinear resampling with half-pixel centers and edge clamping.

use crate::error::Result;
use crate::tensor::Tensor;

fn axis_weights(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
                .clamp(0.0, (src_len - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Dense `(out_h·out_w) × (in_h·in_w)` interpolation matrix; every row sums
/// to one, so constant inputs map to constant outputs.
pub fn bilinear_matrix(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Tensor {
    let ys = axis_weights(in_h, out_h);
    let xs = axis_weights(in_w, out_w);
    let mut m = Tensor::zeros(&[out_h * out_w, in_h * in_w]);
    let cols = in_h * in_w;
    let data = m.data_mut();
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let row = (oy * out_w + ox) * cols;
            data[row + y0 * in_w + x0] += (1.0 - wy) * (1.0 - wx);
            data[row + y0 * in_w + x1] += (1.0 - wy) * wx;
            data[row + y1 * in_w + x0] += wy * (1.0 - wx);
            data[row + y1 * in_w + x1] += wy * wx;
        }
    }
    m
}

/// Resizes an `h×w` map to `out_h×out_w`. Same-size input is returned as is.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let ys = axis_weights(h, out_h);
    let xs = axis_weights(w, out_w);
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bottom = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
