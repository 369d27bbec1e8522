//! Binary greymap (P5) export.

use cyclechaos::data::pixel_to_byte;
use cyclechaos::Tensor;

/// First channel of an `[h, w, c]` image as an 8-bit P5 file.
pub fn encode(img: &Tensor) -> Vec<u8> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend((0..h * w).map(|i| pixel_to_byte(img.data()[i * c])));
    out
}

/// Rows of equal-sized images tiled with a one-pixel mid-grey gutter.
pub fn encode_grid(rows: &[Vec<Tensor>]) -> Vec<u8> {
    let Some(first) = rows.first().and_then(|r| r.first()) else {
        return b"P5\n0 0\n255\n".to_vec();
    };
    let (h, w, c) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * (w + 1) + 1;
    let gh = rows.len() * (h + 1) + 1;
    let mut px = vec![128u8; gw * gh];
    for (r, row) in rows.iter().enumerate() {
        for (col, img) in row.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    px[(1 + r * (h + 1) + i) * gw + 1 + col * (w + 1) + j] = pixel_to_byte(img.data()[(i * w + j) * c]);
                }
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend(px);
    out
}
