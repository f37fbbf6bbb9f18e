//! 12-bit grayscale images: binary PGM I/O and the resize → crop → normalize chain.
//!
//! File layout: `P5`, ASCII width, height and maxval (`4095`) separated by
//! whitespace (`#` comments allowed), one whitespace byte, then big-endian
//! 16-bit samples in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_VALUE: u16 = 4095;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageGray12 {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
}

impl ImageGray12 {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!(
                "degenerate image size {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Input(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().position(|&v| v > MAX_VALUE) {
            return Err(Error::Range(format!(
                "pixel {p} has value {} above {MAX_VALUE}",
                pixels[p]
            )));
        }
        Ok(ImageGray12 {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, v: u16) -> Result<Self> {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }
}

/// Scales so the shorter side equals `target` (longer side rounded to
/// preserve aspect), sampling source index `floor((i + 0.5) · src / dst)`.
pub fn resize_nn_aspect(img: &ImageGray12, target: usize) -> Result<ImageGray12> {
    if target == 0 {
        return Err(Error::Input("resize target must be ≥ 1".into()));
    }
    let (w, h) = (img.width, img.height);
    if w == 0 || h == 0 {
        return Err(Error::Input("cannot resize an empty image".into()));
    }
    let round_div = |num: usize, den: usize| (2 * num + den) / (2 * den);
    let (nw, nh) = if w <= h {
        (target, round_div(h * target, w).max(1))
    } else {
        (round_div(w * target, h).max(1), target)
    };
    resize_nn(img, nw, nh)
}

/// Nearest-neighbour resampling to exactly `nw × nh`.
pub fn resize_nn(img: &ImageGray12, nw: usize, nh: usize) -> Result<ImageGray12> {
    if nw == 0 || nh == 0 {
        return Err(Error::Input(format!("degenerate target size {nw}x{nh}")));
    }
    let src_index = |i: usize, src: usize, dst: usize| ((2 * i + 1) * src / (2 * dst)).min(src - 1);
    let xs: Vec<usize> = (0..nw).map(|x| src_index(x, img.width, nw)).collect();
    let mut pixels = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let sy = src_index(y, img.height, nh);
        let row = &img.pixels[sy * img.width..(sy + 1) * img.width];
        pixels.extend(xs.iter().map(|&sx| row[sx]));
    }
    ImageGray12::new(nw, nh, pixels)
}

/// Centered `w × h` window, offsets `floor((W − w)/2)` and `floor((H − h)/2)`.
pub fn center_crop(img: &ImageGray12, w: usize, h: usize) -> Result<ImageGray12> {
    if w == 0 || h == 0 || w > img.width || h > img.height {
        return Err(Error::Input(format!(
            "cannot crop {w}x{h} from {}x{} image",
            img.width, img.height
        )));
    }
    let left = (img.width - w) / 2;
    let top = (img.height - h) / 2;
    let mut pixels = Vec::with_capacity(w * h);
    for y in top..top + h {
        pixels.extend_from_slice(&img.pixels[y * img.width + left..y * img.width + left + w]);
    }
    ImageGray12::new(w, h, pixels)
}

/// `pixel / 4095` as a `[h, w]` tensor.
pub fn normalize<T: Scalar>(img: &ImageGray12) -> Result<Tensor<T>> {
    if let Some(&v) = img.pixels.iter().find(|&&v| v > MAX_VALUE) {
        return Err(Error::Range(format!("pixel value {v} exceeds {MAX_VALUE}")));
    }
    let scale = T::one() / T::of(MAX_VALUE as f64);
    Tensor::new(
        vec![img.height, img.width],
        img.pixels
            .iter()
            .map(|&p| T::of(p as f64) * scale)
            .collect(),
    )
}

/// Resize shorter side to `side`, center-crop to `side × side`, normalize;
/// returns `[1, side, side]`.
pub fn transform_chain<T: Scalar>(img: &ImageGray12, side: usize) -> Result<Tensor<T>> {
    let r = resize_nn_aspect(img, side)?;
    let c = center_crop(&r, side, side)?;
    normalize::<T>(&c)?.reshape(vec![1, side, side])
}

pub fn encode_pgm(img: &ImageGray12) -> Vec<u8> {
    let header = format!("P5\n{} {}\n{}\n", img.width, img.height, MAX_VALUE);
    let mut out = Vec::with_capacity(header.len() + 2 * img.pixels.len());
    out.extend_from_slice(header.as_bytes());
    for &p in &img.pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGray12> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // Whitespace and comments before each field.
        let start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if pos == start {
            return Err(Error::parse(
                pos as u64,
                format!("expected whitespace before {name}"),
            ));
        }
        let digits_start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == digits_start {
            return Err(Error::parse(pos as u64, format!("expected decimal {name}")));
        }
        let text = std::str::from_utf8(&bytes[digits_start..pos]).expect("ascii digits");
        fields[i] = text
            .parse()
            .map_err(|_| Error::parse(digits_start as u64, format!("{name} out of range")))?;
    }
    let [width, height, maxval] = fields;
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::parse(
                pos as u64,
                "expected single whitespace after maxval",
            ))
        }
    }
    if maxval != MAX_VALUE as usize {
        return Err(Error::Format(format!(
            "maxval must be {MAX_VALUE} for 12-bit data, found {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(0, format!("degenerate size {width}x{height}")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| Error::parse(0, "image size overflows"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::parse(
            bytes.len() as u64,
            format!(
                "truncated payload: expected {need} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for (i, pair) in payload[..need].chunks_exact(2).enumerate() {
        let v = u16::from_be_bytes([pair[0], pair[1]]);
        if v > MAX_VALUE {
            return Err(Error::parse(
                (pos + 2 * i) as u64,
                format!("sample {v} exceeds maxval {MAX_VALUE}"),
            ));
        }
        pixels.push(v);
    }
    ImageGray12::new(width, height, pixels)
}

pub fn save_image(img: &ImageGray12, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(img))?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGray12> {
    decode_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageGray12 {
        ImageGray12::new(w, h, (0..w * h).map(|i| (i % 4096) as u16).collect()).unwrap()
    }

    #[test]
    fn resize_keeps_aspect() {
        let img = ImageGray12::filled(2048, 2500, 7).unwrap();
        let r = resize_nn_aspect(&img, 512).unwrap();
        assert_eq!((r.width(), r.height()), (512, 625));
        let c = center_crop(&r, 512, 512).unwrap();
        assert_eq!((c.width(), c.height()), (512, 512));
    }

    #[test]
    fn resize_identity_and_upscale() {
        let img = ramp(8, 8);
        assert_eq!(resize_nn_aspect(&img, 8).unwrap(), img);
        let small = ImageGray12::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = resize_nn_aspect(&small, 4).unwrap();
        assert_eq!(
            up.pixels(),
            &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
        );
    }

    #[test]
    fn crop_offsets() {
        // 3 wide, 5 tall; crop 1x2 → left 1, top 1
        let img = ramp(3, 5);
        let c = center_crop(&img, 1, 2).unwrap();
        assert_eq!(c.pixels(), &[4, 7]);
        assert_eq!(center_crop(&img, 3, 5).unwrap(), img);
        assert!(matches!(center_crop(&img, 4, 1), Err(Error::Input(_))));
    }

    #[test]
    fn crop_top_offset_for_512x625() {
        let mut px = vec![0u16; 512 * 625];
        // Mark row 56, the expected top row of the crop.
        px[56 * 512..57 * 512].fill(4095);
        let img = ImageGray12::new(512, 625, px).unwrap();
        let c = center_crop(&img, 512, 512).unwrap();
        assert!(c.pixels()[..512].iter().all(|&v| v == 4095));
        assert!(c.pixels()[512..].iter().all(|&v| v == 0));
    }

    #[test]
    fn normalize_values() {
        let img = ImageGray12::new(3, 1, vec![4095, 0, 819]).unwrap();
        let t = normalize::<f64>(&img).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 0.2).abs() < 1e-15);
        assert!(matches!(
            ImageGray12::new(1, 1, vec![4096]),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let img = ramp(5, 3);
        let bytes = encode_pgm(&img);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);

        let bad = b"P5\n2 2\n255\n\0\0\0\0".to_vec();
        assert!(matches!(decode_pgm(&bad), Err(Error::Format(_))));

        let truncated = &bytes[..bytes.len() - 3];
        match decode_pgm(truncated) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset as usize, truncated.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            decode_pgm(b"P6\n1 1\n4095\n\0\0"),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn pgm_comments_in_header() {
        let mut bytes = b"P5 # comment\n1 # w\n1\n4095\n".to_vec();
        bytes.extend_from_slice(&300u16.to_be_bytes());
        assert_eq!(decode_pgm(&bytes).unwrap().pixels(), &[300]);
    }
}
