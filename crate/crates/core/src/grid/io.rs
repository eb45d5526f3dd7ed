//! Grayscale image and dense-flow file formats.
//!
//! Images: 8- and 16-bit grayscale PNG, and binary PGM (P5). Samples are
//! normalized to `[0, 1]` on load by dividing by the format's maximum value;
//! saving quantizes with round-to-nearest at the requested depth, so
//! load(save(x)) is idempotent at equal depth.
//!
//! Flow: little-endian binary with a `PIEH` float tag, `i32` width/height,
//! then row-major interleaved `(dx, dy)` `f32` pairs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Image2D, VectorField2D};
use crate::{Error, Result};

/// Output quantization depth for [`save_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

const FLOW_TAG: f32 = 202021.25;
const MAX_DIM: i32 = 1 << 20;

fn extension_of(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

/// Loads a grayscale PNG or binary PGM and normalizes samples to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image2D> {
    match extension_of(path).as_str() {
        "png" => load_png(path),
        "pgm" => load_pgm(path),
        other => Err(Error::ImageFormat {
            path: path.to_path_buf(),
            message: format!("unsupported extension '{other}' (expected png or pgm)"),
        }),
    }
}

fn load_png(path: &Path) -> Result<Image2D> {
    let dynimg = image::open(path).map_err(|e| Error::ImageFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Image2D::new(w as usize, h as usize, data)
        }
        image::DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            let data = img.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            Image2D::new(w as usize, h as usize, data)
        }
        other => Err(Error::ImageFormat {
            path: path.to_path_buf(),
            message: format!(
                "expected 8- or 16-bit grayscale, got {:?}",
                other.color()
            ),
        }),
    }
}

/// Saves as grayscale PNG or binary PGM depending on the file extension.
/// Values are clamped to `[0, 1]` and quantized at the requested depth.
pub fn save_image(path: &Path, img: &Image2D, depth: BitDepth) -> Result<()> {
    match extension_of(path).as_str() {
        "png" => save_png(path, img, depth),
        "pgm" => save_pgm(path, img, depth),
        other => Err(Error::ImageFormat {
            path: path.to_path_buf(),
            message: format!("unsupported extension '{other}' (expected png or pgm)"),
        }),
    }
}

fn quantize<T>(img: &Image2D, max: f64, cast: impl Fn(f64) -> T) -> Vec<T> {
    img.data()
        .iter()
        .map(|&v| cast((v.clamp(0.0, 1.0) * max).round()))
        .collect()
}

fn save_png(path: &Path, img: &Image2D, depth: BitDepth) -> Result<()> {
    let w = img.width() as u32;
    let h = img.height() as u32;
    let result = match depth {
        BitDepth::Eight => {
            let buf: Vec<u8> = quantize(img, 255.0, |v| v as u8);
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer sized from image")
                .save(path)
        }
        BitDepth::Sixteen => {
            let buf: Vec<u16> = quantize(img, 65535.0, |v| v as u16);
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
                .expect("buffer sized from image")
                .save(path)
        }
    };
    result.map_err(|e| Error::ImageFormat {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_pgm(path: &Path, img: &Image2D, depth: BitDepth) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let maxval = match depth {
        BitDepth::Eight => 255u32,
        BitDepth::Sixteen => 65535u32,
    };
    write!(out, "P5\n{} {}\n{}\n", img.width(), img.height(), maxval)
        .map_err(|e| Error::io(path, e))?;
    match depth {
        BitDepth::Eight => {
            let buf: Vec<u8> = quantize(img, 255.0, |v| v as u8);
            out.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
        BitDepth::Sixteen => {
            // Raw PGM stores 16-bit samples most significant byte first.
            for v in quantize(img, 65535.0, |v| v as u16) {
                out.write_all(&v.to_be_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn load_pgm(path: &Path) -> Result<Image2D> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::ImageFormat {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("missing P5 signature (only binary PGM is supported)".into()));
    }
    // Header: three whitespace-separated integers after the signature, with
    // '#' comments allowed; a single whitespace byte separates the header
    // from the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comment lines.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text.parse().map_err(|_| bad("header value out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} out of range")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    let n = width * height;
    let scale = 1.0 / maxval as f64;
    let data: Vec<f64> = if maxval < 256 {
        if raster.len() != n {
            return Err(bad(format!("expected {} raster bytes, got {}", n, raster.len())));
        }
        raster.iter().map(|&b| b as f64 * scale).collect()
    } else {
        if raster.len() != 2 * n {
            return Err(bad(format!("expected {} raster bytes, got {}", 2 * n, raster.len())));
        }
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Image2D::new(width, height, data)
}

/// Writes a displacement field in the binary flow format (f32 samples).
pub fn write_flow(path: &Path, u: &VectorField2D) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    out.write_f32::<LittleEndian>(FLOW_TAG).map_err(io_err)?;
    out.write_i32::<LittleEndian>(u.width() as i32).map_err(io_err)?;
    out.write_i32::<LittleEndian>(u.height() as i32).map_err(io_err)?;
    for y in 0..u.height() {
        for x in 0..u.width() {
            let (dx, dy) = u.get(x, y);
            out.write_f32::<LittleEndian>(dx as f32).map_err(io_err)?;
            out.write_f32::<LittleEndian>(dy as f32).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// Reads a flow file, validating the tag, the dimensions, and the payload
/// length.
pub fn read_flow(path: &Path) -> Result<VectorField2D> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut inp = BufReader::new(file);
    let bad = |message: String| Error::FlowFormat {
        path: path.to_path_buf(),
        message,
    };
    let io_err = |e| Error::io(path, e);
    let tag = inp.read_f32::<LittleEndian>().map_err(io_err)?;
    if tag != FLOW_TAG {
        return Err(bad(format!("bad tag {tag} (expected {FLOW_TAG})")));
    }
    let w = inp.read_i32::<LittleEndian>().map_err(io_err)?;
    let h = inp.read_i32::<LittleEndian>().map_err(io_err)?;
    if w <= 0 || h <= 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(bad(format!("implausible dimensions {w}x{h}")));
    }
    let n = w as usize * h as usize;
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for _ in 0..n {
        dx.push(
            inp.read_f32::<LittleEndian>()
                .map_err(|_| bad("truncated payload".into()))? as f64,
        );
        dy.push(
            inp.read_f32::<LittleEndian>()
                .map_err(|_| bad("truncated payload".into()))? as f64,
        );
    }
    let mut trailing = [0u8; 1];
    match inp.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after payload".into())),
        Err(e) => return Err(Error::io(path, e)),
    }
    VectorField2D::new(w as usize, h as usize, dx, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("create temp dir")
    }

    fn checker(w: usize, h: usize) -> Image2D {
        Image2D::from_fn(w, h, |x, y| ((x + y) % 2) as f64 * 0.8 + 0.1)
    }

    #[test]
    fn png_roundtrip_both_depths() {
        let dir = tmpdir();
        let img = Image2D::from_fn(9, 5, |x, y| (x as f64 * 5.0 + y as f64) / 64.0);
        for (depth, max, name) in [
            (BitDepth::Eight, 255.0, "a8.png"),
            (BitDepth::Sixteen, 65535.0, "a16.png"),
        ] {
            let path = dir.path().join(name);
            save_image(&path, &img, depth).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.width(), 9);
            assert_eq!(back.height(), 5);
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / max, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn png_save_then_load_is_idempotent_at_equal_depth() {
        let dir = tmpdir();
        let img = checker(6, 6);
        let p1 = dir.path().join("one.png");
        let p2 = dir.path().join("two.png");
        save_image(&p1, &img, BitDepth::Sixteen).unwrap();
        let once = load_image(&p1).unwrap();
        save_image(&p2, &once, BitDepth::Sixteen).unwrap();
        let twice = load_image(&p2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn pgm_roundtrip_both_depths() {
        let dir = tmpdir();
        let img = checker(5, 7);
        for (depth, max, name) in [
            (BitDepth::Eight, 255.0, "b8.pgm"),
            (BitDepth::Sixteen, 65535.0, "b16.pgm"),
        ] {
            let path = dir.path().join(name);
            save_image(&path, &img, depth).unwrap();
            let back = load_image(&path).unwrap();
            assert!(back.same_shape(&img));
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 0.5 / max);
            }
        }
    }

    #[test]
    fn pgm_header_comments_and_odd_maxval() {
        let dir = tmpdir();
        let path = dir.path().join("c.pgm");
        // maxval 100: normalization must divide by 100, not 255.
        std::fs::write(&path, b"P5\n# comment line\n2 2\n100\n\x00\x32\x64\x19").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn pgm_rejects_ascii_and_truncation() {
        let dir = tmpdir();
        let p2 = dir.path().join("ascii.pgm");
        std::fs::write(&p2, b"P2\n2 2\n255\n0 1 2 3\n").unwrap();
        assert!(load_image(&p2).is_err());
        let short = dir.path().join("short.pgm");
        std::fs::write(&short, b"P5\n2 2\n255\n\x00\x01").unwrap();
        assert!(load_image(&short).is_err());
    }

    #[test]
    fn rejects_color_png_and_unknown_extension() {
        let dir = tmpdir();
        let rgb = dir.path().join("rgb.png");
        image::RgbImage::from_pixel(3, 3, image::Rgb([10, 200, 30]))
            .save(&rgb)
            .unwrap();
        assert!(load_image(&rgb).is_err());
        assert!(load_image(&dir.path().join("x.tiff")).is_err());
    }

    #[test]
    fn flow_roundtrip_within_f32() {
        let dir = tmpdir();
        let path = dir.path().join("u.flo");
        let mut u = VectorField2D::zeros(4, 3);
        for y in 0..3 {
            for x in 0..4 {
                u.set(x, y, x as f64 * 0.37 - 1.0, y as f64 * -0.21 + 0.5);
            }
        }
        write_flow(&path, &u).unwrap();
        let back = read_flow(&path).unwrap();
        assert!(back.same_shape(&u));
        for i in 0..12 {
            assert_eq!(back.dx()[i], u.dx()[i] as f32 as f64);
            assert_eq!(back.dy()[i], u.dy()[i] as f32 as f64);
        }
    }

    #[test]
    fn flow_header_layout_is_stable() {
        let dir = tmpdir();
        let path = dir.path().join("h.flo");
        let mut u = VectorField2D::zeros(2, 1);
        u.set(0, 0, 1.0, 2.0);
        u.set(1, 0, 3.0, 4.0);
        write_flow(&path, &u).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(&bytes[4..8], &2i32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1i32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 4 * 4);
    }

    #[test]
    fn flow_rejects_bad_tag_dims_truncation_and_trailing() {
        let dir = tmpdir();
        let path = dir.path().join("bad.flo");
        let mut u = VectorField2D::zeros(2, 2);
        u.set(0, 0, 1.0, -1.0);
        write_flow(&path, &u).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_tag = good.clone();
        bad_tag[0] = 0;
        std::fs::write(&path, &bad_tag).unwrap();
        assert!(read_flow(&path).is_err());

        let mut bad_dims = good.clone();
        bad_dims[4..8].copy_from_slice(&(-3i32).to_le_bytes());
        std::fs::write(&path, &bad_dims).unwrap();
        assert!(read_flow(&path).is_err());

        std::fs::write(&path, &good[..good.len() - 2]).unwrap();
        assert!(read_flow(&path).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(read_flow(&path).is_err());
    }
}
