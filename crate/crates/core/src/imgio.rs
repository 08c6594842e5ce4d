//! Raster decoding/encoding and dataset directory scanning.
//!
//! Supported on disk: 8-bit RGB PNG, binary PPM (`P6`) for colour images and
//! 8-bit grey PNG / binary PGM (`P5`) for label maps. Pixel values are held as
//! reals in `[0, 1]` (`v / 255` on load, `round(v · 255)` half-up on save).

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{clamp01, Scalar};

/// Label value excluded from every loss and statistic.
pub const IGNORE_LABEL: u8 = 255;

/// Dense `H × W` RGB raster with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb<T> {
    height: usize,
    width: usize,
    pixels: Vec<[T; 3]>,
}

impl<T: Scalar> ImageRgb<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<[T; 3]>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: pixels.len(),
            });
        }
        let in_range = |v: T| v.is_finite() && v >= T::zero() && v <= T::one();
        if let Some(p) = pixels.iter().find(|p| !p.iter().all(|&v| in_range(v))) {
            return Err(Error::InvalidImage(format!(
                "channel value outside [0,1]: {p:?}"
            )));
        }
        Ok(ImageRgb {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image, clamping every channel into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<[T; 3]>) -> Result<Self> {
        for p in pixels.iter_mut() {
            for v in p.iter_mut() {
                *v = clamp01(*v);
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Result<Self> {
        Self::new(height, width, vec![rgb; height * width])
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> &[[T; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [T; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<[T; 3]> {
        self.pixels
    }

    /// One colour channel as a standalone raster.
    pub fn channel(&self, c: usize) -> Channel<T> {
        Channel {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|p| p[c]).collect(),
        }
    }

    /// Rec. 601 luma `0.299 r + 0.587 g + 0.114 b`.
    pub fn to_gray(&self) -> Channel<T> {
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        Channel {
            height: self.height,
            width: self.width,
            data: self
                .pixels
                .iter()
                .map(|p| wr * p[0] + wg * p[1] + wb * p[2])
                .collect(),
        }
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let pixels = self
            .pixels
            .iter()
            .map(|p| p.map(|v| T::lit(quantize(v) as f64 / 255.0)))
            .collect();
        ImageRgb {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.map(quantize)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::DimensionMismatch {
                expected: height * width * 3,
                got: bytes.len(),
            });
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [0, 1, 2].map(|i| T::lit(c[i] as f64 / 255.0)))
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn cast<U: Scalar>(&self) -> ImageRgb<U> {
        ImageRgb {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|v| U::lit(v.to_f64_lossy())))
                .collect(),
        }
    }
}

/// Single-channel `H × W` raster of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Channel<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(Channel {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> T {
        let n = T::lit(self.data.len() as f64);
        self.data.iter().copied().sum::<T>() / n
    }
}

/// Per-pixel class ids; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: labels.len(),
            });
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    /// Checks every non-ignored label against `class_count`.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= class_count)
        {
            Some(&label) => Err(Error::InvalidLabel { label, class_count }),
            None => Ok(()),
        }
    }
}

#[inline]
fn quantize<T: Scalar>(v: T) -> u8 {
    // round half up after clamping
    let v = clamp01(v).to_f64_lossy();
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary netpbm header, returning `(width, height, body offset)`.
fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(path, "bad netpbm magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header field"))?;
    }
    // exactly one whitespace byte separates header and raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "missing header terminator"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero dimension"));
    }
    Ok((width, height, pos + 1))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes an 8-bit PNG or binary PPM into a normalized RGB raster.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageRgb<T>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"P6") {
        let (w, h, off) = parse_pnm_header(&bytes, b"P6", path)?;
        let body = bytes
            .get(off..off + w * h * 3)
            .ok_or_else(|| Error::format(path, "truncated raster"))?;
        return ImageRgb::from_rgb8(h, w, body);
    }
    if bytes.starts_with(b"\x89PNG") {
        let img = decode_png(&bytes, path)?;
        match img.color() {
            ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
            other => {
                return Err(Error::format(path, format!("unsupported colour type {other:?}")))
            }
        }
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        return ImageRgb::from_rgb8(h as usize, w as usize, rgb.as_raw());
    }
    Err(Error::format(path, "not a PNG or binary PPM file"))
}

/// Encodes with 8-bit quantization; the extension picks PNG (`.png`) or PPM (`.ppm`).
pub fn save_image<T: Scalar>(img: &ImageRgb<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.to_rgb8();
    match extension(path).as_deref() {
        Some("ppm") => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&bytes);
            write_bytes(path, &out)
        }
        Some("png") => {
            let out = encode_png(&bytes, img.width, img.height, ColorType::Rgb8, path)?;
            write_bytes(path, &out)
        }
        _ => Err(Error::format(path, "output extension must be .png or .ppm")),
    }
}

fn encode_png(bytes: &[u8], width: usize, height: usize, color: ColorType, path: &Path) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        bytes,
        width as u32,
        height as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(out.into_inner())
}

/// Reads an 8-bit single-channel label raster (PNG or binary PGM).
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"P5") {
        let (w, h, off) = parse_pnm_header(&bytes, b"P5", path)?;
        let body = bytes
            .get(off..off + w * h)
            .ok_or_else(|| Error::format(path, "truncated raster"))?;
        return LabelMap::new(h, w, body.to_vec());
    }
    if bytes.starts_with(b"\x89PNG") {
        let img = decode_png(&bytes, path)?;
        if img.color() != ColorType::L8 {
            return Err(Error::format(path, "label PNG must be 8-bit greyscale"));
        }
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        return LabelMap::new(h as usize, w as usize, g.into_raw());
    }
    Err(Error::format(path, "not a PNG or binary PGM file"))
}

/// Writes a label map as 8-bit grey PNG (`.png`) or PGM (`.pgm`).
pub fn save_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("pgm") => {
            let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
            out.extend_from_slice(&labels.labels);
            write_bytes(path, &out)
        }
        Some("png") => {
            let out = encode_png(&labels.labels, labels.width, labels.height, ColorType::L8, path)?;
            write_bytes(path, &out)
        }
        _ => Err(Error::format(path, "label extension must be .png or .pgm")),
    }
}

/// Writes values in `[0, 1]` as a 16-bit greyscale PNG.
pub fn save_gray16_png<T: Scalar>(
    height: usize,
    width: usize,
    values: &[T],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != height * width {
        return Err(Error::DimensionMismatch {
            expected: height * width,
            got: values.len(),
        });
    }
    // the encoder takes native-endian u16 samples as raw bytes
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| {
            let q = (clamp01(v).to_f64_lossy() * 65535.0 + 0.5).floor() as u16;
            q.to_ne_bytes()
        })
        .collect();
    let out = encode_png(&bytes, width, height, ColorType::L16, path)?;
    write_bytes(path, &out)
}

/// Reads a 16-bit greyscale PNG back into `[0, 1]` reals.
pub fn load_gray16_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Channel<T>> {
    let path = path.as_ref();
    let img = decode_png(&read_bytes(path)?, path)?;
    if img.color() != ColorType::L16 {
        return Err(Error::format(path, "expected 16-bit greyscale PNG"));
    }
    let g = img.to_luma16();
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(|v| T::lit(v as f64 / 65535.0)).collect();
    Channel::new(h as usize, w as usize, data)
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

fn is_raster(path: &Path) -> bool {
    matches!(extension(path).as_deref(), Some("png" | "ppm"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

/// Source/target file lists for a batch job.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_entries: Vec<SourceEntry>,
    pub target_entries: Vec<PathBuf>,
    pub class_count: usize,
}

fn list_rasters(dir: &Path, exclude_suffix: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() || !is_raster(&path) {
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if exclude_suffix.is_some_and(|s| !s.is_empty() && name.ends_with(s)) {
            continue;
        }
        names.push(name.to_owned());
    }
    names.sort();
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

/// PNG and PPM files directly inside `dir`, in lexicographic file-name order.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    list_rasters(dir.as_ref(), None)
}

/// Lists source and target rasters in lexicographic file-name order.
///
/// A source image `stem.ext` is paired with `stem{label_suffix}` in the same
/// directory when that file exists; files ending in the suffix are never
/// treated as images.
pub fn scan_dataset(
    source_dir: impl AsRef<Path>,
    target_dir: impl AsRef<Path>,
    label_suffix: &str,
    class_count: usize,
) -> Result<DatasetManifest> {
    let (source_dir, target_dir) = (source_dir.as_ref(), target_dir.as_ref());
    if class_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "class_count must be at least 2, got {class_count}"
        )));
    }
    let sources = list_rasters(source_dir, Some(label_suffix))?;
    let targets = list_rasters(target_dir, None)?;
    if sources.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", source_dir.display())));
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", target_dir.display())));
    }
    let source_entries = sources
        .into_iter()
        .map(|image| {
            let label = (!label_suffix.is_empty())
                .then(|| {
                    let stem = image.file_stem()?.to_str()?;
                    let candidate = source_dir.join(format!("{stem}{label_suffix}"));
                    candidate.is_file().then_some(candidate)
                })
                .flatten();
            SourceEntry { image, label }
        })
        .collect();
    Ok(DatasetManifest {
        source_entries,
        target_entries: targets,
        class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, body: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn loads_red_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ppm");
        fs::write(&p, ppm(1, 1, &[255, 0, 0])).unwrap();
        let img: ImageRgb<f64> = load_image(&p).unwrap();
        assert_eq!(img.pixels(), &[[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn loads_black_ppm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.ppm");
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0u8; 12]);
        fs::write(&p, bytes).unwrap();
        let img: ImageRgb<f32> = load_image(&p).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert!(img.pixels().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn quantization_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(1.0001f64), 255);
        assert_eq!(quantize(-0.2f64), 0);
    }

    #[test]
    fn corrupt_and_unknown_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P6\n4 4\n255\n\x00\x00").unwrap();
        assert!(matches!(load_image::<f64>(&p), Err(Error::Format { .. })));
        let q = dir.path().join("junk.png");
        fs::write(&q, b"hello").unwrap();
        assert!(matches!(load_image::<f64>(&q), Err(Error::Format { .. })));
        assert!(matches!(
            load_image::<f64>(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(ImageRgb::new(1, 1, vec![[1.5f64, 0.0, 0.0]]).is_err());
        assert!(ImageRgb::<f64>::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn label_maps_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let lm = LabelMap::new(2, 3, vec![0, 1, 2, IGNORE_LABEL, 1, 0]).unwrap();
        for name in ["l.png", "l.pgm"] {
            let p = dir.path().join(name);
            save_label_map(&lm, &p).unwrap();
            assert_eq!(load_label_map(&p).unwrap(), lm);
        }
        assert!(lm.validate(3).is_ok());
        assert!(matches!(lm.validate(2), Err(Error::InvalidLabel { label: 2, .. })));
    }

    #[test]
    fn gray16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let vals = vec![0.0f64, 0.25, 0.5, 1.0];
        save_gray16_png(2, 2, &vals, &p).unwrap();
        let back: Channel<f64> = load_gray16_png(&p).unwrap();
        for (a, b) in vals.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }

    #[test]
    fn scan_pairs_labels_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        fs::create_dir_all(&s).unwrap();
        fs::create_dir_all(&t).unwrap();
        for n in ["b.png", "a.png", "a_label.png", "notes.txt"] {
            fs::write(s.join(n), b"x").unwrap();
        }
        fs::write(t.join("x.png"), b"x").unwrap();
        let m = scan_dataset(&s, &t, "_label.png", 3).unwrap();
        assert_eq!(m.source_entries.len(), 2);
        assert_eq!(m.source_entries[0].image, s.join("a.png"));
        assert_eq!(m.source_entries[0].label, Some(s.join("a_label.png")));
        assert_eq!(m.source_entries[1].label, None);
        assert_eq!(m.target_entries, vec![t.join("x.png")]);
    }

    #[test]
    fn scan_rejects_empty_side() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        fs::create_dir_all(&s).unwrap();
        fs::create_dir_all(&t).unwrap();
        fs::write(s.join("a.png"), b"x").unwrap();
        assert!(matches!(
            scan_dataset(&s, &t, "_label.png", 2),
            Err(Error::EmptyDataset(_))
        ));
    }
}
