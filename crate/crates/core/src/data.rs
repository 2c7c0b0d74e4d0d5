//! Dataset ingestion (IDX, CIFAR-10 binary, PNG directories), splitting and
//! image-grid output.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::{DatasetFormat, DatasetSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[−1, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!("images must be B×C×H×W, got {:?}", images.shape())));
        }
        if images.dim0() != labels.len() {
            return Err(Error::format(
                0,
                format!("{} images but {} labels", images.dim0(), labels.len()),
            ));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Leading fraction `train` / trailing remainder, in file order.
    pub fn split(&self, train_fraction: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let k = ((n as f64) * train_fraction).floor() as usize;
        let k = k.min(n);
        (
            self.select(&(0..k).collect::<Vec<_>>()),
            self.select(&(k..n).collect::<Vec<_>>()),
        )
    }

    /// Pad every image with −1 to `size×size`, centered.
    pub fn pad_to(&self, size: usize) -> Result<Dataset> {
        let (b, c, h, w) = match *self.images.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => unreachable!("rank checked at construction"),
        };
        if h == size && w == size {
            return Ok(self.clone());
        }
        if h > size || w > size {
            return Err(Error::invalid(format!(
                "{}×{} images do not fit in {}×{}",
                h, w, size, size
            )));
        }
        let (oy, ox) = ((size - h) / 2, (size - w) / 2);
        let mut out = vec![-1.0f32; b * c * size * size];
        for i in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    let src = ((i * c + ch) * h + y) * w;
                    let dst = ((i * c + ch) * size + y + oy) * size + ox;
                    out[dst..dst + w].copy_from_slice(&self.images.data()[src..src + w]);
                }
            }
        }
        Dataset::new(Tensor::from_vec(&[b, c, size, size], out)?, self.labels.clone())
    }
}

/// `u8 → [−1, 1]` via `x/127.5 − 1`.
#[inline]
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// `[−1, 1] → u8` via `round((x+1)·127.5)` with clamping.
#[inline]
pub fn unit_to_byte(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn read_u32_be(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(off as u64, "unexpected end of file in header"))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parse an IDX image file into `N×1×H×W`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(
            0,
            format!("bad IDX image magic: expected {:#010x}, got {:#010x}", IDX_IMAGES, magic),
        ));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("IDX image data truncated: need {} bytes, have {}", need, bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(Error::format(need as u64, "trailing bytes after IDX image data"));
    }
    let data = bytes[16..].iter().map(|&b| byte_to_unit(b)).collect();
    Tensor::from_vec(&[n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            0,
            format!("bad IDX label magic: expected {:#010x}, got {:#010x}", IDX_LABELS, magic),
        ));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need) as u64,
            format!("IDX label file holds {} bytes, expected {}", bytes.len(), need),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

pub fn ingest_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.dim0() != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.dim0(), labels.len()),
        ));
    }
    Ok((images, labels))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let full = bytes.len() / CIFAR_RECORD;
        return Err(Error::format(
            (full * CIFAR_RECORD) as u64,
            format!(
                "truncated CIFAR-10 record: {} trailing bytes, records are {} bytes",
                bytes.len() % CIFAR_RECORD,
                CIFAR_RECORD
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| byte_to_unit(b)));
    }
    Ok((Tensor::from_vec(&[n, 3, 32, 32], data)?, labels))
}

pub fn ingest_cifar10_bin(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    parse_cifar10(&fs::read(path)?)
}

/// Decode a PNG into `C×H×W` values in `[−1, 1]` (gray or RGB, 8-bit).
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(0, format!("png: {}", e)))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(0, format!("png: {}", e)))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::format(0, format!("unsupported png color type {:?}", other))),
    };
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = &buf[y * info.line_size + x * stride..];
            for ch in 0..c {
                out[ch * h * w + y * w + x] = byte_to_unit(px[ch]);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Encode a `C×H×W` image (C = 1 or 3) as an 8-bit PNG.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::invalid(format!("cannot encode shape {:?}", image.shape()))),
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::invalid(format!("cannot encode {} channels", c))),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(unit_to_byte(image.data()[ch * h * w + y * w + x]));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::invalid(format!("png: {}", e)))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::invalid(format!("png: {}", e)))?;
    }
    Ok(out)
}

/// Class-per-subdirectory PNG tree (subdirectories sorted by name give the
/// labels); a flat directory of PNGs gets label 0.
pub fn ingest_image_dir(dir: &Path) -> Result<(Tensor, Vec<usize>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    let subdirs: Vec<_> = entries.iter().filter(|e| e.path().is_dir()).collect();
    let mut files: Vec<(std::path::PathBuf, usize)> = Vec::new();
    if subdirs.is_empty() {
        for e in &entries {
            if is_png(&e.path()) {
                files.push((e.path(), 0));
            }
        }
    } else {
        for (label, d) in subdirs.iter().enumerate() {
            let mut inner: Vec<_> = fs::read_dir(d.path())?.collect::<std::io::Result<Vec<_>>>()?;
            inner.sort_by_key(|e| e.file_name());
            for e in inner {
                if is_png(&e.path()) {
                    files.push((e.path(), label));
                }
            }
        }
    }
    let mut images = Vec::with_capacity(files.len());
    let mut labels = Vec::with_capacity(files.len());
    for (p, l) in &files {
        let img = decode_png(&fs::read(p)?)?;
        if let Some(first) = images.first() {
            let first: &Tensor = first;
            if first.shape() != img.shape() {
                return Err(Error::format(
                    0,
                    format!("{} has shape {:?}, expected {:?}", p.display(), img.shape(), first.shape()),
                ));
            }
        }
        images.push(img);
        labels.push(*l);
    }
    if images.is_empty() {
        return Err(Error::format(0, format!("no PNG images in {}", dir.display())));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for i in &images {
        data.extend_from_slice(i.data());
    }
    Ok((
        Tensor::from_vec(&[images.len(), shape[0], shape[1], shape[2]], data)?,
        labels,
    ))
}

fn is_png(p: &Path) -> bool {
    p.extension().map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false)
}

/// Load, truncate and pad a dataset according to `spec`.
pub fn load_dataset(spec: &DatasetSpec, image_size: usize) -> Result<Dataset> {
    if spec.path.is_empty() {
        return Err(Error::Config("dataset.path is not set".into()));
    }
    let path = Path::new(&spec.path);
    let (images, labels) = match spec.format {
        DatasetFormat::MnistIdx => {
            let lp = spec
                .labels_path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.labels_path is required for mnist_idx".into()))?;
            ingest_mnist_idx(path, Path::new(lp))?
        }
        DatasetFormat::Cifar10Bin => ingest_cifar10_bin(path)?,
        DatasetFormat::ImageDir => ingest_image_dir(path)?,
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::format(0, format!("label {} >= num_classes {}", bad, spec.num_classes)));
    }
    let mut ds = Dataset::new(images, labels)?;
    if let Some(limit) = spec.limit {
        ds = ds.take(limit);
    }
    ds.pad_to(image_size)
}

/// Tile `B×C×H×W` images row-major into a `cols`-wide grid and write a PNG.
pub fn emit_image_grid(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let bytes = image_grid_png(images, cols)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn image_grid(images: &Tensor, cols: usize) -> Result<Tensor> {
    if cols == 0 {
        return Err(Error::invalid("grid needs at least one column"));
    }
    let (b, c, h, w) = match *images.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::invalid(format!("expected B×C×H×W, got {:?}", images.shape()))),
    };
    if b == 0 {
        return Err(Error::invalid("grid of zero images"));
    }
    let cols = cols.min(b);
    let rows = b.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![-1.0f32; c * gh * gw];
    for i in 0..b {
        let (r, q) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                let src = ((i * c + ch) * h + y) * w;
                let dst = (ch * gh + r * h + y) * gw + q * w;
                out[dst..dst + w].copy_from_slice(&images.data()[src..src + w]);
            }
        }
    }
    Tensor::from_vec(&[c, gh, gw], out)
}

pub fn image_grid_png(images: &Tensor, cols: usize) -> Result<Vec<u8>> {
    encode_png(&image_grid(images, cols)?)
}

/// Procedural colored squares (label 0) and discs (label 1) on a dark
/// background, `n×3×size×size`.
pub fn synthetic_shapes<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Dataset {
    let mut data = vec![-1.0f32; n * 3 * size * size];
    let mut labels = Vec::with_capacity(n);
    let s = size as f32;
    for i in 0..n {
        let label = i % 2;
        let radius = s * rng.random_range(0.18..0.32);
        let cy = rng.random_range(radius..s - radius);
        let cx = rng.random_range(radius..s - radius);
        let color: [f32; 3] = [
            rng.random_range(-0.2..1.0),
            rng.random_range(-0.2..1.0),
            rng.random_range(-0.2..1.0),
        ];
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                let inside = if label == 0 {
                    dy.abs() <= radius && dx.abs() <= radius
                } else {
                    dy * dy + dx * dx <= radius * radius
                };
                if inside {
                    for (ch, col) in color.iter().enumerate() {
                        data[((i * 3 + ch) * size + y) * size + x] = *col;
                    }
                }
            }
        }
        labels.push(label);
    }
    Dataset {
        images: Tensor::from_vec(&[n, 3, size, size], data).expect("shape"),
        labels,
    }
}
