//! RGB image tensors and PNG ingestion.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::conv::reflect_index;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `3×H×W` tensor with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape("ImageTensor", format!("expected 3 channels, got {c}")));
        }
        if let Some(i) = t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!(
                "image value {} at index {i} outside [0, 1]",
                t.data()[i]
            )));
        }
        Ok(Self(t))
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    /// Largest per-element absolute difference.
    pub fn linf_distance(&self, other: &ImageTensor) -> f32 {
        self.data()
            .iter()
            .zip(other.data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn digest(&self) -> String {
        self.0.digest()
    }

    /// Quantizes to 8-bit RGB, row-major interleaved.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let d = self.data();
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((d[c * plane + i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::shape(
                "from_rgb8",
                format!("{height}×{width} RGB needs {} bytes, got {}", 3 * height * width, bytes.len()),
            ));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(Tensor::new(vec![3, height, width], data)?)
    }
}

/// Decoded 8-bit PNG before cropping, as interleaved RGB.
struct RawImage {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let img_err = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("unsupported bit depth {:?}; only 8-bit PNGs are accepted", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(img_err("palette PNGs are not supported".into())),
    };
    let mut rgb = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        let row = &bytes[y * stride..y * stride + w * channels];
        for px in row.chunks_exact(channels) {
            // alpha, if present, is dropped
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(RawImage { width: w, height: h, rgb })
}

/// Reads only the PNG header and returns `(height, width)`.
pub fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

/// Loads an 8-bit RGB or grayscale PNG, scales bytes by 1/255, then
/// center-crops and reflect-pads to `target = (height, width)`.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<ImageTensor> {
    let raw = decode_png(path)?;
    let full = ImageTensor::from_rgb8(raw.height, raw.width, &raw.rgb)?;
    fit(&full, target)
}

/// Center-crop any dimension that is too large, reflect-pad any that is too
/// small. Padding is split evenly with the extra row/column at the end.
pub fn fit(image: &ImageTensor, (th, tw): (usize, usize)) -> Result<ImageTensor> {
    if th == 0 || tw == 0 {
        return Err(Error::Invalid("target size must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    let offset = |src: usize, dst: usize| -> isize {
        if src >= dst {
            ((src - dst) / 2) as isize
        } else {
            -(((dst - src) / 2) as isize)
        }
    };
    let (oy, ox) = (offset(h, th), offset(w, tw));
    let src = image.data();
    let mut data = vec![0.0; 3 * th * tw];
    for c in 0..3 {
        for y in 0..th {
            let sy = reflect_index(y as isize + oy, h);
            for x in 0..tw {
                let sx = reflect_index(x as isize + ox, w);
                data[(c * th + y) * tw + x] = src[(c * h + sy) * w + sx];
            }
        }
    }
    ImageTensor::new(Tensor::from_parts(vec![3, th, tw], data))
}

/// Writes an 8-bit RGB PNG with optional `tEXt` entries.
pub fn save_png(path: &Path, image: &ImageTensor, text: &[(&str, &str)]) -> Result<()> {
    write_rgb8(path, image.width(), image.height(), &image.to_rgb8(), text)
}

pub(crate) fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8], text: &[(&str, &str)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(img_err)?;
    }
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(rgb).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

/// Reads the `tEXt` entry `key` from a PNG, if present.
pub fn png_text(path: &Path, key: &str) -> Result<Option<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == key)
        .map(|t| t.text.clone()))
}
