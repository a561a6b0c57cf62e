//! Reading and writing the 2D image formats found in echocardiography
//! datasets: 8/16-bit PNG and uncompressed MetaImage (`.mhd` + `.raw`).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: unsupported image format")]
    UnsupportedFormat { path: PathBuf },
    #[error("{path}: malformed MetaImage header: {reason}")]
    MetaHeader { path: PathBuf, reason: String },
    #[error("{path}: label value {value} does not fit in 8 bits")]
    LabelRange { path: PathBuf, value: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageIoError + '_ {
    move |source| ImageIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Whether a file name carries one of the supported image extensions.
pub fn is_supported(path: &Path) -> bool {
    matches!(extension(path).as_deref(), Some("png") | Some("mhd"))
}

/// Raw pixel samples of a single-channel image, widened to `u32`.
struct RawImage {
    height: usize,
    width: usize,
    samples: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
enum MetaElement {
    U8,
    U16,
    I16,
}

struct MetaHeader {
    width: usize,
    height: usize,
    element: MetaElement,
    big_endian: bool,
    data_file: PathBuf,
}

fn parse_meta_header(path: &Path) -> Result<MetaHeader, ImageIoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |reason: &str| ImageIoError::MetaHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut dims: Option<Vec<usize>> = None;
    let mut element = None;
    let mut data_file = None;
    let mut big_endian = false;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "DimSize" => {
                let parsed: Result<Vec<usize>, _> =
                    value.split_whitespace().map(str::parse).collect();
                dims = Some(parsed.map_err(|_| bad("DimSize is not a list of integers"))?);
            }
            "ElementType" => {
                element = Some(match value {
                    "MET_UCHAR" => MetaElement::U8,
                    "MET_USHORT" => MetaElement::U16,
                    "MET_SHORT" => MetaElement::I16,
                    other => return Err(bad(&format!("element type {other} not supported"))),
                })
            }
            "ElementDataFile" => data_file = Some(value.to_string()),
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => {
                big_endian = value.eq_ignore_ascii_case("true")
            }
            "CompressedData" if value.eq_ignore_ascii_case("true") => {
                return Err(bad("compressed data is not supported"))
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| bad("missing DimSize"))?;
    if dims.len() < 2 || dims[2..].iter().any(|&d| d != 1) {
        return Err(bad("only single-frame 2D images are supported"));
    }
    let data_file = data_file.ok_or_else(|| bad("missing ElementDataFile"))?;
    if data_file == "LOCAL" {
        return Err(bad("inline LOCAL data is not supported"));
    }
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(MetaHeader {
        width: dims[0],
        height: dims[1],
        element: element.ok_or_else(|| bad("missing ElementType"))?,
        big_endian,
        data_file: parent.join(data_file),
    })
}

fn read_meta(path: &Path) -> Result<RawImage, ImageIoError> {
    let header = parse_meta_header(path)?;
    let bytes = fs::read(&header.data_file).map_err(io_err(&header.data_file))?;
    let count = header.width * header.height;
    let samples: Vec<u32> = match header.element {
        MetaElement::U8 => bytes.iter().take(count).map(|&b| b as u32).collect(),
        MetaElement::U16 | MetaElement::I16 => bytes
            .chunks_exact(2)
            .take(count)
            .map(|c| {
                let v = if header.big_endian {
                    u16::from_be_bytes([c[0], c[1]])
                } else {
                    u16::from_le_bytes([c[0], c[1]])
                };
                match header.element {
                    MetaElement::I16 => (v as i16).max(0) as u32,
                    _ => v as u32,
                }
            })
            .collect(),
    };
    if samples.len() != count {
        return Err(ImageIoError::MetaHeader {
            path: path.to_path_buf(),
            reason: format!("data file holds {} samples, expected {count}", samples.len()),
        });
    }
    Ok(RawImage {
        height: header.height,
        width: header.width,
        samples,
    })
}

fn read_png(path: &Path) -> Result<RawImage, ImageIoError> {
    let img = image::open(path).map_err(|source| ImageIoError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let samples = match img {
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        other => other.into_luma8().into_raw().into_iter().map(u32::from).collect(),
    };
    Ok(RawImage {
        height,
        width,
        samples,
    })
}

fn read_raw(path: &Path) -> Result<RawImage, ImageIoError> {
    match extension(path).as_deref() {
        Some("png") => read_png(path),
        Some("mhd") => read_meta(path),
        _ => Err(ImageIoError::UnsupportedFormat {
            path: path.to_path_buf(),
        }),
    }
}

/// Height and width of an image without decoding the pixel data when the
/// format allows it.
pub fn dimensions(path: &Path) -> Result<(usize, usize), ImageIoError> {
    match extension(path).as_deref() {
        Some("png") => {
            let (w, h) = image::image_dimensions(path).map_err(|source| ImageIoError::Decode {
                path: path.to_path_buf(),
                source,
            })?;
            Ok((h as usize, w as usize))
        }
        Some("mhd") => {
            let header = parse_meta_header(path)?;
            Ok((header.height, header.width))
        }
        _ => Err(ImageIoError::UnsupportedFormat {
            path: path.to_path_buf(),
        }),
    }
}

/// Single-channel intensity image as `f32` in the file's native range.
pub fn read_intensity(path: &Path) -> Result<Array2<f32>, ImageIoError> {
    let raw = read_raw(path)?;
    let data = raw.samples.into_iter().map(|v| v as f32).collect();
    Ok(Array2::from_shape_vec((raw.height, raw.width), data).expect("sample count checked"))
}

/// Integer label mask, read without any interpolation.
pub fn read_labels(path: &Path) -> Result<Array2<u8>, ImageIoError> {
    let raw = read_raw(path)?;
    let mut data = Vec::with_capacity(raw.samples.len());
    for v in raw.samples {
        data.push(u8::try_from(v).map_err(|_| ImageIoError::LabelRange {
            path: path.to_path_buf(),
            value: v,
        })?);
    }
    Ok(Array2::from_shape_vec((raw.height, raw.width), data).expect("sample count checked"))
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, pixels: &Array2<u8>) -> Result<(), ImageIoError> {
    let (h, w) = pixels.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels.iter().copied().collect())
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| ImageIoError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Encodes an interleaved RGB buffer (`height × width × 3`) as PNG bytes.
pub fn encode_rgb_png(rgb: &ndarray::Array3<u8>) -> Vec<u8> {
    let (h, w, _) = rgb.dim();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, rgb.iter().copied().collect())
        .expect("buffer length matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Writes an 8-bit MetaImage pair (`name.mhd` + `name.raw`).
pub fn write_meta_u8(path: &Path, pixels: &Array2<u8>) -> Result<(), ImageIoError> {
    let (h, w) = pixels.dim();
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("data.raw")
        .to_string();
    let header = format!(
        "ObjectType = Image\nNDims = 2\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         CompressedData = False\nDimSize = {w} {h}\nElementType = MET_UCHAR\nElementDataFile = {raw_name}\n"
    );
    fs::write(path, header).map_err(io_err(path))?;
    let bytes: Vec<u8> = pixels.iter().copied().collect();
    fs::write(&raw_path, bytes).map_err(io_err(&raw_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let px = array![[0u8, 1, 2], [3, 255, 7]];
        write_gray_png(&path, &px).unwrap();
        assert_eq!(read_labels(&path).unwrap(), px);
        assert_eq!(dimensions(&path).unwrap(), (2, 3));
        assert_eq!(read_intensity(&path).unwrap()[[1, 1]], 255.0);
    }

    #[test]
    fn metaimage_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patient0001_2CH_ED.mhd");
        let px = array![[9u8, 8], [7, 6], [5, 4]];
        write_meta_u8(&path, &px).unwrap();
        assert_eq!(dimensions(&path).unwrap(), (3, 2));
        assert_eq!(read_labels(&path).unwrap(), px);
    }

    #[test]
    fn metaimage_rejects_volumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.mhd");
        fs::write(
            &path,
            "NDims = 3\nDimSize = 4 4 10\nElementType = MET_UCHAR\nElementDataFile = seq.raw\n",
        )
        .unwrap();
        assert!(matches!(
            read_labels(&path),
            Err(ImageIoError::MetaHeader { .. })
        ));
    }
}
