//! Readers and writers for pixmaps, label maps, manifests, profiles and the
//! checkpoint container.
//!
//! Checkpoint layout:
//!
//! ```text
//! offset 0   8 bytes   magic "GNETSEG1"
//! offset 8   4 bytes   header length N, u32 little-endian
//! offset 12  N bytes   UTF-8 JSON header (see CheckpointHeader)
//! offset 12+N          per conv in graph order: weights then biases,
//!                      f32 little-endian
//! ```
//!
//! Every loader validates its input fully and returns an error on malformed
//! bytes; none of them panic.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::LabelMap;
use crate::error::{Error, Result};
use crate::model::{Head, InputFormat, MajorLayer, ModelGraph, SubLayer, Variant};
use crate::tensor::{ConvParams, Tensor, TAPS};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNETSEG1";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 1 << 20;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- pixmaps

/// A decoded binary pixmap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

/// Decodes a P5 (gray) or P6 (RGB) pixmap with maxval 255.
pub fn decode_pixmap(bytes: &[u8]) -> Result<Pixmap> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(0, "expected P5 or P6 magic")),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::format(2, "expected whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(3, format!("empty image {width}x{height}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(cur.pos, "expected one whitespace byte before pixel data")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(3, "image dimensions overflow"))?;
    let actual = bytes.len() - cur.pos;
    if actual < expected {
        return Err(Error::format(
            bytes.len(),
            format!("truncated pixel data: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(Error::format(
            cur.pos + expected,
            format!("{} trailing bytes after {expected} bytes of pixel data", actual - expected),
        ));
    }
    Ok(Pixmap {
        channels,
        width,
        height,
        pixels: bytes[cur.pos..].to_vec(),
    })
}

pub fn encode_pixmap(p: &Pixmap) -> Vec<u8> {
    let magic = if p.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", p.width, p.height).into_bytes();
    out.extend_from_slice(&p.pixels);
    out
}

/// Pixmap bytes to a CHW tensor holding the raw `[0, 255]` values.
pub fn pixmap_to_tensor(p: &Pixmap) -> Tensor {
    let (c, h, w) = (p.channels, p.height, p.width);
    Tensor::from_fn(c, h, w, |ch, y, x| p.pixels[(y * w + x) * c + ch] as f32)
}

/// Tensor to pixmap; values must already be integers in `[0, 255]`.
pub fn tensor_to_pixmap(t: &Tensor) -> Result<Pixmap> {
    let (c, h, w) = t.shape();
    if c != 1 && c != 3 {
        return Err(Error::Unsupported(format!("pixmaps hold 1 or 3 channels, got {c}")));
    }
    let mut pixels = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.get(ch, y, x);
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Usage(format!(
                        "pixel ({ch}, {y}, {x}) = {v} is not an integer in [0, 255]"
                    )));
                }
                pixels[(y * w + x) * c + ch] = v as u8;
            }
        }
    }
    Ok(Pixmap {
        channels: c,
        width: w,
        height: h,
        pixels,
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    decode_pixmap(bytes).map(|p| pixmap_to_tensor(&p))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_image(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_image(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pixmap(&tensor_to_pixmap(tensor)?))
}

pub fn decode_label_map(bytes: &[u8]) -> Result<LabelMap> {
    let p = decode_pixmap(bytes)?;
    if p.channels != 1 {
        return Err(Error::format(0, "label maps must be P5"));
    }
    LabelMap::new(p.height, p.width, p.pixels)
}

pub fn encode_label_map(map: &LabelMap) -> Vec<u8> {
    encode_pixmap(&Pixmap {
        channels: 1,
        width: map.width(),
        height: map.height(),
        pixels: map.labels().to_vec(),
    })
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_label_map(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_label_map(map))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

// ------------------------------------------------------------- checkpoint

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvHeader {
    pub in_channels: usize,
    pub out_channels: usize,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub variant: Variant,
    pub input_size: usize,
    pub input_format: InputFormat,
    pub head: Head,
    /// Convs of each major layer, in graph order.
    pub majors: Vec<Vec<ConvHeader>>,
}

impl CheckpointHeader {
    pub fn of(model: &ModelGraph) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            variant: model.variant(),
            input_size: model.input_size(),
            input_format: model.input_format(),
            head: model.head(),
            majors: model
                .majors()
                .iter()
                .map(|m| {
                    m.sublayers
                        .iter()
                        .map(|s| ConvHeader {
                            in_channels: s.conv.in_channels(),
                            out_channels: s.conv.out_channels(),
                            relu: s.relu,
                        })
                        .collect()
                })
                .collect(),
        }
    }

    fn payload_floats(&self) -> Option<usize> {
        self.majors.iter().flatten().try_fold(0usize, |acc, c| {
            let w = c.in_channels.checked_mul(c.out_channels)?.checked_mul(TAPS)?;
            acc.checked_add(w)?.checked_add(c.out_channels)
        })
    }
}

pub fn encode_checkpoint(model: &ModelGraph) -> Vec<u8> {
    let header = serde_json::to_vec(&CheckpointHeader::of(model)).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.weights().iter().chain(p.bias()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelGraph> {
    match bytes.get(..8) {
        Some(m) if m == CHECKPOINT_MAGIC => {}
        Some(m) => {
            let at = m.iter().zip(CHECKPOINT_MAGIC).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::format(at, "checkpoint magic mismatch"));
        }
        None => {
            return Err(Error::format(
                bytes.len(),
                format!("truncated magic: expected 8 bytes, found {}", bytes.len()),
            ))
        }
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format(bytes.len(), "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::format(8, format!("header length {header_len} is implausible")));
    }
    let header_end = 12 + header_len;
    let header_bytes = bytes.get(12..header_end).ok_or_else(|| {
        Error::format(
            bytes.len(),
            format!(
                "truncated header: expected {header_len} bytes, found {}",
                bytes.len() - 12
            ),
        )
    })?;
    let value: serde_json::Value = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(12, format!("header is not valid JSON: {e}")))?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        Some(v) => {
            return Err(Error::Version(format!(
                "checkpoint version {v}, this build reads version {CHECKPOINT_VERSION}"
            )))
        }
        None => return Err(Error::format(12, "header has no version")),
    }
    let header: CheckpointHeader = serde_json::from_value(value)
        .map_err(|e| Error::format(12, format!("bad header: {e}")))?;

    let floats = header
        .payload_floats()
        .ok_or_else(|| Error::format(12, "layer sizes overflow"))?;
    let expected = floats
        .checked_mul(4)
        .ok_or_else(|| Error::format(12, "layer sizes overflow"))?;
    let actual = bytes.len() - header_end;
    if actual != expected {
        return Err(Error::format(
            bytes.len().min(header_end + expected),
            format!("weight payload: expected {expected} bytes, found {actual}"),
        ));
    }
    let mut values = bytes[header_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };

    let pattern = header.variant.pattern();
    if header.majors.len() != pattern.len() {
        return Err(Error::format(
            12,
            format!("{} needs {} major layers, header lists {}", header.variant, pattern.len(), header.majors.len()),
        ));
    }
    let mut majors = Vec::with_capacity(header.majors.len());
    for (convs, &resample) in header.majors.iter().zip(pattern) {
        let mut sublayers = Vec::with_capacity(convs.len());
        for c in convs {
            let w = take(c.in_channels * c.out_channels * TAPS);
            let b = take(c.out_channels);
            let conv = ConvParams::new(c.in_channels, c.out_channels, w, b)
                .map_err(|e| Error::format(header_end, e.to_string()))?;
            sublayers.push(SubLayer { conv, relu: c.relu });
        }
        majors.push(MajorLayer {
            sublayers,
            resample,
        });
    }
    ModelGraph::from_parts(
        header.variant,
        header.input_size,
        header.input_format,
        header.head,
        majors,
    )
    .map_err(|e| Error::format(12, e.to_string()))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    decode_checkpoint(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_checkpoint(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_checkpoint(model))
}

// --------------------------------------------------------------- profiles

/// Reads any TOML-described profile (chip, fitted link profiles).
pub fn read_profile<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_profile(&text).map_err(|e| with_path(e, path))
}

pub fn parse_profile<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let offset = e.span().map(|s| s.start).unwrap_or(0);
        Error::format(offset, e.message().to_string())
    })
}

pub fn profile_to_string<T: Serialize>(profile: &T) -> Result<String> {
    toml::to_string(profile).map_err(|e| Error::Usage(format!("profile cannot be written as TOML: {e}")))
}

pub fn write_profile<T: Serialize>(profile: &T, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), profile_to_string(profile)?.as_bytes())
}

// --------------------------------------------------------------- manifest

/// Image/label pairs listed one per line as `image label`, paths relative
/// to the manifest's directory. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let base_dir = base_dir.into();
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.split('#').next().unwrap_or("").trim();
            if !body.is_empty() {
                let fields: Vec<&str> = body.split_whitespace().collect();
                let [image, label] = fields[..] else {
                    return Err(Error::format(
                        offset,
                        format!("manifest line needs `image label`, got {} fields", fields.len()),
                    ));
                };
                entries.push((base_dir.join(image), base_dir.join(label)));
            }
            offset += line.len();
        }
        Ok(Self { base_dir, entries })
    }

    pub fn to_text(&self) -> String {
        let rel = |p: &Path| p.strip_prefix(&self.base_dir).unwrap_or(p).display().to_string();
        self.entries
            .iter()
            .map(|(i, l)| format!("{} {}\n", rel(i), rel(l)))
            .collect()
    }

    /// Loads every pair, checking that files exist and dimensions agree.
    pub fn load(&self) -> Result<Vec<(Tensor, LabelMap)>> {
        self.entries
            .iter()
            .map(|(image_path, label_path)| {
                let image = read_image(image_path)?;
                let label = read_label_map(label_path)?;
                if (image.height(), image.width()) != (label.height(), label.width()) {
                    return Err(Error::Consistency {
                        message: format!(
                            "image is {}x{} but its label map is {}x{}",
                            image.height(),
                            image.width(),
                            label.height(),
                            label.width()
                        ),
                        path: Some(label_path.clone()),
                    });
                }
                Ok((image, label))
            })
            .collect()
    }
}

/// Reads a manifest and checks every referenced file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::parse(&text, base).map_err(|e| with_path(e, path))?;
    for p in manifest.entries.iter().flat_map(|(i, l)| [i, l]) {
        if !p.is_file() {
            return Err(Error::Consistency {
                message: format!("manifest {} references a missing file", path.display()),
                path: Some(p.clone()),
            });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, ModelConfig};

    #[test]
    fn p5_bytes_map_directly() {
        let t = decode_image(b"P5\n2 2\n255\n\x00\x80\xff\x07").unwrap();
        assert_eq!(t.shape(), (1, 2, 2));
        assert_eq!(t.data(), &[0.0, 128.0, 255.0, 7.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let t = decode_image(b"P6 # rgb\n1 # w\n1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn truncation_names_byte_counts() {
        let err = decode_image(b"P5\n2 2\n255\n\x00\x01").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 4 bytes, found 2"), "{msg}");
        assert!(matches!(err, Error::Format { offset: 13, .. }));
    }

    #[test]
    fn maxval_must_be_255() {
        let err = decode_image(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 7, .. }), "{err}");
    }

    #[test]
    fn pixmap_round_trip_is_bit_identical() {
        let t = Tensor::from_fn(3, 5, 7, |c, y, x| ((c * 91 + y * 13 + x * 7) % 256) as f32);
        let bytes = encode_pixmap(&tensor_to_pixmap(&t).unwrap());
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_pixmap(&tensor_to_pixmap(&back).unwrap()), bytes);
    }

    #[test]
    fn non_integer_pixels_are_rejected() {
        let t = Tensor::filled(1, 1, 1, 0.5);
        assert!(tensor_to_pixmap(&t).is_err());
    }

    fn model() -> ModelGraph {
        build(
            &ModelConfig::new(Variant::MediumReformat, 32, InputFormat::Yuv, Head::IntegerEncoding { num_classes: 3 }),
            11,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn flipped_magic_is_rejected() {
        let mut bytes = encode_checkpoint(&model());
        bytes[3] ^= 0x20;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic mismatch"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_checkpoint(&model());
        let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("weight payload"), "{err}");
    }

    #[test]
    fn future_version_is_a_version_error() {
        let m = model();
        let mut header = CheckpointHeader::of(&m);
        header.version = 2;
        let h = serde_json::to_vec(&header).unwrap();
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&(h.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&h);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Version(_))));
    }

    #[test]
    fn manifest_parsing() {
        let m = Manifest::parse("# pairs\na.ppm a.pgm\n\nb.ppm  b.pgm # second\n", "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].0, PathBuf::from("/data/b.ppm"));
        assert_eq!(m.to_text(), "a.ppm a.pgm\nb.ppm b.pgm\n");
        let err = Manifest::parse("ok.ppm ok.pgm\nlonely.ppm\n", "/d").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 14, .. }));
    }
}
