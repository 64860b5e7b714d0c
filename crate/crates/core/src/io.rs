//! Dataset loaders and the model file format.
//!
//! A model file is laid out as
//!
//! ```text
//! magic "QBREW001" | u32 version
//! u64 len | network description (TOML, annotations stripped)
//! u64 len | quantization annotations (TOML table keyed by layer name)
//! u32 count | count × tensor
//! tensor = u32 name len | name | u8 dtype (0 = f32) | u32 ndim | ndim × u64 extent | u64 payload len | payload
//! ```
//!
//! All integers and payloads are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{LayerParams, NetworkSpec, ParameterSet, QuantizationConfig};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"QBREW001";
pub const MODEL_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;
pub const CIFAR_RECORD: usize = 3073;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Corrupt("IDX header truncated".into()))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels in [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Magic {
            what: "IDX image file".into(),
            expected: IDX_IMAGES as u64,
            found: magic as u64,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let payload = &bytes[16..];
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Corrupt("IDX dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "IDX header declares {count}×{rows}×{cols} pixels but payload has {} bytes",
            payload.len()
        )));
    }
    let pixels = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Magic {
            what: "IDX label file".into(),
            expected: IDX_LABELS as u64,
            found: magic as u64,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Corrupt(format!(
            "IDX header declares {count} labels but payload has {} bytes",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

fn idx_split(images: &Path, labels: &Path, classes: usize) -> Result<Split> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    if labels.len() != count {
        return Err(Error::Corrupt(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    check_labels(&labels, classes)?;
    Split::new(pixels, labels, vec![1, rows, cols])
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= classes) {
        Some(&l) => Err(Error::LabelOutOfRange {
            label: l as usize,
            classes,
        }),
        None => Ok(()),
    }
}

/// Loads the four MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let train = idx_split(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        10,
    )?;
    let test = idx_split(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        10,
    )?;
    Ok(Dataset {
        train,
        test,
        num_classes: 10,
    })
}

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixel bytes.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Split> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Corrupt(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    check_labels(&labels, 10)?;
    Split::new(pixels, labels, vec![3, 32, 32])
}

fn concat_splits(parts: Vec<Split>) -> Result<Split> {
    let shape = parts
        .first()
        .ok_or_else(|| Error::Empty("no CIFAR batches".into()))?
        .sample_shape
        .clone();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        images.extend(p.images);
        labels.extend(p.labels);
    }
    Split::new(images, labels, shape)
}

/// Mean of each channel over a split.
pub fn channel_means(split: &Split) -> Vec<f64> {
    let c = split.sample_shape[0];
    let plane = split.sample_len() / c;
    let mut sums = vec![0.0f64; c];
    for sample in split.images.chunks_exact(split.sample_len()) {
        for (ch, values) in sample.chunks_exact(plane).enumerate() {
            sums[ch] += values.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let n = (split.len() * plane) as f64;
    sums.iter().map(|s| s / n).collect()
}

fn subtract_means(split: &mut Split, means: &[f64]) {
    let plane = split.sample_len() / means.len();
    for sample in split.images.chunks_exact_mut(plane * means.len()) {
        for (values, &m) in sample.chunks_exact_mut(plane).zip(means) {
            values.iter_mut().for_each(|v| *v -= m as f32);
        }
    }
}

fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Loads the CIFAR-10 binary batches. With `subtract_mean`, the training
/// set's per-channel means are subtracted from both splits.
pub fn load_cifar10(dir: &Path, subtract_mean: bool) -> Result<Dataset> {
    let dir = cifar_dir(dir);
    let train = (1..=5)
        .map(|i| parse_cifar_records(&read_file(&dir.join(format!("data_batch_{i}.bin")))?))
        .collect::<Result<Vec<_>>>()?;
    let mut train = concat_splits(train)?;
    let mut test = parse_cifar_records(&read_file(&dir.join("test_batch.bin"))?)?;
    if subtract_mean {
        let means = channel_means(&train);
        subtract_means(&mut train, &means);
        subtract_means(&mut test, &means);
    }
    Ok(Dataset {
        train,
        test,
        num_classes: 10,
    })
}

/// Loads MNIST or CIFAR-10 depending on which files `dir` holds.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if dir.join("train-images-idx3-ubyte").is_file() {
        load_mnist(dir)
    } else if cifar_dir(dir).join("test_batch.bin").is_file() {
        load_cifar10(dir, true)
    } else {
        Err(Error::Config(format!(
            "{} holds neither MNIST IDX files nor CIFAR-10 batches",
            dir.display()
        )))
    }
}

/// A network together with its trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub net: NetworkSpec,
    pub params: ParameterSet,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check(&self.net)?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        put_bytes(&mut out, self.net.without_quantization().to_toml()?.as_bytes());
        let notes: BTreeMap<&str, QuantizationConfig> = self
            .net
            .layers
            .iter()
            .filter_map(|l| Some((l.name.as_str(), l.quant?)))
            .collect();
        put_bytes(&mut out, toml::to_string(&notes)?.as_bytes());

        let tensors: Vec<(String, &Tensor)> = self
            .net
            .layers
            .iter()
            .zip(&self.params.layers)
            .filter_map(|(l, p)| p.as_ref().map(|p| (l, p)))
            .flat_map(|(l, p)| {
                [
                    (format!("{}.weights", l.name), &p.weights),
                    (format!("{}.bias", l.name), &p.bias),
                ]
            })
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.len() as u64 * 4).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MODEL_MAGIC {
            return Err(Error::Magic {
                what: "model file".into(),
                expected: u64::from_be_bytes(*MODEL_MAGIC),
                found: u64::from_be_bytes(magic.try_into().unwrap()),
            });
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Version(version));
        }
        let mut net = NetworkSpec::from_toml(r.text()?)?;
        let notes: BTreeMap<String, QuantizationConfig> = toml::from_str(r.text()?)?;
        for (name, q) in notes {
            let i = net
                .layer_index(&name)
                .ok_or_else(|| Error::Corrupt(format!("annotation for unknown layer '{name}'")))?;
            net.layers[i].quant = Some(q);
        }
        net.validate()?;

        let count = r.u32()? as usize;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Corrupt(format!("tensor '{name}' has unknown dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Corrupt(format!("tensor '{name}' has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let payload_len = r.u64()?;
            let elements = shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .filter(|&n| n.checked_mul(4) == Some(payload_len))
                .ok_or_else(|| {
                    Error::Corrupt(format!(
                        "tensor '{name}' payload of {payload_len} bytes does not match shape {shape:?}"
                    ))
                })?;
            let payload = r.take(payload_len as usize)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            debug_assert_eq!(data.len() as u64, elements);
            if blobs.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Corrupt(format!("duplicate tensor '{name}'")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }

        let mut params = ParameterSet {
            layers: vec![None; net.layers.len()],
        };
        for (i, layer) in net.layers.iter().enumerate() {
            let w = blobs.remove(&format!("{}.weights", layer.name));
            let b = blobs.remove(&format!("{}.bias", layer.name));
            params.layers[i] = match (w, b) {
                (Some(weights), Some(bias)) => Some(LayerParams { weights, bias }),
                (None, None) => None,
                _ => {
                    return Err(Error::Corrupt(format!(
                        "layer '{}' has only one of weights and bias",
                        layer.name
                    )))
                }
            };
        }
        if let Some(name) = blobs.keys().next() {
            return Err(Error::Corrupt(format!("tensor '{name}' matches no layer")));
        }
        params.check(&net)?;
        Ok(ModelFile { net, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the request against the remaining length before slicing.
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(Error::Corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<&'a str> {
        let len = usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("section too long".into()))?;
        std::str::from_utf8(self.take(len)?).map_err(|_| Error::Corrupt("text section is not UTF-8".into()))
    }
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::from_bytes(&read_file(path)?)
}

pub fn load_network(path: &Path) -> Result<NetworkSpec> {
    NetworkSpec::from_toml(&String::from_utf8_lossy(&read_file(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerKind;
    use crate::numerics::{DynamicFixedPointFormat, MinifloatFormat, NumberFormat, RoundingMode};

    fn idx_images(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_images_parse_and_scale() {
        let (n, r, c, px) = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!((n, r, c), (2, 1, 2));
        assert_eq!(px, vec![0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn idx_count_mismatch_is_rejected() {
        let err = parse_idx_images(&idx_images(3, 1, 2, &[0; 4])).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
        // a huge declared count must not be allocated
        let err = parse_idx_images(&idx_images(u32::MAX, u32::MAX, u32::MAX, &[0; 4])).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
        assert!(parse_idx_images(&[0, 0, 8]).is_err());
    }

    #[test]
    fn idx_label_magic() {
        let mut b = IDX_LABELS.to_be_bytes().to_vec();
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[1, 2, 9]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![1, 2, 9]);
        b[3] = 0x03;
        assert!(matches!(parse_idx_labels(&b), Err(Error::Magic { found: 2051, .. })));
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8 * 100));
        let s = parse_cifar_records(&rec).unwrap();
        assert_eq!(s.labels, vec![7]);
        assert_eq!(s.sample_shape, vec![3, 32, 32]);
        let means = channel_means(&s);
        for (m, want) in means.iter().zip([0.0, 100.0 / 255.0, 200.0 / 255.0]) {
            assert!((m - want).abs() < 1e-6);
        }
        assert!(matches!(parse_cifar_records(&rec[..3072]), Err(Error::Corrupt(_))));
        rec[0] = 10;
        assert!(matches!(
            parse_cifar_records(&rec),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn mean_subtraction_centres_channels() {
        let mut rec = Vec::new();
        for k in 0..3u8 {
            rec.push(k);
            rec.extend((0..3072).map(|i| ((i * 7 + k as usize * 13) % 256) as u8));
        }
        let mut s = parse_cifar_records(&rec).unwrap();
        let m = channel_means(&s);
        subtract_means(&mut s, &m);
        for v in channel_means(&s) {
            assert!(v.abs() < 1e-6);
        }
    }

    pub(crate) fn sample_model(seed: u64) -> ModelFile {
        let mut net = NetworkSpec::lenet();
        let dfp: NumberFormat = DynamicFixedPointFormat::new(8, 5).unwrap().into();
        let mf: NumberFormat = MinifloatFormat::new(4, 3).unwrap().into();
        for (k, l) in net.layers.iter_mut().filter(|l| l.kind.is_quantizable()).enumerate() {
            let mut q = QuantizationConfig::uniform(if k % 2 == 0 { dfp } else { mf });
            q.input_format = None;
            q.rounding = RoundingMode::Stochastic { seed: u64::MAX - k as u64 };
            l.quant = Some(q);
        }
        let params = ParameterSet::init(&net, seed).unwrap();
        ModelFile { net, params }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = sample_model(3);
        let bytes = m.to_bytes().unwrap();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qbm");
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn model_errors() {
        let bytes = sample_model(1).to_bytes().unwrap();
        for cut in [0, 7, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = ModelFile::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_) | Error::Parse(_)), "cut {cut}: {err}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(ModelFile::from_bytes(&v2), Err(Error::Version(2))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bad), Err(Error::Magic { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(ModelFile::from_bytes(&long), Err(Error::Corrupt(_))));
    }

    #[test]
    fn payload_length_must_match_shape() {
        let m = ModelFile {
            net: NetworkSpec {
                input_shape: vec![2],
                layers: vec![crate::network::LayerSpec::new(
                    "ip",
                    LayerKind::FullyConnected { out_features: 1 },
                )],
            },
            params: ParameterSet {
                layers: vec![Some(LayerParams {
                    weights: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
                    bias: Tensor::new(vec![1], vec![0.5]).unwrap(),
                })],
            },
        };
        let mut bytes = m.to_bytes().unwrap();
        // the last tensor is the bias: its payload length field sits 12 bytes from the end
        let at = bytes.len() - 12;
        bytes[at..at + 8].copy_from_slice(&8u64.to_le_bytes());
        let err = ModelFile::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Corrupt(ref s) if s.contains("payload")), "{err}");
    }
}
