//! Binary checkpoint format: a UTF-8 text header terminated by `end\n`, then
//! little-endian f32 tensors in header order.
//!
//! ```text
//! PNEUMOSCAN-CKPT 1
//! kind classifier
//! width in_channels=1 base_channels=8 dense_layers=4 growth=32
//! input_side 64
//! epoch 20
//! seed 42
//! config lr = 0.0001
//! block enc1 trainable=1
//! tensor enc1.conv0.weight shape=8x1x3x3 dtype=f32 offset=0 trainable=1
//! norm dense_block.layer0.norm1 initialized=1
//! tensor dense_block.layer0.norm1.running_mean shape=64 dtype=f32 offset=... trainable=0
//! body_bytes 123456
//! crc32 1a2b3c4d
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::write_atomic;
use crate::nn::{Block, ClassifierModel, Model, ModelKind, SegmentationModel, WidthConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "PNEUMOSCAN-CKPT";
pub const VERSION: u32 = 1;

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub input_side: usize,
    pub epoch: usize,
    pub seed: u64,
    /// Effective configuration as `key = value` pairs.
    pub config: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Segmentation(SegmentationModel<f32>),
    Classifier(ClassifierModel<f32>),
}

impl LoadedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            LoadedModel::Segmentation(_) => ModelKind::Segmentation,
            LoadedModel::Classifier(_) => ModelKind::Classifier,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(bad(format!("{what} `{s}` is empty or contains whitespace or `=`")));
    }
    Ok(())
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn encode_checkpoint<M: Model<f32>>(model: &M, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut body: Vec<u8> = Vec::new();
    let mut head = String::new();
    let w = model.width();
    let _ = writeln!(head, "{MAGIC} {VERSION}");
    let _ = writeln!(head, "kind {}", model.kind().as_str());
    let _ = writeln!(
        head,
        "width in_channels={} base_channels={} dense_layers={} growth={}",
        w.in_channels, w.base_channels, w.dense_layers, w.growth
    );
    let _ = writeln!(head, "input_side {}", meta.input_side);
    let _ = writeln!(head, "epoch {}", meta.epoch);
    let _ = writeln!(head, "seed {}", meta.seed);
    for (k, v) in &meta.config {
        check_token(k, "config key")?;
        if v.contains('\n') {
            return Err(bad(format!("config value for `{k}` contains a newline")));
        }
        let _ = writeln!(head, "config {k} = {v}");
    }
    let mut push = |head: &mut String, name: &str, shape: &[usize], data: &[f32], trainable: bool| -> Result<()> {
        check_token(name, "tensor name")?;
        let _ = writeln!(
            head,
            "tensor {name} shape={} dtype=f32 offset={} trainable={}",
            shape_str(shape),
            body.len(),
            trainable as u8
        );
        for v in data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    };
    for b in model.blocks() {
        check_token(&b.name, "block name")?;
        let _ = writeln!(head, "block {} trainable={}", b.name, b.trainable as u8);
        for p in &b.params {
            push(&mut head, &p.name, p.value.shape(), p.value.data(), b.trainable)?;
        }
        for n in &b.norms {
            check_token(&n.name, "norm name")?;
            let _ = writeln!(head, "norm {} initialized={}", n.name, n.stats.initialized as u8);
            let c = [n.stats.channels()];
            push(&mut head, &format!("{}.running_mean", n.name), &c, &n.stats.mean, false)?;
            push(&mut head, &format!("{}.running_var", n.name), &c, &n.stats.var, false)?;
        }
    }
    let _ = writeln!(head, "body_bytes {}", body.len());
    let _ = writeln!(head, "crc32 {:08x}", crc32fast::hash(&body));
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save_checkpoint<M: Model<f32>>(model: &M, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, meta)?)
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

enum Entry {
    Block { name: String, trainable: bool },
    Norm { name: String, initialized: bool },
    Tensor(TensorEntry),
}

fn kv<'a>(field: &'a str, key: &str) -> Result<&'a str> {
    field
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| bad(format!("expected `{key}=...`, found `{field}`")))
}

fn num<N: std::str::FromStr>(s: &str, what: &str) -> Result<N> {
    s.parse().map_err(|_| bad(format!("invalid {what} `{s}`")))
}

fn flag(s: &str, what: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(bad(format!("invalid {what} flag `{s}`"))),
    }
}

/// Parses and verifies a checkpoint, rebuilding the model it describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(LoadedModel, CheckpointMeta)> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("header terminator not found"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[end + 5..];
    let mut lines = header.lines();

    let first = lines.next().unwrap_or_default();
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("not a checkpoint file (bad magic)"))?;
    if version != VERSION.to_string() {
        return Err(bad(format!("unsupported version {version} (supported: {VERSION})")));
    }

    let mut kind = None;
    let mut width = None;
    let mut meta = CheckpointMeta::default();
    let mut entries = Vec::new();
    let mut body_bytes = None;
    let mut crc = None;
    for line in lines {
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        let fields: Vec<&str> = rest.split(' ').collect();
        match tag {
            "kind" => kind = Some(ModelKind::parse(rest).ok_or_else(|| bad(format!("unknown kind `{rest}`")))?),
            "width" => {
                if fields.len() != 4 {
                    return Err(bad(format!("malformed width line `{line}`")));
                }
                width = Some(WidthConfig {
                    in_channels: num(kv(fields[0], "in_channels")?, "in_channels")?,
                    base_channels: num(kv(fields[1], "base_channels")?, "base_channels")?,
                    dense_layers: num(kv(fields[2], "dense_layers")?, "dense_layers")?,
                    growth: num(kv(fields[3], "growth")?, "growth")?,
                });
            }
            "input_side" => meta.input_side = num(rest, "input_side")?,
            "epoch" => meta.epoch = num(rest, "epoch")?,
            "seed" => meta.seed = num(rest, "seed")?,
            "config" => {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| bad(format!("malformed config line `{line}`")))?;
                meta.config.push((k.to_string(), v.to_string()));
            }
            "block" if fields.len() == 2 => entries.push(Entry::Block {
                name: fields[0].to_string(),
                trainable: flag(kv(fields[1], "trainable")?, "trainable")?,
            }),
            "norm" if fields.len() == 2 => entries.push(Entry::Norm {
                name: fields[0].to_string(),
                initialized: flag(kv(fields[1], "initialized")?, "initialized")?,
            }),
            "tensor" if fields.len() == 5 => {
                if kv(fields[2], "dtype")? != "f32" {
                    return Err(bad(format!("unsupported dtype in `{line}`")));
                }
                let shape = kv(fields[1], "shape")?
                    .split('x')
                    .map(|d| num(d, "dimension"))
                    .collect::<Result<Vec<usize>>>()?;
                entries.push(Entry::Tensor(TensorEntry {
                    name: fields[0].to_string(),
                    shape,
                    offset: num(kv(fields[3], "offset")?, "offset")?,
                    trainable: flag(kv(fields[4], "trainable")?, "trainable")?,
                }));
            }
            "body_bytes" => body_bytes = Some(num::<usize>(rest, "body_bytes")?),
            "crc32" => crc = Some(u32::from_str_radix(rest, 16).map_err(|_| bad(format!("invalid crc32 `{rest}`")))?),
            _ => return Err(bad(format!("unrecognized header line `{line}`"))),
        }
    }
    let kind = kind.ok_or_else(|| bad("missing kind"))?;
    let width = width.ok_or_else(|| bad("missing width"))?;
    let body_bytes = body_bytes.ok_or_else(|| bad("missing body_bytes"))?;
    let crc = crc.ok_or_else(|| bad("missing crc32"))?;
    if body.len() != body_bytes {
        return Err(bad(format!("body is {} bytes, header says {body_bytes}", body.len())));
    }
    let actual = crc32fast::hash(body);
    if actual != crc {
        return Err(bad(format!("checksum mismatch: header {crc:08x}, body {actual:08x}")));
    }
    width.validate()?;

    let mut next_offset = 0usize;
    let mut read = |t: &TensorEntry| -> Result<Vec<f32>> {
        if t.offset != next_offset {
            return Err(bad(format!("tensor {} at offset {}, expected {next_offset}", t.name, t.offset)));
        }
        let n: usize = t.shape.iter().product();
        let bytes = body
            .get(t.offset..t.offset + 4 * n)
            .ok_or_else(|| bad(format!("tensor {} runs past the body", t.name)))?;
        next_offset += 4 * n;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };

    let mut model = match kind {
        ModelKind::Segmentation => LoadedModel::Segmentation(SegmentationModel::new(&width, 0)?),
        ModelKind::Classifier => LoadedModel::Classifier(ClassifierModel::new(&width, 0)?),
    };
    let blocks: &mut [Block<f32>] = match &mut model {
        LoadedModel::Segmentation(m) => m.blocks_mut(),
        LoadedModel::Classifier(m) => m.blocks_mut(),
    };
    let mut it = entries.iter();
    let mismatch = |what: &str, expected: &str| bad(format!("expected {what} `{expected}` for a {} model", kind.as_str()));
    let mut next_tensor = |it: &mut std::slice::Iter<Entry>, name: &str, shape: &[usize]| -> Result<(Vec<f32>, bool)> {
        match it.next() {
            Some(Entry::Tensor(t)) if t.name == name => {
                if t.shape != shape {
                    return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
                }
                Ok((read(t)?, t.trainable))
            }
            _ => Err(bad(format!("expected tensor `{name}`"))),
        }
    };
    for b in blocks.iter_mut() {
        match it.next() {
            Some(Entry::Block { name, trainable }) if *name == b.name => b.trainable = *trainable,
            _ => return Err(mismatch("block", &b.name)),
        }
        for p in &mut b.params {
            let shape = p.value.shape().to_vec();
            let (data, trainable) = next_tensor(&mut it, &p.name, &shape)?;
            if trainable != b.trainable {
                return Err(bad(format!("tensor {} trainable flag disagrees with its block", p.name)));
            }
            p.value = Tensor::new(shape, data)?;
        }
        for n in &mut b.norms {
            match it.next() {
                Some(Entry::Norm { name, initialized }) if *name == n.name => n.stats.initialized = *initialized,
                _ => return Err(mismatch("norm", &n.name)),
            }
            let c = [n.stats.channels()];
            n.stats.mean = next_tensor(&mut it, &format!("{}.running_mean", n.name), &c)?.0;
            n.stats.var = next_tensor(&mut it, &format!("{}.running_var", n.name), &c)?.0;
        }
    }
    if it.next().is_some() {
        return Err(bad("header lists more entries than the model has"));
    }
    if next_offset != body.len() {
        return Err(bad(format!("{} trailing body bytes", body.len() - next_offset)));
    }
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(LoadedModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}

pub fn load_segmentation(path: &Path) -> Result<(SegmentationModel<f32>, CheckpointMeta)> {
    match load_checkpoint(path)? {
        (LoadedModel::Segmentation(m), meta) => Ok((m, meta)),
        (other, _) => Err(bad(format!(
            "{} holds a {} model, expected segmentation",
            path.display(),
            other.kind().as_str()
        ))),
    }
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierModel<f32>, CheckpointMeta)> {
    match load_checkpoint(path)? {
        (LoadedModel::Classifier(m), meta) => Ok((m, meta)),
        (other, _) => Err(bad(format!(
            "{} holds a {} model, expected classifier",
            path.display(),
            other.kind().as_str()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::transfer_encoder_weights;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            input_side: 32,
            epoch: 3,
            seed: 9,
            config: vec![("learning_rate".into(), "0.0001".into()), ("loss".into(), "dice_plus_bce".into())],
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let mut seg = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 5).unwrap();
        seg.set_trainable(&["enc2"], false).unwrap();
        let a = encode_checkpoint(&seg, &meta()).unwrap();
        let (loaded, m) = decode_checkpoint(&a).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded, LoadedModel::Segmentation(seg));
        let LoadedModel::Segmentation(s) = loaded else { unreachable!() };
        assert_eq!(encode_checkpoint(&s, &m).unwrap(), a);

        let mut cls = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 6).unwrap();
        cls.mark_stats_initialized();
        cls.blocks_mut()[4].norms[0].stats.mean[1] = -0.25;
        let b = encode_checkpoint(&cls, &meta()).unwrap();
        let (loaded, _) = decode_checkpoint(&b).unwrap();
        assert_eq!(loaded, LoadedModel::Classifier(cls));
    }

    #[test]
    fn header_is_text_and_offsets_are_contiguous() {
        let seg = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 1).unwrap();
        let bytes = encode_checkpoint(&seg, &meta()).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("PNEUMOSCAN-CKPT 1\nkind segmentation\n"));
        let mut expect = 0usize;
        for line in text.lines().take_while(|l| *l != "end") {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                let n: usize = f[1][6..].split('x').map(|d| d.parse::<usize>().unwrap()).product();
                assert_eq!(f[3], format!("offset={expect}"));
                expect += 4 * n;
            }
        }
        assert!(text.contains(&format!("body_bytes {expect}\n")));
    }

    #[test]
    fn corruption_is_detected() {
        let seg = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 1).unwrap();
        let bytes = encode_checkpoint(&seg, &meta()).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x10;
        let err = decode_checkpoint(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        let v2 = String::from_utf8_lossy(&bytes).replacen("PNEUMOSCAN-CKPT 1", "PNEUMOSCAN-CKPT 2", 1);
        let err = decode_checkpoint(v2.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(decode_checkpoint(b"hello").is_err());
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cls.ckpt");
        let cls = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 1).unwrap();
        save_checkpoint(&cls, &meta(), &p).unwrap();
        assert!(load_segmentation(&p).unwrap_err().to_string().contains("classifier"));
        load_classifier(&p).unwrap();
    }

    #[test]
    fn transfer_from_loaded_checkpoint_matches_source() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.ckpt");
        let seg = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 3).unwrap();
        save_checkpoint(&seg, &meta(), &p).unwrap();
        let (loaded, _) = load_segmentation(&p).unwrap();
        let mut cls = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 4).unwrap();
        transfer_encoder_weights(&loaded, &mut cls).unwrap();
        for i in 0..4 {
            assert_eq!(cls.blocks()[i].fingerprint(), seg.blocks()[i].fingerprint());
        }
    }
}
