//! Versioned binary file formats.
//!
//! Checkpoints (`.svgc`): magic `SVGL`, little-endian u32 format version,
//! a self-describing JSON header (kind, shapes, config echo, stats, array
//! manifest), then f32 arrays in manifest order. Datasets (`.svgd`) follow
//! the same envelope with magic `SVGD` and an f64 payload so round trips are
//! bit-exact.
//!
//! All writes go through a temp file and a rename. Headers carry an FNV-1a
//! checksum of the payload bytes; stage pairing (codec trained against
//! semantic encoder X, flow trained against codec Y) is enforced with these.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{BaselineCodec, ChannelStats, SemanticEncoder, SemanticMeta, SvgCodec};
use crate::datagen::{LabeledPoints, ShapeGenConfig, ShapeImageDataset};
use crate::error::{Error, Result};
use crate::flow::{AttentionBlock, VelocityNet, VelocityNetConfig};
use crate::interpolant::{Interpolant, Weighting};
use crate::nn::{Activation, Mlp};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVGL";
pub const DATASET_MAGIC: [u8; 4] = *b"SVGD";
pub const FORMAT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Write via temp file + rename so a crash never leaves a torn file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_file_name(format!(
        "{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    payload_checksum: u64,
}

fn encode_file(
    magic: [u8; 4],
    kind: &str,
    meta: serde_json::Value,
    arrays: &[(String, Vec<u8>, Vec<usize>)],
) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut manifest = Vec::with_capacity(arrays.len());
    for (name, bytes, shape) in arrays {
        manifest.push(ArrayEntry { name: name.clone(), shape: shape.clone(), byte_len: bytes.len() });
        payload.extend_from_slice(bytes);
    }
    let envelope = Envelope {
        kind: kind.to_string(),
        meta,
        arrays: manifest,
        payload_checksum: fnv1a(&payload),
    };
    let header = serde_json::to_vec(&envelope)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct DecodedFile {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<(ArrayEntry, Vec<u8>)>,
    payload_checksum: u64,
}

fn decode_file(expected_magic: [u8; 4], bytes: &[u8]) -> Result<DecodedFile> {
    if bytes.len() < 12 {
        return Err(Error::Format("file truncated before header".into()));
    }
    if bytes[..4] != expected_magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            expected_magic
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version > FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {version} is newer than supported {FORMAT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Format("file truncated inside header".into()));
    }
    let envelope: Envelope = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;

    let mut offset = 12 + header_len;
    let mut arrays = Vec::with_capacity(envelope.arrays.len());
    for entry in &envelope.arrays {
        if bytes.len() < offset + entry.byte_len {
            return Err(Error::Format(format!("file truncated inside array '{}'", entry.name)));
        }
        arrays.push((entry.clone(), bytes[offset..offset + entry.byte_len].to_vec()));
        offset += entry.byte_len;
    }
    let payload = &bytes[12 + header_len..offset];
    if fnv1a(payload) != envelope.payload_checksum {
        return Err(Error::Format("payload checksum mismatch".into()));
    }
    Ok(DecodedFile {
        kind: envelope.kind,
        meta: envelope.meta,
        arrays,
        payload_checksum: envelope.payload_checksum,
    })
}

fn tensor_to_f32_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn tensor_from_f32_bytes(entry: &ArrayEntry, bytes: &[u8]) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "array '{}' has {} bytes, expected {}",
            entry.name,
            bytes.len(),
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn tensor_to_f64_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_from_f64_bytes(entry: &ArrayEntry, bytes: &[u8]) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Format(format!(
            "array '{}' has {} bytes, expected {}",
            entry.name,
            bytes.len(),
            n * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn mlp_arrays(prefix: &str, net: &Mlp) -> Vec<(String, Vec<u8>, Vec<usize>)> {
    net.params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let name = if i % 2 == 0 {
                format!("{prefix}.w{}", i / 2)
            } else {
                format!("{prefix}.b{}", i / 2)
            };
            (name, tensor_to_f32_bytes(p), p.shape().to_vec())
        })
        .collect()
}

fn take_mlp(
    arrays: &mut std::collections::VecDeque<(ArrayEntry, Vec<u8>)>,
    dims: &[usize],
    activation: Activation,
) -> Result<Mlp> {
    let count = 2 * (dims.len() - 1);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (entry, bytes) = arrays
            .pop_front()
            .ok_or_else(|| Error::Format("missing network arrays".into()))?;
        params.push(tensor_from_f32_bytes(&entry, &bytes)?);
    }
    Mlp::from_params(dims, activation, params)
}

/// Checksum of a parameter list as it would appear in a checkpoint payload
/// (f32 little-endian); stable across save/load cycles.
pub fn payload_checksum_of(params: &[&Tensor]) -> u64 {
    let mut bytes = Vec::new();
    for p in params {
        bytes.extend_from_slice(&tensor_to_f32_bytes(p));
    }
    fnv1a(&bytes)
}

// ---------------------------------------------------------------------------
// Semantic encoder checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SemanticHeader {
    dims: Vec<usize>,
    activation: Activation,
    frozen: bool,
    image_shape: (usize, usize, usize),
    pool: usize,
    meta: SemanticMeta,
}

pub fn save_semantic(path: &Path, enc: &SemanticEncoder) -> Result<()> {
    let header = SemanticHeader {
        dims: enc.backbone().dims().to_vec(),
        activation: enc.backbone().activation(),
        frozen: enc.is_frozen(),
        image_shape: enc.image_shape(),
        pool: enc.pool(),
        meta: enc.meta.clone(),
    };
    let meta = serde_json::to_value(&header).map_err(|e| Error::Format(e.to_string()))?;
    let arrays = mlp_arrays("backbone", enc.backbone());
    let bytes = encode_file(CHECKPOINT_MAGIC, "semantic", meta, &arrays)?;
    atomic_write(path, &bytes)
}

pub fn load_semantic(path: &Path) -> Result<SemanticEncoder> {
    let decoded = decode_file(CHECKPOINT_MAGIC, &read_all(path)?)?;
    if decoded.kind != "semantic" {
        return Err(Error::Format(format!("expected semantic checkpoint, got '{}'", decoded.kind)));
    }
    let header: SemanticHeader =
        serde_json::from_value(decoded.meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut arrays: std::collections::VecDeque<_> = decoded.arrays.into();
    let backbone = take_mlp(&mut arrays, &header.dims, header.activation)?;
    Ok(SemanticEncoder::from_parts(
        backbone,
        header.frozen,
        header.image_shape,
        header.pool,
        header.meta,
    ))
}

/// Checksum a semantic checkpoint file's payload without fully loading it.
pub fn semantic_payload_checksum(path: &Path) -> Result<u64> {
    let decoded = decode_file(CHECKPOINT_MAGIC, &read_all(path)?)?;
    Ok(decoded.payload_checksum)
}

// ---------------------------------------------------------------------------
// SVG codec checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CodecHeader {
    semantic_dims: Vec<usize>,
    semantic_activation: Activation,
    semantic_meta: SemanticMeta,
    semantic_pool: usize,
    residual_dims: Vec<usize>,
    decoder_dims: Vec<usize>,
    activation: Activation,
    stats: ChannelStats,
    align_weight: f64,
    image_shape: (usize, usize, usize),
    /// f32-payload checksum of the semantic parameters (pairing guard).
    semantic_payload_checksum: u64,
}

pub fn save_codec(path: &Path, codec: &SvgCodec) -> Result<()> {
    let header = CodecHeader {
        semantic_dims: codec.semantic.backbone().dims().to_vec(),
        semantic_activation: codec.semantic.backbone().activation(),
        semantic_meta: codec.semantic.meta.clone(),
        semantic_pool: codec.semantic.pool(),
        residual_dims: codec.residual.dims().to_vec(),
        decoder_dims: codec.decoder.dims().to_vec(),
        activation: codec.residual.activation(),
        stats: codec.stats.clone(),
        align_weight: codec.align_weight,
        image_shape: codec.image_shape,
        semantic_payload_checksum: payload_checksum_of(
            &codec.semantic.backbone().params().iter().collect::<Vec<_>>(),
        ),
    };
    let meta = serde_json::to_value(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut arrays = mlp_arrays("semantic", codec.semantic.backbone());
    arrays.extend(mlp_arrays("residual", &codec.residual));
    arrays.extend(mlp_arrays("decoder", &codec.decoder));
    let bytes = encode_file(CHECKPOINT_MAGIC, "svg-codec", meta, &arrays)?;
    atomic_write(path, &bytes)
}

pub fn load_codec(path: &Path) -> Result<SvgCodec> {
    let decoded = decode_file(CHECKPOINT_MAGIC, &read_all(path)?)?;
    if decoded.kind != "svg-codec" {
        return Err(Error::Format(format!("expected svg-codec checkpoint, got '{}'", decoded.kind)));
    }
    let header: CodecHeader =
        serde_json::from_value(decoded.meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut arrays: std::collections::VecDeque<_> = decoded.arrays.into();
    let backbone = take_mlp(&mut arrays, &header.semantic_dims, header.semantic_activation)?;
    let residual = take_mlp(&mut arrays, &header.residual_dims, header.activation)?;
    let decoder = take_mlp(&mut arrays, &header.decoder_dims, header.activation)?;

    let stored_checksum =
        payload_checksum_of(&backbone.params().iter().collect::<Vec<_>>());
    if stored_checksum != header.semantic_payload_checksum {
        return Err(Error::Contract(
            "codec checkpoint: embedded semantic parameters do not match their checksum".into(),
        ));
    }
    let semantic = SemanticEncoder::from_parts(
        backbone,
        true,
        header.image_shape,
        header.semantic_pool,
        header.semantic_meta,
    );
    let semantic_checksum = semantic.checksum();
    Ok(SvgCodec {
        semantic,
        residual,
        decoder,
        stats: header.stats,
        align_weight: header.align_weight,
        image_shape: header.image_shape,
        semantic_checksum,
    })
}

/// The codec's pairing identity: f32 checksum of its full payload.
pub fn codec_payload_checksum(path: &Path) -> Result<u64> {
    let decoded = decode_file(CHECKPOINT_MAGIC, &read_all(path)?)?;
    if decoded.kind != "svg-codec" && decoded.kind != "baseline-codec" {
        return Err(Error::Format(format!("'{}' is not a codec checkpoint", decoded.kind)));
    }
    Ok(decoded.payload_checksum)
}

/// f32 checksum of the semantic block embedded in a codec checkpoint.
pub fn codec_semantic_checksum(path: &Path) -> Result<u64> {
    let decoded = decode_file(CHECKPOINT_MAGIC, &read_all(path)?)?;
    if decoded.kind != "svg-codec" {
        return Err(Error::Format(format!("'{}' is not an svg-codec checkpoint", decoded.kind)));
    }
    let header: CodecHeader =
        serde_json::from_value(decoded.meta).map_err(|e| Error::Format(e.to_string()))?;
    Ok(header.semantic_payload_checksum)
}

// ---------------------------------------------------------------------------
// Baseline codec checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct BaselineHeader {
    encoder_dims: Vec<usize>,
    decoder_dims: Vec<usize>,
    activation: Activation,
    stats: ChannelStats,
    kl_weight: f64,
    latent_width: usize,
    image_shape: (usize, usize, usize),
}

pub fn save_baseline(path: &Path, codec: &BaselineCodec) -> Result<()> {
    let header = BaselineHeader {
        encoder_dims: codec.encoder.dims().to_vec(),
        decoder_dims: codec.decoder.dims().to_vec(),
        activation: codec.encoder.activation(),
        stats: codec.stats.clone(),
        kl_weight: codec.kl_weight,
        latent_width: codec.latent_width,
        image_shape: codec.image_shape,
    };
    let meta = serde_json::to_value(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut arrays = mlp_arrays("encoder", &codec.encoder);
    arrays.extend(mlp_arrays("decoder", &codec.decoder));
    let bytes = encode_file(CHECKPOINT_MAGIC, "baseline-codec", meta, &arrays)?;
    atomic_write(path, &bytes)
}

pub fn load_baseline(path: &Path) -> Result<BaselineCodec> {
    let decoded = decode_file(CHECKPOINT_MAGIC, &read_all(path)?)?;
    if decoded.kind != "baseline-codec" {
        return Err(Error::Format(format!(
            "expected baseline-codec checkpoint, got '{}'",
            decoded.kind
        )));
    }
    let header: BaselineHeader =
        serde_json::from_value(decoded.meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut arrays: std::collections::VecDeque<_> = decoded.arrays.into();
    let encoder = take_mlp(&mut arrays, &header.encoder_dims, header.activation)?;
    let decoder = take_mlp(&mut arrays, &header.decoder_dims, header.activation)?;
    Ok(BaselineCodec {
        encoder,
        decoder,
        stats: header.stats,
        kl_weight: header.kl_weight,
        latent_width: header.latent_width,
        image_shape: header.image_shape,
    })
}

// ---------------------------------------------------------------------------
// Velocity-net checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowMeta {
    pub net: VelocityNetConfig,
    pub interp: Interpolant,
    pub weighting: Weighting,
    /// Pairing guard against the codec checkpoint the features came from;
    /// None for nets trained directly on points.
    pub codec_payload_checksum: Option<u64>,
    /// Stats used to normalize the training features (echoed for sampling).
    pub stats: Option<ChannelStats>,
    pub train_echo: serde_json::Value,
}

pub fn save_flow(path: &Path, net: &VelocityNet, meta: &FlowMeta) -> Result<()> {
    let meta_value = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut arrays = mlp_arrays("embed", net.embed_net());
    if let Some(attn) = net.attention() {
        for (i, p) in attn.params().iter().enumerate() {
            let name = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.temp"][i];
            arrays.push((name.to_string(), tensor_to_f32_bytes(p), p.shape().to_vec()));
        }
    }
    arrays.extend(mlp_arrays("out", net.out_net()));
    arrays.push((
        "class_table".to_string(),
        tensor_to_f32_bytes(net.class_table()),
        net.class_table().shape().to_vec(),
    ));
    let bytes = encode_file(CHECKPOINT_MAGIC, "velocity-net", meta_value, &arrays)?;
    atomic_write(path, &bytes)
}

pub fn load_flow(path: &Path) -> Result<(VelocityNet, FlowMeta)> {
    let decoded = decode_file(CHECKPOINT_MAGIC, &read_all(path)?)?;
    if decoded.kind != "velocity-net" {
        return Err(Error::Format(format!(
            "expected velocity-net checkpoint, got '{}'",
            decoded.kind
        )));
    }
    let meta: FlowMeta =
        serde_json::from_value(decoded.meta).map_err(|e| Error::Format(e.to_string()))?;
    let cfg = meta.net.clone();
    let in_dim = cfg.feature_dim + cfg.time_dim + cfg.class_dim;
    let mut arrays: std::collections::VecDeque<_> = decoded.arrays.into();
    let embed = take_mlp(&mut arrays, &[in_dim, cfg.hidden], Activation::Silu)?;
    let attn = match cfg.attention {
        Some(ac) => {
            let mut params = Vec::with_capacity(5);
            for _ in 0..5 {
                let (entry, bytes) = arrays
                    .pop_front()
                    .ok_or_else(|| Error::Format("missing attention arrays".into()))?;
                params.push(tensor_from_f32_bytes(&entry, &bytes)?);
            }
            Some(AttentionBlock::from_params(cfg.hidden, ac, params)?)
        }
        None => None,
    };
    let out = take_mlp(&mut arrays, &[cfg.hidden, cfg.hidden, cfg.feature_dim], Activation::Silu)?;
    let (entry, bytes) = arrays
        .pop_front()
        .ok_or_else(|| Error::Format("missing class table".into()))?;
    let class_table = tensor_from_f32_bytes(&entry, &bytes)?;
    let net = VelocityNet::from_parts(cfg, embed, attn, out, class_table)?;
    Ok((net, meta))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Dataset {
    Shapes(ShapeImageDataset),
    Points { points: LabeledPoints, meta: serde_json::Value },
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    variant: String,
    labels: Vec<usize>,
    shape_config: Option<ShapeGenConfig>,
    points_meta: Option<serde_json::Value>,
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let (variant, data, labels, shape_config, points_meta) = match dataset {
        Dataset::Shapes(ds) => {
            if ds.is_empty() {
                return Err(Error::Config("refusing to write empty dataset".into()));
            }
            ("shapes", &ds.images, ds.labels.clone(), Some(ds.config.clone()), None)
        }
        Dataset::Points { points, meta } => {
            if points.labels.is_empty() {
                return Err(Error::Config("refusing to write empty dataset".into()));
            }
            ("points", &points.points, points.labels.clone(), None, Some(meta.clone()))
        }
    };
    let header = DatasetHeader {
        variant: variant.to_string(),
        labels,
        shape_config,
        points_meta,
    };
    let meta = serde_json::to_value(&header).map_err(|e| Error::Format(e.to_string()))?;
    let arrays = vec![("data".to_string(), tensor_to_f64_bytes(data), data.shape().to_vec())];
    let bytes = encode_file(DATASET_MAGIC, "dataset", meta, &arrays)?;
    atomic_write(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let decoded = decode_file(DATASET_MAGIC, &read_all(path)?)?;
    if decoded.kind != "dataset" {
        return Err(Error::Format(format!("expected dataset file, got '{}'", decoded.kind)));
    }
    let header: DatasetHeader =
        serde_json::from_value(decoded.meta).map_err(|e| Error::Format(e.to_string()))?;
    let (entry, bytes) = decoded
        .arrays
        .into_iter()
        .next()
        .ok_or_else(|| Error::Format("dataset missing data array".into()))?;
    let data = tensor_from_f64_bytes(&entry, &bytes)?;
    match header.variant.as_str() {
        "shapes" => {
            let config = header
                .shape_config
                .ok_or_else(|| Error::Format("shapes dataset missing config".into()))?;
            Ok(Dataset::Shapes(ShapeImageDataset { images: data, labels: header.labels, config }))
        }
        "points" => Ok(Dataset::Points {
            points: LabeledPoints { points: data, labels: header.labels },
            meta: header.points_meta.unwrap_or(serde_json::Value::Null),
        }),
        other => Err(Error::Format(format!("unknown dataset variant '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{train_codec_stage1, SemanticConfig, Stage1Config};
    use crate::datagen::{gen_shapes, make_mixture, sample_mixture, MixturePreset, ShapeGenConfig};
    use crate::flow::{AttnConfig, FlowTrainConfig};

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("svgl-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let dir = tempdir();
        let path = dir.join("shapes.svgd");
        let ds = gen_shapes(&ShapeGenConfig::new(12, 4, 16, 3)).unwrap();
        write_dataset(&path, &Dataset::Shapes(ds.clone())).unwrap();
        match read_dataset(&path).unwrap() {
            Dataset::Shapes(back) => {
                assert_eq!(back.images.data(), ds.images.data());
                assert_eq!(back.labels, ds.labels);
            }
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn points_dataset_roundtrip() {
        let dir = tempdir();
        let path = dir.join("points.svgd");
        let spec = make_mixture(MixturePreset::Dispersed, 2, 0).unwrap();
        let pts = sample_mixture(&spec, 64, 9).unwrap();
        let meta = serde_json::json!({"preset": "dispersed"});
        write_dataset(
            &path,
            &Dataset::Points { points: LabeledPoints { points: pts.points.clone(), labels: pts.labels.clone() }, meta },
        )
        .unwrap();
        match read_dataset(&path).unwrap() {
            Dataset::Points { points, .. } => {
                assert_eq!(points.points.data(), pts.points.data());
                assert_eq!(points.labels, pts.labels);
            }
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempdir();
        let path = dir.join("bad.svgd");
        let ds = gen_shapes(&ShapeGenConfig::new(4, 4, 16, 3)).unwrap();
        write_dataset(&path, &Dataset::Shapes(ds)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert_eq!(err.category(), "io");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempdir();
        let path = dir.join("trunc.svgd");
        let ds = gen_shapes(&ShapeGenConfig::new(4, 4, 16, 3)).unwrap();
        write_dataset(&path, &Dataset::Shapes(ds)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempdir();
        let path = dir.join("future.svgd");
        let ds = gen_shapes(&ShapeGenConfig::new(4, 4, 16, 3)).unwrap();
        write_dataset(&path, &Dataset::Shapes(ds)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn empty_dataset_rejected_on_write() {
        let dir = tempdir();
        let path = dir.join("empty.svgd");
        let pts = LabeledPoints { points: Tensor::zeros(&[1, 2]), labels: vec![] };
        let err = write_dataset(&path, &Dataset::Points { points: pts, meta: serde_json::Value::Null })
            .unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn codec_checkpoint_roundtrip_within_f32() {
        let dir = tempdir();
        let path = dir.join("codec.svgc");
        let ds = gen_shapes(&ShapeGenConfig::new(64, 4, 16, 5)).unwrap();
        let sem_cfg = SemanticConfig { epochs: 3, ..SemanticConfig::default() };
        let enc = SemanticEncoder::pretrain(&ds, &sem_cfg, 1).unwrap();
        let codec = train_codec_stage1(enc, &ds, &Stage1Config { epochs: 1, ..Stage1Config::default() }, 2)
            .unwrap()
            .codec;
        save_codec(&path, &codec).unwrap();
        let loaded = load_codec(&path).unwrap();
        // Each parameter equals the f32 quantization of the original.
        for (a, b) in codec.residual.params().iter().zip(loaded.residual.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // Save(load(x)) is byte-identical: quantization is idempotent.
        let path2 = dir.join("codec2.svgc");
        save_codec(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn flow_checkpoint_roundtrip() {
        let dir = tempdir();
        let path = dir.join("flow.svgc");
        let mut cfg = crate::flow::VelocityNetConfig::new(2, 2);
        cfg.attention = Some(AttnConfig { tokens: 4, heads: 2, qk_norm: true });
        let net = VelocityNet::init(cfg, 3).unwrap();
        let meta = FlowMeta {
            net: net.config.clone(),
            interp: Interpolant::Linear,
            weighting: Weighting::default(),
            codec_payload_checksum: Some(42),
            stats: None,
            train_echo: serde_json::to_value(FlowTrainConfig::default()).unwrap(),
        };
        save_flow(&path, &net, &meta).unwrap();
        let (loaded, lmeta) = load_flow(&path).unwrap();
        assert_eq!(lmeta.codec_payload_checksum, Some(42));
        for (a, b) in net.params().iter().zip(loaded.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn semantic_checkpoint_loads_without_config() {
        // Self-describing header: loading needs only the file.
        let dir = tempdir();
        let path = dir.join("sem.svgc");
        let ds = gen_shapes(&ShapeGenConfig::new(64, 4, 16, 5)).unwrap();
        let sem_cfg = SemanticConfig { epochs: 3, ..SemanticConfig::default() };
        let enc = SemanticEncoder::pretrain(&ds, &sem_cfg, 7).unwrap();
        save_semantic(&path, &enc).unwrap();
        let loaded = load_semantic(&path).unwrap();
        assert!(loaded.is_frozen());
        assert_eq!(loaded.feature_width(), enc.feature_width());
        assert_eq!(loaded.meta.head_accuracy, enc.meta.head_accuracy);
    }
}
