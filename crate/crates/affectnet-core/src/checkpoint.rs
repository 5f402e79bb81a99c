//! Model checkpoints: a text manifest (version, config echo, parameter
//! names/shapes/offsets) followed by every parameter as raw little-endian
//! float32. Round trips are bit-exact and the manifest diffs cleanly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MtaNet};
use crate::nn::AttentionMode;

pub const CKPT_VERSION: &str = "mtanet-ckpt/1";
const END_HEADER: &str = "end-header";

fn config_echo(config: &ModelConfig) -> String {
    let (c, h, w) = config.input_size;
    let channels: Vec<String> = config.stage_channels.iter().map(|v| v.to_string()).collect();
    let proj = match config.encoder_proj_dim {
        Some(d) => d.to_string(),
        None => "none".to_string(),
    };
    format!(
        "config.input_size = {c},{h},{w}\n\
         config.stage_channels = {}\n\
         config.blocks_per_stage = {}\n\
         config.dropout_p = {}\n\
         config.se_ratio = {}\n\
         config.cbam_kernel = {}\n\
         config.attention_mode = {}\n\
         config.encoder_proj_dim = {proj}\n\
         config.head_depth = {}\n",
        channels.join(","),
        config.blocks_per_stage,
        config.dropout_p,
        config.se_ratio,
        config.cbam_kernel,
        config.attention_mode.as_str(),
        config.head_depth,
    )
}

pub fn save_checkpoint(model: &MtaNet<f32>, path: &Path) -> Result<()> {
    let mut header = format!("{CKPT_VERSION}\n");
    header.push_str(&config_echo(&model.config));
    let mut offset = 0usize;
    for (_, p) in model.store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let len = 4 * p.value.numel();
        let _ = writeln!(
            header,
            "param {} {} offset={offset} len={len}",
            p.name,
            dims.join(",")
        );
        offset += len;
    }
    header.push_str(END_HEADER);
    header.push('\n');

    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_header(path: &Path, text: &str) -> Result<(Vec<String>, Vec<ManifestEntry>)> {
    let mut lines = text.lines();
    let version = lines.next().unwrap_or_default();
    if version != CKPT_VERSION {
        return Err(Error::Container(format!(
            "{}: unsupported checkpoint version '{version}' (expected '{CKPT_VERSION}')",
            path.display()
        )));
    }
    let mut config_lines = Vec::new();
    let mut entries = Vec::new();
    for line in lines {
        if line == END_HEADER {
            break;
        }
        if line.starts_with("config.") {
            config_lines.push(line.to_string());
            continue;
        }
        let Some(rest) = line.strip_prefix("param ") else {
            return Err(Error::Container(format!(
                "{}: bad manifest line '{line}'",
                path.display()
            )));
        };
        let parts: Vec<&str> = rest.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Container(format!(
                "{}: bad param line '{line}'",
                path.display()
            )));
        }
        let bad = |what: &str| Error::Container(format!("{}: {what} in '{line}'", path.display()));
        let shape: Vec<usize> = parts[1]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset = parts[2]
            .strip_prefix("offset=")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad("bad offset"))?;
        let len = parts[3]
            .strip_prefix("len=")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad("bad len"))?;
        entries.push(ManifestEntry {
            name: parts[0].to_string(),
            shape,
            offset,
            len,
        });
    }
    Ok((config_lines, entries))
}

/// Rebuild a model with the given architecture and load all parameters.
/// Every manifest entry must match the freshly constructed parameter set by
/// name and shape, in order.
pub fn load_checkpoint(path: &Path, config: ModelConfig) -> Result<MtaNet<f32>> {
    let bytes = fs::read(path)?;
    let needle = format!("{END_HEADER}\n").into_bytes();
    let header_end = bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
        .ok_or_else(|| {
            Error::Container(format!("{}: missing '{END_HEADER}' line", path.display()))
        })?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Container(format!("{}: header is not UTF-8", path.display())))?;
    let (_, entries) = parse_header(path, header)?;
    let payload = &bytes[header_end..];

    let mut model = MtaNet::<f32>::new(config, 0)?;
    if entries.len() != model.store.len() {
        return Err(Error::Container(format!(
            "{}: checkpoint has {} parameters, config implies {}",
            path.display(),
            entries.len(),
            model.store.len()
        )));
    }
    let expected_payload: usize = entries.iter().map(|e| e.len).sum();
    if payload.len() != expected_payload {
        return Err(Error::Container(format!(
            "{}: payload is {} bytes, manifest implies {expected_payload}",
            path.display(),
            payload.len()
        )));
    }

    let ids: Vec<_> = model.store.ids().collect();
    for (entry, id) in entries.iter().zip(ids) {
        let param = model.store.get_mut(id);
        if entry.name != param.name || entry.shape != param.value.shape() {
            return Err(Error::Container(format!(
                "{}: parameter mismatch at '{}': checkpoint has {} {:?}, config implies {} {:?}",
                path.display(),
                entry.name,
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        if entry.len != 4 * param.value.numel() {
            return Err(Error::Container(format!(
                "{}: '{}' length {} disagrees with shape {:?}",
                path.display(),
                entry.name,
                entry.len,
                entry.shape
            )));
        }
        let end = entry.offset + entry.len;
        if end > payload.len() {
            return Err(Error::Container(format!(
                "{}: '{}' payload is truncated",
                path.display(),
                entry.name
            )));
        }
        let slice = &payload[entry.offset..end];
        for (dst, chunk) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(slice.chunks_exact(4))
        {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    Ok(model)
}

/// Parse just the config echo of a checkpoint into a [`ModelConfig`].
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path)?;
    let head = &bytes[..bytes.len().min(64 * 1024)];
    let text = String::from_utf8_lossy(head);
    let mut config = ModelConfig::default();
    let bad = |line: &str, what: &str| {
        Error::Container(format!("{}: {what} in '{line}'", path.display()))
    };
    for line in text.lines() {
        if line == END_HEADER {
            break;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "config.input_size" => {
                let dims: Vec<usize> = value
                    .split(',')
                    .map(|d| d.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(line, "bad dims"))?;
                if dims.len() != 3 {
                    return Err(bad(line, "need 3 dims"));
                }
                config.input_size = (dims[0], dims[1], dims[2]);
            }
            "config.stage_channels" => {
                config.stage_channels = value
                    .split(',')
                    .map(|d| d.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(line, "bad channels"))?;
            }
            "config.blocks_per_stage" => {
                config.blocks_per_stage = value.parse().map_err(|_| bad(line, "bad count"))?
            }
            "config.dropout_p" => {
                config.dropout_p = value.parse().map_err(|_| bad(line, "bad probability"))?
            }
            "config.se_ratio" => {
                config.se_ratio = value.parse().map_err(|_| bad(line, "bad ratio"))?
            }
            "config.cbam_kernel" => {
                config.cbam_kernel = value.parse().map_err(|_| bad(line, "bad kernel"))?
            }
            "config.attention_mode" => config.attention_mode = AttentionMode::parse(value)?,
            "config.encoder_proj_dim" => {
                config.encoder_proj_dim = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|_| bad(line, "bad width"))?),
                }
            }
            "config.head_depth" => {
                config.head_depth = value.parse().map_err(|_| bad(line, "bad depth"))?
            }
            _ => {}
        }
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_config() -> ModelConfig {
        ModelConfig {
            stage_channels: vec![8, 16],
            blocks_per_stage: 1,
            se_ratio: 4,
            cbam_kernel: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MtaNet::<f32>::new(small_config(), 42).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path, small_config()).unwrap();

        for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // forward after reload is bitwise identical too
        let images = crate::tensor::Tensor::full(vec![2, 3, 32, 32], 0.5f32);
        let x = model.predict(&images).unwrap();
        let y = loaded.predict(&images).unwrap();
        assert!(x
            .expr_logits
            .data()
            .iter()
            .zip(y.expr_logits.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // config echo parses back
        let parsed = read_checkpoint_config(&path).unwrap();
        assert_eq!(parsed, small_config());
    }

    #[test]
    fn payload_length_matches_parameter_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MtaNet::<f32>::new(small_config(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let marker = b"end-header\n";
        let header_end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .unwrap()
            + marker.len();
        assert_eq!(bytes.len() - header_end, 4 * model.store.total_count());
    }

    #[test]
    fn mismatched_config_names_first_offending_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MtaNet::<f32>::new(small_config(), 3).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let other = ModelConfig {
            stage_channels: vec![8, 32],
            ..small_config()
        };
        let err = load_checkpoint(&path, other).err().expect("must fail").to_string();
        assert!(
            err.contains("backbone.stage1.block0"),
            "error should name the first mismatching parameter: {err}"
        );
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MtaNet::<f32>::new(small_config(), 3).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path, small_config()).err().expect("must fail").to_string();
        assert!(err.contains("payload"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, "mtanet-ckpt/9\nend-header\n").unwrap();
        let err = load_checkpoint(&path, small_config()).err().expect("must fail").to_string();
        assert!(err.contains("version"), "{err}");
    }
}
