//! Checkpoint persistence: a structured text header (format version, layer
//! specs, output dimensionality) followed by the raw parameters as 64-bit
//! little-endian reals, per layer weights in `(d, c, rh, rw)` order then the
//! bias vector.

use super::{Activation, Layer, LayerKind, LayerSpec, Network, NetworkError};
use crate::tensor::Tensor4;
use std::fmt::Write as _;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "ECC-NET v1";
const DATA_MARKER: &[u8] = b"DATA\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
}

fn io_err(context: &str, source: std::io::Error) -> NetworkError {
    NetworkError::Io {
        context: context.to_string(),
        source,
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> NetworkError {
    NetworkError::Parse {
        line,
        message: message.into(),
    }
}

pub(crate) fn render_layer_line(spec: &LayerSpec) -> String {
    match spec.kind {
        LayerKind::Conv { stride, padding } => format!(
            "layer conv d {} c {} rh {} rw {} stride {} pad {} act {}",
            spec.d,
            spec.c,
            spec.rh,
            spec.rw,
            stride,
            padding,
            act_name(spec.activation)
        ),
        LayerKind::FullyConnected => format!(
            "layer fc d {} c {} rh {} rw {} act {}",
            spec.d,
            spec.c,
            spec.rh,
            spec.rw,
            act_name(spec.activation)
        ),
    }
}

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::None => "none",
    }
}

pub(crate) fn parse_layer_line(lineno: usize, line: &str) -> Result<LayerSpec, NetworkError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 2 || tokens[0] != "layer" {
        return Err(parse_err(lineno, "expected a layer line"));
    }
    let kind_name = tokens[1];
    let mut fields = std::collections::HashMap::new();
    let mut i = 2;
    while i + 1 < tokens.len() {
        fields.insert(tokens[i], tokens[i + 1]);
        i += 2;
    }
    let get = |key: &str| -> Result<usize, NetworkError> {
        fields
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(lineno, format!("missing or bad field {key:?}")))
    };
    let activation = match fields.get("act").copied() {
        Some("relu") => Activation::Relu,
        Some("none") => Activation::None,
        other => return Err(parse_err(lineno, format!("bad activation {other:?}"))),
    };
    let spec = match kind_name {
        "conv" => LayerSpec {
            kind: LayerKind::Conv {
                stride: get("stride")?,
                padding: get("pad")?,
            },
            d: get("d")?,
            c: get("c")?,
            rh: get("rh")?,
            rw: get("rw")?,
            activation,
        },
        "fc" => LayerSpec {
            kind: LayerKind::FullyConnected,
            d: get("d")?,
            c: get("c")?,
            rh: get("rh")?,
            rw: get("rw")?,
            activation,
        },
        other => return Err(parse_err(lineno, format!("unknown layer kind {other:?}"))),
    };
    Ok(spec)
}

/// Architecture description shared by the checkpoint header and the external
/// measurement exchange payload.
pub fn render_arch_text(specs: &[LayerSpec], n_out: usize) -> String {
    let mut out = String::new();
    writeln!(out, "layers {}", specs.len()).unwrap();
    for spec in specs {
        writeln!(out, "{}", render_layer_line(spec)).unwrap();
    }
    writeln!(out, "n_out {n_out}").unwrap();
    out
}

pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    meta: &CheckpointMeta,
) -> Result<(), NetworkError> {
    let mut header = String::new();
    writeln!(header, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(header, "config {}", meta.config_hash).unwrap();
    writeln!(header, "seed {}", meta.seed).unwrap();
    header.push_str(&render_arch_text(&net.specs(), net.n_out()));
    header.push_str("DATA\n");

    let mut bytes = header.into_bytes();
    for layer in &net.layers {
        for v in layer.weights.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.bias {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)
        .map_err(|e| io_err(&format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta), NetworkError> {
    let bytes = std::fs::read(path)
        .map_err(|e| io_err(&format!("reading checkpoint {}", path.display()), e))?;
    let marker = bytes
        .windows(DATA_MARKER.len())
        .position(|w| w == DATA_MARKER)
        .ok_or_else(|| parse_err(0, "missing DATA marker"))?;
    let header = std::str::from_utf8(&bytes[..marker])
        .map_err(|_| parse_err(0, "header is not UTF-8"))?;
    let payload = &bytes[marker + DATA_MARKER.len()..];

    let mut config_hash = String::new();
    let mut seed = 0u64;
    let mut declared_layers: Option<usize> = None;
    let mut specs: Vec<LayerSpec> = Vec::new();
    let mut n_out: Option<usize> = None;

    for (lineno, raw) in header.lines().enumerate() {
        let n = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if n == 1 {
            if line != CHECKPOINT_MAGIC {
                return Err(parse_err(n, format!("bad magic {line:?}")));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("config ") {
            config_hash = rest.trim().to_string();
        } else if let Some(rest) = line.strip_prefix("seed ") {
            seed = rest.trim().parse().map_err(|_| parse_err(n, "bad seed"))?;
        } else if let Some(rest) = line.strip_prefix("layers ") {
            declared_layers = Some(rest.trim().parse().map_err(|_| parse_err(n, "bad layers"))?);
        } else if line.starts_with("layer ") {
            specs.push(parse_layer_line(n, line)?);
        } else if let Some(rest) = line.strip_prefix("n_out ") {
            n_out = Some(rest.trim().parse().map_err(|_| parse_err(n, "bad n_out"))?);
        } else {
            return Err(parse_err(n, format!("unexpected line {line:?}")));
        }
    }

    let declared = declared_layers.ok_or_else(|| parse_err(0, "missing layers count"))?;
    if specs.len() != declared {
        return Err(parse_err(
            0,
            format!("declared {declared} layers, found {}", specs.len()),
        ));
    }
    let n_out = n_out.ok_or_else(|| parse_err(0, "missing n_out"))?;
    if specs.last().map(|s| s.d) != Some(n_out) {
        return Err(parse_err(0, "n_out does not match last layer"));
    }

    let expected_bytes: usize = specs
        .iter()
        .map(|s| (s.d * s.c * s.rh * s.rw + s.d) * 8)
        .sum();
    if payload.len() != expected_bytes {
        return Err(parse_err(
            0,
            format!(
                "payload is {} bytes, expected {expected_bytes}",
                payload.len()
            ),
        ));
    }

    let mut pos = 0usize;
    let mut read_f64s = |count: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&payload[pos..pos + 8]);
            out.push(f64::from_le_bytes(buf));
            pos += 8;
        }
        out
    };
    let layers = specs
        .iter()
        .map(|spec| {
            let weights = Tensor4::from_vec(
                spec.d,
                spec.c,
                spec.rh,
                spec.rw,
                read_f64s(spec.d * spec.c * spec.rh * spec.rw),
            )
            .expect("sized read");
            let bias = read_f64s(spec.d);
            Layer {
                spec: *spec,
                weights,
                bias,
            }
        })
        .collect();

    Ok((
        Network {
            layers,
            mask: None,
        },
        CheckpointMeta { config_hash, seed },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let specs = vec![
            LayerSpec::conv(2, 4, (3, 3), 1, 1, Activation::Relu),
            LayerSpec::fully_connected(4, 3, Activation::None),
        ];
        let net = Network::random_init(&specs, 17).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.eccnet");
        let meta = CheckpointMeta {
            config_hash: "f00d".into(),
            seed: 17,
        };
        save_checkpoint(&path, &net, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(loaded_meta, meta);
        // saving again produces identical bytes
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &loaded, &loaded_meta).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let specs = vec![LayerSpec::fully_connected(2, 2, Activation::None)];
        let net = Network::random_init(&specs, 1).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.eccnet");
        save_checkpoint(
            &path,
            &net,
            &CheckpointMeta {
                config_hash: String::new(),
                seed: 0,
            },
        )
        .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn arch_text_round_trips_through_layer_parser() {
        let specs = vec![
            LayerSpec::conv(2, 8, (3, 3), 2, 1, Activation::Relu),
            LayerSpec::fully_connected(8, 4, Activation::None),
        ];
        let text = render_arch_text(&specs, 4);
        let parsed: Vec<LayerSpec> = text
            .lines()
            .filter(|l| l.starts_with("layer "))
            .enumerate()
            .map(|(i, l)| parse_layer_line(i, l).unwrap())
            .collect();
        assert_eq!(parsed, specs);
    }
}
