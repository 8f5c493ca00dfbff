//! On-disk trace bundles: a text manifest plus raw little-endian f32 blobs.
//!
//! A bundle records one full (unpruned) run together with the model config
//! and sample that produced it, so a strategy can later be scored against
//! the recorded final token without re-deriving the reference run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::ImageBuffer;
use crate::importance::AttentionMap;
use crate::toylmm::{FlowTrace, LayerStates, ToyModelConfig, WorkloadSample};

pub const MANIFEST_NAME: &str = "manifest";

/// A recorded run plus everything needed to reproduce its pruned variants.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub cfg: ToyModelConfig,
    pub sample: WorkloadSample,
    pub trace: FlowTrace,
}

impl TraceBundle {
    /// Check that a model built from `cfg` can replay this bundle.
    pub fn ensure_compatible(&self, cfg: &ToyModelConfig) -> Result<()> {
        if self.cfg.hidden_dim != cfg.hidden_dim {
            return Err(Error::Shape(format!(
                "bundle hidden_dim {} does not match model hidden_dim {}",
                self.cfg.hidden_dim, cfg.hidden_dim
            )));
        }
        if self.cfg != *cfg {
            return Err(Error::InvalidConfig(
                "bundle model config differs from the supplied config".into(),
            ));
        }
        Ok(())
    }
}

/// Write a bundle into `dir` (created if needed). Blobs are written through
/// a temp file and renamed into place.
pub fn record_trace(dir: &Path, bundle: &TraceBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = &bundle.cfg;
    let sample = &bundle.sample;
    let trace = &bundle.trace;

    let mut manifest = String::new();
    let mut kv = |key: &str, value: String| {
        let _ = writeln!(manifest, "{key} = {value}");
    };
    kv("format_version", "1".into());
    kv("hidden_dim", cfg.hidden_dim.to_string());
    kv("vit_layers", cfg.vit_layers.to_string());
    kv("lm_layers", cfg.lm_layers.to_string());
    kv("heads", cfg.heads.to_string());
    kv("ffn_dim", cfg.ffn_dim.to_string());
    kv("text_len", cfg.text_len.to_string());
    kv("model_seed", cfg.seed.to_string());
    kv("text_seed", sample.text_seed.to_string());
    kv("patch_size", sample.patch_size.to_string());
    kv("image_width", sample.image.width.to_string());
    kv("image_height", sample.image.height.to_string());
    kv("image_channels", sample.image.channels.to_string());
    kv("image_file", "image.bin".into());
    kv("attention_n", trace.attention.n().to_string());
    kv("attention_file", "attention.bin".into());
    kv("final_dim", trace.final_token.len().to_string());
    kv("final_file", "final.bin".into());
    kv("layer_count", trace.per_layer_hidden.len().to_string());
    for (l, layer) in trace.per_layer_hidden.iter().enumerate() {
        kv(
            &format!("layer_{l}_rows"),
            layer.position_ids.len().to_string(),
        );
        let ids: Vec<String> = layer.position_ids.iter().map(|p| p.to_string()).collect();
        kv(&format!("layer_{l}_positions"), ids.join(","));
        kv(&format!("layer_{l}_file"), format!("layer_{l:02}.bin"));
    }

    atomic_write(&dir.join("image.bin"), &sample.image.data)?;
    atomic_write(&dir.join("attention.bin"), &trace.attention.to_le_bytes())?;
    atomic_write(&dir.join("final.bin"), &f32s_to_le(&trace.final_token))?;
    for (l, layer) in trace.per_layer_hidden.iter().enumerate() {
        let flat: Vec<f32> = layer.states.iter().flatten().copied().collect();
        atomic_write(&dir.join(format!("layer_{l:02}.bin")), &f32s_to_le(&flat))?;
    }
    atomic_write(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

/// Read a bundle back, validating every declared size against the blobs.
pub fn load_trace(dir: &Path) -> Result<TraceBundle> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Manifest {
        field: MANIFEST_NAME.into(),
        reason: format!("{}: {e}", manifest_path.display()),
    })?;
    let entries = parse_manifest(&text)?;
    let get = |field: &str| -> Result<&str> {
        entries
            .iter()
            .find(|(k, _)| k == field)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Manifest {
                field: field.into(),
                reason: "missing".into(),
            })
    };
    let get_usize = |field: &str| -> Result<usize> {
        get(field)?.parse().map_err(|_| Error::Manifest {
            field: field.into(),
            reason: format!("not a count: {}", get(field).unwrap_or_default()),
        })
    };
    let get_u64 = |field: &str| -> Result<u64> {
        get(field)?.parse().map_err(|_| Error::Manifest {
            field: field.into(),
            reason: "not a 64-bit integer".into(),
        })
    };

    let version = get_usize("format_version")?;
    if version != 1 {
        return Err(Error::Manifest {
            field: "format_version".into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let cfg = ToyModelConfig {
        hidden_dim: get_usize("hidden_dim")?,
        vit_layers: get_usize("vit_layers")?,
        lm_layers: get_usize("lm_layers")?,
        heads: get_usize("heads")?,
        ffn_dim: get_usize("ffn_dim")?,
        text_len: get_usize("text_len")?,
        seed: get_u64("model_seed")?,
    };
    cfg.validate()?;

    let width = get_usize("image_width")?;
    let height = get_usize("image_height")?;
    let channels = get_usize("image_channels")?;
    let image_bytes = read_blob(
        dir,
        get("image_file")?,
        "image_file",
        width * height * channels,
    )?;
    let image = ImageBuffer::new(width, height, channels, image_bytes)?;
    let sample = WorkloadSample {
        image,
        patch_size: get_usize("patch_size")?,
        text_seed: get_u64("text_seed")?,
    };
    sample.validate()?;

    let n = get_usize("attention_n")?;
    let attention_bytes = read_blob(dir, get("attention_file")?, "attention_file", n * n * 4)?;
    let attention = AttentionMap::from_le_bytes(n, &attention_bytes)?;

    let final_dim = get_usize("final_dim")?;
    if final_dim != cfg.hidden_dim {
        return Err(Error::Manifest {
            field: "final_dim".into(),
            reason: format!("expected hidden_dim {}, got {final_dim}", cfg.hidden_dim),
        });
    }
    let final_bytes = read_blob(dir, get("final_file")?, "final_file", final_dim * 4)?;
    let final_token = le_to_f32s(&final_bytes);

    let layer_count = get_usize("layer_count")?;
    if layer_count != cfg.lm_layers {
        return Err(Error::Manifest {
            field: "layer_count".into(),
            reason: format!("expected lm_layers {}, got {layer_count}", cfg.lm_layers),
        });
    }
    let mut per_layer_hidden = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let rows_field = format!("layer_{l}_rows");
        let rows = get_usize(&rows_field)?;
        let positions_field = format!("layer_{l}_positions");
        let position_ids: Vec<usize> = get(&positions_field)?
            .split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| Error::Manifest {
                    field: positions_field.clone(),
                    reason: format!("bad position id `{p}`"),
                })
            })
            .collect::<Result<_>>()?;
        if position_ids.len() != rows {
            return Err(Error::Manifest {
                field: positions_field,
                reason: format!("{} ids for {rows} rows", position_ids.len()),
            });
        }
        let file_field = format!("layer_{l}_file");
        let bytes = read_blob(
            dir,
            get(&file_field)?,
            &file_field,
            rows * cfg.hidden_dim * 4,
        )?;
        let flat = le_to_f32s(&bytes);
        let states = flat
            .chunks_exact(cfg.hidden_dim)
            .map(|c| c.to_vec())
            .collect();
        per_layer_hidden.push(LayerStates {
            position_ids,
            states,
        });
    }

    let trace = FlowTrace {
        attention,
        per_layer_hidden,
        final_token,
        text_len: cfg.text_len,
    };
    match trace.per_layer_hidden.last().and_then(|l| l.states.last()) {
        Some(last) if *last == trace.final_token => {}
        _ => {
            return Err(Error::Manifest {
                field: "final_file".into(),
                reason: "final token does not equal the last row of the last layer".into(),
            })
        }
    }
    Ok(TraceBundle { cfg, sample, trace })
}

/// Score a strategy against a recorded run: the pruned forward is
/// recomputed with the supplied model while the reference final token and
/// the attention map behind the importance scores are taken from the
/// bundle exactly as recorded.
pub fn evaluate_against_trace(
    model: &crate::toylmm::Model,
    bundle: &TraceBundle,
    strategy: &crate::schedule::PruningStrategy,
    layout: &crate::schedule::StageLayout,
    opts: crate::toylmm::PipelineOptions,
) -> Result<f64> {
    use crate::imgproc::{entropy_map, gray_levels};
    use crate::toylmm::{cosine, importance_from_parts, pruned_lm_run};

    bundle.ensure_compatible(model.config())?;
    let sample = &bundle.sample;
    let encoding = model.encode(sample)?;
    if encoding.attention.n() != bundle.trace.attention.n() {
        return Err(Error::Shape(format!(
            "recorded attention covers {} tokens, sample produces {}",
            bundle.trace.attention.n(),
            encoding.attention.n()
        )));
    }
    let entropy = entropy_map(&gray_levels(&sample.image), sample.patch_size)?;
    let importance = importance_from_parts(
        &bundle.trace.attention,
        &entropy,
        strategy.t,
        strategy.alpha,
        opts.calibration,
    )?;
    let text = model.text_embeddings(sample.text_seed);
    let (_, pruned_final) = pruned_lm_run(
        model,
        &encoding,
        &text,
        strategy,
        layout,
        &importance,
        opts,
        false,
    )?;
    cosine(&bundle.trace.final_token, &pruned_final)
}

fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Manifest {
            field: format!("line {}", lineno + 1),
            reason: "expected `key = value`".into(),
        })?;
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn read_blob(dir: &Path, name: &str, field: &str, expected_len: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::Manifest {
        field: field.into(),
        reason: format!("{}: {e}", path.display()),
    })?;
    if bytes.len() != expected_len {
        return Err(Error::Manifest {
            field: field.into(),
            reason: format!(
                "blob holds {} bytes, manifest declares {expected_len}",
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Write through a sibling temp file, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
