//! Versioned checkpoints: a UTF-8 header (format tag, model configuration,
//! parameter names and shapes) followed by the parameter values as
//! little-endian `f64`.

use std::path::Path;

use eanet_core::model::{Model, ModelConfig, ParamSet, Task};
use eanet_core::Tensor;

use crate::config::{RunConfig, TaskKind};
use crate::error::{format_err, io_err, Result};

pub const MAGIC: &str = "eanet-checkpoint";
pub const VERSION: u32 = 1;

fn task_kind(task: Task) -> TaskKind {
    match task {
        Task::Pretrain => TaskKind::Pretrain,
        Task::Regression => TaskKind::Regression,
        Task::Classification { .. } => TaskKind::Classification,
    }
}

fn config_lines(config: &ModelConfig) -> Vec<String> {
    let run = RunConfig {
        task: task_kind(config.task),
        model: config.clone(),
        input_channels: Some(config.input_channels),
        max_len: Some(config.max_len),
        n_classes: match config.task {
            Task::Classification { n_classes } => Some(n_classes),
            _ => None,
        },
        ..RunConfig::default()
    };
    run.entries()
        .into_iter()
        .filter(|(k, _)| *k == "task" || k.starts_with("model."))
        .map(|(k, v)| format!("{k} = {v}"))
        .collect()
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    for line in config_lines(&model.config) {
        header += &line;
        header.push('\n');
    }
    let mut total = 0;
    for (name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header += &format!("param {name} {}\n", dims.join(" "));
        total += t.len();
    }
    header += &format!("end {total}\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(total * 8);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Model> {
    let err = |msg: String| format_err(format!("{origin}: {msg}"));
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("truncated header".into()))?;
        pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| err("header is not UTF-8".into()))
    };

    let first = next_line()?;
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| err("not a checkpoint file".into()))?;
    if version != VERSION.to_string() {
        return Err(err(format!(
            "unsupported checkpoint version `{version}` (expected {VERSION})"
        )));
    }
    let mut config_text = String::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let total = loop {
        let line = next_line()?;
        if let Some(rest) = line.strip_prefix("param ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| err(format!("bad parameter line `{line}`")))?;
            let dims = parts
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| err(format!("bad shape in `{line}`")))?;
            shapes.push((name.to_string(), dims));
        } else if let Some(rest) = line.strip_prefix("end ") {
            break rest
                .trim()
                .parse::<usize>()
                .map_err(|_| err(format!("bad end line `{line}`")))?;
        } else {
            config_text += &line;
            config_text.push('\n');
        }
    };
    let declared: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if declared != total {
        return Err(err(format!(
            "header declares {total} values but shapes hold {declared}"
        )));
    }
    let payload = &bytes[pos..];
    if payload.len() != total * 8 {
        return Err(err(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let run = RunConfig::parse(&config_text, origin, Path::new("."))?;
    let config = run.model_config(run.task)?;
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let pairs = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            Ok((name, Tensor::from_vec(shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model::from_params(config, ParamSet::from_pairs(pairs))?)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, &path.display().to_string())
}
