//! Portable text checkpoint.
//!
//! ```text
//! handpose-params 1
//! config {"image_channels":3,...}
//! objective {"MultiScale":{"weights":[...]}}
//! tensor stem.weight 8 4 3 3
//! 0.0123 -0.0456 ...
//! ...
//! end
//! ```
//!
//! Floats are written in shortest round-trip form, so save then load is
//! exact. Every tensor name and shape is checked against a network built
//! from the stored config.

use std::fmt::Write as _;
use std::path::Path;

use super::model::{build_network, NetworkConfig, NetworkParams};
use super::train::Objective;
use crate::error::{Error, Result};

const MAGIC: &str = "handpose-params";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub objective: Objective,
}

pub fn to_text(ckpt: &Checkpoint) -> Result<String> {
    let mut out = String::new();
    let json = |e: serde_json::Error| Error::Format(e.to_string());
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    writeln!(out, "config {}", serde_json::to_string(&ckpt.params.config).map_err(json)?).unwrap();
    writeln!(out, "objective {}", serde_json::to_string(&ckpt.objective).map_err(json)?).unwrap();
    for (name, t) in ckpt.params.named_tensors() {
        let [a, b, c, d] = t.shape();
        writeln!(out, "tensor {name} {a} {b} {c} {d}").unwrap();
        let values: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", values.join(" ")).unwrap();
    }
    out.push_str("end\n");
    Ok(out)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

pub fn from_text(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| lines.next().ok_or_else(|| parse_err(0, format!("file ends before {what}")));

    let (n, header) = next("header")?;
    match header.split_once(' ') {
        Some((MAGIC, v)) if v.trim() == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(parse_err(n, format!("unsupported checkpoint version {v}"))),
        _ => return Err(parse_err(n, "not a parameter checkpoint")),
    }
    let (n, line) = next("config")?;
    let config: NetworkConfig = line
        .strip_prefix("config ")
        .ok_or_else(|| parse_err(n, "expected config line"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| parse_err(n, e.to_string())))?;
    config.validate().map_err(|e| parse_err(n, e.to_string()))?;
    let (n, line) = next("objective")?;
    let objective: Objective = line
        .strip_prefix("objective ")
        .ok_or_else(|| parse_err(n, "expected objective line"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| parse_err(n, e.to_string())))?;

    let mut params = build_network(&config, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(s, _)| s).collect();
    for (name, tensor) in names.iter().zip(params.tensors_mut()) {
        let (n, line) = next("tensor header")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "tensor" {
            return Err(parse_err(n, "expected `tensor <name> <d0> <d1> <d2> <d3>`"));
        }
        if fields[1] != name {
            return Err(parse_err(n, format!("expected tensor {name}, found {}", fields[1])));
        }
        let shape: Vec<usize> = fields[2..]
            .iter()
            .map(|s| s.parse().map_err(|_| parse_err(n, format!("bad dimension {s:?}"))))
            .collect::<Result<_>>()?;
        if shape != tensor.shape() {
            return Err(parse_err(n, format!("{name} has shape {shape:?}, config needs {:?}", tensor.shape())));
        }
        let (n, line) = next("tensor values")?;
        let mut count = 0;
        let data = tensor.data_mut();
        for tok in line.split_whitespace() {
            if count == data.len() {
                return Err(parse_err(n, format!("{name}: more than {} values", data.len())));
            }
            let v: f64 = tok.parse().map_err(|_| parse_err(n, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(n, format!("{name}: non-finite value")));
            }
            data[count] = v;
            count += 1;
        }
        if count != data.len() {
            return Err(parse_err(n, format!("{name}: expected {} values, got {count}", data.len())));
        }
    }
    let (n, line) = next("end marker")?;
    if line.trim() != "end" {
        return Err(parse_err(n, "expected end marker"));
    }
    Ok(Checkpoint { params, objective })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_text(&std::fs::read_to_string(path)?)
}
