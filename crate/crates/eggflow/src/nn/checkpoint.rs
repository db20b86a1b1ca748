//! Checkpoint format: one JSON header line, then little-endian f64 arrays
//! in the order the header declares. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{OptConfig, OptState};
use super::{Linear, Mlp, MlpGrads, Role};
use crate::error::{Error, Result};

pub const FORMAT: &str = "eggflow-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptHeader {
    pub step: u64,
    pub config: OptConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub n_layers: usize,
    pub residual: bool,
    pub seed: u64,
    pub config_hash: String,
    pub arrays: Vec<ArrayDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt: Option<OptHeader>,
}

fn model_arrays(m: &Mlp) -> Vec<ArrayDecl> {
    let mut arrays = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        arrays.push(ArrayDecl {
            name: format!("layer{i}.w"),
            shape: vec![l.out_dim, l.in_dim],
        });
        arrays.push(ArrayDecl {
            name: format!("layer{i}.b"),
            shape: vec![l.out_dim],
        });
    }
    arrays
}

fn grads_arrays(prefix: &str, m: &Mlp) -> Vec<ArrayDecl> {
    let mut arrays = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        arrays.push(ArrayDecl {
            name: format!("{prefix}.layer{i}.w"),
            shape: vec![l.out_dim, l.in_dim],
        });
        arrays.push(ArrayDecl {
            name: format!("{prefix}.layer{i}.b"),
            shape: vec![l.out_dim],
        });
    }
    arrays
}

/// Serialize a model (and optionally its optimizer state) to bytes.
pub fn save_bytes(m: &Mlp, opt: Option<&OptState>, seed: u64, config_hash: &str) -> Result<Vec<u8>> {
    let mut arrays = model_arrays(m);
    let mut payload: Vec<f64> = Vec::new();
    for l in &m.layers {
        payload.extend_from_slice(&l.w);
        payload.extend_from_slice(&l.b);
    }
    let opt_header = if let Some(o) = opt {
        arrays.extend(grads_arrays("opt.m", m));
        arrays.extend(grads_arrays("opt.v", m));
        arrays.extend(grads_arrays("opt.ema", m));
        for g in [&o.m, &o.v] {
            for l in &g.layers {
                payload.extend_from_slice(&l.w);
                payload.extend_from_slice(&l.b);
            }
        }
        for l in &o.ema.layers {
            payload.extend_from_slice(&l.w);
            payload.extend_from_slice(&l.b);
        }
        Some(OptHeader {
            step: o.step,
            config: o.config,
        })
    } else {
        None
    };
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        role: m.role,
        in_dim: m.in_dim,
        hidden_dim: m.hidden_dim,
        out_dim: m.out_dim,
        n_layers: m.layers.len(),
        residual: m.residual,
        seed,
        config_hash: config_hash.into(),
        arrays,
        opt: opt_header,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(payload.len() * 8);
    for v in &payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse bytes written by [`save_bytes`].
pub fn load_bytes(bytes: &[u8]) -> Result<(Mlp, Option<OptState>, Header)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {VERSION})",
            header.version
        )));
    }
    let declared: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    let body = &bytes[newline + 1..];
    if body.len() != declared * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes but header declares {} values ({} bytes); file truncated or corrupt",
            body.len(),
            declared,
            declared * 8
        )));
    }
    let mut values = Vec::with_capacity(declared);
    for chunk in body.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
    }

    let mut cursor = 0usize;
    let mut take = |decl: &ArrayDecl| -> Vec<f64> {
        let n: usize = decl.shape.iter().product();
        let v = values[cursor..cursor + n].to_vec();
        cursor += n;
        v
    };

    let mut layers = Vec::with_capacity(header.n_layers);
    let mut idx = 0usize;
    for i in 0..header.n_layers {
        let wdecl = &header.arrays[idx];
        let bdecl = &header.arrays[idx + 1];
        if wdecl.name != format!("layer{i}.w") || wdecl.shape.len() != 2 {
            return Err(Error::Checkpoint(format!("unexpected array `{}`", wdecl.name)));
        }
        let (out_dim, in_dim) = (wdecl.shape[0], wdecl.shape[1]);
        let w = take(wdecl);
        let b = take(bdecl);
        layers.push(Linear { w, b, in_dim, out_dim });
        idx += 2;
    }
    let model = Mlp {
        role: header.role,
        layers,
        residual: header.residual,
        in_dim: header.in_dim,
        hidden_dim: header.hidden_dim,
        out_dim: header.out_dim,
    };
    model.validate()?;

    let opt = if let Some(oh) = &header.opt {
        let mut read_grads = || -> MlpGrads {
            let mut g = MlpGrads::zeros_like(&model);
            for l in &mut g.layers {
                let decl_w = &header.arrays[idx];
                l.w = take(decl_w);
                idx += 1;
                let decl_b = &header.arrays[idx];
                l.b = take(decl_b);
                idx += 1;
            }
            g
        };
        let m = read_grads();
        let v = read_grads();
        let mut ema = model.clone();
        for l in &mut ema.layers {
            let decl_w = &header.arrays[idx];
            l.w = take(decl_w);
            idx += 1;
            let decl_b = &header.arrays[idx];
            l.b = take(decl_b);
            idx += 1;
        }
        Some(OptState {
            config: oh.config,
            step: oh.step,
            m,
            v,
            ema,
        })
    } else {
        None
    };
    Ok((model, opt, header))
}

pub fn save_file(
    path: impl AsRef<Path>,
    m: &Mlp,
    opt: Option<&OptState>,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = save_bytes(m, opt, seed, config_hash)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_file(path: impl AsRef<Path>) -> Result<(Mlp, Option<OptState>, Header)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    load_bytes(&bytes)
}

/// Check a loaded model against the dims a config expects; the error names
/// the first mismatching layer.
pub fn expect_dims(m: &Mlp, in_dim: usize, hidden_dim: usize, out_dim: usize, n_layers: usize) -> Result<()> {
    if m.layers.len() != n_layers {
        return Err(Error::shape("checkpoint n_layers", n_layers, m.layers.len()));
    }
    for (i, l) in m.layers.iter().enumerate() {
        let (want_in, want_out) = if n_layers == 1 {
            (in_dim, out_dim)
        } else if i == 0 {
            (in_dim, hidden_dim)
        } else if i == n_layers - 1 {
            (hidden_dim, out_dim)
        } else {
            (hidden_dim, hidden_dim)
        };
        if l.in_dim != want_in || l.out_dim != want_out {
            return Err(Error::shape(
                format!("checkpoint layer{i}.w"),
                format!("{want_out}x{want_in}"),
                format!("{}x{}", l.out_dim, l.in_dim),
            ));
        }
    }
    Ok(())
}
