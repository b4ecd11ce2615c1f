//! Flat binary parameter files.
//!
//! Layout, little-endian: magic `DGPM`, u32 version, u8 kind (1 = MLP,
//! 2 = GCN), u64 seed, u32 layer count, then `(u32 inputs, u32 outputs)` per
//! layer, then every layer's weights followed by its bias as f32. A GCN's head
//! is stored as its last layer.

use std::io::{Read, Write};

use super::dense::Dense;
use super::{GcnParams, MlpParams, PruneError};

pub const PARAMS_MAGIC: &[u8; 4] = b"DGPM";
pub const PARAMS_VERSION: u32 = 1;
const KIND_MLP: u8 = 1;
const KIND_GCN: u8 = 2;
const MAX_LAYERS: u32 = 64;
const MAX_WIDTH: u32 = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum PruningParams {
    Mlp(MlpParams),
    Gcn(GcnParams),
}

impl PruningParams {
    fn parts(&self) -> (u8, u64, Vec<&Dense>) {
        match self {
            Self::Mlp(p) => (KIND_MLP, p.seed, vec![&p.hidden, &p.output]),
            Self::Gcn(p) => (
                KIND_GCN,
                p.seed,
                p.layers.iter().chain(p.head.as_ref()).collect(),
            ),
        }
    }
}

pub fn write_params<W: Write>(params: &PruningParams, mut w: W) -> Result<(), PruneError> {
    let (kind, seed, layers) = params.parts();
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in &layers {
        w.write_all(&(l.inputs as u32).to_le_bytes())?;
        w.write_all(&(l.outputs as u32).to_le_bytes())?;
    }
    let mut data = Vec::new();
    for l in &layers {
        l.push_params(&mut data);
    }
    for x in data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], PruneError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| PruneError::Format(format!("truncated header: {e}")))?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<PruningParams, PruneError> {
    if &read_array::<4, _>(&mut r)? != PARAMS_MAGIC {
        return Err(PruneError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != PARAMS_VERSION {
        return Err(PruneError::Format(format!("unsupported version {version}")));
    }
    let [kind] = read_array::<1, _>(&mut r)?;
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let count = u32::from_le_bytes(read_array(&mut r)?);
    if count > MAX_LAYERS {
        return Err(PruneError::Format(format!("{count} layers")));
    }
    let mut shapes = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let i = u32::from_le_bytes(read_array(&mut r)?);
        let o = u32::from_le_bytes(read_array(&mut r)?);
        if i == 0 || o == 0 || i > MAX_WIDTH || o > MAX_WIDTH {
            return Err(PruneError::Format(format!("layer shape {i}x{o}")));
        }
        shapes.push((i as usize, o as usize));
    }
    for w in shapes.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(PruneError::Format("layer widths do not chain".into()));
        }
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for &(i, o) in &shapes {
        let n = i * o + o;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| PruneError::Format(format!("truncated body: {e}")))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(PruneError::Format("non-finite parameter".into()));
        }
        layers.push(Dense::from_params(i, o, &data));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(PruneError::Format(format!("{} trailing bytes", rest.len())));
    }
    match kind {
        KIND_MLP => {
            let [hidden, output]: [Dense; 2] = layers
                .try_into()
                .map_err(|_| PruneError::Format("MLP needs exactly 2 layers".into()))?;
            if hidden.inputs != super::mlp::INPUT_WIDTH || output.outputs != 1 {
                return Err(PruneError::Format("MLP shape must be [2, H, 1]".into()));
            }
            Ok(PruningParams::Mlp(MlpParams {
                seed,
                hidden,
                output,
            }))
        }
        KIND_GCN => {
            let head = layers.pop();
            if let Some(h) = &head {
                if h.outputs != 1 {
                    return Err(PruneError::Format("GCN head must have one output".into()));
                }
            }
            match layers.first() {
                None if head.is_some() => {
                    return Err(PruneError::Format("GCN head without layers".into()))
                }
                Some(first) if first.inputs != super::gcn::FEATURE_WIDTH => {
                    return Err(PruneError::Format("GCN input width must be 2".into()))
                }
                _ => {}
            }
            Ok(PruningParams::Gcn(GcnParams { seed, layers, head }))
        }
        k => Err(PruneError::Format(format!("unknown kind {k}"))),
    }
}
