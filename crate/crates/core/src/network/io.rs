//! Model files: `OXYMODEL` magic, version, scalar width, input bands,
//! flags, layer table, parameter and buffer counts, values, CRC32 trailer.
//! All integers and floats are little-endian.

use std::path::Path;

use super::{plan, LayerSpec, Network, NetworkSpec};
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 8] = b"OXYMODEL";
pub const MODEL_VERSION: u32 = 1;
const HEADER_BYTES: usize = 28;
const LAYER_BYTES: usize = 20;
const COUNT_BYTES: usize = 16;

/// Exact size in bytes of the file written for `spec` at the given scalar
/// width.
pub fn model_file_size(spec: &NetworkSpec, scalar_bytes: usize) -> Result<usize> {
    let (_, _, _, _, params, buffers) = plan(spec)?;
    Ok(HEADER_BYTES + LAYER_BYTES * spec.layers.len() + COUNT_BYTES + (params + buffers) * scalar_bytes + 4)
}

fn layer_entry(l: &LayerSpec) -> (u32, u32, u32, f64) {
    match *l {
        LayerSpec::Dense { units } => (1, units as u32, 0, 0.0),
        LayerSpec::Conv1d { channels, kernel } => (2, channels as u32, kernel as u32, 0.0),
        LayerSpec::Relu => (3, 0, 0, 0.0),
        LayerSpec::BatchNorm => (4, 0, 0, 0.0),
        LayerSpec::Dropout { rate } => (5, 0, 0, rate),
    }
}

fn parse_entry(kind: u32, a: u32, b: u32, rate: f64) -> Result<LayerSpec> {
    Ok(match kind {
        1 => LayerSpec::Dense { units: a as usize },
        2 => LayerSpec::Conv1d { channels: a as usize, kernel: b as usize },
        3 => LayerSpec::Relu,
        4 => LayerSpec::BatchNorm,
        5 => LayerSpec::Dropout { rate },
        _ => return Err(FormatError::Invalid(format!("layer kind {kind}")).into()),
    })
}

pub fn encode_model<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let spec = net.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    for v in [MODEL_VERSION, T::BYTES as u32, spec.input_bands as u32, spec.discriminator as u32, spec.layers.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &spec.layers {
        let (k, a, b, r) = layer_entry(l);
        for v in [k, a, b] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    out.extend_from_slice(&(net.buffers.len() as u64).to_le_bytes());
    net.params.iter().chain(&net.buffers).for_each(|v| v.write_le(&mut out));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            return Err(FormatError::Length { found: bytes.len(), expected: n }.into());
        }
        Ok(())
    };
    need(HEADER_BYTES + 4)?;
    if &bytes[..8] != MODEL_MAGIC {
        return Err(FormatError::BadMagic { expected: "OXYMODEL" }.into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != MODEL_VERSION {
        return Err(FormatError::Version { found: version, expected: MODEL_VERSION }.into());
    }
    let width = u32_at(12);
    if width as usize != T::BYTES {
        return Err(FormatError::ScalarWidth { found: width, expected: T::BYTES as u32 }.into());
    }
    let input_bands = u32_at(16) as usize;
    let flags = u32_at(20);
    if flags > 1 {
        return Err(FormatError::Invalid(format!("flags {flags:#x}")).into());
    }
    let n_layers = u32_at(24) as usize;
    let table_end = n_layers
        .checked_mul(LAYER_BYTES)
        .and_then(|t| t.checked_add(HEADER_BYTES))
        .ok_or_else(|| FormatError::Invalid("layer count overflows".into()))?;
    need(table_end + COUNT_BYTES + 4)?;
    let layers = (0..n_layers)
        .map(|i| {
            let o = HEADER_BYTES + i * LAYER_BYTES;
            let rate = f64::from_le_bytes(bytes[o + 12..o + 20].try_into().unwrap());
            parse_entry(u32_at(o), u32_at(o + 4), u32_at(o + 8), rate)
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec { input_bands, layers, discriminator: flags & 1 == 1 };
    let expected = model_file_size(&spec, T::BYTES).map_err(|e| FormatError::Topology(e.to_string()))?;
    if bytes.len() != expected {
        return Err(FormatError::Length { found: bytes.len(), expected }.into());
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let mut net = Network::<T>::new(&spec, 0)?;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    if u64_at(table_end) != net.params.len() || u64_at(table_end + 8) != net.buffers.len() {
        return Err(FormatError::Topology("parameter counts do not match the layer table".into()).into());
    }
    let mut values = bytes[table_end + COUNT_BYTES..expected - 4].chunks_exact(T::BYTES).map(T::read_le);
    net.params.iter_mut().chain(net.buffers.iter_mut()).for_each(|p| *p = values.next().unwrap());
    Ok(net)
}

pub fn save_model<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(net))?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Network<T>> {
    decode_model(&std::fs::read(path)?)
}

/// Loads a model and checks that its topology is `spec`.
pub fn load_model_with_spec<T: Scalar>(path: &Path, spec: &NetworkSpec) -> Result<Network<T>> {
    let net = load_model::<T>(path)?;
    if net.spec() != spec {
        return Err(Error::Format(FormatError::Topology(format!(
            "file holds {} layers over {} bands (discriminator: {}), expected {} layers over {} bands (discriminator: {})",
            net.spec().layers.len(),
            net.spec().input_bands,
            net.spec().discriminator,
            spec.layers.len(),
            spec.input_bands,
            spec.discriminator
        ))));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn trained_like(spec: &NetworkSpec) -> Network<f32> {
        let mut net = Network::<f32>::new(spec, 9).unwrap();
        let mut rng = rng_from_seed(2);
        net.buffers.iter_mut().for_each(|b| *b = rng.gen_range(0.5..2.0));
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for spec in [NetworkSpec::fcn(16), NetworkSpec::cnn(16).with_discriminator(true)] {
            let net = trained_like(&spec);
            let back = decode_model::<f32>(&encode_model(&net)).unwrap();
            assert_eq!(back, net);
            let mut rng = rng_from_seed(3);
            let probe: Vec<f32> = (0..16 * 10).map(|_| rng.gen()).collect();
            let a = net.predict(&probe, 10).unwrap();
            let b = back.predict(&probe, 10).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn fcn_file_size() {
        let bytes = encode_model(&trained_like(&NetworkSpec::fcn(16)));
        assert_eq!(bytes.len(), 28 + 12 * 20 + 16 + (43_585 + 896) * 4 + 4);
        assert_eq!(model_file_size(&NetworkSpec::fcn(16), 4).unwrap(), bytes.len());
    }

    #[test]
    fn topology_and_corruption_errors() {
        let dir = std::env::temp_dir().join(format!("oxyspec-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fcn.model");
        save_model(&trained_like(&NetworkSpec::fcn(16)), &path).unwrap();
        let err = load_model_with_spec::<f32>(&path, &NetworkSpec::cnn(16)).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Topology(_))));
        assert!(matches!(load_model::<f64>(&path), Err(Error::Format(FormatError::ScalarWidth { .. }))));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1000] ^= 0x10;
        assert!(matches!(decode_model::<f32>(&bytes), Err(Error::Format(FormatError::Checksum { .. }))));
        bytes[0] = b'X';
        assert!(matches!(decode_model::<f32>(&bytes), Err(Error::Format(FormatError::BadMagic { .. }))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
