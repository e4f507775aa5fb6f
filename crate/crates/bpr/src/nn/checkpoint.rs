//! Network checkpoint persistence.
//!
//! Little-endian binary layout:
//! magic `BPRW`, version `u32`, role tag (`u8` length + UTF-8), layer
//! count `u32`, then per layer a dim pair (`u32` in, `u32` out) and a
//! flags byte (layer norm, spectral norm, activation), followed by all
//! parameters as row-major `f32`: weight, bias, layer-norm gain/shift and
//! power-iteration vectors where present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2};

use super::{Activation, DenseNet, Layer, LayerNorm, SpectralState};
use crate::error::{BprError, Result};

pub const MAGIC: &[u8; 4] = b"BPRW";
pub const VERSION: u32 = 1;

pub fn save(net: &DenseNet, role: &str, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let role_bytes = role.as_bytes();
    assert!(role_bytes.len() <= u8::MAX as usize, "role tag too long");
    w.write_u8(role_bytes.len() as u8)?;
    w.write_all(role_bytes)?;
    w.write_u32::<LittleEndian>(net.layers.len() as u32)?;
    for layer in &net.layers {
        w.write_u32::<LittleEndian>(layer.in_dim() as u32)?;
        w.write_u32::<LittleEndian>(layer.out_dim() as u32)?;
        let mut flags = layer.activation.code() << 2;
        if layer.layer_norm.is_some() {
            flags |= 0b01;
        }
        if layer.spectral.is_some() {
            flags |= 0b10;
        }
        w.write_u8(flags)?;
    }
    for layer in &net.layers {
        write_f32s(&mut w, layer.weight.iter())?;
        write_f32s(&mut w, layer.bias.iter())?;
        if let Some(ln) = &layer.layer_norm {
            write_f32s(&mut w, ln.gain.iter())?;
            write_f32s(&mut w, ln.shift.iter())?;
        }
        if let Some(s) = &layer.spectral {
            write_f32s(&mut w, s.u.iter())?;
            write_f32s(&mut w, s.v.iter())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint, returning the network and its role tag.
pub fn load(path: &Path) -> Result<(DenseNet, String)> {
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut r = Tracking {
        inner: BufReader::new(file),
        offset: 0,
        total,
    };

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic)?;
    if &magic != MAGIC {
        return Err(BprError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(BprError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let role_len = r.u8()? as usize;
    let mut role_bytes = vec![0u8; role_len];
    r.read_exact_at(&mut role_bytes)?;
    let role = String::from_utf8(role_bytes).map_err(|e| BprError::Format {
        offset: r.offset,
        message: format!("role tag not UTF-8: {e}"),
    })?;

    let n_layers = r.u32()? as usize;
    let mut headers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let flags = r.u8()?;
        headers.push((in_dim, out_dim, flags));
    }

    let mut layers = Vec::with_capacity(n_layers);
    for &(in_dim, out_dim, flags) in &headers {
        let activation = Activation::from_code(flags >> 2)?;
        let weight = r.f32_matrix(out_dim, in_dim)?;
        let bias = r.f32_matrix(1, out_dim)?;
        let layer_norm = if flags & 0b01 != 0 {
            Some(LayerNorm {
                gain: r.f32_matrix(1, out_dim)?,
                shift: r.f32_matrix(1, out_dim)?,
            })
        } else {
            None
        };
        let spectral = if flags & 0b10 != 0 {
            Some(SpectralState {
                u: r.f32_vector(out_dim)?,
                v: r.f32_vector(in_dim)?,
            })
        } else {
            None
        };
        layers.push(Layer {
            weight,
            bias,
            activation,
            layer_norm,
            spectral,
        });
    }

    let input_dim = layers.first().map(|l| l.in_dim()).unwrap_or(0);
    let output_dim = layers.last().map(|l| l.out_dim()).unwrap_or(0);
    Ok((
        DenseNet {
            layers,
            input_dim,
            output_dim,
        },
        role,
    ))
}

fn write_f32s<'a, W: Write>(w: &mut W, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

struct Tracking<R> {
    inner: R,
    offset: u64,
    total: u64,
}

impl<R: Read> Tracking<R> {
    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<()> {
        let need = buf.len() as u64;
        if self.offset + need > self.total {
            return Err(BprError::Format {
                offset: self.offset,
                message: format!(
                    "truncated: need {} bytes at offset {}, file has {}",
                    need, self.offset, self.total
                ),
            });
        }
        self.inner.read_exact(buf)?;
        self.offset += need;
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((rows, cols));
        let mut buf = vec![0u8; rows * cols * 4];
        self.read_exact_at(&mut buf)?;
        for (slot, chunk) in out.iter_mut().zip(buf.chunks_exact(4)) {
            *slot = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        Ok(out)
    }

    fn f32_vector(&mut self, len: usize) -> Result<Array1<f64>> {
        Ok(self.f32_matrix(1, len)?.row(0).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roundtrip_net(spec: NetSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(3, &[8, 8], 2, spec, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bprw");
        save(&net, "policy", &path).unwrap();
        let (loaded, role) = load(&path).unwrap();
        assert_eq!(role, "policy");
        assert_eq!(loaded.layers.len(), net.layers.len());
        for (a, b) in loaded.layers.iter().zip(&net.layers) {
            assert_eq!(a.activation, b.activation);
            // values survive modulo the f32 storage width
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // a second save of the loaded net is byte-identical
        let path2 = dir.path().join("net2.bprw");
        save(&loaded, "policy", &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn roundtrip_all_variants() {
        roundtrip_net(NetSpec::plain());
        roundtrip_net(NetSpec::layer_normed());
        roundtrip_net(NetSpec::normalized());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bprw");
        std::fs::write(&path, b"NOPE0000").unwrap();
        match load(&path) {
            Err(BprError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenseNet::new(2, &[4], 1, NetSpec::plain(), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bprw");
        save(&net, "", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load(&path) {
            Err(BprError::UnsupportedVersion { found, supported }) => {
                assert_eq!(found, 9);
                assert_eq!(supported, VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_names_expected_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::new(2, &[4], 1, NetSpec::plain(), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bprw");
        save(&net, "critic[0]", &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match load(&path) {
            Err(BprError::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
