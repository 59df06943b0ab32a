//! Binary checkpoint format.
//!
//! ```text
//! "DIGA1"
//! u32 num_classes, u32 feature_dim, u32 feature_stride, u32 input_h, u32 input_w
//! u32 layer_count, then per layer: u32 cin, u32 cout, u32 kernel, u32 stride
//! u64 param_count
//! f32 × param_count   student
//! f32 × param_count   teacher
//! u8 has_bank; if 1: u32 C, u32 D, f32 × C·D centroids, ceil(C/8) presence bytes (LSB first)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::layers::ConvShape;
use super::{Architecture, ModelPair};
use crate::centroids::CentroidBank;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 5] = b"DIGA1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub pair: ModelPair<f32>,
    pub bank: Option<CentroidBank>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let arch = &ckpt.pair.arch;
    let mut buf = Vec::with_capacity(16 + 8 * arch.param_count());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, arch.num_classes);
    put_u32(&mut buf, arch.feature_dim);
    put_u32(&mut buf, arch.feature_stride);
    put_u32(&mut buf, arch.input_size.0);
    put_u32(&mut buf, arch.input_size.1);
    put_u32(&mut buf, arch.layers.len());
    for l in &arch.layers {
        put_u32(&mut buf, l.cin);
        put_u32(&mut buf, l.cout);
        put_u32(&mut buf, l.kernel);
        put_u32(&mut buf, l.stride);
    }
    buf.extend_from_slice(&(arch.param_count() as u64).to_le_bytes());
    for v in ckpt.pair.student.iter().chain(&ckpt.pair.teacher) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match &ckpt.bank {
        None => buf.push(0),
        Some(bank) => {
            buf.push(1);
            put_u32(&mut buf, bank.num_classes());
            put_u32(&mut buf, bank.dim());
            for v in &bank.rho {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let mut bits = vec![0u8; bank.num_classes().div_ceil(8)];
            for (k, &p) in bank.present.iter().enumerate() {
                if p {
                    bits[k / 8] |= 1 << (k % 8);
                }
            }
            buf.extend_from_slice(&bits);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err("bad magic".into());
    }
    let num_classes = r.u32()?;
    let feature_dim = r.u32()?;
    let feature_stride = r.u32()?;
    let input_size = (r.u32()?, r.u32()?);
    if !feature_stride.is_power_of_two() || num_classes == 0 || feature_dim == 0 {
        return Err("invalid layout header".into());
    }
    let arch = Architecture::new(num_classes, feature_dim, feature_stride, input_size);
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(ConvShape {
            cin: r.u32()?,
            cout: r.u32()?,
            kernel: r.u32()?,
            stride: r.u32()?,
        });
    }
    if layers != arch.layers {
        return Err("layer descriptor does not match the architecture".into());
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(format!("parameter count {count} != {}", arch.param_count()));
    }
    let student = r.f32s(count)?;
    let teacher = r.f32s(count)?;
    let bank = match r.take(1)?[0] {
        0 => None,
        1 => {
            let c = r.u32()?;
            let d = r.u32()?;
            let rho = r.f32s(c * d)?;
            let bits = r.take(c.div_ceil(8))?;
            let present = (0..c).map(|k| bits[k / 8] & (1 << (k % 8)) != 0).collect();
            Some(CentroidBank::from_parts(c, d, rho, present).map_err(|e| e.to_string())?)
        }
        other => return Err(format!("bad bank flag {other}")),
    };
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(Checkpoint {
        pair: ModelPair {
            arch,
            student,
            teacher,
        },
        bank,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::load(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::model::init_pair;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut pair = init_pair(&TrainConfig::default(), 4);
        pair.teacher[3] = f32::from_bits(0x3f80_0001);
        pair.student[0] = -0.0;
        let bank = CentroidBank::from_parts(
            6,
            16,
            (0..96).map(|i| i as f32 * 0.1).collect(),
            vec![true, false, true, true, false, true],
        )
        .unwrap();
        for bank in [None, Some(bank)] {
            let ck = Checkpoint {
                pair: pair.clone(),
                bank,
            };
            let bytes = encode(&ck);
            assert_eq!(&bytes[..5], b"DIGA1");
            let back = decode(&bytes).unwrap();
            assert_eq!(encode(&back), bytes);
            for (a, b) in back.pair.student.iter().zip(&ck.pair.student) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(back.bank, ck.bank);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint {
            pair: init_pair(&TrainConfig::default(), 1),
            bank: None,
        };
        let bytes = encode(&ck);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
