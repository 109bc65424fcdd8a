//! Parameter checkpoint files.
//!
//! Layout: magic `EVNET1`, format version u16, entry count u16, then per
//! entry: name length u16 + UTF-8 name, dtype tag u8 (0=f32, 1=f64),
//! rank u8, dims as u32 each, raw little-endian values. All integers are
//! little-endian. Round-trips are bit-exact.

use super::NetworkGraph;
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"EVNET1";
const VERSION: u16 = 1;

pub fn save_checkpoint<T: Element>(net: &NetworkGraph<T>, path: &Path) -> Result<()> {
    let entries = net.param_tensors();
    if entries.len() > u16::MAX as usize {
        return Err(Error::Format("too many parameter tensors".into()));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(T::DTYPE as u8);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint into a network with a matching parameter set.
/// Every stored entry must match an existing tensor in name, dtype and
/// shape, and every network parameter must be present in the file.
pub fn load_checkpoint<T: Element>(net: &mut NetworkGraph<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    let magic = r.take(6)?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic: not an EVNET1 checkpoint".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u16()? as usize;
    let mut loaded: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = Dtype::from_tag(r.u8()?)?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "dtype mismatch for '{name}': file has {dtype:?}, network expects {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        loaded.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last checkpoint entry".into()));
    }

    let expected: Vec<(String, Vec<usize>)> = net
        .param_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected.len() != loaded.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, network has {}",
            loaded.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let t = loaded
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "shape mismatch for '{name}': file {:?}, network {:?}",
                t.shape(),
                shape
            )));
        }
    }
    for (slot, (name, _)) in net.param_tensors_mut().into_iter().zip(expected) {
        *slot = loaded.remove(&name).unwrap();
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{LayerKind, LayerSpec};

    fn small_net(seed: u64) -> NetworkGraph<f32> {
        NetworkGraph::new(
            &[2, 5, 5],
            vec![
                LayerSpec::new(
                    "c1",
                    LayerKind::Conv2d {
                        out_channels: 3,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                ),
                LayerSpec::new("r", LayerKind::Relu),
                LayerSpec::new("f", LayerKind::Flatten),
                LayerSpec::new("out", LayerKind::Dense { out_features: 1 }),
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.evnet");
        let net = small_net(11);
        save_checkpoint(&net, &path).unwrap();

        let mut other = small_net(999); // different init
        load_checkpoint(&mut other, &path).unwrap();
        for ((_, a), (_, b)) in net.param_tensors().iter().zip(other.param_tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.evnet");
        std::fs::write(&path, b"NOTNET-junk").unwrap();
        let mut net = small_net(1);
        assert!(matches!(load_checkpoint(&mut net, &path), Err(Error::Format(_))));

        // f64 net saved, f32 net loading -> dtype mismatch
        let p64 = dir.path().join("net64.evnet");
        let net64 = NetworkGraph::<f64>::new(
            &[2],
            vec![LayerSpec::new("out", LayerKind::Dense { out_features: 1 })],
            0,
        )
        .unwrap();
        save_checkpoint(&net64, &p64).unwrap();
        let mut net32 = NetworkGraph::<f32>::new(
            &[2],
            vec![LayerSpec::new("out", LayerKind::Dense { out_features: 1 })],
            0,
        )
        .unwrap();
        let err = load_checkpoint(&mut net32, &p64).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }
}
