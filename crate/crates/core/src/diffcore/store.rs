use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NDFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub value: Tensor,
    /// First-moment accumulator.
    pub m: Tensor,
    /// Second-moment accumulator.
    pub v: Tensor,
}

/// Named trainable tensors plus their optimizer state.
///
/// Slot order is insertion order and is part of the checkpoint format, so two
/// stores built by the same code are laid out identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let zeros = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.slots.len());
        self.slots.push(Slot {
            name,
            m: zeros.clone(),
            v: zeros,
            value,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.slots[i].value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replace a slot's value. The shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let slot = &mut self.slots[i];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("set", &[slot.value.shape(), value.shape()]));
        }
        slot.value = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(&mut self.slots[i].value)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [Slot] {
        &mut self.slots
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn increment_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|s| s.value.is_finite())
    }

    /// Checkpoint bytes: magic, format version, a JSON header with names and
    /// shapes, then every slot's value, first and second moments as raw
    /// little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            step: self.step,
            slots: self
                .slots
                .iter()
                .map(|s| SlotHeader {
                    name: s.name.clone(),
                    shape: s.value.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.slots.iter().map(|s| 3 * 8 * s.value.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for slot in &self.slots {
            for t in [&slot.value, &slot.m, &slot.v] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| bad(&format!("header: {e}")))?;

        let mut cursor = header_end;
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = cursor + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated payload"));
            }
            let data = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor = end;
            Tensor::new(shape.to_vec(), data).map_err(|e| bad(&e.to_string()))
        };

        let mut store = ParameterStore::new();
        for sh in &header.slots {
            let value = read_tensor(&sh.shape)?;
            let m = read_tensor(&sh.shape)?;
            let v = read_tensor(&sh.shape)?;
            store.insert(sh.name.clone(), value)?;
            let slot = store.slots.last_mut().unwrap();
            slot.m = m;
            slot.v = v;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        store.step = header.step;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    slots: Vec<SlotHeader>,
}

#[derive(Serialize, Deserialize)]
struct SlotHeader {
    name: String,
    shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        s.insert("b", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        s.slots_mut()[1].m = Tensor::vector(vec![1e-300, 2.0, -7.0]);
        s.increment_step();
        s
    }

    #[test]
    fn names_are_unique() {
        let mut s = sample_store();
        assert!(matches!(
            s.insert("a", Tensor::scalar(0.0)),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = sample_store();
        assert!(s.set("b", Tensor::vector(vec![1.0])).is_err());
        s.set("b", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.get("b").unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample_store();
        let bytes = s.to_bytes();
        let back = ParameterStore::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step(), 1);
        let a = back.get("a").unwrap().data();
        assert!(a[1].is_sign_negative());
        assert_eq!(a[2], f64::MIN_POSITIVE);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let mut bytes = sample_store().to_bytes();
        bytes.pop();
        assert!(ParameterStore::from_bytes(&bytes, Path::new("mem")).is_err());
        assert!(ParameterStore::from_bytes(b"garbage!", Path::new("mem")).is_err());
    }
}
