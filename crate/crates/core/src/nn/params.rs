//! Named parameter tensors owned by one network.

use alloc::string::String;
use alloc::vec::Vec;

use super::NnError;

/// Identifies a parameter: the owning store's group and its slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: u32,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    group: u32,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new(group: u32) -> Self {
        Self { group, entries: Vec::new() }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "parameter {name}");
        self.entries.push(ParamEntry { name: name.into(), shape: shape.to_vec(), values });
        ParamId { group: self.group, index: (self.entries.len() - 1) as u32 }
    }

    fn entry(&self, id: ParamId) -> &ParamEntry {
        assert_eq!(id.group, self.group, "parameter from another store");
        &self.entries[id.index as usize]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entry(id).values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        assert_eq!(id.group, self.group, "parameter from another store");
        &mut self.entries[id.index as usize].values
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entry(id).shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len() as u32).map(move |index| ParamId { group: self.group, index })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Replaces every parameter, in order. Names and shapes must match.
    pub fn load(&mut self, entries: &[ParamEntry]) -> Result<(), NnError> {
        if entries.len() != self.entries.len() {
            return Err(NnError::Checkpoint(alloc::format!("{} blocks, expected {}", entries.len(), self.entries.len())));
        }
        for (dst, src) in self.entries.iter().zip(entries) {
            if dst.name != src.name || dst.shape != src.shape || src.values.len() != dst.values.len() {
                return Err(NnError::Checkpoint(alloc::format!(
                    "block {} {:?} does not match {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
        }
        for (dst, src) in self.entries.iter_mut().zip(entries) {
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &d in &e.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for v in &e.values {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.values.iter().all(|v| v.is_finite()))
    }
}
