//! Named flat parameter groups shared by the optimizer and the tape.

use crate::diff::Tensor;
use crate::error::{domain, Result};

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub lr_mult: f64,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.clone())
    }
}

/// Ordered collection of parameter groups; names are unique and iteration
/// order is insertion order (determinism matters downstream).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>, lr_mult: f64) -> usize {
        assert!(self.index_of(name).is_none(), "duplicate parameter group {name}");
        assert_eq!(data.len(), rows * cols);
        self.groups.push(ParamGroup {
            name: name.to_string(),
            data,
            rows,
            cols,
            lr_mult,
            trainable: true,
        });
        self.groups.len() - 1
    }

    pub fn remove(&mut self, name: &str) {
        self.groups.retain(|g| g.name != name);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn get(&self, name: &str) -> &ParamGroup {
        self.groups.iter().find(|g| g.name == name).unwrap_or_else(|| panic!("no parameter group {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamGroup {
        self.groups.iter_mut().find(|g| g.name == name).unwrap_or_else(|| panic!("no parameter group {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamGroup> {
        self.groups.iter()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, idx: usize) -> &ParamGroup {
        &self.groups[idx]
    }

    pub fn group_mut(&mut self, idx: usize) -> &mut ParamGroup {
        &mut self.groups[idx]
    }

    /// Rebuilds a group's rows as `rows[i] = old rows[mapping[i]]`.
    /// Used by densify/prune/anneal events; the caller must apply the same
    /// mapping to the optimizer state.
    pub fn reindex_rows(&mut self, name: &str, mapping: &[usize]) -> Result<()> {
        let g = self.get_mut(name);
        let c = g.cols;
        let mut data = Vec::with_capacity(mapping.len() * c);
        for &i in mapping {
            if i >= g.rows {
                return Err(domain(format!("reindex_rows: row {i} out of range for {name}")));
            }
            data.extend_from_slice(&g.data[i * c..(i + 1) * c]);
        }
        g.data = data;
        g.rows = mapping.len();
        Ok(())
    }
}
