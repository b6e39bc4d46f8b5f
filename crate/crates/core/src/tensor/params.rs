use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named trainable tensors, addressed by [`ParamId`] in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push((name.into(), tensor.with_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Set every gradient to an explicit zero buffer.
    pub fn zero_grads(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    /// Add the parameter gradients recorded on `tape` into the stored grads.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            let t = &mut self.entries[id.0].1;
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Overwrite values from another store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::contract("parameter stores differ in length"));
        }
        for ((name, dst), (oname, src)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname || dst.shape() != src.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}` does not match `{oname}`"
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Serialize as CSV records `name,rows,cols,v0;v1;...` in registration order.
    pub fn to_checkpoint_csv(&self) -> String {
        let mut out = String::from("name,rows,cols,values\n");
        for (name, t) in &self.entries {
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!(
                "{name},{},{},{}\n",
                t.rows(),
                t.cols(),
                values.join(";")
            ));
        }
        out
    }

    pub fn from_checkpoint_csv(text: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Validation {
                file: "checkpoint".into(),
                line: lineno as u64 + 1,
                message: m.into(),
            };
            let fields: Vec<&str> = line.splitn(4, ',').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let rows: usize = fields[1].parse().map_err(|_| bad("bad row count"))?;
            let cols: usize = fields[2].parse().map_err(|_| bad("bad column count"))?;
            let values = fields[3]
                .split(';')
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("bad value"))?;
            store.add(fields[0], Tensor::new(rows, cols, values)?);
        }
        Ok(store)
    }
}
