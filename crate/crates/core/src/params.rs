//! Named parameter grids, tape binding and checkpoint files.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tape::{Tape, Var};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.rgrd";

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Named leaves that receive gradients.
    Trainable,
    /// Constants: same values, no gradient.
    Frozen,
}

/// Ordered map of named parameter grids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    map: BTreeMap<String, Grid<T>>,
}

/// Parameter name → tape node.
#[derive(Clone, Debug, Default)]
pub struct VarMap {
    map: BTreeMap<String, Var>,
}

impl VarMap {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not bound")))
    }

    pub fn insert(&mut self, name: &str, v: Var) {
        self.map.insert(name.to_string(), v);
    }

    pub fn extend(&mut self, other: VarMap) {
        self.map.extend(other.map);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, g: Grid<T>) {
        self.map.insert(name.to_string(), g);
    }

    pub fn get(&self, name: &str) -> Result<&Grid<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Grid<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Grid<T>)> {
        self.map.iter()
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.map.extend(other.map);
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.map.values().map(Grid::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Grid::is_finite)
    }

    /// Binds every parameter whose name starts with `prefix`.
    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str, how: Binding) -> Result<VarMap> {
        let mut out = VarMap::default();
        for (name, g) in self.map.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let v = match how {
                Binding::Trainable => tape.param(name, g.clone())?,
                Binding::Frozen => tape.constant(g.clone()),
            };
            out.insert(name, v);
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            params: self
                .map
                .iter()
                .map(|(n, g)| ManifestEntry { name: n.clone(), shape: g.shape().to_vec() })
                .collect(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        let mut out = BufWriter::new(std::fs::File::create(dir.join(PARAMS_FILE))?);
        for g in self.map.values() {
            g.write_to(&mut out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::Format(format!("missing checkpoint manifest {}", manifest_path.display())));
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let mut inp = BufReader::new(std::fs::File::open(dir.join(PARAMS_FILE))?);
        let mut map = BTreeMap::new();
        for e in manifest.params {
            let g = Grid::read_from(&mut inp)?;
            if g.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}`: manifest shape {:?}, stored {:?}",
                    e.name,
                    e.shape,
                    g.shape()
                )));
            }
            map.insert(e.name, g);
        }
        Ok(Self { map })
    }
}

/// Scaled-normal initializer for a conv or dense weight with `fan_in` inputs.
pub fn init_weight<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Grid<T> {
    let std = gain / (fan_in as f64).sqrt();
    Grid::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::<f64>::new();
        p.insert("b", Grid::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        p.insert("a", Grid::from_fn(&[2, 3], |i| i as f64 * 0.5));
        p.save(dir.path()).unwrap();
        assert_eq!(ParamStore::<f64>::load(dir.path()).unwrap(), p);
    }

    #[test]
    fn prefix_binding() {
        let mut p = ParamStore::<f64>::new();
        p.insert("head.w", Grid::zeros(&[1]));
        p.insert("style.w", Grid::zeros(&[1]));
        let mut t = Tape::new();
        let vm = p.bind(&mut t, "head.", Binding::Trainable).unwrap();
        assert!(vm.get("head.w").is_ok());
        assert!(vm.get("style.w").is_err());
    }
}
