//! Named learnable tensors, their gradient buffers, and the per-forward binding
//! of parameters onto a tape.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{a2t1_record_len, read_a2t1, write_a2t1, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Insertion-ordered map from dotted path (`stage2.block1.mass.gate.weight`)
/// to a learnable tensor and its gradient buffer.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let grad = Tensor::zeros(value.shape());
        let (idx, _) = self.entries.insert_full(name, Param { value, grad });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Applies `f` to every value whose name matches `pred`.
    pub fn fill_where(&mut self, pred: impl Fn(&str) -> bool, value: f64) {
        for (name, p) in self.entries.iter_mut() {
            if pred(name) {
                p.value.data_mut().fill(value);
            }
        }
    }

    /// Writes every value as consecutive A2T1 records into `<prefix>.a2t` and
    /// a JSON sidecar `<prefix>.index.json` with names, shapes and offsets.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let (data_path, index_path) = checkpoint_paths(prefix);
        let mut w = BufWriter::new(File::create(&data_path)?);
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            entries.push(IndexEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += write_a2t1(&mut w, &p.value)?;
        }
        w.flush()?;
        let index = CheckpointIndex {
            format: "A2T1".into(),
            entries,
        };
        let mut f = BufWriter::new(File::create(&index_path)?);
        serde_json::to_writer_pretty(&mut f, &index)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Loads values saved by [`ParameterStore::save`] into this store. Every
    /// stored parameter must already exist with the same shape.
    pub fn load(&mut self, prefix: &Path) -> Result<()> {
        let (data_path, index_path) = checkpoint_paths(prefix);
        let index: CheckpointIndex =
            serde_json::from_reader(BufReader::new(File::open(&index_path)?))?;
        if index.format != "A2T1" {
            return Err(Error::Format {
                offset: 0,
                detail: format!("sidecar declares format `{}`", index.format),
            });
        }
        let mut r = BufReader::new(File::open(&data_path)?);
        let mut offset = 0u64;
        for entry in &index.entries {
            if entry.offset != offset {
                return Err(Error::Format {
                    offset,
                    detail: format!(
                        "index places `{}` at {} but records are contiguous",
                        entry.name, entry.offset
                    ),
                });
            }
            let t = read_a2t1(&mut r, offset)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format {
                    offset,
                    detail: format!(
                        "record shape {:?} disagrees with index {:?}",
                        t.shape(),
                        entry.shape
                    ),
                });
            }
            let slot = self
                .by_name_mut(&entry.name)
                .ok_or_else(|| Error::UnknownParameter(entry.name.clone()))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format {
                    offset,
                    detail: format!(
                        "`{}` has shape {:?} in the model, {:?} on disk",
                        entry.name,
                        slot.shape(),
                        t.shape()
                    ),
                });
            }
            offset += a2t1_record_len(t.shape());
            *slot = t;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let base = prefix.as_os_str().to_string_lossy().into_owned();
    (
        PathBuf::from(format!("{base}.a2t")),
        PathBuf::from(format!("{base}.index.json")),
    )
}

/// Creates parameters under a dotted prefix with deterministic initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParameterStore,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParameterStore, rng: &'a mut SeededRng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value)
    }

    /// Truncated-normal weights with std 0.02.
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = self.rng.trunc_normal_tensor(shape, 0.02);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::ones(shape))
    }
}

/// Per-forward state: the tape, the parameters bound onto it, and the
/// train/eval switch with its drop-path random stream.
pub struct Ctx<'t> {
    tape: &'t Tape,
    store: Option<&'t ParameterStore>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    train: bool,
    rng: RefCell<SeededRng>,
}

impl<'t> Ctx<'t> {
    /// Evaluation mode: drop-path disabled.
    pub fn eval(tape: &'t Tape, store: &'t ParameterStore) -> Self {
        Self::new(tape, store, false, 0)
    }

    pub fn train(tape: &'t Tape, store: &'t ParameterStore, seed: u64) -> Self {
        Self::new(tape, store, true, seed)
    }

    fn new(tape: &'t Tape, store: &'t ParameterStore, train: bool, seed: u64) -> Self {
        Ctx {
            tape,
            store: Some(store),
            bound: RefCell::new(vec![None; store.len()]),
            train,
            rng: RefCell::new(SeededRng::new(seed)),
        }
    }

    /// Evaluation context whose parameters are exactly `vars`, indexed by
    /// [`ParamId`] order. Used to feed parameters from elsewhere, for example
    /// perturbed copies during finite-difference checks.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Ctx {
            tape,
            store: None,
            bound: RefCell::new(vars.into_iter().map(Some).collect()),
            train: false,
            rng: RefCell::new(SeededRng::new(0)),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// The parameter as a leaf on this tape, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        bound[id.0]
            .get_or_insert_with(|| {
                let store = self
                    .store
                    .expect("parameter neither bound nor backed by a store");
                self.tape.leaf(store.get(id).value.clone())
            })
            .clone()
    }

    /// Uses `var` for parameter `id` in this pass instead of a fresh leaf.
    pub fn bind(&self, id: ParamId, var: Var<'t>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    pub fn opt_param(&self, id: Option<ParamId>) -> Option<Var<'t>> {
        id.map(|id| self.param(id))
    }

    pub(crate) fn with_rng<R>(&self, f: impl FnOnce(&mut SeededRng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    /// Gradients of every parameter touched by this forward pass.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                v.as_ref()
                    .and_then(|v| grads.get(v))
                    .map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }

    /// Adds this pass's parameter gradients into the store's buffers.
    pub fn accumulate_into(&self, grads: &Grads, store: &mut ParameterStore) {
        for (id, g) in self.param_grads(grads) {
            store.get_mut(id).grad.add_assign(&g);
        }
    }
}
