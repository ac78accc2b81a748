//! Named parameter storage and the per-pass binding of parameters to a tape.
//!
//! A `ParamStore` owns every learnable tensor (and non-learnable running
//! statistic) of a model under unique path-like names. A `Pass` wraps one
//! forward/backward episode: in train mode it watches each parameter on a
//! fresh tape exactly once and, after backward, folds the tape's leaf
//! gradients back into the store.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One named entry: a value buffer, its gradient accumulator, and whether the
/// optimizer may touch it (running statistics are stored non-trainable).
pub struct Param {
    pub shape: Vec<usize>,
    pub value: RefCell<Vec<f64>>,
    pub grad: RefCell<Vec<f64>>,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

const MAGIC: &[u8; 8] = b"PARAMS\x00\x01";

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        values: Vec<f64>,
        trainable: bool,
    ) -> Result<()> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::dim(format!(
                "parameter {name}: shape {shape:?} vs {} values",
                values.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                value: RefCell::new(values),
                grad: RefCell::new(vec![0.0; len]),
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.value.borrow().clone())
    }

    pub fn set_value(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let p = self.get(name)?;
        if values.len() != p.value.borrow().len() {
            return Err(Error::dim(format!(
                "parameter {name}: cannot assign {} values over {}",
                values.len(),
                p.value.borrow().len()
            )));
        }
        *p.value.borrow_mut() = values;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.grad.borrow_mut().fill(0.0);
        }
    }

    /// Total scalar count of trainable parameters, biases and norm
    /// scale/shift included.
    pub fn count_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.borrow().len())
            .sum()
    }

    /// Binary snapshot: magic, record count, then per record (sorted by name)
    /// name length/bytes, trainable flag, rank, extents, little-endian f64s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.borrow().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
        let bad = |msg: &str| Error::Parse {
            line: 0,
            message: format!("parameter file: {msg}"),
        };
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("bad magic or unsupported version"));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| bad("non-utf8 parameter name"))?;
            let trainable = take(1)?[0] != 0;
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            store.register(&name, &shape, values, trainable)?;
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }

    /// Copy all values from `other` into this store. The two stores must
    /// describe the same parameter set (same names, shapes, flags).
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        let mine: Vec<&str> = self.names().collect();
        let theirs: Vec<&str> = other.names().collect();
        if mine != theirs {
            return Err(Error::config(format!(
                "parameter sets differ: {} here vs {} in the checkpoint",
                mine.len(),
                theirs.len()
            )));
        }
        for (name, p) in other.iter() {
            let q = self.get(name)?;
            if q.shape != p.shape || q.trainable != p.trainable {
                return Err(Error::config(format!(
                    "parameter {name} differs in shape or kind from the checkpoint"
                )));
            }
            *q.value.borrow_mut() = p.value.borrow().clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ParamStore::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) episode against a store.
pub struct Pass<'s> {
    tape: Tape,
    store: &'s ParamStore,
    mode: Mode,
    bound: RefCell<HashMap<String, Tensor>>,
    rng: RefCell<Rng>,
    backward_done: Cell<bool>,
}

impl<'s> Pass<'s> {
    pub fn train(store: &'s ParamStore, rng: Rng) -> Pass<'s> {
        Pass {
            tape: Tape::new(),
            store,
            mode: Mode::Train,
            bound: RefCell::new(HashMap::new()),
            rng: RefCell::new(rng),
            backward_done: Cell::new(false),
        }
    }

    pub fn eval(store: &'s ParamStore) -> Pass<'s> {
        Pass {
            tape: Tape::new(),
            store,
            mode: Mode::Eval,
            bound: RefCell::new(HashMap::new()),
            rng: RefCell::new(Rng::new(0)),
            backward_done: Cell::new(false),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Fetch a parameter. In train mode the tensor is watched on the pass
    /// tape (once; later fetches return the same bound tensor) so gradients
    /// reach it. In eval mode it is a plain constant and records nothing.
    pub fn param(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name)?;
        let t = Tensor::from_vec(p.value.borrow().clone(), &p.shape)?;
        let t = if self.mode == Mode::Train && p.trainable {
            self.tape.watch(&t)
        } else {
            t
        };
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Read a non-trainable buffer (e.g. running statistics).
    pub fn buffer(&self, name: &str) -> Result<Vec<f64>> {
        self.store.value(name)
    }

    /// Overwrite a buffer; only meaningful during training.
    pub fn update_buffer(&self, name: &str, values: Vec<f64>) -> Result<()> {
        self.store.set_value(name, values)
    }

    /// Inverted dropout on rows of `x`. Identity in eval mode or at rate 0.
    pub fn dropout(&self, x: &Tensor, rate: f64) -> Result<Tensor> {
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x.clone());
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = 1.0 - rate;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(&Tensor::from_vec(mask, x.shape())?)
    }

    /// Backpropagate from `loss` and fold leaf gradients into the store.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if self.mode != Mode::Train {
            return Err(Error::contract("backward on an eval pass".to_string()));
        }
        if self.backward_done.replace(true) {
            return Err(Error::contract(
                "backward already ran for this pass".to_string(),
            ));
        }
        self.tape.backward(loss)?;
        for (name, t) in self.bound.borrow().iter() {
            if let Some(g) = self.tape.grad(t) {
                let p = self.store.get(name)?;
                let mut acc = p.grad.borrow_mut();
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
        }
        Ok(())
    }
}
