//! Named parameter storage shared by all model families.
//!
//! Parameters live outside any tape; each forward pass binds them as leaves
//! on demand. The store has two modes: `Alloc` materializes initialized
//! tensors, `CountOnly` records shapes alone so full-scale configurations can
//! be sized without allocating gigabytes. Both modes run the same builder
//! code, which keeps symbolic parameter counts equal to real allocations by
//! construction.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Positional index; optimizer state and gradient sets are stored
    /// parallel to the store's entry order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// `None` in count-only stores.
    pub value: Option<Tensor>,
    pub frozen: bool,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    Alloc,
    CountOnly,
}

/// Flat, ordered collection of named parameters.
#[derive(Debug)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    mode: StoreMode,
}

impl ParamStore {
    pub fn new(mode: StoreMode) -> ParamStore {
        ParamStore { entries: Vec::new(), mode }
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total element count across all parameters, frozen or not.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.entries[id.0]
            .value
            .as_ref()
            .expect("parameter value accessed in count-only store")
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if value.shape != entry.shape {
            return Err(Error::shape(
                "param_store",
                format!("{}: {:?} vs {:?}", entry.name, value.shape, entry.shape),
            ));
        }
        entry.value = Some(value);
        Ok(())
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freeze (or unfreeze) every parameter whose name starts with `selector`,
    /// or all of them for the selector `"all"`. Errors when nothing matches.
    pub fn freeze_matching(&mut self, selector: &str, frozen: bool) -> Result<usize> {
        let mut hits = 0;
        for e in &mut self.entries {
            if selector == "all" || e.name.starts_with(selector) {
                e.frozen = frozen;
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(Error::UnknownSelector(selector.to_string()));
        }
        Ok(hits)
    }

    /// Overwrite a parameter's value by canonical name; shape-checked.
    pub fn assign_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::CheckpointIncompatible(format!("no parameter named '{name}'")))?;
        if self.entries[idx].shape != value.shape {
            return Err(Error::CheckpointIncompatible(format!(
                "parameter '{name}' has shape {:?}, checkpoint provides {:?}",
                self.entries[idx].shape, value.shape
            )));
        }
        self.entries[idx].value = Some(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

/// Weight initialization recipes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    Const(f64),
    /// LSTM gate bias `[4h]` in gate order (i, f, g, o) with the forget
    /// segment set to 1.0 and the rest zero.
    ForgetBias,
}

/// Builds parameters with hierarchical names ("encoder.layer2.fwd.w_ih").
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    scope: Vec<String>,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> ParamBuilder<'a> {
        ParamBuilder { store, scope: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder) -> R) -> R {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.scope.join("."), name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let numel: usize = shape.iter().product();
        let value = match self.store.mode {
            StoreMode::CountOnly => None,
            StoreMode::Alloc => Some(match init {
                Init::Uniform(a) => Tensor {
                    shape: shape.to_vec(),
                    data: (0..numel).map(|_| self.rng.gen_range(-a..=a)).collect(),
                },
                Init::Const(c) => Tensor::full(shape, c),
                Init::ForgetBias => {
                    debug_assert_eq!(shape.len(), 1);
                    debug_assert_eq!(shape[0] % 4, 0);
                    let h = shape[0] / 4;
                    let mut data = vec![0.0; shape[0]];
                    data[h..2 * h].fill(1.0);
                    Tensor { shape: shape.to_vec(), data }
                }
            }),
        };
        self.store.entries.push(ParamEntry {
            name: self.full_name(name),
            shape: shape.to_vec(),
            value,
            frozen: false,
        });
        ParamId(self.store.entries.len() - 1)
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn mode(&self) -> StoreMode {
        self.store.mode
    }
}

/// Per-pass forward context: a tape plus lazy parameter bindings, the
/// training flag, and the dropout RNG for this step.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub training: bool,
    rng: ChaCha8Rng,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, training: bool, rng_seed: u64) -> Fwd<'a> {
        let bound = vec![None; store.len()];
        Fwd { tape, store, bound, training, rng: ChaCha8Rng::seed_from_u64(rng_seed) }
    }

    /// Inference-mode context over a tape whose parameter bindings persist
    /// across calls, so decode sessions leaf each parameter once.
    pub fn resume(tape: &'a mut Tape, store: &'a ParamStore, mut bound: Vec<Option<Var>>) -> Fwd<'a> {
        bound.resize(store.len(), None);
        Fwd { tape, store, bound, training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn into_bindings(self) -> Vec<Option<Var>> {
        self.bound
    }

    /// Pre-bind a parameter to an existing tape var, overriding the store
    /// value. Used by gradient checks to route layer parameters through
    /// externally controlled leaves.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    /// Bind a parameter as a tape leaf (cached per context). Frozen params
    /// and inference passes bind without gradient tracking.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let requires = self.training && !entry.frozen;
        let var = self.tape.leaf(
            entry.value.as_ref().expect("forward pass on count-only store").clone(),
            requires,
        );
        self.bound[id.0] = Some(var);
        var
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. Identity when `p == 0` or not training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        if p == 0.0 || !self.training {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.tape.constant(Tensor { shape, data });
        self.tape.mul(x, mask)
    }

    /// Gradients per parameter id after `tape.backward`; `None` for params
    /// never bound, frozen, or unreached.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|v| self.tape.grad(v)))
            .collect()
    }
}

/// Gradient-check a layer through its [`ParamStore`] parameters: the listed
/// params and the extra inputs are all treated as differentiable leaves and
/// compared against central differences. `f` sees the inputs only; params
/// resolve through the bound overrides.
pub fn grad_check_store<F>(
    store: &ParamStore,
    ids: &[ParamId],
    inputs: &[Tensor],
    step: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Fwd, &[Var]) -> Result<Var>,
{
    let mut points: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
    points.extend(inputs.iter().cloned());
    crate::tensor::grad_check_multi(
        |tape, vars| {
            let mut fwd = Fwd::new(tape, store, true, 0);
            for (i, &id) in ids.iter().enumerate() {
                fwd.bind(id, vars[i]);
            }
            f(&mut fwd, &vars[ids.len()..])
        },
        &points,
        step,
    )
}
