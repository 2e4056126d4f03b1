use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamSource, Real, Tape, Tensor, Var};

/// Identity of one trainable tensor. Copies of a handle refer to the same storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamHandle(usize);

impl ParamHandle {
    pub fn index(self) -> usize {
        self.0
    }

    /// The tape site for this parameter.
    pub fn on<T: Real>(self, tape: &mut Tape<'_, T>) -> Var {
        tape.param(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitRule {
    /// Uniform on `±sqrt(6 / fan_in)`, i.e. variance `2 / fan_in`.
    KaimingUniform {
        fan_in: usize,
    },
    Zeros,
    Constant(f64),
}

/// A conv kernel `[Cout, Cin, k, k]` read in transposed orientation: it maps
/// `Cout` channels back to `Cin` through `conv_transpose2d`. Owns no storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TiedView {
    source: ParamHandle,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl TiedView {
    pub fn source(&self) -> ParamHandle {
        self.source
    }

    /// Channels consumed by the transposed conv (the source's `Cout`).
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Channels produced by the transposed conv (the source's `Cin`).
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }
}

struct Entry<T> {
    name: String,
    value: Tensor<T>,
}

/// Registry of named parameters with one gradient buffer per storage.
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
    grads: RefCell<Vec<Tensor<T>>>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    /// Initialization draws come from a stream seeded by `seed`, in registration order.
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
            grads: RefCell::new(Vec::new()),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: InitRule) -> Result<ParamHandle> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let value = match init {
            InitRule::KaimingUniform { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::invalid("register_param", "fan_in must be positive"));
                }
                let bound = (6.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
            }
            InitRule::Zeros => Tensor::zeros(shape),
            InitRule::Constant(c) => Tensor::full(shape, T::of(c)),
        };
        let id = self.entries.len();
        self.grads.get_mut().push(Tensor::zeros(shape));
        self.entries.push(Entry { name: name.to_string(), value });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamHandle(id))
    }

    /// Another site for an existing parameter. Adds no storage.
    pub fn share(&self, handle: ParamHandle) -> ParamHandle {
        debug_assert!(handle.0 < self.entries.len());
        handle
    }

    pub fn tie_transposed(&self, source: ParamHandle) -> Result<TiedView> {
        let shape = self.value(source).shape();
        match *shape {
            [cout, cin, k, k2] if k == k2 => Ok(TiedView { source, in_channels: cout, out_channels: cin, kernel: k }),
            _ => Err(Error::shape(
                "tie_transposed",
                format!("`{}` has shape {shape:?}, expected a square 4-D conv kernel", self.name(source)),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn handles(&self) -> impl Iterator<Item = ParamHandle> {
        (0..self.entries.len()).map(ParamHandle)
    }

    pub fn get(&self, name: &str) -> Option<ParamHandle> {
        self.by_name.get(name).copied().map(ParamHandle)
    }

    pub fn name(&self, h: ParamHandle) -> &str {
        &self.entries[h.0].name
    }

    pub fn value(&self, h: ParamHandle) -> &Tensor<T> {
        &self.entries[h.0].value
    }

    pub fn value_mut(&mut self, h: ParamHandle) -> &mut Tensor<T> {
        &mut self.entries[h.0].value
    }

    pub fn grad(&self, h: ParamHandle) -> Ref<'_, Tensor<T>> {
        Ref::map(self.grads.borrow(), |g| &g[h.0])
    }

    /// Value and gradient of one parameter, mutable value. Used by optimizers.
    pub fn value_and_grad_mut(&mut self, h: ParamHandle) -> (&mut Tensor<T>, &Tensor<T>) {
        (&mut self.entries[h.0].value, &self.grads.get_mut()[h.0])
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.get_mut() {
            g.fill(T::zero());
        }
    }

    /// Trainable scalar count; every storage counted once.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::invalid("restore", "snapshot size does not match registry"));
        }
        for (e, v) in self.entries.iter().zip(snapshot) {
            if e.value.shape() != v.shape() {
                return Err(Error::shape("restore", format!("`{}`: {:?} vs {:?}", e.name, e.value.shape(), v.shape())));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            e.value = v.clone();
        }
        Ok(())
    }
}

impl<T: Real> ParamSource<T> for ParamStore<T> {
    fn param_value(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].value
    }

    fn accumulate_grad(&self, id: usize, grad: &Tensor<T>) {
        self.grads.borrow_mut()[id].add_assign(grad);
    }

    fn param_name(&self, id: usize) -> &str {
        &self.entries[id].name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_allocates_and_rejects_duplicates() {
        let mut store = ParamStore::<f32>::new(0);
        let h = store.register("head.weight", &[1, 16, 1, 1], InitRule::KaimingUniform { fan_in: 16 }).unwrap();
        assert_eq!(store.value(h).len(), 16);
        let err = store.register("head.weight", &[1], InitRule::Zeros).unwrap_err();
        assert!(matches!(err, Error::DuplicateParam(n) if n == "head.weight"));
    }

    #[test]
    fn kaiming_variance_tracks_fan_in() {
        let fan_in = 8 * 3 * 3;
        let target = 2.0 / fan_in as f64;
        for seed in 0..10 {
            let mut store = ParamStore::<f64>::new(seed);
            let h = store.register("k", &[8, 8, 3, 3], InitRule::KaimingUniform { fan_in }).unwrap();
            let d = store.value(h).data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            assert!(var < 3.0 * target && var > target / 3.0, "seed {seed}: var {var}, target {target}");
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut s = ParamStore::<f32>::new(42);
            s.register("a", &[4, 2, 3, 3], InitRule::KaimingUniform { fan_in: 18 }).unwrap();
            s.register("b", &[3, 3], InitRule::KaimingUniform { fan_in: 3 }).unwrap();
            s.snapshot()
        };
        let (a, b) = (build(), build());
        for (x, y) in a.iter().zip(&b) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn tie_rejects_non_conv_sources() {
        let mut store = ParamStore::<f32>::new(0);
        let flat = store.register("bias", &[8], InitRule::Zeros).unwrap();
        assert!(store.tie_transposed(flat).is_err());
        let k = store.register("k", &[8, 4, 3, 3], InitRule::Zeros).unwrap();
        let view = store.tie_transposed(k).unwrap();
        assert_eq!((view.in_channels(), view.out_channels(), view.kernel()), (8, 4, 3));
    }

    #[test]
    fn restore_rejects_wrong_shapes() {
        let mut store = ParamStore::<f32>::new(0);
        store.register("a", &[2], InitRule::Zeros).unwrap();
        assert!(store.restore(&[Tensor::zeros(&[3])]).is_err());
        store.restore(&[Tensor::full(&[2], 1.0)]).unwrap();
        assert_eq!(store.value(ParamHandle(0)).data(), &[1.0, 1.0]);
    }
}
