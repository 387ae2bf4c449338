//! Flat parameter/gradient storage with a named tensor manifest.
//!
//! Every layer registers its tensors during construction and holds the
//! returned `ParamId`s; values and gradients live in two flat vectors so the
//! optimizer and checkpoint code can treat the model as one array.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2, ArrayViewD, ArrayViewMut1, ArrayViewMutD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use relit_core::{CoreError, Result};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Gaussian with std = gain / sqrt(fan_in).
    ScaledNormal { fan_in: usize, gain: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    data: Vec<T>,
    grad: Vec<T>,
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { data: Vec::new(), grad: Vec::new(), entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat_n(T::zero(), len)),
            Init::Constant(c) => self.data.extend(std::iter::repeat_n(T::from_f64(c), len)),
            Init::ScaledNormal { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                // Draw in f64 so f32 and f64 stores built from the same seed
                // hold the same values up to rounding.
                self.data.extend(
                    (0..len).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std)),
                );
            }
        }
        self.grad.extend(std::iter::repeat_n(T::zero(), len));
        let index = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), offset, shape: shape.to_vec() });
        self.by_name.insert(name.to_string(), index);
        ParamId(index)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.shape.iter().product::<usize>()
    }

    pub fn value(&self, id: ParamId) -> ArrayViewD<'_, T> {
        let e = &self.entries[id.0];
        ArrayViewD::from_shape(IxDyn(&e.shape), &self.data[self.range(id)]).unwrap()
    }

    pub fn value1(&self, id: ParamId) -> ArrayView1<'_, T> {
        let e = &self.entries[id.0];
        assert_eq!(e.shape.len(), 1, "{} is not rank 1", e.name);
        ArrayView1::from_shape(e.shape[0], &self.data[self.range(id)]).unwrap()
    }

    pub fn value2(&self, id: ParamId) -> ArrayView2<'_, T> {
        let e = &self.entries[id.0];
        assert_eq!(e.shape.len(), 2, "{} is not rank 2", e.name);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &self.data[self.range(id)]).unwrap()
    }

    pub fn value4(&self, id: ParamId) -> ndarray::ArrayView4<'_, T> {
        let e = &self.entries[id.0];
        assert_eq!(e.shape.len(), 4, "{} is not rank 4", e.name);
        ndarray::ArrayView4::from_shape(
            (e.shape[0], e.shape[1], e.shape[2], e.shape[3]),
            &self.data[self.range(id)],
        )
        .unwrap()
    }

    pub fn grad_view(&self, id: ParamId) -> ArrayViewD<'_, T> {
        let e = &self.entries[id.0];
        ArrayViewD::from_shape(IxDyn(&e.shape), &self.grad[self.range(id)]).unwrap()
    }

    pub fn grad_mut1(&mut self, id: ParamId) -> ArrayViewMut1<'_, T> {
        let e = self.entries[id.0].clone();
        assert_eq!(e.shape.len(), 1);
        let range = e.offset..e.offset + e.shape[0];
        ArrayViewMut1::from_shape(e.shape[0], &mut self.grad[range]).unwrap()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> ArrayViewMutD<'_, T> {
        let e = self.entries[id.0].clone();
        let range = e.offset..e.offset + e.shape.iter().product::<usize>();
        ArrayViewMutD::from_shape(IxDyn(&e.shape), &mut self.grad[range]).unwrap()
    }

    /// Add `g` into the gradient of `id` (shapes must match).
    pub fn accumulate_grad(&mut self, id: ParamId, g: &ArrayViewD<'_, T>) {
        let range = self.range(id);
        let dst = &mut self.grad[range];
        assert_eq!(dst.len(), g.len(), "gradient size mismatch");
        for (d, s) in dst.iter_mut().zip(g.iter()) {
            *d = *d + *s;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    /// Copy tensors from `src` by name. Every `src` tensor must exist here
    /// with the same shape; tensors absent from `src` (newly added modules)
    /// keep their initialization. Returns how many tensors were loaded.
    pub fn load_from(&mut self, src: &ParamStore<T>) -> Result<usize> {
        let mut loaded = 0;
        for e in &src.entries {
            let idx = *self.by_name.get(&e.name).ok_or_else(|| {
                CoreError::Config(format!("checkpoint tensor {:?} has no slot in this model", e.name))
            })?;
            let dst = self.entries[idx].clone();
            if dst.shape != e.shape {
                return Err(CoreError::Shape(format!(
                    "tensor {:?}: checkpoint shape {:?} vs model shape {:?}",
                    e.name, e.shape, dst.shape
                )));
            }
            let n: usize = e.shape.iter().product();
            let (do_, so) = (dst.offset, e.offset);
            self.data[do_..do_ + n].copy_from_slice(&src.data[so..so + n]);
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Convert the store to another scalar type (used to run the f32 model
    /// under f64 for gradient checking).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: vec![U::zero(); self.grad.len()],
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn register_and_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let w = store.register("w", &[3, 4], Init::ScaledNormal { fan_in: 4, gain: 1.0 }, &mut rng);
        let b = store.register("b", &[3], Init::Zeros, &mut rng);
        assert_eq!(store.len(), 15);
        assert_eq!(store.value2(w).dim(), (3, 4));
        assert!(store.value1(b).iter().all(|v| *v == 0.0));
        assert_eq!(store.id_by_name("w"), Some(w));
    }

    #[test]
    fn grad_accumulation_and_reset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let b = store.register("b", &[2], Init::Constant(1.5), &mut rng);
        {
            let mut g = store.grad_mut1(b);
            g[0] += 2.0;
            g[1] += 3.0;
        }
        {
            let mut g = store.grad_mut1(b);
            g[0] += 1.0;
        }
        assert_eq!(store.grad(), &[3.0, 3.0]);
        store.zero_grad();
        assert_eq!(store.grad(), &[0.0, 0.0]);
    }

    #[test]
    fn load_by_name_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f32>::new();
        a.register("x", &[2, 2], Init::Constant(2.0), &mut rng);
        let mut b = ParamStore::<f32>::new();
        b.register("x", &[2, 2], Init::Zeros, &mut rng);
        b.register("extra", &[3], Init::Constant(7.0), &mut rng);
        let loaded = b.load_from(&a).unwrap();
        assert_eq!(loaded, 1);
        assert!(b.value2(b.id_by_name("x").unwrap()).iter().all(|v| *v == 2.0));
        assert!(b.value1(b.id_by_name("extra").unwrap()).iter().all(|v| *v == 7.0));
        // Mismatched direction: `a` lacks a slot for "extra".
        assert!(a.load_from(&b).is_err());
    }

    #[test]
    fn same_seed_same_init_across_scalar_types() {
        let mut rng32 = ChaCha8Rng::seed_from_u64(9);
        let mut rng64 = ChaCha8Rng::seed_from_u64(9);
        let mut s32 = ParamStore::<f32>::new();
        let mut s64 = ParamStore::<f64>::new();
        s32.register("w", &[4, 4], Init::ScaledNormal { fan_in: 4, gain: 1.4 }, &mut rng32);
        s64.register("w", &[4, 4], Init::ScaledNormal { fan_in: 4, gain: 1.4 }, &mut rng64);
        for (a, b) in s32.data().iter().zip(s64.data().iter()) {
            assert_eq!(*a, *b as f32);
        }
    }
}
