//! Scalar abstraction and the lock-free shared vector used for Hogwild
//! parameter access.
//!
//! All numeric code in this crate is generic over [`Scalar`]. Shared
//! parameter storage additionally needs word-atomic element access, which
//! [`AtomicScalar`] provides by bit-casting through the platform atomics.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use num_traits::{Float, NumAssign};

/// Floating-point scalar usable throughout the crate.
pub trait Scalar:
    Float + NumAssign + Sum + Send + Sync + Debug + Display + 'static
{
    /// Lossless-enough conversion from `f64` for constants and config values.
    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 conversion")
    }

    fn to_f64(self) -> f64 {
        num_traits::cast::<Self, f64>(self).expect("f64 cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Scalar with a word-atomic storage cell. Reads and writes use relaxed
/// ordering: the Hogwild contract guarantees no torn elements and nothing
/// about cross-element ordering.
pub trait AtomicScalar: Scalar {
    type Atomic: Send + Sync;

    fn atomic_new(v: Self) -> Self::Atomic;
    fn atomic_load(a: &Self::Atomic) -> Self;
    fn atomic_store(a: &Self::Atomic, v: Self);
}

impl AtomicScalar for f32 {
    type Atomic = AtomicU32;

    fn atomic_new(v: Self) -> Self::Atomic {
        AtomicU32::new(v.to_bits())
    }

    fn atomic_load(a: &Self::Atomic) -> Self {
        f32::from_bits(a.load(Ordering::Relaxed))
    }

    fn atomic_store(a: &Self::Atomic, v: Self) {
        a.store(v.to_bits(), Ordering::Relaxed)
    }
}

impl AtomicScalar for f64 {
    type Atomic = AtomicU64;

    fn atomic_new(v: Self) -> Self::Atomic {
        AtomicU64::new(v.to_bits())
    }

    fn atomic_load(a: &Self::Atomic) -> Self {
        f64::from_bits(a.load(Ordering::Relaxed))
    }

    fn atomic_store(a: &Self::Atomic, v: Self) {
        a.store(v.to_bits(), Ordering::Relaxed)
    }
}

/// Flat vector shared between threads without locking.
///
/// Every element is an atomic word; concurrent readers and writers never
/// observe torn values, but read-modify-write sequences may lose updates.
/// That is exactly the Hogwild contract.
pub struct HogwildVec<T: AtomicScalar> {
    cells: Box<[T::Atomic]>,
}

impl<T: AtomicScalar> HogwildVec<T> {
    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![T::zero(); len])
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        Self {
            cells: values.into_iter().map(T::atomic_new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> T {
        T::atomic_load(&self.cells[i])
    }

    #[inline]
    pub fn set(&self, i: usize, v: T) {
        T::atomic_store(&self.cells[i], v)
    }

    /// Element-by-element copy of the current contents. Concurrent writers
    /// may interleave; each element is individually consistent.
    pub fn snapshot(&self) -> Vec<T> {
        self.cells.iter().map(|c| T::atomic_load(c)).collect()
    }

    pub fn snapshot_range(&self, start: usize, end: usize) -> Vec<T> {
        self.cells[start..end].iter().map(|c| T::atomic_load(c)).collect()
    }

    pub fn fill_from(&self, values: &[T]) {
        assert_eq!(values.len(), self.len());
        for (c, &v) in self.cells.iter().zip(values) {
            T::atomic_store(c, v);
        }
    }
}
