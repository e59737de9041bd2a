//! Deterministic compensated summation.
//!
//! All energy and norm accumulations in the crate go through the Neumaier
//! accumulator in this module. Sums are evaluated in a fixed order (index
//! order, or fixed-size chunks folded in chunk order), so results are
//! bit-identical across runs and thread counts.

/// Neumaier compensated accumulator.
///
/// Improves on plain Kahan summation by compensating correctly when the
/// incoming term is larger than the running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct Accumulator {
    sum: f64,
    compensation: f64,
}

impl Accumulator {
    /// Fresh accumulator at zero.
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one term.
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Folds another accumulator into this one, preserving both
    /// compensation terms.
    #[inline]
    pub fn merge(&mut self, other: Accumulator) {
        self.add(other.sum);
        self.compensation += other.compensation;
    }

    /// Final compensated value.
    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Chunk length for the fixed-chunk reduction. Chosen once so that the
/// summation tree never depends on thread count or data length parity.
const CHUNK: usize = 4096;

/// Compensated sum of a slice in fixed chunk order.
pub fn sum(values: &[f64]) -> f64 {
    let mut total = Accumulator::new();
    for chunk in values.chunks(CHUNK) {
        let mut acc = Accumulator::new();
        for &v in chunk {
            acc.add(v);
        }
        total.merge(acc);
    }
    total.value()
}

/// Compensated sum of an iterator, in iteration order.
pub fn sum_iter(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Accumulator::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Compensated dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = Accumulator::new();
    let mut ai = a.chunks(CHUNK);
    let mut bi = b.chunks(CHUNK);
    loop {
        match (ai.next(), bi.next()) {
            (Some(ca), Some(cb)) => {
                let mut acc = Accumulator::new();
                for (&x, &y) in ca.iter().zip(cb) {
                    acc.add(x * y);
                }
                total.merge(acc);
            }
            _ => break,
        }
    }
    total.value()
}

/// Compensated squared Euclidean norm.
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
