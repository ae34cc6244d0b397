//! Ordered data-parallel map used by batch training and evaluation.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it the same closures run sequentially. Either way results come
//! back in input order, so any reduction done over them afterwards has a
//! fixed summation order and is bit-reproducible.

/// Execution strategy for per-item work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Executor {
    Sequential,
    #[default]
    Auto,
}

impl Executor {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Executor::Sequential => map_sequential(items, f),
            Executor::Auto => map_ordered(items, f),
        }
    }
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_sequential(items, f)
}

/// Element-wise sum of per-item gradient lists, folded in item order so the
/// result does not depend on how the items were scheduled.
pub fn sum_in_order(items: impl IntoIterator<Item = Vec<Vec<f64>>>) -> Option<Vec<Vec<f64>>> {
    let mut it = items.into_iter();
    let mut acc = it.next()?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_executors_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Executor::Sequential.map(&xs, |x| x * x);
        let b = Executor::Auto.map(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[999], 999 * 999);
    }
}
