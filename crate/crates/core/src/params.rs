//! Named-tensor traversal shared by the optimizer, checkpoints and gradient
//! checks. Every trainable struct lists its tensors in a fixed order.

use ndarray::{ArrayBase, DataMut, Dimension};

pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, data| n += data.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit("", &mut |_, _, data| out.extend_from_slice(data));
        out
    }

    fn fill_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, _, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat vector length does not match parameter count");
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, _, data| data.iter_mut().for_each(|v| *v *= factor));
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut("", &mut |_, _, data| {
            for v in data.iter_mut() {
                *v += flat[offset];
                offset += 1;
            }
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visits a single standard-layout array.
pub(crate) fn visit_array<S, D>(arr: &ArrayBase<S, D>, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]))
where
    S: ndarray::Data<Elem = f64>,
    D: Dimension,
{
    f(name, arr.shape(), arr.as_slice().expect("parameter arrays are contiguous"));
}

pub(crate) fn visit_array_mut<S, D>(arr: &mut ArrayBase<S, D>, name: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]))
where
    S: DataMut<Elem = f64>,
    D: Dimension,
{
    let shape = arr.shape().to_vec();
    f(name, &shape, arr.as_slice_mut().expect("parameter arrays are contiguous"));
}

/// Implements [`ParamSet`] for a struct by listing its fields.
macro_rules! param_set {
    ($ty:ty { arrays: [$($arr:ident),* $(,)?] $(, nested: [$($sub:ident),* $(,)?])? }) => {
        impl $crate::params::ParamSet for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
                $( $crate::params::visit_array(&self.$arr, &$crate::params::join(prefix, stringify!($arr)), f); )*
                $($( self.$sub.visit(&$crate::params::join(prefix, stringify!($sub)), f); )*)?
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
                $( $crate::params::visit_array_mut(&mut self.$arr, &$crate::params::join(prefix, stringify!($arr)), f); )*
                $($( self.$sub.visit_mut(&$crate::params::join(prefix, stringify!($sub)), f); )*)?
            }
        }
    };
}
pub(crate) use param_set;

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
