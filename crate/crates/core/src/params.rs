//! Named groups of parameter tensors and their tape bindings.

/// Declares a struct of parameter tensors plus a mirror struct holding the
/// [`Var`](crate::autodiff::Var) each tensor is bound to on a tape.
macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident / $vars:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<F> {
            $(pub $field: $crate::autodiff::Tensor<F>,)+
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: $crate::autodiff::Var,)+
        }

        impl<F: $crate::autodiff::Scalar> $name<F> {
            pub fn bind(&self, tape: &mut $crate::autodiff::Tape<F>) -> $vars {
                $vars { $($field: tape.leaf(&self.$field),)+ }
            }

            pub fn tensors(&self) -> Vec<(&'static str, &$crate::autodiff::Tensor<F>)> {
                vec![$((stringify!($field), &self.$field),)+]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut $crate::autodiff::Tensor<F>)> {
                vec![$((stringify!($field), &mut self.$field),)+]
            }

            pub fn cast<G: $crate::autodiff::Scalar>(&self) -> $name<G> {
                $name { $($field: self.$field.cast(),)+ }
            }
        }

        impl $vars {
            pub fn vars(&self) -> Vec<$crate::autodiff::Var> {
                vec![$(self.$field,)+]
            }

            pub fn vars_mut(&mut self) -> Vec<&mut $crate::autodiff::Var> {
                vec![$(&mut self.$field,)+]
            }
        }
    };
}

pub(crate) use param_group;

use crate::autodiff::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal<F: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| F::cst(dist.sample(rng)))
}
