//! Named parameter tensors and the structures that group them.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|_| dist.sample(rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }
}

/// Whether decoupled weight decay applies to the named tensor: every weight
/// matrix and embedding, but no bias and no LayerNorm scale/offset.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

#[doc(hidden)]
pub fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

/// Depth-first traversal over every learnable tensor in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|x| *x = value));
    }

    /// `self += other`, tensor by tensor. Both must share a layout.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.named_tensors();
        let mut i = 0;
        self.visit_mut("", &mut |_, t| {
            for (a, b) in t.data.iter_mut().zip(&src[i].1.data) {
                *a += b;
            }
            i += 1;
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|x| *x *= factor));
    }

    fn sum_squares(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, t| s += t.data.iter().map(|x| x * x).sum::<f64>());
        s
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.data.iter().all(|x| x.is_finite()));
        ok
    }
}

impl Parameters for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl Parameters for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), f); )+
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), f); )+
            }
        }
    };
}
pub(crate) use impl_parameters;

/// `y = x Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear { weight: Tensor::normal(&[d_out, d_in], std, rng), bias: Tensor::zeros(&[d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[0]
    }
}

impl_parameters!(Linear { weight, bias });

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm { gamma: Tensor::filled(&[d], 1.0), beta: Tensor::zeros(&[d]) }
    }
}

impl_parameters!(LayerNorm { gamma, beta });
