use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::Scalar;
use crate::rng::Rng;

/// Offsets beyond `±REL_WINDOW` share the outermost relative-position bias.
pub const REL_WINDOW: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock<T> {
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    /// Attention-logit bias per clipped key offset `j - i`, `2·REL_WINDOW + 1`.
    pub rel_pos: Array1<T>,
}

/// Every trainable tensor of the classifier. Maps are stored `out × in` and
/// applied as `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Token embeddings, `V × d`. Empty for precomputed encoders.
    pub embed: Array2<T>,
    /// Learned positions, `(L_max + 1) × d`. Empty for precomputed encoders.
    pub pos: Array2<T>,
    pub attn: Option<AttentionBlock<T>>,
    /// Sentence map applied to the start-sentinel state.
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    /// Entity map shared by both pooled spans.
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    /// Relation matrix, `|R| × 3d`.
    pub rel: Array2<T>,
    pub rel_bias: Array1<T>,
}

/// Shape of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub dim: usize,
    pub relations: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub lite: bool,
}

fn uniform<T: Scalar>(rows: usize, cols: usize, range: f64, rng: &mut Rng) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.gen_range(-range..range)).unwrap())
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(d: Dims) -> Self {
        let sq = || Array2::zeros((d.dim, d.dim));
        let v = || Array1::zeros(d.dim);
        ModelParams {
            embed: Array2::zeros((if d.lite { d.vocab } else { 0 }, d.dim)),
            pos: Array2::zeros((if d.lite { d.max_len + 1 } else { 0 }, d.dim)),
            attn: d.lite.then(|| AttentionBlock {
                wq: sq(),
                bq: v(),
                wk: sq(),
                bk: v(),
                wv: sq(),
                bv: v(),
                wo: sq(),
                bo: v(),
                rel_pos: Array1::zeros(2 * REL_WINDOW + 1),
            }),
            w1: sq(),
            b1: v(),
            w2: sq(),
            b2: v(),
            rel: Array2::zeros((d.relations, 3 * d.dim)),
            rel_bias: Array1::zeros(d.relations),
        }
    }

    /// Uniform(-range, range) for tables and maps, zero biases.
    pub fn init(d: Dims, range: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(d);
        let mut fill = |a: &mut Array2<T>| *a = uniform(a.nrows(), a.ncols(), range, rng);
        fill(&mut p.embed);
        fill(&mut p.pos);
        if let Some(b) = p.attn.as_mut() {
            fill(&mut b.wq);
            fill(&mut b.wk);
            fill(&mut b.wv);
            fill(&mut b.wo);
        }
        fill(&mut p.w1);
        fill(&mut p.w2);
        fill(&mut p.rel);
        p
    }

    pub fn dims(&self) -> Dims {
        Dims {
            dim: self.w1.nrows(),
            relations: self.rel.nrows(),
            vocab: self.embed.nrows(),
            max_len: self.pos.nrows().saturating_sub(1),
            lite: self.attn.is_some(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    /// Tensors in declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> =
            vec![("embed", self.embed.as_slice().unwrap()), ("pos", self.pos.as_slice().unwrap())];
        if let Some(b) = &self.attn {
            out.extend([
                ("wq", b.wq.as_slice().unwrap()),
                ("bq", b.bq.as_slice().unwrap()),
                ("wk", b.wk.as_slice().unwrap()),
                ("bk", b.bk.as_slice().unwrap()),
                ("wv", b.wv.as_slice().unwrap()),
                ("bv", b.bv.as_slice().unwrap()),
                ("wo", b.wo.as_slice().unwrap()),
                ("bo", b.bo.as_slice().unwrap()),
                ("rel_pos", b.rel_pos.as_slice().unwrap()),
            ]);
        }
        out.extend([
            ("w1", self.w1.as_slice().unwrap()),
            ("b1", self.b1.as_slice().unwrap()),
            ("w2", self.w2.as_slice().unwrap()),
            ("b2", self.b2.as_slice().unwrap()),
            ("rel", self.rel.as_slice().unwrap()),
            ("rel_bias", self.rel_bias.as_slice().unwrap()),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> =
            vec![("embed", self.embed.as_slice_mut().unwrap()), ("pos", self.pos.as_slice_mut().unwrap())];
        if let Some(b) = &mut self.attn {
            out.extend([
                ("wq", b.wq.as_slice_mut().unwrap()),
                ("bq", b.bq.as_slice_mut().unwrap()),
                ("wk", b.wk.as_slice_mut().unwrap()),
                ("bk", b.bk.as_slice_mut().unwrap()),
                ("wv", b.wv.as_slice_mut().unwrap()),
                ("bv", b.bv.as_slice_mut().unwrap()),
                ("wo", b.wo.as_slice_mut().unwrap()),
                ("bo", b.bo.as_slice_mut().unwrap()),
                ("rel_pos", b.rel_pos.as_slice_mut().unwrap()),
            ]);
        }
        out.extend([
            ("w1", self.w1.as_slice_mut().unwrap()),
            ("b1", self.b1.as_slice_mut().unwrap()),
            ("w2", self.w2.as_slice_mut().unwrap()),
            ("b2", self.b2.as_slice_mut().unwrap()),
            ("rel", self.rel.as_slice_mut().unwrap()),
            ("rel_bias", self.rel_bias.as_slice_mut().unwrap()),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }

    /// Euclidean norm over all tensors.
    pub fn norm(&self) -> T {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn scale(&mut self, by: T) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= by);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.dims());
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64().unwrap()).unwrap();
            }
        }
        out
    }
}
