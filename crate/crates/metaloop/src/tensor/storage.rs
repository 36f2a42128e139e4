//! Value storage for recorded tensors: one flat buffer per node, either f32
//! or f64. A whole [`ComputationRecord`](super::ComputationRecord) runs in a
//! single precision, so binary kernels never see mixed storage.

use super::Precision;

/// Flat row-major element buffer.
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub fn precision(&self) -> Precision {
        match self {
            Storage::F32(_) => Precision::F32,
            Storage::F64(_) => Precision::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(precision: Precision, len: usize) -> Storage {
        match precision {
            Precision::F32 => Storage::F32(vec![0.0; len]),
            Precision::F64 => Storage::F64(vec![0.0; len]),
        }
    }

    /// Lossless widening view used by tests and reports.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    /// Build storage in `precision` from f64 values (narrowing for f32).
    pub fn from_f64_slice(precision: Precision, values: &[f64]) -> Storage {
        match precision {
            Precision::F32 => Storage::F32(values.iter().map(|&x| x as f32).collect()),
            Precision::F64 => Storage::F64(values.to_vec()),
        }
    }
}

/// Element type a kernel can be monomorphized over. The gemm hook dispatches
/// to the matching `matrixmultiply` kernel so conv/matmul share one code path
/// for both precisions.
pub trait Scalar: num_traits::Float + Copy + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(x: f64) -> Self;

    fn storage_from_vec(v: Vec<Self>) -> Storage;
    fn slice(storage: &Storage) -> &[Self];

    /// C ← alpha * op(A)·op(B) + beta * C, row-major with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn storage_from_vec(v: Vec<f32>) -> Storage {
        Storage::F32(v)
    }

    fn slice(storage: &Storage) -> &[f32] {
        match storage {
            Storage::F32(v) => v,
            Storage::F64(_) => unreachable!("record precision is fixed at construction"),
        }
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn storage_from_vec(v: Vec<f64>) -> Storage {
        Storage::F64(v)
    }

    fn slice(storage: &Storage) -> &[f64] {
        match storage {
            Storage::F64(v) => v,
            Storage::F32(_) => unreachable!("record precision is fixed at construction"),
        }
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
