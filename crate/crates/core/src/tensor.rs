//! Dense NCHW tensors and the scalar trait the network is generic over.
//!
//! Training runs in `f32`; gradient checks instantiate the same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c <- alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(span(m, k, rsa, csa) <= a.len());
                debug_assert!(span(k, n, rsb, csb) <= b.len());
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                // SAFETY: the strided extents of all three operands were
                // checked against the slice lengths above (in debug builds)
                // and every caller in this crate passes contiguous buffers
                // sized exactly for the given dimensions.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Whether a row-major operand enters a product transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// Contiguous GEMM helper: `c (m×n) = alpha·op(a)·op(b) + beta·c` where `op`
/// optionally transposes a row-major operand.
#[allow(clippy::too_many_arguments)]
pub fn matmul<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    ta: Trans,
    b: &[R],
    tb: Trans,
    c: &mut [R],
    alpha: R,
    beta: R,
) {
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    R::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Batch of feature maps laid out `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![R::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    /// Rows of a `[n, features]` matrix stored as `[n, features, 1, 1]`.
    pub fn matrix(n: usize, features: usize, data: Vec<R>) -> Self {
        Self::from_vec(n, features, 1, 1, data)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[R] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [R] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    /// Stacks two batches along the sample axis.
    pub fn concat_batch(a: &Self, b: &Self) -> Self {
        assert_eq!(a.sample_len(), b.sample_len());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self {
            n: a.n + b.n,
            data,
            ..*a
        }
    }

    /// Splits a batch into the first `k` samples and the rest.
    pub fn split_batch(&self, k: usize) -> (Self, Self) {
        let cut = k * self.sample_len();
        (
            Self {
                n: k,
                data: self.data[..cut].to_vec(),
                ..*self
            },
            Self {
                n: self.n - k,
                data: self.data[cut..].to_vec(),
                ..*self
            },
        )
    }

    /// Concatenates along the channel axis (UNet skip connections).
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
        let (la, lb) = (a.sample_len(), b.sample_len());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n {
            data.extend_from_slice(&a.data[i * la..(i + 1) * la]);
            data.extend_from_slice(&b.data[i * lb..(i + 1) * lb]);
        }
        Self {
            n: a.n,
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `ca` channels and the rest.
    pub fn split_channels(&self, ca: usize) -> (Self, Self) {
        let plane = self.plane();
        let (la, lb) = (ca * plane, (self.c - ca) * plane);
        let mut a = Vec::with_capacity(self.n * la);
        let mut b = Vec::with_capacity(self.n * lb);
        for s in self.data.chunks(la + lb) {
            a.extend_from_slice(&s[..la]);
            b.extend_from_slice(&s[la..]);
        }
        (
            Self::from_vec(self.n, ca, self.h, self.w, a),
            Self::from_vec(self.n, self.c - ca, self.h, self.w, b),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
