/// Dense NCHW tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[s * len..(s + 1) * len]
    }

    pub fn sample_mut(&mut self, s: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[s * len..(s + 1) * len]
    }

    #[inline]
    pub fn idx(&self, s: usize, ch: usize, y: usize, x: usize) -> usize {
        ((s * self.c + ch) * self.h + y) * self.w + x
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates along channels.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        let (la, lb) = (a.sample_len(), b.sample_len());
        for s in 0..a.n {
            let dst = out.sample_mut(s);
            dst[..la].copy_from_slice(a.sample(s));
            dst[la..la + lb].copy_from_slice(b.sample(s));
        }
        out
    }

    /// Splits channels into `[0, first)` and `[first, c)`.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let mut a = Tensor::zeros(self.n, first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - first, self.h, self.w);
        let la = a.sample_len();
        for s in 0..self.n {
            let src = self.sample(s);
            a.sample_mut(s).copy_from_slice(&src[..la]);
            b.sample_mut(s).copy_from_slice(&src[la..]);
        }
        (a, b)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn mm_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn mm_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c1 = vec![0.0; m * n];
        mm(&a, &b, &mut c1, m, k, n);
        let mut c2 = vec![0.0; m * n];
        mm_bt(&a, &transpose(&b, k, n), &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        mm_at(&transpose(&a, m, k), &b, &mut c3, m, k, n);
        for i in 0..m * n {
            assert!((c1[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_vec(2, 1, 2, 2, (0..8).map(|v| v as f64).collect());
        let b = Tensor::from_vec(2, 2, 2, 2, (0..16).map(|v| -(v as f64)).collect());
        let c = Tensor::concat_channels(&a, &b);
        let (a2, b2) = c.split_channels(1);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
