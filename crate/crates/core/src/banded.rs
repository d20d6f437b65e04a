//! Symmetric banded matrices: LDLᵀ factorization, solves, and the selected
//! inverse restricted to the band.

use nalgebra::{DMatrix, DVector};

/// Lower band of a symmetric `n × n` matrix with half-bandwidth `bw`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    bw: usize,
    /// Row `i`, offset `d = i - j` at `i * (bw + 1) + d`.
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        (i - j <= self.bw).then(|| i * (self.bw + 1) + (i - j))
    }

    /// Symmetric entry; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Add to `(i, j)` (and implicitly `(j, i)`).
    ///
    /// # Panics
    /// If `(i, j)` lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).unwrap_or_else(|| panic!("entry ({i}, {j}) outside bandwidth {}", self.bw));
        self.data[s] += v;
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.data[i * (self.bw + 1)])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `A + λ (diag(A) + I)`.
    pub fn damped(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        if lambda != 0.0 {
            for i in 0..self.n {
                out.data[i * (self.bw + 1)] += lambda * (self.data[i * (self.bw + 1)] + 1.0);
            }
        }
        out
    }

    /// LDLᵀ factorization; `None` when a pivot is not safely positive.
    pub fn ldlt(&self) -> Option<BandedLdlt> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        let mut d = vec![0.0; n];
        let mut t = vec![0.0; w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut v = self.data[i * w + (i - j)];
                for k in k0..j {
                    v -= t[i - k] * l[j * w + (j - k)];
                }
                let lij = v / d[j];
                l[i * w + (i - j)] = lij;
                t[i - j] = lij * d[j];
            }
            let mut dii = self.data[i * w];
            for j in j0..i {
                dii -= t[i - j] * l[i * w + (i - j)];
            }
            let scale = self.data[i * w].abs();
            if !(dii > 1e-13 * scale) || !dii.is_finite() {
                return None;
            }
            d[i] = dii;
            l[i * w] = 1.0;
        }
        Some(BandedLdlt { n, bw, l, d })
    }
}

/// `A = L D Lᵀ` with unit-lower banded `L`.
#[derive(Debug, Clone)]
pub struct BandedLdlt {
    n: usize,
    bw: usize,
    l: Vec<f64>,
    d: Vec<f64>,
}

impl BandedLdlt {
    fn lij(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + (i - j)]
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut x = b.clone();
        for i in 0..n {
            let mut v = x[i];
            for j in i.saturating_sub(bw)..i {
                v -= self.lij(i, j) * x[j];
            }
            x[i] = v;
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in i + 1..(i + bw + 1).min(n) {
                v -= self.lij(k, i) * x[k];
            }
            x[i] = v;
        }
        x
    }

    /// Entries of `A⁻¹` inside the band, by the backward recursion
    /// `Z_ij = δ_ij / d_i − Σ_{k>i} L_ki Z_kj`.
    pub fn selected_inverse(&self) -> BandedMatrix {
        let (n, bw) = (self.n, self.bw);
        let mut z = BandedMatrix::zeros(n, bw);
        for i in (0..n).rev() {
            let k_end = (i + bw + 1).min(n);
            for j in (i + 1..k_end).rev() {
                let mut v = 0.0;
                for k in i + 1..k_end {
                    v -= self.lij(k, i) * z.get(k, j);
                }
                let s = z.slot(j, i).unwrap();
                z.data[s] = v;
            }
            let mut v = 1.0 / self.d[i];
            for k in i + 1..k_end {
                v -= self.lij(k, i) * z.get(k, i);
            }
            let s = z.slot(i, i).unwrap();
            z.data[s] = v;
        }
        z
    }
}
