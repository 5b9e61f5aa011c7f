//! Binary pixel masks and the exact Euclidean distance transform used
//! for shape-aware mask interpolation.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// A binary H x W plane. Semantics (keep vs inpaint vs foreground) are
/// the call site's business; this type only stores set/unset pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask { h, w, data: vec![0; h * w] }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        BinaryMask { h, w, data: vec![1; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(u8::from(f(y, x)));
            }
        }
        BinaryMask { h, w, data }
    }

    /// Validates a `[1,H,W]` (or `[H,W]`) tensor with exact {0,1}
    /// entries.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, TensorError> {
        let (h, w) = match t.shape() {
            [1, h, w] => (*h, *w),
            [h, w] => (*h, *w),
            s => {
                return Err(TensorError::shape(
                    "binary_mask",
                    format!("want [1,H,W] or [H,W], got {:?}", s),
                ))
            }
        };
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == T::zero() {
                data.push(0);
            } else if v == T::one() {
                data.push(1);
            } else {
                return Err(TensorError::invalid("binary_mask", format!("non-binary value {v}")));
            }
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect();
        Tensor::new(vec![1, self.h, self.w], data).expect("mask dims")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = u8::from(v);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn complement(&self) -> Self {
        BinaryMask { h: self.h, w: self.w, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    pub fn union(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a | b).collect(),
        }
    }

    pub fn intersect(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a & b).collect(),
        }
    }

    /// Morphological dilation with a Chebyshev (square) structuring
    /// element of the given radius.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let mut out = BinaryMask::zeros(self.h, self.w);
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0
                            && nx >= 0
                            && ny < self.h as isize
                            && nx < self.w as isize
                            && self.get(ny as usize, nx as usize)
                        {
                            out.set(y as usize, x as usize, true);
                            break 'scan;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Signed Euclidean distance field over pixel centers: negative inside
/// the set region, positive outside, never zero (magnitude >= 1).
pub fn signed_distance_field(mask: &BinaryMask) -> Vec<f64> {
    let outside = distance_squared_to_set(mask);
    let inside = distance_squared_to_set(&mask.complement());
    outside
        .iter()
        .zip(&inside)
        .map(|(&o, &i)| if o > 0.0 { o.sqrt() } else { -(i.sqrt()) })
        .collect()
}

/// Squared Euclidean distance from every pixel to the nearest set
/// pixel (0 on set pixels), via the two-pass lower-envelope transform.
fn distance_squared_to_set(mask: &BinaryMask) -> Vec<f64> {
    const INF: f64 = 1e18;
    let (h, w) = (mask.height(), mask.width());
    let mut grid = vec![INF; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                grid[y * w + x] = 0.0;
            }
        }
    }
    // Columns, then rows.
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        let d = dt_1d(&col);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        let d = dt_1d(&row);
        grid[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    grid
}

/// 1-D squared distance transform of a sampled function (lower
/// envelope of parabolas).
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_union_intersect() {
        let small = BinaryMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        let big = BinaryMask::from_fn(4, 4, |y, x| y > 0 && x > 0);
        assert!(small.is_subset_of(&big));
        assert!(!big.is_subset_of(&small));
        assert_eq!(small.union(&big), big);
        assert_eq!(small.intersect(&big), small);
        assert_eq!(small.complement().area(), 16 - 4);
    }

    #[test]
    fn from_tensor_rejects_non_binary() {
        let t = Tensor::<f32>::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 1.0]).unwrap();
        assert!(BinaryMask::from_tensor(&t).is_err());
        let ok = Tensor::<f32>::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let m = BinaryMask::from_tensor(&ok).unwrap();
        assert_eq!(m.area(), 2);
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = BinaryMask::zeros(7, 7);
        m.set(3, 3, true);
        let d = m.dilate(1);
        assert_eq!(d.area(), 9);
        let d2 = m.dilate(2);
        assert_eq!(d2.area(), 25);
        assert!(m.is_subset_of(&d));
    }

    #[test]
    fn sdf_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let m = BinaryMask::from_fn(9, 7, |_, _| rng.gen_bool(0.4));
            if m.area() == 0 || m.area() == 63 {
                continue;
            }
            let sdf = signed_distance_field(&m);
            for y in 0..9 {
                for x in 0..7 {
                    // Brute force: min distance over all pixels of the
                    // opposite class.
                    let inside = m.get(y, x);
                    let mut best = f64::INFINITY;
                    for yy in 0..9 {
                        for xx in 0..7 {
                            if m.get(yy, xx) != inside {
                                let dy = y as f64 - yy as f64;
                                let dx = x as f64 - xx as f64;
                                best = best.min((dy * dy + dx * dx).sqrt());
                            }
                        }
                    }
                    let want = if inside { -best } else { best };
                    let got = sdf[y * 7 + x];
                    assert!(
                        (got - want).abs() < 1e-9,
                        "({y},{x}): got {got}, want {want}"
                    );
                }
            }
        }
    }
}
