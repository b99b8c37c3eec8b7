use rand::Rng;
use semrec_tape::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::sid::SemanticId;

/// One quantization level: `K` code vectors with their EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub codes: Tensor<T>,
    pub counts: Vec<T>,
    pub sums: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    /// EMA state starts as one pseudo-observation at each code.
    pub fn from_codes(codes: Tensor<T>) -> Self {
        let counts = vec![T::one(); codes.rows()];
        let sums = codes.clone();
        Self { codes, counts, sums }
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    /// Index of the nearest code by squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        let mut best = 0;
        let mut best_d = T::infinity();
        for k in 0..self.size() {
            let d = sq_dist(self.codes.row(k), x);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        (best, best_d)
    }

    /// One EMA step from the vectors assigned in a batch:
    /// `count <- rho*count + (1-rho)*n`, `sum <- rho*sum + (1-rho)*sum(x)`,
    /// `code <- sum / max(count, eps)`.
    pub fn ema_update(&mut self, assignments: &[usize], inputs: &Tensor<T>, decay: T, eps: T) {
        assert_eq!(assignments.len(), inputs.rows(), "one assignment per input row");
        let d = self.dim();
        let mut n = vec![T::zero(); self.size()];
        let mut batch_sum = Tensor::zeros(self.size(), d);
        for (r, &k) in assignments.iter().enumerate() {
            n[k] = n[k] + T::one();
            for (s, &x) in batch_sum.row_mut(k).iter_mut().zip(inputs.row(r)) {
                *s = *s + x;
            }
        }
        let keep = T::one() - decay;
        for k in 0..self.size() {
            self.counts[k] = decay * self.counts[k] + keep * n[k];
            let denom = self.counts[k].max(eps);
            for j in 0..d {
                let s = decay * self.sums.get(k, j) + keep * batch_sum.get(k, j);
                self.sums.set(k, j, s);
                self.codes.set(k, j, s / denom);
            }
        }
    }
}

pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Stack of `L` codebooks sharing `K` and the code dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookStack<T> {
    pub levels: Vec<Codebook<T>>,
}

/// Residual quantization of one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult<T> {
    pub indices: Vec<usize>,
    /// `codes[l]` is the chosen code vector at level `l`.
    pub codes: Vec<Vec<T>>,
    /// Sum of the chosen codes.
    pub z_q: Vec<T>,
    /// `residuals[0] = z`, `residuals[l+1] = residuals[l] - codes[l]`; length `L + 1`.
    pub residuals: Vec<Vec<T>>,
}

impl<T: Scalar> QuantizationResult<T> {
    pub fn z(&self) -> &[T] {
        &self.residuals[0]
    }

    pub fn sid(&self) -> SemanticId {
        SemanticId::new(self.indices.iter().map(|&i| i as u16).collect())
    }

    /// `||z - z_q||^2`.
    pub fn residual_norm_sq(&self) -> T {
        sq_dist(self.z(), &self.z_q)
    }
}

impl<T: Scalar> CodebookStack<T> {
    pub fn new(levels: Vec<Codebook<T>>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::InvalidArgument("a codebook stack needs at least one level".into()));
        };
        let (k, d) = (first.size(), first.dim());
        if levels.iter().any(|c| c.size() != k || c.dim() != d) {
            return Err(Error::InvalidArgument(
                "all levels must share codebook size and dimension".into(),
            ));
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn size(&self) -> usize {
        self.levels[0].size()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].dim()
    }

    /// Greedy residual quantization: at each level pick the nearest code to
    /// the current residual and subtract it.
    pub fn residual_quantize(&self, z: &[T]) -> Result<QuantizationResult<T>> {
        if z.len() != self.dim() {
            return Err(Error::dim("quantizer input", self.dim(), z.len()));
        }
        let mut residual = z.to_vec();
        let mut indices = Vec::with_capacity(self.depth());
        let mut codes = Vec::with_capacity(self.depth());
        let mut residuals = vec![residual.clone()];
        let mut z_q = vec![T::zero(); z.len()];
        for level in &self.levels {
            let (k, _) = level.nearest(&residual);
            let code = level.codes.row(k).to_vec();
            for ((r, q), &c) in residual.iter_mut().zip(z_q.iter_mut()).zip(&code) {
                *r = *r - c;
                *q = *q + c;
            }
            indices.push(k);
            codes.push(code);
            residuals.push(residual.clone());
        }
        Ok(QuantizationResult {
            indices,
            codes,
            z_q,
            residuals,
        })
    }

    /// Sum of the code vectors named by `sid`.
    pub fn reconstruct(&self, sid: &SemanticId) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        for (level, &c) in self.levels.iter().zip(sid.codes()) {
            for (o, &x) in out.iter_mut().zip(level.codes.row(c as usize)) {
                *o = *o + x;
            }
        }
        out
    }
}

/// k-means++ seeding of `k` centers from the rows of `points`.
///
/// When there are fewer distinct points than centers, the remaining centers
/// are copies of sampled points with a small jitter so that codes stay
/// distinct.
pub fn kmeans_pp<T: Scalar, R: Rng + ?Sized>(points: &Tensor<T>, k: usize, rng: &mut R) -> Tensor<T> {
    let n = points.rows();
    let d = points.cols();
    assert!(n > 0, "k-means++ needs at least one point");
    let mut centers: Vec<Vec<T>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(points.row(first).to_vec());
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0]).f64()).collect();
    let spread = {
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| points.get(i, j).f64()).sum::<f64>() / n as f64)
            .collect();
        let var = (0..n)
            .map(|i| (0..d).map(|j| (points.get(i, j).f64() - mean[j]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        var.sqrt().max(1e-3)
    };
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 1e-18 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            points.row(pick).to_vec()
        } else {
            let base = points.row(rng.random_range(0..n));
            base.iter()
                .map(|&x| x + T::of((rng.random::<f64>() - 0.5) * 1e-2 * spread))
                .collect()
        };
        for (i, dd) in dist.iter_mut().enumerate() {
            *dd = dd.min(sq_dist(points.row(i), &next).f64());
        }
        centers.push(next);
    }
    Tensor::from_rows(&centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_codebook() -> Codebook<f64> {
        Codebook::from_codes(Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ]))
    }

    #[test]
    fn nearest_picks_closest_axis() {
        assert_eq!(unit_codebook().nearest(&[0.9, 0.1]).0, 0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(unit_codebook().nearest(&[0.5, 0.5]).0, 0);
        assert_eq!(unit_codebook().nearest(&[-0.5, -0.5]).0, 2);
    }

    #[test]
    fn exact_match_leaves_zero_residual() {
        let mut codes = Tensor::zeros(8, 2);
        codes.row_mut(7).copy_from_slice(&[0.3, -0.2]);
        codes.row_mut(1).copy_from_slice(&[5.0, 5.0]);
        let level1 = Codebook::from_codes(codes);
        let deeper = Codebook::from_codes(Tensor::zeros(8, 2));
        let stack = CodebookStack::new(vec![level1, deeper.clone(), deeper]).unwrap();
        let res = stack.residual_quantize(&[0.3, -0.2]).unwrap();
        assert_eq!(res.indices, vec![7, 0, 0]);
        assert_eq!(res.residuals[1], vec![0.0, 0.0]);
    }

    #[test]
    fn unassigned_code_is_unchanged_and_zero_decay_jumps_to_mean() {
        let mut cb = unit_codebook();
        let inputs = Tensor::from_rows(&[vec![2.0, 0.0], vec![4.0, 2.0]]);
        cb.ema_update(&[0, 0], &inputs, 0.99, 1e-5);
        assert_eq!(cb.codes.row(1), &[0.0, 1.0]);
        let mut cb = unit_codebook();
        cb.ema_update(&[0, 0], &inputs, 0.0, 1e-5);
        assert_eq!(cb.codes.row(0), &[3.0, 1.0]);
    }

    #[test]
    fn kmeans_pp_fills_more_centers_than_points() {
        let pts = Tensor::<f64>::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let c = kmeans_pp(&pts, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(c.rows(), 5);
        assert!(c.all_finite());
    }
}
