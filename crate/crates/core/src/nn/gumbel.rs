use ndarray::Array2;
use rand::Rng;

use super::tape::{Tape, Var};
use crate::{Real, Result};

/// `K×M` matrix of independent standard Gumbel samples `-ln(-ln U)`.
pub fn gumbel_noise<T: Real, R: Rng>(rng: &mut R, k: usize, m: usize) -> Array2<T> {
    Array2::from_shape_fn((k, m), |_| {
        // open interval keeps both logarithms finite
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        T::of(-(-u.ln()).ln())
    })
}

/// Draws `k` one-hot rows distributed as `softmax(logits)`; the reverse pass
/// is that of the temperature-`tau` softmax of the perturbed logits.
/// Returns the `k×M` one-hot node and the selected class of every row.
pub fn gumbel_softmax_st<T: Real, R: Rng>(tape: &Tape<T>, logits: Var, k: usize, tau: f64, rng: &mut R) -> Result<(Var, Vec<usize>)> {
    if !(tau > 0.0) {
        return Err(crate::Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let m = tape.shape(logits).1;
    let noise = gumbel_noise(rng, k, m);
    tape.gumbel_st(logits, &noise, T::of(tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::substream;
    use ndarray::array;

    #[test]
    fn rows_are_exact_one_hots() {
        let t = Tape::<f64>::new();
        let l = t.leaf(array![[0.3, -1.0, 2.0, 0.0]]);
        let (oh, idx) = gumbel_softmax_st(&t, l, 500, 1.0, &mut substream(3, &[])).unwrap();
        let v = t.value(oh);
        for (row, &i) in v.rows().into_iter().zip(&idx) {
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), 3);
            assert_eq!(row[i], 1.0);
        }
    }

    #[test]
    fn dominant_logit_always_wins() {
        let t = Tape::<f64>::new();
        let l = t.leaf(array![[0.0, 50.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let (_, idx) = gumbel_softmax_st(&t, l, 10_000, 1.0, &mut substream(4, &[])).unwrap();
        assert!(idx.iter().all(|&i| i == 1));
    }

    #[test]
    fn straight_through_gradient_is_softmax_jacobian() {
        // with a single row, d(sum_j w_j s_j)/d logits = s ⊙ (w - s·w) / τ
        let tau = 0.7;
        let t = Tape::<f64>::new();
        let logits = array![[0.2, -0.4, 1.1]];
        let l = t.leaf(logits.clone());
        let noise = array![[0.5, 0.1, -0.3]];
        let (oh, _) = t.gumbel_st(l, &noise, tau).unwrap();
        let w = t.leaf(array![[1.0, 2.0, -3.0]]);
        let prod = t.mul(oh, w).unwrap();
        let loss = t.sum(prod);
        let g = t.backward(loss).unwrap().get(l);
        let z = (&logits + &noise) / tau;
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = z.mapv(|v| (v - mx).exp());
        let s = &e / e.sum();
        let ws = [1.0, 2.0, -3.0];
        let sw: f64 = s.iter().zip(ws).map(|(a, b)| a * b).sum();
        for j in 0..3 {
            let expect = s[[0, j]] * (ws[j] - sw) / tau;
            assert!((g[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let t = Tape::<f64>::new();
        let l = t.leaf(array![[0.0, 0.0]]);
        assert!(gumbel_softmax_st(&t, l, 1, 0.0, &mut substream(0, &[])).is_err());
    }
}
