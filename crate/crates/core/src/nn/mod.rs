//! Minimal reverse-mode engine and the PointNet-style layer set built on it.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{smooth_l1_value, Gradients, Graph, Var, PROB_EPS};
pub use layers::{max_pool, shared_mlp, Activation, Bound, Dense, Mlp, MlpSpec, ParamSet, SplitDense};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

/// Smooth-L1 of `prediction - target` summed over elements.
pub fn smooth_l1(target: &[f64], prediction: &[f64]) -> f64 {
    assert_eq!(target.len(), prediction.len());
    target.iter().zip(prediction).map(|(t, p)| smooth_l1_value(p - t)).sum()
}

/// Mean binary cross-entropy with the prediction clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce(target: &[f64], prediction: &[f64]) -> f64 {
    assert_eq!(target.len(), prediction.len());
    let n = target.len() as f64;
    target
        .iter()
        .zip(prediction)
        .map(|(&t, &p)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn softmax_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_input, DEFAULT_STEP};
    use super::*;
    use crate::geometry::Camera;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(&[0.0], &[0.0]), 0.0);
        assert_eq!(smooth_l1(&[0.0], &[0.5]), 0.125);
        assert_eq!(smooth_l1(&[1.0], &[3.0]), 1.5);
        assert_eq!(smooth_l1(&[0.0, 0.0], &[-2.0, 0.5]), 1.625);
    }

    #[test]
    fn bce_values() {
        assert!(bce(&[1.0], &[1.0 - PROB_EPS]) < 1e-6);
        assert!((bce(&[1.0], &[0.5]) - 2f64.ln()).abs() < 1e-12);
        assert!(bce(&[0.0], &[1.0]).is_finite());
    }

    #[test]
    fn softmax_ce_values() {
        assert!((softmax_ce(&[0.3; 4], 2) - 4f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let l = softmax_ce(&[margin, 0.0, 0.0], 0);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn graph_losses_match_plain_versions() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row(&[0.2, 0.9, 0.5]));
        let l = g.bce(p, Tensor::row(&[0.0, 1.0, 1.0]));
        assert!((g.item(l) - bce(&[0.0, 1.0, 1.0], &[0.2, 0.9, 0.5])).abs() < 1e-15);
        let z = g.constant(Tensor::row(&[1.0, -2.0, 0.5]));
        let ce = g.softmax_ce(z, 1);
        assert!((g.item(ce) - softmax_ce(&[1.0, -2.0, 0.5], 1)).abs() < 1e-15);
    }

    #[test]
    fn elementwise_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, 4, 3);
        let other = rand_tensor(&mut rng, 4, 3);
        let row = rand_tensor(&mut rng, 1, 3);
        let r = check_input(&x, DEFAULT_STEP, |g, v| {
            let o = g.constant(other.clone());
            let rr = g.constant(row.clone());
            let a = g.mul(v, o);
            let b = g.sub(a, v);
            let c = g.add_row(b, rr);
            let d = g.sigmoid(c);
            let e = g.scale(d, 1.7);
            let m = g.minimum(e, v);
            let s = g.add(m, v);
            let sq = g.mul(s, s);
            g.sum(sq)
        });
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 5, 4);
        let w = rand_tensor(&mut rng, 4, 3);
        let r = check_input(&x, DEFAULT_STEP, |g, v| {
            let wv = g.constant(w.clone());
            let b = g.constant(Tensor::row(&[0.1, -0.2, 0.3]));
            let h = g.affine(v, wv, b);
            let h = g.relu(h);
            let pooled = g.max_rows(h);
            let low = g.min_rows(v);
            let rep = g.repeat_rows(pooled, 5);
            let cat = g.concat_cols(&[v, rep]);
            let sl = g.slice_cols(cat, 2, 4);
            let mm = g.matmul(sl, wv);
            let gathered = g.gather(mm, &[0, 4, 7, 14]);
            let s1 = g.sum(gathered);
            let s2 = g.mean(low);
            let m = g.mul(s1, s2);
            let sq = g.mul(m, m);
            g.add(sq, s1)
        });
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::row(&[0.3, -1.7, 2.5, 0.05, -0.4]);
        let r = check_input(&x, DEFAULT_STEP, |g, v| g.smooth_l1(v, Tensor::row(&[0.0, 0.0, 0.1, -0.2, 0.8])));
        assert!(r.passes(1e-6), "{r:?}");
        let p = Tensor::row(&[0.2, 0.7, 0.45]);
        let r = check_input(&p, DEFAULT_STEP, |g, v| g.bce(v, Tensor::row(&[1.0, 0.0, 0.3])));
        assert!(r.passes(1e-6), "{r:?}");
        let z = rand_tensor(&mut rng, 1, 6);
        let r = check_input(&z, DEFAULT_STEP, |g, v| g.softmax_ce(v, 3));
        assert!(r.passes(1e-6), "{r:?}");
        let r = check_input(&p, DEFAULT_STEP, |g, v| {
            let n = g.neg_log(v);
            g.sum(n)
        });
        assert!(r.passes(1e-6), "{r:?}");
        let y = Tensor::row(&[-3.0, 0.5, 4.2, 9.5]);
        let r = check_input(&y, DEFAULT_STEP, |g, v| {
            g.relaxed_l1(v, Tensor::row(&[-1.0, 0.0, 4.0, 10.0]), Tensor::row(&[1.0, 1.0, 4.1, 12.0]))
        });
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn softmax_gradient_is_softmax_minus_onehot() {
        let logits = [0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row(&logits));
        let l = g.softmax_ce(v, 0);
        let grads = g.backward(l);
        let s: f64 = logits.iter().map(|x| x.exp()).sum();
        let got = &grads.get(v).unwrap().data;
        for k in 0..3 {
            let want = logits[k].exp() / s - if k == 0 { 1.0 } else { 0.0 };
            assert!((got[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_routes_to_lowest_tied_row() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 2.0], [3.0, 0.0]]));
        let m = g.max_rows(v);
        assert_eq!(g.value(m).data, vec![3.0, 2.0]);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(v).unwrap().data, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn geometry_op_gradients_wrt_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = rand_tensor(&mut rng, 6, 3).map(|x| 2.0 * x);
        let bx = Tensor::row(&[0.2, -0.1, 0.3, 1.1, 0.8, 1.6, 0.7]);
        let r = check_input(&bx, DEFAULT_STEP, |g, v| {
            let p = g.constant(pts.clone());
            let f = g.plane_features(p, v);
            let sq = g.mul(f, f);
            g.sum(sq)
        });
        assert!(r.passes(1e-6), "{r:?}");
        let r = check_input(&pts, DEFAULT_STEP, |g, v| {
            let b = g.constant(bx.clone());
            let f = g.plane_features(v, b);
            let sq = g.mul(f, f);
            g.sum(sq)
        });
        assert!(r.passes(1e-6), "{r:?}");
        let r = check_input(&bx, DEFAULT_STEP, |g, v| {
            let c = g.box_corners(v);
            let sq = g.mul(c, c);
            g.sum(sq)
        });
        assert!(r.passes(1e-6), "{r:?}");
        let cam = Camera::new(500.0, 480.0, 320.0, 240.0, 640.0, 480.0);
        let far = Tensor::row(&[0.5, 0.3, 6.0, 1.1, 0.8, 1.6, 0.7]);
        let r = check_input(&far, DEFAULT_STEP, |g, v| {
            let rot = g.rotate_box_y(v, 0.35);
            let c = g.box_corners(rot);
            let uv = g.project(c, cam);
            let lo = g.min_rows(uv);
            let hi = g.max_rows(uv);
            let both = g.concat_cols(&[lo, hi]);
            let sq = g.mul(both, both);
            g.sum(sq)
        });
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(&[1.0, 2.0]));
        let x = g.leaf(Tensor::row(&[3.0, 4.0]));
        let y = g.mul(c, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data, vec![1.0, 2.0]);
    }
}
