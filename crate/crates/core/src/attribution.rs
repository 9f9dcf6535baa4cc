//! Integrated-gradients attribution: the midpoint-rule path integral, the
//! single-layer closed form, completeness checking, and the leave-one-out
//! score used by the attribution-IQR baseline.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::ScalarActivation;
use crate::tensor::Tensor;
use std::fmt;

/// Which baseline a map was computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineId {
    /// The all-zeros tensor (black image / zero feature vector).
    Zeros,
    /// Anything else, identified by a content hash of the baseline.
    Custom(u64),
}

impl BaselineId {
    pub fn of(baseline: &Tensor) -> Self {
        if baseline.data().iter().all(|&v| v == 0.0) {
            return BaselineId::Zeros;
        }
        // FNV-1a over the raw bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in baseline.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        BaselineId::Custom(h)
    }
}

impl fmt::Display for BaselineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineId::Zeros => write!(f, "zeros"),
            BaselineId::Custom(h) => write!(f, "custom:{h:016x}"),
        }
    }
}

/// Per-feature relevance scores for one sample and one target class.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub scores: Tensor,
    pub target_class: usize,
    pub baseline_id: BaselineId,
    /// Quadrature step count; 0 means an exact closed form.
    pub steps: usize,
}

impl AttributionMap {
    /// CSV export (feature index, score) for inspection.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature_index,score\n");
        for (i, v) in self.scores.data().iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// Numeric attribution together with the mean path gradient it was built
/// from; the attacks reuse the latter as a cheap Jacobian diagonal.
pub struct IgEvaluation {
    pub map: AttributionMap,
    pub mean_path_gradient: Tensor,
}

/// Midpoint-rule path integral:
/// scores_i = (x_i - u_i) * (1/m) * sum_j d_i Z_target(u + a_j (x - u)),
/// a_j = (j - 0.5)/m. The m interpolation points run as one batched
/// gradient call.
pub fn ig_numeric(
    graph: &Graph,
    x: &Tensor,
    u: &Tensor,
    target: usize,
    m: usize,
) -> Result<AttributionMap> {
    ig_numeric_full(graph, x, u, target, m).map(|e| e.map)
}

pub fn ig_numeric_full(
    graph: &Graph,
    x: &Tensor,
    u: &Tensor,
    target: usize,
    m: usize,
) -> Result<IgEvaluation> {
    if x.shape() != u.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: u.shape().to_vec(),
        });
    }
    if m < 1 {
        return Err(Error::InvalidArgument("ig_numeric needs m >= 1".into()));
    }
    if target >= graph.output_len() {
        return Err(Error::IndexOutOfRange { index: target, limit: graph.output_len() });
    }

    let d = x.numel();
    let delta = x.sub(u)?;
    let mut path = Vec::with_capacity(m * d);
    for j in 1..=m {
        let alpha = (j as f64 - 0.5) / m as f64;
        for i in 0..d {
            path.push(u.data()[i] + alpha * delta.data()[i]);
        }
    }
    let mut shape = vec![m];
    shape.extend_from_slice(x.shape());
    let points = Tensor::new(shape, path)?;
    let grads = graph.input_gradient_batch(&points, &vec![target; m])?;

    let mut mean = vec![0.0; d];
    for j in 0..m {
        let row = &grads.data()[j * d..(j + 1) * d];
        for (acc, &g) in mean.iter_mut().zip(row) {
            *acc += g;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mean_path_gradient = Tensor::new(x.shape().to_vec(), mean)?;
    let scores = delta.mul(&mean_path_gradient)?;
    scores.ensure_finite("ig_numeric")?;
    Ok(IgEvaluation {
        map: AttributionMap {
            scores,
            target_class: target,
            baseline_id: BaselineId::of(u),
            steps: m,
        },
        mean_path_gradient,
    })
}

/// Exact attribution for a single-layer model F(v) = H(<w, v>):
/// IG = [F(x) - F(u)] * (x - u) ⊙ w / <x - u, w>.
pub fn ig_closed_form(
    w: &Tensor,
    activation: ScalarActivation,
    x: &Tensor,
    u: &Tensor,
) -> Result<AttributionMap> {
    if x.shape() != u.shape() || x.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            expected: w.shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    let delta = x.sub(u)?;
    let denom = delta.dot(w)?;
    if denom.abs() < 1e-12 {
        return Err(Error::SingularDenominator);
    }
    let fx = activation.eval(x.dot(w)?);
    let fu = activation.eval(u.dot(w)?);
    let scores = delta.mul(w)?.scale((fx - fu) / denom);
    scores.ensure_finite("ig_closed_form")?;
    Ok(AttributionMap {
        scores,
        target_class: 0,
        baseline_id: BaselineId::of(u),
        steps: 0,
    })
}

/// |sum_i scores_i - (Z_t(x) - Z_t(u))|, the completeness residual of a map.
pub fn completeness_gap(
    graph: &Graph,
    map: &AttributionMap,
    x: &Tensor,
    u: &Tensor,
) -> Result<f64> {
    let t = map.target_class;
    let zx = graph.forward(x)?.data()[t];
    let zu = graph.forward(u)?.data()[t];
    Ok((map.scores.sum() - (zx - zu)).abs())
}

/// scores_i = Z_t(x) - Z_t(x with feature i zeroed), evaluated as one
/// batched forward over the d occluded copies.
pub fn leave_one_out(graph: &Graph, x: &Tensor, target: usize) -> Result<AttributionMap> {
    if target >= graph.output_len() {
        return Err(Error::IndexOutOfRange { index: target, limit: graph.output_len() });
    }
    let d = x.numel();
    let base = graph.forward(x)?.data()[target];
    let mut occluded = Vec::with_capacity(d * d);
    for i in 0..d {
        occluded.extend_from_slice(x.data());
        occluded[i * d + i] = 0.0;
    }
    let mut shape = vec![d];
    shape.extend_from_slice(x.shape());
    let batch = Tensor::new(shape, occluded)?;
    let logits = graph.forward(&batch)?;
    let k = graph.output_len();
    let scores: Vec<f64> = (0..d).map(|i| base - logits.data()[i * k + target]).collect();
    let scores = Tensor::new(x.shape().to_vec(), scores)?;
    scores.ensure_finite("leave_one_out")?;
    Ok(AttributionMap {
        scores,
        target_class: target,
        baseline_id: BaselineId::Zeros,
        steps: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Node;
    use crate::models::ModelSpec;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use std::collections::BTreeMap;

    fn linear_graph(w: Vec<f64>) -> Graph {
        ModelSpec::single_layer(w, ScalarActivation::Identity).build_graph(0).unwrap()
    }

    fn logistic_graph(w: Vec<f64>) -> Graph {
        ModelSpec::single_layer(w, ScalarActivation::Sigmoid).build_graph(0).unwrap()
    }

    #[test]
    fn identical_input_and_baseline_give_zero_map() {
        let g = linear_graph(vec![1.0, 2.0, -0.5]);
        let x = Tensor::from_vec(vec![0.3, -0.4, 0.9]).unwrap();
        let map = ig_numeric(&g, &x, &x, 0, 8).unwrap();
        assert!(map.scores.data().iter().all(|&v| v == 0.0));
        assert_eq!(completeness_gap(&g, &map, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn linear_model_attribution_is_exact_for_any_m() {
        let g = linear_graph(vec![1.0, 2.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        let u = Tensor::zeros(&[2]);
        for m in [1, 3, 64] {
            let map = ig_numeric(&g, &x, &u, 0, m).unwrap();
            assert!((map.scores.data()[0] - 1.0).abs() < 1e-12);
            assert!((map.scores.data()[1] - 2.0).abs() < 1e-12);
            assert!((map.scores.sum() - 3.0).abs() < 1e-12);
            assert!(completeness_gap(&g, &map, &x, &u).unwrap() < 1e-12);
        }
    }

    #[test]
    fn closed_form_identity_reduces_to_delta_times_w() {
        let w = Tensor::from_vec(vec![0.5, -1.5, 2.0]).unwrap();
        let x = Tensor::from_vec(vec![1.0, 0.2, -0.3]).unwrap();
        let u = Tensor::from_vec(vec![0.1, 0.0, 0.4]).unwrap();
        let map = ig_closed_form(&w, ScalarActivation::Identity, &x, &u).unwrap();
        for i in 0..3 {
            let expect = (x.data()[i] - u.data()[i]) * w.data()[i];
            assert!((map.scores.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_numeric_on_logistic_model() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..5 {
            let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = logistic_graph(w.clone());
            let wt = Tensor::from_vec(w).unwrap();
            let xt = Tensor::from_vec(x).unwrap();
            let u = Tensor::zeros(&[6]);
            let exact = ig_closed_form(&wt, ScalarActivation::Sigmoid, &xt, &u).unwrap();
            let numeric = ig_numeric(&g, &xt, &u, 0, 1024).unwrap();
            let diff = exact
                .scores
                .data()
                .iter()
                .zip(numeric.scores.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff <= 1e-3, "max abs diff {diff}");
        }
    }

    #[test]
    fn path_along_w_gives_scores_proportional_to_w_squared() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt = Tensor::from_vec(w.clone()).unwrap();
        let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let ut = Tensor::from_vec(u).unwrap();
        let c = 0.8;
        let xt = ut.add(&wt.scale(c)).unwrap();
        let exact = ig_closed_form(&wt, ScalarActivation::Sigmoid, &xt, &ut).unwrap();
        // (x - u) ⊙ w = c * w ⊙ w: every score shares the sign of the scale.
        let scale = exact.scores.data()[0] / (w[0] * w[0]);
        for i in 0..5 {
            assert!((exact.scores.data()[i] - scale * w[i] * w[i]).abs() < 1e-9);
        }
        let g = logistic_graph(w);
        let numeric = ig_numeric(&g, &xt, &ut, 0, 4096).unwrap();
        let diff = exact
            .scores
            .data()
            .iter()
            .zip(numeric.scores.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-4, "max abs diff {diff}");
    }

    #[test]
    fn orthogonal_delta_triggers_singularity_error() {
        let w = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let x = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        let u = Tensor::zeros(&[2]);
        assert!(matches!(
            ig_closed_form(&w, ScalarActivation::Sigmoid, &x, &u),
            Err(Error::SingularDenominator)
        ));
    }

    #[test]
    fn completeness_gap_shrinks_with_more_steps_on_average() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let spec = ModelSpec::mlp(vec![4], vec![8], 3);
        let mut g = spec.build_graph(3).unwrap();
        // Fresh graphs have zero biases, which makes Z positively
        // homogeneous and the midpoint rule exact; random biases put real
        // curvature on the path.
        let b0 = Tensor::from_vec((0..8).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        g.params_mut().insert("b0".into(), b0);
        let g = g;
        let mut coarse_total = 0.0;
        let mut fine_total = 0.0;
        for _ in 0..50 {
            let x = Tensor::from_vec((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let u = Tensor::zeros(&[4]);
            let coarse = ig_numeric(&g, &x, &u, 0, 4).unwrap();
            let fine = ig_numeric(&g, &x, &u, 0, 256).unwrap();
            coarse_total += completeness_gap(&g, &coarse, &x, &u).unwrap();
            fine_total += completeness_gap(&g, &fine, &x, &u).unwrap();
            let zx = g.forward(&x).unwrap().data()[0];
            let zu = g.forward(&u).unwrap().data()[0];
            let bound = 1e-3_f64.max(1e-2 * (zx - zu).abs());
            // The ReLU integrand is piecewise constant, so the midpoint
            // error is O(1/m); tighten m until the bound is met.
            let converged = [256usize, 512, 1024, 2048, 4096].iter().any(|&m| {
                let map = ig_numeric(&g, &x, &u, 0, m).unwrap();
                completeness_gap(&g, &map, &x, &u).unwrap() <= bound
            });
            assert!(converged, "gap never met {bound:.2e}");
        }
        assert!(fine_total <= coarse_total);
    }

    #[test]
    fn telescoped_attribution_sum_matches_output_change_exactly() {
        // Baseline u = x, input x' = x + eta on a single-layer model: the
        // scores sum telescopes to F(x') - F(x).
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        for _ in 0..20 {
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt = Tensor::from_vec(w.clone()).unwrap();
            let x = Tensor::from_vec((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let eta = Tensor::from_vec((0..8).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap();
            let xp = x.add(&eta).unwrap();
            let map = match ig_closed_form(&wt, ScalarActivation::Sigmoid, &xp, &x) {
                Ok(m) => m,
                Err(Error::SingularDenominator) => continue,
                Err(e) => panic!("{e}"),
            };
            let fx = ScalarActivation::Sigmoid.eval(x.dot(&wt).unwrap());
            let fxp = ScalarActivation::Sigmoid.eval(xp.dot(&wt).unwrap());
            assert!((map.scores.sum() - (fxp - fx)).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_model_loo_is_zero() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::zeros(&[2, 3]));
        params.insert("b".to_string(), Tensor::from_vec(vec![0.7, -0.1]).unwrap());
        let g = Graph::new(
            vec![3],
            vec![Node::Dense { weight: "w".into(), bias: "b".into() }],
            params,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.4, 0.5, 0.6]).unwrap();
        let map = leave_one_out(&g, &x, 0).unwrap();
        assert!(map.scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_loo_recovers_w_times_x() {
        let g = linear_graph(vec![2.0, -1.0, 0.5]);
        let x = Tensor::from_vec(vec![0.3, 0.8, -0.2]).unwrap();
        let map = leave_one_out(&g, &x, 0).unwrap();
        for i in 0..3 {
            let expect = [2.0, -1.0, 0.5][i] * x.data()[i];
            assert!((map.scores.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_export_lists_every_feature() {
        let g = linear_graph(vec![1.0, 2.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        let map = ig_numeric(&g, &x, &Tensor::zeros(&[2]), 0, 4).unwrap();
        let csv = map.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "feature_index,score");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }
}
