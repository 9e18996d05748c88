//! Finite-difference checks of the analytic gradients, from the loss layer
//! down to every model parameter.

use csl_core::losses::{ce_loss, csl_loss_for_pairs, select_pairs, AnchorPairs, ContrastiveBatch, CslConfig};
use csl_core::model::{context_window, ModelConfig, ModelParams};
use csl_core::numerics::{Matrix, Rng};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        context: 1,
        encoder_hidden: vec![8],
        d_enc: 4,
        h_proj: 8,
        d_proj: 4,
        n_classes: 3,
    }
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

/// |a − n| / max(|a|, |n|), with the denominator floored at 1e-4 so that
/// entries that are zero up to rounding compare absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn check_all_params(
    params: &ModelParams,
    analytic: &ModelParams,
    objective: impl Fn(&ModelParams) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let n_tensors = params.tensors().len();
    for t in 0..n_tensors {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
            let a = analytic.tensors()[t][i];
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

struct CslProblem {
    input: Matrix,
    labels: Vec<usize>,
    utterance_of: Vec<usize>,
    pairs: Vec<AnchorPairs>,
    tau: f64,
}

fn csl_objective(params: &ModelParams, p: &CslProblem) -> f64 {
    let trace = params.encode_windows(p.input.clone()).unwrap();
    let h = params.project(trace.output()).unwrap();
    csl_loss_for_pairs(&h, &p.pairs, p.tau).unwrap().value
}

fn csl_problem(seed: u64, params: &ModelParams, config: &CslConfig) -> CslProblem {
    let mut rng = Rng::stream(seed, 7);
    let s = 10;
    let input = random_matrix(&mut rng, s, params.config.input_dim());
    let labels: Vec<usize> = (0..s).map(|i| i % 3).collect();
    let utterance_of: Vec<usize> = (0..s).map(|i| i / 4).collect();
    let h = params
        .project(params.encode_windows(input.clone()).unwrap().output())
        .unwrap();
    let batch = ContrastiveBatch::new(h, labels.clone(), utterance_of.clone()).unwrap();
    let pairs = select_pairs(&batch, config, &mut rng);
    CslProblem {
        input,
        labels,
        utterance_of,
        pairs,
        tau: config.temperature,
    }
}

#[test]
fn end_to_end_csl_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let params = ModelParams::init(&tiny_config(), &mut Rng::new(seed)).unwrap();
        let config = CslConfig {
            temperature: [0.5, 1.0][seed as usize % 2],
            ..CslConfig::default()
        };
        let p = csl_problem(seed, &params, &config);
        let trace = params.encode_windows(p.input.clone()).unwrap();
        let proj = params.project_trace(trace.output()).unwrap();
        let batch = ContrastiveBatch::new(proj.output().clone(), p.labels.clone(), p.utterance_of.clone()).unwrap();
        assert_eq!(batch.len(), 10);
        let loss = csl_loss_for_pairs(batch.embeddings(), &p.pairs, p.tau).unwrap();
        let mut grad = params.zeros_like();
        let dz = params
            .backward_projection(trace.output(), &proj, &loss.gradient, &mut grad)
            .unwrap();
        params.backward_encoder(&trace, &dz, &mut grad).unwrap();
        let worst = check_all_params(&params, &grad, |q| csl_objective(q, &p));
        assert!(worst < TOL, "seed {seed}: worst relative error {worst:e}");
        assert!(grad.prediction.weight.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn end_to_end_ce_gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let params = ModelParams::init(&tiny_config(), &mut Rng::new(100 + seed)).unwrap();
        let mut rng = Rng::stream(seed, 3);
        let frames = random_matrix(&mut rng, 7, 3);
        let rows: Vec<usize> = (0..7).collect();
        let input = context_window(&frames, 1, &rows);
        let targets: Vec<usize> = (0..7).map(|_| rng.below(3)).collect();
        let objective = |q: &ModelParams| {
            let z = q.encode(&frames).unwrap();
            ce_loss(&q.predict(&z).unwrap(), &targets).unwrap().value
        };
        let trace = params.encode_windows(input).unwrap();
        let logits = params.predict(trace.output()).unwrap();
        let loss = ce_loss(&logits, &targets).unwrap();
        let mut grad = params.zeros_like();
        let dz = params
            .backward_prediction(trace.output(), &loss.gradient, &mut grad)
            .unwrap();
        params.backward_encoder(&trace, &dz, &mut grad).unwrap();
        let worst = check_all_params(&params, &grad, objective);
        assert!(worst < TOL, "seed {seed}: worst relative error {worst:e}");
        assert!(grad.projection_out.weight.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn project_encode_jacobian_matches_finite_differences() {
    // Vector-Jacobian products with every unit output direction recover the
    // full Jacobian of project∘encode with respect to the input window.
    for seed in 0..5u64 {
        let params = ModelParams::init(&tiny_config(), &mut Rng::new(50 + seed)).unwrap();
        let mut rng = Rng::stream(seed, 11);
        let x = random_matrix(&mut rng, 1, params.config.input_dim());
        let f = |x: &Matrix| {
            params
                .project(params.encode_windows(x.clone()).unwrap().output())
                .unwrap()
        };
        let trace = params.encode_windows(x.clone()).unwrap();
        let proj = params.project_trace(trace.output()).unwrap();
        for out in 0..params.config.d_proj {
            let mut seed_grad = Matrix::zeros(1, params.config.d_proj);
            seed_grad.set(0, out, 1.0);
            let mut scratch = params.zeros_like();
            let dz = params
                .backward_projection(trace.output(), &proj, &seed_grad, &mut scratch)
                .unwrap();
            // dZ → d input through the encoder, by hand
            let mut upstream = dz;
            for l in (0..params.encoder.len()).rev() {
                let act = &trace.layers[l];
                let mut d_pre = upstream.clone();
                for (d, a) in d_pre.data_mut().iter_mut().zip(act.data()) {
                    *d *= 1.0 - a * a;
                }
                upstream = d_pre.matmul_t(&params.encoder[l].weight).unwrap();
            }
            for j in 0..x.cols() {
                let mut xp = x.clone();
                xp.set(0, j, x.get(0, j) + STEP);
                let mut xm = x.clone();
                xm.set(0, j, x.get(0, j) - STEP);
                let numeric = (f(&xp).get(0, out) - f(&xm).get(0, out)) / (2.0 * STEP);
                let e = rel_err(upstream.get(0, j), numeric);
                assert!(e < TOL, "seed {seed} out {out} in {j}: {e:e}");
            }
        }
    }
}

#[test]
fn larger_csl_loss_gradient_matches_finite_differences() {
    // Loss layer alone: S = 12, d = 6, three labels.
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed);
        let raw = random_matrix(&mut rng, 12, 6);
        let h = csl_core::numerics::normalize_rows(&raw).unwrap().rows;
        let labels: Vec<usize> = (0..12).map(|_| rng.below(3)).collect();
        let utt: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let batch = ContrastiveBatch::new(h.clone(), labels, utt).unwrap();
        let pairs = select_pairs(&batch, &CslConfig::all_pairs(1.0), &mut rng);
        let Ok(loss) = csl_loss_for_pairs(&h, &pairs, 1.0) else {
            continue;
        };
        for i in 0..h.data().len() {
            let mut p = h.clone();
            p.data_mut()[i] += STEP;
            let mut m = h.clone();
            m.data_mut()[i] -= STEP;
            let numeric = (csl_loss_for_pairs(&p, &pairs, 1.0).unwrap().value
                - csl_loss_for_pairs(&m, &pairs, 1.0).unwrap().value)
                / (2.0 * STEP);
            let e = rel_err(loss.gradient.data()[i], numeric);
            assert!(e < TOL, "seed {seed} entry {i}: {e:e}");
        }
    }
}

#[test]
fn ce_gradient_two_utterances_matches_finite_differences() {
    let mut rng = Rng::new(77);
    let logits = random_matrix(&mut rng, 12, 6);
    let targets: Vec<usize> = (0..12).map(|_| rng.below(6)).collect();
    let loss = ce_loss(&logits, &targets).unwrap();
    for i in 0..logits.data().len() {
        let mut p = logits.clone();
        p.data_mut()[i] += STEP;
        let mut m = logits.clone();
        m.data_mut()[i] -= STEP;
        let numeric = (ce_loss(&p, &targets).unwrap().value - ce_loss(&m, &targets).unwrap().value) / (2.0 * STEP);
        assert!(rel_err(loss.gradient.data()[i], numeric) < TOL);
    }
}
