//! Finite-difference checks of each policy's analytic gradients at the
//! small shapes used for verification.

use serde::{Deserialize, Serialize};

use crate::constructive::{model_input, sample_grad, ConstructiveHyper, ConstructivePolicy, SlSample};
use crate::error::{Error, Result};
use crate::instance::{generate_uniform, random_insertion, Point};
use crate::nn::{
    cross_entropy, grad_check, masked_softmax, AttentionConfig, DenseMatrix, GradCheckOptions, ParamSet, Tape,
};
use crate::regional::{extract_region, RrHyper, RrPolicy};
use crate::rng;
use crate::subseq::{SrHyper, SrPolicy, SubseqProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTarget {
    /// Decoder with 5 candidates.
    Constructive,
    /// Encoder on a 6-node window.
    Subseq,
    /// Encoder on a 4-fragment region.
    Regional,
}

impl std::str::FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constructive" => Ok(GradTarget::Constructive),
            "subseq" => Ok(GradTarget::Subseq),
            "regional" => Ok(GradTarget::Regional),
            other => Err(Error::Config(format!("unknown module `{other}` (constructive, subseq, regional)"))),
        }
    }
}

fn attn() -> AttentionConfig {
    AttentionConfig::new(8, 2, 16)
}

fn random_weights(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut r = rng::rng(seed);
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng::unit(&mut r) - 0.5).collect())
}

/// Worst relative error between back-propagated and central-difference
/// gradients (`ε = 1e-6`) over the target's parameters.
pub fn check_gradients(target: GradTarget, seed: u64) -> Result<f64> {
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    match target {
        GradTarget::Subseq => {
            let mut p = SrPolicy::new(SrHyper { attn: attn(), layers: 2, clip: 10.0 }, seed)?;
            let inst = generate_uniform(6, seed)?;
            let prob = SubseqProblem::new(&inst, (0..6).collect())?;
            let w = random_weights(6, 6, rng::split(seed, 1));
            let grads = {
                let mut tape = Tape::new(&p.params);
                let h = p.forward(&mut tape, &prob.normalized);
                tape.backward(&[(h, &w)]).params
            };
            p.params.zero_grad();
            p.params.accumulate(&grads);
            let net = p.clone();
            let loss = |ps: &ParamSet| {
                let mut tape = Tape::new(ps);
                let h = net.forward(&mut tape, &prob.normalized);
                tape.value(h).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
            };
            Ok(grad_check(loss, &p.params, &opts))
        }
        GradTarget::Regional => {
            let mut p = RrPolicy::new(RrHyper { attn: attn(), layers: 2, clip: 10.0 }, seed)?;
            let inst = generate_uniform(20, seed)?;
            let prob = extract_region(&inst, &random_insertion(&inst, seed), Point::new(0.5, 0.5), 4)?;
            let w = random_weights(8, 8, rng::split(seed, 1));
            let grads = {
                let mut tape = Tape::new(&p.params);
                let h = p.forward(&mut tape, &prob.features);
                tape.backward(&[(h, &w)]).params
            };
            p.params.zero_grad();
            p.params.accumulate(&grads);
            let net = p.clone();
            let loss = |ps: &ParamSet| {
                let mut tape = Tape::new(ps);
                let h = net.forward(&mut tape, &prob.features);
                tape.value(h).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
            };
            Ok(grad_check(loss, &p.params, &opts))
        }
        GradTarget::Constructive => {
            let hyper = ConstructiveHyper { attn: attn(), layers: 2, ..ConstructiveHyper::default() };
            let mut p = ConstructivePolicy::new(hyper, seed)?;
            let inst = generate_uniform(7, seed)?;
            let input = model_input(&inst);
            let sample = SlSample { step: 1, first: 6, last: 0, target: 3, candidates: vec![1, 2, 3, 4, 5] };
            let (grads, _, _) = sample_grad(&p, &input, &sample)?;
            p.params.zero_grad();
            p.params.accumulate(&grads.expect("five candidates give a gradient"));
            let net = p.clone();
            let loss = |ps: &ParamSet| {
                let mut q = net.clone();
                q.params = ps.clone();
                let mut tape = Tape::new(&q.params);
                let sv = q.forward_sample(&mut tape, &input, sample.first, sample.last, &sample.candidates);
                let scores = &tape.value(sv).data[1..=5];
                cross_entropy(&masked_softmax(scores, &[true; 5]).expect("finite scores"), 2).loss
            };
            Ok(grad_check(loss, &p.params, &opts))
        }
    }
}
