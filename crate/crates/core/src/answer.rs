//! Scoring the five candidate answers against the fused story vector.

use crate::autodiff::{Graph, Var};
use crate::data::ANSWER_COUNT;
use crate::error::{MdamError, Result};
use crate::layers::Initializer;
use crate::params::ModelParams;
use crate::tensor::argmax;

pub const WEIGHT_PATH: &str = "answer.W";
pub const BIAS_PATH: &str = "answer.b";

pub fn init_answer_params(init: &mut Initializer<'_>, d_model: usize) {
    init.xavier(WEIGHT_PATH, 2 * d_model, 1);
    init.zeros(BIAS_PATH, &[1]);
}

/// Graph handles for the answer scores of one story.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub logits: Var,
    pub probs: Var,
}

/// Row `j` of `O_A` is `concat(o ⊙ A_j, o + A_j)`; the logits are
/// `O_A W + b` with one shared scalar `b`.
pub fn score_answers(g: &mut Graph, params: &ModelParams, o: Var, answers: Var) -> Result<ScoreVars> {
    let shape = g.shape(answers).to_vec();
    if shape.len() != 2 || shape[0] != ANSWER_COUNT {
        return Err(MdamError::Schema {
            qa_id: String::new(),
            field: "answers".into(),
            reason: format!("expected {ANSWER_COUNT} encoded answers, got shape {shape:?}"),
        });
    }
    if g.shape(o) != [shape[1]] {
        return Err(MdamError::dim("score_answers", g.shape(o), &shape));
    }
    let tiled = g.tile_rows(o, ANSWER_COUNT)?;
    let prod = g.mul(tiled, answers)?;
    let sum = g.add(tiled, answers)?;
    let oa = g.concat(&[prod, sum])?;
    let w = g.param(params, WEIGHT_PATH)?;
    let b = g.param(params, BIAS_PATH)?;
    let column = g.matmul(oa, w)?;
    let column = g.add_row(column, b)?;
    let logits = g.reshape(column, &[ANSWER_COUNT])?;
    let probs = g.softmax(logits, None)?;
    Ok(ScoreVars { logits, probs })
}

/// Index of the best logit; exact ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    argmax(logits)
}
