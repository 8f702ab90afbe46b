//! Central finite-difference verification of analytic gradients.

use super::model::{ParamBlock, SequenceModel, Target};
use super::NnError;

/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks.iter().filter(|b| !b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(L(θ+ε) − L(θ−ε)) / 2ε` for every component
/// of every block. An empty block list passes vacuously.
pub fn check_gradients(
    blocks: &[ParamBlock],
    point: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    epsilon: f64,
    tolerance: f64,
) -> GradCheckReport {
    let mut theta = point.to_vec();
    let blocks = blocks
        .iter()
        .map(|block| {
            let mut worst = (0.0f64, 0usize);
            for i in block.range() {
                let orig = theta[i];
                theta[i] = orig + epsilon;
                let plus = loss(&theta);
                theta[i] = orig - epsilon;
                let minus = loss(&theta);
                theta[i] = orig;
                let numeric = (plus - minus) / (2.0 * epsilon);
                let err = relative_error(analytic[i], numeric);
                if err > worst.0 || err.is_nan() {
                    worst = (if err.is_nan() { f64::INFINITY } else { err }, i - block.offset);
                }
            }
            BlockCheck { name: block.name.clone(), max_rel_error: worst.0, worst_index: worst.1, passed: worst.0 < tolerance }
        })
        .collect();
    GradCheckReport { blocks, tolerance }
}

impl SequenceModel {
    /// Checks backpropagation on one example against central differences.
    pub fn grad_check<S: AsRef<str>>(
        &self,
        tokens: &[S],
        target: &Target,
        epsilon: f64,
        tolerance: f64,
    ) -> Result<GradCheckReport, NnError> {
        if !(epsilon > 0.0) {
            return Err(NnError::InvalidSpec("epsilon must be positive".into()));
        }
        let (_, g) = self.loss_and_gradients(tokens, target)?;
        let analytic = self.gradient_vector(&g);
        Ok(self.check_against(tokens, target, &analytic, epsilon, tolerance))
    }

    /// Like [`SequenceModel::grad_check`] with a caller-supplied analytic
    /// gradient, for fault-injection tests.
    pub fn check_against<S: AsRef<str>>(
        &self,
        tokens: &[S],
        target: &Target,
        analytic: &[f64],
        epsilon: f64,
        tolerance: f64,
    ) -> GradCheckReport {
        let mut probe = self.clone();
        let point = self.trainable_vector();
        check_gradients(
            &self.trainable_blocks(),
            &point,
            analytic,
            |theta| {
                probe.set_trainable_vector(theta);
                probe.loss(tokens, target).expect("loss evaluates at perturbed point")
            },
            epsilon,
            tolerance,
        )
    }
}
