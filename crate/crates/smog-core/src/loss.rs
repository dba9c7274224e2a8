//! Contrastive objectives: instance-level InfoNCE, the pure group-to-group
//! loss, and the final group-contrastive loss with the instance anchor.
//! All three reduce to temperature-scaled cross-entropy over cosine logits,
//! stabilized through log-sum-exp.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Var};

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Instance InfoNCE (baseline, no groups).
    InstanceNce,
    /// Group-vs-group contrast (ablation; cannot contract same-group pairs).
    PureGroup,
    /// Instance anchor vs group features (the method's loss).
    Smog,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(CoreError::Config(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

fn cross_entropy_rows(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lse = tape.log_sum_exp(logits)?;
    let pos = tape.pick_cols(logits, labels)?;
    let diff = tape.sub(lse, pos)?;
    Ok(tape.mean_all(diff))
}

/// −log softmax of sim(anchor_i, g_j)/τ at the label taken from the other
/// view's assignment. Anchor rows and bank rows must be unit-norm.
pub fn smog_loss(
    tape: &mut Tape,
    anchor: Var,
    target_assignment: &[usize],
    bank: Var,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let l = tape.shape(bank)[0];
    if target_assignment.iter().any(|&c| c >= l) {
        return Err(CoreError::Internal(format!(
            "assignment index out of range for {l} groups"
        )));
    }
    let sims = tape.matmul_nt(anchor, bank)?;
    let logits = tape.scale(sims, 1.0 / tau);
    cross_entropy_rows(tape, logits, target_assignment)
}

/// Group-vs-group contrast: the anchor is the own-view group feature
/// c_i^a = g_{assign_a[i]}, the positive the other view's group.
pub fn pure_group_loss(
    tape: &mut Tape,
    assign_a: &[usize],
    assign_b: &[usize],
    bank: Var,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let l = tape.shape(bank)[0];
    if assign_a.iter().chain(assign_b).any(|&c| c >= l) {
        return Err(CoreError::Internal(format!(
            "assignment index out of range for {l} groups"
        )));
    }
    let anchors = tape.gather_rows(bank, assign_a)?;
    let sims = tape.matmul_nt(anchors, bank)?;
    let logits = tape.scale(sims, 1.0 / tau);
    cross_entropy_rows(tape, logits, assign_b)
}

/// Instance InfoNCE over the mini-batch: positives on the diagonal of the
/// N×N anchor/target similarity matrix, targets stop-gradient.
pub fn instance_infonce(tape: &mut Tape, anchor: Var, target: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.shape(anchor)[0];
    if n < 2 {
        return Err(CoreError::InsufficientNegatives { n });
    }
    if tape.shape(target) != tape.shape(anchor) {
        return Err(CoreError::ShapeMismatch {
            op: "instance_infonce",
            lhs: tape.shape(anchor).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let sims = tape.matmul_nt(anchor, target)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let diag: Vec<usize> = (0..n).collect();
    cross_entropy_rows(tape, logits, &diag)
}
