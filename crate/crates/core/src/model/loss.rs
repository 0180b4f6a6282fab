use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::dsp::{self, DspError, Waveform, SI_SNR_EPS};

use super::ModelError;

/// Assignment of estimates to sources chosen by the uPIT minimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Permutation {
    Identity,
    Swap,
}

impl Permutation {
    /// Estimate index assigned to each source.
    pub fn order(self) -> [usize; 2] {
        match self {
            Permutation::Identity => [0, 1],
            Permutation::Swap => [1, 0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UpitLoss {
    /// Scalar loss node.
    pub loss: NodeId,
    /// Argmin at the values recorded when the loss was built.
    pub permutation: Permutation,
}

/// Si-SNR in dB of estimate node `s_hat` (shape `[1, T]`) against a fixed
/// reference, with the same energy floors as [`dsp::si_snr`].
pub fn graph_si_snr(g: &mut Graph, s: &Waveform, s_hat: NodeId) -> Result<NodeId, ModelError> {
    let t = g.shape(s_hat).iter().product::<usize>();
    if t != s.len() {
        return Err(DspError::LengthMismatch(s.len(), t).into());
    }
    let ss = s.energy();
    if ss == 0.0 {
        return Err(DspError::ZeroEnergy("reference").into());
    }
    let reference = g.constant(Tensor::new(g.shape(s_hat).to_vec(), s.samples.clone())?);
    let d = g.dot(reference, s_hat)?;
    let coef = g.scale(d, 1.0 / ss)?;
    let proj = g.mul_scalar(reference, coef)?;
    let err = g.sub(s_hat, proj)?;
    let p = g.sq_norm(proj)?;
    let e = g.sq_norm(err)?;
    let e_floor = g.scale(e, SI_SNR_EPS)?;
    let p_floor = g.scale(p, SI_SNR_EPS)?;
    let num = g.max(p, e_floor)?;
    let den = g.max(e, p_floor)?;
    let ln = g.log10(num)?;
    let ld = g.log10(den)?;
    let diff = g.sub(ln, ld)?;
    Ok(g.scale(diff, 10.0)?)
}

/// `min_π mean_c −si_snr(s_c, ŝ_π(c))`; ties resolve to the identity.
pub fn upit_loss(g: &mut Graph, estimates: [NodeId; 2], sources: &[Waveform; 2]) -> Result<UpitLoss, ModelError> {
    let mut perm_loss = |a: NodeId, b: NodeId| -> Result<NodeId, ModelError> {
        let q0 = graph_si_snr(g, &sources[0], a)?;
        let q1 = graph_si_snr(g, &sources[1], b)?;
        let total = g.add(q0, q1)?;
        Ok(g.scale(total, -0.5)?)
    };
    let keep = perm_loss(estimates[0], estimates[1])?;
    let swap = perm_loss(estimates[1], estimates[0])?;
    let permutation = if g.value(swap).item() < g.value(keep).item() {
        Permutation::Swap
    } else {
        Permutation::Identity
    };
    let loss = g.min(keep, swap)?;
    Ok(UpitLoss { loss, permutation })
}

/// Plain-number uPIT loss and its argmin.
pub fn upit_loss_value(estimates: &[Waveform; 2], sources: &[Waveform; 2]) -> Result<(f64, Permutation), DspError> {
    let keep = -0.5 * (dsp::si_snr(&sources[0], &estimates[0])? + dsp::si_snr(&sources[1], &estimates[1])?);
    let swap = -0.5 * (dsp::si_snr(&sources[0], &estimates[1])? + dsp::si_snr(&sources[1], &estimates[0])?);
    Ok(if swap < keep {
        (swap, Permutation::Swap)
    } else {
        (keep, Permutation::Identity)
    })
}
