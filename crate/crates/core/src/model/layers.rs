//! Building blocks of the fusion network, recorded on a [`Tape`].

use super::params::{BufferStore, ParamVars};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::AttentionAxis;

/// Forward-pass context: the tape, the bound parameters, batch-norm state and
/// the mode. Training-mode batch statistics are collected in `observed`.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamVars,
    buffers: &'a BufferStore<T>,
    training: bool,
    pub observed: Vec<(String, BatchStats<T>)>,
}

/// Intermediates of one RA block.
#[derive(Clone, Copy, Debug)]
pub struct RaVars {
    pub x_res: Var,
    pub x_temp: Var,
    pub x_freq: Var,
    pub x_ra: Var,
}

/// Outputs of one interaction module.
#[derive(Clone, Copy, Debug)]
pub struct InteractionVars {
    pub x_e: Var,
    pub x_n: Var,
    /// Gate applied to the noisy feature on its way into the enhanced branch.
    pub mask_n2e: Var,
    /// Gate applied to the enhanced feature on its way into the noisy branch.
    pub mask_e2n: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MergeVars {
    /// `[X_E_in, X_N_in, X_E, X_N]` along channels.
    pub stacked: Var,
    pub mask: Var,
    pub fused: Var,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a ParamVars,
        buffers: &'a BufferStore<T>,
        training: bool,
    ) -> Self {
        Self {
            tape,
            params,
            buffers,
            training,
            observed: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    fn conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.params.get(&format!("{prefix}.weight"))?;
        let b = self.params.get(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, b)
    }

    fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.params.get(&format!("{prefix}.gamma"))?;
        let b = self.params.get(&format!("{prefix}.beta"))?;
        let running = self.buffers.get(prefix)?;
        let (y, stats) = self.tape.batch_norm(x, g, b, running, self.training)?;
        if let Some(s) = stats {
            self.observed.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    fn prelu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let a = self.params.get(&format!("{prefix}.slope"))?;
        self.tape.prelu(x, a)
    }

    fn conv_bn_prelu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.conv(&format!("{prefix}.conv"), x)?;
        let h = self.bn(&format!("{prefix}.bn"), h)?;
        self.prelu(&format!("{prefix}.prelu"), h)
    }

    fn expect_channels(&self, op: &'static str, x: Var, prefix: &str, weight: &str) -> Result<()> {
        let w = self.params.get(&format!("{prefix}.{weight}"))?;
        let cin = self.tape.shape(w)[1];
        let xs = self.tape.shape(x);
        if xs.len() != 4 || xs[1] != cin {
            return Err(Error::shape(op, xs, self.tape.shape(w)));
        }
        Ok(())
    }

    /// 1 → C channels: conv → BN → PReLU. `prefix` is e.g. `enh.up`.
    pub fn up_conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        self.expect_channels("up_conv", x, &format!("{prefix}.conv"), "weight")?;
        self.conv_bn_prelu(prefix, x)
    }

    /// C → 1 channel: conv → BN → PReLU. `prefix` is e.g. `enh.dn`.
    pub fn dn_conv(&mut self, prefix: &str, x: Var) -> Result<Var> {
        self.expect_channels("dn_conv", x, &format!("{prefix}.conv"), "weight")?;
        self.conv_bn_prelu(prefix, x)
    }

    /// conv → BN → PReLU → conv → BN, skip add, PReLU. Both activations
    /// share the block's slope vector.
    pub fn residual_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        self.expect_channels("residual_block", x, &format!("{prefix}.conv1"), "weight")?;
        let slope = format!("{prefix}.prelu");
        let h = self.conv(&format!("{prefix}.conv1"), x)?;
        let h = self.bn(&format!("{prefix}.bn1"), h)?;
        let h = self.prelu(&slope, h)?;
        let h = self.conv(&format!("{prefix}.conv2"), h)?;
        let h = self.bn(&format!("{prefix}.bn2"), h)?;
        let h = self.tape.add(h, x)?;
        self.prelu(&slope, h)
    }

    /// Parameter-free self-attention along one axis, returning the output
    /// and the row-stochastic attention matrix.
    ///
    /// Queries, keys and values are all the reshaped input; scores are scaled
    /// by `1/sqrt(C*F)` (temporal) or `1/sqrt(C*T)` (frequency).
    pub fn self_attention(&mut self, x: Var, axis: AttentionAxis) -> Result<(Var, Var)> {
        let shape = self.tape.shape(x).to_vec();
        let q = self.tape.reshape_axis(x, axis)?;
        let row_len = self.tape.shape(q)[2];
        let scores = self.tape.matmul_bt(q, q)?;
        let scaled = self
            .tape
            .scale(scores, T::one() / T::from_usize(row_len).unwrap().sqrt());
        let attn = self.tape.softmax_rows(scaled)?;
        let mixed = self.tape.matmul(attn, q)?;
        let back = self.tape.reshape_axis_inv(mixed, axis, &shape)?;
        Ok((self.tape.add(x, back)?, attn))
    }

    pub fn separable_self_attention(&mut self, x: Var, axis: AttentionAxis) -> Result<Var> {
        Ok(self.self_attention(x, axis)?.0)
    }

    /// Two residual blocks, temporal and frequency attention in parallel,
    /// then `[X^Temp, X^Freq, X^Res]` mixed back to C channels by a 1×1 conv.
    pub fn ra_block(&mut self, prefix: &str, x: Var) -> Result<RaVars> {
        let h = self.residual_block(&format!("{prefix}.res0"), x)?;
        let x_res = self.residual_block(&format!("{prefix}.res1"), h)?;
        let x_temp = self.separable_self_attention(x_res, AttentionAxis::Temporal)?;
        let x_freq = self.separable_self_attention(x_res, AttentionAxis::Frequency)?;
        let cat = self.tape.concat_channels(&[x_temp, x_freq, x_res])?;
        let x_ra = self.conv(&format!("{prefix}.mix"), cat)?;
        Ok(RaVars {
            x_res,
            x_temp,
            x_freq,
            x_ra,
        })
    }

    fn gate(&mut self, prefix: &str, first: Var, second: Var) -> Result<Var> {
        let cat = self.tape.concat_channels(&[first, second])?;
        let h = self.conv(&format!("{prefix}.conv"), cat)?;
        let h = self.bn(&format!("{prefix}.bn"), h)?;
        Ok(self.tape.sigmoid(h))
    }

    /// Both interaction directions, each computed from the original inputs:
    /// `x_e' = x_e + M_N ⊙ x_n` with `M_N = σ(BN(conv([x_e; x_n])))`, and
    /// `x_n' = x_n + M_E ⊙ x_e` with `M_E = σ(BN(conv([x_n; x_e])))`.
    pub fn interaction(&mut self, prefix: &str, x_e: Var, x_n: Var) -> Result<InteractionVars> {
        if self.tape.shape(x_e) != self.tape.shape(x_n) {
            return Err(Error::shape(
                "interaction",
                self.tape.shape(x_e),
                self.tape.shape(x_n),
            ));
        }
        let mask_n2e = self.gate(&format!("{prefix}.n2e"), x_e, x_n)?;
        let mask_e2n = self.gate(&format!("{prefix}.e2n"), x_n, x_e)?;
        let r_n2e = self.tape.mul(mask_n2e, x_n)?;
        let r_e2n = self.tape.mul(mask_e2n, x_e)?;
        Ok(InteractionVars {
            x_e: self.tape.add(x_e, r_n2e)?,
            x_n: self.tape.add(x_n, r_e2n)?,
            mask_n2e,
            mask_e2n,
        })
    }

    /// Learns the gate `M` from `[X_E_in, X_N_in, X_E, X_N]` (conv, temporal
    /// attention, conv, sigmoid) and fuses
    /// `X_F = X_E_in ⊙ M + X_N_in ⊙ (1 − M)`.
    pub fn merge(&mut self, x_e_in: Var, x_n_in: Var, x_e: Var, x_n: Var) -> Result<MergeVars> {
        let s = self.tape.shape(x_e_in).to_vec();
        for v in [x_n_in, x_e, x_n] {
            if self.tape.shape(v) != s.as_slice() {
                return Err(Error::shape("merge", &s, self.tape.shape(v)));
            }
        }
        let stacked = self.tape.concat_channels(&[x_e_in, x_n_in, x_e, x_n])?;
        let h = self.conv("merge.conv1", stacked)?;
        let h = self.separable_self_attention(h, AttentionAxis::Temporal)?;
        let logits = self.conv("merge.conv2", h)?;
        let mask = self.tape.sigmoid(logits);
        let fused = self.tape.affine_combine(x_e_in, x_n_in, mask)?;
        Ok(MergeVars {
            stacked,
            mask,
            fused,
        })
    }
}
