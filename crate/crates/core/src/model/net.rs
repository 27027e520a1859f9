use super::config::IffArchConfig;
use super::layers::{Ctx, InteractionVars, MergeVars, RaVars};
use super::params::{BufferStore, ParamLayout, ParamStore, ParamVars};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Per-branch handles: `x_up` after Up-conv, one entry per block, `x_in`
/// after Dn-conv.
#[derive(Clone, Debug)]
pub struct BranchVars {
    pub x_up: Var,
    pub blocks: Vec<BlockVars>,
    pub x_in: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ra: RaVars,
    /// Branch feature after the interaction module.
    pub x_im: Var,
}

/// Every named intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct IffNetVars {
    pub enh: BranchVars,
    pub noisy: BranchVars,
    pub interactions: Vec<InteractionVars>,
    pub merge: MergeVars,
    /// `N x 1 x T x F` fused feature.
    pub fused: Var,
}

/// Full forward pass on `N x 1 x T x F` inputs: both branches run Up-conv,
/// then `blocks` × (RA block → interaction), then Dn-conv, then the merge.
pub fn iffnet_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &IffArchConfig,
    x_e: Var,
    x_n: Var,
) -> Result<IffNetVars> {
    let se = ctx.tape.shape(x_e).to_vec();
    let sn = ctx.tape.shape(x_n).to_vec();
    if se != sn {
        return Err(Error::shape("iffnet_forward", &se, &sn));
    }
    if se.len() != 4 || se[1] != 1 {
        return Err(Error::invalid(
            "iffnet_forward",
            format!("expected N x 1 x T x F inputs, got {se:?}"),
        ));
    }
    let up_e = ctx.up_conv("enh.up", x_e)?;
    let up_n = ctx.up_conv("noisy.up", x_n)?;
    let (mut he, mut hn) = (up_e, up_n);
    let mut blocks_e = Vec::with_capacity(cfg.blocks);
    let mut blocks_n = Vec::with_capacity(cfg.blocks);
    let mut interactions = Vec::with_capacity(cfg.blocks);
    for i in 0..cfg.blocks {
        let ra_e = ctx.ra_block(&format!("enh.ra{i}"), he)?;
        let ra_n = ctx.ra_block(&format!("noisy.ra{i}"), hn)?;
        let inter = ctx.interaction(&format!("inter{i}"), ra_e.x_ra, ra_n.x_ra)?;
        blocks_e.push(BlockVars {
            ra: ra_e,
            x_im: inter.x_e,
        });
        blocks_n.push(BlockVars {
            ra: ra_n,
            x_im: inter.x_n,
        });
        interactions.push(inter);
        he = inter.x_e;
        hn = inter.x_n;
    }
    let in_e = ctx.dn_conv("enh.dn", he)?;
    let in_n = ctx.dn_conv("noisy.dn", hn)?;
    let merge = ctx.merge(in_e, in_n, x_e, x_n)?;
    Ok(IffNetVars {
        enh: BranchVars {
            x_up: up_e,
            blocks: blocks_e,
            x_in: in_e,
        },
        noisy: BranchVars {
            x_up: up_n,
            blocks: blocks_n,
            x_in: in_n,
        },
        interactions,
        fused: merge.fused,
        merge,
    })
}

/// Brings a `T x F`, `N x T x F` or `N x 1 x T x F` feature to `N x 1 x T x F`.
pub fn as_feature_batch<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let shape = match s.len() {
        2 => vec![1, 1, s[0], s[1]],
        3 => vec![s[0], 1, s[1], s[2]],
        4 if s[1] == 1 => s.to_vec(),
        _ => {
            return Err(Error::invalid(
                "features",
                format!("expected T x F, N x T x F or N x 1 x T x F, got {s:?}"),
            ))
        }
    };
    x.reshape(&shape)
}

/// Result of [`IffNet::forward`].
pub struct ForwardPass<T> {
    pub vars: IffNetVars,
    pub params: ParamVars,
    pub x_e: Var,
    pub x_n: Var,
    pub observed: Vec<(String, BatchStats<T>)>,
}

/// Tensors extracted from an evaluation-mode pass, per batch item planes
/// stacked as `N x T x F`.
#[derive(Clone, Debug)]
pub struct Fusion<T> {
    pub fused: Tensor<T>,
    pub mask: Tensor<T>,
    pub x_e_in: Tensor<T>,
    pub x_n_in: Tensor<T>,
}

/// Parameters, running statistics and configuration of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct IffNet<T: Scalar> {
    pub cfg: IffArchConfig,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
}

impl<T: Scalar> IffNet<T> {
    pub fn init(cfg: IffArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        Ok(Self {
            params: ParamStore::init(&layout, seed),
            buffers: BufferStore::new(&layout),
            cfg,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records a forward pass. Parameters become gradient leaves; the inputs
    /// are constants.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x_e: &Tensor<T>,
        x_n: &Tensor<T>,
        training: bool,
    ) -> Result<ForwardPass<T>> {
        let params = self.params.bind(tape);
        let ve = tape.constant(as_feature_batch(x_e)?);
        let vn = tape.constant(as_feature_batch(x_n)?);
        let mut ctx = Ctx::new(tape, &params, &self.buffers, training);
        let vars = iffnet_forward(&mut ctx, &self.cfg, ve, vn)?;
        let observed = std::mem::take(&mut ctx.observed);
        Ok(ForwardPass {
            vars,
            params,
            x_e: ve,
            x_n: vn,
            observed,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, observed: &[(String, BatchStats<T>)]) -> Result<()> {
        for (path, stats) in observed {
            self.buffers.get_mut(path)?.update(stats);
        }
        Ok(())
    }

    /// Evaluation-mode fusion of a pair of features.
    pub fn fuse(&self, x_e: &Tensor<T>, x_n: &Tensor<T>) -> Result<Fusion<T>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x_e, x_n, false)?;
        let squeeze = |v: Var| -> Result<Tensor<T>> {
            let t = tape.value(v);
            let (n, _, tt, f) = t.dims4();
            t.reshape(&[n, tt, f])
        };
        Ok(Fusion {
            fused: squeeze(pass.vars.fused)?,
            mask: squeeze(pass.vars.merge.mask)?,
            x_e_in: squeeze(pass.vars.enh.x_in)?,
            x_n_in: squeeze(pass.vars.noisy.x_in)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> IffNet<U> {
        IffNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }
}
