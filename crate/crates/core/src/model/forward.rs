use std::collections::BTreeMap;

use crate::error::{dim_err, Result};
use crate::tensor::{self, Tensor};

use super::{op_id, ModelGraph, OpSpec, SegMask};

/// Hooks invoked during a forward pass.
pub trait ForwardObserver {
    fn block_start(&mut self, _block: usize) {}
    fn block_end(&mut self, _block: usize) {}
    fn decoder_start(&mut self) {}
    fn decoder_end(&mut self) {}
    /// Raw output of a conv or linear op; `unit_axis` indexes its output units.
    fn activation(&mut self, _op: &OpSpec, _output: &Tensor, _unit_axis: usize) {}
}

impl ForwardObserver for () {}

/// Per prunable op, the summed absolute activation of each output unit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub sums: BTreeMap<String, Vec<f64>>,
}

impl ActivationTrace {
    pub fn merge(&mut self, other: &ActivationTrace) {
        for (id, v) in &other.sums {
            let acc = self.sums.entry(id.clone()).or_insert_with(|| vec![0.0; v.len()]);
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        }
    }
}

/// Adds `|output|` per unit into `acc` (resized on first use).
pub(crate) fn accumulate_abs(acc: &mut Vec<f64>, output: &Tensor, unit_axis: usize) {
    let units = output.dim(unit_axis);
    if acc.len() != units {
        *acc = vec![0.0; units];
    }
    let inner: usize = output.shape()[unit_axis + 1..].iter().product();
    for (i, v) in output.data().iter().enumerate() {
        acc[(i / inner) % units] += v.abs() as f64;
    }
}

impl ForwardObserver for ActivationTrace {
    fn activation(&mut self, op: &OpSpec, output: &Tensor, unit_axis: usize) {
        if op.prunable {
            accumulate_abs(self.sums.entry(op.id.clone()).or_default(), output, unit_axis);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[K,H,W]` class logits at input resolution.
    pub logits: Tensor,
    pub trace: Option<ActivationTrace>,
}

impl ForwardOutput {
    pub fn mask(&self) -> Result<SegMask> {
        SegMask::from_logits(&self.logits)
    }
}

struct Runner<'a, O: ForwardObserver + ?Sized> {
    model: &'a ModelGraph,
    obs: &'a mut O,
}

impl<O: ForwardObserver + ?Sized> Runner<'_, O> {
    fn conv(&mut self, id: &str, x: &Tensor) -> Result<Tensor> {
        let op = self.model.op(id)?;
        let a = &op.attrs;
        let y = tensor::conv2d(
            x,
            op.weight()?,
            op.bias(),
            a.stride.unwrap_or(1),
            a.padding.unwrap_or(0),
            a.groups.unwrap_or(1),
        )?;
        self.obs.activation(op, &y, 0);
        Ok(y)
    }

    fn linear(&mut self, id: &str, x: &Tensor) -> Result<Tensor> {
        let op = self.model.op(id)?;
        let y = tensor::linear(x, op.weight()?, op.bias())?;
        self.obs.activation(op, &y, y.rank() - 1);
        Ok(y)
    }

    fn norm(&self, id: &str, x: &Tensor) -> Result<Tensor> {
        let op = self.model.op(id)?;
        tensor::layer_norm(x, &op.params[0], &op.params[1], op.attrs.eps.unwrap_or(1e-6))
    }

    fn stage(&mut self, b: usize, x: &Tensor) -> Result<Tensor> {
        let id = |n: &str| op_id(b, n);
        let pe = self.conv(&id("patch_embed"), x)?;
        let (h, w) = (pe.dim(1), pe.dim(2));
        let mut t = self.norm(&id("pe_norm"), &pe.chw_to_tokens()?)?;

        let hn = self.norm(&id("norm1"), &t)?;
        let q = self.linear(&id("q"), &hn)?;
        let kv_in = if self.model.find_op(&id("sr")).is_some() {
            let reduced = self.conv(&id("sr"), &hn.tokens_to_chw(h, w)?)?;
            self.norm(&id("sr_norm"), &reduced.chw_to_tokens()?)?
        } else {
            hn
        };
        let k = self.linear(&id("k"), &kv_in)?;
        let v = self.linear(&id("v"), &kv_in)?;
        let attn = self.model.op(&id("attn"))?;
        let heads = attn.attrs.heads.unwrap_or(1);
        let scale = attn.attrs.scale.unwrap_or(1.0 / ((q.dim(1) / heads) as f32).sqrt());
        let a = tensor::attention_scaled(&q, &k, &v, heads, scale)?;
        let o = self.linear(&id("proj"), &a)?;
        t = tensor::add(&t, &o)?;

        let h2 = self.norm(&id("norm2"), &t)?;
        let f = self.linear(&id("fc1"), &h2)?;
        let d = self.conv(&id("dwconv"), &f.tokens_to_chw(h, w)?)?;
        let g = tensor::gelu(&d);
        let f2 = self.linear(&id("fc2"), &g.chw_to_tokens()?)?;
        t = tensor::add(&t, &f2)?;

        self.norm(&id("norm_out"), &t)?.tokens_to_chw(h, w)
    }

    fn decode(&mut self, stages: &[Tensor]) -> Result<Tensor> {
        let (th, tw) = (stages[0].dim(1), stages[0].dim(2));
        let mut parts = Vec::with_capacity(stages.len());
        for (s, feat) in stages.iter().enumerate().rev() {
            let (h, w) = (feat.dim(1), feat.dim(2));
            let e = self.linear(&format!("dec.c{}", s + 1), &feat.chw_to_tokens()?)?;
            parts.push(tensor::resize_bilinear(&e.tokens_to_chw(h, w)?, th, tw)?);
        }
        let fused_in = Tensor::concat0(&parts)?.chw_to_tokens()?;
        let fused = tensor::relu(&self.linear("dec.fuse", &fused_in)?);
        let logits = self.linear("dec.cls", &fused)?.tokens_to_chw(th, tw)?;
        let cfg = &self.model.config;
        tensor::resize_bilinear(&logits, cfg.input_height, cfg.input_width)
    }
}

impl ModelGraph {
    fn check_input(&self, image: &Tensor) -> Result<()> {
        let [c, h, w] = image.dims3("image")?;
        let cfg = &self.config;
        if c != cfg.in_channels {
            return Err(dim_err("image channels", cfg.in_channels, c));
        }
        if h != cfg.input_height {
            return Err(dim_err("image height", cfg.input_height, h));
        }
        if w != cfg.input_width {
            return Err(dim_err("image width", cfg.input_width, w));
        }
        Ok(())
    }

    /// Runs the full model, reporting block boundaries and raw conv/linear
    /// outputs to `obs`. Returns `[K,H,W]` logits.
    pub fn forward_observed<O: ForwardObserver + ?Sized>(&self, image: &Tensor, obs: &mut O) -> Result<Tensor> {
        self.check_input(image)?;
        let mut runner = Runner { model: self, obs };
        let mut x = image.clone();
        let mut stages = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            runner.obs.block_start(block.index);
            x = runner.stage(block.index, &x)?;
            runner.obs.block_end(block.index);
            stages.push(x.clone());
        }
        runner.obs.decoder_start();
        let logits = runner.decode(&stages)?;
        runner.obs.decoder_end();
        Ok(logits)
    }

    pub fn forward(&self, image: &Tensor, capture: bool) -> Result<ForwardOutput> {
        if capture {
            let mut trace = ActivationTrace::default();
            let logits = self.forward_observed(image, &mut trace)?;
            Ok(ForwardOutput {
                logits,
                trace: Some(trace),
            })
        } else {
            Ok(ForwardOutput {
                logits: self.forward_observed(image, &mut ())?,
                trace: None,
            })
        }
    }

    pub fn predict(&self, image: &Tensor) -> Result<SegMask> {
        self.forward(image, false)?.mask()
    }
}
