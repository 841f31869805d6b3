use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::NoiseEstimator;
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{normalize_rows, silu, silu_grad, sinusoidal, Linear, Tensor, LN_EPS};
use crate::weights::{InitMode, InitRule, Loader, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffusionDims {
    /// Dimension of the vector being denoised.
    pub data: usize,
    /// Dimension of the conditioning latent.
    pub cond: usize,
    pub width: usize,
    /// Width of the summed time + condition embedding.
    pub hidden: usize,
    pub time: usize,
    pub blocks: usize,
}

impl DiffusionDims {
    pub fn from_config(cfg: &EngineConfig) -> Self {
        DiffusionDims {
            data: cfg.motion_dim,
            cond: cfg.latent_dim,
            width: cfg.diffmlp_width,
            hidden: cfg.diffmlp_cond,
            time: cfg.time_embed_dim,
            blocks: cfg.diffmlp_blocks,
        }
    }
}

/// adaLN-zero residual block: `h += g ⊙ W2·silu(W1·(LN(h)(1+s)+b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBlock<T = f32> {
    /// `hidden → 3·width`: shift, scale, gate.
    pub modulation: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Noise predictor `ε̂(x_t, t, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionMlp<T = f32> {
    pub dims: DiffusionDims,
    pub prefix: String,
    pub time: Linear<T>,
    pub cond: Linear<T>,
    pub input: Linear<T>,
    pub blocks: Vec<DiffusionBlock<T>>,
    /// `hidden → 2·width`: shift, scale.
    pub final_mod: Linear<T>,
    pub out: Linear<T>,
}

/// Intermediate activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    x: Tensor<T>,
    cond_in: Tensor<T>,
    temb: Tensor<T>,
    c: Tensor<T>,
    ca: Tensor<T>,
    blocks: Vec<BlockTape<T>>,
    final_mod: Tensor<T>,
    final_norm: Tensor<T>,
    final_inv: Vec<T>,
    final_u: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    m: Tensor<T>,
    norm: Tensor<T>,
    inv: Vec<T>,
    u: Tensor<T>,
    a1: Tensor<T>,
    s: Tensor<T>,
    y: Tensor<T>,
}

impl<T: Real> DiffusionMlp<T> {
    pub fn load(l: &mut Loader<'_>, prefix: &str, dims: &DiffusionDims) -> Result<Self> {
        let DiffusionDims {
            data,
            cond,
            width,
            hidden,
            time,
            blocks,
        } = *dims;
        let mut bs = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let p = format!("{prefix}.block{b}");
            bs.push(DiffusionBlock {
                modulation: l.modulation(&format!("{p}.mod"), hidden, width, 3, &[2])?,
                fc1: Linear::new(
                    l.tensor(&format!("{p}.w1"), width, width, InitRule::FanIn(width))?,
                    l.vector(&format!("{p}.b1"), width, InitRule::FanIn(width))?,
                )?,
                fc2: Linear::new(
                    l.tensor(&format!("{p}.w2"), width, width, InitRule::FanIn(width))?,
                    l.vector(&format!("{p}.b2"), width, InitRule::FanIn(width))?,
                )?,
            });
        }
        Ok(DiffusionMlp {
            dims: *dims,
            prefix: prefix.into(),
            time: l.linear(&format!("{prefix}.time"), time, hidden)?,
            cond: l.linear(&format!("{prefix}.cond"), cond, hidden)?,
            input: l.linear(&format!("{prefix}.in"), data, width)?,
            blocks: bs,
            final_mod: l.modulation(&format!("{prefix}.final.mod"), hidden, width, 2, &[])?,
            out: l.linear(&format!("{prefix}.out"), width, data)?,
        })
    }

    /// Standalone construction, outside a full engine model.
    pub fn init(prefix: &str, dims: &DiffusionDims, seed: u64, mode: InitMode) -> Result<Self> {
        let mut decl = Loader::declare_only();
        Self::load(&mut decl, prefix, dims)?;
        let w = Weights::init_specs(decl.into_specs(), seed, mode)?;
        Self::load(&mut Loader::from_weights(&w), prefix, dims)
    }

    /// Same topology with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, p| p.iter_mut().for_each(|v| *v = T::ZERO));
        z
    }

    /// Every parameter slice with its storage name, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, (usize, usize), &[T])) {
        let p = &self.prefix;
        let lin = |f: &mut dyn FnMut(&str, (usize, usize), &[T]),
                   name: &str,
                   w: &str,
                   b: &str,
                   l: &Linear<T>| {
            f(&format!("{name}{w}"), l.weight.shape(), l.weight.data());
            f(&format!("{name}{b}"), (1, l.bias.len()), &l.bias);
        };
        lin(f, &format!("{p}.time"), ".w", ".b", &self.time);
        lin(f, &format!("{p}.cond"), ".w", ".b", &self.cond);
        lin(f, &format!("{p}.in"), ".w", ".b", &self.input);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = format!("{p}.block{i}");
            lin(f, &format!("{n}.mod"), ".w", ".b", &b.modulation);
            lin(f, &n, ".w1", ".b1", &b.fc1);
            lin(f, &n, ".w2", ".b2", &b.fc2);
        }
        lin(f, &format!("{p}.final.mod"), ".w", ".b", &self.final_mod);
        lin(f, &format!("{p}.out"), ".w", ".b", &self.out);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(usize, &mut [T])) {
        let mut i = 0;
        let mut lin = |l: &mut Linear<T>| {
            f(i, l.weight.data_mut());
            f(i + 1, &mut l.bias);
            i += 2;
        };
        lin(&mut self.time);
        lin(&mut self.cond);
        lin(&mut self.input);
        for b in &mut self.blocks {
            lin(&mut b.modulation);
            lin(&mut b.fc1);
            lin(&mut b.fc2);
        }
        lin(&mut self.final_mod);
        lin(&mut self.out);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, p| n += p.len());
        n
    }

    /// Parameters as an `f32` weight bundle under their storage names.
    pub fn to_weights(&self) -> Result<Weights> {
        let mut w = Weights::new();
        let mut err = None;
        self.visit(&mut |name, (r, c), p| match Tensor::from_vec(
            r,
            c,
            p.iter().map(|v| v.to_f64() as f32).collect(),
        ) {
            Ok(t) => w.insert(name, t),
            Err(e) => err = Some(e),
        });
        match err {
            Some(e) => Err(e),
            None => Ok(w),
        }
    }

    pub fn cast<U: Real>(&self) -> DiffusionMlp<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        };
        DiffusionMlp {
            dims: self.dims,
            prefix: self.prefix.clone(),
            time: lin(&self.time),
            cond: lin(&self.cond),
            input: lin(&self.input),
            blocks: self
                .blocks
                .iter()
                .map(|b| DiffusionBlock {
                    modulation: lin(&b.modulation),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            final_mod: lin(&self.final_mod),
            out: lin(&self.out),
        }
    }

    /// Batched forward pass. Row `i` of `x` is denoised at training step
    /// `t[i]` under condition row `i`.
    pub fn forward(&self, x: &Tensor<T>, t: &[usize], cond: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_tape(x, t, cond)?.output)
    }

    pub fn forward_tape(&self, x: &Tensor<T>, t: &[usize], cond: &Tensor<T>) -> Result<Tape<T>> {
        let d = &self.dims;
        if x.cols() != d.data
            || cond.cols() != d.cond
            || x.rows() != t.len()
            || cond.rows() != t.len()
        {
            return Err(Error::validation(format!(
                "diffusion input {:?} / cond {:?} / {} timesteps for dims {}→{}",
                x.shape(),
                cond.shape(),
                t.len(),
                d.data,
                d.cond
            )));
        }
        let rows: Vec<Vec<T>> = t.iter().map(|&s| sinusoidal(s as f64, d.time)).collect();
        let temb = Tensor::from_vec(t.len(), d.time, rows.concat())?;
        let mut c = self.time.forward(&temb)?;
        c.add_assign(&self.cond.forward(cond)?)?;
        let ca = c.map(silu);
        let eps = T::from_f64(LN_EPS);

        let mut h = self.input.forward(x)?;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let m = b.modulation.forward(&ca)?;
            let (norm, inv) = norm_with_inv(&h, eps);
            let u = modulate_rows(&norm, &m, d.width);
            let a1 = b.fc1.forward(&u)?;
            let s = a1.map(silu);
            let y = b.fc2.forward(&s)?;
            let w = d.width;
            for r in 0..h.rows() {
                let g = &m.row(r)[2 * w..3 * w];
                let yr = y.row(r).to_vec();
                for ((hv, &gv), yv) in h.row_mut(r).iter_mut().zip(g).zip(yr) {
                    *hv += gv * yv;
                }
            }
            tapes.push(BlockTape {
                m,
                norm,
                inv,
                u,
                a1,
                s,
                y,
            });
        }
        let fm = self.final_mod.forward(&ca)?;
        let (final_norm, final_inv) = norm_with_inv(&h, eps);
        let final_u = modulate_rows(&final_norm, &fm, d.width);
        let output = self.out.forward(&final_u)?;
        Ok(Tape {
            x: x.clone(),
            cond_in: cond.clone(),
            temb,
            c,
            ca,
            blocks: tapes,
            final_mod: fm,
            final_norm,
            final_inv,
            final_u,
            output,
        })
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
    pub fn backward(&self, tape: &Tape<T>, d_out: &Tensor<T>, grads: &mut Self) -> Result<()> {
        let w = self.dims.width;
        let rows = tape.output.rows();
        if d_out.shape() != tape.output.shape() {
            return Err(Error::validation("gradient shape does not match output"));
        }
        let du = linear_backward(&self.out, &mut grads.out, &tape.final_u, d_out);
        let mut dca = Tensor::zeros(rows, self.dims.hidden);

        let (dn, dm) = modulate_backward(&du, &tape.final_norm, &tape.final_mod, w, 2);
        accumulate(
            &mut dca,
            &linear_backward(&self.final_mod, &mut grads.final_mod, &tape.ca, &dm),
        );
        let mut dh = norm_backward(&dn, &tape.final_norm, &tape.final_inv);

        for (bi, b) in self.blocks.iter().enumerate().rev() {
            let bt = &tape.blocks[bi];
            let g = &mut grads.blocks[bi];
            let mut dy = Tensor::zeros(rows, w);
            let mut dgate = Tensor::zeros(rows, w);
            for r in 0..rows {
                let gate = &bt.m.row(r)[2 * w..3 * w];
                let dhr = dh.row(r);
                for j in 0..w {
                    dy.row_mut(r)[j] = dhr[j] * gate[j];
                    dgate.row_mut(r)[j] = dhr[j] * bt.y.get(r, j);
                }
            }
            let ds = linear_backward(&b.fc2, &mut g.fc2, &bt.s, &dy);
            let mut da1 = ds;
            for (v, &a) in da1.data_mut().iter_mut().zip(bt.a1.data()) {
                *v *= silu_grad(a);
            }
            let du = linear_backward(&b.fc1, &mut g.fc1, &bt.u, &da1);
            let (dn, mut dm) = modulate_backward(&du, &bt.norm, &bt.m, w, 3);
            for r in 0..rows {
                dm.row_mut(r)[2 * w..3 * w].copy_from_slice(dgate.row(r));
            }
            accumulate(
                &mut dca,
                &linear_backward(&b.modulation, &mut g.modulation, &tape.ca, &dm),
            );
            accumulate(&mut dh, &norm_backward(&dn, &bt.norm, &bt.inv));
        }
        linear_backward(&self.input, &mut grads.input, &tape.x, &dh);

        let mut dc = dca;
        for (v, &c) in dc.data_mut().iter_mut().zip(tape.c.data()) {
            *v *= silu_grad(c);
        }
        linear_backward(&self.time, &mut grads.time, &tape.temb, &dc);
        linear_backward(&self.cond, &mut grads.cond, &tape.cond_in, &dc);
        Ok(())
    }
}

impl<T: Real> NoiseEstimator<T> for DiffusionMlp<T> {
    fn data_dim(&self) -> usize {
        self.dims.data
    }

    fn estimate(&self, x: &[T], t: usize, cond: &[T]) -> Result<Vec<T>> {
        let out = self.forward(
            &Tensor::row_vector(x.to_vec()),
            &[t],
            &Tensor::row_vector(cond.to_vec()),
        )?;
        Ok(out.into_data())
    }
}

fn norm_with_inv<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let n = T::from_usize(x.cols());
    let inv = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mut mean = T::ZERO;
            row.iter().for_each(|&v| mean += v);
            mean /= n;
            let mut var = T::ZERO;
            row.iter().for_each(|&v| var += (v - mean) * (v - mean));
            T::ONE / (var / n + eps).sqrt()
        })
        .collect();
    (normalize_rows(x, eps), inv)
}

/// `norm·(1 + scale) + shift` with per-row shift/scale taken from the first
/// two `w`-wide slices of `m`.
fn modulate_rows<T: Real>(norm: &Tensor<T>, m: &Tensor<T>, w: usize) -> Tensor<T> {
    let mut out = norm.clone();
    for r in 0..out.rows() {
        let mr = m.row(r);
        let (sh, sc) = (&mr[..w], &mr[w..2 * w]);
        for ((v, &a), &b) in out.row_mut(r).iter_mut().zip(sh).zip(sc) {
            *v = *v * (T::ONE + b) + a;
        }
    }
    out
}

/// Returns `(∂/∂norm, ∂/∂m)`; gate columns of `∂/∂m` are left at zero.
fn modulate_backward<T: Real>(
    du: &Tensor<T>,
    norm: &Tensor<T>,
    m: &Tensor<T>,
    w: usize,
    parts: usize,
) -> (Tensor<T>, Tensor<T>) {
    let rows = du.rows();
    let mut dn = Tensor::zeros(rows, w);
    let mut dm = Tensor::zeros(rows, parts * w);
    for r in 0..rows {
        for j in 0..w {
            let g = du.get(r, j);
            dm.set(r, j, g);
            dm.set(r, w + j, g * norm.get(r, j));
            dn.set(r, j, g * (T::ONE + m.get(r, w + j)));
        }
    }
    (dn, dm)
}

/// `dx = inv/N·(N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))`.
fn norm_backward<T: Real>(dn: &Tensor<T>, norm: &Tensor<T>, inv: &[T]) -> Tensor<T> {
    let cols = dn.cols();
    let n = T::from_usize(cols);
    let mut dx = Tensor::zeros(dn.rows(), cols);
    for r in 0..dn.rows() {
        let (g, xh) = (dn.row(r), norm.row(r));
        let mut sg = T::ZERO;
        let mut sgx = T::ZERO;
        for j in 0..cols {
            sg += g[j];
            sgx += g[j] * xh[j];
        }
        let k = inv[r] / n;
        for j in 0..cols {
            dx.row_mut(r)[j] = k * (n * g[j] - sg - xh[j] * sgx);
        }
    }
    dx
}

/// Accumulates weight and bias gradients and returns `∂/∂x`.
fn linear_backward<T: Real>(
    lin: &Linear<T>,
    grad: &mut Linear<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (inp, outp) = lin.weight.shape();
    let rows = x.rows();
    let gw = grad.weight.data_mut();
    for r in 0..rows {
        let (xr, dyr) = (x.row(r), dy.row(r));
        for (k, &xv) in xr.iter().enumerate() {
            let g = &mut gw[k * outp..(k + 1) * outp];
            for (gv, &d) in g.iter_mut().zip(dyr) {
                *gv += xv * d;
            }
        }
        for (b, &d) in grad.bias.iter_mut().zip(dyr) {
            *b += d;
        }
    }
    let mut dx = Tensor::zeros(rows, inp);
    let wd = lin.weight.data();
    for r in 0..rows {
        let dyr = dy.row(r).to_vec();
        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
            let wr = &wd[k * outp..(k + 1) * outp];
            let mut acc = T::ZERO;
            for (&wv, &d) in wr.iter().zip(&dyr) {
                acc += wv * d;
            }
            *o = acc;
        }
    }
    dx
}

fn accumulate<T: Real>(a: &mut Tensor<T>, b: &Tensor<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}
