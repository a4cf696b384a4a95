//! Attention backbones: a ViT with class token and a Swin-style
//! hierarchical transformer with shifted-window attention.

use mvscan_nn::{Real, Tensor, Var};

use super::{CamLayout, CamTarget, Init, Pass};
use crate::error::{Error, Result};

/// Plain vision transformer (pre-norm blocks, class token readout).
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    /// Average-pooling factor applied to the input before patching.
    pub pool: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp: usize,
}

/// Swin transformer with window attention and patch merging.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinConfig {
    pub pool: usize,
    pub patch: usize,
    pub embed: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    pub fn tiny() -> Self {
        Self { pool: 8, patch: 7, dim: 16, depth: 1, heads: 2, mlp: 32 }
    }

    /// 16-pixel patches, width 192, 12 blocks of 3 heads.
    pub fn vit_ti16() -> Self {
        Self { pool: 1, patch: 16, dim: 192, depth: 12, heads: 3, mlp: 768 }
    }

    fn grid(&self, side: usize) -> usize {
        side / self.pool / self.patch
    }

    pub(super) fn init<T: Real>(&self, init: &mut Init<'_, T>, prefix: &str) {
        let tokens = self.grid(crate::preprocess::CROP_SIDE).pow(2) + 1;
        init.conv(&format!("{prefix}.patch_embed"), self.dim, 3, &[self.patch, self.patch], true);
        init.normal(&format!("{prefix}.cls_token"), &[1, 1, self.dim], 0.02);
        init.normal(&format!("{prefix}.pos_embed"), &[1, tokens, self.dim], 0.02);
        for b in 0..self.depth {
            block_init(init, &format!("{prefix}.blocks.{b}"), self.dim, self.mlp, None);
        }
        init.layer_norm(&format!("{prefix}.norm"), self.dim);
    }

    pub(super) fn features<T: Real>(&self, pass: &mut Pass<'_, T>, x: Var, prefix: &str) -> Result<(Var, CamTarget)> {
        let x = if self.pool > 1 { pass.tape.avg_pool2d(x, self.pool)? } else { x };
        let x = pass.to_rgb(x)?;
        let p = self.patch;
        let x = pass.conv(x, &format!("{prefix}.patch_embed"), &[p, p], &[0, 0])?;
        let tokens = channels_to_tokens(pass, x)?;
        let (s, g) = (pass.tape.shape(x)[0], pass.tape.shape(x)[2]);
        let d = self.dim;
        let cls = pass.param(&format!("{prefix}.cls_token"))?;
        let cls = pass.tape.gather(cls, (0..s).flat_map(|_| 0..d).collect(), &[s, 1, d])?;
        let mut x = pass.tape.concat(&[cls, tokens], 1)?;
        let t = g * g + 1;
        let pos = pass.param(&format!("{prefix}.pos_embed"))?;
        if pass.tape.shape(pos)[1] != t {
            return Err(Error::Shape(format!("position table covers {} tokens, input has {t}", pass.tape.shape(pos)[1])));
        }
        let pos = pass.tape.gather(pos, (0..s).flat_map(|_| 0..t * d).collect(), &[s, t, d])?;
        x = pass.tape.add(x, pos)?;
        let windows = Windows::global(t);
        for b in 0..self.depth {
            x = block(pass, x, &format!("{prefix}.blocks.{b}"), self.heads, &windows, None)?;
        }
        let target =
            CamTarget { var: x, layout: CamLayout::Tokens { skip: 1, grid: (g, g) }, layer: format!("{prefix}.blocks.{}", self.depth - 1) };
        let normed = pass.layer_norm(x, &format!("{prefix}.norm"))?;
        let cls_idx = (0..s).flat_map(|i| (0..d).map(move |j| i * t * d + j)).collect();
        let feats = pass.tape.gather(normed, cls_idx, &[s, d])?;
        Ok((feats, target))
    }
}

impl SwinConfig {
    pub fn tiny() -> Self {
        Self { pool: 2, patch: 4, embed: 8, depths: vec![2, 2], heads: vec![1, 2], window: 7, mlp_ratio: 2 }
    }

    /// Swin-T layout: embed 96, depths (2, 2, 6, 2), heads (3, 6, 12, 24).
    pub fn swin_t() -> Self {
        Self { pool: 1, patch: 4, embed: 96, depths: vec![2, 2, 6, 2], heads: vec![3, 6, 12, 24], window: 7, mlp_ratio: 4 }
    }

    pub fn out_dim(&self) -> usize {
        self.embed << (self.depths.len() - 1)
    }

    pub(super) fn init<T: Real>(&self, init: &mut Init<'_, T>, prefix: &str) -> Result<()> {
        if self.depths.len() != self.heads.len() || self.depths.is_empty() {
            return Err(Error::Precondition("swin depths and heads must be non-empty and aligned".into()));
        }
        let table = (2 * self.window - 1).pow(2);
        init.conv(&format!("{prefix}.patch_embed"), self.embed, 3, &[self.patch, self.patch], true);
        init.layer_norm(&format!("{prefix}.patch_norm"), self.embed);
        let mut c = self.embed;
        for (si, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            for b in 0..depth {
                block_init(init, &format!("{prefix}.stages.{si}.blocks.{b}"), c, c * self.mlp_ratio, Some((table, heads)));
            }
            if si + 1 < self.depths.len() {
                init.layer_norm(&format!("{prefix}.stages.{si}.merge.norm"), 4 * c);
                init.linear(&format!("{prefix}.stages.{si}.merge.reduction"), 2 * c, 4 * c, false);
                c *= 2;
            }
        }
        init.layer_norm(&format!("{prefix}.norm"), c);
        Ok(())
    }

    pub(super) fn features<T: Real>(&self, pass: &mut Pass<'_, T>, x: Var, prefix: &str) -> Result<(Var, CamTarget)> {
        let x = if self.pool > 1 { pass.tape.avg_pool2d(x, self.pool)? } else { x };
        let x = pass.to_rgb(x)?;
        let x = pass.conv(x, &format!("{prefix}.patch_embed"), &[self.patch; 2], &[0, 0])?;
        let (s, mut res) = (pass.tape.shape(x)[0], pass.tape.shape(x)[2]);
        let mut x = channels_to_tokens(pass, x)?;
        x = pass.layer_norm(x, &format!("{prefix}.patch_norm"))?;
        let mut target = None;
        for (si, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            let m = self.window.min(res);
            if res % m != 0 {
                return Err(Error::Shape(format!("stage {si} resolution {res} is not a multiple of window {m}")));
            }
            for b in 0..depth {
                let shift = if b % 2 == 1 && res > self.window { m / 2 } else { 0 };
                let windows = Windows::shifted(res, m, shift);
                let bp = format!("{prefix}.stages.{si}.blocks.{b}");
                let bias = self.attention_bias(pass, &bp, &windows, s, heads)?;
                x = block(pass, x, &bp, heads, &windows, Some(bias))?;
                target = Some(CamTarget { var: x, layout: CamLayout::Tokens { skip: 0, grid: (res, res) }, layer: bp });
            }
            if si + 1 < self.depths.len() {
                x = patch_merge(pass, x, res, &format!("{prefix}.stages.{si}.merge"))?;
                res /= 2;
            }
        }
        let x = pass.layer_norm(x, &format!("{prefix}.norm"))?;
        let feats = pass.tape.mean_axis(x, 1)?;
        Ok((feats, target.expect("at least one block")))
    }

    /// Relative position bias plus the shifted-window mask, laid out as
    /// `(slices·windows·heads, N, N)`.
    fn attention_bias<T: Real>(&self, pass: &mut Pass<'_, T>, prefix: &str, w: &Windows, s: usize, heads: usize) -> Result<Var> {
        let n = w.size;
        let span = 2 * self.window - 1;
        let table = pass.param(&format!("{prefix}.attn.rel_bias"))?;
        let groups = w.groups();
        let mut idx = Vec::with_capacity(s * groups * heads * n * n);
        for _ in 0..s * groups {
            for h in 0..heads {
                for a in 0..n {
                    for b in 0..n {
                        let (ya, xa) = w.local(a);
                        let (yb, xb) = w.local(b);
                        let r = (ya + self.window - 1 - yb) * span + (xa + self.window - 1 - xb);
                        idx.push(r * heads + h);
                    }
                }
            }
        }
        let shape = [s * groups * heads, n, n];
        let bias = pass.tape.gather(table, idx, &shape)?;
        if w.shift == 0 {
            return Ok(bias);
        }
        let mut mask = Vec::with_capacity(shape.iter().product());
        for _ in 0..s {
            for g in 0..groups {
                for _ in 0..heads {
                    for a in 0..n {
                        for b in 0..n {
                            let same = w.region(g, a) == w.region(g, b);
                            mask.push(if same { T::zero() } else { T::lit(-100.0) });
                        }
                    }
                }
            }
        }
        let mask = pass.tape.constant(Tensor::new(shape.to_vec(), mask)?);
        Ok(pass.tape.add(bias, mask)?)
    }
}

/// Token grouping for attention: group `g`, position `n` maps to token
/// `tokens[g·size + n]` of each sample.
struct Windows {
    size: usize,
    tokens: Vec<usize>,
    /// `(resolution, window side)` for window layouts.
    grid: Option<(usize, usize)>,
    shift: usize,
}

impl Windows {
    fn global(len: usize) -> Self {
        Self { size: len, tokens: (0..len).collect(), grid: None, shift: 0 }
    }

    /// Windows of `m × m` over an `r × r` grid cyclically shifted by `shift`.
    fn shifted(r: usize, m: usize, shift: usize) -> Self {
        let per = r / m;
        let mut tokens = Vec::with_capacity(r * r);
        for wy in 0..per {
            for wx in 0..per {
                for i in 0..m {
                    for j in 0..m {
                        let y = (wy * m + i + shift) % r;
                        let x = (wx * m + j + shift) % r;
                        tokens.push(y * r + x);
                    }
                }
            }
        }
        Self { size: m * m, tokens, grid: Some((r, m)), shift }
    }

    fn groups(&self) -> usize {
        self.tokens.len() / self.size
    }

    fn local(&self, n: usize) -> (usize, usize) {
        let (_, m) = self.grid.expect("window layout");
        (n / m, n % m)
    }

    /// Region label of a position on the shifted grid; attention across
    /// labels is masked.
    fn region(&self, g: usize, n: usize) -> usize {
        let (r, m) = self.grid.expect("window layout");
        let per = r / m;
        let (i, j) = self.local(n);
        let (y, x) = ((g / per) * m + i, (g % per) * m + j);
        let band = |v: usize| {
            if v < r - m {
                0
            } else if v < r - self.shift {
                1
            } else {
                2
            }
        };
        band(y) * 3 + band(x)
    }
}

fn block_init<T: Real>(init: &mut Init<'_, T>, prefix: &str, dim: usize, mlp: usize, rel_bias: Option<(usize, usize)>) {
    init.layer_norm(&format!("{prefix}.norm1"), dim);
    init.linear(&format!("{prefix}.attn.qkv"), 3 * dim, dim, true);
    if let Some((table, heads)) = rel_bias {
        init.normal(&format!("{prefix}.attn.rel_bias"), &[table, heads], 0.02);
    }
    init.linear(&format!("{prefix}.attn.proj"), dim, dim, true);
    init.layer_norm(&format!("{prefix}.norm2"), dim);
    init.linear(&format!("{prefix}.mlp.fc1"), mlp, dim, true);
    init.linear(&format!("{prefix}.mlp.fc2"), dim, mlp, true);
}

/// Pre-norm transformer block over `(S, L, C)` tokens.
fn block<T: Real>(pass: &mut Pass<'_, T>, x: Var, prefix: &str, heads: usize, w: &Windows, bias: Option<Var>) -> Result<Var> {
    let h = pass.layer_norm(x, &format!("{prefix}.norm1"))?;
    let a = attention(pass, h, &format!("{prefix}.attn"), heads, w, bias)?;
    let x = pass.tape.add(x, a)?;
    let h = pass.layer_norm(x, &format!("{prefix}.norm2"))?;
    let h = pass.linear(h, &format!("{prefix}.mlp.fc1"))?;
    let h = pass.tape.gelu(h);
    let h = pass.linear(h, &format!("{prefix}.mlp.fc2"))?;
    Ok(pass.tape.add(x, h)?)
}

/// Multi-head self-attention within token groups.
fn attention<T: Real>(pass: &mut Pass<'_, T>, x: Var, prefix: &str, heads: usize, w: &Windows, bias: Option<Var>) -> Result<Var> {
    let xs = pass.tape.shape(x).to_vec();
    let (s, l, c) = (xs[0], xs[1], xs[2]);
    if c % heads != 0 || w.tokens.len() != l {
        return Err(Error::Shape(format!("attention over {xs:?} with {heads} heads")));
    }
    let dh = c / heads;
    let (g, n) = (w.groups(), w.size);
    let qkv = pass.linear(x, &format!("{prefix}.qkv"))?;
    let split = |part: usize| -> Vec<usize> {
        let mut idx = Vec::with_capacity(s * l * c);
        for si in 0..s {
            for gi in 0..g {
                for h in 0..heads {
                    for ni in 0..n {
                        let tok = w.tokens[gi * n + ni];
                        let base = (si * l + tok) * 3 * c + part * c + h * dh;
                        idx.extend(base..base + dh);
                    }
                }
            }
        }
        idx
    };
    let shape = [s * g * heads, n, dh];
    let q = pass.tape.gather(qkv, split(0), &shape)?;
    let k = pass.tape.gather(qkv, split(1), &shape)?;
    let v = pass.tape.gather(qkv, split(2), &shape)?;
    let scores = pass.tape.bmm(q, k, true)?;
    let mut scores = pass.tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
    if let Some(b) = bias {
        scores = pass.tape.add(scores, b)?;
    }
    let attn = pass.tape.softmax(scores);
    let out = pass.tape.bmm(attn, v, false)?;
    let mut slot = vec![0usize; l];
    for (pos, &tok) in w.tokens.iter().enumerate() {
        slot[tok] = pos;
    }
    let mut idx = Vec::with_capacity(s * l * c);
    for si in 0..s {
        for &pos in &slot {
            let (gi, ni) = (pos / n, pos % n);
            for h in 0..heads {
                let base = (((si * g + gi) * heads + h) * n + ni) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    let merged = pass.tape.gather(out, idx, &[s, l, c])?;
    pass.linear(merged, &format!("{prefix}.proj"))
}

/// `(S, C, H, W)` → `(S, H·W, C)`.
fn channels_to_tokens<T: Real>(pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
    let xs = pass.tape.shape(x).to_vec();
    let (s, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let idx = (0..s).flat_map(|si| (0..hw).flat_map(move |t| (0..c).map(move |ci| (si * c + ci) * hw + t))).collect();
    Ok(pass.tape.gather(x, idx, &[s, hw, c])?)
}

/// Concatenates each 2×2 token neighborhood and projects 4C → 2C.
fn patch_merge<T: Real>(pass: &mut Pass<'_, T>, x: Var, r: usize, prefix: &str) -> Result<Var> {
    let xs = pass.tape.shape(x).to_vec();
    let (s, c) = (xs[0], xs[2]);
    let half = r / 2;
    let mut idx = Vec::with_capacity(s * r * r * c);
    for si in 0..s {
        for y in 0..half {
            for xx in 0..half {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let tok = (2 * y + dy) * r + 2 * xx + dx;
                    let base = (si * r * r + tok) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    let merged = pass.tape.gather(x, idx, &[s, half * half, 4 * c])?;
    let merged = pass.layer_norm(merged, &format!("{prefix}.norm"))?;
    pass.linear(merged, &format!("{prefix}.reduction"))
}
