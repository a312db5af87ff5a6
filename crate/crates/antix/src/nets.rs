//! State-action MLPs with configurable conditioning.
//!
//! A [`FusionNet`] is a trunk of linear layers plus zero or more conditioning
//! blocks that inject the state into the computation. Four block kinds are
//! supported (concatenation, gating, bilinear, FiLM) at four depths (first,
//! penultimate, last, all layers).
//!
//! Wiring conventions:
//! - `Concat` feeds `[s; a]` to the trunk and ignores placement.
//! - Gating/bilinear at `FirstLayer` replace the first linear layer with a
//!   block fusing `(s, a)` directly.
//! - For every other placement the trunk consumes `a` alone and `s` enters
//!   only through the blocks: `PenultimateLayer` replaces the last hidden
//!   linear (gating/bilinear) or modulates its pre-activation (FiLM);
//!   `LastLayer` transforms the final hidden representation right before the
//!   output projection; `AllLayers` gives every hidden layer its own block.
//! - Layer norm, when enabled, sits between each hidden linear and its
//!   activation; FiLM modulates after the norm so the scale it injects
//!   survives.

use rand::Rng;
use thiserror::Error;

use crate::params::Parameterized;
use crate::tape::{Result as TapeResult, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Concat,
    Gating,
    BilinearFull,
    BilinearSimplified,
    Film,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    FirstLayer,
    PenultimateLayer,
    LastLayer,
    AllLayers,
}

impl FusionKind {
    pub fn is_bilinear(self) -> bool {
        matches!(self, FusionKind::BilinearFull | FusionKind::BilinearSimplified)
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("FiLM cannot condition the first layer; it modulates hidden activations")]
    FilmOnFirstLayer,
    #[error("invalid net spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
}

/// Architecture description for one fusion network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub s_dim: usize,
    pub a_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub out_dim: usize,
    pub fusion: FusionKind,
    pub placement: Placement,
    pub use_layer_norm: bool,
}

impl NetSpec {
    /// Paper-scale defaults: width 256, 4 layers, 32-dim embedding.
    pub fn new(s_dim: usize, a_dim: usize) -> Self {
        NetSpec {
            s_dim,
            a_dim,
            hidden_dim: 256,
            num_layers: 4,
            out_dim: 32,
            fusion: FusionKind::Concat,
            placement: Placement::FirstLayer,
            use_layer_norm: false,
        }
    }

    pub fn with_fusion(mut self, fusion: FusionKind, placement: Placement) -> Self {
        self.fusion = fusion;
        self.placement = placement;
        self
    }

    pub fn with_dims(mut self, hidden_dim: usize, num_layers: usize, out_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self.num_layers = num_layers;
        self.out_dim = out_dim;
        self
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.use_layer_norm = on;
        self
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.num_layers < 2 {
            return Err(NetError::InvalidSpec(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim < 1 || self.out_dim < 1 {
            return Err(NetError::InvalidSpec(format!(
                "hidden_dim {} and out_dim {} must be >= 1",
                self.hidden_dim, self.out_dim
            )));
        }
        if self.s_dim + self.a_dim == 0 {
            return Err(NetError::InvalidSpec("s_dim + a_dim must be >= 1".into()));
        }
        if self.fusion == FusionKind::Film && self.placement == Placement::FirstLayer {
            return Err(NetError::FilmOnFirstLayer);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            weight: Tensor::fan_in_uniform(vec![out_dim, in_dim], in_dim, rng),
            bias: Tensor::fan_in_uniform(vec![out_dim], in_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::new(vec![dim], vec![1.0; dim]),
            shift: Tensor::zeros(vec![dim]),
        }
    }
}

/// `out_k = s^T W3[k] x (+ (U s)_k + (V x)_k) + b_k`; the simplified form
/// (`full = false`) has no `U`/`V`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearParams {
    pub w3: Tensor,
    pub u: Option<Tensor>,
    pub v: Option<Tensor>,
    pub b: Tensor,
}

impl BilinearParams {
    pub fn init(out_dim: usize, s_dim: usize, x_dim: usize, full: bool, rng: &mut impl Rng) -> Self {
        let fan = s_dim.max(1) * x_dim.max(1);
        BilinearParams {
            w3: Tensor::fan_in_uniform(vec![out_dim, s_dim, x_dim], fan, rng),
            u: full.then(|| Tensor::fan_in_uniform(vec![out_dim, s_dim], s_dim, rng)),
            v: full.then(|| Tensor::fan_in_uniform(vec![out_dim, x_dim], x_dim, rng)),
            b: Tensor::fan_in_uniform(vec![out_dim], fan, rng),
        }
    }

    pub fn is_full(&self) -> bool {
        self.u.is_some()
    }
}

/// Single linear encoder of double width; first half is gamma, second beta.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub encoder: LinearParams,
}

impl FilmParams {
    pub fn init(hidden_dim: usize, s_dim: usize, rng: &mut impl Rng) -> Self {
        FilmParams {
            encoder: LinearParams::init(2 * hidden_dim, s_dim, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionBlock {
    /// `tanh(a_proj x) * sigmoid(s_proj s)`
    Gating {
        a_proj: LinearParams,
        s_proj: LinearParams,
    },
    Bilinear(BilinearParams),
    Film(FilmParams),
}

/// Whether a forward pass registers this net's parameters for gradients or
/// enters them as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    Train,
    Frozen,
}

// ---------------------------------------------------------------------------
// Fusion primitives on tape vars
// ---------------------------------------------------------------------------

/// `[s; a]` along the feature axis.
pub fn fuse_concat(tape: &mut Tape, s: Var, a: Var) -> TapeResult<Var> {
    tape.concat_cols(s, a)
}

/// `tanh(w_a x + b_a) * sigmoid(w_s s + b_s)`.
pub fn fuse_gating(
    tape: &mut Tape,
    s: Var,
    x: Var,
    a_proj: (Var, Var),
    s_proj: (Var, Var),
) -> TapeResult<Var> {
    let ax = tape.linear(x, a_proj.0, a_proj.1)?;
    let ax = tape.tanh(ax);
    let sx = tape.linear(s, s_proj.0, s_proj.1)?;
    let sx = tape.sigmoid(sx);
    tape.mul(ax, sx)
}

/// `s^T W3 x (+ U s + V x) + b`.
pub fn fuse_bilinear(
    tape: &mut Tape,
    s: Var,
    x: Var,
    w3: Var,
    u: Option<Var>,
    v: Option<Var>,
    b: Var,
) -> TapeResult<Var> {
    tape.bilinear(s, x, w3, u, v, b)
}

/// `gamma(s) * h + beta(s)` where the encoder output splits in half.
pub fn film_modulate(tape: &mut Tape, h: Var, s: Var, encoder: (Var, Var)) -> TapeResult<Var> {
    let enc = tape.linear(s, encoder.0, encoder.1)?;
    let (_, width) = tape.value(h).as_rows();
    let (_, enc_width) = tape.value(enc).as_rows();
    if enc_width != 2 * width {
        return Err(crate::tape::TapeError::Shape {
            op: "film_modulate",
            lhs: tape.value(h).shape().to_vec(),
            rhs: tape.value(enc).shape().to_vec(),
        });
    }
    let gamma = tape.slice_cols(enc, 0, width)?;
    let beta = tape.slice_cols(enc, width, width)?;
    let scaled = tape.mul(gamma, h)?;
    tape.add(scaled, beta)
}

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

/// A trunk of linear layers plus conditioning blocks, per [`NetSpec`].
#[derive(Debug, Clone)]
pub struct FusionNet {
    spec: NetSpec,
    label: String,
    layers: Vec<LinearParams>,
    norms: Vec<Option<LayerNormParams>>,
    blocks: Vec<FusionBlock>,
}

/// Builds a network with fan-in-uniform initialization.
pub fn build_network(spec: &NetSpec, rng: &mut impl Rng) -> Result<FusionNet, NetError> {
    spec.validate()?;
    let l = spec.num_layers;
    let h = spec.hidden_dim;
    let concat = spec.fusion == FusionKind::Concat;
    let trunk_in = if concat { spec.s_dim + spec.a_dim } else { spec.a_dim };

    // Which logical layers keep a linear map.
    let block_replaces_first =
        !concat && spec.fusion != FusionKind::Film && spec.placement == Placement::FirstLayer;
    let block_replaces_penult = !concat
        && spec.fusion != FusionKind::Film
        && spec.placement == Placement::PenultimateLayer;

    let mut layers = Vec::new();
    for logical in 0..l {
        if block_replaces_first && logical == 0 {
            continue;
        }
        if block_replaces_penult && logical == l - 2 {
            continue;
        }
        let in_dim = if logical == 0 { trunk_in } else { h };
        let out_dim = if logical == l - 1 { spec.out_dim } else { h };
        layers.push(LinearParams::init(out_dim, in_dim, rng));
    }

    // One norm slot per hidden stage (logical layers 0..l-1).
    let norms = (0..l - 1)
        .map(|_| spec.use_layer_norm.then(|| LayerNormParams::identity(h)))
        .collect();

    let make_block = |x_dim: usize, rng: &mut _| -> FusionBlock {
        match spec.fusion {
            FusionKind::Gating => FusionBlock::Gating {
                a_proj: LinearParams::init(h, x_dim, rng),
                s_proj: LinearParams::init(h, spec.s_dim, rng),
            },
            FusionKind::BilinearFull => {
                FusionBlock::Bilinear(BilinearParams::init(h, spec.s_dim, x_dim, true, rng))
            }
            FusionKind::BilinearSimplified => {
                FusionBlock::Bilinear(BilinearParams::init(h, spec.s_dim, x_dim, false, rng))
            }
            FusionKind::Film => FusionBlock::Film(FilmParams::init(h, spec.s_dim, rng)),
            FusionKind::Concat => unreachable!("concat has no blocks"),
        }
    };

    let mut blocks = Vec::new();
    if !concat {
        match spec.placement {
            Placement::FirstLayer => blocks.push(make_block(spec.a_dim, rng)),
            Placement::PenultimateLayer => {
                // input width of the replaced/modulated layer
                let x_dim = if l == 2 { spec.a_dim } else { h };
                blocks.push(make_block(x_dim, rng));
            }
            Placement::LastLayer => blocks.push(make_block(h, rng)),
            Placement::AllLayers => {
                for logical in 0..l - 1 {
                    let x_dim = if spec.fusion == FusionKind::Film {
                        h
                    } else if logical == 0 {
                        h // blocks apply to the post-activation hidden
                    } else {
                        h
                    };
                    blocks.push(make_block(x_dim, rng));
                }
            }
        }
    }

    Ok(FusionNet {
        spec: spec.clone(),
        label: "net".to_string(),
        layers,
        norms,
        blocks,
    })
}

impl FusionNet {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn layers(&self) -> &[LinearParams] {
        &self.layers
    }

    pub fn blocks(&self) -> &[FusionBlock] {
        &self.blocks
    }

    fn bind(&self, tape: &mut Tape, mode: Bind, name: String, t: &Tensor) -> TapeResult<Var> {
        match mode {
            Bind::Train => tape.param(name, t),
            Bind::Frozen => Ok(tape.leaf(t.clone())),
        }
    }

    fn bind_lin(
        &self,
        tape: &mut Tape,
        mode: Bind,
        name: &str,
        p: &LinearParams,
    ) -> TapeResult<(Var, Var)> {
        let w = self.bind(tape, mode, format!("{}.{name}.weight", self.label), &p.weight)?;
        let b = self.bind(tape, mode, format!("{}.{name}.bias", self.label), &p.bias)?;
        Ok((w, b))
    }

    fn apply_block(
        &self,
        tape: &mut Tape,
        mode: Bind,
        idx: usize,
        block: &FusionBlock,
        s: Var,
        x: Var,
    ) -> TapeResult<Var> {
        match block {
            FusionBlock::Gating { a_proj, s_proj } => {
                let ap = self.bind_lin(tape, mode, &format!("block{idx}.a_proj"), a_proj)?;
                let sp = self.bind_lin(tape, mode, &format!("block{idx}.s_proj"), s_proj)?;
                fuse_gating(tape, s, x, ap, sp)
            }
            FusionBlock::Bilinear(p) => {
                let w3 = self.bind(tape, mode, format!("{}.block{idx}.w3", self.label), &p.w3)?;
                let u = match &p.u {
                    Some(t) => {
                        Some(self.bind(tape, mode, format!("{}.block{idx}.u", self.label), t)?)
                    }
                    None => None,
                };
                let v = match &p.v {
                    Some(t) => {
                        Some(self.bind(tape, mode, format!("{}.block{idx}.v", self.label), t)?)
                    }
                    None => None,
                };
                let b = self.bind(tape, mode, format!("{}.block{idx}.b", self.label), &p.b)?;
                fuse_bilinear(tape, s, x, w3, u, v, b)
            }
            FusionBlock::Film(p) => {
                let enc = self.bind_lin(tape, mode, &format!("block{idx}.encoder"), &p.encoder)?;
                film_modulate(tape, x, s, enc)
            }
        }
    }

    /// Norm (optional) then FiLM (optional) then relu.
    fn finish_hidden(
        &self,
        tape: &mut Tape,
        mode: Bind,
        stage: usize,
        pre: Var,
        film: Option<(usize, &FusionBlock)>,
        s: Var,
    ) -> TapeResult<Var> {
        let mut x = pre;
        if let Some(ln) = &self.norms[stage] {
            let gain = self.bind(tape, mode, format!("{}.norm{stage}.gain", self.label), &ln.gain)?;
            let shift =
                self.bind(tape, mode, format!("{}.norm{stage}.shift", self.label), &ln.shift)?;
            x = tape.layer_norm(x, gain, shift)?;
        }
        if let Some((idx, block)) = film {
            x = self.apply_block(tape, mode, idx, block, s, x)?;
        }
        Ok(tape.relu(x))
    }

    /// Runs the network on `(s, a)`, returning the `[out_dim]` embedding
    /// (batched when the inputs are batched).
    pub fn forward(&self, tape: &mut Tape, mode: Bind, s: Var, a: Var) -> TapeResult<Var> {
        let spec = &self.spec;
        let l = spec.num_layers;
        let film = spec.fusion == FusionKind::Film;
        let concat = spec.fusion == FusionKind::Concat;

        let mut layer_iter = 0usize; // index into self.layers
        let mut h: Var;

        // Logical layer 0.
        if concat {
            let input = fuse_concat(tape, s, a)?;
            let (w, b) = self.bind_lin(tape, mode, &format!("layer{layer_iter}"), &self.layers[0])?;
            let pre = tape.linear(input, w, b)?;
            layer_iter = 1;
            h = self.finish_hidden(tape, mode, 0, pre, None, s)?;
        } else if !film && spec.placement == Placement::FirstLayer {
            let pre = self.apply_block(tape, mode, 0, &self.blocks[0], s, a)?;
            h = self.finish_hidden(tape, mode, 0, pre, None, s)?;
        } else {
            let replaced = !film && spec.placement == Placement::PenultimateLayer && l == 2;
            let pre = if replaced {
                self.apply_block(tape, mode, 0, &self.blocks[0], s, a)?
            } else {
                let (w, b) =
                    self.bind_lin(tape, mode, &format!("layer{layer_iter}"), &self.layers[0])?;
                layer_iter = 1;
                tape.linear(a, w, b)?
            };
            let film_here = if film {
                match spec.placement {
                    Placement::AllLayers => Some((0, &self.blocks[0])),
                    Placement::PenultimateLayer if l == 2 => Some((0, &self.blocks[0])),
                    _ => None,
                }
            } else {
                None
            };
            h = self.finish_hidden(tape, mode, 0, pre, film_here, s)?;
        }
        if !concat && !film && spec.placement == Placement::AllLayers {
            h = self.apply_block(tape, mode, 0, &self.blocks[0], s, h)?;
        }

        // Logical hidden layers 1..l-1.
        for logical in 1..l - 1 {
            let penult = logical == l - 2;
            let pre = if !concat && !film && spec.placement == Placement::PenultimateLayer && penult
            {
                self.apply_block(tape, mode, 0, &self.blocks[0], s, h)?
            } else {
                let (w, b) = self.bind_lin(
                    tape,
                    mode,
                    &format!("layer{layer_iter}"),
                    &self.layers[layer_iter],
                )?;
                layer_iter += 1;
                tape.linear(h, w, b)?
            };
            let film_here = if film {
                match spec.placement {
                    Placement::AllLayers => Some((logical, &self.blocks[logical])),
                    Placement::PenultimateLayer if penult => Some((0, &self.blocks[0])),
                    _ => None,
                }
            } else {
                None
            };
            h = self.finish_hidden(tape, mode, logical, pre, film_here, s)?;
            if !concat && !film && spec.placement == Placement::AllLayers {
                h = self.apply_block(tape, mode, logical, &self.blocks[logical], s, h)?;
            }
        }

        // Last-layer conditioning transforms the final hidden representation.
        if spec.placement == Placement::LastLayer && !concat {
            h = self.apply_block(tape, mode, 0, &self.blocks[0], s, h)?;
        }

        // Output projection.
        let (w, b) = self.bind_lin(
            tape,
            mode,
            &format!("layer{layer_iter}"),
            &self.layers[layer_iter],
        )?;
        tape.linear(h, w, b)
    }

    /// Convenience forward without gradients, for plain `Tensor` inputs.
    pub fn eval(&self, s: &Tensor, a: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let av = tape.leaf(a.clone());
        let out = self
            .forward(&mut tape, Bind::Frozen, sv, av)
            .expect("forward failed on frozen eval");
        tape.value(out).clone()
    }
}

impl Parameterized for FusionNet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let label = &self.label;
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{label}.layer{i}.weight"), &l.weight);
            f(&format!("{label}.layer{i}.bias"), &l.bias);
        }
        for (i, n) in self.norms.iter().enumerate() {
            if let Some(n) = n {
                f(&format!("{label}.norm{i}.gain"), &n.gain);
                f(&format!("{label}.norm{i}.shift"), &n.shift);
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                FusionBlock::Gating { a_proj, s_proj } => {
                    f(&format!("{label}.block{i}.a_proj.weight"), &a_proj.weight);
                    f(&format!("{label}.block{i}.a_proj.bias"), &a_proj.bias);
                    f(&format!("{label}.block{i}.s_proj.weight"), &s_proj.weight);
                    f(&format!("{label}.block{i}.s_proj.bias"), &s_proj.bias);
                }
                FusionBlock::Bilinear(p) => {
                    f(&format!("{label}.block{i}.w3"), &p.w3);
                    if let Some(u) = &p.u {
                        f(&format!("{label}.block{i}.u"), u);
                    }
                    if let Some(v) = &p.v {
                        f(&format!("{label}.block{i}.v"), v);
                    }
                    f(&format!("{label}.block{i}.b"), &p.b);
                }
                FusionBlock::Film(p) => {
                    f(&format!("{label}.block{i}.encoder.weight"), &p.encoder.weight);
                    f(&format!("{label}.block{i}.encoder.bias"), &p.encoder.bias);
                }
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let label = self.label.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{label}.layer{i}.weight"), &mut l.weight);
            f(&format!("{label}.layer{i}.bias"), &mut l.bias);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            if let Some(n) = n {
                f(&format!("{label}.norm{i}.gain"), &mut n.gain);
                f(&format!("{label}.norm{i}.shift"), &mut n.shift);
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match b {
                FusionBlock::Gating { a_proj, s_proj } => {
                    f(&format!("{label}.block{i}.a_proj.weight"), &mut a_proj.weight);
                    f(&format!("{label}.block{i}.a_proj.bias"), &mut a_proj.bias);
                    f(&format!("{label}.block{i}.s_proj.weight"), &mut s_proj.weight);
                    f(&format!("{label}.block{i}.s_proj.bias"), &mut s_proj.bias);
                }
                FusionBlock::Bilinear(p) => {
                    f(&format!("{label}.block{i}.w3"), &mut p.w3);
                    if let Some(u) = &mut p.u {
                        f(&format!("{label}.block{i}.u"), u);
                    }
                    if let Some(v) = &mut p.v {
                        f(&format!("{label}.block{i}.v"), v);
                    }
                    f(&format!("{label}.block{i}.b"), &mut p.b);
                }
                FusionBlock::Film(p) => {
                    f(&format!("{label}.block{i}.encoder.weight"), &mut p.encoder.weight);
                    f(&format!("{label}.block{i}.encoder.bias"), &mut p.encoder.bias);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, Differentiable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn concat_basics() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(vec![1.0]));
        let a = tape.leaf(Tensor::vector(vec![2.0]));
        let c = fuse_concat(&mut tape, s, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

        // empty-state edge
        let e = tape.leaf(Tensor::vector(vec![]));
        let a2 = tape.leaf(Tensor::vector(vec![3.0]));
        let c2 = fuse_concat(&mut tape, e, a2).unwrap();
        assert_eq!(tape.value(c2).data(), &[3.0]);

        // splitting recovers both parts
        let s3 = tape.leaf(Tensor::vector(vec![0.5, -0.5]));
        let a3 = tape.leaf(Tensor::vector(vec![0.25]));
        let c3 = fuse_concat(&mut tape, s3, a3).unwrap();
        let back_s = tape.slice_cols(c3, 0, 2).unwrap();
        let back_a = tape.slice_cols(c3, 2, 1).unwrap();
        assert_eq!(tape.value(back_s).data(), tape.value(s3).data());
        assert_eq!(tape.value(back_a).data(), tape.value(a3).data());
    }

    fn gating_fixture(
        tape: &mut Tape,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        s: &[f64],
        a: &[f64],
    ) -> Var {
        let sv = tape.leaf(Tensor::vector(s.to_vec()));
        let av = tape.leaf(Tensor::vector(a.to_vec()));
        let w1 = tape.leaf(w1);
        let b1 = tape.leaf(b1);
        let w2 = tape.leaf(w2);
        let b2 = tape.leaf(b2);
        fuse_gating(tape, sv, av, (w1, b1), (w2, b2)).unwrap()
    }

    #[test]
    fn gating_zero_action_projection_annihilates() {
        let mut tape = Tape::new();
        let out = gating_fixture(
            &mut tape,
            Tensor::zeros(vec![3, 2]),
            Tensor::zeros(vec![3]),
            Tensor::matrix(3, 2, vec![1.0; 6]),
            Tensor::vector(vec![0.3; 3]),
            &[4.0, -2.0],
            &[1.0, 1.0],
        );
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gating_saturated_state_gate_passes_tanh() {
        let w1 = Tensor::matrix(2, 2, vec![0.4, -0.2, 0.1, 0.9]);
        let b1 = Tensor::vector(vec![0.05, -0.3]);
        let mut tape = Tape::new();
        let out = gating_fixture(
            &mut tape,
            w1.clone(),
            b1.clone(),
            Tensor::zeros(vec![2, 2]),
            Tensor::vector(vec![50.0, 50.0]), // sigmoid saturates to 1
            &[0.7, 0.1],
            &[0.2, -0.6],
        );
        let a = [0.2, -0.6];
        for k in 0..2 {
            let pre = w1.data()[k * 2] * a[0] + w1.data()[k * 2 + 1] * a[1] + b1.data()[k];
            assert!((tape.value(out).data()[k] - pre.tanh()).abs() < 1e-9);
        }
    }

    #[test]
    fn gating_matches_scalar_loop_oracle() {
        let mut r = rng(2);
        let p1 = LinearParams::init(4, 3, &mut r);
        let p2 = LinearParams::init(4, 2, &mut r);
        let s = [0.3, -0.9];
        let a = [0.5, 0.1, -0.4];
        let mut tape = Tape::new();
        let out = gating_fixture(
            &mut tape,
            p1.weight.clone(),
            p1.bias.clone(),
            p2.weight.clone(),
            p2.bias.clone(),
            &s,
            &a,
        );
        for k in 0..4 {
            let mut za = p1.bias.data()[k];
            for i in 0..3 {
                za += p1.weight.data()[k * 3 + i] * a[i];
            }
            let mut zs = p2.bias.data()[k];
            for i in 0..2 {
                zs += p2.weight.data()[k * 2 + i] * s[i];
            }
            let expect = za.tanh() * (1.0 / (1.0 + (-zs).exp()));
            assert!((tape.value(out).data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_zero_inputs_return_bias() {
        let mut r = rng(3);
        let p = BilinearParams::init(3, 2, 2, false, &mut r);
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let a = tape.leaf(Tensor::vector(vec![0.7, -0.3]));
        let w3 = tape.leaf(p.w3.clone());
        let b = tape.leaf(p.b.clone());
        let out = fuse_bilinear(&mut tape, s, a, w3, None, None, b).unwrap();
        assert_eq!(tape.value(out).data(), p.b.data());
    }

    #[test]
    fn bilinear_basis_vectors_extract_weight_entries() {
        let mut r = rng(4);
        let p = BilinearParams::init(3, 2, 4, false, &mut r);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = vec![0.0; 2];
                s[i] = 1.0;
                let mut a = vec![0.0; 4];
                a[j] = 1.0;
                let mut tape = Tape::new();
                let sv = tape.leaf(Tensor::vector(s));
                let av = tape.leaf(Tensor::vector(a));
                let w3 = tape.leaf(p.w3.clone());
                let b = tape.leaf(Tensor::zeros(vec![3]));
                let out = fuse_bilinear(&mut tape, sv, av, w3, None, None, b).unwrap();
                for k in 0..3 {
                    let expect = p.w3.data()[k * 2 * 4 + i * 4 + j];
                    assert!((tape.value(out).data()[k] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn bilinear_full_matches_triple_loop_oracle() {
        let mut r = rng(5);
        let p = BilinearParams::init(3, 2, 4, true, &mut r);
        let s = [0.4, -1.1];
        let a = [0.2, 0.9, -0.5, 0.3];
        let mut tape = Tape::new();
        let sv = tape.leaf(Tensor::vector(s.to_vec()));
        let av = tape.leaf(Tensor::vector(a.to_vec()));
        let w3 = tape.leaf(p.w3.clone());
        let u = tape.leaf(p.u.clone().unwrap());
        let v = tape.leaf(p.v.clone().unwrap());
        let b = tape.leaf(p.b.clone());
        let out = fuse_bilinear(&mut tape, sv, av, w3, Some(u), Some(v), b).unwrap();
        for k in 0..3 {
            let mut expect = p.b.data()[k];
            for i in 0..2 {
                for j in 0..4 {
                    expect += s[i] * p.w3.data()[k * 8 + i * 4 + j] * a[j];
                }
            }
            for i in 0..2 {
                expect += p.u.as_ref().unwrap().data()[k * 2 + i] * s[i];
            }
            for j in 0..4 {
                expect += p.v.as_ref().unwrap().data()[k * 4 + j] * a[j];
            }
            assert!((tape.value(out).data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn film_identity_and_constant_encodings() {
        let h_vals = [0.5, -1.5, 2.0];
        // weights 0, bias = (ones || zeros) -> identity
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::vector(h_vals.to_vec()));
        let s = tape.leaf(Tensor::vector(vec![0.3, 0.4]));
        let w = tape.leaf(Tensor::zeros(vec![6, 2]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
        let out = film_modulate(&mut tape, h, s, (w, b)).unwrap();
        assert_eq!(tape.value(out).data(), &h_vals);

        // bias = (zeros || c) -> constant c
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::vector(h_vals.to_vec()));
        let s = tape.leaf(Tensor::vector(vec![0.3, 0.4]));
        let w = tape.leaf(Tensor::zeros(vec![6, 2]));
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0, 7.0, 7.0, 7.0]));
        let out = film_modulate(&mut tape, h, s, (w, b)).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, 7.0, 7.0]);
    }

    struct NetProbe {
        net: FusionNet,
        s: Tensor,
        a: Tensor,
    }

    impl Differentiable for NetProbe {
        fn scalar_loss(&self, tape: &mut Tape) -> crate::tape::Result<Var> {
            let s = tape.param("input.s", &self.s)?;
            let a = tape.param("input.a", &self.a)?;
            let out = self.net.forward(tape, Bind::Train, s, a)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        }
        fn trainables_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            let mut out: Vec<(String, *mut Tensor)> = vec![
                ("input.s".into(), &mut self.s as *mut _),
                ("input.a".into(), &mut self.a as *mut _),
            ];
            self.net.visit_params_mut(&mut |name, t| {
                out.push((name.to_string(), t as *mut _));
            });
            // SAFETY: pointers reference disjoint fields that outlive this call.
            out.into_iter()
                .map(|(n, p)| (n, unsafe { &mut *p }))
                .collect()
        }
    }

    fn all_valid_specs(use_ln: bool) -> Vec<NetSpec> {
        let kinds = [
            FusionKind::Concat,
            FusionKind::Gating,
            FusionKind::BilinearFull,
            FusionKind::BilinearSimplified,
            FusionKind::Film,
        ];
        let placements = [
            Placement::FirstLayer,
            Placement::PenultimateLayer,
            Placement::LastLayer,
            Placement::AllLayers,
        ];
        let mut specs = Vec::new();
        for kind in kinds {
            for placement in placements {
                if kind == FusionKind::Film && placement == Placement::FirstLayer {
                    continue;
                }
                specs.push(
                    NetSpec::new(3, 2)
                        .with_dims(6, 3, 4)
                        .with_fusion(kind, placement)
                        .with_layer_norm(use_ln),
                );
            }
        }
        specs
    }

    #[test]
    fn output_shape_sweep_over_all_kinds_and_placements() {
        for spec in all_valid_specs(false) {
            let net = build_network(&spec, &mut rng(9)).unwrap();
            let out = net.eval(
                &Tensor::vector(vec![0.2, -0.4, 0.8]),
                &Tensor::vector(vec![0.5, -0.1]),
            );
            assert_eq!(out.shape(), &[4], "spec {spec:?}");
            assert!(out.all_finite(), "spec {spec:?}");

            // batched path agrees with per-row evaluation
            let s = Tensor::matrix(2, 3, vec![0.2, -0.4, 0.8, 1.0, 0.0, -1.0]);
            let a = Tensor::matrix(2, 2, vec![0.5, -0.1, -0.9, 0.3]);
            let batched = net.eval(&s, &a);
            assert_eq!(batched.shape(), &[2, 4]);
            let row1 = net.eval(
                &Tensor::vector(s.row(1).to_vec()),
                &Tensor::vector(a.row(1).to_vec()),
            );
            for (x, y) in batched.row(1).iter().zip(row1.data()) {
                assert!((x - y).abs() < 1e-12, "spec {spec:?}");
            }
        }
    }

    #[test]
    fn grad_check_passes_for_every_fusion_and_placement() {
        for spec in all_valid_specs(true) {
            let net = build_network(&spec, &mut rng(10)).unwrap();
            let mut probe = NetProbe {
                net,
                s: Tensor::vector(vec![0.21, -0.43, 0.85]),
                a: Tensor::vector(vec![0.52, -0.11]),
            };
            let err = grad_check(&mut probe, 1e-5);
            assert!(err < 1e-4, "spec {spec:?} grad_check error {err}");
        }
    }

    #[test]
    fn film_on_first_layer_is_a_construction_error() {
        let spec = NetSpec::new(3, 2).with_fusion(FusionKind::Film, Placement::FirstLayer);
        assert!(matches!(
            build_network(&spec, &mut rng(1)),
            Err(NetError::FilmOnFirstLayer)
        ));
    }

    #[test]
    fn concat_parameter_count_matches_closed_form() {
        let spec = NetSpec::new(5, 3).with_dims(16, 4, 8);
        let net = build_network(&spec, &mut rng(2)).unwrap();
        let (ins, h, o) = (8, 16, 8);
        let expect = (ins * h + h) + 2 * (h * h + h) + (h * o + o);
        assert_eq!(net.param_count(), expect);
    }

    #[test]
    fn film_penultimate_structure() {
        let spec = NetSpec::new(5, 3)
            .with_dims(16, 4, 8)
            .with_fusion(FusionKind::Film, Placement::PenultimateLayer);
        let net = build_network(&spec, &mut rng(2)).unwrap();
        // trunk consumes the action alone
        assert_eq!(net.layers()[0].in_dim(), 3);
        assert_eq!(net.layers().len(), 4);
        match &net.blocks()[0] {
            FusionBlock::Film(p) => assert_eq!(p.encoder.out_dim(), 32),
            other => panic!("expected film block, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = NetSpec::new(4, 2)
            .with_dims(8, 3, 4)
            .with_fusion(FusionKind::Gating, Placement::AllLayers);
        let a = build_network(&spec, &mut rng(77)).unwrap();
        let b = build_network(&spec, &mut rng(77)).unwrap();
        assert_eq!(a.named_params(), b.named_params());
    }

    #[test]
    fn bilinear_full_with_zeroed_uv_equals_simplified() {
        let spec_full = NetSpec::new(3, 2)
            .with_dims(6, 3, 4)
            .with_fusion(FusionKind::BilinearFull, Placement::FirstLayer);
        let spec_simple = spec_full
            .clone()
            .with_fusion(FusionKind::BilinearSimplified, Placement::FirstLayer);
        let mut full = build_network(&spec_full, &mut rng(12)).unwrap();
        let mut simple = build_network(&spec_simple, &mut rng(13)).unwrap();

        // copy shared parameters from full to simple, zero u/v in full
        let source: std::collections::BTreeMap<String, Tensor> =
            full.named_params().into_iter().collect();
        simple.visit_params_mut(&mut |name, t| {
            *t = source[name].clone();
        });
        full.visit_params_mut(&mut |name, t| {
            if name.ends_with(".u") || name.ends_with(".v") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        });

        let s = Tensor::vector(vec![0.4, -0.2, 0.9]);
        let a = Tensor::vector(vec![-0.6, 0.3]);
        assert_eq!(full.eval(&s, &a), simple.eval(&s, &a));
    }

    #[test]
    fn film_identity_modulation_equals_plain_trunk() {
        let spec = NetSpec::new(3, 2)
            .with_dims(6, 4, 4)
            .with_fusion(FusionKind::Film, Placement::PenultimateLayer);
        let mut net = build_network(&spec, &mut rng(21)).unwrap();
        // encoder: weights zero, bias = (ones || zeros) -> gamma 1, beta 0
        net.visit_params_mut(&mut |name, t| {
            if name.contains("encoder.weight") {
                *t = Tensor::zeros(t.shape().to_vec());
            } else if name.contains("encoder.bias") {
                let h = t.numel() / 2;
                let mut data = vec![0.0; t.numel()];
                data[..h].fill(1.0);
                *t = Tensor::new(t.shape().to_vec(), data);
            }
        });

        let s = Tensor::vector(vec![0.4, -0.2, 0.9]);
        let a = Tensor::vector(vec![-0.6, 0.3]);
        let with_film = net.eval(&s, &a);

        // independent recomputation of the bare trunk
        let mut tape = Tape::new();
        let mut h = tape.leaf(a.clone());
        for (i, layer) in net.layers().iter().enumerate() {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            h = tape.linear(h, w, b).unwrap();
            if i + 1 < net.layers().len() {
                h = tape.relu(h);
            }
        }
        let plain = tape.value(h).clone();
        assert!(with_film.max_abs_diff(&plain) < 1e-12);
    }
}
