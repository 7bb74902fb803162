//! The full block stack at desk scale: conv stem, positional depthwise
//! convolution, decayed-attention token mixer with local context
//! enhancement, FFN, patch merging, variant presets, and exact parameter /
//! multiply-add accounting.

use std::collections::BTreeMap;

use crate::analysis::{embed_group_attention, AttnLayer, AttnReport};
use crate::attention::{
    attend_grouped_head, attend_head, attention_flops, make_group_plan, AttnMode, FlopsVariant,
    GroupKind,
};
use crate::decay::{DecayCache, DecayKind, DecaySpec, GridCoords, HeadGammaSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Token mixer used by a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    /// Blocks alternate contiguous and dilated 1-D grouping, starting
    /// contiguous.
    GroupedAlternating,
    /// Every block uses full decayed attention.
    Full,
}

#[derive(Clone, Debug)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub group_size: usize,
    pub ffn_ratio: usize,
    pub mixer: MixerKind,
}

/// Four 3x3 stem convolutions (channel, stride) applied to the RGB input.
#[derive(Clone, Debug)]
pub struct StemConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct VariantConfig {
    pub name: String,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub decay_kind: DecayKind,
    pub rbf_scale: f64,
    pub gamma_base_exponent: i32,
    /// Channel width of the pre-pooling head expansion.
    pub head_expansion: usize,
    pub num_classes: usize,
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > 4 {
            return Err(Error::argument("variant_config", "1 to 4 stages"));
        }
        if self.stem.channels.len() != 4 || self.stem.strides.len() != 4 {
            return Err(Error::argument("variant_config", "stem has four convs"));
        }
        if self.stages.last().unwrap().mixer != MixerKind::Full {
            return Err(Error::argument(
                "variant_config",
                "final stage uses full attention",
            ));
        }
        for s in &self.stages {
            if s.embed_dim % s.heads != 0 {
                return Err(Error::argument(
                    "variant_config",
                    format!(
                        "embed_dim {} not divisible by heads {}",
                        s.embed_dim, s.heads
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Total downsampling factor from input to the last stage.
    pub fn total_stride(&self) -> usize {
        let stem: usize = self.stem.strides.iter().product();
        stem << (self.stages.len() - 1)
    }

    pub fn decay_spec(&self, gamma: f64) -> Result<DecaySpec> {
        DecaySpec::with_scale(self.decay_kind, gamma, self.rbf_scale)
    }
}

fn paper_stem(c: usize, c_out: usize) -> StemConfig {
    StemConfig {
        channels: vec![c, c, c, c_out],
        strides: vec![2, 1, 1, 2],
    }
}

fn paper_stage(dim: usize, depth: usize, heads: usize, k: usize, mixer: MixerKind) -> StageConfig {
    StageConfig {
        embed_dim: dim,
        depth,
        heads,
        group_size: k,
        ffn_ratio: 3,
        mixer,
    }
}

fn paper_variant(
    name: &str,
    stem: (usize, usize),
    dims: [usize; 4],
    depths: [usize; 4],
    heads: [usize; 4],
) -> VariantConfig {
    let mixers = [
        MixerKind::GroupedAlternating,
        MixerKind::GroupedAlternating,
        MixerKind::GroupedAlternating,
        MixerKind::Full,
    ];
    let ks = [98, 98, 98, 49];
    VariantConfig {
        name: name.to_string(),
        stem: paper_stem(stem.0, stem.1),
        stages: (0..4)
            .map(|i| paper_stage(dims[i], depths[i], heads[i], ks[i], mixers[i]))
            .collect(),
        decay_kind: DecayKind::Euclidean,
        rbf_scale: 1.0,
        gamma_base_exponent: 3,
        head_expansion: 1280,
        num_classes: 1000,
    }
}

pub fn evt_t() -> VariantConfig {
    paper_variant(
        "evt-t",
        (32, 64),
        [64, 128, 256, 512],
        [2, 2, 9, 2],
        [2, 4, 8, 16],
    )
}

pub fn evt_s() -> VariantConfig {
    paper_variant(
        "evt-s",
        (32, 64),
        [64, 128, 256, 512],
        [4, 4, 18, 4],
        [2, 4, 8, 16],
    )
}

pub fn evt_b() -> VariantConfig {
    paper_variant(
        "evt-b",
        (40, 80),
        [80, 160, 320, 512],
        [4, 8, 26, 9],
        [2, 4, 8, 16],
    )
}

pub fn evt_l() -> VariantConfig {
    paper_variant(
        "evt-l",
        (56, 112),
        [112, 224, 448, 640],
        [4, 8, 26, 9],
        [4, 8, 14, 20],
    )
}

pub fn evt_xl() -> VariantConfig {
    paper_variant(
        "evt-xl",
        (64, 128),
        [128, 256, 512, 1024],
        [6, 12, 28, 12],
        [4, 8, 16, 32],
    )
}

/// Two-stage model small enough to train on the quadrant-blob task in
/// seconds while keeping every architectural piece.
pub fn micro() -> VariantConfig {
    VariantConfig {
        name: "micro".to_string(),
        stem: StemConfig {
            channels: vec![8, 8, 8, 16],
            strides: vec![2, 1, 1, 2],
        },
        stages: vec![
            StageConfig {
                embed_dim: 16,
                depth: 1,
                heads: 2,
                group_size: 16,
                ffn_ratio: 2,
                mixer: MixerKind::GroupedAlternating,
            },
            StageConfig {
                embed_dim: 24,
                depth: 1,
                heads: 2,
                group_size: 16,
                ffn_ratio: 2,
                mixer: MixerKind::Full,
            },
        ],
        decay_kind: DecayKind::Euclidean,
        rbf_scale: 1.0,
        gamma_base_exponent: 3,
        head_expansion: 32,
        num_classes: 4,
    }
}

/// Even smaller two-stage model (dims 8/16) for exhaustive finite-difference
/// checks over every parameter.
pub fn micro_small() -> VariantConfig {
    VariantConfig {
        name: "micro-small".to_string(),
        stem: StemConfig {
            channels: vec![4, 4, 4, 8],
            strides: vec![2, 1, 1, 2],
        },
        stages: vec![
            StageConfig {
                embed_dim: 8,
                depth: 1,
                heads: 2,
                group_size: 8,
                ffn_ratio: 2,
                mixer: MixerKind::GroupedAlternating,
            },
            StageConfig {
                embed_dim: 16,
                depth: 1,
                heads: 2,
                group_size: 16,
                ffn_ratio: 2,
                mixer: MixerKind::Full,
            },
        ],
        decay_kind: DecayKind::Euclidean,
        rbf_scale: 1.0,
        gamma_base_exponent: 3,
        head_expansion: 16,
        num_classes: 4,
    }
}

pub fn variant_by_name(name: &str) -> Option<VariantConfig> {
    match name {
        "evt-t" => Some(evt_t()),
        "evt-s" => Some(evt_s()),
        "evt-b" => Some(evt_b()),
        "evt-l" => Some(evt_l()),
        "evt-xl" => Some(evt_xl()),
        "micro" => Some(micro()),
        "micro-small" => Some(micro_small()),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// weight enumeration, counting, and initialization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zero,
    One,
}

#[derive(Clone, Debug)]
pub struct WeightSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear_specs(out: &mut Vec<WeightSpec>, name: &str, d_in: usize, d_out: usize) {
    out.push(WeightSpec {
        name: format!("{name}.w"),
        shape: vec![d_in, d_out],
        init: Init::TruncNormal,
    });
    out.push(WeightSpec {
        name: format!("{name}.b"),
        shape: vec![d_out],
        init: Init::Zero,
    });
}

fn norm_specs(out: &mut Vec<WeightSpec>, name: &str, d: usize) {
    out.push(WeightSpec {
        name: format!("{name}.g"),
        shape: vec![d],
        init: Init::One,
    });
    out.push(WeightSpec {
        name: format!("{name}.b"),
        shape: vec![d],
        init: Init::Zero,
    });
}

/// Weight tensors of one block under the given name prefix.
pub fn block_weight_specs(out: &mut Vec<WeightSpec>, p: &str, c: usize, ffn_ratio: usize) {
    out.push(WeightSpec {
        name: format!("{p}.cpe"),
        shape: vec![c, 3, 3],
        init: Init::Zero,
    });
    norm_specs(out, &format!("{p}.ln1"), c);
    linear_specs(out, &format!("{p}.wq"), c, c);
    linear_specs(out, &format!("{p}.wk"), c, c);
    linear_specs(out, &format!("{p}.wv"), c, c);
    out.push(WeightSpec {
        name: format!("{p}.lce"),
        shape: vec![c, 5, 5],
        init: Init::Zero,
    });
    linear_specs(out, &format!("{p}.wo"), c, c);
    norm_specs(out, &format!("{p}.ln2"), c);
    linear_specs(out, &format!("{p}.fc1"), c, c * ffn_ratio);
    linear_specs(out, &format!("{p}.fc2"), c * ffn_ratio, c);
}

/// Deterministic enumeration of every weight tensor in construction order.
/// Parameter counting, initialization, and serialization all share it.
pub fn weight_specs(cfg: &VariantConfig) -> Vec<WeightSpec> {
    let mut out = Vec::new();
    let mut c_in = 3;
    for (i, &c) in cfg.stem.channels.iter().enumerate() {
        out.push(WeightSpec {
            name: format!("stem.{i}.w"),
            shape: vec![c, c_in, 3, 3],
            init: Init::TruncNormal,
        });
        out.push(WeightSpec {
            name: format!("stem.{i}.b"),
            shape: vec![c],
            init: Init::Zero,
        });
        norm_specs(&mut out, &format!("stem.{i}.ln"), c);
        c_in = c;
    }
    for (s, stage) in cfg.stages.iter().enumerate() {
        let c = stage.embed_dim;
        if s > 0 {
            out.push(WeightSpec {
                name: format!("merge.{s}.w"),
                shape: vec![c, cfg.stages[s - 1].embed_dim, 3, 3],
                init: Init::TruncNormal,
            });
            out.push(WeightSpec {
                name: format!("merge.{s}.b"),
                shape: vec![c],
                init: Init::Zero,
            });
            norm_specs(&mut out, &format!("merge.{s}.ln"), c);
        }
        for b in 0..stage.depth {
            block_weight_specs(&mut out, &format!("stage{s}.block{b}"), c, stage.ffn_ratio);
        }
    }
    let c_last = cfg.stages.last().unwrap().embed_dim;
    norm_specs(&mut out, "head.ln", c_last);
    linear_specs(&mut out, "head.expand", c_last, cfg.head_expansion);
    linear_specs(&mut out, "head.fc", cfg.head_expansion, cfg.num_classes);
    out
}

/// Exact parameter count over all weights and affine parameters.
pub fn count_params(cfg: &VariantConfig) -> u64 {
    weight_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum()
}

/// Model weights addressed by name, in spec order.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub specs: Vec<WeightSpec>,
    pub tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ModelWeights {
    pub fn init(cfg: &VariantConfig, seed: u64) -> Self {
        let specs = weight_specs(cfg);
        let mut rng = Rng::new(seed ^ 0x5eed_f00d);
        let tensors: Vec<Tensor> = specs
            .iter()
            .map(|spec| {
                let numel: usize = spec.shape.iter().product();
                match spec.init {
                    Init::Zero => Tensor::zeros(&spec.shape),
                    Init::One => Tensor::ones(&spec.shape),
                    Init::TruncNormal => Tensor::new(
                        spec.shape.clone(),
                        (0..numel).map(|_| rng.trunc_normal(0.02)).collect(),
                    )
                    .unwrap(),
                }
            })
            .collect();
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        ModelWeights {
            specs,
            tensors,
            index,
        }
    }

    pub fn from_tensors(specs: Vec<WeightSpec>, tensors: Vec<Tensor>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::argument(
                "model_weights",
                "spec/tensor count mismatch",
            ));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape(
                    "model_weights",
                    format!("{}: {:?} vs {:?}", s.name, s.shape, t.shape()),
                ));
            }
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(ModelWeights {
            specs,
            tensors,
            index,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn numel(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }
}

// ---------------------------------------------------------------------------
// forward graph construction
// ---------------------------------------------------------------------------

/// Weight leaves on a tape, addressable by name.
pub struct BoundWeights {
    pub ids: Vec<VarId>,
    index: BTreeMap<String, usize>,
}

impl BoundWeights {
    pub fn bind(tape: &mut Tape, weights: &ModelWeights) -> Self {
        let ids = weights
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        BoundWeights {
            ids,
            index: weights.index.clone(),
        }
    }

    /// Wrap existing tape leaves, named by the given specs in order.
    pub fn from_ids(ids: Vec<VarId>, specs: &[WeightSpec]) -> Self {
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        BoundWeights { ids, index }
    }

    pub fn get(&self, name: &str) -> VarId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown weight {name}"))]
    }
}

/// [C, H, W] activations to [N, C] tokens.
fn to_tokens(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// [N, C] tokens back to [C, H, W].
fn to_chw(tape: &mut Tape, x: VarId, h: usize, w: usize) -> Result<VarId> {
    let t = tape.transpose(x)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, &[c, h, w])
}

fn linear(tape: &mut Tape, x: VarId, p: &BoundWeights, name: &str) -> Result<VarId> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// conv 3x3 -> channel layer norm -> GELU, used by the stem and the merges.
fn conv_ln_gelu(
    tape: &mut Tape,
    x: VarId,
    p: &BoundWeights,
    name: &str,
    stride: usize,
) -> Result<VarId> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let y = tape.conv2d(x, w, Some(b), stride, 1)?;
    let shape = tape.shape(y).to_vec();
    let tokens = to_tokens(tape, y)?;
    let g = p.get(&format!("{name}.ln.g"));
    let beta = p.get(&format!("{name}.ln.b"));
    let normed = tape.layer_norm(tokens, g, beta, LN_EPS)?;
    let act = tape.gelu(normed);
    to_chw(tape, act, shape[1], shape[2])
}

/// Four-convolution downsampling front end.
pub fn conv_stem(
    tape: &mut Tape,
    image: VarId,
    cfg: &VariantConfig,
    p: &BoundWeights,
) -> Result<VarId> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(
            "conv_stem",
            format!("expected [3,H,W], got {shape:?}"),
        ));
    }
    let stride: usize = cfg.stem.strides.iter().product();
    if shape[1] % stride != 0 || shape[2] % stride != 0 {
        return Err(Error::shape(
            "conv_stem",
            format!(
                "resolution {}x{} not divisible by {stride}",
                shape[1], shape[2]
            ),
        ));
    }
    let mut x = image;
    for i in 0..4 {
        x = conv_ln_gelu(tape, x, p, &format!("stem.{i}"), cfg.stem.strides[i])?;
    }
    Ok(x)
}

/// Stride-2 3x3 convolution to the next stage width.
pub fn patch_merge(tape: &mut Tape, x: VarId, p: &BoundWeights, stage: usize) -> Result<VarId> {
    let shape = tape.shape(x).to_vec();
    if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return Err(Error::shape(
            "patch_merge",
            format!("odd spatial dims {shape:?}"),
        ));
    }
    conv_ln_gelu(tape, x, p, &format!("merge.{stage}"), 2)
}

/// Residual positional encoding: x + depthwise 3x3 conv of x.
pub fn cpe(tape: &mut Tape, x: VarId, kernel: VarId) -> Result<VarId> {
    let conv = tape.depthwise_conv2d(x, kernel, 1, 1)?;
    tape.add(x, conv)
}

/// What the token mixer of one block should do.
pub enum BlockMixer<'a> {
    Full,
    Grouped(&'a crate::attention::GroupPlan),
}

/// One full block: positional conv, decayed-attention mixer with local
/// context enhancement, and FFN, all with residuals.
#[allow(clippy::too_many_arguments)]
pub fn evt_block(
    tape: &mut Tape,
    x: VarId,
    p: &BoundWeights,
    prefix: &str,
    grid: GridCoords,
    heads: usize,
    decays: &[Tensor],
    mixer: &BlockMixer,
    mode: AttnMode,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<VarId> {
    let shape = tape.shape(x).to_vec();
    let (c, gh, gw) = (shape[0], shape[1], shape[2]);
    let n = gh * gw;
    if grid.tokens() != n {
        return Err(Error::shape("evt_block", "grid does not match activations"));
    }
    let d_head = c / heads;

    // X = CPE(X_in) + X_in
    let x = cpe(tape, x, p.get(&format!("{prefix}.cpe")))?;
    let tokens = to_tokens(tape, x)?;

    // Y = W_o(attend(LN(X))) + LCE(V) + X
    let ln1 = tape.layer_norm(
        tokens,
        p.get(&format!("{prefix}.ln1.g")),
        p.get(&format!("{prefix}.ln1.b")),
        LN_EPS,
    )?;
    let q = linear(tape, ln1, p, &format!("{prefix}.wq"))?;
    let k = linear(tape, ln1, p, &format!("{prefix}.wk"))?;
    let v = linear(tape, ln1, p, &format!("{prefix}.wv"))?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let decay = &decays[h];
        let out = match mixer {
            BlockMixer::Full => {
                let head = attend_head(tape, qh, kh, vh, Some(decay), None, mode)?;
                if let Some(cap) = capture.as_deref_mut() {
                    let weights = tape.value(head.weights).clone();
                    cap.push(crate::tensor::row_normalize(&weights)?);
                }
                head.out
            }
            BlockMixer::Grouped(plan) => {
                let mut pieces = capture.as_deref_mut().map(|_| Vec::new());
                let out =
                    attend_grouped_head(tape, qh, kh, vh, decay, plan, mode, pieces.as_mut())?;
                if let (Some(cap), Some(pieces)) = (capture.as_deref_mut(), pieces) {
                    cap.push(embed_group_attention(n, &pieces));
                }
                out
            }
        };
        head_outs.push(out);
    }
    let attn = tape.concat_cols(&head_outs)?;
    let projected = linear(tape, attn, p, &format!("{prefix}.wo"))?;

    let v_map = to_chw(tape, v, gh, gw)?;
    let lce_map = tape.depthwise_conv2d(v_map, p.get(&format!("{prefix}.lce")), 1, 2)?;
    let lce_tokens = to_tokens(tape, lce_map)?;

    let branch = tape.add(projected, lce_tokens)?;
    let y = tape.add(branch, tokens)?;

    // Z = FFN(LN(Y)) + Y
    let ln2 = tape.layer_norm(
        y,
        p.get(&format!("{prefix}.ln2.g")),
        p.get(&format!("{prefix}.ln2.b")),
        LN_EPS,
    )?;
    let h1 = linear(tape, ln2, p, &format!("{prefix}.fc1"))?;
    let act = tape.gelu(h1);
    let ffn = linear(tape, act, p, &format!("{prefix}.fc2"))?;
    let z = tape.add(ffn, y)?;

    to_chw(tape, z, gh, gw)
}

/// Per-head decay matrices for one stage; head n uses the n-th gamma of the
/// schedule, restarting per stage.
fn stage_decays(
    cfg: &VariantConfig,
    cache: &mut DecayCache,
    grid: GridCoords,
    heads: usize,
) -> Result<Vec<Tensor>> {
    if cfg.decay_kind == DecayKind::None {
        return Ok(vec![Tensor::ones(&[grid.tokens(), grid.tokens()]); heads]);
    }
    let schedule = HeadGammaSchedule::new(heads, cfg.gamma_base_exponent)?;
    schedule
        .values
        .iter()
        .map(|&g| {
            let spec = cfg.decay_spec(g)?;
            Ok(cache.get(grid, &spec).clone())
        })
        .collect()
}

/// Build the whole forward graph from image to logits [1, classes].
pub fn forward_tape(
    tape: &mut Tape,
    cfg: &VariantConfig,
    p: &BoundWeights,
    cache: &mut DecayCache,
    image: VarId,
    mut report: Option<&mut AttnReport>,
) -> Result<VarId> {
    let mut x = conv_stem(tape, image, cfg, p)?;
    for (s, stage) in cfg.stages.iter().enumerate() {
        if s > 0 {
            x = patch_merge(tape, x, p, s)?;
        }
        let shape = tape.shape(x).to_vec();
        let grid = GridCoords::new(shape[1], shape[2]);
        let n = grid.tokens();
        let decays = stage_decays(cfg, cache, grid, stage.heads)?;
        for b in 0..stage.depth {
            let plan;
            let mixer = match stage.mixer {
                MixerKind::Full => BlockMixer::Full,
                MixerKind::GroupedAlternating => {
                    let kind = if b % 2 == 0 {
                        GroupKind::Contiguous
                    } else {
                        GroupKind::Dilated
                    };
                    plan = make_group_plan(n, stage.group_size, kind)?;
                    BlockMixer::Grouped(&plan)
                }
            };
            let mut heads_cap = report.as_deref_mut().map(|_| Vec::new());
            x = evt_block(
                tape,
                x,
                p,
                &format!("stage{s}.block{b}"),
                grid,
                stage.heads,
                &decays,
                &mixer,
                AttnMode::default(),
                heads_cap.as_mut(),
            )?;
            if let (Some(rep), Some(heads)) = (report.as_deref_mut(), heads_cap) {
                rep.layers.push(AttnLayer {
                    stage: s,
                    layer: b,
                    heads,
                });
            }
        }
    }
    // head: LN -> channel expansion -> GELU -> global average pool -> FC
    let tokens = to_tokens(tape, x)?;
    let normed = tape.layer_norm(tokens, p.get("head.ln.g"), p.get("head.ln.b"), LN_EPS)?;
    let expanded = linear(tape, normed, p, "head.expand")?;
    let act = tape.gelu(expanded);
    let pooled = tape.mean_rows(act)?;
    linear(tape, pooled, p, "head.fc")
}

/// A config plus weights plus the decay cache.
pub struct Model {
    pub cfg: VariantConfig,
    pub weights: ModelWeights,
    cache: DecayCache,
}

impl Model {
    pub fn new(cfg: VariantConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let weights = ModelWeights::init(&cfg, seed);
        Ok(Model {
            cfg,
            weights,
            cache: DecayCache::new(),
        })
    }

    pub fn with_weights(cfg: VariantConfig, weights: ModelWeights) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            weights,
            cache: DecayCache::new(),
        })
    }

    /// Logits for one image, optionally capturing per-layer attention.
    pub fn forward(&mut self, image: &Tensor, report: Option<&mut AttnReport>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundWeights::bind(&mut tape, &self.weights);
        let img = tape.leaf(image.clone());
        let logits = forward_tape(&mut tape, &self.cfg, &bound, &mut self.cache, img, report)?;
        Ok(tape.value(logits).clone())
    }

    pub fn predict(&mut self, image: &Tensor) -> Result<usize> {
        let logits = self.forward(image, None)?;
        Ok(argmax(logits.data()))
    }

    fn batch_loss_root(
        &mut self,
        tape: &mut Tape,
        bound: &BoundWeights,
        images: &[Tensor],
        labels: &[usize],
    ) -> Result<VarId> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::argument("batch", "images and labels must match"));
        }
        let mut losses = Vec::with_capacity(images.len());
        for (img, &label) in images.iter().zip(labels) {
            let leaf = tape.leaf(img.clone());
            let logits = forward_tape(tape, &self.cfg, bound, &mut self.cache, leaf, None)?;
            losses.push(tape.cross_entropy(logits, &[label])?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        Ok(tape.scale(total, 1.0 / images.len() as f64))
    }

    /// Mean cross-entropy over a batch plus gradients for every weight
    /// tensor, in weight order.
    pub fn loss_and_grads(
        &mut self,
        images: &[Tensor],
        labels: &[usize],
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = BoundWeights::bind(&mut tape, &self.weights);
        let loss = self.batch_loss_root(&mut tape, &bound, images, labels)?;
        let loss_value = tape.value(loss).data()[0];
        let grads: Gradients = tape.backward(loss)?;
        let shapes: Vec<Vec<usize>> = self
            .weights
            .tensors
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        let out = bound
            .ids
            .iter()
            .zip(shapes)
            .map(|(&id, shape)| {
                grads
                    .wrt(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&shape))
            })
            .collect();
        Ok((loss_value, out))
    }

    /// Batch loss without gradients (for finite-difference oracles).
    pub fn loss_only(&mut self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundWeights::bind(&mut tape, &self.weights);
        let loss = self.batch_loss_root(&mut tape, &bound, images, labels)?;
        Ok(tape.value(loss).data()[0])
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// multiply-add accounting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct MacBreakdown {
    pub stem: u64,
    pub merges: u64,
    /// Per stage: (attention matmuls, projections + FFN, depthwise convs).
    pub stages: Vec<(u64, u64, u64)>,
    pub head: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.stem
            + self.merges
            + self.head
            + self.stages.iter().map(|(a, b, c)| a + b + c).sum::<u64>()
    }
}

/// Exact multiply-add counts for the conv, linear, and attention arithmetic.
/// Bias adds, norms, activations, softmax, the decay Hadamard, and pooling
/// are excluded. Published cost tables for vision backbones report this unit
/// (multiply-adds), usually labelled FLOPs.
pub fn count_macs(cfg: &VariantConfig, resolution: usize) -> Result<MacBreakdown> {
    cfg.validate()?;
    let stem_stride: usize = cfg.stem.strides.iter().product();
    if resolution % (stem_stride << (cfg.stages.len() - 1)) != 0 {
        return Err(Error::argument(
            "count_macs",
            format!("resolution {resolution} incompatible with downsampling"),
        ));
    }
    let mut b = MacBreakdown::default();
    let mut hw = resolution;
    let mut c_in = 3usize;
    for (&c, &s) in cfg.stem.channels.iter().zip(&cfg.stem.strides) {
        hw /= s;
        b.stem += (hw * hw * c * c_in * 9) as u64;
        c_in = c;
    }
    for (s, stage) in cfg.stages.iter().enumerate() {
        let c = stage.embed_dim;
        if s > 0 {
            hw /= 2;
            b.merges += (hw * hw * c * cfg.stages[s - 1].embed_dim * 9) as u64;
        }
        let n = hw * hw;
        let variant = match stage.mixer {
            MixerKind::Full => FlopsVariant::Full,
            MixerKind::GroupedAlternating => FlopsVariant::Grouped {
                k: stage.group_size,
            },
        };
        let attn_per_block = attention_flops(n, c, variant)? / 2; // flops -> macs
        let proj_per_block = (4 * n * c * c + 2 * n * c * c * stage.ffn_ratio) as u64;
        let dw_per_block = (n * c * 9 + n * c * 25) as u64; // cpe + lce
        let d = stage.depth as u64;
        b.stages
            .push((attn_per_block * d, proj_per_block * d, dw_per_block * d));
    }
    let n_last = hw * hw;
    let c_last = cfg.stages.last().unwrap().embed_dim;
    b.head = (n_last * c_last * cfg.head_expansion) as u64
        + (cfg.head_expansion * cfg.num_classes) as u64;
    Ok(b)
}

/// FLOP count under the 1 multiply-add = 2 FLOPs convention.
pub fn count_flops(cfg: &VariantConfig, resolution: usize) -> Result<u64> {
    Ok(2 * count_macs(cfg, resolution)?.total())
}
