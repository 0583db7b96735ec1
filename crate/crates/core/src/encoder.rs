//! Multi-resolution encoder producing one fixed-size embedding per frame.
//!
//! Branch i of a stage operates at resolution H/2^i. Every stage applies
//! one conv block per branch, then exchanges information across branches
//! with resample-and-sum fusion: nearest-neighbor upsampling (plus a 1x1
//! channel projection) on the way up and a strided 3x3 conv on the way
//! down. New branches are opened by a strided transition conv from the
//! previous finest-below branch. The final stage's branch maps are
//! average-pooled to the coarsest resolution, concatenated, adaptively
//! pooled to a pool_extent x pool_extent grid, flattened, and projected
//! by the embedding heads. pool_extent = 1 is plain global average
//! pooling; larger extents keep coarse layout information in the
//! embedding, which the decoder needs to reconstruct the scene.
//!
//! The leading `shallow_separable_depth` branch conv blocks (stage order,
//! branch order within a stage) use the spatially separable k x 1 / 1 x k
//! factorization; the stem and all resampling convs stay dense.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Affine, BatchNorm2d, ConvBnBlock, ConvLayer};
use crate::tensor::{adaptive_avg_pool2d, avg_pool2d, upsample_nearest, BnMode, Tensor};

/// How many embedding heads the encoder exposes: three (query, key,
/// value) for attention aggregation, or a single vector otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    Qkv,
    Single,
}

/// Architectural description of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_stages: usize,
    /// Branch count per stage; non-decreasing, branch i runs at H/2^i.
    pub branches_per_stage: Vec<usize>,
    /// Channels of branch i; the stem must emit channels_per_branch[0].
    pub channels_per_branch: Vec<usize>,
    /// Leading branch conv blocks converted to separable convolutions.
    pub shallow_separable_depth: usize,
    pub stem_channels: usize,
    /// Embedding dimension d_k.
    pub embed_dim: usize,
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub head_mode: HeadMode,
    /// Edge of the pooled grid feeding the heads; 1 = global average.
    pub pool_extent: usize,
}

impl EncoderConfig {
    /// Total number of branch conv blocks (the separable-eligible set).
    pub fn branch_block_count(&self) -> usize {
        self.branches_per_stage.iter().sum()
    }

    /// (C_in, C_out, k) of every branch conv block in build order. Branch
    /// blocks preserve their branch's channel count.
    pub fn branch_block_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = Vec::new();
        for &b in &self.branches_per_stage {
            for j in 0..b {
                let c = self.channels_per_branch[j];
                dims.push((c, c, 3));
            }
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.branches_per_stage.len() != self.n_stages {
            return Err(Error::Config(format!(
                "branches_per_stage has {} entries for {} stages",
                self.branches_per_stage.len(),
                self.n_stages
            )));
        }
        if self.branches_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one branch".into()));
        }
        if self
            .branches_per_stage
            .windows(2)
            .any(|w| w[1] < w[0])
        {
            return Err(Error::Config(format!(
                "branch counts must be non-decreasing across stages, got {:?}",
                self.branches_per_stage
            )));
        }
        let max_branches = *self.branches_per_stage.last().unwrap();
        if self.channels_per_branch.len() < max_branches {
            return Err(Error::Config(format!(
                "channels_per_branch covers {} branches but {} are requested",
                self.channels_per_branch.len(),
                max_branches
            )));
        }
        if self.stem_channels != self.channels_per_branch[0] {
            return Err(Error::Config(format!(
                "stem emits {} channels but branch 0 runs at {}",
                self.stem_channels, self.channels_per_branch[0]
            )));
        }
        if self.shallow_separable_depth > self.branch_block_count() {
            return Err(Error::Config(format!(
                "shallow_separable_depth {} exceeds the {} branch conv blocks",
                self.shallow_separable_depth,
                self.branch_block_count()
            )));
        }
        let divisor = 1usize << (max_branches - 1);
        if self.input_hw.0 % divisor != 0 || self.input_hw.1 % divisor != 0 {
            return Err(Error::Config(format!(
                "input extent {}x{} is not divisible by 2^{} as branch {} requires",
                self.input_hw.0,
                self.input_hw.1,
                max_branches - 1,
                max_branches - 1
            )));
        }
        if self.embed_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("embed_dim and in_channels must be >= 1".into()));
        }
        let coarsest = (
            self.input_hw.0 >> (max_branches - 1),
            self.input_hw.1 >> (max_branches - 1),
        );
        if self.pool_extent == 0 || self.pool_extent > coarsest.0 || self.pool_extent > coarsest.1 {
            return Err(Error::Config(format!(
                "pool_extent {} invalid for coarsest branch extent {}x{}",
                self.pool_extent, coarsest.0, coarsest.1
            )));
        }
        Ok(())
    }
}

/// The q/k/v projections of one frame. In single-head mode all three
/// fields alias the same tensor.
#[derive(Debug, Clone)]
pub struct FrameEmbedding {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

enum FuseEdge {
    Identity,
    /// Coarse-to-fine: nearest-neighbor upsample then 1x1 projection.
    Up { conv: ConvLayer, factor: usize },
    /// Fine-to-coarse: strided 3x3 conv.
    Down { conv: ConvLayer },
}

impl FuseEdge {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FuseEdge::Identity => Ok(x.clone()),
            FuseEdge::Up { conv, factor } => conv.forward(&upsample_nearest(x, *factor)?),
            FuseEdge::Down { conv } => conv.forward(x),
        }
    }
}

struct Stage {
    blocks: Vec<ConvBnBlock>,
    transitions: Vec<ConvBnBlock>,
    /// fuse_edges[to][from], present when the stage has multiple branches.
    fuse_edges: Vec<Vec<FuseEdge>>,
}

/// The built encoder, weights initialized deterministically from a seed.
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: ConvBnBlock,
    stages: Vec<Stage>,
    heads: Vec<Affine>,
}

/// Deterministic construction from the config and seed.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<Encoder> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = &cfg.channels_per_branch;

    let stem = ConvBnBlock {
        conv: ConvLayer::dense(cfg.in_channels, cfg.stem_channels, 3, 1, 1, &mut rng),
        bn: BatchNorm2d::new(cfg.stem_channels),
    };

    let mut separable_left = cfg.shallow_separable_depth;
    let mut stages = Vec::with_capacity(cfg.n_stages);
    let mut prev_b = 1usize;
    for (i, &cur_b) in cfg.branches_per_stage.iter().enumerate() {
        let existing = if i == 0 { 1 } else { prev_b };
        let mut blocks = Vec::with_capacity(existing);
        for j in 0..existing.min(cur_b) {
            let c = ch[j];
            let conv = if separable_left > 0 {
                separable_left -= 1;
                ConvLayer::separable(c, c, 3, 1, 1, &mut rng)
            } else {
                ConvLayer::dense(c, c, 3, 1, 1, &mut rng)
            };
            blocks.push(ConvBnBlock {
                conv,
                bn: BatchNorm2d::new(c),
            });
        }
        let mut transitions = Vec::new();
        for j in existing..cur_b {
            transitions.push(ConvBnBlock {
                conv: ConvLayer::dense(ch[j - 1], ch[j], 3, 2, 1, &mut rng),
                bn: BatchNorm2d::new(ch[j]),
            });
        }
        let mut fuse_edges = Vec::new();
        if cur_b > 1 {
            for to in 0..cur_b {
                let mut row = Vec::with_capacity(cur_b);
                for from in 0..cur_b {
                    row.push(match from.cmp(&to) {
                        std::cmp::Ordering::Equal => FuseEdge::Identity,
                        std::cmp::Ordering::Greater => FuseEdge::Up {
                            conv: ConvLayer::dense(ch[from], ch[to], 1, 1, 0, &mut rng),
                            factor: 1 << (from - to),
                        },
                        std::cmp::Ordering::Less => FuseEdge::Down {
                            conv: ConvLayer::dense(ch[from], ch[to], 3, 1 << (to - from), 1, &mut rng),
                        },
                    });
                }
                fuse_edges.push(row);
            }
        }
        stages.push(Stage {
            blocks,
            transitions,
            fuse_edges,
        });
        prev_b = cur_b;
    }

    let max_b = *cfg.branches_per_stage.last().unwrap();
    let pooled_channels: usize = ch[..max_b].iter().sum();
    let pooled_dim = pooled_channels * cfg.pool_extent * cfg.pool_extent;
    let n_heads = match cfg.head_mode {
        HeadMode::Qkv => 3,
        HeadMode::Single => 1,
    };
    let heads = (0..n_heads)
        .map(|_| Affine::new(pooled_dim, cfg.embed_dim, true, &mut rng))
        .collect();

    Ok(Encoder {
        cfg: cfg.clone(),
        stem,
        stages,
        heads,
    })
}

impl Encoder {
    /// Per-branch feature maps after the final stage.
    pub fn forward_features(&self, frame: &Tensor, mode: BnMode) -> Result<Vec<Tensor>> {
        if frame.rank() != 3
            || frame.shape()[0] != self.cfg.in_channels
            || (frame.shape()[1], frame.shape()[2]) != self.cfg.input_hw
        {
            return Err(Error::Shape(format!(
                "encoder expects a [{},{},{}] frame, got {:?}",
                self.cfg.in_channels, self.cfg.input_hw.0, self.cfg.input_hw.1,
                frame.shape()
            )));
        }
        let mut feats = vec![self.stem.forward(frame, mode)?];
        for stage in &self.stages {
            for (j, block) in stage.blocks.iter().enumerate() {
                feats[j] = block.forward(&feats[j], mode)?;
            }
            for transition in &stage.transitions {
                let src = feats.last().expect("at least the stem output exists");
                feats.push(transition.forward(src, mode)?);
            }
            if !stage.fuse_edges.is_empty() {
                let mut fused = Vec::with_capacity(feats.len());
                for row in &stage.fuse_edges {
                    let mut acc: Option<Tensor> = None;
                    for (from, edge) in row.iter().enumerate() {
                        let contrib = edge.forward(&feats[from])?;
                        acc = Some(match acc {
                            Some(a) => a.add(&contrib)?,
                            None => contrib,
                        });
                    }
                    fused.push(acc.expect("stage has at least one branch").relu());
                }
                feats = fused;
            }
        }
        Ok(feats)
    }

    /// Pooled feature vector feeding the embedding heads.
    fn pooled(&self, frame: &Tensor, mode: BnMode) -> Result<Tensor> {
        let feats = self.forward_features(frame, mode)?;
        let max_b = feats.len();
        let mut at_coarsest = Vec::with_capacity(max_b);
        for (j, f) in feats.iter().enumerate() {
            let factor = 1 << (max_b - 1 - j);
            at_coarsest.push(if factor == 1 { f.clone() } else { avg_pool2d(f, factor)? });
        }
        let stacked = Tensor::concat(&at_coarsest, 0)?;
        let grid = adaptive_avg_pool2d(&stacked, self.cfg.pool_extent)?;
        grid.reshape(&[grid.numel()])
    }

    /// Encode one [C,H,W] frame into its q/k/v embedding.
    pub fn encode(&self, frame: &Tensor, mode: BnMode) -> Result<FrameEmbedding> {
        let pooled = self.pooled(frame, mode)?;
        match self.cfg.head_mode {
            HeadMode::Qkv => Ok(FrameEmbedding {
                q: self.heads[0].forward(&pooled)?,
                k: self.heads[1].forward(&pooled)?,
                v: self.heads[2].forward(&pooled)?,
            }),
            HeadMode::Single => {
                let e = self.heads[0].forward(&pooled)?;
                Ok(FrameEmbedding {
                    q: e.clone(),
                    k: e.clone(),
                    v: e,
                })
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.stem.params_mut();
        for stage in &mut self.stages {
            for b in &mut stage.blocks {
                p.extend(b.params_mut());
            }
            for t in &mut stage.transitions {
                p.extend(t.params_mut());
            }
            for row in &mut stage.fuse_edges {
                for edge in row {
                    match edge {
                        FuseEdge::Identity => {}
                        FuseEdge::Up { conv, .. } | FuseEdge::Down { conv } => {
                            p.extend(conv.params_mut())
                        }
                    }
                }
            }
        }
        for h in &mut self.heads {
            p.extend(h.params_mut());
        }
        p
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.named_state(&format!("{prefix}.stem"), out);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.blocks.iter().enumerate() {
                b.named_state(&format!("{prefix}.stage{i}.block{j}"), out);
            }
            for (j, t) in stage.transitions.iter().enumerate() {
                t.named_state(&format!("{prefix}.stage{i}.transition{j}"), out);
            }
            for (to, row) in stage.fuse_edges.iter().enumerate() {
                for (from, edge) in row.iter().enumerate() {
                    match edge {
                        FuseEdge::Identity => {}
                        FuseEdge::Up { conv, .. } | FuseEdge::Down { conv } => {
                            conv.named_state(&format!("{prefix}.stage{i}.fuse{to}_{from}"), out)
                        }
                    }
                }
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.named_state(&format!("{prefix}.head{i}"), out);
        }
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        self.stem.load_state(&format!("{prefix}.stem"), map)?;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.load_state(&format!("{prefix}.stage{i}.block{j}"), map)?;
            }
            for (j, t) in stage.transitions.iter_mut().enumerate() {
                t.load_state(&format!("{prefix}.stage{i}.transition{j}"), map)?;
            }
            for (to, row) in stage.fuse_edges.iter_mut().enumerate() {
                for (from, edge) in row.iter_mut().enumerate() {
                    match edge {
                        FuseEdge::Identity => {}
                        FuseEdge::Up { conv, .. } | FuseEdge::Down { conv } => {
                            conv.load_state(&format!("{prefix}.stage{i}.fuse{to}_{from}"), map)?
                        }
                    }
                }
            }
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.load_state(&format!("{prefix}.head{i}"), map)?;
        }
        Ok(())
    }

    /// Exact count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = self.stem.param_count();
        for stage in &self.stages {
            for b in &stage.blocks {
                n += b.param_count();
            }
            for t in &stage.transitions {
                n += t.param_count();
            }
            for row in &stage.fuse_edges {
                for edge in row {
                    match edge {
                        FuseEdge::Identity => {}
                        FuseEdge::Up { conv, .. } | FuseEdge::Down { conv } => {
                            n += conv.param_count()
                        }
                    }
                }
            }
        }
        for h in &self.heads {
            n += h.param_count();
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, grad_check, separable_conv2d};
    use rand::SeedableRng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            n_stages: 1,
            branches_per_stage: vec![1],
            channels_per_branch: vec![4],
            shallow_separable_depth: 0,
            stem_channels: 4,
            embed_dim: 5,
            in_channels: 2,
            input_hw: (8, 8),
            head_mode: HeadMode::Qkv,
            pool_extent: 2,
        }
    }

    fn desk_cfg() -> EncoderConfig {
        EncoderConfig {
            n_stages: 3,
            branches_per_stage: vec![1, 2, 3],
            channels_per_branch: vec![16, 32, 64],
            shallow_separable_depth: 2,
            stem_channels: 16,
            embed_dim: 64,
            in_channels: 4,
            input_hw: (32, 32),
            head_mode: HeadMode::Qkv,
            pool_extent: 4,
        }
    }

    #[test]
    fn degenerate_single_branch_encodes_to_embed_dim() {
        let enc = build_encoder(&tiny_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let e = enc.encode(&frame, BnMode::Train).unwrap();
        assert_eq!(e.q.shape(), &[5]);
        assert_eq!(e.k.shape(), &[5]);
        assert_eq!(e.v.shape(), &[5]);
    }

    #[test]
    fn two_stage_feature_maps_exist_at_both_resolutions() {
        let cfg = EncoderConfig {
            n_stages: 2,
            branches_per_stage: vec![1, 2],
            channels_per_branch: vec![4, 8],
            shallow_separable_depth: 0,
            stem_channels: 4,
            embed_dim: 6,
            in_channels: 1,
            input_hw: (16, 16),
            head_mode: HeadMode::Qkv,
            pool_extent: 2,
        };
        let enc = build_encoder(&cfg, 3).unwrap();
        let frame = Tensor::ones(&[1, 16, 16]);
        let feats = enc.forward_features(&frame, BnMode::Train).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].shape(), &[4, 16, 16]);
        assert_eq!(feats[1].shape(), &[8, 8, 8]);
    }

    #[test]
    fn multi_resolution_extents_exact_for_32_and_64() {
        for hw in [32usize, 64] {
            let mut cfg = desk_cfg();
            cfg.input_hw = (hw, hw);
            let enc = build_encoder(&cfg, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let frame = Tensor::randn(&[4, hw, hw], 1.0, &mut rng);
            let feats = enc.forward_features(&frame, BnMode::Train).unwrap();
            assert_eq!(feats.len(), 3);
            for (j, f) in feats.iter().enumerate() {
                assert_eq!(
                    f.shape(),
                    &[cfg.channels_per_branch[j], hw >> j, hw >> j],
                    "branch {j} at H={hw}"
                );
            }
        }
    }

    #[test]
    fn separable_depth_reduces_param_count() {
        let mut cfg = desk_cfg();
        cfg.shallow_separable_depth = 0;
        let dense = build_encoder(&cfg, 7).unwrap();
        cfg.shallow_separable_depth = 2;
        let sep = build_encoder(&cfg, 7).unwrap();
        assert!(sep.param_count() < dense.param_count());
        // delta = (k^2 - 2k) * C_in * C_out per converted layer
        let dims = cfg.branch_block_dims();
        let expected: usize = dims[..2]
            .iter()
            .map(|&(ci, co, k)| (k * k - 2 * k) * ci * co)
            .sum();
        assert_eq!(dense.param_count() - sep.param_count(), expected);
    }

    #[test]
    fn separable_toggle_preserves_output_shape() {
        for depth in [0usize, 2, 4] {
            let mut cfg = desk_cfg();
            cfg.shallow_separable_depth = depth;
            let enc = build_encoder(&cfg, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let frame = Tensor::randn(&[4, 32, 32], 1.0, &mut rng);
            let e = enc.encode(&frame, BnMode::Train).unwrap();
            assert_eq!(e.q.shape(), &[64]);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let enc = build_encoder(&desk_cfg(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frame = Tensor::randn(&[4, 32, 32], 1.0, &mut rng);
        let a = enc.encode(&frame, BnMode::Train).unwrap();
        let b = enc.encode(&frame, BnMode::Train).unwrap();
        assert_eq!(a.q.values(), b.q.values());
        assert_eq!(a.v.values(), b.v.values());
    }

    #[test]
    fn zero_frame_yields_finite_embeddings() {
        let enc = build_encoder(&desk_cfg(), 13).unwrap();
        let frame = Tensor::zeros(&[4, 32, 32]);
        let e = enc.encode(&frame, BnMode::Train).unwrap();
        assert!(e.q.values().iter().all(|v| v.is_finite()));
        assert!(e.k.values().iter().all(|v| v.is_finite()));
        assert!(e.v.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_head_mode_aliases_one_vector() {
        let mut cfg = tiny_cfg();
        cfg.head_mode = HeadMode::Single;
        let enc = build_encoder(&cfg, 14).unwrap();
        let frame = Tensor::ones(&[2, 8, 8]);
        let e = enc.encode(&frame, BnMode::Train).unwrap();
        assert_eq!(e.q.values(), e.v.values());
    }

    #[test]
    fn invalid_configs_rejected_at_build_time() {
        let mut cfg = desk_cfg();
        cfg.input_hw = (30, 32); // not divisible by 4
        assert!(build_encoder(&cfg, 1).is_err());

        let mut cfg = desk_cfg();
        cfg.branches_per_stage = vec![2, 1, 3];
        assert!(build_encoder(&cfg, 1).is_err());

        let mut cfg = desk_cfg();
        cfg.shallow_separable_depth = 100;
        assert!(build_encoder(&cfg, 1).is_err());

        let mut cfg = desk_cfg();
        cfg.stem_channels = 8;
        assert!(build_encoder(&cfg, 1).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let enc = build_encoder(&tiny_cfg(), 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let frame = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let input = Tensor::param(&[2, 8, 8], frame.values().to_vec()).unwrap();
        let err = grad_check(
            |ins| {
                let e = enc.encode(&ins[0], BnMode::Train)?;
                e.q.add(&e.k)?.add(&e.v)?.mul(&e.v)?.mean_all()
            },
            &[input],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn receptive_field_parity_of_separable_factorization() {
        // Impulse response: a k x 1 then 1 x k pair must touch exactly the
        // output support of one k x k kernel.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut delta = vec![0.0; 9 * 9];
        delta[4 * 9 + 4] = 1.0;
        let x = Tensor::new(&[1, 9, 9], delta).unwrap();
        let a = Tensor::randn(&[1, 1, 3, 1], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 1, 1, 3], 1.0, &mut rng);
        let dense_k = Tensor::ones(&[1, 1, 3, 3]);
        let y_sep = separable_conv2d(&x, &a, &b, None, 1, 1).unwrap();
        let y_dense = conv2d(&x, &dense_k, None, 1, 1).unwrap();
        let support = |t: &Tensor| -> Vec<bool> {
            t.values().iter().map(|v| v.abs() > 1e-12).collect()
        };
        assert_eq!(support(&y_sep), support(&y_dense));
    }
}
