//! Decoder: expands the aggregated d_k vector into a K-class logit map.
//!
//! The vector is reshaped to a seed_channels x seed_extent x seed_extent
//! spatial seed, then each block applies ConvTranspose -> bias ->
//! BatchNorm -> ReLU. The final block emits the K class channels with no
//! BatchNorm/ReLU so the loss sees raw logits.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::layers::{init_weight, zeros_param, BatchNorm2d};
use crate::tensor::{conv_transpose2d, write_tensor_record, BnMode, Tensor};

/// One transposed-convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvBlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DeconvBlockConfig {
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let v = (input - 1) * self.stride + self.kernel;
        if v < 2 * self.padding + 1 {
            return Err(Error::Config(format!(
                "block ({input}-1)*{} - 2*{} + {} has non-positive output extent",
                self.stride, self.padding, self.kernel
            )));
        }
        Ok(v - 2 * self.padding)
    }
}

/// Decoder geometry. The embedding reshapes to
/// seed_channels x seed_extent x seed_extent; the block chain must reach
/// exactly the target extent, and the final block must emit n_classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub seed_channels: usize,
    pub seed_extent: usize,
    pub blocks: Vec<DeconvBlockConfig>,
    pub n_classes: usize,
    pub target_hw: (usize, usize),
}

impl DecoderConfig {
    /// The extent after each block, starting from the seed.
    pub fn extent_chain(&self) -> Result<Vec<usize>> {
        let mut chain = vec![self.seed_extent];
        for b in &self.blocks {
            chain.push(b.out_extent(*chain.last().unwrap())?);
        }
        Ok(chain)
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.seed_channels * self.seed_extent * self.seed_extent != embed_dim {
            return Err(Error::Config(format!(
                "decoder seed {}x{}x{} does not hold the {embed_dim}-dimensional embedding",
                self.seed_channels, self.seed_extent, self.seed_extent
            )));
        }
        let chain = self.extent_chain()?;
        let last = *chain.last().unwrap();
        if (last, last) != self.target_hw {
            return Err(Error::Config(format!(
                "decoder extent chain {chain:?} does not reach target {}x{}",
                self.target_hw.0, self.target_hw.1
            )));
        }
        if self.target_hw.0 != self.target_hw.1 {
            return Err(Error::Config(format!(
                "transposed-conv chain produces square maps; target {}x{} is not square",
                self.target_hw.0, self.target_hw.1
            )));
        }
        if self.blocks.last().unwrap().out_channels != self.n_classes {
            return Err(Error::Config(format!(
                "final decoder block emits {} channels, expected {} classes",
                self.blocks.last().unwrap().out_channels,
                self.n_classes
            )));
        }
        Ok(())
    }
}

struct DeconvBlock {
    kernel: Tensor,
    bias: Tensor,
    bn: Option<BatchNorm2d>,
    stride: usize,
    padding: usize,
}

/// The built decoder.
pub struct Decoder {
    pub cfg: DecoderConfig,
    blocks: Vec<DeconvBlock>,
}

/// Deterministic construction; `embed_dim` is the aggregated vector size.
pub fn build_decoder(cfg: &DecoderConfig, embed_dim: usize, seed: u64) -> Result<Decoder> {
    cfg.validate(embed_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    let mut c_in = cfg.seed_channels;
    let n = cfg.blocks.len();
    for (i, b) in cfg.blocks.iter().enumerate() {
        let kernel = init_weight(
            &[c_in, b.out_channels, b.kernel, b.kernel],
            c_in * b.kernel * b.kernel,
            &mut rng,
        );
        let is_last = i == n - 1;
        blocks.push(DeconvBlock {
            kernel,
            bias: zeros_param(&[b.out_channels]),
            bn: (!is_last).then(|| BatchNorm2d::new(b.out_channels)),
            stride: b.stride,
            padding: b.padding,
        });
        c_in = b.out_channels;
    }
    Ok(Decoder {
        cfg: cfg.clone(),
        blocks,
    })
}

impl Decoder {
    /// Decode the aggregated embedding into a [K,H,W] logit map.
    pub fn decode(&self, agg: &Tensor, mode: BnMode) -> Result<Tensor> {
        let expected = self.cfg.seed_channels * self.cfg.seed_extent * self.cfg.seed_extent;
        if agg.rank() != 1 || agg.numel() != expected {
            return Err(Error::Shape(format!(
                "decoder expects a [{expected}] vector, got {:?}",
                agg.shape()
            )));
        }
        let mut x = agg.reshape(&[
            self.cfg.seed_channels,
            self.cfg.seed_extent,
            self.cfg.seed_extent,
        ])?;
        for block in &self.blocks {
            x = conv_transpose2d(&x, &block.kernel, Some(&block.bias), block.stride, block.padding)?;
            if let Some(bn) = &block.bn {
                x = bn.forward(&x, mode)?.relu();
            }
        }
        Ok(x)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.push(&mut b.kernel);
            p.push(&mut b.bias);
            if let Some(bn) = b.bn.as_mut() {
                p.extend(bn.params_mut());
            }
        }
        p
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.kernel"), b.kernel.clone()));
            out.push((format!("{prefix}.block{i}.bias"), b.bias.clone()));
            if let Some(bn) = &b.bn {
                bn.named_state(&format!("{prefix}.block{i}.bn"), out);
            }
        }
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, slot) in [("kernel", &mut b.kernel), ("bias", &mut b.bias)] {
                let name = format!("{prefix}.block{i}.{field}");
                let t = map
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = Tensor::param(t.shape(), t.values().to_vec())?;
            }
            if let Some(bn) = b.bn.as_mut() {
                bn.load_state(&format!("{prefix}.block{i}.bn"), map)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                b.kernel.numel()
                    + b.bias.numel()
                    + b.bn.as_ref().map_or(0, BatchNorm2d::param_count)
            })
            .sum()
    }
}

/// Per-pixel argmax over the class axis of a [K,H,W] logit map; ties
/// break toward the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    if logits.rank() != 3 {
        return Err(Error::Shape(format!(
            "argmax_labels expects [K,H,W], got {:?}",
            logits.shape()
        )));
    }
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let v = logits.values();
    let mut data = Vec::with_capacity(h * w);
    for pix in 0..h * w {
        let mut best = 0u16;
        let mut best_v = v[pix];
        for c in 1..k {
            let x = v[c * h * w + pix];
            if x > best_v {
                best_v = x;
                best = c as u16;
            }
        }
        data.push(best);
    }
    LabelMap::new(h, w, data)
}

/// Fixed class-color table (RGB). Class index i maps to PALETTE[i].
pub const PALETTE: [[u8; 3]; 48] = [
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195], [128, 128, 0], [255, 215, 180],
    [0, 0, 128], [128, 128, 128], [255, 255, 255], [0, 0, 0], [188, 143, 143], [72, 61, 139],
    [47, 79, 79], [205, 92, 92], [60, 179, 113], [123, 104, 238], [244, 164, 96], [176, 196, 222],
    [199, 21, 133], [32, 178, 170], [218, 165, 32], [95, 158, 160], [154, 205, 50], [216, 191, 216],
    [70, 130, 180], [210, 105, 30], [100, 149, 237], [189, 183, 107], [143, 188, 143], [255, 105, 180],
    [46, 139, 87], [221, 160, 221], [106, 90, 205], [233, 150, 122], [0, 206, 209], [139, 69, 19],
];

/// Export a label map as an 8-bit paletted PNG using the fixed color
/// table.
pub fn save_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let max = labels.data.iter().copied().max().unwrap_or(0) as usize;
    if max >= PALETTE.len() {
        return Err(Error::Config(format!(
            "label {max} exceeds the {}-entry color table",
            PALETTE.len()
        )));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, labels.width as u32, labels.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(PALETTE.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    let bytes: Vec<u8> = labels.data.iter().map(|&v| v as u8).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    Ok(())
}

/// Export a label map as an integer matrix in the tensor record format.
pub fn save_label_record(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_record(&mut w, &labels.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};

    fn desk_cfg() -> DecoderConfig {
        DecoderConfig {
            seed_channels: 4,
            seed_extent: 4,
            blocks: vec![
                DeconvBlockConfig { out_channels: 32, kernel: 4, stride: 2, padding: 1 },
                DeconvBlockConfig { out_channels: 16, kernel: 4, stride: 2, padding: 1 },
                DeconvBlockConfig { out_channels: 6, kernel: 4, stride: 2, padding: 1 },
            ],
            n_classes: 6,
            target_hw: (32, 32),
        }
    }

    #[test]
    fn extent_chain_follows_size_formula() {
        // seed 4, two blocks stride 2 k 4 pad 1: 4 -> 8 -> 16
        let cfg = DecoderConfig {
            seed_channels: 4,
            seed_extent: 4,
            blocks: vec![
                DeconvBlockConfig { out_channels: 8, kernel: 4, stride: 2, padding: 1 },
                DeconvBlockConfig { out_channels: 3, kernel: 4, stride: 2, padding: 1 },
            ],
            n_classes: 3,
            target_hw: (16, 16),
        };
        assert_eq!(cfg.extent_chain().unwrap(), vec![4, 8, 16]);
        cfg.validate(64).unwrap();
    }

    #[test]
    fn mismatched_chain_error_lists_extents() {
        let mut cfg = desk_cfg();
        cfg.target_hw = (64, 64);
        let err = cfg.validate(64).unwrap_err();
        assert!(err.to_string().contains("[4, 8, 16, 32]"), "{err}");
    }

    #[test]
    fn single_k1_block_is_affine_channel_map() {
        let cfg = DecoderConfig {
            seed_channels: 4,
            seed_extent: 2,
            blocks: vec![DeconvBlockConfig { out_channels: 3, kernel: 1, stride: 1, padding: 0 }],
            n_classes: 3,
            target_hw: (2, 2),
        };
        let dec = build_decoder(&cfg, 16, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agg = Tensor::randn(&[16], 1.0, &mut rng);
        let out = dec.decode(&agg, BnMode::Train).unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);
        // with k=1, s=1 each output pixel is a linear map of the seed's
        // channel column at that pixel
        let kv = dec.blocks[0].kernel.values();
        for pix in 0..4 {
            for co in 0..3 {
                let want: f64 = (0..4).map(|ci| agg.values()[ci * 4 + pix] * kv[ci * 3 + co]).sum();
                let got = out.values()[co * 4 + pix];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_final_weights_tie_break_to_class_zero() {
        let cfg = desk_cfg();
        let mut dec = build_decoder(&cfg, 64, 3).unwrap();
        let n = dec.blocks.len();
        let last = &mut dec.blocks[n - 1];
        last.kernel = Tensor::param(last.kernel.shape(), vec![0.0; last.kernel.numel()]).unwrap();
        last.bias = Tensor::param(last.bias.shape(), vec![0.0; last.bias.numel()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agg = Tensor::randn(&[64], 1.0, &mut rng);
        let logits = dec.decode(&agg, BnMode::Train).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
        let labels = argmax_labels(&logits).unwrap();
        assert!(labels.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn output_shape_exact_for_random_valid_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let seed_extent = rng.gen_range(2..5usize);
            let seed_channels = rng.gen_range(1..5usize);
            let n_blocks = rng.gen_range(1..4usize);
            let mut blocks = Vec::new();
            let mut extent = seed_extent;
            for i in 0..n_blocks {
                let kernel = rng.gen_range(2..5usize);
                let stride = rng.gen_range(1..3usize);
                let padding = rng.gen_range(0..2usize).min((kernel - 1) / 2);
                let out_channels = if i == n_blocks - 1 { 5 } else { rng.gen_range(2..7) };
                let b = DeconvBlockConfig { out_channels, kernel, stride, padding };
                extent = b.out_extent(extent).unwrap();
                blocks.push(b);
            }
            let cfg = DecoderConfig {
                seed_channels,
                seed_extent,
                blocks,
                n_classes: 5,
                target_hw: (extent, extent),
            };
            let d_k = seed_channels * seed_extent * seed_extent;
            let dec = build_decoder(&cfg, d_k, 6).unwrap();
            let agg = Tensor::randn(&[d_k], 1.0, &mut rng);
            let out = dec.decode(&agg, BnMode::Train).unwrap();
            assert_eq!(out.shape(), &[5, extent, extent]);
        }
    }

    #[test]
    fn logits_finite_over_many_seeds() {
        let cfg = DecoderConfig {
            seed_channels: 2,
            seed_extent: 2,
            blocks: vec![
                DeconvBlockConfig { out_channels: 4, kernel: 4, stride: 2, padding: 1 },
                DeconvBlockConfig { out_channels: 3, kernel: 4, stride: 2, padding: 1 },
            ],
            n_classes: 3,
            target_hw: (8, 8),
        };
        for seed in 0..100 {
            let dec = build_decoder(&cfg, 8, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let agg = Tensor::randn(&[8], 1.0, &mut rng);
            let out = dec.decode(&agg, BnMode::Train).unwrap();
            assert!(out.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let cfg = DecoderConfig {
            seed_channels: 2,
            seed_extent: 2,
            blocks: vec![
                DeconvBlockConfig { out_channels: 3, kernel: 2, stride: 2, padding: 0 },
                DeconvBlockConfig { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            ],
            n_classes: 2,
            target_hw: (4, 4),
        };
        let dec = build_decoder(&cfg, 8, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = Tensor::randn(&[8], 1.0, &mut rng);
        let agg = Tensor::param(&[8], base.values().to_vec()).unwrap();
        let err = grad_check(
            |ins| {
                let y = dec.decode(&ins[0], BnMode::Train)?;
                y.mul(&y)?.mean_all()
            },
            &[agg],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let logits = Tensor::new(&[3, 1, 2], vec![1.0, 5.0, 1.0, 5.0, 1.0, 2.0]).unwrap();
        let labels = argmax_labels(&logits).unwrap();
        assert_eq!(labels.data, vec![0, 0]);
    }

    #[test]
    fn png_export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        save_label_png(&path, &labels).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(info.width, 2);
        assert_eq!(info.height, 2);
        assert_eq!(&buf[..4], &[0, 1, 2, 3]);
    }
}
