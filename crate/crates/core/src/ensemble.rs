//! AdaBoost over base segmentation models with a per-image error rule:
//! a training item scores +1 when more than a fraction theta of its
//! pixels are misclassified, -1 otherwise. The weighted-error/vote-weight
//! bookkeeping follows classic binary AdaBoost: eps uses the {0,1}
//! indicator of +1 items, and the multiplicative update exp(alpha * e_i)
//! grows +1 items and shrinks -1 items.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{LabelMap, SceneSequence};
use crate::decoder::argmax_labels;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, SequenceModel};
use crate::tensor::{BnMode, Tensor};
use crate::train::{train, TrainConfig};

/// Clamp bounds for the weighted error, keeping alpha finite.
pub const EPS_CLAMP: f64 = 1e-6;

/// Per-image error: +1 iff strictly more than `theta` of the pixels are
/// misclassified, -1 otherwise.
pub fn sample_error(pred: &LabelMap, truth: &LabelMap, theta: f64) -> Result<i8> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::Shape(format!(
            "label maps {}x{} vs {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    if !(0.0..1.0).contains(&theta) || theta == 0.0 {
        return Err(Error::Config(format!(
            "error threshold must lie in (0, 1), got {theta}"
        )));
    }
    let wrong = pred
        .data
        .iter()
        .zip(&truth.data)
        .filter(|(p, t)| p != t)
        .count();
    let frac = wrong as f64 / pred.data.len() as f64;
    Ok(if frac > theta { 1 } else { -1 })
}

/// One boosting round's bookkeeping over the sampling probabilities:
/// weighted error, vote weight, and the multiplicative reweighting.
/// Returns (eps, alpha, clamped).
pub fn boost_update(probs: &mut [f64], errors: &[i8]) -> Result<(f64, f64, bool)> {
    if probs.len() != errors.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} errors",
            probs.len(),
            errors.len()
        )));
    }
    let raw: f64 = probs
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e == 1)
        .map(|(p, _)| p)
        .sum();
    let eps = raw.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
    let clamped = eps != raw;
    if clamped {
        log::warn!("degenerate boosting round: weighted error {raw} clamped to {eps}");
    }
    let alpha = 0.5 * ((1.0 - eps) / eps).ln();
    for (p, &e) in probs.iter_mut().zip(errors) {
        *p *= (alpha * e as f64).exp();
    }
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok((eps, alpha, clamped))
}

/// Probability-proportional sampling without replacement via systematic
/// resampling: evenly spaced pointers sweep the cumulative distribution;
/// duplicates collapse and further passes over the remaining items fill
/// the subset to exactly `k` indices. Returned indices are sorted.
pub fn systematic_subset(probs: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(Error::Config(format!(
            "subset size {k} invalid for {} items",
            probs.len()
        )));
    }
    let mut selected = vec![false; probs.len()];
    let mut n_selected = 0;
    while n_selected < k {
        let remaining: Vec<usize> = (0..probs.len()).filter(|&i| !selected[i]).collect();
        let total: f64 = remaining.iter().map(|&i| probs[i]).sum();
        let need = k - n_selected;
        if total <= 0.0 {
            // measure exhausted; fall back to index order
            for &i in remaining.iter().take(need) {
                selected[i] = true;
            }
            break;
        }
        let step = total / need as f64;
        let mut pointer = rng.gen_range(0.0..1.0) * step;
        let mut cum = 0.0;
        for &i in &remaining {
            cum += probs[i];
            if pointer < cum && n_selected < k {
                selected[i] = true;
                n_selected += 1;
                // skip any further pointers landing in this item's span
                while pointer < cum {
                    pointer += step;
                }
            }
        }
    }
    Ok((0..probs.len()).filter(|&i| selected[i]).collect())
}

/// One ensemble member: a trained base model and its vote weight.
pub struct EnsembleMember {
    pub model: SequenceModel,
    pub alpha: f64,
}

/// The boosted ensemble.
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    /// Sampling distribution over the training items after the last round.
    pub sample_probs: Vec<f64>,
    pub theta: f64,
    pub seed: u64,
}

/// Per-round training record.
#[derive(Debug, Clone)]
pub struct BoostRound {
    pub round: usize,
    pub subset_size: usize,
    pub eps: f64,
    pub alpha: f64,
    pub clamped: bool,
}

/// Train an AdaBoost ensemble of `m_rounds` base models.
///
/// Each round samples 80% of the training items without replacement
/// proportionally to the current probabilities, trains a fresh base model
/// on the subset, scores every training item with the per-image rule, and
/// reweights.
pub fn adaboost_train(
    train_scenes: &[SceneSequence],
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    m_rounds: usize,
    theta: f64,
    seed: u64,
) -> Result<(EnsembleModel, Vec<BoostRound>)> {
    if m_rounds == 0 {
        return Err(Error::Config("ensemble needs at least one round".into()));
    }
    if train_scenes.is_empty() {
        return Err(Error::Data("boosting over an empty dataset".into()));
    }
    let n = train_scenes.len();
    let subset_size = ((n as f64 * 0.8).round() as usize).clamp(1, n);
    let mut probs = vec![1.0 / n as f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ce_b005);
    let mut members = Vec::with_capacity(m_rounds);
    let mut rounds = Vec::with_capacity(m_rounds);

    for m in 0..m_rounds {
        let subset_idx = systematic_subset(&probs, subset_size, &mut rng)?;
        let subset: Vec<SceneSequence> =
            subset_idx.iter().map(|&i| train_scenes[i].clone()).collect();

        let mut model = build_model(base_cfg, seed.wrapping_add(7919 * m as u64))?;
        let round_cfg = TrainConfig {
            seed: train_cfg.seed.wrapping_add(104_729 * m as u64),
            ..*train_cfg
        };
        train(&mut model, &subset, &round_cfg)?;

        let errors: Vec<i8> = train_scenes
            .par_iter()
            .map(|scene| {
                let pred = model.predict(&scene.frames)?;
                sample_error(&pred, &scene.labels, theta)
            })
            .collect::<Result<_>>()?;
        let (eps, alpha, clamped) = boost_update(&mut probs, &errors)?;
        rounds.push(BoostRound {
            round: m,
            subset_size: subset_idx.len(),
            eps,
            alpha,
            clamped,
        });
        members.push(EnsembleMember { model, alpha });
    }

    Ok((
        EnsembleModel {
            members,
            sample_probs: probs,
            theta,
            seed,
        },
        rounds,
    ))
}

/// Combine per-member logit maps into the alpha-weighted softmax score
/// map and its argmax labels (lowest class index wins ties).
pub fn combine_scores(logit_maps: &[Tensor], alphas: &[f64]) -> Result<(Tensor, LabelMap)> {
    if logit_maps.is_empty() || logit_maps.len() != alphas.len() {
        return Err(Error::Usage(format!(
            "{} logit maps vs {} vote weights",
            logit_maps.len(),
            alphas.len()
        )));
    }
    let mut score: Option<Tensor> = None;
    for (logits, &alpha) in logit_maps.iter().zip(alphas) {
        let contribution = logits.softmax(0)?.scale(alpha);
        score = Some(match score {
            Some(acc) => acc.add(&contribution)?,
            None => contribution,
        });
    }
    let score = score.unwrap();
    let labels = argmax_labels(&score)?;
    Ok((score, labels))
}

impl EnsembleModel {
    /// Score map and label prediction for one frame sequence.
    pub fn predict(&self, frames: &Tensor) -> Result<(Tensor, LabelMap)> {
        if self.members.is_empty() {
            return Err(Error::Usage("ensemble has no members".into()));
        }
        let logit_maps: Vec<Tensor> = self
            .members
            .iter()
            .map(|m| m.model.forward(frames, BnMode::Eval))
            .collect::<Result<_>>()?;
        let alphas: Vec<f64> = self.members.iter().map(|m| m.alpha).collect();
        combine_scores(&logit_maps, &alphas)
    }
}

/// Evaluate an ensemble over scenes, merging per-scene confusion tallies.
pub fn evaluate_ensemble(
    ens: &EnsembleModel,
    scenes: &[SceneSequence],
    n_classes: usize,
) -> Result<crate::metrics::SegmentationMetrics> {
    use crate::metrics::ConfusionMatrix;
    let cm = scenes
        .par_iter()
        .map(|scene| -> Result<ConfusionMatrix> {
            let (_, pred) = ens.predict(&scene.frames)?;
            let mut cm = ConfusionMatrix::new(n_classes);
            cm.add(&pred, &scene.labels)?;
            Ok(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(n_classes),
            |mut a, b| {
                a.merge(&b);
                Ok(a)
            },
        )?;
    Ok(cm.metrics())
}

/// Write the ensemble manifest: member checkpoint paths and vote weights,
/// plus theta and seed, as flat key = value lines.
pub fn write_manifest(
    path: &Path,
    member_paths: &[String],
    alphas: &[f64],
    theta: f64,
    seed: u64,
) -> Result<()> {
    if member_paths.len() != alphas.len() {
        return Err(Error::Usage(format!(
            "{} member paths vs {} vote weights",
            member_paths.len(),
            alphas.len()
        )));
    }
    let mut out = String::new();
    out.push_str(&format!("members = {}\n", member_paths.len()));
    out.push_str(&format!("theta = {theta}\n"));
    out.push_str(&format!("seed = {seed}\n"));
    for (i, (p, a)) in member_paths.iter().zip(alphas).enumerate() {
        out.push_str(&format!("member.{i}.path = {p}\n"));
        out.push_str(&format!("member.{i}.alpha = {a}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a manifest written by [`write_manifest`]. Returns
/// (member paths, alphas, theta, seed).
pub fn read_manifest(path: &Path) -> Result<(Vec<String>, Vec<f64>, f64, u64)> {
    let text = fs::read_to_string(path)?;
    let mut map = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("manifest line {} has no '=': {line:?}", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |k: &str| {
        map.get(k)
            .ok_or_else(|| Error::Format(format!("manifest is missing key {k:?}")))
    };
    let n: usize = get("members")?
        .parse()
        .map_err(|_| Error::Format("manifest member count is not an integer".into()))?;
    let theta: f64 = get("theta")?
        .parse()
        .map_err(|_| Error::Format("manifest theta is not a number".into()))?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::Format("manifest seed is not an integer".into()))?;
    let mut paths = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        paths.push(get(&format!("member.{i}.path"))?.clone());
        alphas.push(
            get(&format!("member.{i}.alpha"))?
                .parse()
                .map_err(|_| Error::Format(format!("member {i} alpha is not a number")))?,
        );
    }
    Ok((paths, alphas, theta, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};
    use crate::decoder::{DecoderConfig, DeconvBlockConfig};
    use crate::encoder::{EncoderConfig, HeadMode};
    use crate::model::Paradigm;
    use crate::temporal::{AttentionConfig, LstmConfig};

    #[test]
    fn sample_error_trivial_cases() {
        let truth = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(sample_error(&truth, &truth, 0.2).unwrap(), -1);
        let all_wrong = LabelMap::new(2, 2, vec![1, 2, 3, 0]).unwrap();
        assert_eq!(sample_error(&all_wrong, &truth, 0.2).unwrap(), 1);
    }

    #[test]
    fn exactly_theta_fraction_is_minus_one() {
        // 5 of 25 pixels wrong = exactly 20%; "more than" is strict.
        let truth = LabelMap::new(5, 5, vec![0; 25]).unwrap();
        let mut data = vec![0u16; 25];
        for d in data.iter_mut().take(5) {
            *d = 1;
        }
        let pred = LabelMap::new(5, 5, data).unwrap();
        assert_eq!(sample_error(&pred, &truth, 0.2).unwrap(), -1);
        // one more wrong pixel crosses the threshold
        let mut data = vec![0u16; 25];
        for d in data.iter_mut().take(6) {
            *d = 1;
        }
        let pred = LabelMap::new(5, 5, data).unwrap();
        assert_eq!(sample_error(&pred, &truth, 0.2).unwrap(), 1);
    }

    #[test]
    fn all_correct_round_leaves_probs_unchanged() {
        let mut probs = vec![0.5, 0.3, 0.2];
        let before = probs.clone();
        let (eps, alpha, clamped) = boost_update(&mut probs, &[-1, -1, -1]).unwrap();
        assert_eq!(eps, EPS_CLAMP);
        assert!(clamped);
        assert!(alpha > 6.0, "maximal alpha, got {alpha}");
        for (a, b) in probs.iter().zip(&before) {
            assert!((a - b).abs() < 1e-12, "uniform multiplier must cancel");
        }
    }

    #[test]
    fn three_item_update_matches_hand_computation() {
        // uniform start, errors [+1,-1,-1]: eps = 1/3, alpha = ln(2)/2,
        // multipliers sqrt(2) and 1/sqrt(2) -> [1/2, 1/4, 1/4].
        let mut probs = vec![1.0 / 3.0; 3];
        let (eps, alpha, clamped) = boost_update(&mut probs, &[1, -1, -1]).unwrap();
        assert!(!clamped);
        assert!((eps - 1.0 / 3.0).abs() < 1e-15);
        assert!((alpha - 0.5 * 2.0f64.ln()).abs() < 1e-15);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.25).abs() < 1e-12);
        assert!((probs[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn erring_item_gains_probability_others_shrink() {
        let mut probs = vec![0.25; 4];
        boost_update(&mut probs, &[-1, 1, -1, -1]).unwrap();
        assert!(probs[1] > 0.25);
        for &i in &[0usize, 2, 3] {
            assert!(probs[i] < 0.25);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn probs_stay_positive_distribution_over_random_rounds() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut probs = vec![1.0 / 16.0; 16];
        for _ in 0..50 {
            let errors: Vec<i8> = (0..16).map(|_| if rng.gen_bool(0.4) { 1 } else { -1 }).collect();
            boost_update(&mut probs, &errors).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn systematic_subset_has_exact_size_and_no_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut probs = vec![1.0 / 10.0; 10];
        probs[3] = 0.5;
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        for k in [1usize, 4, 8, 10] {
            let idx = systematic_subset(&probs, k, &mut rng).unwrap();
            assert_eq!(idx.len(), k);
            let mut sorted = idx.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), k, "duplicates in {idx:?}");
        }
        // an item holding more than 1/k of the mass is always selected
        let idx = systematic_subset(&probs, 5, &mut rng).unwrap();
        assert!(idx.contains(&3));
    }

    #[test]
    fn systematic_subset_deterministic_per_seed() {
        let probs = vec![0.1, 0.2, 0.3, 0.25, 0.15];
        let a = systematic_subset(&probs, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = systematic_subset(&probs, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn combine_scores_identical_members_match_single() {
        let logits = Tensor::new(&[2, 1, 2], vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let (_, single) = combine_scores(std::slice::from_ref(&logits), &[1.0]).unwrap();
        let (_, double) = combine_scores(&[logits.clone(), logits], &[0.7, 0.7]).unwrap();
        assert_eq!(single.data, double.data);
    }

    #[test]
    fn zero_alpha_member_is_ignored() {
        let a = Tensor::new(&[2, 1, 1], vec![5.0, -5.0]).unwrap();
        let b = Tensor::new(&[2, 1, 1], vec![-5.0, 5.0]).unwrap();
        let (_, labels) = combine_scores(&[a, b], &[1.0, 0.0]).unwrap();
        assert_eq!(labels.data, vec![0]);
    }

    #[test]
    fn disagreement_resolved_by_weighted_probability() {
        // Three members vote on one 2-class pixel. Hand-summed scores:
        // softmax([2,0]) = [0.8808, 0.1192], softmax([0,1]) = [0.2689, 0.7311]
        let m1 = Tensor::new(&[2, 1, 1], vec![2.0, 0.0]).unwrap();
        let m2 = Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        let m3 = Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        let alphas = [1.0, 0.8, 0.8];
        let (score, labels) = combine_scores(&[m1, m2, m3], &alphas).unwrap();
        let p1 = 1.0 / (1.0 + (-2.0f64).exp());
        let p2 = 1.0 / (1.0 + (1.0f64).exp());
        let want0 = 1.0 * p1 + 0.8 * p2 + 0.8 * p2;
        let want1 = 1.0 * (1.0 - p1) + 0.8 * (1.0 - p2) + 0.8 * (1.0 - p2);
        assert!((score.values()[0] - want0).abs() < 1e-12);
        assert!((score.values()[1] - want1).abs() < 1e-12);
        assert_eq!(labels.data, vec![if want0 >= want1 { 0 } else { 1 }]);
    }

    #[test]
    fn alpha_scaling_invariance_of_argmax() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 3, 3], 1.0, &mut rng)).collect();
        let alphas: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..2.0)).collect();
        let scaled: Vec<f64> = alphas.iter().map(|a| a * 17.5).collect();
        let (_, l1) = combine_scores(&maps, &alphas).unwrap();
        let (_, l2) = combine_scores(&maps, &scaled).unwrap();
        assert_eq!(l1.data, l2.data);
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            paradigm: Paradigm::Esd,
            encoder: EncoderConfig {
                n_stages: 1,
                branches_per_stage: vec![1],
                channels_per_branch: vec![4],
                shallow_separable_depth: 1,
                stem_channels: 4,
                embed_dim: 8,
                in_channels: 2,
                input_hw: (8, 8),
                head_mode: HeadMode::Qkv,
                pool_extent: 2,
            },
            attention: AttentionConfig { n_heads: 2, d_k: 8 },
            lstm: LstmConfig::default(),
            decoder: DecoderConfig {
                seed_channels: 2,
                seed_extent: 2,
                blocks: vec![
                    DeconvBlockConfig { out_channels: 4, kernel: 4, stride: 2, padding: 1 },
                    DeconvBlockConfig { out_channels: 3, kernel: 4, stride: 2, padding: 1 },
                ],
                n_classes: 3,
                target_hw: (8, 8),
            },
        }
    }

    fn tiny_scenes() -> Vec<crate::data::SceneSequence> {
        generate_dataset(
            13,
            &GenConfig {
                n_scenes: 5,
                frames: 3,
                bands: 2,
                height: 8,
                width: 8,
                classes: 3,
                noise: 0.05,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_round_ensemble_equals_base_model() {
        // The equality requires a positive vote weight (eps < 1/2); a lax
        // threshold keeps the round non-degenerate for this tiny model.
        let scenes = tiny_scenes();
        let tc = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            weight_decay: 0.0,
            epochs: 2,
            seed: 4,
            train_fraction: 0.8,
        };
        let (ens, rounds) = adaboost_train(&scenes, &tiny_model_cfg(), &tc, 1, 0.9, 99).unwrap();
        assert_eq!(ens.members.len(), 1);
        assert_eq!(rounds.len(), 1);
        assert!(rounds[0].eps < 0.5, "round is degenerate: eps {}", rounds[0].eps);
        assert!(ens.members[0].alpha > 0.0);
        for scene in &scenes {
            let (_, ens_pred) = ens.predict(&scene.frames).unwrap();
            let base_pred = ens.members[0].model.predict(&scene.frames).unwrap();
            assert_eq!(ens_pred.data, base_pred.data);
        }
    }

    #[test]
    fn multi_round_probs_stay_normalized() {
        let scenes = tiny_scenes();
        let tc = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            weight_decay: 0.0,
            epochs: 1,
            seed: 5,
            train_fraction: 0.8,
        };
        let (ens, rounds) = adaboost_train(&scenes, &tiny_model_cfg(), &tc, 3, 0.2, 7).unwrap();
        assert_eq!(ens.members.len(), 3);
        assert!((ens.sample_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(ens.sample_probs.iter().all(|&p| p > 0.0));
        for r in &rounds {
            assert_eq!(r.subset_size, 4); // 0.8 * 5
            assert!(r.alpha.is_finite());
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.manifest");
        let paths = vec!["member0.ckpt".to_string(), "member1.ckpt".to_string()];
        let alphas = vec![1.25, -0.03125];
        write_manifest(&path, &paths, &alphas, 0.2, 42).unwrap();
        let (p2, a2, theta, seed) = read_manifest(&path).unwrap();
        assert_eq!(p2, paths);
        assert_eq!(a2, alphas);
        assert_eq!(theta, 0.2);
        assert_eq!(seed, 42);
    }
}
