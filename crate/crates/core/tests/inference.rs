mod common;

use common::{dataset, small};
use genseg::inference::{
    decode_prefix_scales, finalize_mask, generate, generate_next_token_baseline, guided_logits, is_empty_prediction,
    mask_visual_logits, sample_argmax, sample_cfg_topk, with_blocks, Sampling,
};
use genseg::mask::{BinaryMask, MaskImage};
use genseg::model::{SequenceSample, Transformer};
use genseg::vocab::UnifiedVocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn equal_logits_pick_the_first_visual_id() {
    let v = UnifiedVocab::with_default_words(8);
    let row = vec![0.5f32; v.size()];
    assert_eq!(sample_argmax(&mask_visual_logits(&row, &v)), v.visual_base());
}

#[test]
fn text_peak_is_ignored_inside_blocks() {
    let v = UnifiedVocab::with_default_words(8);
    let mut row = vec![0.0f32; v.size()];
    row[3] = 100.0;
    row[v.gen_end_id() as usize] = 50.0;
    row[v.visual_base() as usize + 5] = 1.0;
    assert_eq!(sample_argmax(&row), 3);
    assert_eq!(sample_argmax(&mask_visual_logits(&row, &v)), v.visual_base() + 5);
}

#[test]
fn restricted_sampling_stays_visual() {
    let v = UnifiedVocab::with_default_words(16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let row: Vec<f32> = (0..v.size()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let r = mask_visual_logits(&row, &v);
        assert!(v.is_visual(sample_argmax(&r)));
        let other: Vec<f32> = (0..v.size()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let u = mask_visual_logits(&other, &v);
        assert!(v.is_visual(sample_cfg_topk(&r, &u, 3.0, 4, &mut rng).unwrap()));
    }
}

#[test]
fn argmax_basics() {
    assert_eq!(sample_argmax(&[1.0f32, 3.0, 2.0]), 1);
    assert_eq!(sample_argmax(&[2.0f32, 2.0, 1.0]), 0);
    assert_eq!(sample_argmax(&[-1.0f32]), 0);
}

#[test]
fn unit_guidance_returns_conditional_logits_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cond: Vec<f32> = (0..200).map(|_| rng.gen_range(-30.0..30.0)).collect();
    let uncond: Vec<f32> = (0..200).map(|_| rng.gen_range(-30.0..30.0)).collect();
    let g = guided_logits(&cond, &uncond, 1.0);
    assert!(g.iter().zip(&cond).all(|(a, b)| a.to_bits() == b.to_bits()));
    // w = 0 gives the unconditional branch, up to rounding
    let g0 = guided_logits(&cond, &uncond, 0.0);
    assert!(g0.iter().zip(&uncond).all(|(a, b)| (a - b).abs() < 1e-5));
}

#[test]
fn top_one_is_guided_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let cond: Vec<f32> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let uncond: Vec<f32> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let want = sample_argmax(&guided_logits(&cond, &uncond, 2.5));
        assert_eq!(sample_cfg_topk(&cond, &uncond, 2.5, 1, &mut rng).unwrap(), want);
    }
}

#[test]
fn invalid_sampling_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row = [0.0f32, 1.0, 2.0];
    assert!(sample_cfg_topk(&row, &row, 1.0, 0, &mut rng).is_err());
    assert!(sample_cfg_topk(&row, &row, 1.0, 4, &mut rng).is_err());
    assert!(sample_cfg_topk(&row, &row, -1.0, 2, &mut rng).is_err());
}

#[test]
fn top_k_frequencies_match_softmax() {
    let cond = [0.3f32, 2.0, -1.0, 1.2, 0.9, 1.7, -0.4];
    let uncond = [0.1f32, 1.0, 0.2, 0.8, 0.5, 1.1, 0.0];
    let (w, k, n) = (2.0f32, 4usize, 100_000usize);
    // oracle: guided logits, keep the four largest, softmax in f64
    let guided: Vec<f64> = cond.iter().zip(&uncond).map(|(&c, &u)| u as f64 + w as f64 * (c as f64 - u as f64)).collect();
    let mut order: Vec<usize> = (0..guided.len()).collect();
    order.sort_by(|&a, &b| guided[b].partial_cmp(&guided[a]).unwrap());
    let keep = &order[..k];
    let z: f64 = keep.iter().map(|&i| guided[i].exp()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = vec![0usize; guided.len()];
    for _ in 0..n {
        counts[sample_cfg_topk(&cond, &uncond, w, k, &mut rng).unwrap() as usize] += 1;
    }
    for i in 0..guided.len() {
        let p = if keep.contains(&i) { guided[i].exp() / z } else { 0.0 };
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let diff = (counts[i] as f64 - n as f64 * p).abs();
        assert!(diff <= 3.0 * sigma.max(1e-9), "id {i}: {} vs {:.1} (3σ = {:.1})", counts[i], n as f64 * p, 3.0 * sigma);
    }
}

#[test]
fn untrained_model_generates_structurally_valid_output() {
    let c = small();
    let model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let s = &dataset(1, 11)[0];
    let g = generate(&model, &c.tokenizer, &c.vocab, &s.scene.render_planes(), &s.instruction, Sampling::Argmax).unwrap();
    if let Some(maps) = &g.maps {
        assert_eq!(g.visual_passes, c.tokenizer.schedule().len());
        assert!(maps.is_complete());
        let start = g.emitted.iter().position(|&i| i == c.vocab.gen_start_id()).unwrap();
        let visual = &g.emitted[start + 1..g.emitted.len() - 1];
        assert_eq!(visual.len(), 85);
        assert!(visual.iter().all(|&i| c.vocab.is_visual(i)));
        assert_eq!(*g.emitted.last().unwrap(), c.vocab.gen_end_id());
        assert_eq!((g.mask.height(), g.mask.width()), (32, 32));
    } else {
        assert_eq!(g.visual_passes, 0);
    }
}

#[test]
fn unit_guidance_on_first_scale_model_logits() {
    let c = small();
    let model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let s = &dataset(1, 14)[0];
    let prompt =
        genseg::training::build_prompt(&s.scene.render_planes(), 32, 32, &s.instruction, &c.vocab).unwrap();
    let empty = SequenceSample::prompt(Vec::new(), prompt.patch_dim, &[]);
    let first_scale = |p: &SequenceSample| {
        let seq = with_blocks(p, &[], 1, &c.tokenizer).unwrap();
        let row = seq.scale_blocks[0].start;
        model.logits_at(&seq, &c.vocab, c.tokenizer.codebook(), &[row]).unwrap().row(0).to_vec()
    };
    let (cond, uncond) = (first_scale(&prompt), first_scale(&empty));
    assert_ne!(cond, uncond);
    let guided = guided_logits(&cond, &uncond, 1.0);
    assert!(guided.iter().zip(&cond).all(|(a, b)| a.to_bits() == b.to_bits()));
}

/// Forces `<gen_start>` right after the prompt by biasing the head.
fn eager_model(c: &common::Small) -> Transformer<f32> {
    let mut model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let id = model.params().find("head.bias").unwrap();
    model.params_mut().get_mut(id)[c.vocab.gen_start_id() as usize] = 1e3;
    model
}

#[test]
fn visual_generation_takes_exactly_k_passes() {
    let c = small();
    let model = eager_model(&c);
    for s in dataset(3, 12) {
        let planes = s.scene.render_planes();
        let g = generate(&model, &c.tokenizer, &c.vocab, &planes, &s.instruction, Sampling::Argmax).unwrap();
        assert!(g.generated());
        assert_eq!(g.visual_passes, 4);
        assert_eq!(g.model_evaluations, 1 + 4);
        let cfg = Sampling::CfgTopK { guidance: 3.0, top_k: 16, seed: 5 };
        let g = generate(&model, &c.tokenizer, &c.vocab, &planes, &s.instruction, cfg).unwrap();
        assert_eq!(g.visual_passes, 4);
        assert_eq!(g.model_evaluations, 1 + 8);
        let (ids, passes) = generate_next_token_baseline(&model, &c.tokenizer, &c.vocab, &planes, &s.instruction).unwrap();
        assert_eq!((ids.len(), passes), (64, 64));
    }
}

#[test]
fn generation_is_deterministic() {
    let c = small();
    let model = eager_model(&c);
    let s = &dataset(1, 13)[0];
    let planes = s.scene.render_planes();
    for sampling in [Sampling::Argmax, Sampling::CfgTopK { guidance: 3.0, top_k: 16, seed: 9 }] {
        let a = generate(&model, &c.tokenizer, &c.vocab, &planes, &s.instruction, sampling).unwrap();
        let b = generate(&model, &c.tokenizer, &c.vocab, &planes, &s.instruction, sampling).unwrap();
        assert_eq!(a, b);
    }
    let bad = Sampling::CfgTopK { guidance: 3.0, top_k: 0, seed: 9 };
    assert!(generate(&model, &c.tokenizer, &c.vocab, &planes, &s.instruction, bad).is_err());
}

#[test]
fn model_that_never_starts_yields_no_generation() {
    let c = small();
    let mut model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let id = model.params().find("head.bias").unwrap();
    model.params_mut().get_mut(id)[c.vocab.gen_end_id() as usize] = 1e3;
    let s = &dataset(1, 14)[0];
    let g = generate(&model, &c.tokenizer, &c.vocab, &s.scene.render_planes(), &s.instruction, Sampling::Argmax).unwrap();
    assert!(!g.generated());
    assert_eq!(g.visual_passes, 0);
    assert!(g.binary.is_empty());
}

#[test]
fn prefix_decoding() {
    let c = small();
    let s = &dataset(1, 15)[0];
    let maps = c.tokenizer.tokenize(&s.mask).unwrap();
    assert_eq!(decode_prefix_scales(&maps, 4, &c.tokenizer).unwrap(), c.tokenizer.detokenize(&maps).unwrap());
    let counts: Vec<usize> = (1..=4).map(|j| maps.truncated(j).token_count()).collect();
    assert_eq!(counts, vec![1, 5, 21, 85]);
    assert!(decode_prefix_scales(&maps, 0, &c.tokenizer).is_err());
    assert!(decode_prefix_scales(&maps, 5, &c.tokenizer).is_err());
}

#[test]
fn empty_prediction_rule() {
    let mut m = BinaryMask::empty(32, 32);
    assert!(is_empty_prediction(&m));
    m.set(3, 3, true);
    // 1 of 1024 pixels is under 0.1%
    assert!(is_empty_prediction(&m));
    m.set(3, 4, true);
    assert!(!is_empty_prediction(&m));
    let mut px = vec![0.0f32; 32 * 32];
    px[5] = 0.9;
    let soft = MaskImage::new(32, 32, px).unwrap();
    assert!(finalize_mask(&soft).is_empty());
}
