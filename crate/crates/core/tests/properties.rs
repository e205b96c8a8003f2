use genseg::checkpoint::{Checkpoint, CheckpointKind};
use genseg::eval::{iou, PairCounts};
use genseg::inference::{guided_logits, mask_visual_logits, sample_argmax};
use genseg::mask::BinaryMask;
use genseg::model::{attention_mask, SequenceSample};
use genseg::params::Tensor;
use genseg::resize::Resampler;
use genseg::tokenizer::{
    multi_scale_quantize, multi_scale_reconstruct, quantize_residual, Codebook, LatentGrid, ScalePyramid, Schedule,
    TokenMap,
};
use genseg::vocab::UnifiedVocab;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn brute_nearest(rows: &[f32], dim: usize, f: &[f32]) -> u32 {
    let mut best = (f64::INFINITY, 0usize);
    for (i, r) in rows.chunks(dim).enumerate() {
        let d: f64 = r.iter().zip(f).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1 as u32
}

/// Values on a coarse grid so exact ties are common.
fn grid_values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-4i32..=4).prop_map(|v| v as f32 * 0.5), n)
}

fn schedule_strategy() -> impl Strategy<Value = Schedule> {
    prop::collection::btree_set(1usize..=6, 1..4).prop_map(|s| {
        let sides: Vec<usize> = s.into_iter().collect();
        Schedule::square(&sides).unwrap()
    })
}

proptest! {
    #[test]
    fn quantizer_agrees_with_exhaustive_scan((dim, v, rows, f) in (1usize..=4, 2usize..=12).prop_flat_map(|(d, v)| {
        (Just(d), Just(v), grid_values(d * v), grid_values(d))
    })) {
        let cb = Codebook::new(v, dim, rows.clone()).unwrap();
        prop_assert_eq!(cb.quantize_cell(&f).unwrap(), brute_nearest(&rows, dim, &f));
    }

    #[test]
    fn codebook_rows_quantize_to_their_first_copy((dim, v, rows) in (1usize..=4, 2usize..=10).prop_flat_map(|(d, v)| {
        (Just(d), Just(v), grid_values(d * v))
    })) {
        let cb = Codebook::new(v, dim, rows.clone()).unwrap();
        for i in 0..v {
            let got = cb.quantize_cell(cb.row(i)).unwrap() as usize;
            let first = rows.chunks(dim).position(|r| r == cb.row(i)).unwrap();
            prop_assert_eq!(got, first);
        }
    }

    #[test]
    fn schedule_offsets_partition_the_tokens(s in schedule_strategy()) {
        let mut at = 0;
        for k in 0..s.len() {
            prop_assert_eq!(s.offset(k), at);
            at += s.tokens_at(k);
        }
        prop_assert_eq!(at, s.total_tokens());
        prop_assert_eq!(Schedule::parse(&s.to_spec_string()).unwrap(), s);
    }

    #[test]
    fn resampling_preserves_constants(ih in 1usize..10, iw in 1usize..10, oh in 1usize..10, ow in 1usize..10, c in -3.0f32..3.0) {
        let r = Resampler::new(ih, iw, oh, ow);
        let out = r.apply(&vec![c; ih * iw * 2], 2);
        prop_assert_eq!(out.len(), oh * ow * 2);
        for v in out {
            prop_assert!((v - c).abs() <= 1e-5 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn residual_accumulation_matches_reconstruction(
        (s, latent, rows) in schedule_strategy().prop_flat_map(|s| {
            let (h, w) = s.last();
            (Just(s), prop::collection::vec(-2.0f32..2.0, h * w * 2), prop::collection::vec(-1.0f32..1.0, 16))
        })
    ) {
        let (h, w) = s.last();
        let z = LatentGrid::new(h, w, 2, latent).unwrap();
        let cb = Codebook::new(8, 2, rows).unwrap();
        let rq = quantize_residual(&z, &cb, &ScalePyramid::new(&s)).unwrap();
        let rec = multi_scale_reconstruct(&rq.maps, &cb).unwrap();
        prop_assert!(rec.max_abs_diff(&rq.accumulated) < 1e-5);
        prop_assert_eq!(multi_scale_quantize(&z, &cb, &s).unwrap(), rq.maps.clone());
        prop_assert_eq!(rq.maps.token_count(), s.total_tokens());
    }

    #[test]
    fn visual_ids_round_trip(s in schedule_strategy(), v in 2usize..40, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let vocab = UnifiedVocab::with_default_words(v);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..s.total_tokens()).map(|_| vocab.visual_base() + rng.gen_range(0..v as u32)).collect();
        let maps = vocab.ids_to_maps(&ids, &s).unwrap();
        prop_assert_eq!(vocab.maps_to_ids(&maps).unwrap(), ids);
    }

    #[test]
    fn restricted_argmax_is_always_visual(row in prop::collection::vec(-50.0f32..50.0, UnifiedVocab::with_default_words(8).size())) {
        let vocab = UnifiedVocab::with_default_words(8);
        prop_assert!(vocab.is_visual(sample_argmax(&mask_visual_logits(&row, &vocab))));
    }

    #[test]
    fn unit_guidance_is_identity(cond in prop::collection::vec(-1e3f32..1e3, 1..64), shift in -10.0f32..10.0) {
        let uncond: Vec<f32> = cond.iter().map(|c| c + shift).collect();
        let g = guided_logits(&cond, &uncond, 1.0);
        prop_assert!(g.iter().zip(&cond).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 36), b in prop::collection::vec(any::<bool>(), 36)) {
        let to_mask = |bits: &[bool]| {
            let mut m = BinaryMask::empty(6, 6);
            for (i, &v) in bits.iter().enumerate() {
                m.set(i / 6, i % 6, v);
            }
            m
        };
        let (ma, mb) = (to_mask(&a), to_mask(&b));
        let x = iou(&ma, &mb).unwrap();
        prop_assert_eq!(x, iou(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&ma, &ma).unwrap(), 1.0);
        let pc = PairCounts::of(&ma, &mb).unwrap();
        prop_assert!(pc.intersection <= pc.union);
    }

    #[test]
    fn attention_never_looks_past_its_block(n_patch in 1usize..5, n_text in 0usize..4, upto in 1usize..=3) {
        let s = Schedule::square(&[1, 2, 3]).unwrap();
        let text: Vec<u32> = (0..n_text as u32).collect();
        let mut seq = SequenceSample::prompt(vec![0.0; n_patch * 2], 2, &text);
        seq.visual_inputs = s
            .scales()
            .iter()
            .enumerate()
            .map(|(k, &(h, w))| TokenMap { scale_index: k + 1, height: h, width: w, indices: vec![0; h * w] })
            .collect();
        seq.open_blocks(&s, upto).unwrap();
        let mask = attention_mask(&seq);
        let h = seq.horizons();
        for i in 0..seq.len() {
            prop_assert!(h[i] >= i);
            if i > 0 {
                prop_assert!(h[i] >= h[i - 1]);
            }
            for j in 0..seq.len() {
                prop_assert_eq!(mask[i][j], j <= h[i]);
            }
        }
        for b in &seq.scale_blocks {
            for i in b.clone() {
                prop_assert_eq!(h[i], b.end - 1);
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        values in prop::collection::vec(any::<f32>(), 0..40),
        meta in prop::collection::btree_map("[a-z]{1,6}", "[a-z0-9,.]{0,8}", 0..4),
    ) {
        let ck = Checkpoint {
            kind: CheckpointKind::Tokenizer,
            codebook_size: 3,
            latent_dim: 2,
            downsample: 4,
            schedule: Schedule::toy(),
            metadata: meta.into_iter().collect::<BTreeMap<_, _>>(),
            tensors: vec![Tensor { name: "t".into(), shape: vec![values.len()], data: values.clone() }],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let bits: Vec<u32> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(&back.metadata, &ck.metadata);
    }
}
