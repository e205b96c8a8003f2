mod common;

use common::{gradient_check, scramble, tiny, tiny_sample};
use genseg::model::{attention_mask, cross_entropy, Logits, SequenceSample, Slot, Transformer};
use genseg::tokenizer::{Codebook, Schedule, TokenMap};
use genseg::Error;

fn row_softmax_sum(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row.iter().map(|v| (v - max).exp() / z).sum()
}

#[test]
fn single_token_gives_one_finite_row() {
    let t = tiny();
    let model = Transformer::<f32>::init(t.config.clone()).unwrap();
    let s = SequenceSample::prompt(vec![], 0, &t.vocab.encode_text("segment"));
    let logits = model.forward(&s, &t.vocab, &t.codebook).unwrap();
    assert_eq!((logits.rows, logits.vocab), (1, t.vocab.size()));
    assert!(logits.data.iter().all(|v| v.is_finite()));
}

#[test]
fn forward_is_deterministic_and_normalizable() {
    let t = tiny();
    let model = Transformer::<f64>::init(t.config.clone()).unwrap();
    let s = tiny_sample(&t, 1);
    let a = model.forward(&s, &t.vocab, &t.codebook).unwrap();
    let b = model.forward(&s, &t.vocab, &t.codebook).unwrap();
    assert_eq!(a, b);
    for i in 0..a.rows {
        assert!((row_softmax_sum(a.row(i)) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn too_long_sequences_are_rejected() {
    let t = tiny();
    let model = Transformer::<f32>::init(t.config.clone()).unwrap();
    let s = SequenceSample::prompt(vec![], 0, &[2; 5]);
    assert!(matches!(model.forward(&s, &t.vocab, &t.codebook), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn prompt_only_embedding_is_token_plus_position() {
    let t = tiny();
    let model = Transformer::<f64>::init(t.config.clone()).unwrap();
    let ids = t.vocab.encode_text("segment red");
    let s = SequenceSample::prompt(vec![], 0, &ids);
    let e = model.embed_slots(&s, &t.vocab, &t.codebook).unwrap();
    let p = model.params();
    let tok = p.get(p.find("tok_emb").unwrap());
    let pos = p.get(p.find("pos_emb").unwrap());
    let d = t.config.d_model;
    for (i, &id) in ids.iter().enumerate() {
        for c in 0..d {
            let want = tok[id as usize * d + c] + pos[i * d + c];
            assert_eq!(e.x[i * d + c], want);
        }
    }
}

#[test]
fn zero_projector_leaves_only_positions_on_queries() {
    let t = tiny();
    let mut model = Transformer::<f64>::init(t.config.clone()).unwrap();
    let (w, b) = model.projector_ids();
    model.params_mut().get_mut(w).fill(0.0);
    model.params_mut().get_mut(b).fill(0.0);
    let s = tiny_sample(&t, 2);
    let e = model.embed_slots(&s, &t.vocab, &t.codebook).unwrap();
    let p = model.params();
    let d = t.config.d_model;
    for (i, slot) in s.slots.iter().enumerate() {
        let want: &[f64] = match *slot {
            Slot::Query { scale, position } => {
                &p.get(p.find(&format!("scale_pos.{scale}")).unwrap())[position * d..(position + 1) * d]
            }
            Slot::GenEnd => p.get(p.find("end_pos").unwrap()),
            _ => continue,
        };
        assert_eq!(&e.x[i * d..(i + 1) * d], want);
    }
}

/// Half-pixel bilinear weights for doubling one axis.
fn upsample_axis_2_to_4(i: usize) -> [(usize, f64); 2] {
    let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(1);
    let f = src - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

#[test]
fn upsampled_query_matches_dense_oracle() {
    let mut t = tiny();
    t.config.schedule = Schedule::square(&[1, 2, 4]).unwrap();
    t.config.max_seq_len = 4 + t.config.schedule.total_tokens() + 1;
    let mut model = Transformer::<f64>::init(t.config.clone()).unwrap();
    scramble(&mut model, 0.3, 4);
    let cb = Codebook::new(4, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5, 1.0, 1.0]).unwrap();
    let r2 = vec![3u32, 0, 1, 2];
    let mut s = SequenceSample::prompt(vec![], 0, &t.vocab.encode_text("red"));
    s.visual_inputs = vec![
        TokenMap { scale_index: 1, height: 1, width: 1, indices: vec![1] },
        TokenMap { scale_index: 2, height: 2, width: 2, indices: r2.clone() },
    ];
    s.open_blocks(&t.config.schedule, 3).unwrap();
    let e = model.embed_slots(&s, &t.vocab, &cb).unwrap();

    let p = model.params();
    let w = p.get(p.find("gen_proj.weight").unwrap());
    let b = p.get(p.find("gen_proj.bias").unwrap());
    let pos = p.get(p.find("scale_pos.3").unwrap());
    let d = t.config.d_model;
    let block = s.scale_blocks[2].clone();
    for y in 0..4 {
        for x in 0..4 {
            let mut feat = [0.0f64; 2];
            for (py, wy) in upsample_axis_2_to_4(y) {
                for (px, wx) in upsample_axis_2_to_4(x) {
                    let row = cb.row(r2[py * 2 + px] as usize);
                    for c in 0..2 {
                        feat[c] += wy * wx * row[c] as f64;
                    }
                }
            }
            let slot = block.start + y * 4 + x;
            for c in 0..d {
                let want = feat[0] * w[c] + feat[1] * w[d + c] + b[c] + pos[(y * 4 + x) * d + c];
                assert!((e.x[slot * d + c] - want).abs() < 1e-5, "cell ({y},{x}) channel {c}");
            }
        }
    }
}

#[test]
fn missing_previous_map_is_an_error() {
    let t = tiny();
    let model = Transformer::<f32>::init(t.config.clone()).unwrap();
    let mut s = tiny_sample(&t, 3);
    s.visual_inputs.clear();
    assert!(model.embed_slots(&s, &t.vocab, &t.codebook).is_err());
}

#[test]
fn block_permutation_equivariance_without_positions() {
    let t = tiny();
    let mut model = Transformer::<f64>::init(t.config.clone()).unwrap();
    scramble(&mut model, 0.4, 9);
    let d = t.config.d_model;
    let s = tiny_sample(&t, 4);
    let horizons = s.horizons();
    let block = s.scale_blocks[1].clone();
    // arbitrary inputs stand in for embeddings with positions removed
    let x: Vec<f64> = (0..s.len() * d).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.1).collect();
    let perm = [2usize, 0, 3, 1];
    let mut xp = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (a, b) = (block.start + dst, block.start + src);
        xp[a * d..(a + 1) * d].copy_from_slice(&x[b * d..(b + 1) * d]);
    }
    let base = model.forward_embedded(x, &horizons).unwrap();
    let permuted = model.forward_embedded(xp, &horizons).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        let (a, b) = (block.start + dst, block.start + src);
        for (u, v) in permuted.row(a).iter().zip(base.row(b)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    // rows after the block see the same set of inputs
    for (u, v) in permuted.row(block.end).iter().zip(base.row(block.end)) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn mask_never_looks_into_later_blocks() {
    let t = tiny();
    let s = tiny_sample(&t, 6);
    let m = attention_mask(&s);
    let block_of = |i: usize| s.scale_blocks.iter().position(|b| b.contains(&i));
    for i in 0..s.len() {
        for j in 0..s.len() {
            if let (Some(bi), Some(bj)) = (block_of(i), block_of(j)) {
                if bj > bi {
                    assert!(!m[i][j]);
                }
            }
        }
    }
}

#[test]
fn loss_of_confident_correct_logits_is_zero() {
    let t = tiny();
    let s = tiny_sample(&t, 7);
    let v = t.vocab.size();
    let mut data = vec![0.0f64; s.len() * v];
    for (i, tgt) in s.targets.iter().enumerate() {
        if let Some(id) = tgt {
            data[i * v + *id as usize] = 1e6;
        }
    }
    let loss = cross_entropy(&Logits { rows: s.len(), vocab: v, data }, &s).unwrap();
    assert!(loss.abs() < 1e-9);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let t = tiny();
    let s = tiny_sample(&t, 8);
    let v = t.vocab.size();
    let loss = cross_entropy(&Logits { rows: s.len(), vocab: v, data: vec![0.3f64; s.len() * v] }, &s).unwrap();
    assert!((loss - (v as f64).ln()).abs() < 1e-4);
}

#[test]
fn loss_matches_scalar_recomputation() {
    let t = tiny();
    let mut model = Transformer::<f64>::init(t.config.clone()).unwrap();
    scramble(&mut model, 0.3, 2);
    let s = tiny_sample(&t, 9);
    let logits = model.forward(&s, &t.vocab, &t.codebook).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..s.len() {
        let Some(tgt) = s.targets[i] else { continue };
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[tgt as usize].exp() / z).ln();
        n += 1;
    }
    let want = total / n as f64;
    assert!((cross_entropy(&logits, &s).unwrap() - want).abs() < 1e-10);
    assert!((model.loss(&s, &t.vocab, &t.codebook).unwrap() - want).abs() < 1e-10);
}

#[test]
fn loss_without_supervision_is_an_error() {
    let t = tiny();
    let s = SequenceSample::prompt(vec![], 0, &[2]);
    let logits = Logits { rows: 1, vocab: t.vocab.size(), data: vec![0.0f64; t.vocab.size()] };
    assert!(cross_entropy(&logits, &s).is_err());
}

#[test]
fn unused_parameters_get_exactly_zero_gradient() {
    let t = tiny();
    let model = Transformer::<f64>::init(t.config.clone()).unwrap();
    let s = tiny_sample(&t, 10);
    let (_, g) = model.backward(&s, &t.vocab, &t.codebook).unwrap();
    let d = t.config.d_model;
    let tok = g.get(g.find("tok_emb").unwrap());
    // the pad token never appears as an input
    assert!(tok[..d].iter().all(|&v| v == 0.0));
    let pos = g.get(g.find("pos_emb").unwrap());
    assert!(pos[s.prefix_len() * d..].iter().all(|&v| v == 0.0));
    let proj = g.get(g.find("gen_proj.weight").unwrap());
    assert!(proj.iter().any(|&v| v != 0.0), "projector must receive gradient");
}

#[test]
fn backward_is_deterministic() {
    let t = tiny();
    let model = Transformer::<f32>::init(t.config.clone()).unwrap();
    let s = tiny_sample(&t, 12);
    let a = model.backward(&s, &t.vocab, &t.codebook).unwrap();
    let b = model.backward(&s, &t.vocab, &t.codebook).unwrap();
    assert_eq!(a, b);
}

#[test]
fn analytic_gradients_match_central_differences() {
    let t = tiny();
    let (worst, checked) = gradient_check(&t, 1e-4);
    eprintln!("gradient check: {checked} parameters, max relative error {worst:e}");
    assert!(checked <= 1000, "{checked} parameters");
    assert!(worst < 1e-3, "max relative error {worst:e}");
}

#[test]
fn parameter_layout_is_checked_on_load() {
    let t = tiny();
    let model = Transformer::<f32>::init(t.config.clone()).unwrap();
    let mut other = t.config.clone();
    other.d_model = 16;
    assert!(Transformer::from_params(other, model.params().clone()).is_err());
    let back = Transformer::from_params(t.config.clone(), model.params().clone()).unwrap();
    assert_eq!(back, model);
}
