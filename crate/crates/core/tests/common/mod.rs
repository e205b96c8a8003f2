#![allow(dead_code)]

use genseg::model::{ModelConfig, SequenceSample, Transformer};
use genseg::tokenizer::{Codebook, Schedule, TokenMap};
use genseg::vocab::UnifiedVocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Tiny {
    pub config: ModelConfig,
    pub vocab: UnifiedVocab,
    pub codebook: Codebook,
}

/// Under a thousand parameters: two words, four visual tokens, schedule (1, 2).
pub fn tiny() -> Tiny {
    let vocab = UnifiedVocab::new(&["segment", "red"], 4).unwrap();
    let schedule = Schedule::square(&[1, 2]).unwrap();
    let config = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 12,
        max_seq_len: 4 + schedule.total_tokens() + 1,
        vocab_size: vocab.size(),
        schedule,
        latent_dim: 2,
        patch_dim: 2,
        seed: 3,
    };
    let codebook = Codebook::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.3, -0.7]).unwrap();
    Tiny { config, vocab, codebook }
}

pub fn random_maps(schedule: &Schedule, v: usize, rng: &mut impl Rng) -> Vec<TokenMap> {
    schedule
        .scales()
        .iter()
        .enumerate()
        .map(|(k, &(h, w))| TokenMap {
            scale_index: k + 1,
            height: h,
            width: w,
            indices: (0..h * w).map(|_| rng.gen_range(0..v as u32)).collect(),
        })
        .collect()
}

/// A full supervised sequence: two patches, one word, all blocks, closing slot.
pub fn tiny_sample(t: &Tiny, seed: u64) -> SequenceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches: Vec<f32> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
    let text = t.vocab.encode_text("red");
    let mut s = SequenceSample::prompt(patches, 2, &text);
    let schedule = &t.config.schedule;
    s.visual_inputs = random_maps(schedule, t.vocab.visual_count(), &mut rng);
    let last_prompt = s.len() - 1;
    s.open_blocks(schedule, schedule.len()).unwrap();
    let end = s.close(schedule).unwrap();
    s.set_target(last_prompt, t.vocab.gen_start_id());
    let blocks = s.scale_blocks.clone();
    for (k, b) in blocks.iter().enumerate() {
        for (p, i) in b.clone().enumerate() {
            let id = t.vocab.visual_id(s.visual_inputs[k].indices[p]).unwrap();
            s.set_target(i, id);
        }
    }
    s.set_target(end, t.vocab.gen_end_id());
    s
}

/// Re-draws every parameter from N(0, std²) so gradients are not vanishingly small.
pub fn scramble<T: genseg::real::Real>(model: &mut Transformer<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        for v in &mut t.data {
            *v = T::lit(std * genseg::params::standard_normal(&mut rng));
        }
    }
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_check(t: &Tiny, step: f64) -> (f64, usize) {
    let mut model = Transformer::<f64>::init(t.config.clone()).unwrap();
    scramble(&mut model, 0.5, 11);
    let s = tiny_sample(t, 5);
    let (_, grads) = model.backward(&s, &t.vocab, &t.codebook).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for ti in 0..model.params().len() {
        for j in 0..model.params().tensors()[ti].data.len() {
            let orig = model.params().tensors()[ti].data[j];
            model.params_mut().tensors_mut()[ti].data[j] = orig + step;
            let up = model.loss(&s, &t.vocab, &t.codebook).unwrap();
            model.params_mut().tensors_mut()[ti].data[j] = orig - step;
            let down = model.loss(&s, &t.vocab, &t.codebook).unwrap();
            model.params_mut().tensors_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.tensors()[ti].data[j];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Untrained toy tokenizer plus a narrow model sized for fast tests.
pub struct Small {
    pub tokenizer: genseg::tokenizer::Tokenizer,
    pub vocab: UnifiedVocab,
    pub config: ModelConfig,
}

pub fn small() -> Small {
    use genseg::tokenizer::{Tokenizer, TokenizerConfig};
    let tokenizer = Tokenizer::init(TokenizerConfig::default()).unwrap();
    let vocab = UnifiedVocab::with_default_words(tokenizer.codebook().size());
    let mut config = ModelConfig::toy(vocab.size(), tokenizer.config().latent_dim, genseg::training::patch_dim());
    config.d_model = 32;
    config.n_layers = 1;
    config.n_heads = 2;
    config.ff_dim = 64;
    Small { tokenizer, vocab, config }
}

pub fn dataset(count: usize, seed: u64) -> Vec<genseg::data::Sample> {
    let cfg = genseg::data::DatasetConfig { count, seed, ..Default::default() };
    genseg::data::generate_samples(&cfg).unwrap()
}
