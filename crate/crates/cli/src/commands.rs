use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use genseg::checkpoint::{model_checkpoint, model_from_checkpoint, tokenizer_checkpoint, tokenizer_from_checkpoint, Checkpoint};
use genseg::data::{generate_samples, read_dataset, read_scene_planes, DatasetConfig, Sample};
use genseg::eval::{bench_inference, evaluate, BenchMode, BenchReport};
use genseg::inference::{decode_prefix_scales, generate, Sampling};
use genseg::mask::MaskImage;
use genseg::model::{ModelConfig, Transformer};
use genseg::tokenizer::{train_tokenizer as fit_tokenizer, Tokenizer, TokenizerConfig, TokenizerTrainConfig};
use genseg::training::{build_supervision, patch_dim, TrainConfig, Trainer};
use genseg::vocab::UnifiedVocab;
use serde_json::json;

use crate::config::{Config, Settings};
use crate::{BenchArgs, DumpScalesArgs, EvalArgs, GenDataArgs, SamplingArgs, SegmentArgs, TrainArgs, TrainTokenizerArgs};

pub struct Context {
    pub workdir: PathBuf,
    pub config: Config,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn settings(&self) -> Settings<'_> {
        Settings::new(&self.config)
    }
}

fn announce(command: &str, s: &Settings) {
    eprintln!("genseg {} {command} {}", crate::VERSION, s.summary());
}

fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    Ok(tokenizer_from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_model(path: &Path, tok: &Tokenizer) -> Result<Transformer<f32>> {
    Ok(model_from_checkpoint(&Checkpoint::load(path)?, tok)?)
}

fn vocab_for(tok: &Tokenizer) -> UnifiedVocab {
    UnifiedVocab::with_default_words(tok.codebook().size())
}

fn load_samples(dir: &Path, limit: Option<usize>) -> Result<Vec<Sample>> {
    let mut samples = read_dataset(dir).with_context(|| format!("dataset {}", dir.display()))?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    Ok(samples)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn sampling(s: &mut Settings, a: SamplingArgs) -> Result<Sampling> {
    let mode: String = s.get("sampling", a.sampling, "argmax".to_string())?;
    match mode.as_str() {
        "argmax" => Ok(Sampling::Argmax),
        "cfg" => Ok(Sampling::CfgTopK {
            guidance: s.get("guidance", a.guidance, 3.0)?,
            top_k: s.get("top_k", a.top_k, 16)?,
            seed: s.get("sample_seed", a.sample_seed, 0)?,
        }),
        other => bail!("unknown sampling mode {other:?} (expected argmax or cfg)"),
    }
}

pub fn gen_data(ctx: &Context, a: GenDataArgs) -> Result<()> {
    let mut s = ctx.settings();
    let defaults = DatasetConfig::default();
    let config = DatasetConfig {
        count: s.get("count", a.count, defaults.count)?,
        seed: s.get("seed", a.seed, defaults.seed)?,
        no_target_frac: s.get("no_target_frac", a.no_target_frac, defaults.no_target_frac)?,
        multi_target_frac: s.get("multi_target_frac", a.multi_target_frac, defaults.multi_target_frac)?,
        scene: defaults.scene,
    };
    let out = s.path("out_dir", a.out_dir, "data");
    announce("gen-data", &s);
    let samples = generate_samples(&config)?;
    genseg::data::write_dataset(&ctx.path(&out), &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn train_tokenizer(ctx: &Context, a: TrainTokenizerArgs) -> Result<()> {
    let mut s = ctx.settings();
    let data = s.path("data_dir", a.data_dir, "data");
    let out = s.path("out", a.out, "tokenizer.ckpt");
    let log = s.path("log", a.log, "tokenizer_log.jsonl");
    let td = TokenizerTrainConfig::default();
    let train = TokenizerTrainConfig {
        steps: s.get("steps", a.steps, td.steps)?,
        batch_size: s.get("batch_size", a.batch_size, td.batch_size)?,
        lr: s.get("lr", a.lr, td.lr)?,
        seed: s.get("seed", a.seed, td.seed)?,
        ..td
    };
    let cd = TokenizerConfig::default();
    let config = TokenizerConfig {
        codebook_size: s.get("codebook_size", a.codebook_size, cd.codebook_size)?,
        latent_dim: s.get("latent_dim", a.latent_dim, cd.latent_dim)?,
        seed: train.seed,
        ..cd
    };
    announce("train-tokenizer", &s);
    let masks: Vec<MaskImage> = load_samples(&ctx.path(&data), None)?.into_iter().map(|x| x.mask).collect();
    let mut w = create(&ctx.path(&log))?;
    let mut io = Ok(());
    let tok = fit_tokenizer(&masks, config, &train, |l| {
        let rec = json!({
            "step": l.step,
            "lr": l.lr,
            "reconstruction": l.reconstruction,
            "codebook": l.codebook,
            "active_codes": l.active_codes,
        });
        if io.is_ok() {
            io = writeln!(w, "{rec}");
        }
    })?;
    io?;
    w.flush()?;
    tokenizer_checkpoint(&tok).save(&ctx.path(&out))?;
    println!("saved tokenizer to {}", out.display());
    Ok(())
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let mut s = ctx.settings();
    let data = s.path("data_dir", a.data_dir, "data");
    let tok_path = s.path("tokenizer", a.tokenizer, "tokenizer.ckpt");
    let out = s.path("out", a.out, "model.ckpt");
    let log = s.path("log", a.log, "train_log.jsonl");
    let td = TrainConfig::toy();
    let train = TrainConfig {
        steps: s.get("steps", a.steps, td.steps)?,
        batch_size: s.get("batch_size", a.batch_size, td.batch_size)?,
        lr: s.get("lr", a.lr, td.lr)?,
        warmup_frac: s.get("warmup_frac", a.warmup_frac, td.warmup_frac)?,
        seed: s.get("seed", a.seed, td.seed)?,
        ..td
    };
    let tok = load_tokenizer(&ctx.path(&tok_path))?;
    let vocab = vocab_for(&tok);
    let mut mc = ModelConfig::toy(vocab.size(), tok.codebook().dim(), patch_dim());
    mc.d_model = s.get("d_model", a.d_model, mc.d_model)?;
    mc.n_layers = s.get("n_layers", a.n_layers, mc.n_layers)?;
    mc.n_heads = s.get("n_heads", a.n_heads, mc.n_heads)?;
    mc.ff_dim = 4 * mc.d_model;
    mc.seed = train.seed;
    announce("train", &s);
    let samples = load_samples(&ctx.path(&data), None)?;
    let seqs = samples
        .iter()
        .map(|x| build_supervision(&x.scene.render_planes(), &x.instruction, &x.mask, &tok, &vocab))
        .collect::<genseg::Result<Vec<_>>>()?;
    let model = Transformer::<f32>::init(mc)?;
    let mut trainer = Trainer::new(model, train, &vocab, tok.codebook())?;
    let mut w = create(&ctx.path(&log))?;
    let mut io = Ok(());
    let steps = trainer.run(&seqs, |l| {
        if io.is_ok() {
            io = serde_json::to_string(l).map_err(std::io::Error::other).and_then(|line| writeln!(w, "{line}"));
        }
    })?;
    io?;
    w.flush()?;
    model_checkpoint(&trainer.model, &tok).save(&ctx.path(&out))?;
    if let Some(last) = steps.last() {
        println!("step {} loss {:.4}; saved model to {}", last.step, last.loss, out.display());
    }
    Ok(())
}

pub fn segment(ctx: &Context, a: SegmentArgs) -> Result<()> {
    let mut s = ctx.settings();
    let tok_path = s.path("tokenizer", a.tokenizer, "tokenizer.ckpt");
    let model_path = s.path("model", a.model, "model.ckpt");
    let out = s.path("out", a.out, "mask.pgm");
    let dump = a.dump_scales;
    let sampling = sampling(&mut s, a.sampling)?;
    announce("segment", &s);
    let tok = load_tokenizer(&ctx.path(&tok_path))?;
    let model = load_model(&ctx.path(&model_path), &tok)?;
    let vocab = vocab_for(&tok);
    let (h, w, planes) = read_scene_planes(&ctx.path(&a.image))?;
    if (h, w) != tok.config().image_dims() {
        bail!("scene is {h}x{w} but the tokenizer expects {:?}", tok.config().image_dims());
    }
    let start = Instant::now();
    let g = generate(&model, &tok, &vocab, &planes, &a.instruction, sampling)?;
    let seconds = start.elapsed().as_secs_f64();
    g.binary.write_pgm(&ctx.path(&out))?;
    if let (Some(dir), Some(maps)) = (dump, &g.maps) {
        let dir = ctx.path(&dir);
        fs::create_dir_all(&dir)?;
        for j in 1..=maps.maps.len() {
            decode_prefix_scales(maps, j, &tok)?.write_pgm(&dir.join(format!("scale_{j}.pgm")))?;
        }
    }
    let rec = json!({
        "instruction": a.instruction,
        "generated": g.generated(),
        "text_tokens": g.text_ids.len(),
        "visual_tokens": g.maps.as_ref().map_or(0, |m| m.token_count()),
        "forward_passes": g.visual_passes,
        "model_evaluations": g.model_evaluations,
        "predicted_pixels": g.binary.count(),
        "wall_seconds": seconds,
    });
    println!("{rec}");
    Ok(())
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let mut s = ctx.settings();
    let data = s.path("data_dir", a.data_dir, "eval_data");
    let tok_path = s.path("tokenizer", a.tokenizer, "tokenizer.ckpt");
    let model_path = s.path("model", a.model, "model.ckpt");
    let out = s.path("out", a.out, "metrics.jsonl");
    let limit = s.optional("limit", a.limit)?;
    let sampling = sampling(&mut s, a.sampling)?;
    announce("eval", &s);
    let tok = load_tokenizer(&ctx.path(&tok_path))?;
    let model = load_model(&ctx.path(&model_path), &tok)?;
    let vocab = vocab_for(&tok);
    let samples = load_samples(&ctx.path(&data), limit)?;
    let (records, summary) = evaluate(&model, &tok, &vocab, &samples, sampling)?;
    let mut w = create(&ctx.path(&out))?;
    for r in &records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    writeln!(w, "{}", json!({ "summary": summary }))?;
    w.flush()?;

    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("samples             {}", summary.samples);
    println!("gIoU                {:.4}", summary.giou);
    println!("cIoU                {}", opt(summary.ciou));
    println!("single-target gIoU  {} (n={})", opt(summary.single_target_giou), summary.single_target_samples);
    println!("no-target accuracy  {} (n={})", opt(summary.no_target_accuracy), summary.no_target_samples);
    println!("scales  mean IoU");
    for (j, v) in summary.scale_iou.iter().enumerate() {
        println!("1..{:<4} {v:.4}", j + 1);
    }
    Ok(())
}

pub fn bench(ctx: &Context, a: BenchArgs) -> Result<()> {
    let mut s = ctx.settings();
    let data = s.path("data_dir", a.data_dir, "eval_data");
    let tok_path = s.path("tokenizer", a.tokenizer, "tokenizer.ckpt");
    let model_path = s.path("model", a.model, "model.ckpt");
    let out = s.path("out", a.out, "bench.csv");
    let limit = s.get("limit", a.limit, 20)?;
    announce("bench", &s);
    let tok = load_tokenizer(&ctx.path(&tok_path))?;
    let model = load_model(&ctx.path(&model_path), &tok)?;
    let vocab = vocab_for(&tok);
    let prompts: Vec<(Vec<f32>, String)> = load_samples(&ctx.path(&data), Some(limit))?
        .into_iter()
        .map(|x| (x.scene.render_planes(), x.instruction))
        .collect();
    let mut w = create(&ctx.path(&out))?;
    writeln!(w, "{}", BenchReport::CSV_HEADER)?;
    println!("{}", BenchReport::CSV_HEADER);
    for mode in [BenchMode::NextScale, BenchMode::NextTokenBaseline] {
        let r = bench_inference(&model, &tok, &vocab, &prompts, mode)?;
        writeln!(w, "{}", r.csv_row())?;
        println!("{}", r.csv_row());
    }
    w.flush()?;
    Ok(())
}

pub fn dump_scales(ctx: &Context, a: DumpScalesArgs) -> Result<()> {
    let mut s = ctx.settings();
    let tok_path = s.path("tokenizer", a.tokenizer, "tokenizer.ckpt");
    let out = s.path("out_dir", a.out_dir, "scales");
    announce("dump-scales", &s);
    let tok = load_tokenizer(&ctx.path(&tok_path))?;
    let mask = MaskImage::read_pgm(&ctx.path(&a.mask))?;
    let maps = tok.tokenize(&mask)?;
    let dir = ctx.path(&out);
    fs::create_dir_all(&dir)?;
    for j in 1..=maps.maps.len() {
        let path = dir.join(format!("scale_{j}.pgm"));
        decode_prefix_scales(&maps, j, &tok)?.write_pgm(&path)?;
        println!("{} tokens -> {}", maps.truncated(j).token_count(), path.display());
    }
    Ok(())
}
