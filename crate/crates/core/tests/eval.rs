mod common;

use common::{dataset, small};
use genseg::data::Multiplicity;
use genseg::eval::{
    bench_inference, ciou, evaluate, giou, iou, summarize, BenchMode, BenchReport, EvalRecord, PairCounts,
};
use genseg::inference::Sampling;
use genseg::mask::BinaryMask;
use genseg::model::Transformer;

fn mask_from(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            m.set(y, x, f(y, x));
        }
    }
    m
}

fn pc(intersection: usize, union: usize) -> PairCounts {
    PairCounts { intersection, union }
}

#[test]
fn iou_cases() {
    let full = mask_from(8, 8, |_, _| true);
    let left = mask_from(8, 8, |_, x| x < 4);
    let right = mask_from(8, 8, |_, x| x >= 4);
    let empty = BinaryMask::empty(8, 8);
    assert_eq!(iou(&full, &full).unwrap(), 1.0);
    assert_eq!(iou(&left, &right).unwrap(), 0.0);
    assert_eq!(iou(&left, &full).unwrap(), 0.5);
    assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
    assert_eq!(iou(&empty, &full).unwrap(), 0.0);
    assert!(iou(&empty, &BinaryMask::empty(4, 4)).is_err());
}

#[test]
fn cumulative_versus_mean_iou() {
    let single = [pc(3, 7)];
    assert_eq!(ciou(&single).unwrap(), giou(&single).unwrap());
    let same_unions = [pc(2, 2), pc(0, 2)];
    assert_eq!(ciou(&same_unions).unwrap(), 0.5);
    assert_eq!(giou(&same_unions).unwrap(), 0.5);
    let distinguishing = [pc(2, 2), pc(1, 4)];
    assert_eq!(ciou(&distinguishing).unwrap(), 0.5);
    assert_eq!(giou(&distinguishing).unwrap(), 0.625);
    assert!(ciou(&[pc(0, 0), pc(0, 0)]).is_err());
    assert_eq!(giou(&[pc(0, 0), pc(0, 0)]).unwrap(), 1.0);
    assert!(giou(&[]).is_err());
}

#[test]
fn metrics_ignore_dataset_order() {
    let pairs = vec![pc(5, 9), pc(0, 3), pc(7, 7), pc(1, 10), pc(0, 0)];
    let mut rev = pairs.clone();
    rev.reverse();
    assert_eq!(ciou(&pairs).unwrap(), ciou(&rev).unwrap());
    assert!((giou(&pairs).unwrap() - giou(&rev).unwrap()).abs() < 1e-15);
}

fn record(id: u64, m: Multiplicity, i: usize, u: usize, predicted: usize, scale_iou: Vec<f64>) -> EvalRecord {
    EvalRecord {
        id,
        instruction: String::new(),
        multiplicity: m,
        generated: true,
        predicted_pixels: predicted,
        target_pixels: 0,
        intersection: i,
        union: u,
        iou: pc(i, u).iou(),
        scale_iou,
    }
}

#[test]
fn summary_splits_by_multiplicity() {
    let recs = vec![
        record(0, Multiplicity::One, 8, 10, 9, vec![0.2, 0.8]),
        record(1, Multiplicity::One, 4, 8, 6, vec![0.1, 0.5]),
        record(2, Multiplicity::None, 0, 0, 0, vec![1.0, 1.0]),
        record(3, Multiplicity::None, 0, 5, 5, vec![0.0, 0.0]),
    ];
    let s = summarize(&recs, 2).unwrap();
    assert_eq!(s.single_target_samples, 2);
    assert!((s.single_target_giou.unwrap() - 0.65).abs() < 1e-12);
    assert_eq!(s.no_target_accuracy, Some(0.5));
    assert!((s.scale_iou[1] - s.giou).abs() < 1e-12);
    assert_eq!(s.scale_iou.len(), 2);
}

#[test]
fn evaluation_curve_ends_at_giou() {
    let c = small();
    let model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let samples = dataset(4, 20);
    let (records, summary) = evaluate(&model, &c.tokenizer, &c.vocab, &samples, Sampling::Argmax).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(summary.scale_iou.len(), 4);
    assert!((summary.scale_iou[3] - summary.giou).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&summary.giou));
}

#[test]
fn bench_reports_schedule_pass_counts() {
    let c = small();
    let mut model = Transformer::<f32>::init(c.config.clone()).unwrap();
    let id = model.params().find("head.bias").unwrap();
    model.params_mut().get_mut(id)[c.vocab.gen_start_id() as usize] = 1e3;
    let prompts: Vec<(Vec<f32>, String)> =
        dataset(2, 21).into_iter().map(|s| (s.scene.render_planes(), s.instruction)).collect();
    let ns = bench_inference(&model, &c.tokenizer, &c.vocab, &prompts, BenchMode::NextScale).unwrap();
    let nt = bench_inference(&model, &c.tokenizer, &c.vocab, &prompts, BenchMode::NextTokenBaseline).unwrap();
    assert_eq!((ns.passes, ns.tokens), (4, 85));
    assert_eq!((nt.passes, nt.tokens), (64, 64));
    assert_eq!(nt.passes / ns.passes, 16);
    for r in [&ns, &nt] {
        assert_eq!(r.images, 2);
        assert!(r.seconds_per_image >= 0.0);
        assert_eq!(r.csv_row().split(',').count(), BenchReport::CSV_HEADER.split(',').count());
    }
    assert!(bench_inference(&model, &c.tokenizer, &c.vocab, &[], BenchMode::NextScale).is_err());
}
