use s3attn_core::sketch::incoherence;
use s3attn_harness::tasks::*;
use s3attn_numerics::fft::rfft_1d;
use s3attn_numerics::{Graph, RngState, Tensor};

fn labels(batch: &TaskBatch) -> &[usize] {
    match &batch.targets {
        Targets::Classes(l) => l,
        Targets::Sequence { labels, .. } => labels,
    }
}

#[test]
fn clean_lowrank_batches_match_their_templates() {
    let task = LowrankClassify::new(32, 8, 2, 5, 0.0, 0.0, &mut RngState::new(1)).unwrap();
    let batch = task.batch(200, &mut RngState::new(2));
    assert_eq!(batch.inputs.shape(), &[200, 32, 8]);
    assert_eq!(task.nearest_template(&batch.inputs), labels(&batch));
}

#[test]
fn templates_are_incoherent_with_unit_mean_square() {
    let (n, d_in, rank) = (128, 16, 4);
    let task = LowrankClassify::new(n, d_in, rank, 4, 0.5, 0.0, &mut RngState::new(3)).unwrap();
    for t in &task.templates {
        let mean_square = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((mean_square - 1.0).abs() < 1e-10);
        assert!(incoherence(t, rank).unwrap().mu < 10.0);
    }
}

#[test]
fn batches_are_deterministic_per_stream() {
    let task = LowrankClassify::new(16, 4, 2, 3, 0.5, 1.0, &mut RngState::new(4)).unwrap();
    let a = task.batch(8, &mut RngState::new(5));
    let b = task.batch(8, &mut RngState::new(5));
    let c = task.batch(8, &mut RngState::new(6));
    assert_eq!(a, b);
    assert_ne!(a.inputs, c.inputs);
}

#[test]
fn uniform_noise_has_exact_support_and_zero_mean() {
    let a = 2.5;
    let mut x = Tensor::zeros(&[1_000_000]);
    add_uniform_noise(&mut x, a, &mut RngState::new(7));
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(lo >= -a && lo <= -a * 0.99, "min {lo}");
    assert!(hi <= a && hi >= a * 0.99, "max {hi}");
    assert!(x.mean().abs() < 0.01 * a);
    let var = x.data().iter().map(|v| v * v).sum::<f64>() / x.numel() as f64;
    assert!((var - a * a / 3.0).abs() < 0.01 * a * a);

    let mut y = Tensor::ones(&[10]);
    let mut rng = RngState::new(8);
    add_uniform_noise(&mut y, 0.0, &mut rng);
    assert_eq!(y, Tensor::ones(&[10]));
    assert_eq!(rng.next_u64(), RngState::new(8).next_u64());
}

#[test]
fn copy_task_hand_instance() {
    let task = CopyTask::new(8, 2, 0.0).unwrap();
    let batch = task.encode(&[vec![1, 0, 1, 1]]);
    let slots: Vec<usize> = (0..8)
        .map(|t| (0..3).find(|&s| batch.inputs.at(&[0, t, s]) == 1.0).unwrap())
        .collect();
    assert_eq!(slots, [1, 0, 1, 1, 2, 2, 2, 2]);
    assert_eq!(batch.inputs.sum(), 8.0);
    assert_eq!(
        batch.targets,
        Targets::Sequence {
            positions: vec![4, 5, 6, 7],
            labels: vec![1, 0, 1, 1],
        }
    );
    assert!(CopyTask::new(7, 2, 0.0).is_err());
}

#[test]
fn entropy_floor_is_uniform_cross_entropy() {
    let task = CopyTask::new(16, 8, 0.0).unwrap();
    let batch = task.batch(3, &mut RngState::new(9));
    let labels = labels(&batch).to_vec();
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[labels.len(), 8]));
    let loss = g.cross_entropy(logits, &labels).unwrap();
    assert!((g.value(loss).item() - task.entropy_floor()).abs() < 1e-12);
    assert!((task.entropy_floor() - 8f64.ln()).abs() < 1e-15);
}

#[test]
fn image_like_templates_are_band_limited() {
    let (n, d_in) = (64, 5);
    let task = NoisyImageLike::new(n, d_in, 3, 0.0, 0.0, &mut RngState::new(10)).unwrap();
    for t in &task.templates {
        for j in 0..d_in {
            let column: Vec<f64> = (0..n).map(|i| t.at(&[i, j])).collect();
            let spec = rfft_1d(&column);
            let low: f64 = spec[1..=IMAGE_MAX_FREQ].iter().map(|c| c.norm_sqr()).sum();
            let rest: f64 = spec
                .iter()
                .enumerate()
                .filter(|&(k, _)| k == 0 || k > IMAGE_MAX_FREQ)
                .map(|(_, c)| c.norm_sqr())
                .sum();
            assert!(low > 0.0);
            assert!(rest < 1e-18 * low.max(1.0), "column {j}: {rest}");
        }
    }
}

#[test]
fn synthetic_task_dimensions() {
    let mut cfg = s3attn_harness::ExperimentConfig {
        n: 16,
        d_in: 6,
        classes: 3,
        ..Default::default()
    };
    let task = SyntheticTask::from_config(&cfg, &mut RngState::new(11)).unwrap();
    assert_eq!((task.d_in(), task.outputs(), task.is_sequence()), (6, 3, false));
    cfg.set("task", "copy").unwrap();
    cfg.vocab = 5;
    let task = SyntheticTask::from_config(&cfg, &mut RngState::new(11)).unwrap();
    assert_eq!((task.d_in(), task.outputs(), task.is_sequence()), (6, 5, true));
}
