use chain_core::corpus::{generate_synthetic_corpus, load_videos, Manifest};
use chain_core::experiment::{build_feature_corpus, toy_train_config};
use chain_core::extract::{extract_corpus, ExtractorConfig};
use chain_core::retrieval::{
    encode_corpus, map_at_k, pr_curve, read_metrics_csv, write_metrics_csv, MetricRow,
};
use chain_core::{Checkpoint, CodeBook, SynthConfig, TrainConfig, Trainer, VideoData};

fn small_extractor() -> ExtractorConfig {
    ExtractorConfig {
        widths: [4, 8],
        feature_dim: 16,
        ..ExtractorConfig::default()
    }
}

fn small_config() -> TrainConfig {
    let mut cfg = toy_train_config(1);
    cfg.epochs = 2;
    cfg.batch_size = 6;
    cfg.encoder.frame_dim = 16;
    cfg.encoder.clip_length = 4;
    cfg
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::new(12, 3, 12, 1, 5);
    let frames = generate_synthetic_corpus(&synth, dir.path().join("frames")).unwrap();
    assert_eq!(frames.len(), 12);
    let reloaded = Manifest::load(dir.path().join("frames/manifest.jsonl")).unwrap();
    assert_eq!(reloaded, frames);

    let features =
        extract_corpus(&frames, &small_extractor(), dir.path().join("features")).unwrap();
    let videos = load_videos(&features, 4).unwrap();
    assert_eq!(videos.len(), 12);
    for v in &videos {
        match &v.data {
            VideoData::Features(f) => assert_eq!(f.dim(), (12, 16)),
            VideoData::Frames(_) => panic!("expected features"),
        }
    }
}

#[test]
fn train_save_resume_encode_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let videos = build_feature_corpus(
        &SynthConfig::new(18, 3, 12, 1, 6),
        &small_extractor(),
        dir.path(),
        4,
    )
    .unwrap();

    let mut straight = Trainer::new(small_config()).unwrap();
    straight.fit(&videos, None, &mut |_| {}).unwrap();

    // One epoch, checkpoint to disk, reload, one more epoch.
    let mut first = small_config();
    first.epochs = 1;
    let mut trainer = Trainer::new(first).unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    let path = trainer
        .fit(&videos, Some(&ckpt_dir), &mut |_| {})
        .unwrap()
        .unwrap();
    let mut ckpt = Checkpoint::load(&path).unwrap();
    ckpt.config.epochs = 2;
    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    resumed.fit(&videos, None, &mut |_| {}).unwrap();
    assert_eq!(resumed.model, straight.model);

    let book = encode_corpus(&resumed.model, &videos).unwrap();
    assert_eq!((book.len(), book.bits()), (18, 16));
    let path = dir.path().join("codes.chnb");
    book.write(&path).unwrap();
    let back = CodeBook::read(&path).unwrap();
    assert_eq!(back, book);

    let m = map_at_k(&back, &back, 5).unwrap();
    assert!((0.0..=1.0).contains(&m));
    let curve = pr_curve(&back, &back).unwrap();
    assert_eq!(curve.len(), 17);
    assert_eq!(curve.last().unwrap().recall, 1.0);

    let rows = vec![MetricRow {
        metric: "map".into(),
        k: 5,
        value: m,
    }];
    let csv = dir.path().join("metrics.csv");
    write_metrics_csv(&csv, &rows).unwrap();
    assert_eq!(read_metrics_csv(&csv).unwrap(), rows);
}
