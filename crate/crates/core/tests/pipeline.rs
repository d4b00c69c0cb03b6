use fooling::data::{glyph_dataset, load_idx, write_idx};
use fooling::fooling::{
    build_frame_mask, finetune, train_classifier, FoolMethod, FoolingConfig, LrSchedule, TrainConfig,
};
use fooling::interpreters::{InterpreterKind, InterpreterSpec};
use fooling::metrics::{accuracy, test_losses, FsrSpec, TestLossExtras};
use fooling::model::{load_checkpoint, save_checkpoint, ArchDescriptor, Model, Params};

fn trained(n: usize) -> (Model, fooling::data::Dataset, Params<f32>) {
    let raw = glyph_dataset(n, 28, 28, 3).unwrap();
    let data = raw.normalized(&raw.normalization_stats()).unwrap();
    let model = Model::build(ArchDescriptor::small_net(1, 28, 28, 10)).unwrap();
    let tc = TrainConfig { epochs: 2, lr: 0.02, momentum: 0.9, batch_size: 32, seed: 1 };
    let (w, _) = train_classifier(&model, &model.init_params(1), &data, &tc).unwrap();
    (model, data, w)
}

#[test]
fn checkpoint_file_round_trip_keeps_logits() {
    let (model, data, w) = trained(64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    save_checkpoint(&path, &w, model.desc()).unwrap();
    let (back, desc) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(&desc, model.desc());
    let batch = data.images().clone();
    assert_eq!(model.logits(&w, &batch).unwrap(), model.logits(&back, &batch).unwrap());
}

#[test]
fn idx_files_round_trip_glyphs() {
    let data = glyph_dataset(20, 16, 16, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&data, &img, &lbl).unwrap();
    let back = load_idx(&img, &lbl).unwrap();
    assert_eq!(back.labels(), data.labels());
    // pixels are quantized to 8 bits on disk
    for (a, b) in back.images().data().iter().zip(data.images().data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn short_location_run_moves_heatmaps_to_the_frame() {
    let (model, data, w0) = trained(3000);
    let spec = InterpreterSpec::new(InterpreterKind::GradCam, "act3");
    let mut cfg = FoolingConfig::new(FoolMethod::Location, spec.clone());
    // a short run at full rate; decay would halve its total step
    cfg.iterations = 60;
    cfg.schedule = LrSchedule::Constant;
    let (w, log) = finetune(&model, &w0, &data, None, &cfg).unwrap();
    assert_eq!(log.len(), 60);
    let probe = data.split_at(200).0;
    let extras = TestLossExtras::Location(build_frame_mask(7, 7).unwrap());
    let range = FsrSpec::default_for(FoolMethod::Location);
    let mean = |p: &Params<f32>| {
        let t = test_losses(&model, &w0, p, &probe, &spec, &extras, &range).unwrap();
        t.records.iter().map(|r| r.t).sum::<f64>() / t.records.len() as f64
    };
    let (before, after) = (mean(&w0), mean(&w));
    assert!(after < 0.5 * before, "location loss {before} -> {after}");
    let (a0, a) = (accuracy(&model, &w0, &probe, 1, None).unwrap(), accuracy(&model, &w, &probe, 1, None).unwrap());
    // 60 iterations is a fraction of a full run; the classifier must survive, not fully recover
    assert!(a0 > 90.0 && a > 70.0, "accuracy {a0} -> {a}");
}
