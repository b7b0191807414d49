use crossview::data::{
    image_grid, load_png, load_samples, make_toy_dataset, to_signed, to_unit, toy_samples, Batch, DatasetManifest,
    ToyConfig, View,
};
use crossview::embedder::{Embedder, EmbedderConfig};
use crossview::metrics::{evaluate, EvalSet, MetricsReport};
use crossview::losses::RandomConvPyramid;

fn small() -> ToyConfig {
    ToyConfig {
        n_locations: 4,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn toy_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_toy_dataset(dir.path(), &small()).unwrap();
    let reloaded = DatasetManifest::load(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest, reloaded);

    let mem = toy_samples(&small()).unwrap();
    for workers in [0, 3] {
        let disk = load_samples(&reloaded, workers).unwrap();
        assert_eq!(disk.len(), mem.len());
        for (d, m) in disk.iter().zip(&mem) {
            assert_eq!(d.location_id, m.location_id);
            assert_eq!(d.aerial, m.aerial);
            assert_eq!(d.ground, m.ground);
        }
    }
}

#[test]
fn batches_are_signed_and_invert() {
    let samples = toy_samples(&small()).unwrap();
    let b = Batch::gather(&samples, &[2, 0]).unwrap();
    assert_eq!(b.view(View::Ground).shape(), &[2, 3, 32, 128]);
    assert!(b.view(View::Aerial).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let back = to_unit(b.view(View::Aerial));
    let first = &back.data()[..samples[2].aerial.len()];
    let err = first
        .iter()
        .zip(samples[2].aerial.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-12, "{err}");
    assert!(to_signed(&back).max_abs_diff(b.view(View::Aerial)) < 1e-12);
}

#[test]
fn image_grid_png_round_trip() {
    let samples = toy_samples(&small()).unwrap();
    let row = vec![samples[0].ground.clone(), samples[1].ground.clone()];
    let grid = image_grid(&[row.clone(), row], 2, 1.0).unwrap();
    assert_eq!(grid.shape(), &[3, 2 * 32 + 2, 2 * 128 + 2]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.png");
    crossview::data::save_png(&path, &grid).unwrap();
    assert_eq!(load_png(&path).unwrap(), grid);
}

#[test]
fn embedder_checkpoint_round_trip() {
    let mut emb = Embedder::new(EmbedderConfig::default(), 4).unwrap();
    emb.freeze();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.ckpt");
    emb.save(&path).unwrap();
    let back = Embedder::load(&path).unwrap();
    assert_eq!(back.digest(), emb.digest());
    let samples = toy_samples(&small()).unwrap();
    let b = Batch::gather(&samples, &[0, 1, 2, 3]).unwrap();
    assert_eq!(
        emb.embed(b.view(View::Aerial), View::Aerial).unwrap(),
        back.embed(b.view(View::Aerial), View::Aerial).unwrap()
    );
    assert!(Embedder::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn small_eval_report_skips_fid_and_round_trips() {
    let samples = toy_samples(&small()).unwrap();
    let b = Batch::gather(&samples, &[0, 1, 2, 3]).unwrap();
    let emb = Embedder::new(EmbedderConfig::default(), 1).unwrap();
    let phi = RandomConvPyramid::standard(0);
    let (ground, aerial) = (to_unit(b.view(View::Ground)), to_unit(b.view(View::Aerial)));
    let set = EvalSet {
        generated: &ground,
        target: &ground,
        source: &aerial,
        target_view: View::Ground,
    };
    let report = evaluate(&set, &emb, &phi, "cfg").unwrap();
    let text = report.to_text();
    assert!(text.contains("fid skipped"), "{text}");
    assert!(!text.lines().any(|l| l.starts_with("fid =")), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.txt");
    report.save(&path).unwrap();
    assert_eq!(MetricsReport::load(&path).unwrap().to_text(), text);
}
