use std::fs;
use std::path::Path;

use diga::domains::{
    generate_scene, load_dataset, render_domain, write_dataset, Benchmark, DomainTag,
};
use diga::TrainConfig;

fn small_cfg() -> TrainConfig {
    TrainConfig {
        n_source: 10,
        n_target_train: 6,
        n_target_val: 4,
        n_target2_val: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn write_then_load_round_trips() {
    let cfg = small_cfg();
    let bench = Benchmark::generate(&cfg, 5);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&bench, dir.path()).unwrap();
    let index = load_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(index.ids("source").len(), 10);

    let train = index.load_train_data(&cfg).unwrap();
    let eval = index.load_eval_data(&cfg).unwrap();
    let expected = bench.train_data();
    for ((x, y), (ex, ey)) in train.source.iter().zip(&expected.source) {
        assert_eq!(y, ey);
        let err = x.data.iter().zip(&ex.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1.0 / 255.0, "{err}");
    }
    assert_eq!(train.target.len(), 6);
    assert_eq!(eval.target_train_labels, bench.eval_data().target_train_labels);
    assert_eq!(eval.target2_val.len(), 4);
}

#[test]
fn missing_label_file_is_a_load_error() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let index = write_dataset(&Benchmark::generate(&cfg, 1), dir.path()).unwrap();
    let id = index.ids("source")[3].clone();
    let label = index.label_path("source", &id);
    fs::remove_file(&label).unwrap();
    let err = load_dataset(dir.path(), &cfg).unwrap_err().to_string();
    assert!(err.contains(&id), "{err}");
}

#[test]
fn out_of_range_label_is_a_load_error() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let index = write_dataset(&Benchmark::generate(&cfg, 1), dir.path()).unwrap();
    let id = index.ids("target_val")[0].clone();
    let mut bad = diga::tensor::LabelMap::new(cfg.image_height, cfg.image_width, 0);
    bad.set(3, 3, 9);
    diga::domains::write_png_label(&index.label_path("target_val", &id), &bad).unwrap();
    assert!(load_dataset(dir.path(), &cfg).is_err());
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let cfg = small_cfg();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&Benchmark::generate(&cfg, 9), a.path()).unwrap();
    write_dataset(&Benchmark::generate(&cfg, 9), b.path()).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn labels_match_rerasterized_geometry() {
    let cfg = TrainConfig::default();
    for seed in 0..20 {
        let scene = generate_scene(seed, &cfg);
        let raster = scene.rasterize(cfg.image_height, cfg.image_width);
        for tag in [DomainTag::Source, DomainTag::Target, DomainTag::Target2] {
            assert_eq!(render_domain(&scene, tag, &cfg).label.unwrap(), raster);
        }
    }
}

#[test]
fn nearest_neighbour_on_mean_colour_separates_domains() {
    let cfg = TrainConfig::default();
    let mean = |seed: u64, tag| render_domain(&generate_scene(seed, &cfg), tag, &cfg).image.channel_means();
    let train: Vec<([f64; 3], bool)> = (0..200)
        .map(|i| (mean(i, if i % 2 == 0 { DomainTag::Source } else { DomainTag::Target }), i % 2 == 1))
        .collect();
    let mut correct = 0;
    for i in 1000..1200u64 {
        let is_target = i % 2 == 1;
        let m = mean(i, if is_target { DomainTag::Target } else { DomainTag::Source });
        let dist = |a: &[f64; 3]| (0..3).map(|c| (a[c] - m[c]).powi(2)).sum::<f64>();
        let nearest = train
            .iter()
            .min_by(|a, b| dist(&a.0).total_cmp(&dist(&b.0)))
            .unwrap();
        if nearest.1 == is_target {
            correct += 1;
        }
    }
    assert!(correct as f64 / 200.0 > 0.9, "{correct}/200");
}
