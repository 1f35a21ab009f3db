use std::fs;

use mhmtl_core::data::{
    generate, generate_with_masks, load_manifest, resize_to_model, save_dataset, DataError, Label, ModelLabel,
    SizeRange,
};
use mhmtl_core::TaskSpec;
use proptest::prelude::*;

const SIZES: SizeRange = SizeRange { min: 300, max: 420 };

fn all_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::segmentation("seg", 3),
        TaskSpec::classification("cls", 4),
        TaskSpec::detection("det"),
        TaskSpec::regression("reg", 4),
    ]
}

#[test]
fn detection_box_bounds_the_target_raster() {
    let task = TaskSpec::detection("det");
    for (sample, mask) in generate_with_masks(3, &task, 30, SIZES).unwrap() {
        let [h, w] = sample.orig_size();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v == 1) {
            let (y, x) = (i / w, i % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let Label::Box(b) = sample.label else { panic!("box label") };
        let (bx0, bx1) = ((b[0] - b[2] / 2.0) * w as f64, (b[0] + b[2] / 2.0) * w as f64);
        let (by0, by1) = ((b[1] - b[3] / 2.0) * h as f64, (b[1] + b[3] / 2.0) * h as f64);
        for (got, want) in [(bx0, x0), (bx1, x1 + 1), (by0, y0), (by1, y1 + 1)] {
            assert!((got - want as f64).abs() < 1e-9, "{}: {got} vs {want}", sample.id);
        }
    }
}

#[test]
fn keypoints_are_axis_endpoints_of_the_target() {
    let task = TaskSpec::regression("reg", 4);
    for (sample, mask) in generate_with_masks(5, &task, 20, SIZES).unwrap() {
        let [_, w] = sample.orig_size();
        let Label::Keypoints(k) = &sample.label else { panic!("keypoint label") };
        let centre = [(k[0][0] + k[1][0]) / 2.0, (k[0][1] + k[1][1]) / 2.0];
        let centre2 = [(k[2][0] + k[3][0]) / 2.0, (k[2][1] + k[3][1]) / 2.0];
        assert!((centre[0] - centre2[0]).abs() < 1e-9 && (centre[1] - centre2[1]).abs() < 1e-9);
        let major = (k[0][0] - k[1][0]).hypot(k[0][1] - k[1][1]);
        let minor = (k[2][0] - k[3][0]).hypot(k[2][1] - k[3][1]);
        assert!(minor <= major);
        // Axes are perpendicular.
        let dot = (k[0][0] - k[1][0]) * (k[2][0] - k[3][0]) + (k[0][1] - k[1][1]) * (k[2][1] - k[3][1]);
        assert!(dot.abs() < 1e-6 * major * minor);
        // The centre pixel lies inside the raster, and the area matches pi*a*b.
        let (cx, cy) = (centre[0] as usize, centre[1] as usize);
        assert_eq!(mask[cy * w + cx], 1);
        let area = std::f64::consts::PI * major * minor / 4.0;
        let count = mask.iter().filter(|&&v| v == 1).count() as f64;
        assert!((count - area).abs() / area < 0.015, "{count} vs {area}");
    }
}

#[test]
fn classification_buckets_are_balanced() {
    for (k, count) in [(2, 17), (3, 20), (4, 30), (5, 7)] {
        let task = TaskSpec::classification("cls", k);
        let mut hist = vec![0usize; k];
        for s in generate(9, &task, count, SIZES).unwrap() {
            let Label::Class(c) = s.label else { panic!("class label") };
            hist[c] += 1;
        }
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
    }
}

#[test]
fn generation_does_not_depend_on_thread_count() {
    let task = TaskSpec::segmentation("seg", 2);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate(21, &task, 12, SIZES).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = all_tasks();
    let mut samples = Vec::new();
    for t in &tasks {
        samples.extend(generate(2, t, 4, SizeRange { min: 48, max: 90 }).unwrap());
    }
    let path = save_dataset(dir.path(), &tasks, &samples).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.tasks, tasks);
    assert_eq!(loaded.samples, samples);
}

#[test]
fn hundred_samples_load_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = vec![TaskSpec::classification("b", 3), TaskSpec::detection("a")];
    let mut samples = Vec::new();
    let b = generate(4, &tasks[0], 50, SizeRange { min: 48, max: 56 }).unwrap();
    let a = generate(4, &tasks[1], 50, SizeRange { min: 48, max: 56 }).unwrap();
    for (x, y) in b.into_iter().zip(a) {
        samples.push(x);
        samples.push(y);
    }
    samples.reverse();
    let path = save_dataset(dir.path(), &tasks, &samples).unwrap();
    let ids: Vec<_> = load_manifest(&path).unwrap().samples.into_iter().map(|s| s.id).collect();
    let want: Vec<_> = samples.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, want);
}

fn small_dataset() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::segmentation("seg", 2);
    let samples = generate(1, &task, 3, SizeRange { min: 48, max: 64 }).unwrap();
    let path = save_dataset(dir.path(), &[task], &samples).unwrap();
    (dir, path)
}

#[test]
fn missing_image_names_the_sample() {
    let (dir, path) = small_dataset();
    fs::remove_file(dir.path().join("images/seg-00001.png")).unwrap();
    match load_manifest(&path).unwrap_err() {
        DataError::MissingFile { id, .. } => assert_eq!(id, "seg-00001"),
        e => panic!("unexpected {e}"),
    }
    fs::remove_file(dir.path().join("masks/seg-00000.png")).unwrap();
    match load_manifest(&path).unwrap_err() {
        DataError::MissingFile { id, path } => {
            assert_eq!(id, "seg-00000");
            assert!(path.ends_with("masks/seg-00000.png"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn unknown_subtask_and_malformed_records_are_distinct_errors() {
    let (_dir, path) = small_dataset();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"subtask_id\":\"seg\"", "\"subtask_id\":\"nope\"", 1)).unwrap();
    match load_manifest(&path).unwrap_err() {
        DataError::UnknownSubtask { id, subtask } => {
            assert_eq!(id, "seg-00000");
            assert_eq!(subtask, "nope");
        }
        e => panic!("unexpected {e}"),
    }
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"id\": 3";
    fs::write(&path, lines.join("\n")).unwrap();
    match load_manifest(&path).unwrap_err() {
        DataError::Malformed { line, .. } => assert_eq!(line, 3),
        e => panic!("unexpected {e}"),
    }
    fs::write(&path, "").unwrap();
    assert!(matches!(load_manifest(&path), Err(DataError::Malformed { line: 1, .. })));
}

#[test]
fn mask_resize_keeps_the_label_set() {
    let task = TaskSpec::segmentation("seg", 4);
    for s in generate(8, &task, 10, SIZES).unwrap() {
        let Label::Mask(m) = &s.label else { panic!("mask label") };
        let ms = resize_to_model(&s, [64, 64]);
        let ModelLabel::Mask(small) = &ms.label else { panic!("mask label") };
        let mut before: Vec<u8> = m.clone();
        before.sort_unstable();
        before.dedup();
        let mut after = small.clone();
        after.sort_unstable();
        after.dedup();
        assert!(after.iter().all(|v| before.contains(v)));
        assert_eq!(after, before, "{}: small targets vanished", s.id);
    }
}

proptest! {
    #[test]
    fn keypoint_normalization_round_trips(
        h in 48usize..2000,
        w in 48usize..2000,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
    ) {
        let (x, y) = (fx * w as f64, fy * h as f64);
        let sample = mhmtl_core::data::Sample {
            id: "k".into(),
            subtask_id: "reg".into(),
            image: mhmtl_core::data::GrayImage::new(h, w, vec![0; h * w]).unwrap(),
            label: Label::Keypoints(vec![[x, y]]),
        };
        let ms = resize_to_model(&sample, [32, 32]);
        let ModelLabel::Keypoints(k) = &ms.label else { panic!("keypoint label") };
        let back = [k[0][0] * w as f64, k[0][1] * h as f64];
        prop_assert!((back[0] - x).hypot(back[1] - y) < 0.5);
        prop_assert!((0.0..=1.0).contains(&k[0][0]) && (0.0..=1.0).contains(&k[0][1]));
    }
}

#[test]
fn centre_keypoint_normalizes_to_half() {
    let (h, w) = (300, 517);
    let sample = mhmtl_core::data::Sample {
        id: "k".into(),
        subtask_id: "reg".into(),
        image: mhmtl_core::data::GrayImage::new(h, w, vec![0; h * w]).unwrap(),
        label: Label::Keypoints(vec![[w as f64 / 2.0, h as f64 / 2.0]]),
    };
    let ModelLabel::Keypoints(k) = resize_to_model(&sample, [64, 64]).label else { panic!() };
    assert_eq!(k, vec![[0.5, 0.5]]);
}
