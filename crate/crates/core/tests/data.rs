use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use msenet_core::data::{
    make_splits, preprocess, preprocess_file, sample_episode_plan, ClassEntry, DatasetIndex, EpisodeSpec,
    Normalization, IMAGE_SIZE,
};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn preprocessing_matches_golden_bytes() {
    let tensor = preprocess_file(&fixture("golden_input.png"), &Normalization::IMAGENET).unwrap();
    let golden = std::fs::read(fixture("golden_input.f32")).unwrap();
    let ours = tensor.to_le_bytes();
    assert_eq!(ours.len(), golden.len());
    let first_diff = ours.iter().zip(&golden).position(|(a, b)| a != b);
    assert_eq!(first_diff, None, "first differing byte");
}

fn index(classes: usize, items: usize) -> DatasetIndex {
    let entries = (0..classes)
        .map(|c| ClassEntry {
            name: format!("k{c:03}"),
            items: (0..items).map(|i| format!("k{c:03}/{i}.png").into()).collect(),
        })
        .collect();
    DatasetIndex::from_entries("/virtual", entries).unwrap()
}

proptest! {
    #[test]
    fn splits_are_disjoint_and_sized(
        classes in 1usize..60,
        a in 0usize..20, b in 0usize..20, c in 0usize..20,
        seed in any::<u64>(),
    ) {
        let idx = index(classes, 1);
        let result = make_splits(&idx, (a, b, c), seed);
        if a + b + c > classes {
            prop_assert!(result.is_err());
        } else {
            let s = result.unwrap();
            prop_assert_eq!((s.train.len(), s.val.len(), s.test.len()), (a, b, c));
            prop_assert!(s.train.is_disjoint(&s.val));
            prop_assert!(s.train.is_disjoint(&s.test));
            prop_assert!(s.val.is_disjoint(&s.test));
            prop_assert!(s.validate(&idx).is_ok());
            prop_assert_eq!(make_splits(&idx, (a, b, c), seed).unwrap(), s);
        }
    }

    #[test]
    fn episodes_have_exact_counts_and_no_overlap(
        classes in 1usize..12,
        n_way in 1usize..6,
        k in 1usize..5,
        nq in 1usize..6,
        extra in 0usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(n_way <= classes);
        let idx = index(classes, k + nq + extra);
        let split: BTreeSet<String> = idx.class_names().map(String::from).collect();
        let spec = EpisodeSpec::new(n_way, k, nq).unwrap();
        let plan = sample_episode_plan(&idx, &split, &spec, seed).unwrap();
        prop_assert_eq!(plan.class_ids.len(), n_way);
        prop_assert_eq!(plan.class_ids.iter().collect::<HashSet<_>>().len(), n_way);
        for label in 0..n_way {
            prop_assert_eq!(plan.support.iter().filter(|e| e.label == label).count(), k);
            prop_assert_eq!(plan.query.iter().filter(|e| e.label == label).count(), nq);
        }
        let support: HashSet<_> = plan.support.iter().map(|e| e.item).collect();
        prop_assert!(plan.query.iter().all(|e| !support.contains(&e.item)));
        for e in plan.support.iter().chain(&plan.query) {
            prop_assert_eq!(&idx.classes()[e.item.class].name, &plan.class_ids[e.label]);
        }
        prop_assert_eq!(sample_episode_plan(&idx, &split, &spec, seed).unwrap(), plan);
    }

    #[test]
    fn any_image_size_becomes_model_size(w in 1u32..200, h in 1u32..200, v in any::<u8>()) {
        let img = image::DynamicImage::ImageRgb8(image::RgbImage::from_pixel(w, h, image::Rgb([v, v / 2, 255 - v])));
        let t = preprocess(&img, &Normalization::SYNTHETIC);
        prop_assert_eq!(t.shape(), [3, IMAGE_SIZE, IMAGE_SIZE]);
        // a constant image stays constant per channel
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for c in 0..3 {
            let ch = &t.data()[c * plane..(c + 1) * plane];
            prop_assert!(ch.iter().all(|&x| x == ch[0]));
        }
    }
}
