mod common;

use vcr::embeddings::{load_embedding_file, Encoder, FileBackend};
use vcr::geometry::{build_scale_set, decompose, sample_crops, View};
use vcr::eval::{
    build_fewshot_episode, canonical_json, run_ablation, run_domain_generalization, DatasetImage, DatasetManifest,
    DomainTarget, EvalConfig, Mode,
};
use vcr::refine::{refine_image, zero_shot_logits, Criterion, Weighting};

use common::{classifier, export, small_config, world};

fn golden(name: &str, actual: &str) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("VCR_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{} differs from the recorded output", path.display());
}

#[test]
fn crop_list_matches_recorded_reference() {
    let crops = sample_crops(64, 48, 0.5, 100, 42).unwrap();
    let text: String = crops.iter().map(|c| format!("{} {} {} {}\n", c.x, c.y, c.w, c.h)).collect();
    golden("crops_64x48_s0.5_m100_seed42.txt", &text);
}

#[test]
fn episode_matches_recorded_reference() {
    let images = (0..18)
        .map(|i| DatasetImage {
            id: format!("img{i:02}"),
            label: i % 3,
            width: 32,
            height: 32,
        })
        .collect();
    let dataset = DatasetManifest::new(vec!["a".into(), "b".into(), "c".into()], images).unwrap();
    let episode = build_fewshot_episode(&dataset, 2, 1, 9).unwrap();
    assert_eq!(episode, build_fewshot_episode(&dataset, 2, 1, 9).unwrap());
    golden("episode_3x6_k2_v1_seed9.json", std::str::from_utf8(&canonical_json(&episode).unwrap()).unwrap());
}

#[test]
fn synthetic_encoder_is_repeatable() {
    let w = world(&small_config(), 3);
    let views = decompose("s0_00001", 96, 96, &build_scale_set(3).unwrap(), 4, 0).unwrap();
    for sv in &views.per_scale {
        for &c in &sv.crops {
            let a = w.backend.encode("s0_00001", View::Crop(c)).unwrap();
            let b = w.backend.encode("s0_00001", View::Crop(c)).unwrap();
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }
}

#[test]
fn single_scale_ignores_criterion_and_weighting() {
    let w = world(&small_config(), 1);
    let clf = classifier(&w);
    let set = build_scale_set(1).unwrap();
    for img in w.manifest.images.iter().take(10) {
        let global = w.backend.encode(&img.id, View::Global).unwrap();
        for criterion in [Criterion::MaxMargin, Criterion::MinMargin, Criterion::MinEntropy, Criterion::Random] {
            for weighting in [Weighting::ScaleWeighted, Weighting::Uniform, Weighting::GlobalOnly] {
                let r = refine_image(&w.backend, &clf, &img.id, (img.width, img.height), &set, 5, criterion, weighting, 0)
                    .unwrap();
                assert_eq!(r.vector.as_slice(), global.as_slice());
            }
        }
    }
}

#[test]
fn global_only_reproduces_global_feature_for_any_n() {
    let w = world(&small_config(), 2);
    let clf = classifier(&w);
    for n in [2, 5, 10] {
        let set = build_scale_set(n).unwrap();
        for img in w.manifest.images.iter().take(5) {
            let r = refine_image(
                &w.backend,
                &clf,
                &img.id,
                (img.width, img.height),
                &set,
                3,
                Criterion::MaxMargin,
                Weighting::GlobalOnly,
                0,
            )
            .unwrap();
            assert_eq!(r.vector.as_slice(), w.backend.encode(&img.id, View::Global).unwrap().as_slice());
        }
    }
}

#[test]
fn refined_feature_moves_toward_a_well_framed_object() {
    // no distractors, object deep inside the frame: every crop covering it
    // beats the background-diluted global view
    let config = vcr::eval::SynthConfig {
        distractors: 0,
        noise_amp: 0.0,
        object_radius: (0.2, 0.2),
        ..small_config()
    };
    let w = world(&config, 4);
    let clf = classifier(&w);
    let set = build_scale_set(4).unwrap();
    for img in &w.manifest.images {
        let proto = &clf.weights()[img.label];
        let global = w.backend.encode(&img.id, View::Global).unwrap();
        let r = refine_image(
            &w.backend,
            &clf,
            &img.id,
            (img.width, img.height),
            &set,
            20,
            Criterion::MaxMargin,
            Weighting::ScaleWeighted,
            0,
        )
        .unwrap();
        assert!(r.vector.cosine(proto) >= global.cosine(proto) - 1e-9, "{}", img.id);
        let logits = zero_shot_logits(&r.vector, &clf).unwrap();
        assert_eq!(logits.argmax(), img.label);
    }
}

#[test]
fn file_backend_gives_the_same_report_as_the_synthetic_one() {
    let w = world(&small_config(), 5);
    let clf = classifier(&w);
    let config = EvalConfig {
        n: 4,
        m: 6,
        repeats: 3,
        ..EvalConfig::default()
    };
    let files = export(&w.backend, &w.manifest, config.n, config.m, config.seed);
    let file_backend = FileBackend::new(load_embedding_file(&files.embeddings).unwrap());
    let modes = Mode::parse_list("global_baseline,ten_crop,multi_crop_avg,per_scale:0.5,random_per_scale_avg,max_margin,min_entropy,random")
        .unwrap();
    let a = run_ablation(&w.episode, &w.backend, &clf, &modes, &config).unwrap();
    let b = run_ablation(&w.episode, &file_backend, &clf, &modes, &config).unwrap();
    assert_eq!(canonical_json(&a).unwrap(), canonical_json(&b).unwrap());
}

#[test]
fn missing_crop_rows_are_an_error() {
    let w = world(&small_config(), 5);
    let clf = classifier(&w);
    let files = export(&w.backend, &w.manifest, 3, 6, 0);
    let backend = FileBackend::new(load_embedding_file(&files.embeddings).unwrap());
    let config = EvalConfig {
        n: 3,
        m: 7,
        ..EvalConfig::default()
    };
    assert!(run_ablation(&w.episode, &backend, &clf, &[Mode::SelectedScaleWeighted], &config).is_err());
}

fn fewshot_world(seed: u64) -> vcr::eval::SynthWorld {
    let config = vcr::eval::SynthConfig {
        images: 64,
        shots: 4,
        ..small_config()
    };
    world(&config, seed)
}

#[test]
fn target_equal_to_source_gives_the_in_domain_result() {
    let w = fewshot_world(6);
    let clf = classifier(&w);
    let config = EvalConfig {
        n: 3,
        m: 6,
        ..EvalConfig::default()
    };
    let in_domain = run_ablation(&w.episode, &w.backend, &clf, &[Mode::Configured], &config).unwrap();
    let test_images: Vec<DatasetImage> = w
        .manifest
        .images
        .iter()
        .filter(|i| w.episode.test.iter().any(|(id, _)| id == &i.id))
        .cloned()
        .collect();
    let target = DomainTarget {
        name: "same".into(),
        manifest: DatasetManifest::new(w.manifest.classes.clone(), test_images).unwrap(),
        backend: &w.backend,
    };
    let shifted =
        run_domain_generalization(&w.manifest, &w.episode, &w.backend, &[target], &clf, Mode::Configured, &config).unwrap();
    assert_eq!(shifted.len(), 1);
    assert_eq!(shifted[0].results, in_domain[0].results);
    assert_eq!(shifted[0].dataset.as_deref(), Some("same"));
}

#[test]
fn accuracy_degrades_with_target_noise() {
    let w = world(
        &vcr::eval::SynthConfig {
            images: 200,
            shots: 4,
            distractors: 1,
            noise_amp: 0.05,
            ..small_config()
        },
        7,
    );
    let clf = classifier(&w);
    let config = EvalConfig {
        n: 3,
        m: 6,
        ..EvalConfig::default()
    };
    let noisy: Vec<_> = [0.05, 0.5, 2.0].iter().map(|&a| w.backend.with_noise(a).unwrap()).collect();
    let targets: Vec<DomainTarget> = noisy
        .iter()
        .zip(["low", "mid", "high"])
        .map(|(b, name)| DomainTarget {
            name: name.into(),
            manifest: w.manifest.clone(),
            backend: b,
        })
        .collect();
    let reports =
        run_domain_generalization(&w.manifest, &w.episode, &w.backend, &targets, &clf, Mode::Configured, &config).unwrap();
    let acc: Vec<f64> = reports.iter().map(|r| r.results.top1_accuracy).collect();
    assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
}

#[test]
fn permuted_target_classes_are_rejected() {
    let w = fewshot_world(8);
    let clf = classifier(&w);
    let mut classes = w.manifest.classes.clone();
    classes.swap(0, 1);
    let target = DomainTarget {
        name: "permuted".into(),
        manifest: DatasetManifest::new(classes, w.manifest.images.clone()).unwrap(),
        backend: &w.backend,
    };
    let err = run_domain_generalization(
        &w.manifest,
        &w.episode,
        &w.backend,
        &[target],
        &clf,
        Mode::Configured,
        &EvalConfig::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("class_0") || err.to_string().contains('0'), "{err}");
}
