use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ledet::data::{generate_synthetic_scene, SyntheticSceneSpec};
use ledet::detector::{DetectorConfig, DetectorParams};
use ledet::pipeline::protocol::Protocol;
use ledet::pipeline::stages::pretrain_base;
use ledet::pipeline::{AugmentSettings, LabeledImage, Method, StageData, TrainingConfig};

fn data() -> StageData {
    let spec = SyntheticSceneSpec {
        canvas_width: 48,
        canvas_height: 48,
        min_objects: 1,
        max_objects: 2,
        min_size: 8,
        max_size: 16,
        ..SyntheticSceneSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scene = || generate_synthetic_scene(&spec, &mut rng).unwrap();
    let labeled = (0..3)
        .map(|_| {
            let s = scene();
            let (boxes, labels): (Vec<_>, Vec<_>) = s.objects.into_iter().map(|(b, c)| (b, c % 3)).unzip();
            LabeledImage { image: s.image, boxes, labels }
        })
        .collect();
    let unlabeled = (0..3).map(|_| scene().image).collect();
    StageData { labeled, unlabeled }
}

fn config(iterations: usize) -> TrainingConfig {
    let mut c = Protocol::desk().pretrain;
    c.augment = AugmentSettings::desk(48);
    c.method = Method::SoftErTeacher;
    c.batch_labeled = 1;
    c.batch_unlabeled = 1;
    c.burn_in = 0;
    c.schedule.iterations = iterations;
    c.schedule.milestones = vec![];
    c.schedule.warmup_iters = 0;
    c
}

fn init() -> DetectorParams {
    DetectorParams::init(&DetectorConfig::tiny(), 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn ten_steps_are_bitwise_reproducible() {
    let d = data();
    let a = pretrain_base(init(), &d, &config(10)).unwrap();
    let b = pretrain_base(init(), &d, &config(10)).unwrap();
    assert_eq!(a.log.len(), 10);
    let rows = |o: &ledet::pipeline::StageOutput| o.log.iter().map(|l| l.csv_row()).collect::<Vec<_>>();
    assert_eq!(rows(&a), rows(&b));
    assert!(a.student == b.student && a.teacher == b.teacher);

    let mut other = config(10);
    other.seed += 1;
    let c = pretrain_base(init(), &d, &other).unwrap();
    assert_ne!(rows(&a), rows(&c));
}

#[test]
fn zero_iterations_leave_the_weights_alone() {
    let out = pretrain_base(init(), &data(), &config(0)).unwrap();
    assert!(out.log.is_empty());
    assert!(out.student == init() && out.teacher == init());
}

#[test]
fn training_separates_student_and_teacher() {
    let out = pretrain_base(init(), &data(), &config(3)).unwrap();
    assert!(out.student != init());
    assert!(out.teacher != init());
    assert!(out.teacher != out.student);
    assert!(out.log.iter().all(|l| l.total.is_finite()));
}
