//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so the
//! lines reach the terminal; exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_SKIP_TOY=1` skips the multi-seed benchmark (about 45 minutes
//! on one core).

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ledet::augment::{augment, AugmentationRecipe, Branch};
use ledet::data::{generate_synthetic_scene, ShapeKind, SyntheticSceneSpec};
use ledet::detector::{DetectorConfig, DetectorParams, GroupMask, ImagePass, ParamGroup};
use ledet::entreg::{entropy_similarity_loss, iou_consistency_loss, pair_proposals, OverlapMeasure, ProposalPair, SimilarityMeasure};
use ledet::eval::{average_precision, class_mean, coco_thresholds, forgetting_pct, proposal_recall_at, Detection, EvalReport, EvalInputs, GroundTruth, Proposal};
use ledet::geometry::{apply_affine, AffineTransform, BBox, ScoredBox};
use ledet::image::Image;
use ledet::pipeline::protocol::{run_seed, Protocol};
use ledet::pipeline::stages::{finetune_balanced, init_few_shot_from_teacher, pretrain_base, shot_images, train_novel_head, unlabeled_images, labeled_images};
use ledet::pipeline::trainer::{plan_supervised, plan_unlabeled, supervised_plan_loss, unlabeled_image_loss, unlabeled_plan_loss};
use ledet::pipeline::{LabeledImage, Method, NovelInit, Stage, StageData, Trainer, TrainingConfig, UnlabeledScales};
use ledet::pipeline::protocol::ProtocolData;
use ledet::semisup::{ema_update, select_confident, EmaState};

type Check = Result<String, String>;

// ---------------------------------------------------------------- oracles

fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn entropy_oracle(z_s: &[Vec<f64>], z_t: &[Vec<f64>], w: &[bool], kl: bool) -> f64 {
    let active = w.iter().filter(|x| **x).count();
    if active == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..z_s.len() {
        if !w[i] {
            continue;
        }
        let (p, q) = (softmax_oracle(&z_s[i]), softmax_oracle(&z_t[i]));
        let c = p.len() as f64;
        let mut h = 0.0;
        for k in 0..p.len() {
            h -= q[k] * p[k].ln();
            if kl {
                h += q[k] * q[k].ln();
            }
        }
        sum += h / c;
    }
    sum / active as f64
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn overlap_oracle(a: &BBox, b: &BBox, generalized: bool) -> f64 {
    let (a, b) = ([a.x1, a.y1, a.x2, a.y2], [b.x1, b.y1, b.x2, b.y2]);
    let inter = area([a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if !generalized {
        return iou;
    }
    let hull = area([a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Axis-aligned hull of the four mapped corners.
fn map_box_oracle(m: &AffineTransform, b: &BBox) -> BBox {
    let pts = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| m.apply_point(x, y));
    let xs = pts.map(|p| p.0);
    let ys = pts.map(|p| p.1);
    let min = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    BBox::new(min(xs), min(ys), max(xs), max(ys))
}

fn iou_loss_oracle(pairs: &[ProposalPair], r_s: &[BBox], r_t: &[BBox], w: &[bool], generalized: bool) -> f64 {
    if !w.iter().any(|x| *x) {
        return 0.0;
    }
    let sum: f64 = (0..pairs.len())
        .filter(|&i| w[i])
        .map(|i| overlap_oracle(&r_s[i], &map_box_oracle(&pairs[i].m, &r_t[i]), generalized))
        .sum();
    1.0 - sum / pairs.len() as f64
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x = rng.random_range(0.0..extent * 0.7);
    let y = rng.random_range(0.0..extent * 0.7);
    BBox::new(x, y, x + rng.random_range(2.0..extent * 0.3), y + rng.random_range(2.0..extent * 0.3))
}

fn random_rigid(rng: &mut ChaCha8Rng) -> AffineTransform {
    let s = rng.random_range(0.5..2.0);
    let mut m = AffineTransform::translation(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)).compose(&AffineTransform::scale(s, s));
    if rng.random_bool(0.5) {
        m = AffineTransform::hflip(64.0).compose(&m);
    }
    m
}

fn check_loss_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let n_instances = 200;
    for _ in 0..n_instances {
        let c = rng.random_range(2..=5);
        let n = rng.random_range(1..=8);
        let logits = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..n).map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect()).collect() };
        let z_s = logits(&mut rng);
        let z_t = logits(&mut rng);
        let w: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        for (measure, kl) in [(SimilarityMeasure::CrossEntropy, false), (SimilarityMeasure::Kl, true)] {
            let (l, _) = entropy_similarity_loss(&z_s, &z_t, &w, measure);
            worst = worst.max((l - entropy_oracle(&z_s, &z_t, &w, kl)).abs());
        }
        let pairs: Vec<ProposalPair> = (0..n)
            .map(|_| {
                let p = random_box(&mut rng, 64.0);
                let m = random_rigid(&mut rng);
                ProposalPair { p_s: apply_affine(&m, &p), p_t: p, m }
            })
            .collect();
        let r_s: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 64.0)).collect();
        let r_t: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 64.0)).collect();
        for (overlap, g) in [(OverlapMeasure::Iou, false), (OverlapMeasure::Giou, true)] {
            let (l, _) = iou_consistency_loss(&pairs, &r_s, &r_t, &w, overlap);
            worst = worst.max((l - iou_loss_oracle(&pairs, &r_s, &r_t, &w, g)).abs());
        }
    }
    // documented values
    let (h, _) = entropy_similarity_loss(&[vec![0.0, 0.0]], &[vec![0.0, 0.0]], &[true], SimilarityMeasure::CrossEntropy);
    let ln2_half = std::f64::consts::LN_2 / 2.0;
    let z = vec![0.9f64.ln(), 0.1f64.ln()];
    let (h2, _) = entropy_similarity_loss(&[z.clone()], &[z], &[true], SimilarityMeasure::CrossEntropy);
    let h2_hand = -0.5 * (0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    let b = BBox::new(0.0, 0.0, 10.0, 10.0);
    let half = BBox::new(0.0, 0.0, 10.0, 5.0);
    let id = AffineTransform::identity();
    let pairs = [ProposalPair { p_s: b, p_t: b, m: id }, ProposalPair { p_s: b, p_t: b, m: id }];
    let (l25, _) = iou_consistency_loss(&pairs, &[b, b], &[b, half], &[true, true], OverlapMeasure::Iou);
    let (l50, _) = iou_consistency_loss(&pairs, &[b, b], &[b, half], &[true, false], OverlapMeasure::Iou);
    let documented = [(h, ln2_half), (h2, h2_hand), (l25, 0.25), (l50, 0.5)];
    let doc_err = documented.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let detail = format!(
        "{n_instances} random instances x 4 measures, max |err| {worst:.1e}; ln2/2 = {h:.4}, 0.25 and 0.5 cases err {doc_err:.1e}"
    );
    if worst <= 1e-9 && doc_err <= 1e-9 && (ln2_half - 0.3466).abs() < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------- gradient checks

const FD_EPS: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-4;
/// Absolute differences below this are under the finite-difference resolution.
const FD_ABS_FLOOR: f64 = 1e-8;

struct GradStats {
    checked: usize,
    failures: usize,
    worst_rel: f64,
    worst_abs: f64,
    max_grad: f64,
}

fn grad_check(params: &DetectorParams, analytic: &DetectorParams, f: impl Fn(&DetectorParams) -> f64) -> GradStats {
    let mut stats = GradStats { checked: 0, failures: 0, worst_rel: 0.0, worst_abs: 0.0, max_grad: 0.0 };
    for g in ParamGroup::ALL {
        for name in params.names_in(g) {
            for i in 0..params.get(name).len() {
                let mut p = params.clone();
                p.get_mut(name)[i] += FD_EPS;
                let up = f(&p);
                p.get_mut(name)[i] -= 2.0 * FD_EPS;
                let down = f(&p);
                let num = (up - down) / (2.0 * FD_EPS);
                let a = analytic.get(name)[i];
                let err = (a - num).abs();
                let scale = a.abs().max(num.abs());
                stats.checked += 1;
                stats.max_grad = stats.max_grad.max(a.abs());
                stats.worst_abs = stats.worst_abs.max(err);
                if scale > 1e-4 {
                    stats.worst_rel = stats.worst_rel.max(err / scale);
                }
                if err > FD_ABS_FLOOR && err > FD_REL_TOL * scale {
                    stats.failures += 1;
                }
            }
        }
    }
    stats
}

fn tiny_scene(seed: u64, canvas: usize) -> (Image, Vec<BBox>, Vec<usize>) {
    let spec = SyntheticSceneSpec {
        canvas_width: canvas,
        canvas_height: canvas,
        shapes: ShapeKind::ALL[..2].to_vec(),
        min_objects: 1,
        max_objects: 2,
        min_size: 8,
        max_size: 14,
        seed,
        ..SyntheticSceneSpec::default()
    };
    let scene = generate_synthetic_scene(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let (boxes, labels) = scene.objects.into_iter().unzip();
    (scene.image, boxes, labels)
}

fn tiny_config(canvas: u32) -> TrainingConfig {
    let mut c = Protocol::desk().pretrain;
    c.augment = ledet::pipeline::AugmentSettings::desk(canvas);
    c.batch_labeled = 1;
    c.batch_unlabeled = 1;
    c.burn_in = 0;
    c.method = Method::SoftErTeacher;
    // every teacher detection becomes a regressing pseudo label
    c.semisup.tau_cls = 0.0;
    c.semisup.tau_var = 1.0;
    c.entreg.top_n = 32;
    c
}

fn check_gradients() -> Check {
    let start = Instant::now();
    let all = GroupMask::all();
    let student = DetectorParams::init(&DetectorConfig::tiny(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let teacher = DetectorParams::init(&DetectorConfig::tiny(), 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (image, boxes, labels) = tiny_scene(5, 40);
    let config = tiny_config(40);
    let mut report = Vec::new();
    let mut ok = student.num_parameters() <= 1000;

    // supervised
    let pass = ImagePass::forward(&student, &image);
    let plan = plan_supervised(&student, &pass, &boxes, &labels, all, &mut ChaCha8Rng::seed_from_u64(3));
    let mut g = student.zeros_like();
    supervised_plan_loss(&student, &pass, &plan, all, 1.0, Some(&mut g));
    let s = grad_check(&student, &g, |p| supervised_plan_loss(p, &ImagePass::forward(p, &image), &plan, all, 1.0, None));
    ok &= s.failures == 0 && plan.targets.iter().any(|t| t.deltas.is_some());
    report.push(("L_sup", s));

    // unlabeled terms, one at a time
    let (uplan, spass) = plan_unlabeled(
        &student,
        &teacher,
        &image,
        &config,
        all,
        &mut ChaCha8Rng::seed_from_u64(4),
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    ok &= !uplan.pseudo.is_empty() && uplan.pair_weights.iter().any(|w| *w) && uplan.targets.iter().any(|t| t.deltas.is_some());
    let terms: [(&str, UnlabeledScales, fn(&ledet::pipeline::trainer::UnlabeledLosses) -> f64); 3] = [
        ("L_soft", UnlabeledScales { soft: 1.0, ent: 0.0, iou: 0.0 }, |l| l.cls_soft + l.reg_soft),
        ("L_ent", UnlabeledScales { soft: 0.0, ent: 1.0, iou: 0.0 }, |l| l.ent),
        ("L_iou", UnlabeledScales { soft: 0.0, ent: 0.0, iou: 1.0 }, |l| l.iou),
    ];
    for (name, scales, pick) in terms {
        let mut g = student.zeros_like();
        unlabeled_plan_loss(&student, &spass, &uplan, &config, all, scales, Some(&mut g));
        let s = grad_check(&student, &g, |p| pick(&unlabeled_plan_loss(p, &ImagePass::forward(p, &uplan.strong), &uplan, &config, all, scales, None)));
        ok &= s.failures == 0;
        report.push((name, s));
    }

    // the teacher only moves by EMA
    let teacher_before = teacher.clone();
    let mut g = student.zeros_like();
    unlabeled_image_loss(&student, &teacher, &image, &config, all, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6), &mut ChaCha8Rng::seed_from_u64(7), &mut g).unwrap();
    let untouched = teacher == teacher_before;
    let data = StageData {
        labeled: vec![LabeledImage { image: image.clone(), boxes, labels }],
        unlabeled: vec![image.clone()],
    };
    let mut trainer = Trainer::new(student.clone(), teacher.clone(), &data, config.clone()).unwrap();
    trainer.step().unwrap();
    let m = config.semisup.ema_momentum;
    let ema_only = ParamGroup::ALL.iter().all(|&grp| {
        trainer.student.names_in(grp).iter().all(|name| {
            let (t0, s1, t1) = (teacher.get(name), trainer.student.get(name), trainer.teacher().get(name));
            (0..t0.len()).all(|i| (m * t0[i] + (1.0 - m) * s1[i]).to_bits() == t1[i].to_bits())
        })
    });
    ok &= untouched && ema_only;

    let parts: Vec<String> = report
        .iter()
        .map(|(n, s)| format!(
            "{n} {}/{} ok (max |g| {:.1e}, worst abs {:.1e}, worst rel {:.1e})",
            s.checked - s.failures,
            s.checked,
            s.max_grad,
            s.worst_abs,
            s.worst_rel
        ))
        .collect();
    let detail = format!(
        "{} params; {}; teacher untouched {untouched}, teacher = EMA(student) bitwise {ema_only}; {:.1}s",
        student.num_parameters(),
        parts.join("; "),
        start.elapsed().as_secs_f64()
    );
    ok &= start.elapsed().as_secs() < 60;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----------------------------------------------------------- reduction chain

fn small_data(n_labeled: usize, n_unlabeled: usize) -> StageData {
    let labeled = (0..n_labeled)
        .map(|i| {
            let (image, boxes, labels) = tiny_scene(100 + i as u64, 48);
            LabeledImage { image, boxes, labels }
        })
        .collect();
    let unlabeled = (0..n_unlabeled).map(|i| tiny_scene(200 + i as u64, 48).0).collect();
    StageData { labeled, unlabeled }
}

fn totals(config: &TrainingConfig, data: &StageData) -> Vec<f64> {
    let init = DetectorParams::init(&DetectorConfig::default(), 3, &mut ChaCha8Rng::seed_from_u64(config.seed)).unwrap();
    let mut t = Trainer::new(init.clone(), init, data, config.clone()).unwrap();
    t.run().unwrap();
    t.log.iter().map(|l| l.total).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_reduction_chain() -> Check {
    let data = small_data(4, 4);
    let mut base = tiny_config(48);
    base.semisup = Protocol::desk().pretrain.semisup;
    base.batch_unlabeled = 2;
    base.schedule.iterations = 50;
    base.schedule.milestones = vec![40];
    base.schedule.warmup_iters = 5;
    base.seed = 9;

    let softer_beta0 = TrainingConfig {
        entreg: ledet::entreg::EntRegConfig { beta_multiplier: 0.0, ..base.entreg.clone() },
        ..base.clone()
    };
    let soft_teacher = TrainingConfig { method: Method::SoftTeacher, ..base.clone() };
    let a = totals(&softer_beta0, &data);
    let b = totals(&soft_teacher, &data);
    let beta_gap = max_diff(&a, &b);

    let bu0 = TrainingConfig { batch_unlabeled: 0, ..base.clone() };
    let supervised = TrainingConfig { method: Method::Supervised, ..base.clone() };
    let c = totals(&bu0, &data);
    let d = totals(&supervised, &data);
    let bu_gap = max_diff(&c, &d);
    // the unlabeled branch must actually contribute for the first link to mean anything
    let differs = max_diff(&a, &c) > 1e-6;
    let detail = format!("50 steps: |beta=0 - soft teacher| {beta_gap:.1e}, |b_u=0 - supervised| {bu_gap:.1e}, unlabeled terms active {differs}");
    if beta_gap <= 1e-7 && bu_gap <= 1e-7 && differs {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----------------------------------------------------------- freeze integrity

fn check_freeze_integrity() -> Check {
    let mut p = Protocol::desk();
    p.n_train = 60;
    p.n_test = 4;
    p.k_shot = 2;
    let data = ProtocolData::build(&p, 4).unwrap();
    let base_order = p.base_classes.clone();
    let order = p.class_order();
    let mut pre = p.pretrain.clone();
    pre.schedule.iterations = 4;
    pre.schedule.milestones = vec![];
    pre.burn_in = 0;
    let init = DetectorParams::init(&p.detector, base_order.len() + 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let pre_data = StageData {
        labeled: labeled_images(&data.train, &data.labeled_ids, &base_order),
        unlabeled: unlabeled_images(&data.train, &data.unlabeled_ids),
    };
    let base = pretrain_base(init, &pre_data, &pre).unwrap();
    let ck = base.checkpoint(Stage::BasePretrain.name(), base_order, String::new());
    let fs = init_few_shot_from_teacher(&ck, &order, NovelInit::default()).unwrap();

    let novel: BTreeSet<u64> = p.novel_classes.iter().copied().collect();
    let all: BTreeSet<u64> = p.base_classes.iter().chain(&p.novel_classes).copied().collect();
    let ids = data.train.index.image_ids();
    let nh_data = StageData {
        labeled: shot_images(&data.train, &data.split, &novel, &order).unwrap(),
        unlabeled: unlabeled_images(&data.train, &ids[..8]),
    };
    let mut nh_cfg = p.novel_head.clone();
    nh_cfg.schedule.iterations = 4;
    nh_cfg.schedule.milestones = vec![];
    let nh = train_novel_head(fs.clone(), &nh_data, &nh_cfg).unwrap();

    let ft_data = StageData {
        labeled: shot_images(&data.train, &data.split, &all, &order).unwrap(),
        unlabeled: nh_data.unlabeled.clone(),
    };
    // semi-supervised on purpose: the unlabeled branch must respect the policy too
    let mut ft_cfg = p.finetune.clone();
    ft_cfg.method = Method::SoftErTeacher;
    ft_cfg.batch_unlabeled = 1;
    ft_cfg.schedule.iterations = 4;
    ft_cfg.schedule.milestones = vec![];
    let ft = finetune_balanced(nh.teacher.clone(), &ft_data, &data.split, &ft_cfg).unwrap();

    use ParamGroup::*;
    let same = |a: &DetectorParams, b: &DetectorParams, groups: &[ParamGroup]| groups.iter().all(|&g| a.group_bitwise_eq(b, g));
    let nh_frozen = same(&fs, &nh.student, &[Backbone, Neck, Rpn]) && same(&fs, &nh.teacher, &[Backbone, Neck, Rpn]);
    let nh_moved = !same(&fs, &nh.student, &[RoiClassifier]);
    let frozen = [Backbone, Neck, Rpn, RoiRegressor];
    let ft_frozen = same(&nh.teacher, &ft.student, &frozen) && same(&nh.teacher, &ft.teacher, &frozen);
    let ft_moved = !same(&nh.teacher, &ft.student, &[RoiClassifier]);
    let detail = format!(
        "novel head: backbone/neck/rpn bitwise {nh_frozen}, head moved {nh_moved}; balanced: all but roi_classifier bitwise {ft_frozen}, classifier moved {ft_moved}"
    );
    if nh_frozen && nh_moved && ft_frozen && ft_moved {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// -------------------------------------------------------------------- EMA

fn check_ema_closed_form() -> Check {
    let cfg = DetectorConfig::tiny();
    let s = DetectorParams::init(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let t0 = DetectorParams::init(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    let mut state = EmaState::new(t0.clone(), 0.999);
    for _ in 0..10 {
        ema_update(&mut state, &s).unwrap();
    }
    let decay = 0.999f64.powi(10);
    let mut worst = 0.0f64;
    for g in ParamGroup::ALL {
        for name in s.names_in(g) {
            for ((&si, &ti), &tn) in s.get(name).iter().zip(t0.get(name)).zip(state.teacher.get(name)) {
                worst = worst.max((tn - (si + (ti - si) * decay)).abs());
            }
        }
    }
    let detail = format!("n = 10, m = 0.999 over {} params, max |err| {worst:.1e}", s.num_parameters());
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- metrics

fn det(image_id: u64, b: BBox, score: f64, category_id: u64) -> Detection {
    Detection { image_id, bbox: b, score, category_id }
}

fn gt(image_id: u64, b: BBox, category_id: u64) -> GroundTruth {
    GroundTruth { image_id, bbox: b, category_id }
}

fn as_proposals(dets: &[Detection]) -> Vec<Proposal> {
    dets.iter().map(|d| Proposal { image_id: d.image_id, bbox: d.bbox, score: d.score }).collect()
}

/// Global score order, greedy highest-IoU matching, and interpolation by an
/// explicit max over every operating point with recall >= r.
fn brute_force_ap(dets: &[Detection], gts: &[GroundTruth], class: u64) -> Option<f64> {
    let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.category_id == class).collect();
    if g.is_empty() {
        return None;
    }
    let mut d: Vec<&Detection> = dets.iter().filter(|x| x.category_id == class).collect();
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    let thresholds = coco_thresholds();
    let mut total = 0.0;
    for &t in &thresholds {
        let mut taken = vec![false; g.len()];
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0.0, 0.0);
        for x in &d {
            let mut best: Option<(f64, usize)> = None;
            for (j, y) in g.iter().enumerate() {
                if taken[j] || y.image_id != x.image_id {
                    continue;
                }
                let o = overlap_oracle(&x.bbox, &y.bbox, false);
                if o >= t && best.map_or(true, |(bo, _)| o > bo) {
                    best = Some((o, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[j] = true;
                    tp += 1.0;
                }
                None => fp += 1.0,
            }
            points.push((tp / g.len() as f64, tp / (tp + fp)));
        }
        let ap: f64 = (0..=100)
            .map(|k| {
                let r = k as f64 / 100.0;
                points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0;
        total += ap;
    }
    Some(total / thresholds.len() as f64)
}

fn check_metric_oracle() -> Check {
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2);
    let g1 = b(0.0, 0.0, 10.0, 10.0);
    let g2 = b(20.0, 20.0, 30.0, 30.0);
    let far = b(50.0, 50.0, 60.0, 60.0);
    let t = coco_thresholds();
    // (name, dets, gts, expected class-mean AP, [(p, expected AR@p)])
    let fixtures: Vec<(&str, Vec<Detection>, Vec<GroundTruth>, f64, Vec<(usize, f64)>)> = vec![
        ("exact hit", vec![det(1, g1, 0.9, 1)], vec![gt(1, g1, 1)], 1.0, vec![(1, 1.0)]),
        ("iou 0.6", vec![det(1, b(0.0, 0.0, 10.0, 6.0), 0.9, 1)], vec![gt(1, g1, 1)], 0.3, vec![(1, 0.3)]),
        (
            "fp ranked first",
            vec![det(1, far, 0.9, 1), det(1, g1, 0.8, 1), det(1, g2, 0.7, 1)],
            vec![gt(1, g1, 1), gt(1, g2, 1)],
            2.0 / 3.0,
            vec![(1, 0.0), (2, 0.5), (3, 1.0)],
        ),
        (
            "two images",
            vec![det(1, g1, 0.9, 1), det(2, far, 0.95, 1)],
            vec![gt(1, g1, 1), gt(2, g1, 1)],
            51.0 * 0.5 / 101.0,
            vec![(1, 0.5)],
        ),
        (
            "duplicate and missed class",
            vec![det(1, g1, 0.9, 1), det(1, g1, 0.8, 1)],
            vec![gt(1, g1, 1), gt(1, g2, 2)],
            0.5,
            vec![(1, 0.5), (2, 0.5)],
        ),
    ];
    let mut worst = 0.0f64;
    for (_, dets, gts, ap, ars) in &fixtures {
        let per_class = average_precision(dets, gts, &t);
        let classes: BTreeSet<u64> = gts.iter().map(|g| g.category_id).collect();
        worst = worst.max((class_mean(&per_class, classes).unwrap() - ap).abs());
        for &(p, ar) in ars {
            worst = worst.max((proposal_recall_at(&as_proposals(dets), gts, p).unwrap() - ar).abs());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut brute_worst = 0.0f64;
    let n_random = 300;
    for _ in 0..n_random {
        let n_images = rng.random_range(1..=5u64);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for img in 1..=n_images {
            for class in 1..=3u64 {
                for _ in 0..rng.random_range(0..=3) {
                    let g = random_box(&mut rng, 64.0);
                    gts.push(gt(img, g, class));
                    if rng.random_bool(0.8) {
                        let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.9..0.9);
                        let d = b(g.x1 + j(&mut rng), g.y1 + j(&mut rng), g.x2 + j(&mut rng), g.y2 + j(&mut rng));
                        dets.push(det(img, d, rng.random(), class));
                    }
                }
                for _ in 0..rng.random_range(0..=2) {
                    dets.push(det(img, random_box(&mut rng, 64.0), rng.random(), class));
                }
            }
        }
        let per_class = average_precision(&dets, &gts, &t);
        for class in 1..=3u64 {
            match (per_class.get(&class), brute_force_ap(&dets, &gts, class)) {
                (Some(a), Some(o)) => brute_worst = brute_worst.max((a - o).abs()),
                (None, None) => {}
                _ => brute_worst = f64::INFINITY,
            }
        }
    }
    let detail = format!("5 hand fixtures (AP and AR@p) max |err| {worst:.1e}; {n_random} random <=5-image fixtures vs brute force max |err| {brute_worst:.1e}");
    if worst <= 1e-6 && brute_worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ pseudo labels

fn check_pseudo_label_threshold() -> Check {
    let b = BBox::new(0.0, 0.0, 5.0, 5.0);
    let kept = select_confident(&[ScoredBox::new(b, 0.95, 0), ScoredBox::new(b, 0.85, 1)], 0.9);
    let examples = kept.len() == 1 && kept[0].score == 0.95;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dets: Vec<ScoredBox> = (0..500).map(|i| ScoredBox::new(b, rng.random(), i % 3)).collect();
    let counts: Vec<usize> = (0..=100).map(|k| select_confident(&dets, k as f64 / 100.0).len()).collect();
    let monotone = counts.windows(2).all(|w| w[1] <= w[0]);
    let detail = format!("0.95 kept / 0.85 dropped at 0.9: {examples}; count non-increasing over 101 thresholds: {monotone}");
    if examples && monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- round trips

fn check_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut rigid_strong = AugmentationRecipe::strong((32, 96));
    rigid_strong.geometric_op_probs = [1.0, 0.0, 0.0];
    let weak = AugmentationRecipe::for_branch(Branch::Weak, (32, 96));
    let (mut n, mut worst) = (0usize, 0.0f64);
    while n < 1000 {
        let (w, h) = (rng.random_range(32..80), rng.random_range(32..80));
        let image = Image::filled(w, h, [0.3, 0.4, 0.5]);
        let s = augment(&image, &rigid_strong, &mut rng).unwrap();
        let t = augment(&image, &weak, &mut rng).unwrap();
        let p = random_box(&mut rng, w.min(h) as f64);
        for pair in pair_proposals(&[p], &s, &t, 0.0).unwrap() {
            let o = overlap_oracle(&apply_affine(&pair.m, &pair.p_t), &pair.p_s, false);
            worst = worst.max(1.0 - o);
            n += 1;
        }
    }
    let detail = format!("{n} random resize/flip/translate pairs, min IoU {:.9}", 1.0 - worst);
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- toy ordering

fn check_toy_ordering() -> Check {
    let start = Instant::now();
    let protocol = Protocol::desk();
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let outcomes = run_seed(&protocol, seed, &Method::ALL).map_err(|e| e.to_string())?;
        let get = |m: Method| outcomes.iter().find(|o| o.method == m).unwrap();
        let (sup, st, ser) = (get(Method::Supervised), get(Method::SoftTeacher), get(Method::SoftErTeacher));
        let ar = |o: &ledet::pipeline::protocol::MethodOutcome| o.pretrain.base_proposal_recall.ar_300.unwrap_or(0.0);
        let nap = |o: &ledet::pipeline::protocol::MethodOutcome| o.finetuned.novel_ap.unwrap_or(0.0);
        println!(
            "      seed {seed}: base AR@300 sup {:.4} st {:.4} softer {:.4} | novel AP sup {:.4} st {:.4} softer {:.4} | {:.0}s",
            ar(sup),
            ar(st),
            ar(ser),
            nap(sup),
            nap(st),
            nap(ser),
            start.elapsed().as_secs_f64()
        );
        rows.push((ar(sup), ar(ser), nap(sup), nap(st), nap(ser)));
    }
    let ar_wins = rows.iter().filter(|r| r.1 > r.0).count();
    let mean = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (m_sup, m_st, m_ser) = (mean(|r| r.2), mean(|r| r.3), mean(|r| r.4));
    let ap_wins = rows.iter().filter(|r| r.4 > r.2).count();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "(a) softer base AR@300 > supervised in {ar_wins}/5 seeds; (b) mean novel AP sup {m_sup:.4} st {m_st:.4} softer {m_ser:.4}, softer > sup in {ap_wins}/5; {minutes:.1} min"
    );
    if ar_wins >= 4 && m_sup <= m_st && m_st <= m_ser && ap_wins >= 4 && minutes <= 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- forgetting

fn check_forgetting() -> Check {
    let f = forgetting_pct(44.4, 41.4);
    let rounded = format!("{f:.1}");
    // the report applies the same arithmetic: base AP 0.3 after pre-training at 0.444
    let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
    let inputs = EvalInputs {
        detections: vec![det(1, BBox::new(0.0, 0.0, 10.0, 6.0), 0.9, 1)],
        ground_truth: vec![gt(1, g1, 1)],
        proposals: Vec::new(),
    };
    let base: BTreeSet<u64> = [1].into();
    let r = EvalReport::from_inputs(&inputs, &base, &BTreeSet::new(), Some(0.444));
    let wired = r.forgetting_pct.map(|v| (v - forgetting_pct(0.444, 0.3)).abs() < 1e-12).unwrap_or(false);
    let detail = format!("(44.4 - 41.4) / 44.4 = {f:.4}% -> {rounded}%; report field consistent {wired}");
    if rounded == "6.8" && wired {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let skip_toy = std::env::var("ACCEPTANCE_SKIP_TOY").is_ok_and(|v| v == "1");
    let checks: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("loss oracles", Box::new(check_loss_oracles)),
        ("gradient checks", Box::new(check_gradients)),
        ("reduction chain", Box::new(check_reduction_chain)),
        ("freeze integrity", Box::new(check_freeze_integrity)),
        ("EMA closed form", Box::new(check_ema_closed_form)),
        ("metric oracle", Box::new(check_metric_oracle)),
        ("pseudo-label threshold", Box::new(check_pseudo_label_threshold)),
        ("transform round-trips", Box::new(check_round_trips)),
        ("toy-scale ordering", Box::new(check_toy_ordering)),
        ("forgetting arithmetic", Box::new(check_forgetting)),
    ];
    let mut failed = 0;
    println!("acceptance criteria");
    for (name, check) in checks {
        if name == "toy-scale ordering" && skip_toy {
            println!("SKIP  {name}: ACCEPTANCE_SKIP_TOY=1");
            continue;
        }
        match check() {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
