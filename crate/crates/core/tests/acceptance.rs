//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every expected value comes from a closed form or
//! an independent computation in this file.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use lens_core::colorcorrect::{build_similarity_field, correct_image, ColorBins, SimilarityField};
use lens_core::datasetgen::{generate_split, read_manifest, Provenance, SplitConfig, MANIFEST_FILE};
use lens_core::exams::{run_color_exam, run_patch_map, run_readiness, run_shape_exam, ExamSettings, PatchMapSpec, ShapeSweep};
use lens_core::field::{SensitivityField, WheelGrid};
use lens_core::metrics::{half_score_point, sac, sas, ScanDirection};
use lens_core::modelclient::{Annotation, FnScorer, MockOracle, MockOracleSpec, PixelMeanEmbedder};
use lens_core::questionbank::{Category, Format, QuestionBank};
use lens_core::runner::RunOptions;
use lens_core::stimuli::geometry::ink_extents;
use lens_core::stimuli::{apply_patch_op, crop, patch_rect, render_shape, PatchOpKind, ShapeCanvas, ShapeSpec};
use lens_core::{ColorSpec, Parallelism};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn all(parts: Vec<Outcome>) -> Outcome {
    let ok = parts.iter().all(|p| p.ok);
    let detail = parts
        .iter()
        .map(|p| if p.ok { p.detail.clone() } else { format!("[x] {}", p.detail) })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { ok, detail }
}

fn unit_field(grid: WheelGrid, f: impl Fn(f64, f64) -> f64) -> SensitivityField {
    let values = (0..grid.len()).map(|i| {
        let (r, phi) = grid.cell(i);
        f(r, phi)
    });
    SensitivityField::wheel(grid, ColorSpec::RED, values.collect()).unwrap()
}

fn sac_oracle() -> Outcome {
    let grid = WheelGrid::default();
    let one = sac(&unit_field(grid, |_, _| 1.0)).unwrap().value;
    let lin = sac(&unit_field(grid, |r, _| r)).unwrap().value;
    let zero = sac(&unit_field(grid, |_, _| 0.0)).unwrap().value;
    all(vec![
        check((one - PI).abs() <= 1e-9, format!("f=1 -> {one:.12}")),
        check((lin - 2.0 * PI / 3.0).abs() <= 1e-4, format!("f=r -> {lin:.8} (2pi/3 = {:.8})", 2.0 * PI / 3.0)),
        check(zero == 0.0, format!("f=0 -> {zero}")),
    ])
}

fn sweep_field(sweep: ShapeSweep, values: Vec<f64>) -> SensitivityField {
    SensitivityField::sweep(sweep.domain(), &sweep.points(), values).unwrap()
}

fn sas_oracle() -> Outcome {
    let mut parts = Vec::new();
    for (sweep, expected) in [(ShapeSweep::Eccentricity, 0.9), (ShapeSweep::Polygon, 28.0), (ShapeSweep::Size, 200.0)] {
        let n = sweep.points().len();
        let got = sas(&sweep_field(sweep, vec![1.0; n])).unwrap().value;
        parts.push(check(got == expected, format!("{sweep:?} f=1 -> {got}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = WheelGrid { radial: 20, angular: 50, value: 1.0 };
    let mut violations = 0;
    for pair in 0..100 {
        let sweep = ShapeSweep::ALL[pair % 3];
        let n = sweep.points().len();
        let f: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let g: Vec<f64> = f.iter().map(|&v| v + (1.0 - v) * rng.gen::<f64>()).collect();
        if sas(&sweep_field(sweep, f)).unwrap().value > sas(&sweep_field(sweep, g)).unwrap().value {
            violations += 1;
        }
        let f: Vec<f64> = (0..grid.len()).map(|_| rng.gen::<f64>()).collect();
        let g: Vec<f64> = f.iter().map(|&v| v + (1.0 - v) * rng.gen::<f64>()).collect();
        let (a, b) = (
            SensitivityField::wheel(grid, ColorSpec::GREEN, f).unwrap(),
            SensitivityField::wheel(grid, ColorSpec::GREEN, g).unwrap(),
        );
        if sac(&a).unwrap().value > sac(&b).unwrap().value {
            violations += 1;
        }
    }
    parts.push(check(violations == 0, format!("monotonicity violations {violations}/200")));
    all(parts)
}

fn half_score_recovery() -> Outcome {
    let bank = QuestionBank::builtin();
    let settings = ExamSettings::default();
    let step = 0.9 / 900.0;
    let mut parts = Vec::new();
    for k in 1..=8 {
        let m = f64::from(k) / 10.0;
        let scorer = FnScorer::new(format!("logistic-{m}"), move |req| {
            let Some(Annotation::ShapePair { target: ShapeSpec::Ellipse { eccentricity }, .. }) = req.annotation else {
                return vec![0.0, 0.0];
            };
            let p_yes = 1.0 / (1.0 + ((eccentricity - m) / 0.02).exp());
            vec![p_yes.ln(), (1.0 - p_yes).ln()]
        });
        let field = run_shape_exam(&scorer, bank, ShapeSweep::Eccentricity, &settings).unwrap();
        let got = half_score_point(&field, ScanDirection::Ascending).unwrap();
        let ok = got.is_some_and(|x| (x - m).abs() <= step);
        parts.push(check(ok, format!("m={m}: {}", got.map_or("none".into(), |x| format!("{x:.5}")))));
    }
    all(parts)
}

fn toy_image_dir(root: &Path, classes: usize, per_class: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for c in 0..classes {
        let dir = root.join(format!("class{c}"));
        std::fs::create_dir_all(&dir).unwrap();
        let base = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
        for i in 0..per_class {
            let img = RgbImage::from_fn(48, 48, |x, y| {
                let n: u8 = rng.gen_range(0..24);
                Rgb([base[0].wrapping_add((x * 2) as u8 ^ n), base[1].wrapping_add((y * 3) as u8), base[2] ^ n])
            });
            img.save(dir.join(format!("img{i:03}.png"))).unwrap();
        }
    }
}

const PAPER_TRAIN: [(&str, usize); 9] = [
    ("color.yes_no", 1324),
    ("color.choice_1_2", 1324),
    ("shape.yes_no", 3360),
    ("shape.choice_1_2", 3360),
    ("semantic.yes_no", 3500),
    ("semantic.choice_1_2", 1820),
    ("patch_cross.patch_position", 3500),
    ("patch_self.patch_position", 3500),
    ("patch_mask.patch_position", 3500),
];
const PAPER_VAL: [(&str, usize); 9] = [
    ("color.yes_no", 284),
    ("color.choice_1_2", 284),
    ("shape.yes_no", 1680),
    ("shape.choice_1_2", 1680),
    ("semantic.yes_no", 1000),
    ("semantic.choice_1_2", 520),
    ("patch_cross.patch_position", 1500),
    ("patch_self.patch_position", 1500),
    ("patch_mask.patch_position", 1500),
];

fn dataset_statistics() -> Outcome {
    let mut parts = Vec::new();
    let defaults = SplitConfig::default();
    for (split, table) in [("train", PAPER_TRAIN), ("val", PAPER_VAL)] {
        let configured: Vec<(String, usize)> =
            defaults.cell_counts(split).unwrap().into_iter().map(|(c, n)| (c.key(), n)).collect();
        let mut expected: Vec<(String, usize)> = table.iter().map(|&(k, n)| (k.to_string(), n)).collect();
        expected.sort();
        parts.push(check(configured == expected, format!("{split} default counts")));
    }
    let color_shape = |split: &str| -> usize {
        defaults.cell_counts(split).unwrap().iter().filter(|(c, _)| matches!(c.category, Category::Color | Category::Shape)).map(|p| p.1).sum()
    };
    parts.push(check(color_shape("train") == 2648 + 6720 && color_shape("val") == 568 + 3360, "color/shape totals 9368/3928"));

    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("toy");
    toy_image_dir(&images, 5, 20);
    let mut cfg = SplitConfig::default();
    cfg.semantic_dirs.insert("train".into(), images.clone());
    cfg.semantic_dirs.insert("val".into(), images);
    let factor = 0.01;
    cfg.scale(&[Category::Semantic, Category::PatchCross, Category::PatchSelf, Category::PatchMask], factor);
    parts.push(check(cfg.validate().is_ok(), "pools validate as disjoint"));
    let out = tmp.path().join("data");
    let mut colors: HashMap<String, BTreeSet<ColorSpec>> = HashMap::new();
    let mut tuples: HashMap<String, BTreeSet<(u32, u64, u64)>> = HashMap::new();
    let mut seeds: HashMap<String, BTreeSet<u64>> = HashMap::new();
    for (split, table) in [("train", PAPER_TRAIN), ("val", PAPER_VAL)] {
        let summary = match generate_split(&cfg, split, &out, Parallelism::default()) {
            Ok(s) => s,
            Err(e) => return check(false, format!("generation failed: {e}")),
        };
        let mut mismatched = Vec::new();
        for (key, paper) in table {
            let got = summary.cells.get(key).map_or(0, |c| c.count);
            let cell = lens_core::datasetgen::Cell::parse(key).unwrap();
            let want = if matches!(cell.category, Category::Color | Category::Shape) {
                paper
            } else {
                (paper as f64 * factor).round() as usize
            };
            if got != want {
                mismatched.push(format!("{key} {got}!={want}"));
            }
        }
        parts.push(check(mismatched.is_empty(), format!("{split} generated {} records {mismatched:?}", summary.total())));
        for record in read_manifest(&out.join(split).join(MANIFEST_FILE)).unwrap() {
            match record.provenance {
                Provenance::Colors { pairs } => {
                    colors.entry(split.into()).or_default().extend(pairs.iter().flat_map(|&(a, b)| [a, b]));
                }
                Provenance::Shapes { pairs } => {
                    for s in pairs.iter().flat_map(|&(a, b)| [a, b]) {
                        if let ShapeSpec::Bezier(b) = s {
                            tuples.entry(split.into()).or_default().insert((b.points_count, b.point_radius.to_bits(), b.smoothness.to_bits()));
                            seeds.entry(split.into()).or_default().insert(b.seed);
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let shared_colors = colors["train"].intersection(&colors["val"]).count();
    let shared_tuples = tuples["train"].intersection(&tuples["val"]).count();
    let shared_seeds = seeds["train"].intersection(&seeds["val"]).count();
    parts.push(check(
        shared_colors + shared_tuples + shared_seeds == 0,
        format!(
            "train/val shared colors {shared_colors}, bezier tuples {shared_tuples}, seeds {shared_seeds} (of {}/{} colors)",
            colors["train"].len(),
            colors["val"].len()
        ),
    ));
    all(parts)
}

fn noise(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

fn patch_invariants(seed: u64) -> Result<(), String> {
    let (w, h) = (64, 64);
    let src = noise(seed, w, h);
    let donor = noise(seed ^ 0xD0D0, w, h);
    let tile = |img: &RgbImage, p: u8| crop(img, patch_rect(w, h, p));
    let changed = |img: &RgbImage| (1..=16u8).filter(|&p| tile(img, p) != tile(&src, p)).collect::<Vec<_>>();

    let (s, op) = apply_patch_op(&src, PatchOpKind::SelfSwap, seed, None).map_err(|e| e.to_string())?;
    let moved = changed(&s.image);
    if moved != op.touched || moved.len() != 2 {
        return Err(format!("self-swap changed {moved:?}, reported {:?}", op.touched));
    }
    if tile(&s.image, moved[0]) != tile(&src, moved[1]) || tile(&s.image, moved[1]) != tile(&src, moved[0]) {
        return Err("self-swap did not exchange the two patches".into());
    }

    let (s, op) = apply_patch_op(&src, PatchOpKind::CrossSwap, seed, Some(&donor)).map_err(|e| e.to_string())?;
    let moved = changed(&s.image);
    let from = op.donor_position.ok_or("cross-swap without donor position")?;
    if moved != op.touched || moved.len() != 1 || tile(&s.image, moved[0]) != tile(&donor, from) {
        return Err(format!("cross-swap changed {moved:?}, reported {:?}", op.touched));
    }

    let (s, op) = apply_patch_op(&src, PatchOpKind::Mask, seed, None).map_err(|e| e.to_string())?;
    let grid = s.crop("image").ok_or("mask output lacks image region")?;
    let black: Vec<u8> = (1..=16u8).filter(|&p| tile(&grid, p).pixels().all(|px| px.0 == [0, 0, 0])).collect();
    let probe = s.crop("probe").ok_or("mask output lacks probe region")?;
    let pp = op.probe_position.ok_or("mask without probe position")?;
    if black != op.touched || black.len() != 4 || changed(&grid) != black || !black.contains(&pp) || probe != tile(&src, pp) {
        return Err(format!("mask blacked {black:?}, reported {:?} probe {pp}", op.touched));
    }
    Ok(())
}

fn stimulus_geometry() -> Outcome {
    let canvas = ShapeCanvas::default();
    let circle = render_shape(&ShapeSpec::Circle, &canvas, 0).unwrap();
    let e0 = render_shape(&ShapeSpec::Ellipse { eccentricity: 0.0 }, &canvas, 0).unwrap();
    let mut parts = vec![check(circle.image.as_raw() == e0.image.as_raw(), "ellipse(e=0) == circle")];
    for e in [0.3, 0.6, 0.9] {
        let img = render_shape(&ShapeSpec::Ellipse { eccentricity: e }, &canvas, 0).unwrap();
        let (a, b) = ink_extents(&img.image).unwrap();
        let want = a * (1.0 - e * e).sqrt();
        parts.push(check((b - want).abs() <= 1.0, format!("e={e}: b={b} a*sqrt(1-e^2)={want:.2}")));
    }
    let failures: Vec<String> = (0..1000u64).filter_map(|s| patch_invariants(s).err().map(|e| format!("seed {s}: {e}"))).collect();
    parts.push(check(failures.is_empty(), format!("patch ops over 1000 seeds, {} failing {:?}", failures.len(), failures.first())));
    all(parts)
}

fn readiness_calibration() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("toy");
    toy_image_dir(&images, 4, 8);
    let counts = [
        ("color.yes_no", 600),
        ("color.choice_1_2", 600),
        ("shape.yes_no", 200),
        ("shape.choice_1_2", 200),
        ("semantic.yes_no", 200),
        ("semantic.choice_1_2", 100),
        ("patch_cross.patch_position", 50),
        ("patch_self.patch_position", 50),
        ("patch_mask.patch_position", 50),
    ];
    let mut cfg = SplitConfig::default();
    cfg.seed = 5;
    cfg.counts.remove("train");
    cfg.counts.insert("val".into(), counts.iter().map(|&(k, n)| (k.to_string(), n)).collect());
    cfg.semantic_dirs.insert("val".into(), images);
    if let Err(e) = generate_split(&cfg, "val", tmp.path(), Parallelism::default()) {
        return check(false, format!("generation failed: {e}"));
    }
    let root = tmp.path().join("val");
    let records = read_manifest(&root.join(MANIFEST_FILE)).unwrap();
    let settings = ExamSettings::default();
    let key: HashMap<String, String> = records.iter().map(|r| (r.id.clone(), r.answer.clone())).collect();
    let perfect = run_readiness(&MockOracle::new(MockOracleSpec::Perfect, 0).with_answer_key(key), &records, &root, &settings);
    let mut parts = vec![check(
        perfect.cells.len() == 9 && perfect.cells.values().all(|c| c.accuracy == 100.0 && c.failed == 0),
        format!("perfect: {} cells at 100%", perfect.cells.values().filter(|c| c.accuracy == 100.0).count()),
    )];
    let uniform = run_readiness(&MockOracle::new(MockOracleSpec::UniformRandom, 0), &records, &root, &settings);
    for (label, format, target) in [("yes/no", Format::YesNo, 50.0), ("3-option", Format::Choice12, 100.0 / 3.0)] {
        let pooled = uniform.cells.iter().filter(|(k, _)| {
            let f = lens_core::datasetgen::Cell::parse(k).unwrap().format;
            f == format || (format == Format::Choice12 && f == Format::PatchPosition)
        });
        let (correct, scored) = pooled.fold((0, 0), |(c, s), (_, a)| (c + a.correct, s + a.scored));
        let acc = 100.0 * correct as f64 / scored as f64;
        parts.push(check(scored >= 1000 && (acc - target).abs() <= 3.0, format!("uniform {label}: {acc:.1}% over {scored}")));
    }
    all(parts)
}

fn color_exam_end_to_end() -> Outcome {
    let bank = QuestionBank::builtin();
    let settings = ExamSettings::default();
    let mut sacs = Vec::new();
    let mut parts = Vec::new();
    for tau in [0.05, 0.1, 0.2] {
        let mock = MockOracle::new(MockOracleSpec::ColorDistance { tau }, 0);
        let field = run_color_exam(&mock, bank, ColorSpec::RED, WheelGrid::default(), &settings).unwrap();
        parts.push(check(field.len() == 50_000, format!("tau={tau}: {} entries", field.len())));
        sacs.push(sac(&field).unwrap().value);
    }
    parts.push(check(sacs.windows(2).all(|w| w[0] < w[1]), format!("SAC {sacs:.4?}")));
    all(parts)
}

fn color_correction() -> Outcome {
    let mut parts = Vec::new();
    let primaries = [ColorSpec::RED, ColorSpec::GREEN, ColorSpec::BLUE];
    let kron: Vec<SimilarityField> = primaries.iter().map(|&c| SimilarityField::kronecker(c, 32).unwrap()).collect();
    let img = RgbImage::from_fn(3, 1, |x, _| primaries[x as usize].to_rgb());
    let out = correct_image(&img, [&kron[0], &kron[1], &kron[2]], Parallelism::default()).unwrap();
    parts.push(check(out == img, "kronecker fields fix primaries"));

    let cube = ColorBins::new(32).unwrap();
    for reference in [ColorSpec::RED, ColorSpec::new(40, 200, 90)] {
        let field = build_similarity_field(&PixelMeanEmbedder::default(), reference, 32, &RunOptions::default()).unwrap();
        let unit = |c: ColorSpec| [f64::from(c.r) / 255.0, f64::from(c.g) / 255.0, f64::from(c.b) / 255.0];
        let cos = |a: [f64; 3], b: [f64; 3]| {
            let dot: f64 = (0..3).map(|k| a[k] * b[k]).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
        };
        let raw: Vec<f64> = (0..cube.len()).map(|i| cos(unit(reference), unit(cube.color(i)))).collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let worst = raw.iter().zip(&field.values).map(|(r, v)| ((r - lo) / (hi - lo) - v).abs()).fold(0.0, f64::max);
        parts.push(check(field.values.len() == 32_768 && worst <= 1e-6, format!("{reference}: max deviation {worst:.2e} over {} bins", field.values.len())));
    }

    let consts: Vec<SimilarityField> =
        [1.0, 0.5, 0.0].iter().zip(primaries).map(|(&v, c)| SimilarityField::constant(c, 32, v).unwrap()).collect();
    let px = RgbImage::from_pixel(1, 1, Rgb([17, 99, 230]));
    let out = correct_image(&px, [&consts[0], &consts[1], &consts[2]], Parallelism::Sequential).unwrap();
    parts.push(check(out.get_pixel(0, 0).0 == [255, 128, 0], format!("(1,0.5,0) -> {:?}", out.get_pixel(0, 0).0)));
    all(parts)
}

fn patch_map_shape() -> Outcome {
    let bank = QuestionBank::builtin();
    let target = RgbImage::from_fn(1536, 1536, |x, y| Rgb([(x / 6) as u8, (y / 6) as u8, ((x + y) / 12) as u8]));
    let reference = RgbImage::from_pixel(64, 64, Rgb([128, 128, 64]));
    let spec = PatchMapSpec { patch: 256, stride: 128, box_size: 64, reference_name: "ref".into(), target_name: "target".into() };
    let mock = MockOracle::new(MockOracleSpec::ColorDistance { tau: 0.3 }, 0);
    let run = |workers: usize| {
        let settings = ExamSettings {
            run: RunOptions::default().with_parallelism(if workers == 1 { Parallelism::Sequential } else { Parallelism::Threads(workers) }),
            ..Default::default()
        };
        run_patch_map(&mock, bank, &reference, &target, &spec, &settings).unwrap()
    };
    let one = run(1);
    let many = run(16);
    let bytes = |m: &lens_core::field::ScoreMap| serde_json::to_vec(m).unwrap();
    let spread = one.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) - one.scores.iter().copied().fold(f64::INFINITY, f64::min);
    all(vec![
        check((one.rows, one.cols) == (11, 11) && one.scores.len() == 121, format!("{}x{} windows", one.rows, one.cols)),
        check(bytes(&one) == bytes(&many), "1 and 16 workers byte-identical"),
        check(spread > 0.0, format!("score spread {spread:.3}")),
    ])
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("sac analytic oracle", Duration::from_secs(1), sac_oracle),
        ("sas analytic oracle and monotonicity", Duration::from_secs(1), sas_oracle),
        ("half-score recovery", Duration::from_secs(1), half_score_recovery),
        ("dataset statistics", Duration::from_secs(300), dataset_statistics),
        ("stimulus geometry", Duration::from_secs(30), stimulus_geometry),
        ("readiness calibration", Duration::from_secs(60), readiness_calibration),
        ("end-to-end color exam", Duration::from_secs(120), color_exam_end_to_end),
        ("color correction", Duration::from_secs(30), color_correction),
        ("patch map shape", Duration::from_secs(60), patch_map_shape),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let ok = outcome.ok && took <= budget;
        failed += usize::from(!ok);
        println!(
            "{} {name} ({:.2}s, budget {}s): {}",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
