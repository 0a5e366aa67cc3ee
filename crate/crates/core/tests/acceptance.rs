//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxgeom::actdump::{ActivationSet, ConditionLabel, ContextKind, DumpError, TruthSide};
use ctxgeom::contextgen::{self, ContextInput, GeneratorResources, Lexicon, PosTag, SaladTemplates};
use ctxgeom::geometry::{self, CurveOptions, PhaseParams, Quantity};
use ctxgeom::probes::{self, ProbeFamily, ProbeHyper};
use ctxgeom::report::{self, OutputFormat, RunConfig, SyntheticSpec};
use ctxgeom::stats::{self, Alternative};
use ctxgeom::Exec;

type Criterion = (&'static str, fn() -> Outcome);
type Corruption = (&'static str, Vec<u8>, fn(&DumpError) -> bool);

struct Outcome {
    ok: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome { ok: true, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome { ok: false, detail: detail.into() }
}

fn within(limit: Duration, start: Instant, mut outcome: Outcome) -> Outcome {
    let elapsed = start.elapsed();
    outcome.detail = format!("{} [{:.2}s, limit {}s]", outcome.detail, elapsed.as_secs_f64(), limit.as_secs());
    if elapsed > limit {
        outcome.ok = false;
    }
    outcome
}

// -- double-double helpers for the angle reference --------------------------

#[derive(Clone, Copy)]
struct Dd(f64, f64);

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd(s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd(p, a.mul_add(b, -p))
}

fn dd_add(x: Dd, y: Dd) -> Dd {
    let s = two_sum(x.0, y.0);
    let t = s.1 + x.1 + y.1;
    two_sum(s.0, t)
}

fn dd_mul(x: Dd, y: Dd) -> Dd {
    let p = two_prod(x.0, y.0);
    two_sum(p.0, p.1 + x.0 * y.1 + x.1 * y.0)
}

fn dd_dot(a: &[f64], b: &[f64]) -> Dd {
    a.iter().zip(b).fold(Dd(0.0, 0.0), |acc, (x, y)| dd_add(acc, two_prod(*x, *y)))
}

/// Angle in degrees from `atan2(√(|a|²|b|² − (a·b)²), a·b)`, with the
/// Lagrange-identity subtraction carried in double-double.
fn reference_theta(a: &[f64], b: &[f64]) -> f64 {
    let dot = dd_dot(a, b);
    let cross_sq = dd_add(dd_mul(dd_dot(a, a), dd_dot(b, b)), dd_mul(Dd(-dot.0, -dot.1), dot));
    let sin_part = (cross_sq.0 + cross_sq.1).max(0.0).sqrt();
    sin_part.atan2(dot.0 + dot.1).to_degrees()
}

fn theta_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut worst = 0.0f64;
    for &d in &[2usize, 64, 4096] {
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = match geometry::theta_degrees(&b, &a) {
                Ok(t) => t,
                Err(e) => return fail(format!("d={d}: {e}")),
            };
            worst = worst.max((got - reference_theta(&b, &a)).abs());
        }
    }
    let mut nan = 0;
    for i in 0..1000 {
        let d = [2, 64, 4096][i % 3];
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = [0.0, 1e-16, 1e-12, 1e-8][i % 4];
        let sign = if i % 5 == 0 { -1.0 } else { 1.0 };
        let b: Vec<f64> = a.iter().map(|x| sign * x * (1.0 + eps * rng.random_range(-1.0..1.0))).collect();
        match geometry::theta_degrees(&b, &a) {
            Ok(t) if t.is_finite() && (0.0..=180.0).contains(&t) => {}
            _ => nan += 1,
        }
    }
    let detail = format!("max |Δθ| = {worst:.3e}°, non-finite near-collinear = {nan}");
    let outcome = if worst <= 1e-5 && nan == 0 { pass(detail) } else { fail(detail) };
    within(Duration::from_secs(10), start, outcome)
}

fn rm_analytic() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for &s in &[0.5, 1.0, 1.3, 2.0] {
        for _ in 0..100 {
            let v_nc: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v_c: Vec<f64> = v_nc.iter().map(|x| s * x).collect();
            let rm = geometry::rel_magnitude(&v_c, &v_nc).unwrap();
            worst = worst.max((rm - s * s).abs() / (s * s));
        }
        let set = report::gen_synthetic(&SyntheticSpec::constant(16, 2, 32, 0.0, s * s), 1).unwrap();
        let curve = geometry::layer_curve(&set, Quantity::RmTcFc, &CurveOptions::default()).unwrap();
        for p in &curve.points {
            worst = worst.max((p.mean.unwrap() - s * s).abs() / (s * s));
        }
    }
    let detail = format!("max relative error = {worst:.3e}");
    let outcome = if worst <= 1e-6 { pass(detail) } else { fail(detail) };
    within(Duration::from_secs(1), start, outcome)
}

fn planted_geometry() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec::three_phase(64, 30, 64);
    let set = report::gen_synthetic(&spec, 2024).unwrap();
    let curve = geometry::layer_curve(&set, Quantity::ThetaDegrees, &CurveOptions::default()).unwrap();
    let worst = curve
        .points
        .iter()
        .zip(&spec.theta_deg)
        .map(|(p, planted)| p.mean.map_or(f64::INFINITY, |m| (m - planted).abs()))
        .fold(0.0, f64::max);
    let outcome = match geometry::phase_segment(&curve, PhaseParams::default()) {
        Ok(o) => match o.segmentation() {
            Some(seg) => {
                let detail = format!(
                    "max |θ − planted| = {worst:.3}°, p2 = {}, p3 = {} (planted 9, 16)",
                    seg.p2_start, seg.p3_start
                );
                if worst <= 3.0 && seg.p2_start.abs_diff(9) <= 1 && seg.p3_start.abs_diff(16) <= 1 {
                    pass(detail)
                } else {
                    fail(detail)
                }
            }
            None => fail(format!("no phases found: {o:?}")),
        },
        Err(e) => fail(e.to_string()),
    };
    within(Duration::from_secs(30), start, outcome)
}

/// Upper-tail probability of W+ by listing all 2^n sign assignments.
fn enumerate_p_greater(diffs: &[f64]) -> f64 {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let below = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = nonzero.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let n = nonzero.len();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn wilcoxon_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 500 {
        let n = rng.random_range(6..=12);
        // Coarse values so that tied magnitudes occur regularly.
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5..=5) as f64 * 0.5).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5..=5) as f64 * 0.5).collect();
        let diffs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        if diffs.iter().filter(|d| **d != 0.0).count() < 5 {
            continue;
        }
        let got = stats::wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap().p_value;
        worst = worst.max((got - enumerate_p_greater(&diffs)).abs());
        cases += 1;
    }
    let all_positive = stats::wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6], Alternative::Greater)
        .unwrap()
        .p_value;
    let detail = format!("{cases} cases, max |Δp| = {worst:.3e}, all-positive n=6 p = {all_positive}");
    let outcome = if worst <= 1e-12 && all_positive == 0.015625 { pass(detail) } else { fail(detail) };
    within(Duration::from_secs(60), start, outcome)
}

fn bonferroni_exact() -> Outcome {
    let a = stats::bonferroni(0.05, 160).unwrap();
    let b = stats::bonferroni(0.05, 320).unwrap();
    let detail = format!("0.05/160 = {a}, 0.05/320 = {b}");
    if a == 0.0003125 && b == 0.00015625 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn probe_sanity() -> Outcome {
    let start = Instant::now();
    let data = probes::gaussian_fixture(500, 32, 10.0, 17);
    let (train, test) = probes::split_rows(&data, 0.8, 18).unwrap();
    let shuffled = probes::shuffle_labels(&data, 19);
    let (s_train, s_test) = probes::split_rows(&shuffled, 0.8, 18).unwrap();
    let hyper = ProbeHyper { seed: 20, ..ProbeHyper::default() };
    let mut ok = true;
    let mut parts = Vec::new();
    for family in ProbeFamily::ALL {
        let acc = probes::train(family, &train, &hyper).unwrap().accuracy(&test);
        let control = probes::train(family, &s_train, &hyper).unwrap().accuracy(&s_test);
        ok &= acc >= 0.99 && (0.40..=0.60).contains(&control);
        parts.push(format!("{} {acc:.3}/{control:.3}", family.name()));
    }
    // Class means accumulated row by row, as a reader of the data would.
    let mass_mean = probes::train(ProbeFamily::MassMean, &train, &hyper).unwrap();
    let mut sums = [vec![0.0f64; 32], vec![0.0f64; 32]];
    let mut counts = [0usize; 2];
    for i in 0..train.len() {
        let class = usize::from(!train.y[i]);
        for (s, v) in sums[class].iter_mut().zip(train.row(i)) {
            *s += v;
        }
        counts[class] += 1;
    }
    let expected: Vec<f64> = (0..32)
        .map(|j| sums[0][j] / counts[0] as f64 - sums[1][j] / counts[1] as f64)
        .collect();
    let bitwise = mass_mean.direction().unwrap() == expected.as_slice();
    ok &= bitwise;
    let detail = format!("test/control accuracy: {}; mass-mean bitwise = {bitwise}", parts.join(", "));
    within(Duration::from_secs(120), start, if ok { pass(detail) } else { fail(detail) })
}

fn context_generators() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vocab: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
    let lexicon = Lexicon::from_words(vocab.clone())
        .with_tagged(PosTag::Article, ["the", "a"])
        .with_tagged(PosTag::Adjective, ["green", "quiet", "heavy"])
        .with_tagged(PosTag::Noun, ["table", "river", "idea"])
        .with_tagged(PosTag::Verb, ["runs", "sleeps"])
        .with_tagged(PosTag::Adverb, ["slowly", "loudly"]);
    let corpus: String = (0..5000).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect::<Vec<_>>().join(" ");
    let resources = GeneratorResources { lexicon, templates: SaladTemplates::default(), corpus };
    let inputs: Vec<ContextInput> = (0..1000)
        .map(|i| {
            let len = rng.random_range(1..=80);
            ContextInput {
                statement_id: format!("s{i}"),
                context: (0..len).map(|j| format!("t{i}x{j}")).collect::<Vec<_>>().join(" "),
            }
        })
        .collect();
    let mut problems = Vec::new();
    for kind in [ContextKind::RandChar, ContextKind::RandWord, ContextKind::RandSalad, ContextKind::RandWiki] {
        let records = contextgen::generate(kind, &inputs, &resources, 42, Exec::default()).unwrap();
        let mismatched = records
            .iter()
            .zip(&inputs)
            .filter(|(r, i)| {
                let target = contextgen::word_count(&i.context);
                r.word_count != target || contextgen::word_count(&r.context) != target
            })
            .count();
        if mismatched > 0 || records.len() != 1000 {
            problems.push(format!("{kind}: {mismatched} length mismatches"));
        }
    }
    let shuffled = contextgen::generate(ContextKind::RandShuffle, &inputs, &resources, 42, Exec::default()).unwrap();
    let own_kept = shuffled.iter().zip(&inputs).filter(|(r, i)| r.context == i.context && r.statement_id == i.statement_id).count();
    let ids_kept = shuffled.iter().zip(&inputs).all(|(r, i)| r.statement_id == i.statement_id);
    if own_kept > 0 || !ids_kept {
        problems.push(format!("shuffle kept {own_kept} own contexts"));
    }
    let mut seen = BTreeSet::new();
    for seed in 0..1000 {
        let perm = contextgen::derangement(4, seed).unwrap();
        if perm.iter().enumerate().any(|(i, &p)| i == p) {
            problems.push(format!("seed {seed} gave a fixed point"));
        }
        seen.insert(perm);
    }
    let flesch = contextgen::flesch_score("The cat sat.").unwrap();
    if (flesch - 119.19).abs() > 0.01 {
        problems.push(format!("Flesch = {flesch}"));
    }
    let detail = format!("distinct length-4 derangements = {}, Flesch(\"The cat sat.\") = {flesch:.2}", seen.len());
    let outcome = if problems.is_empty() && seen.len() == 9 {
        pass(detail)
    } else {
        fail(format!("{detail}; {}", problems.join("; ")))
    };
    within(Duration::from_secs(30), start, outcome)
}

fn random_set(rng: &mut ChaCha8Rng) -> ActivationSet {
    let (k, l, d) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..9));
    let mut conditions = ConditionLabel::BASE.to_vec();
    for kind in ContextKind::RANDOM {
        if rng.random_bool(0.3) {
            conditions.push(ConditionLabel::new(TruthSide::True, kind));
            conditions.push(ConditionLabel::new(TruthSide::False, kind));
        }
    }
    let n = conditions.len() * k * l * d;
    let tensor: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random_range(0..0x7f80_0000u32)) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let mask = (0..conditions.len()).map(|_| (0..k).map(|_| rng.random_bool(0.8)).collect()).collect();
    let ids = (0..k).map(|i| format!("stmt-{i}-{}", rng.random::<u32>())).collect();
    ActivationSet::new("model/x", l, d, ids, conditions, tensor, mask).unwrap()
}

fn with_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + h]).unwrap();
    edit(&mut header);
    let new_header = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
    out.extend_from_slice(&new_header);
    out.extend_from_slice(&bytes[16 + h..]);
    out
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut mismatches = 0;
    for _ in 0..100 {
        let set = random_set(&mut rng);
        let bytes = set.to_bytes().unwrap();
        let back = ActivationSet::from_bytes(&bytes).unwrap();
        let same_bits = back.tensor().iter().zip(set.tensor()).all(|(a, b)| a.to_bits() == b.to_bits());
        if back.to_bytes().unwrap() != bytes || !same_bits || back.statement_ids() != set.statement_ids() {
            mismatches += 1;
        }
    }
    let base = {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        loop {
            let s = random_set(&mut r);
            if s.tensor().len() >= 2 {
                break s.to_bytes().unwrap();
            }
        }
    };
    let h = u64::from_le_bytes(base[8..16].try_into().unwrap()) as usize;
    let mut cases: Vec<Corruption> = Vec::new();
    let mut bad_magic = base.clone();
    bad_magic[0] = b'X';
    cases.push(("bad magic", bad_magic, |e| matches!(e, DumpError::BadMagic(_))));
    cases.push(("empty file", Vec::new(), |e| matches!(e, DumpError::SizeMismatch { .. })));
    cases.push(("cut in preamble", base[..10].to_vec(), |e| matches!(e, DumpError::SizeMismatch { .. })));
    cases.push(("cut in header", base[..16 + h / 2].to_vec(), |e| matches!(e, DumpError::SizeMismatch { .. })));
    cases.push(("cut in payload", base[..base.len() - 4].to_vec(), |e| matches!(e, DumpError::SizeMismatch { .. })));
    let mut extra = base.clone();
    extra.push(0);
    cases.push(("trailing byte", extra, |e| matches!(e, DumpError::SizeMismatch { .. })));
    let mut huge = base.clone();
    huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    cases.push(("header length overflow", huge, |e| matches!(e, DumpError::SizeMismatch { .. })));
    let mut version = base.clone();
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    cases.push(("unknown version", version, |e| matches!(e, DumpError::UnsupportedVersion(2))));
    let mut nan = base.clone();
    let at = 16 + h;
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    cases.push(("NaN payload", nan, |e| matches!(e, DumpError::NonFinite { .. })));
    cases.push((
        "dtype f16",
        with_header(&base, |v| v["dtype"] = "f16".into()),
        |e| matches!(e, DumpError::Dtype(_)),
    ));
    let mut wrong = Vec::new();
    for (name, bytes, expected) in &cases {
        match ActivationSet::from_bytes(bytes) {
            Err(e) if expected(&e) => {}
            other => wrong.push(format!("{name}: {:?}", other.err())),
        }
    }
    let detail = format!("100 round trips, {mismatches} mismatches; {} corruption cases, {} misreported", cases.len(), wrong.len());
    if mismatches == 0 && wrong.is_empty() {
        pass(detail)
    } else {
        fail(format!("{detail}: {}", wrong.join("; ")))
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let set = report::gen_synthetic(&SyntheticSpec::three_phase(32, 12, 16), 8).unwrap();
    let bundle = report::synthetic_unembedding(32, 16, 9).unwrap();
    let dump = tmp.path().join("synthetic.tvd");
    let unembed = tmp.path().join("unembed.tvd");
    ctxgeom::actdump::write_dump(&set, &dump).unwrap();
    ctxgeom::actdump::write_unembedding(&bundle, &unembed).unwrap();
    let config = |out: &str, exec: Exec| RunConfig {
        dump: Some(dump.clone()),
        unembed: Some(unembed.clone()),
        out_dir: tmp.path().join(out),
        dataset: "synthetic".into(),
        format: OutputFormat::Both,
        seed: 3,
        probe_hyper: ProbeHyper { mlp_width: 32, mlp_epochs: 20, ..ProbeHyper::default() },
        exec,
        ..RunConfig::default()
    };
    let runs = [("a", Exec::default()), ("b", Exec::default()), ("c", Exec::Sequential)];
    for (name, exec) in runs {
        if let Err(e) = report::run_pipeline(&config(name, exec)) {
            return fail(format!("run {name}: {e}"));
        }
    }
    let a = read_tree(&tmp.path().join("a"));
    let b = read_tree(&tmp.path().join("b"));
    let c = read_tree(&tmp.path().join("c"));
    let detail = format!("{} files per run; repeat identical = {}, sequential identical = {}", a.len(), a == b, a == c);
    if a == b && a == c && !a.is_empty() {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("theta oracle", theta_oracle),
        ("relative magnitude analytic", rm_analytic),
        ("planted geometry recovery", planted_geometry),
        ("wilcoxon exactness", wilcoxon_exactness),
        ("bonferroni thresholds", bonferroni_exact),
        ("probe sanity", probe_sanity),
        ("context generators", context_generators),
        ("format round trip and corruption", format_round_trip),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = check();
        println!("{} {name}: {}", if outcome.ok { "PASS" } else { "FAIL" }, outcome.detail);
        if !outcome.ok {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
