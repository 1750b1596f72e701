//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use multiatlas::augment::{oversample_split, SmoteConfig, SplitKind, SplitMember};
use multiatlas::dataset::{make_stratified_folds, Label, SubjectRecord, TimeSeries};
use multiatlas::ensemble::{fuse, majority_vote, FusionMethod, MemberPrediction};
use multiatlas::eval::experiment::prepare_atlas;
use multiatlas::eval::{metrics, run_experiment, two_sample_ttest, ConfusionMatrix, PipelineConfig, TTestKind};
use multiatlas::gat::{GatConfig, GatModel, GraphInput, Sample};
use multiatlas::graphbuild::pearson_fcn;
use multiatlas::harmonize::{apply_combat, fit_combat};
use multiatlas::synth::{generate, SynthSpec};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn metric_formulas() -> Outcome {
    let start = Instant::now();
    let m = metrics(&ConfusionMatrix::new(72, 9, 47, 29)).map_err(|e| e.to_string())?;
    let expected = [75.80, 88.89, 61.84, 71.29, 79.12];
    let got: Vec<f64> = m.values().iter().map(|v| 100.0 * v.value().unwrap_or(f64::NAN)).collect();
    within(start.elapsed(), Duration::from_secs(1))?;
    let worst = got
        .iter()
        .zip(expected)
        .map(|(g, e)| (g - e).abs())
        .fold(0.0, f64::max);
    check(
        worst <= 0.01,
        format!("{got:.2?} vs {expected:?}, max deviation {worst:.4} pp"),
    )
}

fn gradient_fidelity() -> Outcome {
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (n, f) = (6, 7);
    let x = Array2::from_shape_fn((n, f), |_| rng.random_range(-1.0..1.0));
    let mut lists: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.5) || j == i + 1 {
                lists[i].push(j);
                lists[j].push(i);
            }
        }
    }
    for l in &mut lists {
        l.sort_unstable();
    }
    let adjacency = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let sample = Sample {
        graph: GraphInput::new(&x, &lists, &adjacency),
        label: Label::Negative,
    };
    let config = GatConfig {
        layer_count: 3,
        heads: 4,
        hidden_units: 8,
        dropout: 0.0,
        ..GatConfig::default()
    };
    let model = GatModel::new("G", f, config, 99).map_err(|e| e.to_string())?;
    let (_, _, grads) = model.loss_and_gradient(&sample, false, 0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (pi, p) in model.params.iter().enumerate() {
        for j in 0..p.data.len() {
            let loss_at = |delta: f64| {
                let mut m = model.clone();
                m.params[pi].data[j] += delta;
                m.loss_and_gradient(&sample, false, 0).unwrap().0
            };
            let numeric = (loss_at(STEP) - loss_at(-STEP)) / (2.0 * STEP);
            let analytic = grads[pi][j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            count += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    check(
        worst < 1e-4,
        format!("{count} parameters, max relative error {worst:.2e}, {:.1?}", start.elapsed()),
    )
}

fn literal_pearson(x: &Array2<f64>) -> Array2<f64> {
    let (t, n) = x.dim();
    let mut r = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mi = (0..t).map(|k| x[[k, i]]).sum::<f64>() / t as f64;
            let mj = (0..t).map(|k| x[[k, j]]).sum::<f64>() / t as f64;
            let mut num = 0.0;
            let mut di = 0.0;
            let mut dj = 0.0;
            for k in 0..t {
                num += (x[[k, i]] - mi) * (x[[k, j]] - mj);
                di += (x[[k, i]] - mi).powi(2);
                dj += (x[[k, j]] - mj).powi(2);
            }
            r[[i, j]] = num / (di.sqrt() * dj.sqrt());
        }
    }
    r
}

fn literal_vote(labels: &[Label], acc: &[f64]) -> Label {
    let pos = labels.iter().filter(|&&l| l == Label::Positive).count();
    let neg = labels.len() - pos;
    if pos > neg {
        return Label::Positive;
    }
    if neg > pos {
        return Label::Negative;
    }
    let best = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    labels[acc.iter().position(|&a| a == best).unwrap()]
}

fn literal_weighted(probs: &[[f64; 2]], acc: &[f64]) -> Label {
    let total: f64 = acc.iter().sum();
    let mut s = [0.0; 2];
    for c in 0..2 {
        for (p, a) in probs.iter().zip(acc) {
            s[c] += (a / total) * p[c];
        }
    }
    if s[1] > s[0] {
        Label::Positive
    } else {
        Label::Negative
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let mut pearson_worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Array2::from_shape_fn((20, 10), |_| rng.random_range(-3.0..3.0));
        let fast = pearson_fcn(&TimeSeries::new("P", x.clone()).unwrap()).map_err(|e| e.to_string())?;
        let slow = literal_pearson(&x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            pearson_worst = pearson_worst.max((a - b).abs());
        }
    }

    let mut vote_mismatches = 0;
    let mut vote_cases = 0;
    for pattern in 0u32..16 {
        let labels: Vec<Label> = (0..4)
            .map(|b| if pattern >> b & 1 == 1 { Label::Positive } else { Label::Negative })
            .collect();
        for trial in 0..40 {
            let mut acc: Vec<f64> = if trial % 2 == 0 {
                vec![0.6, 0.7, 0.8, 0.9]
            } else {
                (0..4).map(|_| [0.6, 0.75, 0.9][rng.random_range(0..3)]).collect()
            };
            acc.shuffle(&mut rng);
            let members: Vec<MemberPrediction> = labels
                .iter()
                .zip(&acc)
                .enumerate()
                .map(|(i, (&l, &a))| {
                    let p = rng.random_range(0.51..1.0);
                    let probs = if l == Label::Positive { [1.0 - p, p] } else { [p, 1.0 - p] };
                    MemberPrediction::new(format!("m{i}"), probs, a)
                })
                .collect();
            vote_cases += 1;
            if majority_vote(&members).map_err(|e| e.to_string())? != literal_vote(&labels, &acc) {
                vote_mismatches += 1;
            }
        }
    }

    let mut weighted_mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=6);
        let probs: Vec<[f64; 2]> = (0..m)
            .map(|_| {
                let p: f64 = rng.random();
                [1.0 - p, p]
            })
            .collect();
        let acc: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let members: Vec<MemberPrediction> = probs
            .iter()
            .zip(&acc)
            .map(|(&p, &a)| MemberPrediction::new("m", p, a))
            .collect();
        let got = fuse(FusionMethod::WeightedSum, &members).map_err(|e| e.to_string())?;
        if got != literal_weighted(&probs, &acc) {
            weighted_mismatches += 1;
        }
    }

    check(
        pearson_worst <= 1e-12 && vote_mismatches == 0 && weighted_mismatches == 0,
        format!(
            "pearson max |diff| {pearson_worst:.1e}; vote {vote_mismatches}/{vote_cases} mismatches; \
             weighted sum {weighted_mismatches}/1000 mismatches"
        ),
    )
}

fn brute_force_neighbors(pool: &[&[f64]], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..pool.len())
        .filter(|&j| j != i)
        .map(|j| {
            let s: f64 = pool[i].iter().zip(pool[j]).map(|(a, b)| (a - b).powi(2)).sum();
            (s, j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

fn smote_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let series: Vec<TimeSeries> = (0..500)
        .map(|_| TimeSeries::new("S", Array2::from_shape_fn((5, 10), |_| rng.sample(StandardNormal))).unwrap())
        .collect();
    let ids: Vec<String> = (0..500).map(|i| format!("s{i:03}")).collect();
    let labels: Vec<Label> = (0..500)
        .map(|i| if i % 3 == 0 { Label::Positive } else { Label::Negative })
        .collect();
    // The last 100 subjects play the role of a held-out test set.
    let train: Vec<SplitMember> = (0..400)
        .map(|i| SplitMember {
            id: &ids[i],
            label: labels[i],
            series: &series[i],
        })
        .collect();
    let cfg = SmoteConfig {
        k_neighbors: 3,
        multiplier: 2.0,
        seed: 5,
    };
    let out = oversample_split(SplitKind::Train, &train, &cfg).map_err(|e| e.to_string())?;

    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let flat: Vec<&[f64]> = series.iter().map(|s| s.values.as_slice().unwrap()).collect();
    let mut worst: f64 = 0.0;
    let mut neighbor_failures = 0;
    let mut leaked = 0;
    let mut synthetic = 0;
    for s in out.iter().filter(|s| s.synthetic) {
        synthetic += 1;
        let p = s.provenance.as_ref().ok_or("synthetic sample without provenance")?;
        let (a, b) = (index[p.source.as_str()], index[p.neighbor.as_str()]);
        if a >= 400 || b >= 400 {
            leaked += 1;
            continue;
        }
        for ((v, xa), xb) in s.series.values.iter().zip(flat[a]).zip(flat[b]) {
            worst = worst.max((v - (xa + p.gap * (xb - xa))).abs());
        }
        let class: Vec<usize> = (0..400).filter(|&j| labels[j] == s.label).collect();
        let pool: Vec<&[f64]> = class.iter().map(|&j| flat[j]).collect();
        let local = class.iter().position(|&j| j == a).unwrap();
        let nn: Vec<usize> = brute_force_neighbors(&pool, local, 3).iter().map(|&j| class[j]).collect();
        if labels[a] != s.label || !nn.contains(&b) || !(0.0..=1.0).contains(&p.gap) {
            neighbor_failures += 1;
        }
    }
    let count = |l: Label, synth: bool| out.iter().filter(|s| s.label == l && s.synthetic == synth).count();
    let doubled = [Label::Positive, Label::Negative]
        .iter()
        .all(|&l| count(l, true) == count(l, false));

    // Inside the pipeline the test split of every fold stays purely real.
    let spec = SynthSpec {
        site_sizes: vec![24; 2],
        time_points: 30,
        atlases: vec![multiatlas::dataset::AtlasSpec {
            name: "A".into(),
            n_rois: 12,
        }],
        ..SynthSpec::default()
    };
    let (cohort, _) = generate(&spec).map_err(|e| e.to_string())?;
    let plan = make_stratified_folds(&cohort, 4, 3).map_err(|e| e.to_string())?;
    let mut pipeline = PipelineConfig {
        fold_count: 4,
        knn_k: 4,
        ..PipelineConfig::default()
    };
    pipeline.smote.k_neighbors = 1;
    let mut test_isolated = true;
    for fold in &plan.folds {
        let data = prepare_atlas(&cohort, fold, "A", &pipeline, true).map_err(|e| e.to_string())?;
        test_isolated &= data.test_ids == fold.test
            && data.test.len() == fold.test.len()
            && data.sizes.train_total == 2 * data.sizes.train_real
            && data.sizes.validation_total == 2 * data.sizes.validation_real;
    }

    check(
        worst <= 1e-9 && neighbor_failures == 0 && leaked == 0 && doubled && test_isolated,
        format!(
            "{synthetic} synthetic, segment max error {worst:.1e}, neighbor failures {neighbor_failures}, \
             held-out sources {leaked}, classes doubled {doubled}, test folds real-only {test_isolated}"
        ),
    )
}

fn harmonization() -> Outcome {
    const SITES: u32 = 4;
    const PER_SITE: usize = 40;
    const AGE_SLOPE: f64 = 0.05;
    let (t, n) = (8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = Array2::from_shape_fn((t, n), |_| rng.random_range(-1.0..1.0));
    let mut subjects = Vec::new();
    for site in 1..=SITES {
        let shift = 5.0 * (site - 1) as f64;
        for j in 0..PER_SITE {
            // Older subjects at later sites so site and age are confounded.
            let age = 25.0 + 8.0 * site as f64 + rng.random_range(0.0..15.0);
            let values = Array2::from_shape_fn((t, n), |(a, b)| {
                base[[a, b]] + shift + AGE_SLOPE * age + rng.sample::<f64, _>(StandardNormal)
            });
            let mut series = BTreeMap::new();
            series.insert("H".to_string(), TimeSeries::new("H", values).unwrap());
            subjects.push(SubjectRecord {
                id: format!("h{site}-{j}"),
                site,
                label: if j % 2 == 0 { Label::Positive } else { Label::Negative },
                age,
                sex: (j % 3 == 0) as u8,
                series,
            });
        }
    }
    let refs: Vec<&SubjectRecord> = subjects.iter().collect();
    let model = fit_combat(&refs, "H", false).map_err(|e| e.to_string())?;
    let out: Vec<TimeSeries> = subjects
        .iter()
        .map(|s| apply_combat(&model, s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    // Site means after removing the fitted covariate effects.
    let features = t * n;
    let mut spread: f64 = 0.0;
    for f in 0..features {
        let means: Vec<f64> = (1..=SITES)
            .map(|site| {
                let rows: Vec<f64> = subjects
                    .iter()
                    .zip(&out)
                    .filter(|(s, _)| s.site == site)
                    .map(|(s, h)| {
                        h.values.as_slice().unwrap()[f]
                            - model.beta["age"][f] * s.age
                            - model.beta["sex"][f] * s.sex as f64
                    })
                    .collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect();
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        spread = spread.max(hi - lo);
    }

    // Pooled least-squares slope of the harmonized values on age.
    let ages: Vec<f64> = subjects.iter().map(|s| s.age).collect();
    let age_mean = ages.iter().sum::<f64>() / ages.len() as f64;
    let sxx: f64 = ages.iter().map(|a| (a - age_mean).powi(2)).sum();
    let slope_of = |values: &dyn Fn(usize, usize) -> f64| {
        (0..features)
            .map(|f| {
                let ys: Vec<f64> = (0..subjects.len()).map(|i| values(i, f)).collect();
                let ym = ys.iter().sum::<f64>() / ys.len() as f64;
                ys.iter().zip(&ages).map(|(y, a)| (y - ym) * (a - age_mean)).sum::<f64>() / sxx
            })
            .sum::<f64>()
            / features as f64
    };
    let raw_slope = slope_of(&|i, f| subjects[i].series["H"].values.as_slice().unwrap()[f]);
    let slope = slope_of(&|i, f| out[i].values.as_slice().unwrap()[f]);
    let rel = (slope - AGE_SLOPE).abs() / AGE_SLOPE;
    check(
        spread < 1e-3 && rel < 0.05,
        format!(
            "site-mean spread {spread:.1e}; age slope {slope:.4} vs planted {AGE_SLOPE} \
             ({:.1}% error, {raw_slope:.4} before harmonization)",
            100.0 * rel
        ),
    )
}

fn benchmark_run(spec: &SynthSpec, cfg: &PipelineConfig) -> Result<multiatlas::eval::ExperimentReport, String> {
    let (cohort, _) = generate(spec).map_err(|e| e.to_string())?;
    let plan = make_stratified_folds(&cohort, cfg.fold_count, cfg.seed).map_err(|e| e.to_string())?;
    run_experiment(&cohort, &plan, cfg).map_err(|e| e.to_string())
}

fn mean_accuracy(stats: &multiatlas::eval::experiment::MetricStats) -> f64 {
    stats.accuracy.mean.unwrap_or(f64::NAN)
}

fn end_to_end(first_summary: &mut Option<String>) -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig::benchmark();
    let easy = benchmark_run(&SynthSpec::default(), &cfg)?;
    *first_summary = Some(serde_json::to_string_pretty(&easy.summary).unwrap());
    let null_spec = SynthSpec {
        signal_strength: 0.0,
        seed: 1,
        ..SynthSpec::default()
    };
    let null = benchmark_run(&null_spec, &cfg)?;
    let elapsed = start.elapsed();

    let vote = mean_accuracy(&easy.summary.methods[&FusionMethod::MajorityVote]);
    let atlases: Vec<(String, f64)> = easy
        .summary
        .atlases
        .iter()
        .map(|(a, s)| (a.clone(), mean_accuracy(s)))
        .collect();
    let null_vote = mean_accuracy(&null.summary.methods[&FusionMethod::MajorityVote]);
    let atlas_text: Vec<String> = atlases.iter().map(|(a, v)| format!("{a} {v:.3}")).collect();
    within(elapsed, Duration::from_secs(600))?;
    check(
        vote >= 0.85 && atlases.iter().all(|(_, v)| *v >= 0.70) && (0.40..=0.60).contains(&null_vote),
        format!(
            "vote {vote:.3}; {}; null vote {null_vote:.3}; {elapsed:.0?}",
            atlas_text.join(", ")
        ),
    )
}

fn determinism(first_summary: Option<String>) -> Outcome {
    let first = first_summary.ok_or("benchmark run did not complete")?;
    // Second run on a different thread count.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .map_err(|e| e.to_string())?;
    let again = pool.install(|| benchmark_run(&SynthSpec::default(), &PipelineConfig::benchmark()))?;
    let second = serde_json::to_string_pretty(&again.summary).unwrap();
    check(
        first == second,
        format!("summary JSON {} bytes, identical: {}", first.len(), first == second),
    )
}

fn t_test() -> Outcome {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [3.0, 4.0, 5.0, 6.0, 7.0];
    let r = two_sample_ttest(&a, &b, TTestKind::default()).map_err(|e| e.to_string())?;
    check(
        (r.t + 2.0).abs() < 1e-12 && (r.p - 0.0805).abs() <= 0.002,
        format!("t = {:.6}, df = {:.1}, p = {:.6}", r.t, r.df, r.p),
    )
}

fn main() {
    let mut summary = None;
    let results: Vec<(&str, Outcome)> = vec![
        ("1 metric formulas", metric_formulas()),
        ("2 gradient fidelity", gradient_fidelity()),
        ("3 oracle equivalence", oracle_equivalence()),
        ("4 SMOTE geometry", smote_geometry()),
        ("5 harmonization", harmonization()),
        ("6 end-to-end benchmark", end_to_end(&mut summary)),
        ("7 determinism", determinism(summary.take())),
        ("8 t-test", t_test()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
